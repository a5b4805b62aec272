#include "udaseg/augrules.hpp"

#include <cstdio>
#include <sstream>

#include "udaseg/imgops.hpp"

namespace udaseg::aug {

const char* to_string(RuleOrder o) { return o == RuleOrder::VsThenCochlea ? "vs-then-cochlea" : "cochlea-then-vs"; }

RuleOrder parse_rule_order(const std::string& s) {
  if (s == "vs-then-cochlea") return RuleOrder::VsThenCochlea;
  if (s == "cochlea-then-vs") return RuleOrder::CochleaThenVs;
  fail(ErrorKind::InvalidArgument, "unknown rule order '" + s + "' (expected vs-then-cochlea or cochlea-then-vs)");
}

void AugmentConfig::validate() const {
  require(vs_attenuation > 0.0 && vs_attenuation <= 1.0, ErrorKind::InvalidArgument,
          "augment: vs_attenuation must be in (0, 1]");
  require(vs_apply_prob >= 0.0 && vs_apply_prob <= 1.0, ErrorKind::InvalidArgument,
          "augment: vs_apply_prob must be in [0, 1]");
  require(cochlea_lo_pct >= 0.0 && cochlea_lo_pct < cochlea_hi_pct && cochlea_hi_pct <= 100.0,
          ErrorKind::InvalidArgument, "augment: need 0 <= lo < hi <= 100 percentiles");
  require(smooth_sigma > 0.0, ErrorKind::InvalidArgument, "augment: smooth_sigma must be > 0");
}

namespace {

void require_match(const Volume& v, const LabelMap& m) {
  require(v.geometry().dims == m.geometry().dims, ErrorKind::InvalidArgument,
          "augment: label map does not match the volume grid");
}

double uniform01(Rng& rng) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng); }

}  // namespace

VsResult augment_vs(const Volume& v, const LabelMap& m, const AugmentConfig& cfg, Rng& rng) {
  cfg.validate();
  require_match(v, m);
  // Always consume the draw so later draws on the stream do not depend on the probability.
  const bool applied = uniform01(rng) < cfg.vs_apply_prob;
  if (!applied) return {v, false};
  std::vector<float> data = v.data();
  const auto lab = m.values();
  const auto factor = static_cast<float>(cfg.vs_attenuation);
  for (std::size_t i = 0; i < data.size(); ++i)
    if (lab[i] == label::kVs) data[i] *= factor;
  return {Volume(v.geometry(), std::move(data)), true};
}

Volume augment_cochlea(const Volume& v, const LabelMap& m, const AugmentConfig& cfg, Rng& rng,
                       CochleaTrace* trace) {
  cfg.validate();
  require_match(v, m);
  CochleaTrace local;
  CochleaTrace& t = trace ? *trace : local;
  t = {};
  const VoxelMask mask = class_mask(m, label::kCochlea);
  double sum = 0.0;
  std::int64_t n = 0;
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i]) {
      sum += v.data()[i];
      ++n;
    }
  if (n == 0) return v;
  t.cochlea_mean = sum / double(n);
  t.lo = percentile(v, cfg.cochlea_lo_pct);
  t.hi = percentile(v, cfg.cochlea_hi_pct);
  if (t.cochlea_mean >= t.lo) return v;
  t.gate_fired = true;

  std::uniform_real_distribution<double> draw(t.lo, t.hi);
  std::vector<float> data = v.data();
  const double shared = draw(rng);
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (!mask[i]) continue;
    // float rounding may step just outside [lo, hi]; keep the stored value inside.
    auto x = static_cast<float>(cfg.cochlea_per_voxel ? draw(rng) : shared);
    if (double(x) < t.lo) x = std::nextafter(x, INFINITY);
    if (double(x) > t.hi) x = std::nextafter(x, -INFINITY);
    data[i] = x;
    t.replaced.push_back(x);
  }
  const double s = cfg.smooth_sigma;
  return gaussian_smooth_3d(Volume(v.geometry(), std::move(data)), {s, s, s}, std::span<const std::uint8_t>(mask));
}

std::string format_audit(const std::vector<AuditEntry>& entries) {
  std::ostringstream os;
  os << "case_id\tvs_applied\tcochlea_gate_fired\tlo\thi\n";
  char buf[64];
  for (const auto& e : entries) {
    std::snprintf(buf, sizeof buf, "\t%.6f\t%.6f\n", e.lo, e.hi);
    os << e.case_id << '\t' << int(e.vs_applied) << '\t' << int(e.cochlea_gate_fired) << buf;
  }
  return os.str();
}

std::vector<Case> augment_pool(const std::vector<const Case*>& cases, const AugmentConfig& cfg,
                               std::vector<AuditEntry>* audit) {
  cfg.validate();
  std::vector<Case> out;
  out.reserve(cases.size());
  for (const Case* c : cases) {
    require(c->labels.has_value(), ErrorKind::InvalidArgument, "augment_pool: case " + c->id + " has no labels");
    try {
      Rng rng(stream_seed(cfg.seed, {hash_string(c->id)}));
      AuditEntry e{c->id};
      CochleaTrace trace;
      Volume v = c->volume;
      if (cfg.order == RuleOrder::VsThenCochlea) {
        VsResult r = augment_vs(v, *c->labels, cfg, rng);
        e.vs_applied = r.applied;
        v = augment_cochlea(r.volume, *c->labels, cfg, rng, &trace);
      } else {
        // Draw order on the stream stays VS first so both orders see the same decisions.
        const bool applied = uniform01(rng) < cfg.vs_apply_prob;
        v = augment_cochlea(v, *c->labels, cfg, rng, &trace);
        AugmentConfig forced = cfg;
        forced.vs_apply_prob = applied ? 1.0 : 0.0;
        Rng unused(0);
        e.vs_applied = applied;
        v = augment_vs(v, *c->labels, forced, unused).volume;
      }
      e.cochlea_gate_fired = trace.gate_fired;
      e.lo = trace.lo;
      e.hi = trace.hi;
      Case a{c->id, std::move(v), c->labels, c->tag};
      out.push_back(std::move(a));
      if (audit) audit->push_back(e);
    } catch (const Error& err) {
      rethrow_with_context(err, "case " + c->id);
    }
  }
  return out;
}

}  // namespace udaseg::aug
