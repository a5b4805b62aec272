#include "udaseg/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>

#include "udaseg/rng.hpp"

namespace udaseg::phantom {
namespace {

enum Tissue : std::uint8_t { kAir, kScalp, kSkull, kCsf, kBrain, kFat, kCochleaT, kVsT, kTissueCount };

// Base intensities per tissue, {ceT1, hrT2}. Cochlear fluid is dark in ceT1,
// a little above CSF from partial volume, and bright in hrT2; VS enhances in ceT1. The hrT2 VS value is drawn per case.
constexpr double kBase[kTissueCount][2] = {
    {0.00, 0.00},  // air
    {0.80, 0.88},  // scalp
    {0.06, 0.06},  // skull
    {0.12, 0.25},  // csf
    {0.45, 0.33},  // brain
    {0.85, 0.92},  // petrous fat
    {0.22, 0.82},  // cochlea
    {0.95, 0.55},  // vs
};

struct Anatomy {
  Vec3 centre;
  Vec3 head_axes;
  std::array<Vec3, 2> cochlea;     // left, right
  std::array<int, 2> cochlea_size;
  int vs_side = 0;
  Vec3 vs_centre;
  Vec3 vs_axes;
  double vs_lobe_phase = 0.0;
  int vs_size = 0;
  double vs_t2_mean = 0.55;
  std::array<std::int64_t, 3> shift{};
  Vec3 bias_dir;
  double bias_amp = 0.0;
  Vec3 tex_freq;
  double tex_phase = 0.0;
};

double uniform(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

Anatomy draw_anatomy(const PhantomConfig& cfg, Rng& rng) {
  Anatomy a;
  const Dims& d = cfg.dims;
  for (int k = 0; k < 3; ++k) a.centre[k] = 0.5 * static_cast<double>(d[k] - 1);
  const double scale = uniform(rng, 0.96, 1.04);
  a.head_axes = {0.42 * d[0] * scale, 0.45 * d[1] * scale, 0.41 * d[2] * scale};
  for (int s = 0; s < 2; ++s) {
    const double side = s == 0 ? -1.0 : 1.0;
    a.cochlea[s] = {a.centre[0] + side * 0.17 * d[0] + uniform(rng, -0.7, 0.7),
                    a.centre[1] + 0.125 * d[1] + uniform(rng, -0.7, 0.7),
                    a.centre[2] + uniform(rng, -0.4, 0.4)};
    a.cochlea_size[s] = std::uniform_int_distribution<int>(20, 60)(rng);
  }
  a.vs_side = std::uniform_int_distribution<int>(0, 1)(rng);

  const int lo = cfg.tumor_size_range[0], hi = cfg.tumor_size_range[1];
  const int third = lo + (hi - lo) / 3;
  if (uniform(rng, 0.0, 1.0) < cfg.small_tumor_share)
    a.vs_size = std::uniform_int_distribution<int>(lo, std::max(lo, third - 1))(rng);
  else
    a.vs_size = std::uniform_int_distribution<int>(lo, hi)(rng);

  // Semi-axes (voxels) of an ellipsoid holding roughly vs_size voxels, with a
  // physically near-isotropic shape.
  const double ay_ratio = uniform(rng, 0.8, 1.2);
  const double az_ratio = uniform(rng, 0.8, 1.2) * cfg.spacing[0] / cfg.spacing[2];
  const double ax = std::cbrt(3.0 * a.vs_size / (4.0 * std::numbers::pi * ay_ratio * az_ratio));
  a.vs_axes = {ax, ax * ay_ratio, std::max(0.6, ax * az_ratio)};
  const double medial = a.vs_side == 0 ? 1.0 : -1.0;
  const Vec3& c = a.cochlea[a.vs_side];
  a.vs_centre = {c[0] + medial * (2.5 + ax), c[1] + uniform(rng, -1.5, 1.5), c[2] + uniform(rng, -0.5, 0.5)};
  a.vs_lobe_phase = uniform(rng, 0.0, 2.0 * std::numbers::pi);
  a.vs_t2_mean = uniform(rng, 0.48, 0.78);

  const int ms = cfg.max_pose_shift;
  a.shift = {std::uniform_int_distribution<int>(-ms, ms)(rng), std::uniform_int_distribution<int>(-ms, ms)(rng),
             std::uniform_int_distribution<int>(-ms / 2, ms / 2)(rng)};
  const double th = uniform(rng, 0.0, 2.0 * std::numbers::pi);
  a.bias_dir = {std::cos(th), std::sin(th), 0.0};
  a.bias_amp = uniform(rng, -0.05, 0.05);
  a.tex_freq = {uniform(rng, 0.15, 0.35), uniform(rng, 0.15, 0.35), uniform(rng, 0.2, 0.5)};
  a.tex_phase = uniform(rng, 0.0, 2.0 * std::numbers::pi);
  return a;
}

double ellipsoid_r(const Vec3& q, const Vec3& c, const Vec3& axes) {
  double s = 0.0;
  for (int k = 0; k < 3; ++k) {
    const double t = (q[k] - c[k]) / axes[k];
    s += t * t;
  }
  return std::sqrt(s);
}

Tissue background_tissue(const Anatomy& a, const Vec3& q, const Dims& d) {
  const double r = ellipsoid_r(q, a.centre, a.head_axes);
  if (r > 1.0) return kAir;
  if (r > 0.93) return kScalp;
  if (r > 0.86) return kSkull;
  if (r > 0.74) return kCsf;
  for (const double side : {-1.0, 1.0}) {
    const Vec3 vc{a.centre[0] + side * 0.08 * d[0], a.centre[1] - 0.1 * d[1], a.centre[2] + 0.1 * d[2]};
    if (ellipsoid_r(q, vc, {0.05 * d[0], 0.09 * d[1], 0.1 * d[2]}) <= 1.0) return kCsf;
    const Vec3 fc{a.centre[0] + side * 0.25 * d[0], a.centre[1] + 0.125 * d[1], a.centre[2]};
    if (ellipsoid_r(q, fc, {0.06 * d[0], 0.08 * d[1], 0.1 * d[2]}) <= 1.0) return kFat;
  }
  return kBrain;
}

// Picks the `count` grid voxels with the lowest score inside the search box,
// ties broken by linear index.
template <typename Score>
std::vector<std::int64_t> pick_lowest(const Geometry& g, const Vec3& centre, const Vec3& half_box,
                                      int count, Score score) {
  std::vector<std::pair<double, std::int64_t>> cand;
  std::array<std::int64_t, 3> lo{}, hi{};
  for (int k = 0; k < 3; ++k) {
    lo[k] = std::max<std::int64_t>(0, static_cast<std::int64_t>(std::floor(centre[k] - half_box[k])));
    hi[k] = std::min<std::int64_t>(g.dims[k] - 1, static_cast<std::int64_t>(std::ceil(centre[k] + half_box[k])));
  }
  for (std::int64_t z = lo[2]; z <= hi[2]; ++z)
    for (std::int64_t y = lo[1]; y <= hi[1]; ++y)
      for (std::int64_t x = lo[0]; x <= hi[0]; ++x) {
        const double s = score(Vec3{double(x), double(y), double(z)}, g.linear(x, y, z));
        if (std::isfinite(s)) cand.emplace_back(s, g.linear(x, y, z));
      }
  const auto n = std::min<std::size_t>(static_cast<std::size_t>(count), cand.size());
  std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(n), cand.end());
  std::vector<std::int64_t> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = cand[i].second;
  return out;
}

}  // namespace

void PhantomConfig::validate() const {
  require(cases_per_site_per_modality >= 1, ErrorKind::InvalidArgument,
          "phantom: cases_per_site_per_modality must be >= 1");
  require(validation_cases_per_site >= 0, ErrorKind::InvalidArgument,
          "phantom: validation_cases_per_site must be >= 0");
  for (int k = 0; k < 3; ++k) {
    require(dims[k] >= 16, ErrorKind::InvalidArgument, "phantom: dims must be >= 16");
    require(spacing[k] > 0.0, ErrorKind::InvalidArgument, "phantom: spacing must be > 0");
  }
  require(tumor_size_range[0] >= 1 && tumor_size_range[1] > tumor_size_range[0] + 2,
          ErrorKind::InvalidArgument, "phantom: tumor_size_range must be non-degenerate");
  require(small_tumor_share >= 0.0 && small_tumor_share <= 1.0, ErrorKind::InvalidArgument,
          "phantom: small_tumor_share must be in [0,1]");
  require(noise_sigma >= 0.0, ErrorKind::InvalidArgument, "phantom: noise_sigma must be >= 0");
  require(max_pose_shift >= 0, ErrorKind::InvalidArgument, "phantom: max_pose_shift must be >= 0");
  for (const auto& s : site_contrast)
    require(s.gain > 0.0 && s.gamma > 0.0, ErrorKind::InvalidArgument,
            "phantom: site gain and gamma must be > 0");
}

std::string case_id(Site site, Modality modality, Split split, int index) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s_%s_%s%03d", to_string(modality), to_string(site),
                split == Split::Validation ? "val_" : "", index);
  return buf;
}

Case generate_case(const PhantomConfig& cfg, Site site, Modality modality, int case_index, Split split) {
  cfg.validate();
  const int limit = split == Split::Train ? cfg.cases_per_site_per_modality : cfg.validation_cases_per_site;
  require(case_index >= 0 && case_index < limit, ErrorKind::InvalidArgument,
          "phantom: case_index out of range");
  Rng rng(stream_seed(cfg.seed, {static_cast<std::uint64_t>(site), static_cast<std::uint64_t>(modality),
                                 static_cast<std::uint64_t>(split), static_cast<std::uint64_t>(case_index)}));
  const Anatomy a = draw_anatomy(cfg, rng);

  Geometry g;
  g.dims = cfg.dims;
  g.spacing = cfg.spacing;
  const auto n = static_cast<std::size_t>(g.voxel_count());
  std::vector<std::uint8_t> tissue(n);
  const Vec3 shift{double(a.shift[0]), double(a.shift[1]), double(a.shift[2])};
  auto anat = [&](const Vec3& p) { return Vec3{p[0] - shift[0], p[1] - shift[1], p[2] - shift[2]}; };
  auto image = [&](const Vec3& q) { return Vec3{q[0] + shift[0], q[1] + shift[1], q[2] + shift[2]}; };
  for (std::int64_t z = 0; z < g.dims[2]; ++z)
    for (std::int64_t y = 0; y < g.dims[1]; ++y)
      for (std::int64_t x = 0; x < g.dims[0]; ++x)
        tissue[static_cast<std::size_t>(g.linear(x, y, z))] =
            background_tissue(a, anat({double(x), double(y), double(z)}), g.dims);

  std::vector<std::uint8_t> labels(n, label::kBackground);
  // Cochleae: voxels nearest a tapering spiral, measured in mm.
  for (int s = 0; s < 2; ++s) {
    const Vec3 c = image(a.cochlea[s]);
    std::vector<Vec3> curve;
    const double turns = 2.5 * std::numbers::pi;
    for (int t = 0; t <= 200; ++t) {
      const double th = turns * t / 200.0;
      const double rho = 2.6 - 1.4 * th / turns;
      curve.push_back({c[0] * g.spacing[0] + rho * std::cos(th) * (s == 0 ? -1.0 : 1.0),
                       c[1] * g.spacing[1] + rho * std::sin(th), c[2] * g.spacing[2] + 1.2 * th / turns});
    }
    const auto picked = pick_lowest(g, c, {6, 6, 3}, a.cochlea_size[s], [&](const Vec3& p, std::int64_t) {
      const Vec3 mm{p[0] * g.spacing[0], p[1] * g.spacing[1], p[2] * g.spacing[2]};
      double best = 1e300;
      for (const auto& q : curve) {
        const double dx = mm[0] - q[0], dy = mm[1] - q[1], dz = mm[2] - q[2];
        best = std::min(best, dx * dx + dy * dy + dz * dz);
      }
      return best;
    });
    for (const auto idx : picked) labels[static_cast<std::size_t>(idx)] = label::kCochlea;
  }
  // Vestibular schwannoma: lobulated ellipsoid grown to exactly vs_size voxels.
  {
    const Vec3 c = image(a.vs_centre);
    const Vec3 box{2.0 * a.vs_axes[0] + 3, 2.0 * a.vs_axes[1] + 3, 2.0 * a.vs_axes[2] + 2};
    const auto picked = pick_lowest(g, c, box, a.vs_size, [&](const Vec3& p, std::int64_t idx) {
      if (labels[static_cast<std::size_t>(idx)] != label::kBackground) return std::numeric_limits<double>::infinity();
      const double r = ellipsoid_r(p, c, a.vs_axes);
      const double phi = std::atan2(p[1] - c[1], p[0] - c[0]);
      return r * (1.0 + 0.12 * std::sin(3.0 * phi + a.vs_lobe_phase));
    });
    for (const auto idx : picked) labels[static_cast<std::size_t>(idx)] = label::kVs;
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] == label::kCochlea) tissue[i] = kCochleaT;
    if (labels[i] == label::kVs) tissue[i] = kVsT;
  }

  const int mod = modality == Modality::CeT1 ? 0 : 1;
  const SiteContrast& sc = cfg.site_contrast[site == Site::A ? 0 : 1];
  std::normal_distribution<double> noise(0.0, 1.0);
  const double head_norm = std::max({a.head_axes[0], a.head_axes[1], a.head_axes[2]});
  const Vec3 vs_c = image(a.vs_centre);
  std::vector<float> data(n);
  for (std::int64_t z = 0; z < g.dims[2]; ++z)
    for (std::int64_t y = 0; y < g.dims[1]; ++y)
      for (std::int64_t x = 0; x < g.dims[0]; ++x) {
        const auto i = static_cast<std::size_t>(g.linear(x, y, z));
        const Tissue t = static_cast<Tissue>(tissue[i]);
        double v = kBase[t][mod];
        if (t == kVsT) {
          const double wob = std::sin(0.9 * (x - vs_c[0]) + a.vs_lobe_phase) * std::cos(0.7 * (y - vs_c[1]));
          v = mod == 0 ? 0.95 + 0.03 * wob : a.vs_t2_mean + 0.06 * wob;
        } else if (t == kBrain) {
          v += 0.02 * std::sin(a.tex_freq[0] * x + a.tex_freq[1] * y + a.tex_freq[2] * z + a.tex_phase);
        }
        if (t != kAir) {
          const double proj = ((x - a.centre[0]) * a.bias_dir[0] + (y - a.centre[1]) * a.bias_dir[1]) / head_norm;
          v *= 1.0 + a.bias_amp * proj;
        }
        v = sc.gain * std::pow(std::max(v, 0.0), sc.gamma) + sc.bias;
        if (cfg.noise_sigma > 0.0) v += cfg.noise_sigma * noise(rng);
        data[i] = static_cast<float>(v);
      }

  Case out;
  out.id = case_id(site, modality, split, case_index);
  out.volume = Volume(g, std::move(data));
  out.labels = LabelMap(g, std::move(labels));
  out.tag = DomainTag{site, modality, Provenance::Real, std::nullopt};
  return out;
}

Dataset generate_dataset(const PhantomConfig& cfg) {
  cfg.validate();
  Dataset ds;
  for (const Site site : {Site::A, Site::B})
    for (const Modality mod : {Modality::CeT1, Modality::HrT2})
      for (int i = 0; i < cfg.cases_per_site_per_modality; ++i) {
        Case c = generate_case(cfg, site, mod, i, Split::Train);
        if (mod == Modality::HrT2) {
          ds.eval.put(c.id, std::move(*c.labels));
          c.labels.reset();
        }
        ds.train.push_back(std::move(c));
      }
  for (const Site site : {Site::A, Site::B})
    for (int i = 0; i < cfg.validation_cases_per_site; ++i) {
      Case c = generate_case(cfg, site, Modality::HrT2, i, Split::Validation);
      ds.eval.put(c.id, std::move(*c.labels));
      c.labels.reset();
      ds.validation.push_back(std::move(c));
    }
  return ds;
}

}  // namespace udaseg::phantom
