#include "udaseg/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

#include "udaseg/simd.hpp"

namespace udaseg::metrics {
namespace {

void require_same_grid(const LabelMap& a, const LabelMap& b) {
  require(a.geometry().dims == b.geometry().dims, ErrorKind::InvalidArgument,
          "metrics: prediction and ground truth dims differ");
}

struct PointSet {
  std::vector<double> x, y, z;
  std::size_t size() const { return x.size(); }
};

PointSet surface(const LabelMap& m, std::uint8_t cls, const Vec3& sp) {
  const Dims& d = m.geometry().dims;
  const auto v = m.values();
  auto inside = [&](std::int64_t i, std::int64_t j, std::int64_t k) {
    if (i < 0 || j < 0 || k < 0 || i >= d[0] || j >= d[1] || k >= d[2]) return false;
    return v[static_cast<std::size_t>(i + d[0] * (j + d[1] * k))] == cls;
  };
  PointSet s;
  for (std::int64_t k = 0; k < d[2]; ++k)
    for (std::int64_t j = 0; j < d[1]; ++j)
      for (std::int64_t i = 0; i < d[0]; ++i) {
        if (!inside(i, j, k)) continue;
        if (inside(i - 1, j, k) && inside(i + 1, j, k) && inside(i, j - 1, k) && inside(i, j + 1, k) &&
            inside(i, j, k - 1) && inside(i, j, k + 1))
          continue;
        s.x.push_back(double(i) * sp[0]);
        s.y.push_back(double(j) * sp[1]);
        s.z.push_back(double(k) * sp[2]);
      }
  return s;
}

double directed_sum(const PointSet& from, const PointSet& to) {
  double total = 0.0;
  for (std::size_t i = 0; i < from.size(); ++i)
    total += std::sqrt(simd::min_dist2(from.x[i], from.y[i], from.z[i], to.x, to.y, to.z));
  return total;
}

}  // namespace

double dice(const LabelMap& pred, const LabelMap& gt, std::uint8_t class_id) {
  require_same_grid(pred, gt);
  std::int64_t p = 0, g = 0, both = 0;
  const auto pv = pred.values(), gv = gt.values();
  for (std::size_t i = 0; i < pv.size(); ++i) {
    const bool a = pv[i] == class_id, b = gv[i] == class_id;
    p += a;
    g += b;
    both += a && b;
  }
  if (p + g == 0) return 1.0;
  return 2.0 * double(both) / double(p + g);
}

std::optional<double> assd(const LabelMap& pred, const LabelMap& gt, std::uint8_t class_id,
                           const Vec3& spacing) {
  require_same_grid(pred, gt);
  for (const double s : spacing)
    require(s > 0.0 && std::isfinite(s), ErrorKind::InvalidArgument, "assd: spacing must be positive");
  const PointSet sp = surface(pred, class_id, spacing);
  const PointSet sg = surface(gt, class_id, spacing);
  if (sp.size() == 0 || sg.size() == 0) return std::nullopt;
  return (directed_sum(sp, sg) + directed_sum(sg, sp)) / double(sp.size() + sg.size());
}

std::optional<double> assd(const LabelMap& pred, const LabelMap& gt, std::uint8_t class_id) {
  return assd(pred, gt, class_id, gt.geometry().spacing);
}

CaseMetrics evaluate_case(const std::string& case_id, const LabelMap& pred, const LabelMap& gt) {
  CaseMetrics m;
  m.case_id = case_id;
  m.dice_vs = dice(pred, gt, label::kVs);
  m.dice_cochlea = dice(pred, gt, label::kCochlea);
  m.assd_vs = assd(pred, gt, label::kVs);
  m.assd_cochlea = assd(pred, gt, label::kCochlea);
  return m;
}

Summary summarize(const std::vector<std::optional<double>>& values) {
  Summary s;
  double sum = 0.0;
  for (const auto& v : values) {
    if (!v) {
      ++s.undefined;
      continue;
    }
    sum += *v;
    ++s.n;
  }
  if (s.n == 0) return s;
  s.mean = sum / s.n;
  double ss = 0.0;
  for (const auto& v : values)
    if (v) ss += (*v - s.mean) * (*v - s.mean);
  s.std = std::sqrt(ss / s.n);
  return s;
}

MetricsReport report(std::vector<CaseMetrics> cases, int stage) {
  require(!cases.empty(), ErrorKind::InvalidArgument, "report: no cases");
  MetricsReport r;
  r.stage = stage;
  std::vector<std::optional<double>> dv, dc, av, ac;
  for (const auto& c : cases) {
    dv.emplace_back(c.dice_vs);
    dc.emplace_back(c.dice_cochlea);
    av.push_back(c.assd_vs);
    ac.push_back(c.assd_cochlea);
  }
  r.dice_vs = summarize(dv);
  r.dice_cochlea = summarize(dc);
  r.assd_vs = summarize(av);
  r.assd_cochlea = summarize(ac);
  r.cases = std::move(cases);
  return r;
}

std::string MetricsReport::rows() const {
  std::ostringstream os;
  auto num = [](const std::optional<double>& v) {
    if (!v) return std::string("nan");
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6f", *v);
    return std::string(buf);
  };
  os << "case_id\tstructure\tdice\tassd_mm\n";
  for (const auto& c : cases) {
    os << c.case_id << "\tvs\t" << num(c.dice_vs) << '\t' << num(c.assd_vs) << '\n';
    os << c.case_id << "\tcochlea\t" << num(c.dice_cochlea) << '\t' << num(c.assd_cochlea) << '\n';
  }
  return os.str();
}

std::string format_mean_std(double mean, double std) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f±%.2f", mean, std);
  return buf;
}

std::string format_table(const std::vector<MetricsReport>& reports, const std::vector<std::string>& names) {
  require(reports.size() == names.size(), ErrorKind::InvalidArgument, "format_table: names/reports size mismatch");
  std::size_t name_w = 6;
  for (const auto& n : names) name_w = std::max(name_w, n.size());
  auto pad = [](std::string s, std::size_t w) {
    // The ± sign is two bytes in UTF-8 but one column wide.
    std::size_t cols = 0;
    for (const unsigned char c : s) cols += (c & 0xC0) != 0x80;
    if (cols < w) s.append(w - cols, ' ');
    return s;
  };
  auto cell = [](const Summary& s, double scale) {
    if (s.n == 0) return std::string("n/a");
    std::string out = format_mean_std(s.mean * scale, s.std * scale);
    if (s.undefined > 0) out += " (" + std::to_string(s.undefined) + " undef)";
    return out;
  };
  constexpr std::size_t w = 22;
  std::ostringstream os;
  os << pad("Method", name_w) << "  " << pad("Dice VS (%)", w) << pad("Dice cochlea (%)", w)
     << pad("ASSD VS (mm)", w) << "ASSD cochlea (mm)\n";
  for (std::size_t i = 0; i < reports.size(); ++i) {
    const auto& r = reports[i];
    os << pad(names[i], name_w) << "  " << pad(cell(r.dice_vs, 100.0), w) << pad(cell(r.dice_cochlea, 100.0), w)
       << pad(cell(r.assd_vs, 1.0), w) << cell(r.assd_cochlea, 1.0) << '\n';
  }
  return os.str();
}

}  // namespace udaseg::metrics
