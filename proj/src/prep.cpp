#include "udaseg/prep.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <random>
#include <sstream>

#include <json.hpp>

#include "udaseg/fsutil.hpp"
#include "udaseg/imgops.hpp"
#include "udaseg/rng.hpp"
#include "udaseg/volume_io.hpp"

namespace udaseg::prep {

Mat3 RigidTransform::rotation() const {
  const double cx = std::cos(angles[0]), sx = std::sin(angles[0]);
  const double cy = std::cos(angles[1]), sy = std::sin(angles[1]);
  const double cz = std::cos(angles[2]), sz = std::sin(angles[2]);
  const Mat3 rx{1, 0, 0, 0, cx, -sx, 0, sx, cx};
  const Mat3 ry{cy, 0, sy, 0, 1, 0, -sy, 0, cy};
  const Mat3 rz{cz, -sz, 0, sz, cz, 0, 0, 0, 1};
  return mat_mul(rz, mat_mul(ry, rx));
}

Vec3 RigidTransform::apply(const Vec3& p) const {
  const Vec3 r = mat_vec(rotation(), p);
  return {r[0] + translation[0], r[1] + translation[1], r[2] + translation[2]};
}

Vec3 RigidTransform::apply_inverse(const Vec3& q) const {
  return mat_t_vec(rotation(), {q[0] - translation[0], q[1] - translation[1], q[2] - translation[2]});
}

void RigidTransform::validate() const {
  for (int k = 0; k < 3; ++k)
    require(std::isfinite(angles[k]) && std::isfinite(translation[k]), ErrorKind::InvalidArgument,
            "rigid transform: parameters must be finite");
  const Mat3 r = rotation();
  const Mat3 rtr = mat_mul(transpose(r), r);
  for (int i = 0; i < 9; ++i)
    require(std::abs(rtr[i] - kIdentity3[i]) < 1e-9, ErrorKind::Integrity, "rigid transform: R not orthonormal");
  require(std::abs(determinant(r) - 1.0) < 1e-9, ErrorKind::Integrity, "rigid transform: det(R) != 1");
}

std::string format_transform(const RigidTransform& t) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%.17g %.17g %.17g %.17g %.17g %.17g\n", t.angles[0], t.angles[1], t.angles[2],
                t.translation[0], t.translation[1], t.translation[2]);
  return buf;
}

RigidTransform parse_transform(const std::string& text) {
  std::istringstream is(text);
  RigidTransform t;
  double v[6];
  for (int i = 0; i < 6; ++i) {
    if (!(is >> v[i])) {
      is.clear();
      throw ParseError("transform: expected 6 numbers, got " + std::to_string(i),
                       static_cast<std::uint64_t>(std::max<std::streamoff>(0, is.tellg())));
    }
  }
  std::string extra;
  if (is >> extra) throw ParseError("transform: trailing content", static_cast<std::uint64_t>(text.find(extra)));
  t.angles = {v[0], v[1], v[2]};
  t.translation = {v[3], v[4], v[5]};
  t.validate();
  return t;
}

void save_transform(const std::string& path, const RigidTransform& t) { fsutil::write_atomic(path, format_transform(t)); }

RigidTransform load_transform(const std::string& path) {
  try {
    return parse_transform(fsutil::read_file(path));
  } catch (const Error& e) {
    rethrow_with_context(e, path);
  }
}

namespace {

Box world_extent(const Geometry& g) {
  Box b{{INFINITY, INFINITY, INFINITY}, {-INFINITY, -INFINITY, -INFINITY}};
  for (int c = 0; c < 8; ++c) {
    const Vec3 ijk{(c & 1) ? double(g.dims[0] - 1) : 0.0, (c & 2) ? double(g.dims[1] - 1) : 0.0,
                   (c & 4) ? double(g.dims[2] - 1) : 0.0};
    const Vec3 p = g.index_to_world(ijk);
    for (int k = 0; k < 3; ++k) {
      b.min[k] = std::min(b.min[k], p[k]);
      b.max[k] = std::max(b.max[k], p[k]);
    }
  }
  return b;
}

}  // namespace

void save_atlases(const std::vector<Atlas>& atlases, const std::string& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json j = nlohmann::json::array();
  for (const Atlas& a : atlases) {
    a.validate();
    const std::string file = a.tag.pool_name() + ".nii";
    io::save_volume(a.volume, std::filesystem::path(dir) / file);
    j.push_back({{"site", to_string(a.tag.site)},
                 {"modality", to_string(a.tag.modality)},
                 {"volume", file},
                 {"roi_min", a.roi_box.min},
                 {"roi_max", a.roi_box.max}});
  }
  fsutil::write_atomic(std::filesystem::path(dir) / "atlases.json", j.dump(1) + "\n");
}

std::vector<Atlas> load_atlases(const std::string& dir) {
  const auto path = std::filesystem::path(dir) / "atlases.json";
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(fsutil::read_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError("atlases: " + path.string() + ": " + e.what(), e.byte);
  }
  require(j.is_array(), ErrorKind::Parse, "atlases: " + path.string() + " must hold an array");
  std::vector<Atlas> out;
  try {
    for (const auto& e : j) {
      Atlas a;
      a.tag.site = parse_site(e.at("site").get<std::string>());
      a.tag.modality = parse_modality(e.at("modality").get<std::string>());
      const auto file = e.at("volume").get<std::string>();
      require(file.find('/') == std::string::npos, ErrorKind::Parse, "atlases: volume must be a plain file name");
      a.volume = io::load_volume(std::filesystem::path(dir) / file);
      a.roi_box.min = e.at("roi_min").get<Vec3>();
      a.roi_box.max = e.at("roi_max").get<Vec3>();
      a.validate();
      out.push_back(std::move(a));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Parse, std::string("atlases: ") + e.what());
  }
  return out;
}

void Atlas::validate() const {
  const Box ext = world_extent(volume.geometry());
  for (int k = 0; k < 3; ++k) {
    require(roi_box.min[k] <= roi_box.max[k], ErrorKind::InvalidArgument, "atlas: roi_box min > max");
    require(roi_box.min[k] >= ext.min[k] - 1e-6 && roi_box.max[k] <= ext.max[k] + 1e-6,
            ErrorKind::InvalidArgument, "atlas: roi_box outside the atlas extent");
  }
}

Atlas build_atlas(const Case& c, int dilation_voxels) {
  require(c.labels.has_value(), ErrorKind::Precondition, "build_atlas: case " + c.id + " has no labels");
  const Geometry& g = c.volume.geometry();
  std::array<std::int64_t, 3> lo{g.dims[0], g.dims[1], g.dims[2]}, hi{-1, -1, -1};
  for (std::int64_t idx = 0; idx < c.labels->size(); ++idx) {
    if ((*c.labels)[idx] == label::kBackground) continue;
    const auto p = g.unlinear(idx);
    for (int k = 0; k < 3; ++k) {
      lo[k] = std::min(lo[k], p[k]);
      hi[k] = std::max(hi[k], p[k]);
    }
  }
  require(hi[0] >= 0, ErrorKind::Precondition, "build_atlas: case " + c.id + " has no foreground labels");
  Geometry box_g = g;
  Vec3 ijk_lo{}, ijk_hi{};
  for (int k = 0; k < 3; ++k) {
    ijk_lo[k] = double(std::max<std::int64_t>(0, lo[k] - dilation_voxels));
    ijk_hi[k] = double(std::min<std::int64_t>(g.dims[k] - 1, hi[k] + dilation_voxels));
    box_g.dims[k] = std::int64_t(ijk_hi[k] - ijk_lo[k]) + 1;
  }
  box_g.origin = g.index_to_world(ijk_lo);
  Atlas a;
  a.volume = c.volume;
  a.roi_box = world_extent(box_g);
  a.tag = c.tag;
  a.validate();
  return a;
}

void RegistrationConfig::validate() const {
  require(levels >= 1 && levels <= 6, ErrorKind::InvalidArgument, "registration: levels must be in [1, 6]");
  require(iters >= 1, ErrorKind::InvalidArgument, "registration: iters must be >= 1");
  require(step > 0.0 && min_step > 0.0 && min_step < step, ErrorKind::InvalidArgument,
          "registration: need 0 < min_step < step");
  require(patience >= 1, ErrorKind::InvalidArgument, "registration: patience must be >= 1");
  require(min_overlap > 0.0 && min_overlap <= 1.0, ErrorKind::InvalidArgument,
          "registration: min_overlap must be in (0, 1]");
  require(fine_stride >= 1, ErrorKind::InvalidArgument, "registration: fine_stride must be >= 1");
}

namespace {

struct Samples {
  std::vector<Vec3> pos;  // moving world coordinates
  std::vector<float> val;
};

// Samples sit at a fixed pseudo-random in-plane offset from each stride node.
// Read exactly at grid nodes, the objective has a cusp at every grid-aligned
// transform, identity included. Slices stay whole: z spacing is coarse enough
// that interpolating along it costs more accuracy than it buys.
Samples make_samples(const Volume& v, int stride) {
  Samples s;
  const Geometry& g = v.geometry();
  Rng rng(stream_seed(0x5a3d, {std::uint64_t(stride)}));
  std::uniform_real_distribution<double> jitter(0.0, 1.0);
  for (std::int64_t k = 0; k < g.dims[2]; k += stride)
    for (std::int64_t j = 0; j < g.dims[1]; j += stride)
      for (std::int64_t i = 0; i < g.dims[0]; i += stride) {
        const Vec3 ijk{std::min(double(i) + jitter(rng), double(g.dims[0] - 1)),
                       std::min(double(j) + jitter(rng), double(g.dims[1] - 1)),
                       double(k)};
        s.pos.push_back(g.index_to_world(ijk));
        s.val.push_back(static_cast<float>(sample_trilinear_clamped(v, ijk)));
      }
  return s;
}

struct Objective {
  const Samples& s;
  const Volume& fixed;
  Vec3 centre;
  double radius;  // converts angle parameters to mm of arc

  RigidTransform to_transform(const std::array<double, 6>& u) const {
    RigidTransform t;
    t.angles = {u[0] / radius, u[1] / radius, u[2] / radius};
    const Vec3 rc = mat_vec(t.rotation(), centre);
    for (int k = 0; k < 3; ++k) t.translation[k] = centre[k] + u[3 + k] - rc[k];
    return t;
  }

  // Mean squared difference and the fraction of samples landing inside the fixed
  // grid; per-sample residuals moving - fixed go to `resid` when given.
  std::pair<double, double> operator()(const std::array<double, 6>& u, std::vector<double>* resid = nullptr) const {
    const RigidTransform t = to_transform(u);
    const Geometry& fg = fixed.geometry();
    // world -> fixed index is affine: idx = S^-1 D^T (q - o), with q = R y + t.
    Mat3 m = mat_mul(transpose(fg.direction), t.rotation());
    Vec3 b = mat_t_vec(fg.direction, {t.translation[0] - fg.origin[0], t.translation[1] - fg.origin[1],
                                      t.translation[2] - fg.origin[2]});
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) m[3 * r + c] /= fg.spacing[r];
      b[r] /= fg.spacing[r];
    }
    const auto nx = fg.dims[0], ny = fg.dims[1], nz = fg.dims[2];
    const float* f = fixed.data().data();
    double sum = 0.0;
    std::size_t inside = 0;
    if (resid) resid->resize(s.pos.size());
    for (std::size_t n = 0; n < s.pos.size(); ++n) {
      const Vec3& y = s.pos[n];
      const double fx = m[0] * y[0] + m[1] * y[1] + m[2] * y[2] + b[0];
      const double fy = m[3] * y[0] + m[4] * y[1] + m[5] * y[2] + b[1];
      const double fz = m[6] * y[0] + m[7] * y[1] + m[8] * y[2] + b[2];
      double fv = 0.0;
      if (fx >= 0 && fy >= 0 && fz >= 0 && fx <= double(nx - 1) && fy <= double(ny - 1) && fz <= double(nz - 1)) {
        ++inside;
        const auto i0 = std::min<std::int64_t>(std::int64_t(fx), std::max<std::int64_t>(nx - 2, 0));
        const auto j0 = std::min<std::int64_t>(std::int64_t(fy), std::max<std::int64_t>(ny - 2, 0));
        const auto k0 = std::min<std::int64_t>(std::int64_t(fz), std::max<std::int64_t>(nz - 2, 0));
        const double ax = fx - double(i0), ay = fy - double(j0), az = fz - double(k0);
        const std::int64_t di = nx > 1 ? 1 : 0, dj = ny > 1 ? nx : 0, dk = nz > 1 ? nx * ny : 0;
        const float* p = f + i0 + nx * (j0 + ny * k0);
        const double c00 = p[0] + ax * (p[di] - p[0]);
        const double c10 = p[dj] + ax * (p[dj + di] - p[dj]);
        const double c01 = p[dk] + ax * (p[dk + di] - p[dk]);
        const double c11 = p[dk + dj] + ax * (p[dk + dj + di] - p[dk + dj]);
        const double c0 = c00 + ay * (c10 - c00), c1 = c01 + ay * (c11 - c01);
        fv = c0 + az * (c1 - c0);
      }
      const double d = double(s.val[n]) - fv;
      if (resid) (*resid)[n] = d;
      sum += d * d;
    }
    return {sum / double(s.pos.size()), double(inside) / double(s.pos.size())};
  }
};

// Solves the 6x6 system a x = b by Gaussian elimination with partial pivoting;
// false when singular.
bool solve6(std::array<double, 36> a, std::array<double, 6> b, std::array<double, 6>& x) {
  for (int c = 0; c < 6; ++c) {
    int p = c;
    for (int r = c + 1; r < 6; ++r)
      if (std::abs(a[6 * r + c]) > std::abs(a[6 * p + c])) p = r;
    if (!(std::abs(a[6 * p + c]) > 0.0)) return false;
    if (p != c) {
      for (int k = 0; k < 6; ++k) std::swap(a[6 * c + k], a[6 * p + k]);
      std::swap(b[c], b[p]);
    }
    for (int r = c + 1; r < 6; ++r) {
      const double m = a[6 * r + c] / a[6 * c + c];
      for (int k = c; k < 6; ++k) a[6 * r + k] -= m * a[6 * c + k];
      b[r] -= m * b[c];
    }
  }
  for (int r = 5; r >= 0; --r) {
    double v = b[r];
    for (int k = r + 1; k < 6; ++k) v -= a[6 * r + k] * x[k];
    x[r] = v / a[6 * r + r];
  }
  return true;
}

}  // namespace

RegistrationResult register_rigid(const Volume& moving, const Volume& fixed, const RegistrationConfig& cfg) {
  cfg.validate();
  // A light isotropic blur (0.8 mm) keeps voxel noise from dominating the
  // small differences that in-plane rotations produce.
  auto smooth = [](const Volume& v) {
    const Vec3& sp = v.geometry().spacing;
    return gaussian_smooth_3d(v, {0.8 / sp[0], 0.8 / sp[1], 0.8 / sp[2]});
  };
  std::vector<Volume> mov{smooth(moving)}, fix{smooth(fixed)};
  for (int l = 1; l < cfg.levels; ++l) {
    const auto& d = mov.back().geometry().dims;
    if (std::min({d[0], d[1], d[2]}) < 8) break;
    mov.push_back(downsample2(mov.back()));
    fix.push_back(downsample2(fix.back()));
  }
  const Box ext = world_extent(moving.geometry());
  Vec3 centre{};
  double radius = INFINITY;
  for (int k = 0; k < 3; ++k) {
    centre[k] = 0.5 * (ext.min[k] + ext.max[k]);
    radius = std::min(radius, 0.5 * (ext.max[k] - ext.min[k]));
  }
  radius = std::max(radius, 1.0);

  std::array<double, 6> u{};
  RegistrationResult best;
  int total_iters = 0;
  for (int l = static_cast<int>(mov.size()) - 1; l >= 0; --l) {
    const bool finest = l == 0;
    const Samples s = make_samples(mov[l], finest ? cfg.fine_stride : 1);
    const Objective obj{s, fix[l], centre, radius};
    const double scale = std::ldexp(1.0, l);
    const double max_step = cfg.step * scale;
    const double min_step = cfg.min_step * scale;
    const Vec3& sp = mov[l].geometry().spacing;
    // A full voxel: narrower differences pick up interpolation kinks.
    const double h = (sp[0] + sp[1] + sp[2]) / 3.0;

    auto check = [&](std::pair<double, double> r) {
      if (!std::isfinite(r.first))
        throw RegistrationFailure("registration: metric is not finite", best);
      if (r.second < cfg.min_overlap)
        throw RegistrationFailure("registration: overlap with the fixed image fell below " +
                                      std::to_string(cfg.min_overlap),
                                  best);
      return r.first;
    };
    std::vector<double> r, rp, rm;
    double f = check(obj(u, &r));
    best.transform = obj.to_transform(u);
    best.metric = f;
    best.level_trace.push_back({f});
    const std::size_t n = r.size();
    std::vector<double> jac(6 * n);
    std::array<double, 36> a{};
    std::array<double, 6> b{};
    double lambda = 1e-3;
    int rejects = 0;
    bool need_jac = true;
    // Levenberg-Marquardt on the per-sample residuals with a central-difference
    // Jacobian; steps are capped at `step` and iteration ends below `min_step`.
    for (int it = 0; it < cfg.iters; ++it, ++total_iters) {
      if (need_jac) {
        for (int k = 0; k < 6; ++k) {
          auto up = u, dn = u;
          up[k] += h;
          dn[k] -= h;
          obj(up, &rp);
          obj(dn, &rm);
          for (std::size_t i = 0; i < n; ++i) jac[6 * i + k] = (rp[i] - rm[i]) / (2.0 * h);
        }
        a.fill(0.0);
        b.fill(0.0);
        for (std::size_t i = 0; i < n; ++i) {
          const double* ji = &jac[6 * i];
          for (int p = 0; p < 6; ++p) {
            b[p] -= ji[p] * r[i];
            for (int q = p; q < 6; ++q) a[6 * p + q] += ji[p] * ji[q];
          }
        }
        for (int p = 0; p < 6; ++p)
          for (int q = 0; q < p; ++q) a[6 * p + q] = a[6 * q + p];
        need_jac = false;
      }
      std::array<double, 36> damped = a;
      for (int p = 0; p < 6; ++p) damped[7 * p] += lambda * std::max(a[7 * p], 1e-12);
      std::array<double, 6> delta{};
      if (!solve6(damped, b, delta)) break;
      double len = 0.0;
      for (const double d : delta) len += d * d;
      len = std::sqrt(len);
      if (len < min_step) break;
      if (len > max_step)
        for (auto& d : delta) d *= max_step / len;
      auto trial = u;
      for (int k = 0; k < 6; ++k) trial[k] += delta[k];
      const double ft = check(obj(trial, &rp));
      if (ft < f) {
        u = trial;
        f = ft;
        r.swap(rp);
        best.transform = obj.to_transform(u);
        best.metric = f;
        best.iterations = total_iters + 1;
        best.level_trace.back().push_back(f);
        lambda = std::max(lambda / 3.0, 1e-9);
        need_jac = true;
        rejects = 0;
      } else {
        lambda *= 4.0;
        if (finest && ++rejects >= cfg.patience)
          throw RegistrationFailure("registration: objective failed to decrease for " +
                                        std::to_string(rejects) + " consecutive steps",
                                    best);
        if (lambda > 1e12) break;
      }
    }
  }
  best.iterations = total_iters;
  return best;
}

namespace {

Geometry roi_grid(const Atlas& atlas, const Vec3& spacing) {
  Geometry g;
  g.spacing = spacing;
  g.origin = atlas.roi_box.min;
  for (int k = 0; k < 3; ++k)
    g.dims[k] = static_cast<std::int64_t>(std::floor((atlas.roi_box.max[k] - atlas.roi_box.min[k]) / spacing[k] + 1e-6)) + 1;
  return g;
}

template <typename T, typename Sample>
Grid<T> crop_impl(const Geometry& src, const RigidTransform& t, const Atlas& atlas, Sample sample) {
  t.validate();
  atlas.validate();
  const Geometry out = roi_grid(atlas, src.spacing);
  std::vector<T> data(static_cast<std::size_t>(out.voxel_count()));
  std::size_t n = 0, hits = 0;
  for (std::int64_t k = 0; k < out.dims[2]; ++k)
    for (std::int64_t j = 0; j < out.dims[1]; ++j)
      for (std::int64_t i = 0; i < out.dims[0]; ++i) {
        const Vec3 ijk = src.world_to_index(t.apply_inverse(out.index_to_world({double(i), double(j), double(k)})));
        // Round-off tolerance so grid-aligned points on the last plane count as inside.
        bool inside = true;
        for (int a = 0; a < 3; ++a) inside = inside && ijk[a] >= -1e-6 && ijk[a] <= double(src.dims[a] - 1) + 1e-6;
        if (inside) {
          ++hits;
          data[n] = sample(ijk);
        }
        ++n;
      }
  require(hits > 0, ErrorKind::EmptyRoi, "crop_roi: no voxel of the image maps into the atlas ROI");
  return Grid<T>(out, std::move(data));
}

}  // namespace

Volume crop_roi(const Volume& v, const RigidTransform& t, const Atlas& atlas) {
  return crop_impl<float>(v.geometry(), t, atlas,
                          [&](const Vec3& ijk) { return static_cast<float>(sample_trilinear_clamped(v, ijk)); });
}

LabelMap crop_roi(const LabelMap& m, const RigidTransform& t, const Atlas& atlas) {
  const Geometry& g = m.geometry();
  return crop_impl<std::uint8_t>(g, t, atlas, [&](const Vec3& ijk) {
    return m.at(std::clamp<std::int64_t>(std::llround(ijk[0]), 0, g.dims[0] - 1),
                std::clamp<std::int64_t>(std::llround(ijk[1]), 0, g.dims[1] - 1),
                std::clamp<std::int64_t>(std::llround(ijk[2]), 0, g.dims[2] - 1));
  });
}

const Atlas& atlas_for(const std::vector<Atlas>& atlases, Site site, Modality modality) {
  for (const auto& a : atlases)
    if (a.tag.site == site && a.tag.modality == modality) return a;
  fail(ErrorKind::Configuration,
       std::string("no atlas for site ") + to_string(site) + ", modality " + to_string(modality));
}

Preprocessed preprocess_case(const Case& c, const std::vector<Atlas>& atlases, const Vec3& target_spacing,
                             const RegistrationConfig& cfg) {
  const Atlas& atlas = atlas_for(atlases, c.tag.site, c.tag.modality);
  try {
    const RegistrationResult reg = register_rigid(c.volume, atlas.volume, cfg);
    Preprocessed out;
    out.transform = reg.transform;
    out.metric = reg.metric;
    out.c.id = c.id;
    out.c.tag = c.tag;
    out.c.volume = resample(crop_roi(c.volume, reg.transform, atlas), target_spacing);
    if (c.labels) out.c.labels = preprocess_labels(*c.labels, reg.transform, atlas, target_spacing);
    return out;
  } catch (const Error& e) {
    rethrow_with_context(e, "case " + c.id);
  }
}

LabelMap preprocess_labels(const LabelMap& m, const RigidTransform& t, const Atlas& atlas,
                           const Vec3& target_spacing) {
  return resample(crop_roi(m, t, atlas), target_spacing);
}

}  // namespace udaseg::prep
