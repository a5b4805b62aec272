#include "udaseg/volume.hpp"

#include <cmath>
#include <type_traits>

namespace udaseg {

const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::InvalidArgument: return "invalid-argument";
    case ErrorKind::ResourceLimit: return "resource-limit";
    case ErrorKind::Parse: return "parse-error";
    case ErrorKind::Integrity: return "integrity-error";
    case ErrorKind::ConvergenceFailure: return "convergence-failure";
    case ErrorKind::EmptyRoi: return "empty-roi";
    case ErrorKind::Configuration: return "configuration-error";
    case ErrorKind::Precondition: return "precondition-error";
    case ErrorKind::Io: return "io-error";
  }
  return "error";
}

void rethrow_with_context(const Error& e, const std::string& context) {
  if (const auto* pe = dynamic_cast<const ParseError*>(&e)) throw *pe;
  throw Error(e.kind(), context + ": " + e.what());
}

Vec3 mat_vec(const Mat3& m, const Vec3& v) {
  return {m[0] * v[0] + m[1] * v[1] + m[2] * v[2],
          m[3] * v[0] + m[4] * v[1] + m[5] * v[2],
          m[6] * v[0] + m[7] * v[1] + m[8] * v[2]};
}

Vec3 mat_t_vec(const Mat3& m, const Vec3& v) {
  return {m[0] * v[0] + m[3] * v[1] + m[6] * v[2],
          m[1] * v[0] + m[4] * v[1] + m[7] * v[2],
          m[2] * v[0] + m[5] * v[1] + m[8] * v[2]};
}

Mat3 mat_mul(const Mat3& a, const Mat3& b) {
  Mat3 r{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      for (int k = 0; k < 3; ++k) r[3 * i + j] += a[3 * i + k] * b[3 * k + j];
  return r;
}

Mat3 transpose(const Mat3& m) {
  return {m[0], m[3], m[6], m[1], m[4], m[7], m[2], m[5], m[8]};
}

double determinant(const Mat3& m) {
  return m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) +
         m[2] * (m[3] * m[7] - m[4] * m[6]);
}

std::array<std::int64_t, 3> Geometry::unlinear(std::int64_t idx) const {
  const std::int64_t i = idx % dims[0];
  const std::int64_t rest = idx / dims[0];
  return {i, rest % dims[1], rest / dims[1]};
}

Vec3 Geometry::index_to_world(const Vec3& ijk) const {
  const Vec3 scaled{ijk[0] * spacing[0], ijk[1] * spacing[1], ijk[2] * spacing[2]};
  const Vec3 r = mat_vec(direction, scaled);
  return {origin[0] + r[0], origin[1] + r[1], origin[2] + r[2]};
}

Vec3 Geometry::world_to_index(const Vec3& p) const {
  const Vec3 d{p[0] - origin[0], p[1] - origin[1], p[2] - origin[2]};
  const Vec3 r = mat_t_vec(direction, d);
  return {r[0] / spacing[0], r[1] / spacing[1], r[2] / spacing[2]};
}

bool Geometry::contains_index(const Vec3& ijk) const {
  for (int a = 0; a < 3; ++a)
    if (ijk[a] < 0.0 || ijk[a] > static_cast<double>(dims[a] - 1)) return false;
  return true;
}

void Geometry::validate() const {
  for (int a = 0; a < 3; ++a) {
    require(dims[a] >= 1, ErrorKind::InvalidArgument, "geometry: dims must be >= 1");
    require(std::isfinite(spacing[a]) && spacing[a] > 0.0, ErrorKind::InvalidArgument,
            "geometry: spacing must be > 0");
    require(std::isfinite(origin[a]), ErrorKind::InvalidArgument, "geometry: origin must be finite");
  }
  // Orthonormal columns, |det| = 1.
  const Mat3 dtd = mat_mul(transpose(direction), direction);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      require(std::abs(dtd[3 * i + j] - (i == j ? 1.0 : 0.0)) < 1e-6, ErrorKind::InvalidArgument,
              "geometry: direction must be orthonormal");
  require(std::abs(std::abs(determinant(direction)) - 1.0) < 1e-9, ErrorKind::InvalidArgument,
          "geometry: |det(direction)| must be 1");
}

namespace {
template <typename T>
void check_values(const std::vector<T>& data) {
  if constexpr (std::is_floating_point_v<T>) {
    for (const T v : data)
      require(std::isfinite(v), ErrorKind::InvalidArgument, "volume: non-finite datum");
  } else {
    for (const T v : data)
      require(v <= label::kCochlea, ErrorKind::InvalidArgument,
              "label map: value outside {0,1,2}");
  }
}
}  // namespace

template <typename T>
Grid<T>::Grid(Geometry geometry, std::vector<T> data)
    : geometry_(std::move(geometry)), data_(std::move(data)) {
  geometry_.validate();
  require(static_cast<std::int64_t>(data_.size()) == geometry_.voxel_count(),
          ErrorKind::InvalidArgument, "grid: buffer length does not match dims");
  check_values(data_);
}

template <typename T>
Grid<T>::Grid(Geometry geometry, T fill) : geometry_(std::move(geometry)) {
  geometry_.validate();
  data_.assign(static_cast<std::size_t>(geometry_.voxel_count()), fill);
  check_values(std::vector<T>{fill});
}

template class Grid<float>;
template class Grid<std::uint8_t>;

VoxelMask class_mask(const LabelMap& m, std::uint8_t class_id) {
  VoxelMask out(m.data().size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = m.data()[i] == class_id ? 1 : 0;
  return out;
}

std::int64_t count_class(const LabelMap& m, std::uint8_t class_id) {
  std::int64_t n = 0;
  for (const auto v : m.data()) n += (v == class_id);
  return n;
}

const char* to_string(Site s) { return s == Site::A ? "A" : "B"; }
const char* to_string(Modality m) { return m == Modality::CeT1 ? "ceT1" : "hrT2"; }
const char* to_string(Provenance p) { return p == Provenance::Real ? "real" : "pseudo"; }

Site parse_site(const std::string& s) {
  if (s == "A") return Site::A;
  if (s == "B") return Site::B;
  fail(ErrorKind::InvalidArgument, "unknown site '" + s + "'");
}

Modality parse_modality(const std::string& s) {
  if (s == "ceT1") return Modality::CeT1;
  if (s == "hrT2") return Modality::HrT2;
  fail(ErrorKind::InvalidArgument, "unknown modality '" + s + "'");
}

Provenance parse_provenance(const std::string& s) {
  if (s == "real") return Provenance::Real;
  if (s == "pseudo") return Provenance::Pseudo;
  fail(ErrorKind::InvalidArgument, "unknown provenance '" + s + "'");
}

void DomainTag::validate() const {
  if (provenance == Provenance::Pseudo) {
    require(origin.has_value(), ErrorKind::InvalidArgument,
            "pseudo case must record its generating translator");
    require(origin->model_id >= 1 && origin->model_id <= 5, ErrorKind::InvalidArgument,
            "pseudo case: translator id must be in 1..5");
  } else {
    require(!origin.has_value(), ErrorKind::InvalidArgument,
            "real case cannot carry a translator origin");
  }
}

std::string DomainTag::pool_name() const {
  return std::string(to_string(modality)) + "_" + to_string(site);
}

void Case::validate() const {
  require(!id.empty(), ErrorKind::InvalidArgument, "case id must be non-empty");
  tag.validate();
  if (labels)
    require(labels->geometry() == volume.geometry(), ErrorKind::InvalidArgument,
            "case " + id + ": labels do not match volume geometry");
}

}  // namespace udaseg
