#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "udaseg/error.hpp"

namespace udaseg {

using Vec3 = std::array<double, 3>;
using Mat3 = std::array<double, 9>;  // row-major
using Dims = std::array<std::int64_t, 3>;

inline constexpr Mat3 kIdentity3 = {1, 0, 0, 0, 1, 0, 0, 0, 1};

Vec3 mat_vec(const Mat3& m, const Vec3& v);
Vec3 mat_t_vec(const Mat3& m, const Vec3& v);
Mat3 mat_mul(const Mat3& a, const Mat3& b);
Mat3 transpose(const Mat3& m);
double determinant(const Mat3& m);

// Physical layout of a voxel grid. Voxel (i, j, k) sits at
// origin + direction * (spacing .* (i, j, k)); x varies fastest in memory.
struct Geometry {
  Dims dims{1, 1, 1};
  Vec3 spacing{1, 1, 1};
  Vec3 origin{0, 0, 0};
  Mat3 direction = kIdentity3;

  std::int64_t voxel_count() const { return dims[0] * dims[1] * dims[2]; }
  std::int64_t linear(std::int64_t i, std::int64_t j, std::int64_t k) const {
    return i + dims[0] * (j + dims[1] * k);
  }
  std::array<std::int64_t, 3> unlinear(std::int64_t idx) const;
  Vec3 index_to_world(const Vec3& ijk) const;
  Vec3 world_to_index(const Vec3& p) const;
  bool contains_index(const Vec3& ijk) const;

  // Throws InvalidArgument when dims/spacing/direction break the invariants.
  void validate() const;
  bool operator==(const Geometry&) const = default;
};

using VoxelMask = std::vector<std::uint8_t>;

template <typename T>
class Grid {
 public:
  Grid() : data_(1, T{}) {}
  Grid(Geometry geometry, std::vector<T> data);
  // Grid filled with a constant value.
  Grid(Geometry geometry, T fill);

  const Geometry& geometry() const { return geometry_; }
  const Dims& dims() const { return geometry_.dims; }
  const Vec3& spacing() const { return geometry_.spacing; }
  std::int64_t size() const { return static_cast<std::int64_t>(data_.size()); }
  const std::vector<T>& data() const { return data_; }
  std::span<const T> values() const { return data_; }
  T at(std::int64_t i, std::int64_t j, std::int64_t k) const {
    return data_[static_cast<std::size_t>(geometry_.linear(i, j, k))];
  }
  T operator[](std::int64_t idx) const { return data_[static_cast<std::size_t>(idx)]; }

  // Moves the buffer out, leaving this grid empty; used to build modified copies.
  std::vector<T> release() && { return std::move(data_); }

 private:
  Geometry geometry_;
  std::vector<T> data_;
};

using Volume = Grid<float>;
using LabelMap = Grid<std::uint8_t>;

namespace label {
inline constexpr std::uint8_t kBackground = 0;
inline constexpr std::uint8_t kVs = 1;
inline constexpr std::uint8_t kCochlea = 2;
inline constexpr int kNumClasses = 3;
}  // namespace label

// Binary mask of voxels carrying `class_id`.
VoxelMask class_mask(const LabelMap& m, std::uint8_t class_id);
std::int64_t count_class(const LabelMap& m, std::uint8_t class_id);

enum class Site { A, B };
enum class Modality { CeT1, HrT2 };
enum class Provenance { Real, Pseudo };

const char* to_string(Site s);
const char* to_string(Modality m);
const char* to_string(Provenance p);
Site parse_site(const std::string& s);
Modality parse_modality(const std::string& s);
Provenance parse_provenance(const std::string& s);

struct PseudoOrigin {
  int model_id = 0;
  std::string source_case;
  std::string mode;  // "2d" or "3d"
  bool operator==(const PseudoOrigin&) const = default;
};

struct DomainTag {
  Site site = Site::A;
  Modality modality = Modality::CeT1;
  Provenance provenance = Provenance::Real;
  std::optional<PseudoOrigin> origin;  // required iff provenance == Pseudo

  void validate() const;
  std::string pool_name() const;  // e.g. "ceT1_A"
  bool operator==(const DomainTag&) const = default;
};

struct Case {
  std::string id;
  Volume volume;
  std::optional<LabelMap> labels;
  DomainTag tag;

  void validate() const;
};

extern template class Grid<float>;
extern template class Grid<std::uint8_t>;

}  // namespace udaseg
