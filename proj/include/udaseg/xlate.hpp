#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "udaseg/volume.hpp"

namespace udaseg::xlate {

struct MatrixEntry {
  int model_id = 0;
  std::vector<Site> sources;  // ceT1 pools
  std::vector<Site> targets;  // hrT2 pools
};

enum class MatrixMode { Full, WithinSite };

const char* to_string(MatrixMode m);
MatrixMode parse_matrix_mode(const std::string& s);

// Full: #1 A->A, #2 A->B, #3 B->A, #4 B->B, #5 A+B -> A+B. Within-site: #1 and #4.
struct TranslationConfigMatrix {
  MatrixMode mode = MatrixMode::Full;
  std::vector<MatrixEntry> entries;

  static TranslationConfigMatrix full();
  static TranslationConfigMatrix within_site();
  static TranslationConfigMatrix make(MatrixMode mode);
  void validate() const;
};

enum class WindowMode { TwoD, ThreeD };

const char* to_string(WindowMode m);  // "2d" / "3d"
WindowMode parse_window_mode(const std::string& s);

// Monotone piecewise-linear map on [0, 1] with uniformly spaced knots.
struct MonotoneLut {
  std::vector<double> y;  // ordinates at x_k = k / (K - 1)

  static MonotoneLut identity(int knots);
  double operator()(double x) const;  // x clamped to [0, 1]
  double slope(double x) const;
  int knots() const { return static_cast<int>(y.size()); }
  bool is_monotone() const;
};

struct Anchors {
  double lo = 0.0;  // p1
  double hi = 1.0;  // p99
};

struct TranslatorLosses {
  double w1_forward = 0.0;
  double w1_backward = 0.0;
  double cycle = 0.0;  // mean |backward(forward(x)) - x| over source training quantiles
};

struct TranslatorPair {
  int model_id = 0;
  WindowMode mode = WindowMode::ThreeD;
  Anchors source;
  Anchors target;
  MonotoneLut forward;   // normalised source -> normalised target
  MonotoneLut backward;  // normalised target -> normalised source
  TranslatorLosses losses;

  // Identity over [lo, hi]; values inside that range pass through unchanged.
  static TranslatorPair identity(double lo, double hi, int knots = 33);

  // Raw source intensity -> raw target intensity; normalisation clamps to the anchors.
  double apply(double source_intensity) const;
  double apply_backward(double target_intensity) const;
  void validate() const;
};

std::string to_json(const TranslatorPair& t);
TranslatorPair translator_from_json(const std::string& text);
void save_translator(const std::string& path, const TranslatorPair& t);
TranslatorPair load_translator(const std::string& path);

struct TrainConfig {
  int knots = 33;
  int iters = 500;
  double cycle_weight = 1.0;
  double lr = 0.02;
  int quantiles = 512;
  std::uint64_t seed = 0;
  // Voxel sampling from training cases.
  int patches_per_case = 6;
  std::array<std::int64_t, 3> patch_2d{64, 64, 1};
  std::array<std::int64_t, 3> patch_3d{32, 32, 8};

  void validate() const;
};

struct LutFit {
  MonotoneLut forward;
  MonotoneLut backward;
  TranslatorLosses losses;
};

// Fits forward/backward LUTs on normalised samples in [0, 1] by projected
// gradient descent on W1(forward) + W1(backward) + cycle_weight * cycle.
LutFit fit_luts(std::vector<double> source, std::vector<double> target, const TrainConfig& cfg);

// Trains a translator from raw case volumes. 2D mode draws training voxels from
// axial slice patches, 3D mode from volumetric patches.
TranslatorPair train_translator(const std::vector<const Case*>& source, const std::vector<const Case*>& target,
                                int model_id, WindowMode mode, const TrainConfig& cfg);

struct InferenceWindowConfig {
  std::array<std::int64_t, 3> patch{32, 32, 8};  // 2D mode uses patch[0], patch[1]
  double overlap_ratio = 0.8;

  static InferenceWindowConfig defaults(WindowMode mode);
  void validate(WindowMode mode) const;
  std::int64_t stride(int axis) const;
};

// Window start offsets along an axis of length `length`: a regular grid with
// the given stride plus a final window flush with the end. A single window at
// 0 when the axis is shorter than the patch (the rest is zero padding).
std::vector<std::int64_t> window_starts(std::int64_t length, std::int64_t patch, std::int64_t stride);

// Window origins in raster order (x fastest).
std::vector<std::array<std::int64_t, 3>> window_grid(const Dims& dims, const InferenceWindowConfig& w);

// Sliding-window translation; overlapping window outputs are averaged.
Volume translate(const Volume& v, const TranslatorPair& t, const InferenceWindowConfig& w);
// Same with an explicit window list, visited in the given order.
Volume translate_windows(const Volume& v, const TranslatorPair& t, const InferenceWindowConfig& w,
                         const std::vector<std::array<std::int64_t, 3>>& windows);

using TranslatorSet = std::map<std::pair<int, WindowMode>, TranslatorPair>;

// Trains every matrix entry for every mode; target pools are real hrT2.
TranslatorSet train_matrix(const std::vector<const Case*>& ceT1, const std::vector<const Case*>& hrT2,
                           const TranslationConfigMatrix& matrix, const std::vector<WindowMode>& modes,
                           const TrainConfig& cfg);

std::string pseudo_case_id(const std::string& source_id, int model_id, WindowMode mode);

// One pseudo hrT2 case per (ceT1 case, entry containing its site, mode). The
// tag site is the entry's target site, or the source site for the pooled entry.
std::vector<Case> generate_pseudo_pool(const std::vector<const Case*>& ceT1, const TranslatorSet& translators,
                                       const TranslationConfigMatrix& matrix, const std::vector<WindowMode>& modes,
                                       const std::map<WindowMode, InferenceWindowConfig>& windows);

}  // namespace udaseg::xlate
