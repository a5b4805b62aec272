#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "udaseg/volume.hpp"

namespace udaseg::seg {

inline constexpr int kFeatures = 8;
inline constexpr int kClasses = label::kNumClasses;

// Per-voxel features, one channel per feature (structure of arrays):
// 0 raw intensity z-scored over the volume, 1-3 Gaussian-smoothed z-scored
// intensity at sigma 1, 2, 4 voxels, 4 gradient magnitude of the sigma-1
// channel, 5-7 voxel coordinates scaled to [0, 1] over the grid.
struct FeatureMap {
  Dims dims{1, 1, 1};
  std::array<std::vector<float>, kFeatures> ch;

  std::int64_t voxels() const { return dims[0] * dims[1] * dims[2]; }
};

FeatureMap compute_features(const Volume& v);

struct LossResult {
  double loss = 0.0;
  double dice_term = 0.0;  // 1 - mean foreground soft Dice
  double ce_term = 0.0;    // mean cross-entropy
  std::vector<double> grad_logits;  // N x 3, row-major
};

inline constexpr double kDiceEps = 1e-5;

// Soft Dice (classes 1 and 2) plus cross-entropy. `probs` is N x 3 row-major,
// each row a softmax output; the gradient is taken with respect to the logits
// that produced it.
LossResult dice_ce_loss(std::span<const double> probs, std::span<const std::uint8_t> labels);
LossResult dice_ce_loss(std::span<const double> probs, const LabelMap& labels);

void softmax3(const double* logits, double* probs);

struct TrainConfig {
  double lr0 = 1e-2;
  int epochs = 120;
  double poly_exponent = 0.9;
  double momentum = 0.9;
  int batch_voxels = 256;
  int folds = 5;
  int hidden = 16;
  // Expected share of each class in a batch, then jittered by +-ratio_jitter.
  // Background-heavy: equal thirds over-predict the foreground by an order of
  // magnitude on ROI crops, where VS and cochlea are a few percent of voxels.
  std::array<double, kClasses> class_ratio{0.85, 0.075, 0.075};
  double ratio_jitter = 0.03;
  std::uint64_t seed = 0;

  void validate() const;
};

// lr0 * (1 - t/T)^exponent for t in [0, T] (epochs, fractional allowed).
double lr_schedule(double t, const TrainConfig& cfg);

struct SegmenterModel {
  std::array<double, kFeatures> mean{};
  std::array<double, kFeatures> stddev{};
  int hidden = 16;
  std::vector<double> w1;  // hidden x F
  std::vector<double> b1;  // hidden
  std::vector<double> w2;  // 3 x hidden
  std::vector<double> b2;  // 3
  int epochs_trained = 0;
  std::vector<double> epoch_loss;  // mean training loss per epoch

  void validate() const;
  // Class probabilities for voxel `i` of `f` (3 values).
  void forward(const FeatureMap& f, std::int64_t i, double* probs) const;
};

std::string encode_model(const SegmenterModel& m);
SegmenterModel decode_model(std::string_view bytes);
void save_model(const std::string& path, const SegmenterModel& m);
SegmenterModel load_model(const std::string& path);

struct TrainResult {
  std::vector<SegmenterModel> models;  // one per fold
  std::vector<int> fold_of_case;       // aligned with the input cases
};

// Case-level k-fold split keyed on unique ids (sorted, then shuffled with the
// seed); repeated ids land in the same fold.
std::vector<int> assign_folds(const std::vector<std::string>& ids, int folds, std::uint64_t seed);

TrainResult train_segmenter(const std::vector<const Case*>& cases, const TrainConfig& cfg);

struct Prediction {
  std::array<std::vector<float>, kClasses> probs;
  LabelMap labels;
};

// Mean of per-model probabilities; argmax with ties going to the lower class.
Prediction predict(const std::vector<const SegmenterModel*>& models, const Volume& v);
Prediction predict(const std::vector<const SegmenterModel*>& models, const FeatureMap& f, const Geometry& g);
LabelMap argmax_labels(const std::array<std::vector<float>, kClasses>& probs, const Geometry& g);

}  // namespace udaseg::seg
