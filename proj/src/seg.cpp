#include "udaseg/seg.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <map>
#include <numeric>

#include "udaseg/fsutil.hpp"
#include "udaseg/imgops.hpp"
#include "udaseg/rng.hpp"
#include "udaseg/simd.hpp"

namespace udaseg::seg {

FeatureMap compute_features(const Volume& v) {
  const Geometry& g = v.geometry();
  FeatureMap f;
  f.dims = g.dims;
  const auto n = static_cast<std::size_t>(g.voxel_count());
  double sum = 0.0, sq = 0.0;
  for (const float x : v.values()) {
    sum += x;
    sq += double(x) * x;
  }
  const double mean = sum / double(n);
  const double sd = std::max(1e-6, std::sqrt(std::max(0.0, sq / double(n) - mean * mean)));
  std::vector<float> z(n);
  for (std::size_t i = 0; i < n; ++i) z[i] = static_cast<float>((v.data()[i] - mean) / sd);
  const Volume zv(g, z);
  f.ch[0] = std::move(z);
  const double sigmas[3] = {1.0, 2.0, 4.0};
  for (int s = 0; s < 3; ++s) f.ch[1 + s] = gaussian_smooth_3d(zv, {sigmas[s], sigmas[s], sigmas[s]}).data();

  const auto& s1 = f.ch[1];
  f.ch[4].assign(n, 0.0f);
  const Dims& d = g.dims;
  for (std::int64_t k = 0; k < d[2]; ++k)
    for (std::int64_t j = 0; j < d[1]; ++j)
      for (std::int64_t i = 0; i < d[0]; ++i) {
        double gg = 0.0;
        const std::int64_t idx[3] = {i, j, k};
        for (int a = 0; a < 3; ++a) {
          if (d[a] < 2) continue;
          std::int64_t lo[3] = {i, j, k}, hi[3] = {i, j, k};
          lo[a] = std::max<std::int64_t>(0, idx[a] - 1);
          hi[a] = std::min<std::int64_t>(d[a] - 1, idx[a] + 1);
          const double diff = double(s1[static_cast<std::size_t>(g.linear(hi[0], hi[1], hi[2]))]) -
                              double(s1[static_cast<std::size_t>(g.linear(lo[0], lo[1], lo[2]))]);
          const double dx = diff / (double(hi[a] - lo[a]) * g.spacing[a]);
          gg += dx * dx;
        }
        f.ch[4][static_cast<std::size_t>(g.linear(i, j, k))] = static_cast<float>(std::sqrt(gg));
      }
  for (int a = 0; a < 3; ++a) f.ch[5 + a].resize(n);
  for (std::int64_t k = 0; k < d[2]; ++k)
    for (std::int64_t j = 0; j < d[1]; ++j)
      for (std::int64_t i = 0; i < d[0]; ++i) {
        const auto idx = static_cast<std::size_t>(g.linear(i, j, k));
        const std::int64_t p[3] = {i, j, k};
        for (int a = 0; a < 3; ++a)
          f.ch[5 + a][idx] = d[a] > 1 ? static_cast<float>(double(p[a]) / double(d[a] - 1)) : 0.0f;
      }
  return f;
}

void softmax3(const double* z, double* p) {
  const double m = std::max({z[0], z[1], z[2]});
  double s = 0.0;
  for (int c = 0; c < 3; ++c) s += (p[c] = std::exp(z[c] - m));
  for (int c = 0; c < 3; ++c) p[c] /= s;
}

LossResult dice_ce_loss(std::span<const double> probs, std::span<const std::uint8_t> labels) {
  const std::size_t n = labels.size();
  require(n > 0 && probs.size() == 3 * n, ErrorKind::InvalidArgument,
          "dice_ce_loss: expected N x 3 probabilities for N labels");
  for (std::size_t i = 0; i < n; ++i) {
    const double* p = &probs[3 * i];
    require(p[0] >= 0 && p[1] >= 0 && p[2] >= 0 && std::abs(p[0] + p[1] + p[2] - 1.0) <= 1e-6,
            ErrorKind::InvalidArgument, "dice_ce_loss: probabilities must be non-negative and sum to 1");
    require(labels[i] < kClasses, ErrorKind::InvalidArgument, "dice_ce_loss: label out of range");
  }
  LossResult r;
  r.grad_logits.assign(3 * n, 0.0);
  // Soft Dice for the foreground classes.
  std::array<double, 3> inter{}, psum{}, gsum{};
  for (std::size_t i = 0; i < n; ++i)
    for (int c = 1; c < 3; ++c) {
      const double y = labels[i] == c ? 1.0 : 0.0;
      inter[c] += probs[3 * i + c] * y;
      psum[c] += probs[3 * i + c];
      gsum[c] += y;
    }
  double dice_mean = 0.0;
  std::array<double, 3> den{}, num{};
  for (int c = 1; c < 3; ++c) {
    num[c] = 2.0 * inter[c] + kDiceEps;
    den[c] = psum[c] + gsum[c] + kDiceEps;
    dice_mean += num[c] / den[c] / 2.0;
  }
  r.dice_term = 1.0 - dice_mean;
  const double inv_n = 1.0 / double(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double* p = &probs[3 * i];
    r.ce_term -= std::log(std::max(p[labels[i]], 1e-300)) * inv_n;
    // dL/dp for the Dice term, then through the softmax Jacobian.
    double gp[3] = {0.0, 0.0, 0.0};
    for (int c = 1; c < 3; ++c) {
      const double y = labels[i] == c ? 1.0 : 0.0;
      gp[c] = -0.5 * (2.0 * y / den[c] - num[c] / (den[c] * den[c]));
    }
    const double dot = p[0] * gp[0] + p[1] * gp[1] + p[2] * gp[2];
    for (int c = 0; c < 3; ++c) {
      const double y = labels[i] == c ? 1.0 : 0.0;
      r.grad_logits[3 * i + c] = p[c] * (gp[c] - dot) + (p[c] - y) * inv_n;
    }
  }
  r.loss = r.dice_term + r.ce_term;
  return r;
}

LossResult dice_ce_loss(std::span<const double> probs, const LabelMap& labels) {
  return dice_ce_loss(probs, labels.values());
}

void TrainConfig::validate() const {
  require(lr0 > 0.0, ErrorKind::InvalidArgument, "segmenter: lr0 must be > 0");
  require(epochs >= 1, ErrorKind::InvalidArgument, "segmenter: epochs must be >= 1");
  require(poly_exponent > 0.0, ErrorKind::InvalidArgument, "segmenter: poly_exponent must be > 0");
  require(momentum >= 0.0 && momentum < 1.0, ErrorKind::InvalidArgument, "segmenter: momentum must be in [0, 1)");
  require(batch_voxels >= 3, ErrorKind::InvalidArgument, "segmenter: batch_voxels must be >= 3");
  require(folds >= 2, ErrorKind::InvalidArgument, "segmenter: folds must be >= 2");
  require(hidden >= 1, ErrorKind::InvalidArgument, "segmenter: hidden must be >= 1");
  double s = 0.0;
  for (const double r : class_ratio) {
    require(r > 0.0, ErrorKind::InvalidArgument, "segmenter: class_ratio entries must be > 0");
    s += r;
  }
  require(std::abs(s - 1.0) < 1e-9, ErrorKind::InvalidArgument, "segmenter: class_ratio must sum to 1");
  require(ratio_jitter >= 0.0 && ratio_jitter < *std::min_element(class_ratio.begin(), class_ratio.end()),
          ErrorKind::InvalidArgument, "segmenter: ratio_jitter must be below the smallest class ratio");
}

double lr_schedule(double t, const TrainConfig& cfg) {
  require(t >= 0.0 && t <= cfg.epochs, ErrorKind::InvalidArgument, "lr_schedule: t outside [0, T]");
  return cfg.lr0 * std::pow(1.0 - t / double(cfg.epochs), cfg.poly_exponent);
}

void SegmenterModel::validate() const {
  const auto H = static_cast<std::size_t>(hidden);
  require(hidden >= 1 && w1.size() == H * kFeatures && b1.size() == H && w2.size() == 3 * H && b2.size() == 3,
          ErrorKind::Integrity, "segmenter model: inconsistent layer shapes");
  for (const auto* v : {&w1, &b1, &w2, &b2})
    for (const double x : *v) require(std::isfinite(x), ErrorKind::Integrity, "segmenter model: non-finite weight");
  for (int k = 0; k < kFeatures; ++k)
    require(std::isfinite(mean[k]) && stddev[k] > 0.0 && std::isfinite(stddev[k]), ErrorKind::Integrity,
            "segmenter model: normalisation std must be > 0");
}

void SegmenterModel::forward(const FeatureMap& f, std::int64_t i, double* probs) const {
  double x[kFeatures];
  for (int k = 0; k < kFeatures; ++k) x[k] = (f.ch[k][static_cast<std::size_t>(i)] - mean[k]) / stddev[k];
  double z[3] = {b2[0], b2[1], b2[2]};
  for (int h = 0; h < hidden; ++h) {
    double a = b1[h];
    for (int k = 0; k < kFeatures; ++k) a += w1[h * kFeatures + k] * x[k];
    if (a <= 0.0) continue;
    for (int c = 0; c < 3; ++c) z[c] += w2[c * hidden + h] * a;
  }
  softmax3(z, probs);
}

namespace {

constexpr char kModelMagic[4] = {'U', 'D', 'S', 'M'};
constexpr std::uint32_t kModelVersion = 1;

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

struct Reader {
  std::string_view b;
  std::size_t pos = 0;
  template <typename T>
  T get() {
    if (pos + sizeof(T) > b.size()) throw Error(ErrorKind::Integrity, "segmenter model: truncated file at byte " + std::to_string(pos));
    T v;
    std::memcpy(&v, b.data() + pos, sizeof(T));
    pos += sizeof(T);
    return v;
  }
};

}  // namespace

std::string encode_model(const SegmenterModel& m) {
  m.validate();
  std::string out(kModelMagic, 4);
  put<std::uint32_t>(out, kModelVersion);
  put<std::uint32_t>(out, kFeatures);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(m.hidden));
  put<std::uint32_t>(out, kClasses);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(m.epochs_trained));
  for (const double x : m.mean) put(out, x);
  for (const double x : m.stddev) put(out, x);
  for (const auto* v : {&m.w1, &m.b1, &m.w2, &m.b2})
    for (const double x : *v) put(out, x);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(m.epoch_loss.size()));
  for (const double x : m.epoch_loss) put(out, x);
  return out;
}

SegmenterModel decode_model(std::string_view bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kModelMagic, 4) != 0)
    throw ParseError("segmenter model: bad magic", 0);
  Reader r{bytes, 4};
  if (r.get<std::uint32_t>() != kModelVersion) throw ParseError("segmenter model: unsupported version", 4);
  if (r.get<std::uint32_t>() != kFeatures) throw ParseError("segmenter model: feature count mismatch", 8);
  SegmenterModel m;
  const auto hidden = r.get<std::uint32_t>();
  if (hidden == 0 || hidden > 4096) throw ParseError("segmenter model: implausible hidden width", 12);
  if (r.get<std::uint32_t>() != kClasses) throw ParseError("segmenter model: class count mismatch", 16);
  m.hidden = static_cast<int>(hidden);
  m.epochs_trained = static_cast<int>(r.get<std::uint32_t>());
  for (auto& x : m.mean) x = r.get<double>();
  for (auto& x : m.stddev) x = r.get<double>();
  m.w1.resize(hidden * kFeatures);
  m.b1.resize(hidden);
  m.w2.resize(3 * hidden);
  m.b2.resize(3);
  for (auto* v : {&m.w1, &m.b1, &m.w2, &m.b2})
    for (auto& x : *v) x = r.get<double>();
  const auto n_loss = r.get<std::uint32_t>();
  if (std::size_t(n_loss) * 8 > bytes.size()) throw Error(ErrorKind::Integrity, "segmenter model: truncated loss log");
  m.epoch_loss.resize(n_loss);
  for (auto& x : m.epoch_loss) x = r.get<double>();
  if (r.pos != bytes.size()) throw Error(ErrorKind::Integrity, "segmenter model: trailing bytes");
  m.validate();
  return m;
}

void save_model(const std::string& path, const SegmenterModel& m) { fsutil::write_atomic(path, encode_model(m)); }

SegmenterModel load_model(const std::string& path) {
  try {
    return decode_model(fsutil::read_file(path));
  } catch (const Error& e) {
    rethrow_with_context(e, path);
  }
}

std::vector<int> assign_folds(const std::vector<std::string>& ids, int folds, std::uint64_t seed) {
  require(folds >= 2, ErrorKind::InvalidArgument, "assign_folds: folds must be >= 2");
  std::vector<std::string> unique(ids.begin(), ids.end());
  std::sort(unique.begin(), unique.end());
  unique.erase(std::unique(unique.begin(), unique.end()), unique.end());
  require(static_cast<int>(unique.size()) >= folds, ErrorKind::InvalidArgument,
          "train_segmenter: " + std::to_string(unique.size()) + " distinct cases is fewer than " +
              std::to_string(folds) + " folds");
  Rng rng(stream_seed(seed, {hash_string("folds")}));
  std::shuffle(unique.begin(), unique.end(), rng);
  std::map<std::string, int> fold;
  for (std::size_t i = 0; i < unique.size(); ++i) fold[unique[i]] = static_cast<int>(i % std::size_t(folds));
  std::vector<int> out;
  out.reserve(ids.size());
  for (const auto& id : ids) out.push_back(fold.at(id));
  return out;
}

namespace {

struct TrainCase {
  const FeatureMap* features;
  const std::vector<std::uint8_t>* labels;
  std::array<std::vector<std::int64_t>, kClasses> by_class;
};

SegmenterModel train_fold(const std::vector<const TrainCase*>& cases, const TrainConfig& cfg, std::uint64_t seed) {
  SegmenterModel m;
  m.hidden = cfg.hidden;
  const auto H = static_cast<std::size_t>(cfg.hidden);
  // Normalisation statistics over every voxel of the fold's training cases.
  std::array<double, kFeatures> s{}, sq{};
  double count = 0.0;
  for (const TrainCase* c : cases) {
    for (int k = 0; k < kFeatures; ++k)
      for (const float x : c->features->ch[k]) {
        s[k] += x;
        sq[k] += double(x) * x;
      }
    count += double(c->features->voxels());
  }
  for (int k = 0; k < kFeatures; ++k) {
    m.mean[k] = s[k] / count;
    m.stddev[k] = std::max(1e-6, std::sqrt(std::max(0.0, sq[k] / count - m.mean[k] * m.mean[k])));
  }

  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  m.w1.resize(H * kFeatures);
  m.b1.assign(H, 0.0);
  m.w2.resize(3 * H);
  m.b2.assign(3, 0.0);
  for (auto& w : m.w1) w = normal(rng) * std::sqrt(2.0 / kFeatures);
  for (auto& w : m.w2) w = normal(rng) * std::sqrt(2.0 / double(H));

  std::vector<double> v1(m.w1.size(), 0.0), vb1(H, 0.0), v2(m.w2.size(), 0.0), vb2(3, 0.0);
  std::vector<double> g1(m.w1.size()), gb1(H), g2(m.w2.size()), gb2(3);
  const auto B = static_cast<std::size_t>(cfg.batch_voxels);
  std::vector<double> x(B * kFeatures), pre(B * H), probs(B * 3);
  std::vector<std::uint8_t> y(B);
  std::vector<std::size_t> order(cases.size());
  std::iota(order.begin(), order.end(), 0);
  std::uniform_real_distribution<double> jitter(-cfg.ratio_jitter, cfg.ratio_jitter);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    for (std::size_t step = 0; step < order.size(); ++step) {
      const TrainCase& tc = *cases[order[step]];
      // Class-balanced batch: jittered shares, empty classes fall back to background.
      std::array<std::size_t, kClasses> want{};
      const double j1 = jitter(rng), j2 = jitter(rng);
      want[1] = tc.by_class[1].empty() ? 0 : static_cast<std::size_t>(std::llround(double(B) * (cfg.class_ratio[1] + j1)));
      want[2] = tc.by_class[2].empty() ? 0 : static_cast<std::size_t>(std::llround(double(B) * (cfg.class_ratio[2] + j2)));
      want[0] = B - want[1] - want[2];
      std::size_t b = 0;
      for (int c = 0; c < kClasses; ++c) {
        const auto& pool = tc.by_class[c].empty() ? tc.by_class[0] : tc.by_class[c];
        std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
        for (std::size_t n = 0; n < want[c]; ++n, ++b) {
          const auto idx = static_cast<std::size_t>(pool[pick(rng)]);
          for (int k = 0; k < kFeatures; ++k)
            x[b * kFeatures + k] = (tc.features->ch[k][idx] - m.mean[k]) / m.stddev[k];
          y[b] = (*tc.labels)[idx];
        }
      }
      // Forward.
      for (std::size_t i = 0; i < B; ++i) {
        double z[3] = {m.b2[0], m.b2[1], m.b2[2]};
        for (std::size_t h = 0; h < H; ++h) {
          double a = m.b1[h];
          for (int k = 0; k < kFeatures; ++k) a += m.w1[h * kFeatures + k] * x[i * kFeatures + k];
          pre[i * H + h] = a;
          if (a > 0.0)
            for (int c = 0; c < 3; ++c) z[c] += m.w2[c * H + h] * a;
        }
        softmax3(z, &probs[3 * i]);
      }
      const LossResult loss = dice_ce_loss(probs, y);
      epoch_loss += loss.loss;
      // Backward.
      std::fill(g1.begin(), g1.end(), 0.0);
      std::fill(gb1.begin(), gb1.end(), 0.0);
      std::fill(g2.begin(), g2.end(), 0.0);
      std::fill(gb2.begin(), gb2.end(), 0.0);
      for (std::size_t i = 0; i < B; ++i) {
        const double* dz = &loss.grad_logits[3 * i];
        for (int c = 0; c < 3; ++c) gb2[c] += dz[c];
        for (std::size_t h = 0; h < H; ++h) {
          const double a = pre[i * H + h];
          if (a <= 0.0) continue;
          double dh = 0.0;
          for (int c = 0; c < 3; ++c) {
            g2[c * H + h] += dz[c] * a;
            dh += m.w2[c * H + h] * dz[c];
          }
          gb1[h] += dh;
          for (int k = 0; k < kFeatures; ++k) g1[h * kFeatures + k] += dh * x[i * kFeatures + k];
        }
      }
      const double lr = lr_schedule(double(epoch) + double(step) / double(order.size()), cfg);
      auto update = [&](std::vector<double>& w, std::vector<double>& vel, const std::vector<double>& g) {
        for (std::size_t i = 0; i < w.size(); ++i) {
          vel[i] = cfg.momentum * vel[i] - lr * g[i];
          w[i] += vel[i];
        }
      };
      update(m.w1, v1, g1);
      update(m.b1, vb1, gb1);
      update(m.w2, v2, g2);
      update(m.b2, vb2, gb2);
    }
    m.epoch_loss.push_back(epoch_loss / double(order.size()));
  }
  m.epochs_trained = cfg.epochs;
  m.validate();
  return m;
}

}  // namespace

TrainResult train_segmenter(const std::vector<const Case*>& cases, const TrainConfig& cfg) {
  cfg.validate();
  std::vector<std::string> ids;
  for (const Case* c : cases) {
    require(c->labels.has_value(), ErrorKind::InvalidArgument, "train_segmenter: case " + c->id + " has no labels");
    ids.push_back(c->id);
  }
  TrainResult out;
  out.fold_of_case = assign_folds(ids, cfg.folds, cfg.seed);

  // Features once per distinct case object; repeated entries share them.
  std::map<const Case*, std::size_t> slot;
  std::vector<FeatureMap> features;
  std::vector<TrainCase> prepared;
  features.reserve(cases.size());
  prepared.reserve(cases.size());
  std::vector<std::size_t> case_slot;
  for (const Case* c : cases) {
    auto [it, fresh] = slot.emplace(c, features.size());
    if (fresh) {
      features.push_back(compute_features(c->volume));
      TrainCase tc{&features.back(), &c->labels->data(), {}};
      for (std::int64_t i = 0; i < c->labels->size(); ++i) tc.by_class[(*c->labels)[i]].push_back(i);
      prepared.push_back(std::move(tc));
    }
    case_slot.push_back(it->second);
  }
  for (int k = 0; k < cfg.folds; ++k) {
    std::vector<const TrainCase*> train;
    for (std::size_t i = 0; i < cases.size(); ++i)
      if (out.fold_of_case[i] != k) train.push_back(&prepared[case_slot[i]]);
    out.models.push_back(train_fold(train, cfg, stream_seed(cfg.seed, {hash_string("fold"), std::uint64_t(k)})));
  }
  return out;
}

LabelMap argmax_labels(const std::array<std::vector<float>, kClasses>& probs, const Geometry& g) {
  const auto n = static_cast<std::size_t>(g.voxel_count());
  std::vector<std::uint8_t> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::uint8_t best = 0;
    for (std::uint8_t c = 1; c < kClasses; ++c)
      if (probs[c][i] > probs[best][i]) best = c;
    out[i] = best;
  }
  return LabelMap(g, std::move(out));
}

Prediction predict(const std::vector<const SegmenterModel*>& models, const FeatureMap& f, const Geometry& g) {
  require(!models.empty(), ErrorKind::InvalidArgument, "predict: empty model list");
  require(f.dims == g.dims, ErrorKind::InvalidArgument, "predict: features do not match the grid");
  const auto n = static_cast<std::size_t>(f.voxels());
  Prediction p;
  for (auto& c : p.probs) c.assign(n, 0.0f);
  // Batched float forward pass: hidden units are built with axpy over channel blocks.
  constexpr std::size_t kBlock = 1024;
  std::vector<std::vector<float>> xn(kFeatures, std::vector<float>(kBlock));
  std::vector<float> hid(kBlock);
  std::array<std::vector<float>, 3> logit;
  for (auto& l : logit) l.resize(kBlock);
  std::vector<double> acc(3 * n, 0.0);
  for (const SegmenterModel* m : models) {
    m->validate();
    for (std::size_t start = 0; start < n; start += kBlock) {
      const std::size_t len = std::min(kBlock, n - start);
      for (int k = 0; k < kFeatures; ++k)
        for (std::size_t i = 0; i < len; ++i)
          xn[k][i] = static_cast<float>((f.ch[k][start + i] - m->mean[k]) / m->stddev[k]);
      for (int c = 0; c < 3; ++c) std::fill_n(logit[c].begin(), len, static_cast<float>(m->b2[c]));
      for (int h = 0; h < m->hidden; ++h) {
        std::fill_n(hid.begin(), len, static_cast<float>(m->b1[h]));
        std::span<float> hs(hid.data(), len);
        for (int k = 0; k < kFeatures; ++k)
          simd::axpy(static_cast<float>(m->w1[h * kFeatures + k]), std::span<const float>(xn[k].data(), len), hs);
        simd::relu(hs);
        for (int c = 0; c < 3; ++c)
          simd::axpy(static_cast<float>(m->w2[c * m->hidden + h]), std::span<const float>(hid.data(), len),
                     std::span<float>(logit[c].data(), len));
      }
      for (std::size_t i = 0; i < len; ++i) {
        const double z[3] = {logit[0][i], logit[1][i], logit[2][i]};
        double q[3];
        softmax3(z, q);
        for (int c = 0; c < 3; ++c) acc[3 * (start + i) + c] += q[c];
      }
    }
  }
  const double inv = 1.0 / double(models.size());
  for (std::size_t i = 0; i < n; ++i)
    for (int c = 0; c < 3; ++c) p.probs[c][i] = static_cast<float>(acc[3 * i + c] * inv);
  p.labels = argmax_labels(p.probs, g);
  return p;
}

Prediction predict(const std::vector<const SegmenterModel*>& models, const Volume& v) {
  return predict(models, compute_features(v), v.geometry());
}

}  // namespace udaseg::seg
