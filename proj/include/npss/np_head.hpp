#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "npss/autodiff.hpp"
#include "npss/errors.hpp"
#include "npss/ops.hpp"
#include "npss/rng.hpp"
#include "npss/segmodel.hpp"
#include "npss/tensor.hpp"

namespace npss {

/// Per-pixel class ids, H x W.
using LabelMap = BasicTensor<int>;
inline constexpr int kIgnoreLabel = 255;

// ---------------------------------------------------------------------------
// Memory banks and centers
// ---------------------------------------------------------------------------

/// Fixed-capacity FIFO ring of feature vectors for one class.
template <class T>
class ClassMemoryBank {
 public:
  ClassMemoryBank(int class_id, int capacity, int dim)
      : class_id_(class_id), capacity_(capacity), dim_(dim), ring_(static_cast<std::size_t>(capacity) * dim) {
    if (capacity < 1 || dim < 1) throw ConfigError("memory bank capacity and dimension must be positive");
  }

  int class_id() const { return class_id_; }
  int capacity() const { return capacity_; }
  int dim() const { return dim_; }
  int count() const { return count_; }

  void insert(std::span<const T> v) {
    if (static_cast<int>(v.size()) != dim_) throw ShapeError("memory bank: vector dimension mismatch");
    std::copy(v.begin(), v.end(), ring_.begin() + static_cast<std::ptrdiff_t>(head_) * dim_);
    head_ = (head_ + 1) % capacity_;
    count_ = std::min(count_ + 1, capacity_);
  }

  /// Stored vectors from oldest to newest.
  std::vector<std::vector<T>> contents() const {
    std::vector<std::vector<T>> out;
    const int start = count_ < capacity_ ? 0 : head_;
    for (int i = 0; i < count_; ++i) {
      const auto* p = ring_.data() + static_cast<std::size_t>((start + i) % capacity_) * dim_;
      out.emplace_back(p, p + dim_);
    }
    return out;
  }

  /// Arithmetic mean of the stored vectors, accumulated in double; empty when count is 0.
  std::vector<T> mean() const {
    if (count_ == 0) return {};
    std::vector<double> acc(static_cast<std::size_t>(dim_), 0.0);
    for (int i = 0; i < count_; ++i)
      for (int d = 0; d < dim_; ++d) acc[static_cast<std::size_t>(d)] += ring_[static_cast<std::size_t>(i) * dim_ + d];
    std::vector<T> out(static_cast<std::size_t>(dim_));
    for (int d = 0; d < dim_; ++d) out[static_cast<std::size_t>(d)] = static_cast<T>(acc[static_cast<std::size_t>(d)] / count_);
    return out;
  }

  void clear() {
    head_ = 0;
    count_ = 0;
  }

 private:
  int class_id_;
  int capacity_;
  int dim_;
  std::vector<T> ring_;
  int head_ = 0;
  int count_ = 0;
};

/// Per-class center vectors; a center exists only for classes whose bank is non-empty.
template <class T>
struct CenterSet {
  int dim = 0;
  std::vector<std::vector<T>> centers;  // one per class, empty when unpopulated
  std::vector<bool> populated;

  CenterSet() = default;
  CenterSet(int n_class, int d)
      : dim(d), centers(static_cast<std::size_t>(n_class)), populated(static_cast<std::size_t>(n_class), false) {}

  int n_class() const { return static_cast<int>(centers.size()); }
  int populated_count() const { return static_cast<int>(std::count(populated.begin(), populated.end(), true)); }

  void set(int cls, std::vector<T> c) {
    if (static_cast<int>(c.size()) != dim) throw ShapeError("center dimension mismatch");
    centers.at(static_cast<std::size_t>(cls)) = std::move(c);
    populated.at(static_cast<std::size_t>(cls)) = true;
  }

  /// Populated centers stacked in class order, K' x R.
  BasicTensor<T> matrix() const {
    const int k = populated_count();
    if (k == 0) throw AggregationError("center set has no populated class");
    BasicTensor<T> m({k, dim});
    int row = 0;
    for (std::size_t c = 0; c < centers.size(); ++c)
      if (populated[c]) std::copy(centers[c].begin(), centers[c].end(), m.raw() + static_cast<std::size_t>(row++) * dim);
    return m;
  }

  bool operator==(const CenterSet&) const = default;
};

/// One bank per class; insertion routes pixel vectors by label.
template <class T>
class BankSet {
 public:
  BankSet() = default;
  BankSet(int n_class, int capacity, int dim) {
    for (int c = 0; c < n_class; ++c) banks_.emplace_back(c, capacity, dim);
  }

  int n_class() const { return static_cast<int>(banks_.size()); }
  const ClassMemoryBank<T>& bank(int c) const { return banks_.at(static_cast<std::size_t>(c)); }

  /// Appends each pixel's R-vector to its label's bank in row-major pixel order; pixels
  /// carrying `ignore_label` are skipped. Returns the number of inserted vectors.
  std::size_t insert(const BasicTensor<T>& reduced, const LabelMap& labels, int ignore_label = kIgnoreLabel) {
    if (reduced.rank() != 3 || labels.rank() != 2 || labels.dim(0) != reduced.dim(1) || labels.dim(1) != reduced.dim(2))
      throw ShapeError("bank insert: label map " + shape_str(labels.shape()) + " does not match feature map " +
                       shape_str(reduced.shape()));
    const int r = reduced.dim(0);
    if (!banks_.empty() && r != banks_.front().dim()) throw ShapeError("bank insert: feature dimension mismatch");
    const int hw = labels.dim(0) * labels.dim(1);
    for (int p = 0; p < hw; ++p) {
      const int l = labels[static_cast<std::size_t>(p)];
      if (l == ignore_label) continue;
      if (l < 0 || l >= n_class()) throw DataError("bank insert: label " + std::to_string(l) + " out of range");
    }
    std::vector<T> v(static_cast<std::size_t>(r));
    std::size_t inserted = 0;
    for (int p = 0; p < hw; ++p) {
      const int l = labels[static_cast<std::size_t>(p)];
      if (l == ignore_label) continue;
      for (int c = 0; c < r; ++c) v[static_cast<std::size_t>(c)] = reduced[static_cast<std::size_t>(c) * hw + p];
      banks_[static_cast<std::size_t>(l)].insert(v);
      ++inserted;
    }
    return inserted;
  }

  CenterSet<T> centers() const {
    CenterSet<T> out(n_class(), banks_.empty() ? 0 : banks_.front().dim());
    for (const auto& b : banks_)
      if (b.count() > 0) out.set(b.class_id(), b.mean());
    return out;
  }

  std::size_t total_count() const {
    std::size_t n = 0;
    for (const auto& b : banks_) n += static_cast<std::size_t>(b.count());
    return n;
  }

  void clear() {
    for (auto& b : banks_) b.clear();
  }

 private:
  std::vector<ClassMemoryBank<T>> banks_;
};

// ---------------------------------------------------------------------------
// Aggregators
// ---------------------------------------------------------------------------

/// Distance-softmax attention over centers.
///
/// For every pixel the weights are softmax_l(-||M[:,p] - C[l]||_2), shifted by the minimum
/// distance before exponentiation, and the output is sum_l w_l C[l]. Centers are constants;
/// the gradient flows into the query map only.
template <class T>
Var attention_aggregate(Tape<T>& tape, Var query, const BasicTensor<T>& centers) {
  const auto& m = tape.value(query);
  if (m.rank() != 3) throw ShapeError("attention: query must be R x H x W");
  if (centers.empty()) throw AggregationError("attention: no populated centers");
  if (centers.rank() != 2 || centers.dim(1) != m.dim(0))
    throw ShapeError("attention: centers " + shape_str(centers.shape()) + " incompatible with query " + shape_str(m.shape()));
  const int r = m.dim(0), hw = m.dim(1) * m.dim(2), k = centers.dim(0);
  BasicTensor<T> y(m.shape());
  std::vector<T> weights(static_cast<std::size_t>(hw) * k);
  std::vector<T> dists(static_cast<std::size_t>(hw) * k);
  std::vector<double> d(static_cast<std::size_t>(k));
  for (int p = 0; p < hw; ++p) {
    double dmin = INFINITY;
    for (int l = 0; l < k; ++l) {
      double s = 0;
      for (int c = 0; c < r; ++c) {
        const double diff = static_cast<double>(m[static_cast<std::size_t>(c) * hw + p]) - centers.at(l, c);
        s += diff * diff;
      }
      d[static_cast<std::size_t>(l)] = std::sqrt(s);
      dmin = std::min(dmin, d[static_cast<std::size_t>(l)]);
    }
    double z = 0;
    for (int l = 0; l < k; ++l) z += std::exp(-(d[static_cast<std::size_t>(l)] - dmin));
    for (int l = 0; l < k; ++l) {
      const std::size_t idx = static_cast<std::size_t>(p) * k + l;
      weights[idx] = static_cast<T>(std::exp(-(d[static_cast<std::size_t>(l)] - dmin)) / z);
      dists[idx] = static_cast<T>(d[static_cast<std::size_t>(l)]);
    }
    for (int c = 0; c < r; ++c) {
      double acc = 0;
      for (int l = 0; l < k; ++l) acc += static_cast<double>(weights[static_cast<std::size_t>(p) * k + l]) * centers.at(l, c);
      y[static_cast<std::size_t>(c) * hw + p] = static_cast<T>(acc);
    }
  }
  return tape.push(std::move(y), {query},
                   [=, weights = std::move(weights), dists = std::move(dists)](Tape<T>& tp, const BasicTensor<T>& gy) {
                     const auto& mv = tp.value(query);
                     auto& gm = tp.grad_buffer(query);
                     std::vector<double> gw(static_cast<std::size_t>(k));
                     for (int p = 0; p < hw; ++p) {
                       const T* w = weights.data() + static_cast<std::size_t>(p) * k;
                       double dot = 0;
                       for (int l = 0; l < k; ++l) {
                         double s = 0;
                         for (int c = 0; c < r; ++c) s += static_cast<double>(gy[static_cast<std::size_t>(c) * hw + p]) * centers.at(l, c);
                         gw[static_cast<std::size_t>(l)] = s;
                         dot += w[l] * s;
                       }
                       for (int l = 0; l < k; ++l) {
                         // d loss / d(-dist_l) = w_l (gw_l - sum_k w_k gw_k)
                         const double gs = w[l] * (gw[static_cast<std::size_t>(l)] - dot);
                         const double dist = dists[static_cast<std::size_t>(p) * k + l];
                         if (dist <= 0.0) continue;  // subgradient 0 at a center
                         for (int c = 0; c < r; ++c) {
                           const std::size_t i = static_cast<std::size_t>(c) * hw + p;
                           gm[i] += static_cast<T>(-gs * (static_cast<double>(mv[i]) - centers.at(l, c)) / dist);
                         }
                       }
                     }
                   });
}

/// Attention weights for one query vector; exposed for invariant checks.
template <class T>
std::vector<double> attention_weights(std::span<const T> query, const BasicTensor<T>& centers) {
  const int k = centers.dim(0), r = centers.dim(1);
  std::vector<double> d(static_cast<std::size_t>(k));
  double dmin = INFINITY;
  for (int l = 0; l < k; ++l) {
    double s = 0;
    for (int c = 0; c < r; ++c) {
      const double diff = static_cast<double>(query[static_cast<std::size_t>(c)]) - centers.at(l, c);
      s += diff * diff;
    }
    d[static_cast<std::size_t>(l)] = std::sqrt(s);
    dmin = std::min(dmin, d[static_cast<std::size_t>(l)]);
  }
  double z = 0;
  for (auto& v : d) z += (v = std::exp(-(v - dmin)));
  for (auto& v : d) v /= z;
  return d;
}

/// Plain mean of the populated centers broadcast to every pixel; independent of the query.
template <class T>
Var mean_aggregate(Tape<T>& tape, Var query, const BasicTensor<T>& centers) {
  const auto& m = tape.value(query);
  if (centers.empty()) throw AggregationError("mean aggregator: no populated centers");
  const int r = m.dim(0), hw = m.dim(1) * m.dim(2), k = centers.dim(0);
  BasicTensor<T> y(m.shape());
  for (int c = 0; c < r; ++c) {
    double s = 0;
    for (int l = 0; l < k; ++l) s += centers.at(l, c);
    std::fill_n(y.raw() + static_cast<std::size_t>(c) * hw, hw, static_cast<T>(s / k));
  }
  return tape.constant(std::move(y));
}

enum class Aggregator { kAttention, kMean };

inline std::string to_string(Aggregator a) { return a == Aggregator::kAttention ? "attention" : "mean"; }
inline Aggregator parse_aggregator(const std::string& s) {
  if (s == "attention") return Aggregator::kAttention;
  if (s == "mean") return Aggregator::kMean;
  throw ConfigError("aggregator must be 'attention' or 'mean', got '" + s + "'");
}

template <class T>
Var aggregate(Tape<T>& tape, Aggregator kind, Var query, const BasicTensor<T>& centers) {
  return kind == Aggregator::kAttention ? attention_aggregate(tape, query, centers) : mean_aggregate(tape, query, centers);
}

// ---------------------------------------------------------------------------
// Latent path
// ---------------------------------------------------------------------------

inline constexpr double kVarFloor = 1e-4;

template <class T>
struct LatentDistribution {
  std::vector<T> mu;
  std::vector<T> var;
};

struct LatentVars {
  Var mu;
  Var var;
};

/// Pooled R-vector -> two-layer ReLU trunk -> mean head and variance head
/// (variance = softplus(raw) + floor).
template <class T>
class LatentHead {
 public:
  LatentHead() = default;
  LatentHead(int in_dim, int hidden, int latent_dim, Rng& rng, double var_floor = kVarFloor)
      : trunk1_("latent.trunk1", in_dim, hidden, rng),
        trunk2_("latent.trunk2", hidden, hidden, rng),
        mu_head_("latent.mu", hidden, latent_dim, rng),
        var_head_("latent.var", hidden, latent_dim, rng),
        latent_dim_(latent_dim),
        var_floor_(var_floor) {}

  int latent_dim() const { return latent_dim_; }

  LatentVars operator()(Tape<T>& tape, Var pooled) {
    const int in = static_cast<int>(tape.value(pooled).size());
    Var x = reshape(tape, pooled, {1, in});
    Var h = relu(tape, trunk1_(tape, x));
    h = relu(tape, trunk2_(tape, h));
    Var mu = reshape(tape, mu_head_(tape, h), {latent_dim_});
    Var var = add_scalar(tape, softplus(tape, reshape(tape, var_head_(tape, h), {latent_dim_})), static_cast<T>(var_floor_));
    return {mu, var};
  }

  /// Zeroes both heads' weights and biases.
  void zero_heads() {
    for (auto* p : {&mu_head_.weight, &mu_head_.bias, &var_head_.weight, &var_head_.bias}) p->value.fill(T(0));
  }

  void collect(ParamList<T>& out) {
    trunk1_.collect(out);
    trunk2_.collect(out);
    mu_head_.collect(out);
    var_head_.collect(out);
  }

 private:
  LinearLayer<T> trunk1_, trunk2_, mu_head_, var_head_;
  int latent_dim_ = 0;
  double var_floor_ = kVarFloor;
};

/// Standard normal draws, T x D, row-major from rng.
template <class T>
BasicTensor<T> draw_standard_normal(int t, int d, Rng& rng) {
  BasicTensor<T> eps({t, d});
  for (auto& v : eps.data()) v = static_cast<T>(rng.normal());
  return eps;
}

/// T reparameterized samples mu + sqrt(var) * eps.
template <class T>
BasicTensor<T> sample_latents(const LatentDistribution<T>& dist, int t, Rng& rng) {
  if (t < 1) throw ConfigError("sample_latents: T must be >= 1");
  Tape<T> tape(false);
  const int d = static_cast<int>(dist.mu.size());
  Var mu = tape.constant(BasicTensor<T>({d}, dist.mu));
  Var var = tape.constant(BasicTensor<T>({d}, dist.var));
  return tape.value(reparameterize(tape, mu, var, draw_standard_normal<T>(t, d, rng)));
}

/// Replicates a K-vector to K x H x W, or to reps x K x H x W when reps > 0.
template <class T>
BasicTensor<T> tile_vector(std::span<const T> v, int reps, int h, int w) {
  Tape<T> tape(false);
  const int k = static_cast<int>(v.size());
  Var row = tape.constant(BasicTensor<T>({1, k}, std::vector<T>(v.begin(), v.end())));
  if (reps > 0) row = reshape(tape, repeat(tape, reshape(tape, row, {k}), reps), {reps, k});
  auto out = tape.value(tile_spatial(tape, row, h, w));
  return reps > 0 ? out : out.reshaped({k, h, w});
}

// ---------------------------------------------------------------------------
// Predictions
// ---------------------------------------------------------------------------

template <class T>
struct PredictionBundle {
  BasicTensor<T> per_sample_probs;  // T x n_class x H x W
  BasicTensor<T> avg_probs;         // n_class x H x W
  BasicTensor<T> uncertainty;       // H x W
};

/// Per-pixel entropy -sum_c p_c ln p_c of an n_class x H x W map, with 0 ln 0 = 0.
template <class T>
BasicTensor<T> entropy_map(const BasicTensor<T>& probs) {
  if (probs.rank() != 3) throw ShapeError("entropy_map: expected n_class x H x W");
  const int n = probs.dim(0), h = probs.dim(1), w = probs.dim(2), hw = h * w;
  BasicTensor<T> out({h, w});
  for (int p = 0; p < hw; ++p) {
    double e = 0;
    for (int c = 0; c < n; ++c) {
      const double v = probs[static_cast<std::size_t>(c) * hw + p];
      if (v > 0) e -= v * std::log(v);
    }
    out[static_cast<std::size_t>(p)] = static_cast<T>(std::clamp(e, 0.0, std::log(static_cast<double>(n))));
  }
  return out;
}

template <class T>
PredictionBundle<T> make_bundle(BasicTensor<T> per_sample_probs) {
  const int t = per_sample_probs.dim(0);
  Shape inner(per_sample_probs.shape().begin() + 1, per_sample_probs.shape().end());
  BasicTensor<T> avg(inner);
  const std::size_t len = avg.size();
  for (std::size_t i = 0; i < len; ++i) {
    T s = 0;
    for (int k = 0; k < t; ++k) s += per_sample_probs[static_cast<std::size_t>(k) * len + i];
    avg[i] = s / static_cast<T>(t);
  }
  auto unc = entropy_map(avg);
  return {std::move(per_sample_probs), std::move(avg), std::move(unc)};
}

// ---------------------------------------------------------------------------
// The head
// ---------------------------------------------------------------------------

struct NpHeadConfig {
  int feature_channels = 32;  // D
  int reduced_channels = 8;   // R
  int latent_dim = 8;         // D_t
  int context_dim = 8;        // D_c
  int samples = 5;            // T
  int bank_capacity = 2560;   // Q
  int latent_hidden = 32;
  int decoder_hidden = 64;
  int n_class = 4;
  Aggregator aggregator = Aggregator::kAttention;

  int decoder_in_channels() const { return feature_channels + latent_dim + context_dim; }
};

/// Counts encoder and decoder-stack invocations when attached to a model.
struct PassCounter {
  std::int64_t encoder_passes = 0;
  std::int64_t decoder_passes = 0;
  void reset() { *this = {}; }
};

struct HeadOutputs {
  Var reduced;
  Var assembled;  // T x (D + D_t + D_c) x H x W
  Var logits;     // T x n_class x H x W
  Var probs;      // T x n_class x H x W
  Var avg_probs;  // n_class x H x W
  std::optional<LatentVars> target_latent;
  std::optional<LatentVars> context_latent;
  Var context_rep;  // D_c
};

/// Everything after the encoder: reduction, both center families, latent and
/// deterministic paths, assembly and the decoder.
template <class T>
class NpHead {
 public:
  NpHead() = default;
  NpHead(const NpHeadConfig& cfg, Rng& rng)
      : cfg_(cfg),
        reduce_(SmallConvNetConfig{cfg.feature_channels, cfg.reduced_channels}, rng),
        latent_(cfg.reduced_channels, cfg.latent_hidden, cfg.latent_dim, rng),
        proj_("context.proj", cfg.reduced_channels, cfg.context_dim, rng),
        decoder_(DecoderConfig{cfg.decoder_in_channels(), cfg.decoder_hidden, cfg.n_class}, rng),
        context_banks_(cfg.n_class, cfg.bank_capacity, cfg.reduced_channels),
        target_banks_(cfg.n_class, cfg.bank_capacity, cfg.reduced_channels),
        context_centers_(cfg.n_class, cfg.reduced_channels),
        target_centers_(cfg.n_class, cfg.reduced_channels) {
    if (cfg.samples < 1) throw ConfigError("T must be >= 1");
    if (cfg.n_class < 2) throw ConfigError("n_class must be >= 2");
  }

  const NpHeadConfig& config() const { return cfg_; }
  NpHeadConfig& mutable_config() { return cfg_; }
  SmallConvNet<T>& small_convnet() { return reduce_; }
  Decoder<T>& decoder() { return decoder_; }
  LatentHead<T>& latent_head() { return latent_; }
  LinearLayer<T>& context_projection() { return proj_; }

  BankSet<T>& context_banks() { return context_banks_; }
  BankSet<T>& target_banks() { return target_banks_; }
  const CenterSet<T>& context_centers() const { return context_centers_; }
  const CenterSet<T>& target_centers() const { return target_centers_; }

  /// Recomputes both center sets from the banks.
  void refresh_centers() {
    context_centers_ = context_banks_.centers();
    target_centers_ = target_banks_.centers();
  }

  /// Installs frozen centers (inference after import).
  void set_centers(CenterSet<T> context, CenterSet<T> target) {
    if (context.dim != cfg_.reduced_channels || target.dim != cfg_.reduced_channels ||
        context.n_class() != cfg_.n_class || target.n_class() != cfg_.n_class)
      throw FormatError("center sets do not match head configuration");
    context_centers_ = std::move(context);
    target_centers_ = std::move(target);
  }

  Var reduce(Tape<T>& tape, Var featmap) { return reduce_(tape, featmap); }

  /// Order-invariant context representation: aggregate against context centers, pool, project.
  Var deterministic_context(Tape<T>& tape, Var reduced) {
    Var pooled = global_avg_pool(tape, aggregate(tape, cfg_.aggregator, reduced, context_centers_.matrix()));
    return reshape(tape, proj_(tape, reshape(tape, pooled, {1, cfg_.reduced_channels})), {cfg_.context_dim});
  }

  LatentVars infer_latent(Tape<T>& tape, Var centers_map) { return latent_(tape, global_avg_pool(tape, centers_map)); }

  /// Runs the head on one target feature map (D x H x W) whose reduced map is already on the tape.
  HeadOutputs forward(Tape<T>& tape, Var featmap, Var reduced, Rng& rng, PassCounter* counter = nullptr) {
    const auto& f = tape.value(featmap);
    if (f.rank() != 3 || f.dim(0) != cfg_.feature_channels)
      throw ShapeError("head: expected " + std::to_string(cfg_.feature_channels) + " x H x W features, got " + shape_str(f.shape()));
    const int h = f.dim(1), w = f.dim(2), t = cfg_.samples;
    HeadOutputs out;
    out.reduced = reduced;

    Var latent_maps;
    if (target_centers_.populated_count() > 0) {
      Var centers_map = aggregate(tape, cfg_.aggregator, reduced, target_centers_.matrix());
      out.target_latent = infer_latent(tape, centers_map);
      Var z = reparameterize(tape, out.target_latent->mu, out.target_latent->var,
                             draw_standard_normal<T>(t, cfg_.latent_dim, rng));
      latent_maps = tile_spatial(tape, z, h, w);
    } else {
      latent_maps = tape.constant(BasicTensor<T>({t, cfg_.latent_dim, h, w}));
    }

    Var context_maps;
    if (context_centers_.populated_count() > 0) {
      Var centers_map = aggregate(tape, cfg_.aggregator, reduced, context_centers_.matrix());
      Var pooled = global_avg_pool(tape, centers_map);
      out.context_latent = latent_(tape, pooled);
      out.context_rep =
          reshape(tape, proj_(tape, reshape(tape, pooled, {1, cfg_.reduced_channels})), {cfg_.context_dim});
      context_maps = tile_spatial(tape, reshape(tape, repeat(tape, out.context_rep, t), {t, cfg_.context_dim}), h, w);
    } else {
      out.context_rep = tape.constant(BasicTensor<T>({cfg_.context_dim}));
      context_maps = tape.constant(BasicTensor<T>({t, cfg_.context_dim, h, w}));
    }

    out.assembled = concat_channels(tape, {repeat(tape, featmap, t), latent_maps, context_maps});
    out.logits = decoder_(tape, out.assembled);
    if (counter) ++counter->decoder_passes;
    out.probs = softmax(tape, out.logits, 1);
    out.avg_probs = mean_leading(tape, out.probs);
    return out;
  }

  void collect(ParamList<T>& out) {
    reduce_.collect(out);
    latent_.collect(out);
    proj_.collect(out);
    decoder_.collect(out);
  }

 private:
  NpHeadConfig cfg_;
  SmallConvNet<T> reduce_;
  LatentHead<T> latent_;
  LinearLayer<T> proj_;
  Decoder<T> decoder_;
  BankSet<T> context_banks_;
  BankSet<T> target_banks_;
  CenterSet<T> context_centers_;
  CenterSet<T> target_centers_;
};

}  // namespace npss
