#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "npss/errors.hpp"
#include "npss/model.hpp"
#include "npss/np_head.hpp"
#include "npss/synthdata.hpp"
#include "npss/trainer.hpp"

namespace npss {

class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int n_class = 2) : n_(n_class), counts_(static_cast<std::size_t>(n_class) * n_class, 0) {
    if (n_class < 1) throw ConfigError("confusion matrix needs at least one class");
  }

  int n_class() const { return n_; }

  /// Rows are truth, columns prediction. Pixels whose truth is `ignore_label` are skipped.
  void add(const LabelMap& truth, const LabelMap& pred, int ignore_label = kIgnoreLabel) {
    if (truth.shape() != pred.shape()) throw ShapeError("confusion: truth " + shape_str(truth.shape()) + " vs pred " + shape_str(pred.shape()));
    for (std::size_t i = 0; i < truth.size(); ++i) {
      const int t = truth[i], p = pred[i];
      if (t == ignore_label) continue;
      if (t < 0 || t >= n_ || p < 0 || p >= n_) throw DataError("confusion: label out of range");
      ++counts_[static_cast<std::size_t>(t) * n_ + p];
    }
  }

  std::int64_t at(int truth, int pred) const { return counts_[static_cast<std::size_t>(truth) * n_ + pred]; }
  std::int64_t total() const {
    std::int64_t s = 0;
    for (auto c : counts_) s += c;
    return s;
  }

  void merge(const ConfusionMatrix& other) {
    if (other.n_ != n_) throw ShapeError("confusion: class count mismatch");
    for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
  }

 private:
  int n_;
  std::vector<std::int64_t> counts_;
};

/// Mean IoU over classes whose union is non-empty.
inline double miou(const ConfusionMatrix& cm) {
  double s = 0;
  int used = 0;
  for (int c = 0; c < cm.n_class(); ++c) {
    std::int64_t tp = cm.at(c, c), fp = 0, fn = 0;
    for (int o = 0; o < cm.n_class(); ++o) {
      if (o == c) continue;
      fp += cm.at(o, c);
      fn += cm.at(c, o);
    }
    const std::int64_t uni = tp + fp + fn;
    if (uni == 0) continue;
    s += static_cast<double>(tp) / static_cast<double>(uni);
    ++used;
  }
  if (used == 0) throw NumericError("miou: every class is empty, metric undefined");
  return s / used;
}

struct PavpuConfig {
  int window = 4;
  double uncertainty_threshold = 0.4;
  double accuracy_fraction = 0.5;

  void validate() const {
    if (window < 1) throw ConfigError("pavpu window must be >= 1");
    if (!(uncertainty_threshold >= 0)) throw ConfigError("pavpu uncertainty threshold must be >= 0");
    if (!(accuracy_fraction > 0 && accuracy_fraction <= 1)) throw ConfigError("pavpu accuracy fraction must be in (0, 1]");
  }
};

struct PavpuCounts {
  std::int64_t accurate_certain = 0;
  std::int64_t inaccurate_uncertain = 0;
  std::int64_t patches = 0;

  double value() const { return patches == 0 ? 0.0 : static_cast<double>(accurate_certain + inaccurate_uncertain) / patches; }
  PavpuCounts& operator+=(const PavpuCounts& o) {
    accurate_certain += o.accurate_certain;
    inaccurate_uncertain += o.inaccurate_uncertain;
    patches += o.patches;
    return *this;
  }
};

/// Entropy scaled into [0, 1] by ln n_class.
template <class T>
BasicTensor<T> normalize_uncertainty(const BasicTensor<T>& entropy, int n_class) {
  BasicTensor<T> out = entropy;
  const double s = std::log(static_cast<double>(n_class));
  for (auto& v : out.data()) v = static_cast<T>(v / s);
  return out;
}

/// Patch tally on a grid of w x w tiles. Edge tiles are cut short, which is the same as
/// padding with ignore-labeled pixels for the accuracy test; their mean uncertainty is over
/// in-image pixels. Tiles without a single valid pixel are not counted.
template <class T>
PavpuCounts pavpu_counts(const LabelMap& pred, const LabelMap& truth, const BasicTensor<T>& uncertainty,
                         const PavpuConfig& cfg, int ignore_label = kIgnoreLabel) {
  cfg.validate();
  if (pred.shape() != truth.shape() || uncertainty.shape() != truth.shape() || truth.rank() != 2)
    throw ShapeError("pavpu: pred, truth and uncertainty must share an H x W shape");
  const int h = truth.dim(0), w = truth.dim(1), win = cfg.window;
  const int ty = (h + win - 1) / win, tx = (w + win - 1) / win;
  const std::size_t n_tiles = static_cast<std::size_t>(ty) * tx;
  std::vector<int> valid(n_tiles, 0), correct(n_tiles, 0), inside(n_tiles, 0);
  std::vector<double> usum(n_tiles, 0.0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const std::size_t tile = static_cast<std::size_t>(y / win) * tx + x / win;
      const std::size_t i = static_cast<std::size_t>(y) * w + x;
      ++inside[tile];
      usum[tile] += static_cast<double>(uncertainty[i]);
      if (truth[i] == ignore_label) continue;
      ++valid[tile];
      correct[tile] += pred[i] == truth[i];
    }
  PavpuCounts out;
  for (std::size_t t = 0; t < n_tiles; ++t) {
    if (valid[t] == 0) continue;
    ++out.patches;
    const bool accurate = correct[t] >= cfg.accuracy_fraction * valid[t];
    const bool certain = usum[t] / inside[t] < cfg.uncertainty_threshold;
    out.accurate_certain += accurate && certain;
    out.inaccurate_uncertain += !accurate && !certain;
  }
  return out;
}

/// (n_ac + n_iu) / n_patches with uncertainty already on the [0, 1] scale.
template <class T>
double pavpu(const LabelMap& pred, const LabelMap& truth, const BasicTensor<T>& uncertainty, const PavpuConfig& cfg,
             int ignore_label = kIgnoreLabel) {
  return pavpu_counts(pred, truth, uncertainty, cfg, ignore_label).value();
}

// ---------------------------------------------------------------------------
// Evaluation strategies
// ---------------------------------------------------------------------------

template <class T>
using Predictor = std::function<PredictionBundle<T>(const BasicTensor<T>&)>;

/// Window origins along one axis: r = ceil((size - crop) / stride) + 1, the last flush with the edge.
inline std::vector<int> window_origins(int size, int crop, int stride) {
  if (crop < 1 || crop > size) throw ConfigError("crop " + std::to_string(crop) + " must be in [1, " + std::to_string(size) + "]");
  if (stride < 1) throw ConfigError("stride must be >= 1");
  if (stride > crop) throw ConfigError("stride " + std::to_string(stride) + " > crop " + std::to_string(crop) + " leaves pixels uncovered");
  const int r = (size - crop + stride - 1) / stride + 1;
  std::vector<int> out;
  for (int i = 0; i < r; ++i) out.push_back(std::min(i * stride, size - crop));
  return out;
}

template <class T>
BasicTensor<T> crop_chw(const BasicTensor<T>& x, int y0, int x0, int h, int w) {
  const int c = x.dim(0);
  BasicTensor<T> out({c, h, w});
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < h; ++y)
      for (int xx = 0; xx < w; ++xx) out.at(ch, y, xx) = x.at(ch, y0 + y, x0 + xx);
  return out;
}

inline LabelMap crop_hw(const LabelMap& x, int y0, int x0, int h, int w) {
  LabelMap out({h, w});
  for (int y = 0; y < h; ++y)
    for (int xx = 0; xx < w; ++xx) out.at(y, xx) = x.at(y0 + y, x0 + xx);
  return out;
}

/// Overlapping crop x crop windows; probabilities are averaged over covering windows and
/// renormalized where more than one window overlaps, then entropy is recomputed.
template <class T>
PredictionBundle<T> sliding_eval(const Predictor<T>& predict, const BasicTensor<T>& image, int crop, int stride) {
  const int h = image.dim(1), w = image.dim(2);
  const auto ys = window_origins(h, crop, stride);
  const auto xs = window_origins(w, crop, stride);
  BasicTensor<T> per_sample, avg;
  std::vector<int> cover(static_cast<std::size_t>(h) * w, 0);
  int t = 0, n = 0;
  for (int y0 : ys)
    for (int x0 : xs) {
      auto b = predict(crop_chw(image, y0, x0, crop, crop));
      if (per_sample.size() == 0) {
        t = b.per_sample_probs.dim(0), n = b.per_sample_probs.dim(1);
        per_sample = BasicTensor<T>({t, n, h, w});
        avg = BasicTensor<T>({n, h, w});
      }
      for (int y = 0; y < crop; ++y)
        for (int x = 0; x < crop; ++x) {
          ++cover[static_cast<std::size_t>(y0 + y) * w + x0 + x];
          for (int c = 0; c < n; ++c) {
            avg.at(c, y0 + y, x0 + x) += b.avg_probs.at(c, y, x);
            for (int k = 0; k < t; ++k) per_sample.at(k, c, y0 + y, x0 + x) += b.per_sample_probs.at(k, c, y, x);
          }
        }
    }
  const int hw = h * w;
  for (int p = 0; p < hw; ++p) {
    const int cnt = cover[static_cast<std::size_t>(p)];
    if (cnt == 0) throw NumericError("sliding_eval: uncovered pixel");
    if (cnt == 1) continue;
    auto renorm = [&](T* base, std::size_t stride_c) {
      double s = 0;
      for (int c = 0; c < n; ++c) s += base[c * stride_c];
      for (int c = 0; c < n; ++c) base[c * stride_c] = static_cast<T>(base[c * stride_c] / s);
    };
    renorm(avg.raw() + p, static_cast<std::size_t>(hw));
    for (int k = 0; k < t; ++k) renorm(per_sample.raw() + static_cast<std::size_t>(k) * n * hw + p, static_cast<std::size_t>(hw));
  }
  auto unc = entropy_map(avg);
  return {std::move(per_sample), std::move(avg), std::move(unc)};
}

enum class EvalMode { kCrop, kSlide };

inline std::string to_string(EvalMode m) { return m == EvalMode::kCrop ? "crop" : "slide"; }
inline EvalMode parse_eval_mode(const std::string& s) {
  if (s == "crop") return EvalMode::kCrop;
  if (s == "slide") return EvalMode::kSlide;
  throw ConfigError("unknown eval mode '" + s + "' (crop|slide)");
}

struct EvalOptions {
  EvalMode mode = EvalMode::kCrop;
  int crop = 32;
  int stride = 16;
  PavpuConfig pavpu;
};

struct EvalResult {
  double miou = 0.0;
  double pavpu = 0.0;
  int images = 0;
};

/// crop: the centered crop x crop region of every image; slide: the full image via sliding_eval.
template <class T>
EvalResult evaluate(const Predictor<T>& predict, const std::vector<const Sample*>& samples, int n_class,
                    const EvalOptions& opt) {
  if (samples.empty()) throw DataError("evaluate: no samples");
  ConfusionMatrix cm(n_class);
  PavpuCounts pc;
  for (const Sample* s : samples) {
    BasicTensor<T> img = s->image.template cast<T>();
    LabelMap truth = s->mask;
    PredictionBundle<T> bundle;
    if (opt.mode == EvalMode::kCrop) {
      const int h = img.dim(1), w = img.dim(2);
      const int ch = std::min(opt.crop, h), cw = std::min(opt.crop, w);
      const int y0 = (h - ch) / 2, x0 = (w - cw) / 2;
      if (ch != h || cw != w) {
        img = crop_chw(img, y0, x0, ch, cw);
        truth = crop_hw(truth, y0, x0, ch, cw);
      }
      bundle = predict(img);
    } else {
      bundle = sliding_eval(predict, img, opt.crop, opt.stride);
    }
    const LabelMap pred = argmax_labels(bundle.avg_probs);
    cm.add(truth, pred);
    pc += pavpu_counts(pred, truth, normalize_uncertainty(bundle.uncertainty, n_class), opt.pavpu);
  }
  return {miou(cm), pc.value(), static_cast<int>(samples.size())};
}

/// Inference with the model's current centers; the rng is re-seeded per call so repeated
/// evaluation of the same image is reproducible.
template <class T>
Predictor<T> np_predictor(NpSegModel<T>& model, std::uint64_t seed) {
  return [&model, seed](const BasicTensor<T>& img) {
    Rng rng(seed, "predict");
    return model.predict(img, rng);
  };
}

template <class T>
Predictor<T> mc_predictor(DropoutSegModel<T>& model, int t, std::uint64_t seed) {
  return [&model, t, seed](const BasicTensor<T>& img) {
    Rng rng(seed, "predict-mc");
    return mc_dropout_predict(model, img, t, rng);
  };
}

// ---------------------------------------------------------------------------
// Uncertainty timing
// ---------------------------------------------------------------------------

struct BenchmarkRow {
  int samples = 0;  // T
  double wall_ms_np = 0.0;
  double wall_ms_mc = 0.0;
  std::int64_t np_decoder_passes = 0;  // per image
  std::int64_t mc_decoder_passes = 0;
  std::int64_t np_encoder_passes = 0;
  std::int64_t mc_encoder_passes = 0;
  int windows = 0;  // r
  int repeats = 0;
  bool low_repeat_warning = false;
};

struct BenchmarkOptions {
  int crop = 32;
  int stride = 16;
  int repeats = 3;
};

namespace detail {

inline double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

}  // namespace detail

/// Sliding-window uncertainty estimation per image for both models; wall time is the
/// median over repeats of the mean per-image time. Pass counts come from the first image.
template <class T>
BenchmarkRow benchmark_uncertainty(NpSegModel<T>& np_model, DropoutSegModel<T>& mc_model,
                                   const std::vector<BasicTensor<T>>& images, int t, const BenchmarkOptions& opt) {
  if (images.empty()) throw DataError("benchmark: no images");
  if (t < 1) throw ConfigError("benchmark: T must be >= 1");
  if (opt.repeats < 1) throw ConfigError("benchmark: repeats must be >= 1");
  if (np_model.head().decoder().config().hidden != mc_model.decoder().config().hidden)
    throw ConfigError("benchmark: models must share decoder widths");

  BenchmarkRow row;
  row.samples = t;
  row.repeats = opt.repeats;
  row.low_repeat_warning = opt.repeats < 2;
  row.windows = static_cast<int>(window_origins(images[0].dim(1), opt.crop, opt.stride).size() *
                                 window_origins(images[0].dim(2), opt.crop, opt.stride).size());

  const int saved_t = np_model.head().config().samples;
  np_model.head().mutable_config().samples = t;
  PassCounter np_count, mc_count;
  auto np_pred = np_predictor(np_model, 0);
  auto mc_pred = mc_predictor(mc_model, t, 0);
  {
    np_model.set_pass_counter(&np_count);
    mc_model.set_pass_counter(&mc_count);
    sliding_eval(np_pred, images[0], opt.crop, opt.stride);
    sliding_eval(mc_pred, images[0], opt.crop, opt.stride);
    np_model.set_pass_counter(nullptr);
    mc_model.set_pass_counter(nullptr);
  }
  row.np_decoder_passes = np_count.decoder_passes;
  row.np_encoder_passes = np_count.encoder_passes;
  row.mc_decoder_passes = mc_count.decoder_passes;
  row.mc_encoder_passes = mc_count.encoder_passes;

  using Clock = std::chrono::steady_clock;
  auto time_per_image = [&](const Predictor<T>& pred) {
    const auto t0 = Clock::now();
    for (const auto& img : images) sliding_eval(pred, img, opt.crop, opt.stride);
    return std::chrono::duration<double, std::milli>(Clock::now() - t0).count() / static_cast<double>(images.size());
  };
  std::vector<double> np_ms, mc_ms;
  for (int r = 0; r < opt.repeats; ++r) {
    np_ms.push_back(time_per_image(np_pred));
    mc_ms.push_back(time_per_image(mc_pred));
  }
  np_model.head().mutable_config().samples = saved_t;
  row.wall_ms_np = detail::median(np_ms);
  row.wall_ms_mc = detail::median(mc_ms);
  return row;
}

}  // namespace npss
