#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "npss/errors.hpp"
#include "npss/losses.hpp"
#include "npss/model.hpp"
#include "npss/np_head.hpp"
#include "npss/synthdata.hpp"

namespace npss {

struct TrainConfig {
  std::uint64_t seed = 0;
  int epochs = 100;
  int batch_labeled = 4;
  int batch_unlabeled = 4;
  int steps_per_epoch = 0;  // 0: one pass over the labeled split
  double learning_rate = 0.01;
  int lr_decay_epochs = 100;  // poly decay to zero over this many epochs; 0: constant
  double momentum = 0.9;
  double lambda_kl = kDefaultLambdaKl;
  int samples = 5;          // T
  int bank_capacity = 2560; // Q
  int latent_dim = 8;       // D_t
  int context_dim = 8;      // D_c
  int reduced_channels = 8; // R
  int latent_hidden = 32;
  int decoder_hidden = 64;
  int feature_channels = 32;
  int encoder_depth = 3;
  std::optional<double> pseudo_label_threshold;
  double unlabeled_weight = 1.0;
  double teacher_ema = 0.0;  // > 0: pseudo-labels come from an EMA copy of the model
  Aggregator aggregator = Aggregator::kAttention;
  bool use_unlabeled = true;  // false: labeled-only supervised baseline
  int warmup_epochs = 40;     // leading epochs without unlabeled images
  bool augment = true;
  bool strong_unlabeled = true;  // train on a jittered copy of the pseudo-labeled view
  bool cutmix = true;            // paste a half-area box from the next unlabeled view
  bool log_val_miou = true;

  void validate() const {
    if (epochs < 0) throw ConfigError("epochs must be >= 0");
    if (batch_labeled < 1 || batch_unlabeled < 0 || steps_per_epoch < 0 || warmup_epochs < 0 || lr_decay_epochs < 0)
      throw ConfigError("batch sizes must be positive");
    if (!(learning_rate >= 0) || !(momentum >= 0 && momentum < 1)) throw ConfigError("learning_rate >= 0 and momentum in [0, 1) required");
    if (!(lambda_kl >= 0)) throw ConfigError("lambda_kl must be >= 0");
    if (samples < 1 || bank_capacity < 1 || latent_dim < 1 || context_dim < 1 || reduced_channels < 1 ||
        latent_hidden < 1 || decoder_hidden < 1 || encoder_depth < 1)
      throw ConfigError("model extents must be positive");
    if (feature_channels < 8) throw ConfigError("feature_channels must be >= 8");
    if (pseudo_label_threshold && !(*pseudo_label_threshold >= 0 && *pseudo_label_threshold <= 1))
      throw ConfigError("pseudo_label_threshold must be in [0, 1]");
    if (!(unlabeled_weight >= 0)) throw ConfigError("unlabeled_weight must be >= 0");
    if (!(teacher_ema >= 0 && teacher_ema < 1)) throw ConfigError("teacher_ema must be in [0, 1)");
  }

  ModelConfig model_config(int n_class) const {
    ModelConfig m;
    m.encoder = EncoderConfig{3, feature_channels, encoder_depth, 1};
    m.head = NpHeadConfig{feature_channels, reduced_channels, latent_dim, context_dim, samples, bank_capacity,
                          latent_hidden, decoder_hidden, n_class, aggregator};
    m.init_seed = seed;
    return m;
  }
};

/// SGD with classical momentum: v = m v + g; p -= lr v.
template <class T>
struct SgdMomentum {
  std::vector<BasicTensor<T>> buffers;
  std::int64_t step_count = 0;

  void step(const ParamList<T>& params, double lr, double momentum) {
    if (buffers.empty())
      for (auto* p : params) buffers.emplace_back(p->value.shape());
    if (buffers.size() != params.size()) throw ShapeError("optimizer state does not match parameter list");
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& p = *params[i];
      auto& v = buffers[i];
      if (v.shape() != p.value.shape()) throw ShapeError("momentum buffer shape mismatch for " + p.name);
      for (std::size_t j = 0; j < v.size(); ++j) {
        v[j] = static_cast<T>(momentum * v[j] + p.grad[j]);
        p.value[j] -= static_cast<T>(lr * v[j]);
      }
    }
    ++step_count;
  }
};

template <class T>
struct PseudoLabels {
  LabelMap labels;
  BasicTensor<T> uncertainty;
};

/// Per pixel argmax of averaged probabilities, lowest index on ties; pixels whose maximum
/// falls below the threshold become kIgnoreLabel.
template <class T>
LabelMap argmax_labels(const BasicTensor<T>& avg_probs, std::optional<double> threshold = std::nullopt) {
  const int n = avg_probs.dim(0), h = avg_probs.dim(1), w = avg_probs.dim(2), hw = h * w;
  LabelMap out({h, w});
  for (int p = 0; p < hw; ++p) {
    int best = 0;
    T best_v = avg_probs[static_cast<std::size_t>(p)];
    for (int c = 1; c < n; ++c) {
      const T v = avg_probs[static_cast<std::size_t>(c) * hw + p];
      if (v > best_v) best = c, best_v = v;
    }
    out[static_cast<std::size_t>(p)] = threshold && best_v < *threshold ? kIgnoreLabel : best;
  }
  return out;
}

template <class T>
PseudoLabels<T> pseudo_label(NpSegModel<T>& model, const BasicTensor<T>& image, Rng& rng,
                             std::optional<double> threshold = std::nullopt) {
  auto bundle = model.predict(image, rng);
  return {argmax_labels(bundle.avg_probs, threshold), std::move(bundle.uncertainty)};
}

struct TrainBatch {
  std::vector<const Tensor*> labeled_images;
  std::vector<const LabelMap*> labeled_masks;
  std::vector<const Tensor*> unlabeled_images;
  /// Optional per-unlabeled-image input for the training forward; pseudo-labels always come
  /// from `unlabeled_images`. Geometry must match.
  std::vector<const Tensor*> unlabeled_student_images;
  /// Optional per-unlabeled-image CutMix box; pseudo-labels are mixed the same way as the
  /// student images, which the caller has already mixed.
  std::vector<MixBox> unlabeled_mix;
};

struct StepOptions {
  double learning_rate = 0.01;
  double momentum = 0.9;
  double lambda_kl = kDefaultLambdaKl;
  std::optional<double> pseudo_label_threshold;
  double unlabeled_weight = 1.0;
};

/// teacher = a * teacher + (1 - a) * student over all parameters.
template <class T>
void ema_update(NpSegModel<T>& teacher, NpSegModel<T>& student, double a) {
  const auto tp = teacher.parameters(), sp = student.parameters();
  if (tp.size() != sp.size()) throw ShapeError("ema_update: parameter lists differ");
  for (std::size_t i = 0; i < tp.size(); ++i) {
    auto& t = tp[i]->value;
    const auto& v = sp[i]->value;
    if (t.shape() != v.shape()) throw ShapeError("ema_update: shape mismatch for " + tp[i]->name);
    for (std::size_t j = 0; j < t.size(); ++j) t[j] = static_cast<T>(a * t[j] + (1.0 - a) * v[j]);
  }
}

/// One self-training iteration: pseudo-label the unlabeled images in inference mode, fill
/// the context banks from labeled pixels and the target banks from labeled + pseudo-labeled
/// pixels, run the head on every target, then take one SGD step on
/// CE_labeled / labeled pixels + w * CE_unlabeled / unlabeled pixels + lambda * mean KL(target || context).
/// With a `teacher`, pseudo-labels come from it, using the student's current centers.
template <class T>
LossBreakdown train_step(NpSegModel<T>& model, const TrainBatch& batch, SgdMomentum<T>& opt, const StepOptions& opts,
                         Rng& rng, NpSegModel<T>* teacher = nullptr) {
  if (batch.labeled_images.empty() || batch.labeled_images.size() != batch.labeled_masks.size())
    throw DataError("train_step: labeled batch must be non-empty with one mask per image");
  auto& head = model.head();

  std::vector<LabelMap> pseudo;
  Rng pl_rng = rng.split("pseudo");
  if (teacher && !batch.unlabeled_images.empty()) teacher->import_centers(model.export_centers());
  NpSegModel<T>& labeler = teacher ? *teacher : model;
  for (const auto* img : batch.unlabeled_images)
    pseudo.push_back(pseudo_label(labeler, img->template cast<T>(), pl_rng, opts.pseudo_label_threshold).labels);
  if (!batch.unlabeled_mix.empty()) {
    if (batch.unlabeled_mix.size() != pseudo.size()) throw DataError("train_step: one mix box per unlabeled image required");
    const auto unmixed = pseudo;
    for (std::size_t i = 0; i < pseudo.size(); ++i) {
      const auto& b = batch.unlabeled_mix[i];
      if (b.source < 0 || static_cast<std::size_t>(b.source) >= pseudo.size()) throw DataError("train_step: mix source out of range");
      paste_box(pseudo[i], unmixed[static_cast<std::size_t>(b.source)], b);
    }
  }

  Tape<T> tape(true);
  struct Target {
    Var feat, reduced;
    const LabelMap* labels;
  };
  std::vector<Target> targets;
  auto add_target = [&](const Tensor& img, const LabelMap& labels) {
    Var feat = model.encode(tape, tape.constant(img.template cast<T>()));
    targets.push_back({feat, head.reduce(tape, feat), &labels});
  };
  for (std::size_t i = 0; i < batch.labeled_images.size(); ++i) add_target(*batch.labeled_images[i], *batch.labeled_masks[i]);
  const bool student = !batch.unlabeled_student_images.empty();
  if (student && batch.unlabeled_student_images.size() != batch.unlabeled_images.size())
    throw DataError("train_step: one student view per unlabeled image required");
  for (std::size_t i = 0; i < batch.unlabeled_images.size(); ++i)
    add_target(student ? *batch.unlabeled_student_images[i] : *batch.unlabeled_images[i], pseudo[i]);

  const std::size_t n_labeled = batch.labeled_images.size();
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const auto& red = tape.value(targets[i].reduced);
    if (i < n_labeled) head.context_banks().insert(red, *targets[i].labels);
    head.target_banks().insert(red, *targets[i].labels);
  }
  head.refresh_centers();

  Rng fwd_rng = rng.split("forward");
  std::array<std::vector<Var>, 2> ce_terms;  // labeled, unlabeled
  std::array<int, 2> pixels{0, 0};
  std::vector<Var> kl_terms;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const auto& tg = targets[i];
    auto out = head.forward(tape, tg.feat, tg.reduced, fwd_rng, model.pass_counter());
    auto ce = cross_entropy_sum(tape, out.avg_probs, *tg.labels);
    const std::size_t src = i < n_labeled ? 0 : 1;
    if (ce.count > 0) ce_terms[src].push_back(ce.sum), pixels[src] += ce.count;
    if (out.target_latent && out.context_latent) kl_terms.push_back(kl_gaussian(tape, *out.target_latent, *out.context_latent));
  }
  if (pixels[0] + pixels[1] == 0) throw NumericError("train_step: no valid pixels in batch");

  std::vector<Var> terms;
  std::vector<T> weights;
  const std::array<double, 2> scale{pixels[0] ? 1.0 / pixels[0] : 0.0, pixels[1] ? opts.unlabeled_weight / pixels[1] : 0.0};
  double l_c = 0;
  for (std::size_t src = 0; src < 2; ++src)
    for (Var v : ce_terms[src]) {
      terms.push_back(v), weights.push_back(static_cast<T>(scale[src]));
      l_c += scale[src] * tape.value(v)[0];
    }
  for (Var v : kl_terms) terms.push_back(v), weights.push_back(static_cast<T>(opts.lambda_kl / kl_terms.size()));
  Var loss = weighted_sum(tape, terms, weights);
  std::vector<double> kls;
  for (Var v : kl_terms) kls.push_back(tape.value(v)[0]);
  auto breakdown = total_loss(l_c, kls, opts.lambda_kl, pixels[0] + pixels[1]);
  if (!std::isfinite(breakdown.total))
    throw NumericError("train_step: non-finite loss (l_c=" + std::to_string(l_c) + ", l_kl=" + std::to_string(breakdown.l_kl) + ")");

  auto params = model.parameters();
  tape.backward(loss);
  for (auto* p : params)
    if (!p->grad.all_finite()) throw NumericError("train_step: non-finite gradient in " + p->name);
  opt.step(params, opts.learning_rate, opts.momentum);
  model.zero_grad();
  return breakdown;
}

/// Supervised step for the dropout baseline (dropout active, plain pixel cross entropy).
template <class T>
double train_dropout_step(DropoutSegModel<T>& model, const TrainBatch& batch, SgdMomentum<T>& opt, double lr,
                          double momentum, Rng& rng) {
  if (batch.labeled_images.empty()) throw DataError("train_dropout_step: empty batch");
  Tape<T> tape(true);
  std::vector<Var> terms;
  int pixels = 0;
  for (std::size_t i = 0; i < batch.labeled_images.size(); ++i) {
    Var logits = model.forward(tape, tape.constant(batch.labeled_images[i]->template cast<T>()), rng);
    const auto& lv = tape.value(logits);
    Var probs = reshape(tape, softmax(tape, logits, 1), {lv.dim(1), lv.dim(2), lv.dim(3)});
    auto ce = cross_entropy_sum(tape, probs, *batch.labeled_masks[i]);
    terms.push_back(ce.sum);
    pixels += ce.count;
  }
  if (pixels == 0) throw NumericError("train_dropout_step: no valid pixels in batch");
  Var loss = weighted_sum(tape, terms, std::vector<T>(terms.size(), static_cast<T>(1.0 / pixels)));
  const double value = tape.value(loss)[0];
  if (!std::isfinite(value)) throw NumericError("train_dropout_step: non-finite loss");
  auto params = model.parameters();
  tape.backward(loss);
  opt.step(params, lr, momentum);
  for (auto* p : params) p->zero_grad();
  return value;
}

// ---------------------------------------------------------------------------
// Epoch loop
// ---------------------------------------------------------------------------

struct EpochLog {
  int epoch = 0;
  std::int64_t step = 0;
  double l_c = 0.0;
  double l_kl = 0.0;
  std::optional<double> val_miou;
};

template <class T>
struct FitResult {
  NpSegModel<T> model;
  SgdMomentum<T> optimizer;
  std::vector<EpochLog> log;
  std::optional<NpSegModel<T>> teacher;  // set when cfg.teacher_ema > 0
};

template <class T>
using EpochCallback = std::function<void(const EpochLog&)>;

/// Optional hook evaluating validation mIoU after each epoch.
template <class T>
using ValidationFn = std::function<double(NpSegModel<T>&)>;

inline int steps_per_epoch(const TrainConfig& cfg, int n_labeled) {
  return cfg.steps_per_epoch > 0 ? cfg.steps_per_epoch : std::max(1, (n_labeled + cfg.batch_labeled - 1) / cfg.batch_labeled);
}

/// lr * (1 - step / horizon)^0.9, clamped at zero past the horizon.
inline double scheduled_learning_rate(const TrainConfig& cfg, std::int64_t step, int per_epoch) {
  if (cfg.lr_decay_epochs == 0) return cfg.learning_rate;
  const double horizon = static_cast<double>(cfg.lr_decay_epochs) * per_epoch;
  return cfg.learning_rate * std::pow(std::max(0.0, 1.0 - static_cast<double>(step) / horizon), 0.9);
}

namespace detail {

inline std::vector<int> shuffled(int n, Rng rng) {
  std::vector<int> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  for (int i = n - 1; i > 0; --i) std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(rng.uniform_int(0, i))]);
  return idx;
}

}  // namespace detail

/// Runs `cfg.epochs` epochs. Every random draw derives from cfg.seed and the global step,
/// so a run resumed from `start` (model + optimizer state) follows the same schedule.
template <class T>
FitResult<T> fit(const TrainConfig& cfg, const Dataset& data, std::optional<FitResult<T>> start = std::nullopt,
                 const ValidationFn<T>& validate = {}, const EpochCallback<T>& on_epoch = {}) {
  cfg.validate();
  const auto labeled = data.split(Split::kLabeled);
  const auto unlabeled = cfg.use_unlabeled ? data.split(Split::kUnlabeled) : std::vector<const Sample*>{};
  if (labeled.empty()) throw DataError("fit: dataset has no labeled images");

  FitResult<T> res = start ? std::move(*start) : FitResult<T>{NpSegModel<T>(cfg.model_config(data.n_class())), {}, {}, std::nullopt};
  if (cfg.teacher_ema > 0 && !res.teacher) res.teacher = res.model;
  const Rng root(cfg.seed, "fit");
  const int per_epoch = steps_per_epoch(cfg, static_cast<int>(labeled.size()));
  const int first_epoch = static_cast<int>(res.optimizer.step_count / per_epoch);
  StepOptions opts{cfg.learning_rate, cfg.momentum, cfg.lambda_kl, cfg.pseudo_label_threshold, cfg.unlabeled_weight};

  for (int epoch = first_epoch; epoch < first_epoch + cfg.epochs; ++epoch) {
    const auto lab_order = detail::shuffled(static_cast<int>(labeled.size()), root.split("shuffle-labeled", epoch));
    const auto unl_order = detail::shuffled(static_cast<int>(unlabeled.size()), root.split("shuffle-unlabeled", epoch));
    double sum_c = 0, sum_kl = 0;
    for (int s = 0; s < per_epoch; ++s) {
      Rng step_rng = root.split("step", static_cast<std::uint64_t>(res.optimizer.step_count));
      Rng aug_rng = step_rng.split("augment");
      std::vector<Sample> lab_views, unl_views;
      std::vector<Tensor> unl_student;
      const bool use_unl = !unlabeled.empty() && epoch >= cfg.warmup_epochs;
      for (int b = 0; b < cfg.batch_labeled; ++b) {
        const auto& src = *labeled[static_cast<std::size_t>(lab_order[static_cast<std::size_t>((s * cfg.batch_labeled + b) % labeled.size())])];
        lab_views.push_back(cfg.augment ? augment(src, AugmentStrength::kWeak, aug_rng) : src);
      }
      if (use_unl)
        for (int b = 0; b < cfg.batch_unlabeled; ++b) {
          const auto& src = *unlabeled[static_cast<std::size_t>(unl_order[static_cast<std::size_t>((s * cfg.batch_unlabeled + b) % unlabeled.size())])];
          unl_views.push_back(cfg.augment ? augment(src, AugmentStrength::kWeak, aug_rng) : src);
          if (cfg.strong_unlabeled) unl_student.push_back(photometric_jitter(unl_views.back().image, aug_rng));
        }
      std::vector<MixBox> boxes;
      if (cfg.cutmix && unl_views.size() >= 2) {
        if (unl_student.empty())
          for (const auto& v : unl_views) unl_student.push_back(v.image);
        const auto plain = unl_student;
        for (std::size_t i = 0; i < plain.size(); ++i) {
          const int src = static_cast<int>((i + 1) % plain.size());
          boxes.push_back(random_mix_box(src, plain[i].dim(1), plain[i].dim(2), aug_rng));
          paste_box(unl_student[i], plain[static_cast<std::size_t>(src)], boxes.back());
        }
      }
      TrainBatch batch;
      batch.unlabeled_mix = boxes;
      for (const auto& v : lab_views) batch.labeled_images.push_back(&v.image), batch.labeled_masks.push_back(&v.mask);
      for (const auto& v : unl_views) batch.unlabeled_images.push_back(&v.image);
      for (const auto& v : unl_student) batch.unlabeled_student_images.push_back(&v);
      Rng train_rng = step_rng.split("train");
      opts.learning_rate = scheduled_learning_rate(cfg, res.optimizer.step_count, per_epoch);
      const auto lb = train_step(res.model, batch, res.optimizer, opts, train_rng, cfg.teacher_ema > 0 ? &*res.teacher : nullptr);
      if (cfg.teacher_ema > 0)  // short-memory average over the first steps
        ema_update(*res.teacher, res.model, std::min(cfg.teacher_ema, 1.0 - 1.0 / static_cast<double>(res.optimizer.step_count + 1)));
      sum_c += lb.l_c;
      sum_kl += lb.l_kl;
    }
    EpochLog entry{epoch, res.optimizer.step_count, sum_c / per_epoch, sum_kl / per_epoch, std::nullopt};
    if (cfg.log_val_miou && validate) entry.val_miou = validate(res.model);
    res.log.push_back(entry);
    if (on_epoch) on_epoch(entry);
  }
  return res;
}

}  // namespace npss
