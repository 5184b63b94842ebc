#pragma once

#include <string>
#include <vector>

#include "npss/autodiff.hpp"
#include "npss/errors.hpp"
#include "npss/np_head.hpp"
#include "npss/ops.hpp"
#include "npss/rng.hpp"
#include "npss/segmodel.hpp"

namespace npss {

struct ModelConfig {
  EncoderConfig encoder;
  NpHeadConfig head;
  std::uint64_t init_seed = 0;

  void validate() const {
    encoder.validate();
    if (head.feature_channels != encoder.feature_channels)
      throw ConfigError("head feature_channels must equal encoder feature_channels");
    if (head.reduced_channels < 1 || head.latent_dim < 1 || head.context_dim < 1 || head.latent_hidden < 1 ||
        head.decoder_hidden < 1 || head.bank_capacity < 1)
      throw ConfigError("head extents must be positive");
  }
};

/// Persisted per-class context and target centers.
template <class T>
struct CenterSnapshot {
  CenterSet<T> context;
  CenterSet<T> target;
  int reduced_channels = 0;
  int n_class = 0;
  int context_dim = 0;
  bool operator==(const CenterSnapshot&) const = default;
};

/// Encoder plus NP head.
template <class T>
class NpSegModel {
 public:
  NpSegModel() = default;
  explicit NpSegModel(const ModelConfig& cfg) : cfg_(cfg) {
    cfg.validate();
    Rng root(cfg.init_seed, "init");
    Rng enc_rng = root.split("encoder");
    Rng head_rng = root.split("head");
    encoder_ = Encoder<T>(cfg.encoder, enc_rng);
    head_ = NpHead<T>(cfg.head, head_rng);
  }

  const ModelConfig& config() const { return cfg_; }
  Encoder<T>& encoder() { return encoder_; }
  NpHead<T>& head() { return head_; }
  const NpHead<T>& head() const { return head_; }

  void set_pass_counter(PassCounter* counter) { counter_ = counter; }
  PassCounter* pass_counter() const { return counter_; }

  Var encode(Tape<T>& tape, Var image) {
    if (counter_) ++counter_->encoder_passes;
    return encoder_(tape, image);
  }

  /// Full training-mode graph for one image whose centers are already current.
  HeadOutputs forward(Tape<T>& tape, Var image, Rng& rng) {
    Var feat = encode(tape, image);
    return head_.forward(tape, feat, head_.reduce(tape, feat), rng, counter_);
  }

  /// Inference mode: one encoder pass and one decoder-stack pass over T slices.
  PredictionBundle<T> predict(const BasicTensor<T>& image, Rng& rng) {
    Tape<T> tape(false);
    auto out = forward(tape, tape.constant(image), rng);
    return make_bundle(tape.value(out.probs));
  }

  /// Head only, on a precomputed D x H x W feature map.
  PredictionBundle<T> predict_features(const BasicTensor<T>& featmap, Rng& rng) {
    Tape<T> tape(false);
    Var feat = tape.constant(featmap);
    auto out = head_.forward(tape, feat, head_.reduce(tape, feat), rng, counter_);
    return make_bundle(tape.value(out.probs));
  }

  /// Parameters in declaration order: encoder, small ConvNet, latent MLP, projection, decoder.
  ParamList<T> parameters() {
    ParamList<T> out;
    encoder_.collect(out);
    head_.collect(out);
    return out;
  }

  void zero_grad() {
    for (auto* p : parameters()) p->zero_grad();
  }

  CenterSnapshot<T> export_centers() const {
    return {head_.context_centers(), head_.target_centers(), cfg_.head.reduced_channels, cfg_.head.n_class,
            cfg_.head.context_dim};
  }

  void import_centers(const CenterSnapshot<T>& snap) {
    if (snap.reduced_channels != cfg_.head.reduced_channels || snap.n_class != cfg_.head.n_class ||
        snap.context_dim != cfg_.head.context_dim)
      throw FormatError("center snapshot (R=" + std::to_string(snap.reduced_channels) + ", classes=" +
                        std::to_string(snap.n_class) + ", D_c=" + std::to_string(snap.context_dim) +
                        ") does not match the model configuration");
    head_.set_centers(snap.context, snap.target);
  }

 private:
  ModelConfig cfg_;
  Encoder<T> encoder_;
  NpHead<T> head_;
  PassCounter* counter_ = nullptr;
};

/// MC-dropout baseline: the same encoder and decoder widths, with dropout after every
/// decoder activation and no NP paths.
template <class T>
class DropoutSegModel {
 public:
  DropoutSegModel() = default;
  DropoutSegModel(const EncoderConfig& enc, int decoder_hidden, int n_class, double rate, std::uint64_t seed)
      : rate_(rate) {
    if (rate < 0.0 || rate >= 1.0) throw ConfigError("dropout rate must be in [0, 1)");
    Rng root(seed, "init-dropout");
    Rng enc_rng = root.split("encoder");
    Rng dec_rng = root.split("decoder");
    encoder_ = Encoder<T>(enc, enc_rng);
    decoder_ = Decoder<T>(DecoderConfig{enc.feature_channels, decoder_hidden, n_class}, dec_rng, "mc_decoder");
  }

  double rate() const { return rate_; }
  void set_rate(double r) { rate_ = r; }
  Encoder<T>& encoder() { return encoder_; }
  Decoder<T>& decoder() { return decoder_; }
  void set_pass_counter(PassCounter* counter) { counter_ = counter; }

  /// One stochastic feedforward pass: logits 1 x n_class x H x W.
  Var forward(Tape<T>& tape, Var image, Rng& rng) {
    if (counter_) ++counter_->encoder_passes;
    Var feat = encoder_(tape, image);
    const auto& f = tape.value(feat);
    Var batched = reshape(tape, feat, {1, f.dim(0), f.dim(1), f.dim(2)});
    if (counter_) ++counter_->decoder_passes;
    return decoder_(tape, batched, rate_, &rng);
  }

  ParamList<T> parameters() {
    ParamList<T> out;
    encoder_.collect(out);
    decoder_.collect(out);
    return out;
  }

 private:
  Encoder<T> encoder_;
  Decoder<T> decoder_;
  double rate_ = 0.5;
  PassCounter* counter_ = nullptr;
};

/// T full stochastic feedforward passes with dropout active, averaged.
template <class T>
PredictionBundle<T> mc_dropout_predict(DropoutSegModel<T>& model, const BasicTensor<T>& image, int t, Rng& rng) {
  if (t < 1) throw ConfigError("mc_dropout_predict: T must be >= 1");
  BasicTensor<T> stacked;
  for (int i = 0; i < t; ++i) {
    Tape<T> tape(false);
    Var probs = softmax(tape, model.forward(tape, tape.constant(image), rng), 1);
    const auto& p = tape.value(probs);
    if (i == 0) stacked = BasicTensor<T>({t, p.dim(1), p.dim(2), p.dim(3)});
    std::copy(p.raw(), p.raw() + p.size(), stacked.raw() + static_cast<std::size_t>(i) * p.size());
  }
  return make_bundle(std::move(stacked));
}

}  // namespace npss
