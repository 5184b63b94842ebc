#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "npss/autodiff.hpp"
#include "npss/errors.hpp"
#include "npss/ops.hpp"
#include "npss/rng.hpp"

namespace npss {

template <class T>
using ParamList = std::vector<BasicParameter<T>*>;

/// Uniform in +-sqrt(1/fan_in).
template <class T>
BasicTensor<T> init_uniform(Shape shape, int fan_in, Rng& rng) {
  BasicTensor<T> t(std::move(shape));
  const double bound = std::sqrt(1.0 / fan_in);
  for (auto& v : t.data()) v = static_cast<T>(rng.uniform(-bound, bound));
  return t;
}

/// One row of a layer table: what a layer consumes and produces.
struct LayerSpec {
  std::string type;
  int in_channels = 0;
  int out_channels = 0;
  int kernel = 0;
  int stride = 0;
  int padding = 0;
  bool operator==(const LayerSpec&) const = default;
};

template <class T>
struct Conv2dLayer {
  BasicParameter<T> weight;
  BasicParameter<T> bias;
  int kernel = 1;

  Conv2dLayer() = default;
  Conv2dLayer(const std::string& name, int cin, int cout, int k, Rng& rng)
      : weight(name + ".weight", init_uniform<T>({cout, cin, k, k}, cin * k * k, rng)),
        bias(name + ".bias", init_uniform<T>({cout}, cin * k * k, rng)),
        kernel(k) {
    if (k != 1 && k != 3) throw ConfigError("conv kernel must be 1 or 3");
  }

  int in_channels() const { return weight.value.dim(1); }
  int out_channels() const { return weight.value.dim(0); }

  Var operator()(Tape<T>& tape, Var x) {
    return conv2d(tape, x, tape.parameter(weight), tape.parameter(bias), kernel == 3 ? 1 : 0);
  }

  LayerSpec spec() const { return {"Conv2d", in_channels(), out_channels(), kernel, 1, kernel == 3 ? 1 : 0}; }
  void collect(ParamList<T>& out) {
    out.push_back(&weight);
    out.push_back(&bias);
  }
};

template <class T>
struct InstanceNormLayer {
  BasicParameter<T> gamma;
  BasicParameter<T> beta;

  InstanceNormLayer() = default;
  InstanceNormLayer(const std::string& name, int channels)
      : gamma(name + ".gamma", BasicTensor<T>({channels}, T(1))), beta(name + ".beta", BasicTensor<T>({channels})) {}

  Var operator()(Tape<T>& tape, Var x) { return instance_norm(tape, x, tape.parameter(gamma), tape.parameter(beta)); }

  LayerSpec spec() const {
    const int c = gamma.value.dim(0);
    return {"InstanceNorm", c, c, 0, 0, 0};
  }
  void collect(ParamList<T>& out) {
    out.push_back(&gamma);
    out.push_back(&beta);
  }
};

template <class T>
struct LinearLayer {
  BasicParameter<T> weight;
  BasicParameter<T> bias;

  LinearLayer() = default;
  LinearLayer(const std::string& name, int din, int dout, Rng& rng)
      : weight(name + ".weight", init_uniform<T>({dout, din}, din, rng)),
        bias(name + ".bias", init_uniform<T>({dout}, din, rng)) {}

  Var operator()(Tape<T>& tape, Var x) { return linear(tape, x, tape.parameter(weight), tape.parameter(bias)); }

  void collect(ParamList<T>& out) {
    out.push_back(&weight);
    out.push_back(&bias);
  }
};

inline LayerSpec relu_spec(int c) { return {"ReLU", c, c, 0, 0, 0}; }

struct EncoderConfig {
  int in_channels = 3;
  int feature_channels = 32;
  int depth = 3;
  int downsample_factor = 1;

  void validate() const {
    if (feature_channels < 8) throw ConfigError("encoder feature_channels must be >= 8");
    if (in_channels < 1 || depth < 1 || downsample_factor < 1) throw ConfigError("encoder extents must be positive");
  }
};

/// Trainable stand-in backbone: `depth` blocks of conv3x3 / InstanceNorm / ReLU, then
/// optional average pooling by downsample_factor.
template <class T>
class Encoder {
 public:
  Encoder() = default;
  Encoder(const EncoderConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg.validate();
    int cin = cfg.in_channels;
    for (int i = 0; i < cfg.depth; ++i) {
      const std::string n = "encoder." + std::to_string(i);
      convs_.emplace_back(n + ".conv", cin, cfg.feature_channels, 3, rng);
      norms_.emplace_back(n + ".norm", cfg.feature_channels);
      cin = cfg.feature_channels;
    }
  }

  const EncoderConfig& config() const { return cfg_; }

  Var operator()(Tape<T>& tape, Var image) {
    const auto& x = tape.value(image);
    if (x.rank() != 3 || x.dim(0) != cfg_.in_channels)
      throw ShapeError("encode: expected " + std::to_string(cfg_.in_channels) + " x H x W image, got " + shape_str(x.shape()));
    if (x.dim(1) < 8 || x.dim(2) < 8) throw ShapeError("encode: image extents must be at least 8, got " + shape_str(x.shape()));
    Var h = image;
    for (std::size_t i = 0; i < convs_.size(); ++i) h = relu(tape, norms_[i](tape, convs_[i](tape, h)));
    return avg_pool2d(tape, h, cfg_.downsample_factor);
  }

  void collect(ParamList<T>& out) {
    for (std::size_t i = 0; i < convs_.size(); ++i) {
      convs_[i].collect(out);
      norms_[i].collect(out);
    }
  }

 private:
  EncoderConfig cfg_;
  std::vector<Conv2dLayer<T>> convs_;
  std::vector<InstanceNormLayer<T>> norms_;
};

struct SmallConvNetConfig {
  int in_channels = 32;
  int hidden = 8;
};

/// Dimensionality reduction: conv1x1 -> IN -> ReLU -> conv1x1 -> IN -> ReLU -> conv1x1.
template <class T>
class SmallConvNet {
 public:
  SmallConvNet() = default;
  SmallConvNet(const SmallConvNetConfig& cfg, Rng& rng)
      : cfg_(cfg),
        conv1_("reduce.conv1", cfg.in_channels, cfg.hidden, 1, rng),
        norm1_("reduce.norm1", cfg.hidden),
        conv2_("reduce.conv2", cfg.hidden, cfg.hidden, 1, rng),
        norm2_("reduce.norm2", cfg.hidden),
        conv3_("reduce.conv3", cfg.hidden, cfg.hidden, 1, rng) {}

  const SmallConvNetConfig& config() const { return cfg_; }

  Var operator()(Tape<T>& tape, Var featmap) {
    const auto& x = tape.value(featmap);
    if (x.rank() != 3 || x.dim(0) != cfg_.in_channels)
      throw ShapeError("reduce: expected " + std::to_string(cfg_.in_channels) + " x H x W, got " + shape_str(x.shape()));
    Var h = relu(tape, norm1_(tape, conv1_(tape, featmap)));
    h = relu(tape, norm2_(tape, conv2_(tape, h)));
    return conv3_(tape, h);
  }

  std::vector<LayerSpec> layers() const {
    const int r = cfg_.hidden;
    return {conv1_.spec(), norm1_.spec(), relu_spec(r), conv2_.spec(), norm2_.spec(), relu_spec(r), conv3_.spec()};
  }

  void collect(ParamList<T>& out) {
    conv1_.collect(out);
    norm1_.collect(out);
    conv2_.collect(out);
    norm2_.collect(out);
    conv3_.collect(out);
  }

 private:
  SmallConvNetConfig cfg_;
  Conv2dLayer<T> conv1_;
  InstanceNormLayer<T> norm1_;
  Conv2dLayer<T> conv2_;
  InstanceNormLayer<T> norm2_;
  Conv2dLayer<T> conv3_;
};

struct DecoderConfig {
  int in_channels = 48;
  int hidden = 64;
  int n_class = 4;
};

/// conv3x3 -> IN -> ReLU -> conv3x3 -> IN -> ReLU -> conv1x1 to class logits, applied to
/// every slice of an N x C x H x W batch with shared weights. With a positive dropout
/// rate, dropout follows each ReLU.
template <class T>
class Decoder {
 public:
  Decoder() = default;
  Decoder(const DecoderConfig& cfg, Rng& rng, const std::string& prefix = "decoder")
      : cfg_(cfg),
        conv1_(prefix + ".conv1", cfg.in_channels, cfg.hidden, 3, rng),
        norm1_(prefix + ".norm1", cfg.hidden),
        conv2_(prefix + ".conv2", cfg.hidden, cfg.hidden, 3, rng),
        norm2_(prefix + ".norm2", cfg.hidden),
        conv3_(prefix + ".conv3", cfg.hidden, cfg.n_class, 1, rng) {}

  const DecoderConfig& config() const { return cfg_; }

  Var operator()(Tape<T>& tape, Var assembled, double dropout_rate = 0.0, Rng* dropout_rng = nullptr) {
    const auto& x = tape.value(assembled);
    if (x.rank() != 4 || x.dim(1) != cfg_.in_channels)
      throw ShapeError("decode: expected N x " + std::to_string(cfg_.in_channels) + " x H x W, got " + shape_str(x.shape()));
    if (dropout_rate > 0.0 && dropout_rng == nullptr) throw ConfigError("decode: dropout requires an rng");
    Var h = relu(tape, norm1_(tape, conv1_(tape, assembled)));
    if (dropout_rate > 0.0) h = dropout(tape, h, dropout_rate, *dropout_rng);
    h = relu(tape, norm2_(tape, conv2_(tape, h)));
    if (dropout_rate > 0.0) h = dropout(tape, h, dropout_rate, *dropout_rng);
    return conv3_(tape, h);
  }

  std::vector<LayerSpec> layers() const {
    const int c = cfg_.hidden;
    return {conv1_.spec(), norm1_.spec(), relu_spec(c), conv2_.spec(), norm2_.spec(), relu_spec(c), conv3_.spec()};
  }

  void collect(ParamList<T>& out) {
    conv1_.collect(out);
    norm1_.collect(out);
    conv2_.collect(out);
    norm2_.collect(out);
    conv3_.collect(out);
  }

 private:
  DecoderConfig cfg_;
  Conv2dLayer<T> conv1_;
  InstanceNormLayer<T> norm1_;
  Conv2dLayer<T> conv2_;
  InstanceNormLayer<T> norm2_;
  Conv2dLayer<T> conv3_;
};

}  // namespace npss
