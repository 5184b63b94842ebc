#pragma once

#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <iterator>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "npss/errors.hpp"
#include "npss/evalkit.hpp"
#include "npss/synthdata.hpp"
#include "npss/trainer.hpp"

namespace npss {

struct BenchConfig {
  std::vector<int> samples{1, 2, 5, 10};
  int repeats = 3;
  double dropout_rate = 0.5;
};

/// Everything a CLI run needs, as one flat set of keys.
struct RunConfig {
  DatasetConfig data;
  TrainConfig train;
  EvalOptions eval;
  BenchConfig bench;
};

namespace detail {

// Shortest text that parses back to the same double.
inline std::string fmt_double(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

template <class V>
V parse_number(const std::string& key, const std::string& text) {
  V v{};
  if constexpr (std::is_floating_point_v<V>) {
    std::size_t used = 0;
    try {
      v = static_cast<V>(std::stod(text, &used));
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != text.size()) throw ConfigError("key '" + key + "': '" + text + "' is not a number");
  } else {
    const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
    if (ec != std::errc{} || ptr != text.data() + text.size()) throw ConfigError("key '" + key + "': '" + text + "' is not an integer");
  }
  return v;
}

inline bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  throw ConfigError("key '" + key + "': expected true or false, got '" + text + "'");
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

struct KeySpec {
  std::string name;
  std::string doc;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

template <class M>
KeySpec number_key(std::string name, std::string doc, M RunConfig::*group, auto M::*field) {
  using V = std::remove_cvref_t<decltype(std::declval<M>().*field)>;
  return {name, std::move(doc),
          [=](const RunConfig& c) {
            if constexpr (std::is_floating_point_v<V>) return fmt_double((c.*group).*field);
            else return std::to_string((c.*group).*field);
          },
          [=](RunConfig& c, const std::string& v) { (c.*group).*field = parse_number<V>(name, v); }};
}

template <class M>
KeySpec bool_key(std::string name, std::string doc, M RunConfig::*group, bool M::*field) {
  return {name, std::move(doc), [=](const RunConfig& c) { return std::string((c.*group).*field ? "true" : "false"); },
          [=](RunConfig& c, const std::string& v) { (c.*group).*field = parse_bool(name, v); }};
}

inline const std::vector<KeySpec>& key_table() {
  static const std::vector<KeySpec> keys = [] {
    using R = RunConfig;
    std::vector<KeySpec> k;
    k.push_back(number_key("data_seed", "dataset generation seed", &R::data, &DatasetConfig::seed));
    k.push_back(number_key("n_labeled", "labeled images", &R::data, &DatasetConfig::n_labeled));
    k.push_back(number_key("n_unlabeled", "unlabeled images", &R::data, &DatasetConfig::n_unlabeled));
    k.push_back(number_key("n_val", "validation images", &R::data, &DatasetConfig::n_val));
    k.push_back(number_key("height", "image height", &R::data, &DatasetConfig::height));
    k.push_back(number_key("width", "image width", &R::data, &DatasetConfig::width));
    k.push_back(number_key("n_foreground", "foreground classes K (background is extra)", &R::data, &DatasetConfig::n_foreground));
    k.push_back(number_key("n_scene_types", "scene types with distinct class priors", &R::data, &DatasetConfig::n_scene_types));
    k.push_back(number_key("noise_sigma", "pixel noise standard deviation", &R::data, &DatasetConfig::noise_sigma));

    k.push_back(number_key("seed", "training and init seed", &R::train, &TrainConfig::seed));
    k.push_back(number_key("epochs", "training epochs", &R::train, &TrainConfig::epochs));
    k.push_back(number_key("batch_labeled", "labeled images per step", &R::train, &TrainConfig::batch_labeled));
    k.push_back(number_key("batch_unlabeled", "unlabeled images per step", &R::train, &TrainConfig::batch_unlabeled));
    k.push_back(number_key("steps_per_epoch", "0 = one pass over the labeled split", &R::train, &TrainConfig::steps_per_epoch));
    k.push_back(number_key("learning_rate", "SGD learning rate", &R::train, &TrainConfig::learning_rate));
    k.push_back(number_key("lr_decay_epochs", "poly learning-rate decay horizon, 0 = constant", &R::train, &TrainConfig::lr_decay_epochs));
    k.push_back(number_key("momentum", "SGD momentum", &R::train, &TrainConfig::momentum));
    k.push_back(number_key("lambda_kl", "KL weight", &R::train, &TrainConfig::lambda_kl));
    k.push_back(number_key("samples", "latent samples T", &R::train, &TrainConfig::samples));
    k.push_back(number_key("bank_capacity", "memory bank capacity Q per class", &R::train, &TrainConfig::bank_capacity));
    k.push_back(number_key("latent_dim", "latent width D_t", &R::train, &TrainConfig::latent_dim));
    k.push_back(number_key("context_dim", "deterministic context width D_c", &R::train, &TrainConfig::context_dim));
    k.push_back(number_key("reduced_channels", "reduced feature width R", &R::train, &TrainConfig::reduced_channels));
    k.push_back(number_key("latent_hidden", "latent MLP hidden width", &R::train, &TrainConfig::latent_hidden));
    k.push_back(number_key("decoder_hidden", "decoder hidden width", &R::train, &TrainConfig::decoder_hidden));
    k.push_back(number_key("feature_channels", "encoder output width D", &R::train, &TrainConfig::feature_channels));
    k.push_back(number_key("encoder_depth", "encoder conv blocks", &R::train, &TrainConfig::encoder_depth));
    k.push_back({"pseudo_label_threshold", "max-prob cutoff for pseudo-labels, none = plain argmax",
                 [](const R& c) { return c.train.pseudo_label_threshold ? fmt_double(*c.train.pseudo_label_threshold) : std::string("none"); },
                 [](R& c, const std::string& v) {
                   if (v == "none") c.train.pseudo_label_threshold.reset();
                   else c.train.pseudo_label_threshold = parse_number<double>("pseudo_label_threshold", v);
                 }});
    k.push_back(number_key("teacher_ema", "EMA rate of the pseudo-labeling teacher, 0 = the model itself", &R::train, &TrainConfig::teacher_ema));
    k.push_back(number_key("unlabeled_weight", "weight of the pseudo-labeled cross entropy", &R::train, &TrainConfig::unlabeled_weight));
    k.push_back({"aggregator", "attention | mean", [](const R& c) { return to_string(c.train.aggregator); },
                 [](R& c, const std::string& v) {
                   try {
                     c.train.aggregator = parse_aggregator(v);
                   } catch (const Error&) {
                     throw ConfigError("key 'aggregator': unknown value '" + v + "'");
                   }
                 }});
    k.push_back(bool_key("use_unlabeled", "false = labeled-only supervised baseline", &R::train, &TrainConfig::use_unlabeled));
    k.push_back(number_key("warmup_epochs", "leading epochs trained on labeled images only", &R::train, &TrainConfig::warmup_epochs));
    k.push_back(bool_key("strong_unlabeled", "train on a jittered copy of each pseudo-labeled view", &R::train, &TrainConfig::strong_unlabeled));
    k.push_back(bool_key("cutmix", "paste a half-area box between unlabeled views and their pseudo-labels", &R::train, &TrainConfig::cutmix));
    k.push_back(bool_key("augment", "weak flip augmentation during training", &R::train, &TrainConfig::augment));
    k.push_back(bool_key("log_val_miou", "evaluate val mIoU after each epoch", &R::train, &TrainConfig::log_val_miou));

    k.push_back({"eval_mode", "crop | slide", [](const R& c) { return to_string(c.eval.mode); },
                 [](R& c, const std::string& v) { c.eval.mode = parse_eval_mode(v); }});
    k.push_back(number_key("eval_crop", "crop size (center crop or sliding window)", &R::eval, &EvalOptions::crop));
    k.push_back(number_key("eval_stride", "sliding window stride", &R::eval, &EvalOptions::stride));
    k.push_back({"pavpu_window", "PAvPU patch size", [](const R& c) { return std::to_string(c.eval.pavpu.window); },
                 [](R& c, const std::string& v) { c.eval.pavpu.window = parse_number<int>("pavpu_window", v); }});
    k.push_back({"pavpu_uncertainty_threshold", "certain if mean normalized entropy is below this",
                 [](const R& c) { return fmt_double(c.eval.pavpu.uncertainty_threshold); },
                 [](R& c, const std::string& v) { c.eval.pavpu.uncertainty_threshold = parse_number<double>("pavpu_uncertainty_threshold", v); }});
    k.push_back({"pavpu_accuracy_fraction", "accurate if this fraction of valid pixels is correct",
                 [](const R& c) { return fmt_double(c.eval.pavpu.accuracy_fraction); },
                 [](R& c, const std::string& v) { c.eval.pavpu.accuracy_fraction = parse_number<double>("pavpu_accuracy_fraction", v); }});

    k.push_back({"bench_samples", "comma-separated T values",
                 [](const R& c) {
                   std::string s;
                   for (std::size_t i = 0; i < c.bench.samples.size(); ++i) s += (i ? "," : "") + std::to_string(c.bench.samples[i]);
                   return s;
                 },
                 [](R& c, const std::string& v) {
                   std::vector<int> out;
                   std::istringstream is(v);
                   std::string tok;
                   while (std::getline(is, tok, ',')) out.push_back(parse_number<int>("bench_samples", trim(tok)));
                   if (out.empty()) throw ConfigError("key 'bench_samples': empty list");
                   c.bench.samples = std::move(out);
                 }});
    k.push_back(number_key("bench_repeats", "timing repeats (median reported)", &R::bench, &BenchConfig::repeats));
    k.push_back(number_key("dropout_rate", "MC-dropout baseline rate", &R::bench, &BenchConfig::dropout_rate));
    return k;
  }();
  return keys;
}

}  // namespace detail

inline void validate(const RunConfig& c) {
  c.train.validate();
  c.eval.pavpu.validate();
  if (c.eval.crop < 1 || c.eval.stride < 1) throw ConfigError("eval_crop and eval_stride must be positive");
  if (c.eval.stride > c.eval.crop) throw ConfigError("eval_stride must not exceed eval_crop");
  if (c.bench.repeats < 1) throw ConfigError("bench_repeats must be >= 1");
  for (int t : c.bench.samples)
    if (t < 1) throw ConfigError("bench_samples entries must be >= 1");
  if (!(c.bench.dropout_rate >= 0 && c.bench.dropout_rate < 1)) throw ConfigError("dropout_rate must be in [0, 1)");
  if (c.data.n_foreground < 1 || c.data.height < 8 || c.data.width < 8 || c.data.n_scene_types < 1)
    throw ConfigError("dataset extents invalid (n_foreground >= 1, height/width >= 8)");
}

/// Applies `key=value` lines on top of `base`. Blank lines and '#' comments are skipped;
/// unknown keys and malformed lines raise ConfigError naming the offender.
inline RunConfig parse_run_config(const std::string& text, RunConfig base = {}) {
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key=value");
    const std::string key = detail::trim(line.substr(0, eq)), value = detail::trim(line.substr(eq + 1));
    const auto& keys = detail::key_table();
    auto it = std::find_if(keys.begin(), keys.end(), [&](const detail::KeySpec& k) { return k.name == key; });
    if (it == keys.end()) throw ConfigError("unknown config key '" + key + "'");
    it->set(base, value);
  }
  validate(base);
  return base;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  return parse_run_config({std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()});
}

/// Every key in table order; with `with_docs`, each is preceded by a comment line.
inline std::string serialize(const RunConfig& c, bool with_docs = false) {
  std::string out;
  for (const auto& k : detail::key_table()) {
    if (with_docs) out += "# " + k.doc + "\n";
    out += k.name + "=" + k.get(c) + "\n";
  }
  return out;
}

}  // namespace npss
