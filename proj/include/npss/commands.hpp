#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "npss/errors.hpp"
#include "npss/evalkit.hpp"
#include "npss/model.hpp"
#include "npss/persistence.hpp"
#include "npss/run_config.hpp"
#include "npss/synthdata.hpp"
#include "npss/trainer.hpp"

namespace npss {

enum ExitCode : int { kExitOk = 0, kExitOther = 1, kExitConfig = 2, kExitData = 3, kExitNumeric = 4 };

/// Maps the exception hierarchy onto process exit codes.
inline int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return kExitConfig;
  if (dynamic_cast<const DataError*>(&e) || dynamic_cast<const FormatError*>(&e) || dynamic_cast<const ShapeError*>(&e))
    return kExitData;
  if (dynamic_cast<const NumericError*>(&e) || dynamic_cast<const AggregationError*>(&e)) return kExitNumeric;
  return kExitOther;
}

/// Class colors for rendered predictions: background black, then a fixed qualitative list,
/// repeating for larger class counts.
inline std::array<float, 3> class_color(int cls) {
  static constexpr std::array<std::array<int, 3>, 8> kPalette{{{0, 0, 0},
                                                               {230, 25, 75},
                                                               {60, 180, 75},
                                                               {0, 130, 200},
                                                               {255, 225, 25},
                                                               {145, 30, 180},
                                                               {70, 240, 240},
                                                               {240, 50, 230}}};
  const auto& c = cls == 0 ? kPalette[0] : kPalette[static_cast<std::size_t>(1 + (cls - 1) % 7)];
  return {c[0] / 255.f, c[1] / 255.f, c[2] / 255.f};
}

inline Tensor render_labels(const LabelMap& labels) {
  const int h = labels.dim(0), w = labels.dim(1);
  Tensor out({3, h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const auto c = class_color(labels.at(y, x));
      for (int ch = 0; ch < 3; ++ch) out.at(ch, y, x) = c[static_cast<std::size_t>(ch)];
    }
  return out;
}

/// Gray levels round(255 * H / ln n_class).
inline BasicTensor<int> render_uncertainty(const Tensor& entropy, int n_class) {
  BasicTensor<int> out(entropy.shape());
  const double s = std::log(static_cast<double>(n_class));
  for (std::size_t i = 0; i < entropy.size(); ++i)
    out[i] = static_cast<int>(std::clamp(std::lround(255.0 * entropy[i] / s), 0L, 255L));
  return out;
}

inline void cmd_generate(const RunConfig& cfg, const std::filesystem::path& out_dir) {
  save_dataset(generate(cfg.data), out_dir);
}

struct TrainArtifacts {
  std::filesystem::path checkpoint;
  std::filesystem::path centers;
  std::filesystem::path log;
  std::int64_t step = 0;
};

inline TrainArtifacts cmd_train(const RunConfig& cfg, const std::filesystem::path& data_dir, const std::filesystem::path& out_dir,
                                const std::optional<std::filesystem::path>& resume = std::nullopt, std::ostream* progress = nullptr) {
  const Dataset ds = load_dataset(data_dir);
  std::optional<FitResult<float>> start;
  if (resume) {
    auto ck = load_checkpoint(*resume);
    if (ck.n_class != ds.n_class()) throw ConfigError("resume: checkpoint has " + std::to_string(ck.n_class) + " classes, dataset " + std::to_string(ds.n_class()));
    NpSegModel<float> model(cfg.train.model_config(ds.n_class()));
    auto dst = model.parameters();
    const auto src = ck.model.parameters();
    if (dst.size() != src.size()) throw ConfigError("resume: model layout differs from the checkpoint");
    for (std::size_t i = 0; i < dst.size(); ++i) {
      if (dst[i]->value.shape() != src[i]->value.shape())
        throw ConfigError("resume: " + dst[i]->name + " is " + shape_str(dst[i]->value.shape()) + " here, " +
                          shape_str(src[i]->value.shape()) + " in the checkpoint");
      dst[i]->value = src[i]->value;
    }
    model.import_centers(ck.model.export_centers());
    start = FitResult<float>{std::move(model), SgdMomentum<float>{{}, ck.step}, {}, std::nullopt};
  }
  const auto val = ds.split(Split::kVal);
  ValidationFn<float> validate;
  if (!val.empty())
    validate = [&](NpSegModel<float>& m) { return evaluate<float>(np_predictor(m, cfg.train.seed), val, ds.n_class(), cfg.eval).miou; };
  auto res = fit<float>(cfg.train, ds, std::move(start), validate, [&](const EpochLog& e) {
    if (progress) {
      *progress << "epoch " << e.epoch << " step " << e.step << " l_c " << e.l_c << " l_kl " << e.l_kl;
      if (e.val_miou) *progress << " val_miou " << *e.val_miou;
      *progress << std::endl;
    }
  });

  std::filesystem::create_directories(out_dir);
  TrainArtifacts art{out_dir / "checkpoint.npck", out_dir / "centers.npss", out_dir / "train_log.csv", res.optimizer.step_count};
  save_checkpoint(art.checkpoint, cfg, res.model, res.optimizer.step_count);
  save_snapshot(art.centers, res.model.export_centers());
  CsvTable log{kTrainLogSchema, {"epoch", "step", "l_c", "l_kl", "val_miou"}, {}};
  for (const auto& e : res.log)
    log.rows.push_back({std::to_string(e.epoch), std::to_string(e.step), detail::fmt_double(e.l_c), detail::fmt_double(e.l_kl),
                        e.val_miou ? detail::fmt_double(*e.val_miou) : ""});
  io::write_all(art.log, log.str());
  return art;
}

/// Evaluates a checkpoint on one split and returns the metrics table (one row).
inline CsvTable cmd_eval(const std::filesystem::path& checkpoint, const std::filesystem::path& data_dir, const EvalOptions& opts,
                         Split split = Split::kVal, const std::string& run_id = "run") {
  auto ck = load_checkpoint(checkpoint);
  const Dataset ds = load_dataset(data_dir);
  if (ds.n_class() != ck.n_class) throw DataError("dataset has " + std::to_string(ds.n_class()) + " classes, checkpoint " + std::to_string(ck.n_class));
  const auto samples = ds.split(split);
  const auto t0 = std::chrono::steady_clock::now();
  const auto r = evaluate<float>(np_predictor(ck.model, ck.config.train.seed), samples, ds.n_class(), opts);
  const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count() / r.images;
  return {kMetricsSchema,
          {"run_id", "split", "miou", "pavpu", "wall_ms_np", "wall_ms_mc", "T"},
          {{run_id, to_string(split), detail::fmt_double(r.miou), detail::fmt_double(r.pavpu), detail::fmt_double(ms), "",
            std::to_string(ck.model.config().head.samples)}}};
}

struct RenderOutputs {
  std::filesystem::path prediction;
  std::filesystem::path uncertainty;
};

inline RenderOutputs cmd_render(const std::filesystem::path& checkpoint, const std::filesystem::path& image_path,
                                const std::string& out_prefix) {
  auto ck = load_checkpoint(checkpoint);
  const Tensor image = read_ppm(image_path);
  Rng rng(ck.config.train.seed, "predict");
  const auto bundle = ck.model.predict(image, rng);
  RenderOutputs out{out_prefix + "_pred.ppm", out_prefix + "_uncertainty.pgm"};
  write_ppm(out.prediction, render_labels(argmax_labels(bundle.avg_probs)));
  write_pgm(out.uncertainty, render_uncertainty(bundle.uncertainty, ck.n_class));
  return out;
}

/// Times NP against MC dropout on validation images (or freshly generated ones when no
/// data directory is given). The dropout model shares encoder and decoder widths.
inline CsvTable cmd_benchmark(const std::filesystem::path& checkpoint, const std::vector<int>& samples, int repeats,
                              const std::optional<std::filesystem::path>& data_dir, const std::string& run_id = "bench",
                              std::ostream* warn = nullptr) {
  auto ck = load_checkpoint(checkpoint);
  std::vector<Tensor> images;
  if (data_dir) {
    const Dataset ds = load_dataset(*data_dir);
    for (const auto* s : ds.split(Split::kVal)) images.push_back(s->image);
  } else {
    DatasetConfig dc = ck.config.data;
    dc.n_labeled = 0, dc.n_unlabeled = 0, dc.n_val = 4;
    for (const auto& s : generate(dc).samples) images.push_back(s.image);
  }
  if (images.empty()) throw DataError("benchmark: no validation images");
  if (images.size() > 8) images.resize(8);
  const auto& mc = ck.model.config();
  DropoutSegModel<float> mc_model(mc.encoder, mc.head.decoder_hidden, mc.head.n_class, ck.config.bench.dropout_rate, ck.config.train.seed);
  BenchmarkOptions bo{std::min(ck.config.eval.crop, images.at(0).dim(1)), ck.config.eval.stride, repeats};
  CsvTable t{kBenchSchema,
             {"run_id", "split", "miou", "pavpu", "wall_ms_np", "wall_ms_mc", "T", "windows", "np_passes", "mc_passes", "repeats",
              "low_repeat_warning"},
             {}};
  for (int s : samples) {
    const auto row = benchmark_uncertainty(ck.model, mc_model, images, s, bo);
    if (row.low_repeat_warning && warn) *warn << "warning: repeats=" << row.repeats << ", timing is a single measurement\n";
    t.rows.push_back({run_id, "val", "", "", detail::fmt_double(row.wall_ms_np), detail::fmt_double(row.wall_ms_mc), std::to_string(s),
                      std::to_string(row.windows), std::to_string(row.np_decoder_passes), std::to_string(row.mc_decoder_passes),
                      std::to_string(row.repeats), row.low_repeat_warning ? "1" : "0"});
  }
  return t;
}

}  // namespace npss
