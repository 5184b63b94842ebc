// npss: generate data, train, evaluate, render and benchmark the NP segmentation head.

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "npss/commands.hpp"

namespace fs = std::filesystem;
using namespace npss;

namespace {

RunConfig load_or_default(const std::string& path) { return path.empty() ? RunConfig{} : load_run_config(path); }

void write_table(const CsvTable& t, const std::string& out) {
  if (out.empty() || out == "-") {
    std::cout << t.str();
  } else {
    io::write_all(out, t.str());
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Neural-process segmentation head: data, training, evaluation, rendering, timing"};
  app.require_subcommand(1);

  std::string config_path, out, data_dir, checkpoint, resume, image, mode, split = "val", run_id, samples_text;
  int crop = 0, stride = 0, repeats = 0;

  auto* gen = app.add_subcommand("generate", "write the synthetic dataset");
  gen->add_option("-c,--config", config_path, "key=value config file");
  gen->add_option("-o,--out", out, "output directory")->required();

  auto* train = app.add_subcommand("train", "self-train and write checkpoint.npck, centers.npss, train_log.csv");
  train->add_option("-c,--config", config_path, "key=value config file");
  train->add_option("-d,--data", data_dir, "dataset directory")->required();
  train->add_option("-o,--out", out, "output directory")->required();
  train->add_option("--resume", resume, "continue from this checkpoint");

  auto* eval = app.add_subcommand("eval", "mIoU and PAvPU of a checkpoint");
  eval->add_option("-k,--checkpoint", checkpoint, "checkpoint file")->required();
  eval->add_option("-d,--data", data_dir, "dataset directory")->required();
  eval->add_option("-m,--mode", mode, "crop | slide (default from checkpoint config)");
  eval->add_option("--crop", crop, "crop or window size");
  eval->add_option("--stride", stride, "sliding window stride");
  eval->add_option("--split", split, "labeled | unlabeled | val");
  eval->add_option("--run-id", run_id, "run_id column value");
  eval->add_option("-o,--out", out, "CSV path, '-' for stdout");

  auto* render = app.add_subcommand("render", "prediction PPM and uncertainty PGM for one image");
  render->add_option("-k,--checkpoint", checkpoint, "checkpoint file")->required();
  render->add_option("-i,--image", image, "input PPM")->required();
  render->add_option("-o,--out", out, "output prefix")->required();

  auto* bench = app.add_subcommand("benchmark", "NP vs MC-dropout uncertainty timing");
  bench->add_option("-k,--checkpoint", checkpoint, "checkpoint file")->required();
  bench->add_option("-T,--samples", samples_text, "comma-separated T list (default from config)");
  bench->add_option("-r,--repeats", repeats, "timing repeats");
  bench->add_option("-d,--data", data_dir, "dataset directory (val images); generated when omitted");
  bench->add_option("--run-id", run_id, "run_id column value");
  bench->add_option("-o,--out", out, "CSV path, '-' for stdout");

  auto* show = app.add_subcommand("config", "print every config key with its default");
  show->add_option("-c,--config", config_path, "print this config merged over the defaults");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*gen) {
      cmd_generate(load_or_default(config_path), out);
    } else if (*train) {
      const auto art = cmd_train(load_or_default(config_path), data_dir, out,
                                 resume.empty() ? std::nullopt : std::optional<fs::path>(resume), &std::cerr);
      std::cerr << "wrote " << art.checkpoint.string() << " at step " << art.step << "\n";
    } else if (*eval) {
      EvalOptions opts = load_checkpoint(checkpoint).config.eval;
      if (!mode.empty()) opts.mode = parse_eval_mode(mode);
      if (crop > 0) opts.crop = crop;
      if (stride > 0) opts.stride = stride;
      Split s;
      try {
        s = parse_split(split);
      } catch (const DataError& e) {
        throw ConfigError(e.what());
      }
      write_table(cmd_eval(checkpoint, data_dir, opts, s, run_id.empty() ? "run" : run_id), out);
    } else if (*render) {
      const auto r = cmd_render(checkpoint, image, out);
      std::cerr << "wrote " << r.prediction.string() << " and " << r.uncertainty.string() << "\n";
    } else if (*bench) {
      RunConfig base = load_checkpoint(checkpoint).config;
      if (!samples_text.empty()) base = parse_run_config("bench_samples=" + samples_text, base);
      const int reps = repeats > 0 ? repeats : base.bench.repeats;
      write_table(cmd_benchmark(checkpoint, base.bench.samples, reps,
                                data_dir.empty() ? std::nullopt : std::optional<fs::path>(data_dir),
                                run_id.empty() ? "bench" : run_id, &std::cerr),
                  out);
    } else if (*show) {
      std::cout << serialize(load_or_default(config_path), true);
    }
  } catch (const std::exception& e) {
    std::cerr << "npss: " << e.what() << "\n";
    return exit_code_for(e);
  }
  return kExitOk;
}
