#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "psaq/io.hpp"
#include "psaq/pipeline.hpp"

namespace fs = std::filesystem;
using namespace psaq;

namespace {

struct Overrides {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<int> w_bits, a_bits;
  std::optional<double> alpha;
  std::optional<std::size_t> iterations, g_step, q_step;
  std::optional<std::string> objective, discrepancy;
  std::string teacher = "toy.ckpt";
};

void add_common(CLI::App* cmd, Overrides& o, bool with_teacher) {
  cmd->add_option("--config", o.config, "config file (key = value)")->check(CLI::ExistingFile);
  cmd->add_option("--seed", o.seed, "pipeline seed");
  cmd->add_option("--w-bits", o.w_bits, "weight bit-width");
  cmd->add_option("--a-bits", o.a_bits, "activation bit-width");
  cmd->add_option("--alpha", o.alpha, "discrepancy weight in the generation loss");
  cmd->add_option("--iterations", o.iterations, "stage-1/stage-2 cycles");
  cmd->add_option("--g-step", o.g_step, "generation steps per cycle");
  cmd->add_option("--q-step", o.q_step, "learning steps per cycle");
  cmd->add_option("--objective", o.objective, "pse+d | pse | d | noise");
  cmd->add_option("--discrepancy", o.discrepancy, "mae | kl");
  if (with_teacher) cmd->add_option("--teacher", o.teacher, "full-precision checkpoint")->check(CLI::ExistingFile);
}

io::RunConfig resolve(const Overrides& o) {
  io::RunConfig cfg = o.config.empty() ? io::parse_config("") : io::load_config(o.config);
  // Route overrides through the parser so they get the same validation.
  std::string extra;
  auto set = [&](const char* key, const std::string& v) { extra += std::string(key) + " = " + v + "\n"; };
  if (o.seed) set("pipeline.seed", std::to_string(*o.seed));
  if (o.w_bits) set("quant.w_bits", std::to_string(*o.w_bits));
  if (o.a_bits) set("quant.a_bits", std::to_string(*o.a_bits));
  if (o.alpha) set("pipeline.alpha", io::format_double(*o.alpha));
  if (o.iterations) set("pipeline.iterations", std::to_string(*o.iterations));
  if (o.g_step) set("pipeline.g_step", std::to_string(*o.g_step));
  if (o.q_step) set("pipeline.q_step", std::to_string(*o.q_step));
  if (o.objective) set("pipeline.objective", *o.objective);
  if (o.discrepancy) set("pipeline.discrepancy", *o.discrepancy);
  if (extra.empty()) return cfg;
  std::string text = io::serialize_config(cfg);
  // Drop the lines being overridden so the parser does not see duplicates.
  std::string merged;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    const auto key = line.substr(0, line.find(' '));
    if (extra.find(key + " = ") == std::string::npos) merged += line + "\n";
  }
  return io::parse_config(merged + extra);
}

FpModel load_teacher(const std::string& path, const io::RunConfig& cfg) {
  auto ck = io::load_checkpoint(path);
  if (ck.config != cfg.model) throw ConfigurationError("teacher checkpoint does not match model.* in the config");
  return {std::move(ck.params), ck.config};
}

SyntheticSplit dataset(const io::RunConfig& cfg) { return make_synthetic(io::data_spec(cfg), cfg.data_seed); }

int cmd_pretrain(const Overrides& o, const std::string& out) {
  const auto cfg = resolve(o);
  auto opts = cfg.pretrain;
  if (o.seed) opts.seed = *o.seed;
  const auto split = dataset(cfg);
  PretrainReport rep;
  FpModel fp{pretrain_toy(cfg.model, split.train, opts, &rep), cfg.model};
  io::save_checkpoint(out, fp.config, fp.params);
  std::printf("final train loss %.6f\n", rep.epoch_loss.back());
  std::printf("accuracy %.4f\n", evaluate(fp, split.test));
  return 0;
}

int cmd_run(const Overrides& o, const std::string& out_dir) {
  const auto cfg = resolve(o);
  const auto teacher = load_teacher(o.teacher, cfg);
  auto result = run_pipeline(teacher, cfg.pipeline);
  fs::create_directories(out_dir);
  io::save_checkpoint(fs::path(out_dir) / "student.ckpt", result.model);
  io::write_file_atomic(fs::path(out_dir) / "metrics.csv", io::metrics_csv(result.metrics));
  const auto split = dataset(cfg);
  std::printf("accuracy %.4f\n", evaluate(result.model, split.test));
  return 0;
}

int cmd_eval(const Overrides& o, const std::string& checkpoint) {
  const auto cfg = resolve(o);
  auto ck = io::load_checkpoint(checkpoint);
  if (ck.config != cfg.model) throw ConfigurationError("checkpoint does not match model.* in the config");
  const auto split = dataset(cfg);
  double acc = 0;
  if (ck.quant) {
    auto q = ck.to_quantized();
    acc = evaluate(q, split.test);
  } else {
    acc = evaluate(FpModel{std::move(ck.params), ck.config}, split.test);
  }
  std::printf("accuracy %.4f\n", acc);
  return 0;
}

int cmd_export(const Overrides& o, const std::string& out_dir, bool noise) {
  const auto cfg = resolve(o);
  GeneratedBatch g;
  if (noise) {
    g = init_noise(cfg.model, cfg.pipeline.batch, cfg.pipeline.seed);
  } else {
    g = run_pipeline(load_teacher(o.teacher, cfg), cfg.pipeline).samples;
  }
  const auto paths = io::export_samples(g, out_dir);
  std::printf("wrote %zu samples to %s\n", paths.size(), out_dir.c_str());
  return 0;
}

int cmd_density(const Overrides& o, const std::string& input, const std::string& out, std::size_t batch) {
  const auto cfg = resolve(o);
  const auto teacher = load_teacher(o.teacher, cfg);
  ad::Tensor x;
  if (input == "noise") {
    x = init_noise(cfg.model, batch, cfg.pipeline.seed).pixels;
  } else {
    x = dataset(cfg).test.slice(0, batch);
  }
  const auto curves = io::block_density_curves(teacher, x);
  io::write_file_atomic(out, io::density_csv(curves));
  const auto ent = io::block_entropies(teacher, x);
  for (std::size_t l = 0; l < ent.size(); ++l) std::printf("block %zu entropy %.6f\n", l, ent[l]);
  return 0;
}

int cmd_ablate(const Overrides& o, std::size_t seeds, const std::string& out) {
  auto cfg = resolve(o);
  const auto teacher = load_teacher(o.teacher, cfg);
  const auto split = dataset(cfg);
  std::string csv = "objective,seed,accuracy\n";
  std::printf("%-8s %s\n", "variant", "mean accuracy");
  for (auto obj : {GenerationObjective::NoiseOnly, GenerationObjective::DiscrepancyOnly, GenerationObjective::PseOnly,
                   GenerationObjective::PseAndDiscrepancy}) {
    double total = 0;
    for (std::size_t s = 0; s < seeds; ++s) {
      auto pc = cfg.pipeline;
      pc.objective = obj;
      pc.seed = cfg.pipeline.seed + s;
      auto r = run_pipeline(teacher, pc);
      const double acc = evaluate(r.model, split.test);
      total += acc;
      csv += std::string(to_string(obj)) + "," + std::to_string(pc.seed) + "," + io::format_double(acc) + "\n";
    }
    std::printf("%-8s %.4f\n", to_string(obj), total / static_cast<double>(seeds));
  }
  if (!out.empty()) io::write_file_atomic(out, csv);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Data-free quantization of a toy vision transformer"};
  app.require_subcommand(1);

  Overrides o;
  std::string out = "toy.ckpt", out_dir = "run_out", checkpoint, input = "noise", csv_out = "density.csv";
  std::size_t batch = 32, seeds = 3;
  bool noise = false;

  auto* pretrain = app.add_subcommand("pretrain", "train the full-precision toy model");
  add_common(pretrain, o, false);
  pretrain->add_option("--out", out, "checkpoint path");

  auto* run = app.add_subcommand("run", "data-free quantization pipeline");
  add_common(run, o, true);
  run->add_option("--out-dir", out_dir, "directory for student.ckpt and metrics.csv");

  auto* eval = app.add_subcommand("eval", "test accuracy of a checkpoint");
  add_common(eval, o, false);
  eval->add_option("--checkpoint", checkpoint, "checkpoint to evaluate")->required()->check(CLI::ExistingFile);

  auto* exp = app.add_subcommand("export-samples", "write generated samples as PPM images");
  add_common(exp, o, true);
  exp->add_option("--out-dir", out_dir, "output directory");
  exp->add_flag("--noise", noise, "export the initial noise instead of running the pipeline");

  auto* dens = app.add_subcommand("density-curves", "per-block kernel density of patch similarities");
  add_common(dens, o, true);
  dens->add_option("--input", input, "noise | real")->check(CLI::IsMember({"noise", "real"}));
  dens->add_option("--batch", batch, "number of images")->check(CLI::PositiveNumber);
  dens->add_option("--out", csv_out, "CSV path");

  auto* abl = app.add_subcommand("ablate", "compare generation objectives");
  add_common(abl, o, true);
  abl->add_option("--seeds", seeds, "seeds per variant")->check(CLI::PositiveNumber);
  std::string ablate_out;
  abl->add_option("--out", ablate_out, "optional CSV of per-seed accuracies");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*pretrain) return cmd_pretrain(o, out);
    if (*run) return cmd_run(o, out_dir);
    if (*eval) return cmd_eval(o, checkpoint);
    if (*exp) return cmd_export(o, out_dir, noise);
    if (*dens) return cmd_density(o, input, csv_out, batch);
    if (*abl) return cmd_ablate(o, seeds, ablate_out);
  } catch (const io::UnknownKeyError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
