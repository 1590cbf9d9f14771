// Command-line front end: data generation, training, sampling, evaluation,
// complexity report and ablation sweeps.
#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "unigen/unigen.hpp"

using namespace unigen;

namespace {

void write_text(const std::string& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path);
  os << text;
  if (!os) throw std::runtime_error("I/O error writing " + path);
}

std::vector<int> parse_int_list(const std::string& s) {
  std::vector<int> out;
  std::string tok;
  std::istringstream in(s);
  while (in >> tok) {
    std::istringstream parts(tok);
    std::string p;
    while (std::getline(parts, p, ','))
      if (!p.empty()) {
        std::size_t used = 0;
        const int v = std::stoi(p, &used);
        if (used != p.size()) throw std::invalid_argument("not an integer: '" + p + "'");
        out.push_back(v);
      }
  }
  return out;
}

int parse_type(const std::string& s) {
  const auto reg = ConditionRegistry::standard();
  if (auto id = reg.find(s)) return *id;
  std::size_t used = 0;
  int v = -1;
  try {
    v = std::stoi(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != s.size() || v < 0 || std::size_t(v) >= reg.slots()) throw std::invalid_argument("unknown condition type '" + s + "'");
  return v;
}

RunConfig config_or_default(const std::string& path) { return path.empty() ? RunConfig{} : RunConfig::load(path); }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-condition image generation at desk scale"};
  app.require_subcommand(1);

  // datagen
  auto* dg = app.add_subcommand("datagen", "Write a procedural multi-condition corpus");
  std::string dg_out;
  int dg_per_type = 512, dg_size = 16;
  std::uint64_t dg_seed = 1872;
  dg->add_option("--out", dg_out, "Dataset file")->required();
  dg->add_option("--per-type", dg_per_type, "Samples per condition type")->check(CLI::PositiveNumber);
  dg->add_option("--seed", dg_seed, "Corpus seed");
  dg->add_option("--size", dg_size, "Image height and width")->check(CLI::PositiveNumber);

  // train
  auto* tr = app.add_subcommand("train", "Train a model on a dataset file");
  std::string tr_config, tr_data, tr_out, tr_log, tr_val_log;
  int tr_steps = -1;
  bool tr_quiet = false;
  tr->add_option("--config", tr_config, "Config file (key = value); defaults to the desk config");
  tr->add_option("--data", tr_data, "Dataset file")->required();
  tr->add_option("--out", tr_out, "Checkpoint file")->required();
  tr->add_option("--log", tr_log, "Loss log CSV (default: <out>.loss.csv)");
  tr->add_option("--val-log", tr_val_log, "Validation loss CSV (default: <out>.val.csv)");
  tr->add_option("--steps", tr_steps, "Override the configured step count");
  tr->add_flag("--quiet", tr_quiet, "No progress output");

  // generate
  auto* ge = app.add_subcommand("generate", "Sample one image from a checkpoint");
  std::string ge_ckpt, ge_type = "edge", ge_prompt, ge_out, ge_data, ge_cond_out;
  int ge_steps = 28, ge_index = -1;
  double ge_guidance = 3.5;
  std::uint64_t ge_seed = 1872, ge_scene_seed = 1872;
  ge->add_option("--ckpt", ge_ckpt, "Checkpoint file")->required();
  ge->add_option("--type", ge_type, "Condition type (name or id)");
  ge->add_option("--prompt", ge_prompt, "Prompt token ids, space or comma separated (default: the scene's prompt)");
  ge->add_option("--steps", ge_steps, "Euler steps")->check(CLI::PositiveNumber);
  ge->add_option("--guidance", ge_guidance, "Classifier-free guidance scale")->check(CLI::NonNegativeNumber);
  ge->add_option("--seed", ge_seed, "Sampling seed");
  ge->add_option("--scene-seed", ge_scene_seed, "Seed of the procedural scene the condition is derived from");
  ge->add_option("--data", ge_data, "Take condition and prompt from this dataset instead");
  ge->add_option("--index", ge_index, "Sample index in --data");
  ge->add_option("--cond-out", ge_cond_out, "Also write the condition image");
  ge->add_option("--out", ge_out, "Output PNG")->required();

  // eval
  auto* ev = app.add_subcommand("eval", "Score generations against dataset targets");
  std::string ev_ckpt, ev_data, ev_out, ev_config, ev_types;
  int ev_n = 8, ev_steps = -1;
  double ev_guidance = -1.0;
  std::uint64_t ev_seed = 1872;
  ev->add_option("--ckpt", ev_ckpt, "Checkpoint file")->required();
  ev->add_option("--data", ev_data, "Dataset file")->required();
  ev->add_option("--n", ev_n, "Samples per condition type")->check(CLI::NonNegativeNumber);
  ev->add_option("--out", ev_out, "Per-sample CSV; a summary goes to <out>.summary.csv")->required();
  ev->add_option("--seed", ev_seed, "Sampling seed");
  ev->add_option("--steps", ev_steps, "Euler steps (default: from the checkpoint config)");
  ev->add_option("--guidance", ev_guidance, "Guidance scale (default: from the checkpoint config)");
  ev->add_option("--types", ev_types, "Comma-separated condition types to evaluate (default: all)");
  ev->add_option("--config", ev_config, "Require the checkpoint to match this config's architecture");

  // bench
  auto* be = app.add_subcommand("bench", "Parameter counts and inference time per architecture and condition count");
  std::string be_out, be_config, be_conditions = "3,12";
  int be_runs = 20, be_warmup = 3;
  be->add_option("--out", be_out, "CSV file")->required();
  be->add_option("--config", be_config, "Base config (default: desk config)");
  be->add_option("--conditions", be_conditions, "Condition counts");
  be->add_option("--runs", be_runs, "Timed runs per configuration")->check(CLI::NonNegativeNumber);
  be->add_option("--warmup", be_warmup, "Untimed warmup runs")->check(CLI::NonNegativeNumber);

  // ablate
  auto* ab = app.add_subcommand("ablate", "Train and evaluate one variant per value");
  std::string ab_kind, ab_values, ab_out, ab_config, ab_data;
  int ab_steps = 100, ab_per_type = 16, ab_eval_n = 2;
  ab->add_option("--kind", ab_kind, "experts | layers")->required()->check(CLI::IsMember({"experts", "layers"}));
  ab->add_option("--values", ab_values, "Comma-separated values")->required();
  ab->add_option("--out", ab_out, "CSV file")->required();
  ab->add_option("--config", ab_config, "Base config (default: desk config)");
  ab->add_option("--data", ab_data, "Training dataset (default: generated from the config seed)");
  ab->add_option("--steps", ab_steps, "Training steps per variant")->check(CLI::NonNegativeNumber);
  ab->add_option("--per-type", ab_per_type, "Generated samples per type when --data is absent")->check(CLI::PositiveNumber);
  ab->add_option("--eval-n", ab_eval_n, "Evaluation samples per type")->check(CLI::NonNegativeNumber);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*dg) {
      write_dataset(dg_out, build_corpus(dg_per_type, dg_seed, dg_size, dg_size));
      std::fprintf(stderr, "wrote %d samples per type to %s\n", dg_per_type, dg_out.c_str());
    } else if (*tr) {
      RunConfig cfg = config_or_default(tr_config);
      if (tr_steps >= 0) {
        cfg.steps = tr_steps;
        cfg.warmup = std::min(cfg.warmup, cfg.steps);
      }
      cfg.validate();
      const Dataset data = read_dataset(tr_data);
      Model model(cfg);
      TrainOptions opt;
      if (!tr_quiet) {
        opt.on_step = [&](const LossRow& r) {
          if (r.step % 50 == 0 || r.step == cfg.steps) std::fprintf(stderr, "step %d loss %.6f lr %.3g\n", r.step, r.loss, r.lr);
        };
        opt.on_val = [](const ValRow& r) { std::fprintf(stderr, "step %d val_loss %.6f\n", r.step, r.loss); };
      }
      const TrainLog log = train(model, data, opt);
      save_checkpoint(tr_out, model);
      write_text(tr_log.empty() ? tr_out + ".loss.csv" : tr_log, loss_csv(log));
      std::string val = "step,val_loss\n";
      for (const auto& r : log.val) val += std::to_string(r.step) + "," + detail::fmt_double(r.loss) + "\n";
      write_text(tr_val_log.empty() ? tr_out + ".val.csv" : tr_val_log, val);
    } else if (*ge) {
      const Model model = load_checkpoint(ge_ckpt);
      const RunConfig& cfg = model.config();
      Image condition;
      int type_id = 0;
      std::vector<int> prompt;
      if (!ge_data.empty()) {
        const Dataset ds = read_dataset(ge_data);
        if (ge_index < 0 || std::size_t(ge_index) >= ds.samples.size())
          throw std::invalid_argument("--index must lie in [0," + std::to_string(ds.samples.size()) + ")");
        const auto& s = ds.samples[std::size_t(ge_index)];
        condition = s.condition;
        type_id = s.type_id;
        prompt = s.prompt_ids;
      } else {
        type_id = parse_type(ge_type);
        const SceneSpec spec = random_scene(ge_scene_seed, cfg.image_height, cfg.image_width);
        const RenderedScene scene = render_scene(spec, cfg.image_height, cfg.image_width);
        condition = derive_condition(scene, type_id, derive_seed(ge_scene_seed, {1}));
        prompt = make_prompt(spec);
      }
      if (!ge_prompt.empty()) prompt = parse_int_list(ge_prompt);
      if (type_id >= cfg.n_types) throw std::invalid_argument("condition type " + condition_name(type_id) + " not served by this checkpoint");
      const Image img = sample_image(model, condition, type_id, prompt, ge_steps, ge_guidance, ge_seed);
      write_png(ge_out, img);
      if (!ge_cond_out.empty()) write_png(ge_cond_out, condition);
    } else if (*ev) {
      RunConfig expected;
      if (!ev_config.empty()) expected = RunConfig::load(ev_config);
      const Model model = load_checkpoint(ev_ckpt, ev_config.empty() ? nullptr : &expected);
      const Dataset data = read_dataset(ev_data);
      EvalOptions opt = eval_options(model.config());
      if (ev_steps > 0) opt.steps = ev_steps;
      if (ev_guidance >= 0.0) opt.guidance = ev_guidance;
      if (!ev_types.empty()) {
        std::istringstream in(ev_types);
        std::string t;
        while (std::getline(in, t, ',')) opt.types.push_back(parse_type(t));
      }
      const MetricReport rep = evaluate(model, data, ev_n, ev_seed, opt);
      write_text(ev_out, metric_csv(rep));
      write_text(ev_out + ".summary.csv", metric_summary_csv(rep));
      std::printf("config %s, %zu images, %.4f s/image\n", rep.config_hash.c_str(), rep.count(), rep.seconds_per_image);
      for (const auto& s : rep.per_type)
        std::printf("%-12s n=%zu ssim=%.4f psnr=%.3f mse=%.5f\n", condition_name(s.type_id).c_str(), s.count, s.ssim, s.psnr, s.mse);
    } else if (*be) {
      const RunConfig cfg = config_or_default(be_config);
      const ComplexityReport rep = complexity(cfg, parse_int_list(be_conditions), be_runs, be_warmup);
      write_text(be_out, complexity_csv(rep));
      std::printf("%s", complexity_csv(rep).c_str());
      std::printf("param ratio, largest/smallest condition count: weavenet %.4f (limit %.2f), controlnet %.4f (min %.2f)\n", rep.weavenet_ratio,
                  kMaxWeaveScaling, rep.controlnet_ratio, kMinControlNetScaling);
      std::printf("full-scale reference (billions, 3 -> 12 conditions): ControlNet %.2f -> %.2f (x%.2f), UniGen %.2f -> %.2f (x%.2f)\n",
                  kScalingReference.controlnet_3, kScalingReference.controlnet_12, kScalingReference.controlnet_12 / kScalingReference.controlnet_3,
                  kScalingReference.unigen_3, kScalingReference.unigen_12, kScalingReference.unigen_12 / kScalingReference.unigen_3);
      if (!rep.trend_holds) {
        std::fprintf(stderr, "error: parameter scaling trend does not hold\n");
        return 2;
      }
    } else if (*ab) {
      RunConfig cfg = config_or_default(ab_config);
      cfg.steps = ab_steps;
      cfg.warmup = std::min(cfg.warmup, cfg.steps);
      cfg.validate();
      const Dataset data = ab_data.empty() ? build_corpus(ab_per_type, cfg.seed, cfg.image_height, cfg.image_width) : read_dataset(ab_data);
      const Dataset eval_data = validation_corpus(cfg, data.n_types, data.n_types * ab_eval_n);
      const AblationKind kind = ab_kind == "experts" ? AblationKind::experts : AblationKind::layers;
      AblationSettings settings;
      settings.eval_per_type = ab_eval_n;
      const auto rows = ablate(kind, parse_int_list(ab_values), cfg, data, eval_data, settings, [](const AblationRow& r) {
        if (r.ok)
          std::fprintf(stderr, "value %d: final loss %.6f ssim %.4f params %zu\n", r.value, r.final_loss, r.ssim, r.params);
        else
          std::fprintf(stderr, "value %d: failed: %s\n", r.value, r.error.c_str());
      });
      write_text(ab_out, ablation_csv(kind, rows));
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
