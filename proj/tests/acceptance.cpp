// End-to-end acceptance run: one PASS/FAIL line per criterion.
// Usage: acceptance <path to unigen cli> [criterion numbers...]
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <set>
#include <sstream>

#include <unistd.h>

#include "support.hpp"

using namespace unigen;
using namespace unigen::testing;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

std::string g_cli;
fs::path g_work;

int run_cli(const std::string& args) {
  const std::string cmd = "\"" + g_cli + "\" " + args + " > /dev/null 2>&1";
  return std::system(cmd.c_str());
}

// ---------------------------------------------------------------------------

Outcome identity() {
  const auto t0 = Clock::now();
  double worst = 0.0;
  for (Arch arch : {Arch::weavenet, Arch::controlnet}) {
    RunConfig cfg;
    cfg.arch = arch;
    worst = std::max(worst, zero_init_identity_error(Model(cfg), 100, derive_seed(1872, {1})));
  }
  const double secs = seconds_since(t0);
  return {worst <= 1e-12 && secs < 10.0, fmt("max |full - base| %.3g over 2x100 inputs (<= 1e-12), %.1fs (< 10s)", worst, secs)};
}

Outcome routing_round_trip() {
  const auto t0 = Clock::now();
  Rng rng(derive_seed(1872, {2}));
  int failures = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = std::uniform_int_distribution<std::size_t>(1, 64)(rng);
    const std::size_t d = std::uniform_int_distribution<std::size_t>(1, 64)(rng);
    const std::size_t e = std::uniform_int_distribution<std::size_t>(1, 12)(rng);
    const Tensor x = random_tensor(n, d, rng);
    const ExpertAssignment a = random_assignment(n, e, rng);
    Graph g(false);
    if (!(reverse_scatter(gather_groups(x, a), Tensor({n, d}), a) == x) || !(reverse_scatter(gather_groups(g.constant(x), a), a).value() == x)) ++failures;
  }
  const double secs = seconds_since(t0);
  return {failures == 0 && secs < 5.0, fmt("%d/1000 cases not bitwise identical, %.2fs (< 5s)", failures, secs)};
}

Outcome gradient_fidelity() {
  const auto t0 = Clock::now();
  RunConfig cfg = tiny_config(Arch::weavenet, 16, 2);  // 8x8 image, patch 2 -> 16 tokens
  Model model(cfg);
  Rng rng(derive_seed(1872, {3}));
  randomize(model.params(), rng, 0.2);
  const Image x = random_image(8, 8, rng), cond = random_image(8, 8, rng), N = noise_image(8, 8, rng);
  const std::vector<int> prompt{3, 9, 17, 1};
  const FlowExample ex{x, cond, 4, prompt};
  auto value = [&](const ParamStore&) { return fm_loss(model, ex, N, 0.37, false).loss; };
  auto analytic = [&](const ParamStore&) { return fm_loss(model, ex, N, 0.37, true).grads; };
  const GradCheckResult r = grad_check(value, analytic, model.params(), model.params().ids(), 1e-5);
  const double secs = seconds_since(t0);
  return {r.max_rel_error <= 1e-6 && secs < 120.0,
          fmt("max rel error %.3g over %zu params, worst %s[%zu] (<= 1e-6), %.1fs (< 120s)", r.max_rel_error, r.checked, r.worst_param.c_str(),
              r.worst_index, secs)};
}

Outcome rope_relative() {
  Rng rng(derive_seed(1872, {4}));
  std::uniform_int_distribution<int> pos(0, 63), off(-32, 32);
  double worst = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const Tensor q = random_tensor(1, 64, rng), k = random_tensor(1, 64, rng);
    const GridPos a{pos(rng), pos(rng)}, b{pos(rng), pos(rng)};
    const int dr = off(rng), dc = off(rng);
    auto score = [&](GridPos pq, GridPos pk) {
      return dot(rope_apply({q, {pq}, TokenKind::noisy}).tokens, rope_apply({k, {pk}, TokenKind::noisy}).tokens);
    };
    worst = std::max(worst, std::abs(score(a, b) - score({a.row + dr, a.col + dc}, {b.row + dr, b.col + dc})));
  }
  return {worst <= 1e-9, fmt("max |<R(m)q,R(n)k> - <R(m+o)q,R(n+o)k>| %.3g over 1000 draws (<= 1e-9)", worst)};
}

Outcome ssim_oracle() {
  Rng rng(derive_seed(1872, {5}));
  double worst = 0.0;
  bool self_one = true;
  for (int i = 0; i < 100; ++i) {
    const int h = std::uniform_int_distribution<int>(8, 24)(rng), w = std::uniform_int_distribution<int>(8, 24)(rng);
    const Image a = random_image(h, w, rng);
    Image b = random_image(h, w, rng);
    const double mix = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    for (std::size_t k = 0; k < b.size(); ++k) b.pixels[k] = mix * a.pixels[k] + (1.0 - mix) * b.pixels[k];
    worst = std::max(worst, std::abs(ssim(a, b) - ref_ssim(a, b)));
    self_one = self_one && ssim(a, a) == 1.0;
  }
  return {worst <= 1e-9 && self_one, fmt("max |ssim - brute force| %.3g on 100 pairs (<= 1e-9); ssim(x,x) == 1 exactly: %s", worst, self_one ? "yes" : "no")};
}

Outcome training_efficacy() {
  const auto t0 = Clock::now();
  const RunConfig cfg;  // desk defaults
  const Dataset data = build_corpus(512, cfg.seed, cfg.image_height, cfg.image_width);
  const Dataset held_out = validation_corpus(cfg, data.n_types, 8 * 32);
  const int edge = *ConditionRegistry::standard().find("edge");
  EvalOptions eo = eval_options(cfg);
  eo.types = {edge};

  double drop = 0.0, ssim_cond = 0.0, ssim_zero = 0.0;
  for (bool zero : {false, true}) {
    RunConfig c = cfg;
    c.zero_condition = zero;
    Model model(c);
    const TrainLog log = train(model, data);
    const MetricReport rep = evaluate(model, held_out, 32, c.sample_seed, eo);
    std::printf("  %s run: val loss step 50 %.5f, step %d %.5f; edge SSIM %.4f (%.0fs)\n", zero ? "condition-zeroed" : "conditioned",
                log.val_at(50).value_or(NAN), c.steps, log.val_at(c.steps).value_or(NAN), rep.mean_ssim(edge), seconds_since(t0));
    std::fflush(stdout);
    if (zero) {
      ssim_zero = rep.mean_ssim(edge);
    } else {
      drop = 1.0 - *log.val_at(c.steps) / *log.val_at(50);
      ssim_cond = rep.mean_ssim(edge);
    }
  }
  const double secs = seconds_since(t0);
  const bool ok = drop >= 0.30 && ssim_cond - ssim_zero >= 0.05 && secs < 1800.0;
  return {ok, fmt("val loss drop %.1f%% (>= 30%%); edge SSIM %.4f vs control %.4f, margin %.4f (>= 0.05); %.0fs (< 1800s)", 100.0 * drop, ssim_cond,
                  ssim_zero, ssim_cond - ssim_zero, secs)};
}

Outcome parameter_scaling() {
  RunConfig base;
  const ComplexityReport rep = complexity(base, {3, 12}, 0);
  bool exact = true;
  std::string counts;
  for (const auto& r : rep.rows) {
    RunConfig c = base;
    c.arch = r.arch == "weavenet" ? Arch::weavenet : Arch::controlnet;
    // Instantiate: WeaveNet with r.conditions types, ControlNet with one branch.
    c.n_types = c.arch == Arch::weavenet ? r.conditions : base.n_types;
    const std::size_t one = Model(c).params().scalar_count();
    const std::size_t expected = c.arch == Arch::weavenet ? one : count_backbone_params(c) + std::size_t(r.conditions) * (one - count_backbone_params(c));
    exact = exact && expected == r.params && count_params_for_conditions(c, r.conditions) == r.params;
    counts += fmt(" %s@%d=%zu", r.arch.c_str(), r.conditions, r.params);
  }
  const bool ok = exact && rep.weavenet_ratio <= kMaxWeaveScaling && rep.controlnet_ratio >= kMinControlNetScaling;
  return {ok, fmt("ratio 12/3: weavenet %.4f (<= 1.10), controlnet %.4f (>= 2.0); closed form == instantiated: %s;", rep.weavenet_ratio,
                  rep.controlnet_ratio, exact ? "yes" : "no") +
                  counts};
}

Outcome balanced_sampler() {
  const RunConfig cfg;
  std::vector<int> types;
  for (int i = 0; i < 8 * 512; ++i) types.push_back(i % 8);
  BalancedSampler s(types, 8, derive_seed(cfg.seed, {0}));
  std::size_t violations = 0, epochs_checked = 0, bad_epochs = 0;
  std::vector<std::size_t> current;
  for (int b = 0; b < 10000; ++b) {
    const auto batch = s.next();
    std::set<int> seen;
    for (std::size_t i : batch) violations += !seen.insert(types[i]).second;
    current.insert(current.end(), batch.begin(), batch.end());
    if (current.size() == types.size()) {
      std::sort(current.begin(), current.end());
      bool same = true;
      for (std::size_t i = 0; i < current.size(); ++i) same = same && current[i] == i;
      bad_epochs += !same;
      ++epochs_checked;
      current.clear();
    }
  }
  return {violations == 0 && bad_epochs == 0 && epochs_checked > 0,
          fmt("%zu same-type duplicates in 10000 batches of 8; %zu/%zu epochs not equal to the dataset multiset", violations, bad_epochs, epochs_checked)};
}

Outcome determinism() {
  const fs::path dir = g_work / "determinism";
  fs::create_directories(dir);
  const std::string d = dir.string();
  bool ok = run_cli("datagen --out " + d + "/data.ds --per-type 4 --seed 1872") == 0;
  for (const char* tag : {"a", "b"}) ok = ok && run_cli("train --data " + d + "/data.ds --out " + d + "/" + tag + ".ckpt --steps 12 --quiet") == 0;
  for (const char* tag : {"a", "b"})
    ok = ok && run_cli("generate --ckpt " + d + "/a.ckpt --type edge --seed 1872 --out " + d + "/" + tag + ".png") == 0;
  if (!ok) return {false, "CLI invocation failed"};
  const std::string la = slurp(dir / "a.ckpt.loss.csv"), lb = slurp(dir / "b.ckpt.loss.csv");
  const std::string pa = slurp(dir / "a.png"), pb = slurp(dir / "b.png");
  const bool logs = !la.empty() && la == lb, pngs = !pa.empty() && pa == pb;
  const bool ckpts = slurp(dir / "a.ckpt") == slurp(dir / "b.ckpt");
  return {logs && pngs && ckpts, fmt("loss CSVs identical: %s (%zu bytes); PNGs identical: %s (%zu bytes); checkpoints identical: %s", logs ? "yes" : "no",
                                     la.size(), pngs ? "yes" : "no", pa.size(), ckpts ? "yes" : "no")};
}

// Reads an ablation CSV and checks its shape; returns an empty string when fine.
std::string check_ablation_csv(const fs::path& p, const std::string& column, const std::vector<int>& values) {
  std::ifstream in(p);
  std::string line;
  if (!std::getline(in, line) || line != column + ",status,identity_error,final_loss,ssim,params,error") return "bad header in " + p.string();
  std::size_t k = 0;
  while (std::getline(in, line)) {
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string x; std::getline(ss, x, ',');) f.push_back(x);
    if (line.back() == ',') f.push_back("");
    if (f.size() != 7) return "row with " + std::to_string(f.size()) + " fields: " + line;
    if (k >= values.size() || std::stoi(f[0]) != values[k]) return "unexpected row " + line;
    if (f[1] != "ok" || f[2] != "0" || !std::isfinite(std::stod(f[3])) || !std::isfinite(std::stod(f[4])) || std::stoul(f[5]) == 0)
      return "variant failed: " + line;
    ++k;
  }
  return k == values.size() ? "" : "missing rows in " + p.string();
}

Outcome ablation_harness() {
  const auto t0 = Clock::now();
  const fs::path dir = g_work / "ablation";
  fs::create_directories(dir);
  const std::vector<int> experts{2, 3, 4, 6, 8, 9, 10, 12}, layers{2, 4, 6, 8, 12};
  auto join = [](const std::vector<int>& v) {
    std::string s;
    for (int x : v) s += (s.empty() ? "" : ",") + std::to_string(x);
    return s;
  };
  const std::string common = " --steps 10 --per-type 4 --eval-n 1";
  const int rc1 = run_cli("ablate --kind experts --values " + join(experts) + " --out " + (dir / "experts.csv").string() + common);
  const int rc2 = run_cli("ablate --kind layers --values " + join(layers) + " --out " + (dir / "layers.csv").string() + common);
  std::string problem = check_ablation_csv(dir / "experts.csv", "experts", experts);
  if (problem.empty()) problem = check_ablation_csv(dir / "layers.csv", "ctrl_layers", layers);
  if (problem.empty() && (rc1 != 0 || rc2 != 0)) problem = "CLI exit status nonzero";
  return {problem.empty(), problem.empty() ? fmt("13 variants trained and evaluated, identity error 0 for each, CSVs well formed (%.0fs)", seconds_since(t0))
                                           : problem};
}

struct Criterion {
  int id;
  const char* name;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  if (argc < 2) {
    std::fprintf(stderr, "usage: %s <unigen cli> [criterion...]\n", argv[0]);
    return 2;
  }
  g_cli = argv[1];
  g_work = fs::temp_directory_path() / ("unigen_acceptance_" + std::to_string(::getpid()));
  fs::create_directories(g_work);

  const std::vector<Criterion> all = {
      {1, "zero-init identity", identity},
      {2, "routing round trip", routing_round_trip},
      {3, "gradient fidelity", gradient_fidelity},
      {4, "rope relative position", rope_relative},
      {5, "ssim oracle", ssim_oracle},
      {6, "training efficacy", training_efficacy},
      {7, "parameter scaling", parameter_scaling},
      {8, "balanced sampler", balanced_sampler},
      {9, "determinism", determinism},
      {10, "ablation harness", ablation_harness},
  };
  std::set<int> selected;
  for (int i = 2; i < argc; ++i) selected.insert(std::atoi(argv[i]));

  int failed = 0;
  for (const auto& c : all) {
    if (!selected.empty() && !selected.count(c.id)) continue;
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("criterion %2d %s  %s: %s\n", c.id, o.pass ? "PASS" : "FAIL", c.name, o.detail.c_str());
    std::fflush(stdout);
  }
  fs::remove_all(g_work);
  return failed == 0 ? 0 : 1;
}
