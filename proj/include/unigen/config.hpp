// Run configuration and its `key = value` text format.
#pragma once

#include <charconv>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace unigen {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Arch { weavenet, controlnet };
enum class SigmaSampling { uniform, logit_normal };

inline const char* to_string(Arch a) { return a == Arch::weavenet ? "weavenet" : "controlnet"; }
inline const char* to_string(SigmaSampling s) { return s == SigmaSampling::uniform ? "uniform" : "logit_normal"; }

struct RunConfig {
  // architecture
  Arch arch = Arch::weavenet;
  int d_model = 64;
  int heads = 4;
  int base_layers = 4;
  int ctrl_layers = 4;
  int experts = 6;
  int mlp_ratio = 2;
  int patch = 2;
  int image_height = 16;
  int image_width = 16;
  int n_types = 8;
  int vocab = 64;
  double rope_base = 10000.0;
  std::uint64_t init_seed = 1872;
  std::uint64_t patch_seed = 20240601;

  // training
  double lr = 5e-4;
  int warmup = 100;
  int steps = 2000;
  int batch = 8;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 1872;
  SigmaSampling sigma_sampling = SigmaSampling::uniform;
  double prompt_dropout = 0.1;
  bool zero_condition = false;
  int threads = 1;
  int val_samples = 64;
  int val_every = 50;

  // inference
  double cond_scale = 1.0;
  int sample_steps = 28;
  double guidance = 3.5;
  std::uint64_t sample_seed = 1872;

  int channels() const { return 3; }
  int tokens() const { return (image_height / patch) * (image_width / patch); }
  int patch_dim() const { return patch * patch * channels(); }

  void validate() const {
    auto req = [](bool ok, const std::string& msg) {
      if (!ok) throw ConfigError("invalid config: " + msg);
    };
    req(d_model > 0 && d_model % 4 == 0, "d_model must be a positive multiple of 4 (2D rotary encoding), got " + std::to_string(d_model));
    req(heads >= 1 && d_model % heads == 0, "d_model must be divisible by heads");
    req(base_layers >= 1, "base_layers must be >= 1");
    req(ctrl_layers >= 1, "ctrl_layers must be >= 1");
    req(ctrl_layers <= base_layers,
        "ctrl_layers (" + std::to_string(ctrl_layers) + ") exceeds base_layers (" + std::to_string(base_layers) + ")");
    req(experts >= 1, "experts must be >= 1");
    req(mlp_ratio >= 1, "mlp_ratio must be >= 1");
    req(patch >= 1 && image_height > 0 && image_width > 0 && image_height % patch == 0 && image_width % patch == 0,
        "image dimensions must be positive multiples of patch");
    req(n_types >= 1, "n_types must be >= 1");
    req(vocab >= 2, "vocab must be >= 2 (token 0 is the null prompt)");
    req(rope_base > 1.0, "rope_base must be > 1");
    req(lr > 0.0, "lr must be positive");
    req(warmup >= 0 && warmup <= steps, "warmup must lie in [0, steps]");
    req(steps >= 0, "steps must be >= 0");
    req(batch >= 1, "batch must be >= 1");
    req(weight_decay >= 0.0, "weight_decay must be >= 0");
    req(prompt_dropout >= 0.0 && prompt_dropout <= 1.0, "prompt_dropout must lie in [0,1]");
    req(threads >= 1, "threads must be >= 1");
    req(val_samples >= 0 && val_every >= 1, "val_samples >= 0 and val_every >= 1 required");
    req(sample_steps >= 1, "sample_steps must be >= 1");
    req(guidance >= 0.0, "guidance must be >= 0");
  }

  static RunConfig parse(std::string_view text);
  static RunConfig load(const std::filesystem::path& path);

  /// Canonical text form; parse(to_text()) reproduces the config.
  std::string to_text() const;

  /// FNV-1a hash of the architecture fields, identifying checkpoint layouts.
  std::uint64_t arch_hash() const;
};

namespace detail {

struct ConfigField {
  const char* name;
  bool arch;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

inline std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <class T>
T parse_number(const std::string& key, const std::string& s) {
  T v{};
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || p != s.data() + s.size()) throw ConfigError("config key '" + key + "': cannot parse '" + s + "'");
  return v;
}

template <class T>
ConfigField num_field(const char* name, bool arch, T RunConfig::*m) {
  return {name, arch, [=](RunConfig& c, const std::string& s) { c.*m = parse_number<T>(name, s); },
          [=](const RunConfig& c) {
            if constexpr (std::is_floating_point_v<T>)
              return fmt_double(c.*m);
            else
              return std::to_string(c.*m);
          }};
}

inline const std::vector<ConfigField>& config_fields() {
  static const std::vector<ConfigField> fields = [] {
    std::vector<ConfigField> f;
    f.push_back({"arch", true,
                 [](RunConfig& c, const std::string& s) {
                   if (s == "weavenet")
                     c.arch = Arch::weavenet;
                   else if (s == "controlnet")
                     c.arch = Arch::controlnet;
                   else
                     throw ConfigError("config key 'arch': expected weavenet|controlnet, got '" + s + "'");
                 },
                 [](const RunConfig& c) { return std::string(to_string(c.arch)); }});
    f.push_back(num_field("d_model", true, &RunConfig::d_model));
    f.push_back(num_field("heads", true, &RunConfig::heads));
    f.push_back(num_field("base_layers", true, &RunConfig::base_layers));
    f.push_back(num_field("ctrl_layers", true, &RunConfig::ctrl_layers));
    f.push_back(num_field("experts", true, &RunConfig::experts));
    f.push_back(num_field("mlp_ratio", true, &RunConfig::mlp_ratio));
    f.push_back(num_field("patch", true, &RunConfig::patch));
    f.push_back(num_field("image_height", true, &RunConfig::image_height));
    f.push_back(num_field("image_width", true, &RunConfig::image_width));
    f.push_back(num_field("n_types", true, &RunConfig::n_types));
    f.push_back(num_field("vocab", true, &RunConfig::vocab));
    f.push_back(num_field("rope_base", true, &RunConfig::rope_base));
    f.push_back(num_field("init_seed", false, &RunConfig::init_seed));
    f.push_back(num_field("patch_seed", true, &RunConfig::patch_seed));
    f.push_back(num_field("lr", false, &RunConfig::lr));
    f.push_back(num_field("warmup", false, &RunConfig::warmup));
    f.push_back(num_field("steps", false, &RunConfig::steps));
    f.push_back(num_field("batch", false, &RunConfig::batch));
    f.push_back(num_field("weight_decay", false, &RunConfig::weight_decay));
    f.push_back(num_field("beta1", false, &RunConfig::beta1));
    f.push_back(num_field("beta2", false, &RunConfig::beta2));
    f.push_back(num_field("adam_eps", false, &RunConfig::adam_eps));
    f.push_back(num_field("seed", false, &RunConfig::seed));
    f.push_back({"sigma_sampling", false,
                 [](RunConfig& c, const std::string& s) {
                   if (s == "uniform")
                     c.sigma_sampling = SigmaSampling::uniform;
                   else if (s == "logit_normal")
                     c.sigma_sampling = SigmaSampling::logit_normal;
                   else
                     throw ConfigError("config key 'sigma_sampling': expected uniform|logit_normal, got '" + s + "'");
                 },
                 [](const RunConfig& c) { return std::string(to_string(c.sigma_sampling)); }});
    f.push_back(num_field("prompt_dropout", false, &RunConfig::prompt_dropout));
    f.push_back({"zero_condition", false,
                 [](RunConfig& c, const std::string& s) {
                   if (s == "true" || s == "1")
                     c.zero_condition = true;
                   else if (s == "false" || s == "0")
                     c.zero_condition = false;
                   else
                     throw ConfigError("config key 'zero_condition': expected true|false, got '" + s + "'");
                 },
                 [](const RunConfig& c) { return std::string(c.zero_condition ? "true" : "false"); }});
    f.push_back(num_field("threads", false, &RunConfig::threads));
    f.push_back(num_field("val_samples", false, &RunConfig::val_samples));
    f.push_back(num_field("val_every", false, &RunConfig::val_every));
    f.push_back(num_field("cond_scale", false, &RunConfig::cond_scale));
    f.push_back(num_field("sample_steps", false, &RunConfig::sample_steps));
    f.push_back(num_field("guidance", false, &RunConfig::guidance));
    f.push_back(num_field("sample_seed", false, &RunConfig::sample_seed));
    return f;
  }();
  return fields;
}

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

}  // namespace detail

inline RunConfig RunConfig::parse(std::string_view text) {
  RunConfig c;
  std::istringstream in{std::string(text)};
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const std::string t = detail::trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected 'key = value'");
    const std::string key = detail::trim(std::string_view(t).substr(0, eq));
    const std::string value = detail::trim(std::string_view(t).substr(eq + 1));
    bool found = false;
    for (const auto& f : detail::config_fields()) {
      if (key == f.name) {
        f.set(c, value);
        found = true;
        break;
      }
    }
    if (key == "image_size") {
      c.image_height = c.image_width = detail::parse_number<int>(key, value);
      found = true;
    }
    if (!found) throw ConfigError("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
  }
  c.validate();
  return c;
}

inline RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

inline std::string RunConfig::to_text() const {
  std::string out;
  for (const auto& f : detail::config_fields()) out += std::string(f.name) + " = " + f.get(*this) + "\n";
  return out;
}

inline std::uint64_t RunConfig::arch_hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& f : detail::config_fields()) {
    if (!f.arch) continue;
    for (char ch : std::string(f.name) + "=" + f.get(*this) + ";") {
      h ^= static_cast<unsigned char>(ch);
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace unigen
