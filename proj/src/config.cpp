#include "lorun/config.hpp"

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <set>

#include "lorun/errors.hpp"
#include "lorun/io.hpp"
#include "lorun/random.hpp"

namespace lorun {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

double to_double(const std::string& key, const std::string& v) {
  double out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) throw ConfigError(key + ": expected a number, got '" + v + "'");
  return out;
}

long long to_int(const std::string& key, const std::string& v) {
  long long out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) throw ConfigError(key + ": expected an integer, got '" + v + "'");
  return out;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string flag(bool b) { return b ? "true" : "false"; }

struct Key {
  const char* name;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define LORUN_INT_KEY(key, field)                                                              \
  Key {                                                                                        \
    key, [](RunConfig& c, const std::string& v) { c.field = static_cast<decltype(c.field)>(to_int(key, v)); }, \
        [](const RunConfig& c) { return std::to_string(c.field); }                             \
  }
#define LORUN_REAL_KEY(key, field)                                                            \
  Key {                                                                                       \
    key, [](RunConfig& c, const std::string& v) { c.field = to_double(key, v); },              \
        [](const RunConfig& c) { return num(c.field); }                                       \
  }
#define LORUN_BOOL_KEY(key, field)                                                            \
  Key {                                                                                       \
    key, [](RunConfig& c, const std::string& v) { c.field = to_bool(key, v); },                \
        [](const RunConfig& c) { return flag(c.field); }                                      \
  }
#define LORUN_TEXT_KEY(key, field)                                                            \
  Key {                                                                                       \
    key, [](RunConfig& c, const std::string& v) { c.field = v; }, [](const RunConfig& c) { return c.field; } \
  }

const std::vector<Key>& keys() {
  static const std::vector<Key> table = {
      Key{"task", [](RunConfig& c, const std::string& v) { c.task = parse_task(v); },
          [](const RunConfig& c) { return std::string(to_string(c.task)); }},
      LORUN_INT_KEY("height", height),
      LORUN_INT_KEY("width", width),
      Key{"image_size", [](RunConfig& c, const std::string& v) { c.height = c.width = to_int("image_size", v); },
          nullptr},
      LORUN_INT_KEY("channels", channels),
      LORUN_REAL_KEY("cs.ratio", cs_ratio),
      LORUN_INT_KEY("cs.block", cs_block),
      Key{"cs.phi_learnable", [](RunConfig& c, const std::string& v) { c.phi_learnable = to_bool("cs.phi_learnable", v); },
          [](const RunConfig& c) { return c.phi_learnable ? flag(*c.phi_learnable) : std::string("default"); }},
      LORUN_INT_KEY("cassi.bands", cassi_bands),
      LORUN_INT_KEY("cassi.shift", cassi_shift),
      LORUN_INT_KEY("sr.kernel_id", sr_kernel_id),
      LORUN_INT_KEY("sr.kernel_size", sr_kernel_size),
      LORUN_INT_KEY("sr.scale", sr_scale),
      Key{"algorithm", [](RunConfig& c, const std::string& v) { c.algorithm = parse_algorithm(v); },
          [](const RunConfig& c) { return std::string(to_string(c.algorithm)); }},
      Key{"arch", [](RunConfig& c, const std::string& v) { c.arch = parse_arch(v); },
          [](const RunConfig& c) { return std::string(to_string(c.arch)); }},
      LORUN_INT_KEY("base_channels", base_channels),
      LORUN_INT_KEY("depth", depth),
      LORUN_INT_KEY("heads", heads),
      LORUN_INT_KEY("K", stages),
      LORUN_REAL_KEY("gamma", gamma),
      Key{"strategy", [](RunConfig& c, const std::string& v) { c.strategy = parse_strategy(v); },
          [](const RunConfig& c) { return std::string(to_string(c.strategy)); }},
      LORUN_BOOL_KEY("gdm_enabled", gdm_enabled),
      LORUN_BOOL_KEY("pretrain_shared_stages", pretrain_shared_stages),
      Key{"seed",
          [](RunConfig& c, const std::string& v) {
            unsigned long long s = 0;
            auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), s);
            if (ec != std::errc() || p != v.data() + v.size()) throw ConfigError("seed: expected an unsigned integer, got '" + v + "'");
            c.seed = s;
          },
          [](const RunConfig& c) { return std::to_string(c.seed); }},
      LORUN_INT_KEY("epochs", epochs),
      LORUN_INT_KEY("pretrain_epochs", pretrain_epochs),
      LORUN_INT_KEY("batch_size", batch_size),
      LORUN_REAL_KEY("learning_rate", learning_rate),
      LORUN_REAL_KEY("beta1", beta1),
      LORUN_REAL_KEY("beta2", beta2),
      LORUN_REAL_KEY("clip_norm", clip_norm),
      LORUN_REAL_KEY("noise_sigma", noise_sigma),
      LORUN_INT_KEY("threads", threads),
      LORUN_TEXT_KEY("data", data),
      LORUN_TEXT_KEY("test_data", test_data),
      LORUN_TEXT_KEY("checkpoint_out", checkpoint_out),
      LORUN_TEXT_KEY("loss_csv", loss_csv),
      LORUN_TEXT_KEY("eval_csv", eval_csv),
  };
  return table;
}

const Key* find_key(const std::string& name) {
  for (const auto& k : keys())
    if (name == k.name) return &k;
  return nullptr;
}

void apply_text(RunConfig& cfg, const std::string& text, const std::string& base_dir, std::set<std::string>& visiting) {
  std::size_t pos = 0;
  int line_no = 0;
  while (pos <= text.size()) {
    std::size_t eol = text.find('\n', pos);
    if (eol == std::string::npos) eol = text.size();
    std::string line = text.substr(pos, eol - pos);
    pos = eol + 1;
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.rfind("include", 0) == 0 && (line.size() == 7 || line[7] == ' ' || line[7] == '\t')) {
      const std::string rel = trim(line.substr(7));
      if (rel.empty()) throw ConfigError("line " + std::to_string(line_no) + ": include needs a path");
      std::filesystem::path p(rel);
      if (p.is_relative()) p = std::filesystem::path(base_dir) / p;
      const std::string key = std::filesystem::weakly_canonical(p).string();
      if (visiting.count(key)) throw ConfigError("include cycle through " + p.string());
      std::string inner;
      try {
        inner = read_file(p.string());
      } catch (const IoError&) {
        throw ConfigError("line " + std::to_string(line_no) + ": cannot read included file " + p.string());
      }
      visiting.insert(key);
      apply_text(cfg, inner, p.parent_path().string(), visiting);
      visiting.erase(key);
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(line_no) + ": expected key = value");
    const std::string name = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    const Key* k = find_key(name);
    if (!k) throw ConfigError("line " + std::to_string(line_no) + ": unknown key '" + name + "'");
    if (name == "cs.phi_learnable" && value == "default") {
      cfg.phi_learnable.reset();
      continue;
    }
    k->set(cfg, value);
  }
}

}  // namespace

TaskKind parse_task(const std::string& s) {
  if (s == "cs") return TaskKind::CS;
  if (s == "cassi") return TaskKind::CASSI;
  if (s == "sr") return TaskKind::SR;
  throw ConfigError("task must be cs, cassi or sr, got '" + s + "'");
}

Algorithm parse_algorithm(const std::string& s) {
  if (s == "pgd") return Algorithm::Pgd;
  if (s == "hqs") return Algorithm::Hqs;
  throw ConfigError("algorithm must be pgd or hqs, got '" + s + "'");
}

Arch parse_arch(const std::string& s) {
  if (s == "unet") return Arch::UNet;
  if (s == "transformer") return Arch::Transformer;
  if (s == "soft_threshold") return Arch::SoftThreshold;
  throw ConfigError("arch must be unet, transformer or soft_threshold, got '" + s + "'");
}

Strategy parse_strategy(const std::string& s) {
  if (s == "lorun") return Strategy::LoRun;
  if (s == "block_k") return Strategy::BlockK;
  if (s == "block_share") return Strategy::BlockShare;
  throw ConfigError("strategy must be lorun, block_k or block_share, got '" + s + "'");
}

DenoiserConfig RunConfig::denoiser() const {
  return DenoiserConfig{arch, image_channels(), base_channels, depth, heads};
}

UnfoldingConfig RunConfig::unfolding() const {
  return UnfoldingConfig{algorithm, stages, strategy, denoiser(), gamma, gdm_enabled};
}

TrainConfig RunConfig::training(int phase_epochs) const {
  TrainConfig t;
  t.epochs = phase_epochs;
  t.batch_size = batch_size;
  t.learning_rate = learning_rate;
  t.beta1 = beta1;
  t.beta2 = beta2;
  t.clip_norm = clip_norm;
  t.noise_sigma = noise_sigma;
  t.seed = seed;
  t.threads = threads;
  return t;
}

void RunConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError(m); };
  if (height < 1 || width < 1) fail("height and width must be positive");
  if (channels < 1) fail("channels must be positive");
  if (stages < 1) fail("K must be >= 1");
  if (!(gamma > 0.0 && gamma <= 100.0)) fail("gamma must lie in (0, 100]");
  if (epochs < 0) fail("epochs must be >= 0");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (!(learning_rate > 0.0)) fail("learning_rate must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) fail("Adam betas must lie in [0, 1)");
  if (noise_sigma < 0.0) fail("noise_sigma must be >= 0");
  switch (task) {
    case TaskKind::CS:
      if (!(cs_ratio > 0.0 && cs_ratio <= 1.0)) fail("cs.ratio must lie in (0, 1]");
      if (cs_block < 1 || height % cs_block || width % cs_block) fail("cs.block must divide height and width");
      break;
    case TaskKind::CASSI:
      if (cassi_bands < 1 || cassi_shift < 1) fail("cassi.bands and cassi.shift must be positive");
      break;
    case TaskKind::SR:
      if (sr_kernel_id < 1 || sr_kernel_id > 12) fail("sr.kernel_id must be in 1..12");
      if (sr_kernel_size < 1 || sr_kernel_size % 2 == 0) fail("sr.kernel_size must be odd");
      if (sr_scale < 1 || height % sr_scale || width % sr_scale) fail("sr.scale must divide height and width");
      break;
  }
  if (phi_learnable && *phi_learnable && task != TaskKind::CS) fail("cs.phi_learnable applies to the cs task only");
  if (phi_is_learnable() && algorithm == Algorithm::Hqs) fail("a learnable sampling matrix requires algorithm = pgd");
  try {
    const DenoiserConfig d = denoiser();
    d.validate();
    const Index m = d.spatial_multiple();
    if (height % m || width % m)
      fail("height and width must be divisible by " + std::to_string(m) + " for this denoiser");
  } catch (const ContractError& e) {
    fail(e.what());
  }
}

RunConfig parse_config(const std::string& text, const std::string& base_dir) {
  RunConfig cfg;
  std::set<std::string> visiting;
  apply_text(cfg, text, base_dir, visiting);
  cfg.validate();
  return cfg;
}

RunConfig load_config(const std::string& path) {
  std::string text;
  try {
    text = read_file(path);
  } catch (const IoError& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  std::set<std::string> visiting{std::filesystem::weakly_canonical(path).string()};
  RunConfig cfg;
  apply_text(cfg, text, std::filesystem::path(path).parent_path().string(), visiting);
  cfg.validate();
  return cfg;
}

std::string to_text(const RunConfig& cfg) {
  std::string out;
  for (const auto& k : keys())
    if (k.get) out += std::string(k.name) + " = " + k.get(cfg) + "\n";
  return out;
}

std::string operator_signature(const RunConfig& c) {
  std::string s = std::string(to_string(c.task)) + ";" + std::to_string(c.height) + "x" + std::to_string(c.width) +
                  ";seed=" + std::to_string(c.seed);
  switch (c.task) {
    case TaskKind::CS:
      s += ";channels=" + std::to_string(c.channels) + ";ratio=" + num(c.cs_ratio) + ";block=" + std::to_string(c.cs_block);
      break;
    case TaskKind::CASSI:
      s += ";bands=" + std::to_string(c.cassi_bands) + ";shift=" + std::to_string(c.cassi_shift);
      break;
    case TaskKind::SR:
      s += ";channels=" + std::to_string(c.channels) + ";kernel=" + std::to_string(c.sr_kernel_id) + "/" +
           std::to_string(c.sr_kernel_size) + ";scale=" + std::to_string(c.sr_scale);
      break;
  }
  return s;
}

std::uint64_t denoiser_digest(const DenoiserConfig& d) { return fnv1a(d.canonical()); }

std::string digest_hex(std::uint64_t digest) {
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(digest));
  return buf;
}

}  // namespace lorun
