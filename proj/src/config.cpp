#include "gimlab/config.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "gimlab/rng.hpp"

namespace gimlab::config {

namespace {

const std::map<std::string, std::string>& defaults() {
  static const std::map<std::string, std::string> kv = {
      {"seed", "0"},
      {"out_root", "out"},
      {"datagen.train_per_family", "300"},
      {"datagen.test_per_family", "100"},
      {"datagen.cross_test", "100"},
      {"datagen.image_size", "64"},
      {"datagen.coverage_min", "0.05"},
      {"datagen.coverage_max", "0.5"},
      {"datagen.degrade", "true"},
      {"tracer.layers", "15"},
      {"tracer.hidden", "32"},
      {"tracer.patch", "64"},
      {"tracer.iters", "1500"},
      {"tracer.batch", "8"},
      {"tracer.lr", "0.001"},
      {"tracer.val_fraction", "0.1"},
      {"model.widths", "32,64,160,256"},
      {"model.depths", "2,2,2,2"},
      {"model.heads", "1,2,5,8"},
      {"model.sr_ratios", "8,4,2,1"},
      {"model.decoder_dim", "64"},
      {"model.epochs", "5"},
      {"model.batch", "4"},
      {"model.lr", "6e-5"},
      {"model.weight_decay", "0.01"},
      {"model.adam_eps", "1e-8"},
      {"model.poly_power", "0.9"},
      {"model.augment", "true"},
      {"model.ablate", ""},
      {"model.finetune_tracer", "false"},
      {"eval.setting", "mix"},
      {"eval.threshold", "0.5"},
      {"eval.robustness", "false"},
      {"eval.robustness_subset", "SD-like"},
      {"eval.detect_from_map", "false"},
      {"eval.batch", "16"},
  };
  return kv;
}

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

std::string hash_hex(const std::string& text) {
  uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace

RunConfig::RunConfig() : kv_(defaults()) {}

RunConfig RunConfig::from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path);
  RunConfig cfg;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string s = trim(line);
    if (s.empty() || s[0] == '#') continue;
    auto eq = s.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config: malformed line " + std::to_string(lineno) + " in " + path);
    cfg.set(trim(s.substr(0, eq)), trim(s.substr(eq + 1)));
  }
  return cfg;
}

void RunConfig::set(const std::string& key, const std::string& value) {
  auto it = kv_.find(key);
  if (it == kv_.end()) throw ConfigError("config: unknown key '" + key + "'");
  it->second = value;
}

void RunConfig::set_kv(const std::string& assignment) {
  auto eq = assignment.find('=');
  if (eq == std::string::npos)
    throw ConfigError("config: expected key=value, got '" + assignment + "'");
  set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

const std::string& RunConfig::get(const std::string& key) const {
  auto it = kv_.find(key);
  if (it == kv_.end()) throw ConfigError("config: unknown key '" + key + "'");
  return it->second;
}

int64_t RunConfig::get_int(const std::string& key) const {
  try {
    return std::stoll(get(key));
  } catch (const std::exception&) {
    throw ConfigError("config: key '" + key + "' is not an integer: " + get(key));
  }
}

double RunConfig::get_double(const std::string& key) const {
  try {
    return std::stod(get(key));
  } catch (const std::exception&) {
    throw ConfigError("config: key '" + key + "' is not a number: " + get(key));
  }
}

bool RunConfig::get_bool(const std::string& key) const {
  const std::string& v = get(key);
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("config: key '" + key + "' is not a boolean: " + v);
}

std::vector<int> RunConfig::get_int_list(const std::string& key) const {
  std::vector<int> out;
  std::stringstream ss(get(key));
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    tok = trim(tok);
    if (tok.empty()) continue;
    try {
      out.push_back(std::stoi(tok));
    } catch (const std::exception&) {
      throw ConfigError("config: key '" + key + "' has a non-integer element: " + tok);
    }
  }
  return out;
}

std::string RunConfig::canonical() const {
  std::ostringstream os;
  for (const auto& [k, v] : kv_) os << k << "=" << v << "\n";
  return os.str();
}

std::string RunConfig::fingerprint() const { return hash_hex(canonical()); }

std::string RunConfig::fingerprint_for(const std::vector<std::string>& prefixes) const {
  std::ostringstream os;
  for (const auto& [k, v] : kv_) {
    bool keep = k == "seed";
    for (const auto& p : prefixes)
      if (k.rfind(p, 0) == 0) keep = true;
    if (keep) os << k << "=" << v << "\n";
  }
  return hash_hex(os.str());
}

std::string RunConfig::data_fingerprint() const { return fingerprint_for({"datagen."}); }

std::string RunConfig::tracer_fingerprint() const {
  RunConfig pruned = *this;
  // the setting decides which subsets the tracer trains on
  return hash_hex(pruned.fingerprint_for({"datagen.", "tracer."}) + "/" + get("eval.setting"));
}

std::string RunConfig::model_fingerprint() const {
  return hash_hex(fingerprint_for({"datagen.", "tracer.", "model."}) + "/" + get("eval.setting"));
}

std::string RunConfig::out_root() const {
  if (const char* env = std::getenv("GIMLAB_OUT"); env && *env) return env;
  return get("out_root");
}

synth::DatagenConfig RunConfig::datagen() const {
  synth::DatagenConfig d;
  d.train_per_family = static_cast<int>(get_int("datagen.train_per_family"));
  d.test_per_family = static_cast<int>(get_int("datagen.test_per_family"));
  d.cross_test = static_cast<int>(get_int("datagen.cross_test"));
  d.image_size = static_cast<int>(get_int("datagen.image_size"));
  d.coverage_min = get_double("datagen.coverage_min");
  d.coverage_max = get_double("datagen.coverage_max");
  d.degrade = get_bool("datagen.degrade");
  d.seed = seed();
  d.fingerprint = data_fingerprint();
  return d;
}

tracer::TracerConfig RunConfig::tracer_cfg() const {
  tracer::TracerConfig t;
  t.layers = static_cast<int>(get_int("tracer.layers"));
  t.hidden = static_cast<int>(get_int("tracer.hidden"));
  t.patch = static_cast<int>(get_int("tracer.patch"));
  t.iters = static_cast<int>(get_int("tracer.iters"));
  t.batch = static_cast<int>(get_int("tracer.batch"));
  t.lr = get_double("tracer.lr");
  t.val_fraction = get_double("tracer.val_fraction");
  t.seed = seed();
  return t;
}

model::ModelConfig RunConfig::model_cfg() const {
  model::ModelConfig m;
  m.image_size = static_cast<int>(get_int("datagen.image_size"));
  m.widths = get_int_list("model.widths");
  m.depths = get_int_list("model.depths");
  m.heads = get_int_list("model.heads");
  m.sr_ratios = get_int_list("model.sr_ratios");
  m.decoder_dim = static_cast<int>(get_int("model.decoder_dim"));
  m.epochs = static_cast<int>(get_int("model.epochs"));
  m.batch = static_cast<int>(get_int("model.batch"));
  m.lr = get_double("model.lr");
  m.weight_decay = get_double("model.weight_decay");
  m.adam_eps = get_double("model.adam_eps");
  m.poly_power = get_double("model.poly_power");
  m.augment = get_bool("model.augment");
  m.finetune_tracer = get_bool("model.finetune_tracer");
  m.seed = seed();
  std::stringstream ss(get("model.ablate"));
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    tok = trim(tok);
    if (tok.empty()) continue;
    if (tok == "fsb") m.use_fsb = false;
    else if (tok == "mwam") m.use_mwam = false;
    else if (tok == "tracer") m.use_tracer = false;
    else throw ConfigError("config: unknown ablation '" + tok + "'");
  }
  return m;
}

std::vector<std::string> RunConfig::train_subsets() const {
  const std::string& setting = get("eval.setting");
  using synth::Family;
  if (setting == "mix")
    return {synth::family_subset_tag(Family::RepaintNoise),
            synth::family_subset_tag(Family::TextureResynth),
            synth::family_subset_tag(Family::SmoothRemoval)};
  if (setting == "cross") return {synth::family_subset_tag(Family::RepaintNoise)};
  throw ConfigError("config: eval.setting must be 'mix' or 'cross', got '" + setting + "'");
}

}  // namespace gimlab::config
