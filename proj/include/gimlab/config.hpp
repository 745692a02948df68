#pragma once

#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "gimlab/gimformer.hpp"
#include "gimlab/synthgen.hpp"
#include "gimlab/tracer.hpp"

namespace gimlab::config {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Flat key=value run configuration. Every key has a default; unknown keys
/// are rejected. Fingerprints are stable hashes over canonicalized subsets
/// of the keys and stamp every artifact the pipeline produces.
class RunConfig {
 public:
  RunConfig();
  static RunConfig from_file(const std::string& path);

  void set(const std::string& key, const std::string& value);
  void set_kv(const std::string& assignment);  // "key=value"
  const std::string& get(const std::string& key) const;
  int64_t get_int(const std::string& key) const;
  double get_double(const std::string& key) const;
  bool get_bool(const std::string& key) const;
  std::vector<int> get_int_list(const std::string& key) const;

  std::string canonical() const;
  std::string fingerprint() const;  // over all keys
  std::string fingerprint_for(const std::vector<std::string>& prefixes) const;

  std::string data_fingerprint() const;
  std::string tracer_fingerprint() const;
  std::string model_fingerprint() const;

  /// Output root; the GIMLAB_OUT environment variable overrides the config.
  std::string out_root() const;

  uint64_t seed() const { return static_cast<uint64_t>(get_int("seed")); }
  synth::DatagenConfig datagen() const;
  tracer::TracerConfig tracer_cfg() const;
  model::ModelConfig model_cfg() const;
  /// Training subsets implied by eval.setting (all families for mix, the
  /// SD-like family only for cross).
  std::vector<std::string> train_subsets() const;

  const std::map<std::string, std::string>& items() const { return kv_; }

 private:
  std::map<std::string, std::string> kv_;
};

}  // namespace gimlab::config
