#pragma once

#include <filesystem>
#include <string>

#include "gimlab/synthgen.hpp"

namespace testutil {

/// Small on-disk dataset shared by training-path tests. Built once per
/// process into a temp directory keyed by the parameters.
inline gimlab::synth::DatasetManifest tiny_dataset(const std::string& tag, int train_per_family,
                                                   int test_per_family, uint64_t seed = 3,
                                                   bool degrade = true) {
  namespace fs = std::filesystem;
  gimlab::synth::DatagenConfig cfg;
  cfg.train_per_family = train_per_family;
  cfg.test_per_family = test_per_family;
  cfg.cross_test = test_per_family;
  cfg.image_size = 64;
  cfg.seed = seed;
  cfg.degrade = degrade;
  cfg.fingerprint = "fixture-" + tag;
  std::string dir = (fs::temp_directory_path() / ("gimlab_fixture_" + tag)).string();
  std::string manifest = (fs::path(dir) / "manifest.txt").string();
  if (fs::exists(manifest)) {
    auto m = gimlab::synth::DatasetManifest::load(manifest);
    if (m.fingerprint == cfg.fingerprint) return m;
    fs::remove_all(dir);
  }
  return gimlab::synth::build_dataset(cfg, dir);
}

}  // namespace testutil
