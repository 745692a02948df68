#pragma once

#include <string>
#include <vector>

#include "gimlab/bench.hpp"
#include "gimlab/config.hpp"

namespace gimlab::cli {

/// Subcommand entry points; each returns the primary artifact path. They are
/// plain functions so tests can drive them without spawning processes.
std::string cmd_gen_data(const config::RunConfig& cfg);
std::string cmd_train_tracer(const config::RunConfig& cfg);
std::string cmd_train_model(const config::RunConfig& cfg);
/// Trains the 4-variant ladder (baseline, +tracer, +tracer+mwam, full);
/// returns the checkpoint paths in that order.
std::vector<std::string> cmd_train_ladder(const config::RunConfig& cfg);
std::string cmd_eval(const config::RunConfig& cfg, const std::string& tracer_ckpt_override = "",
                     const std::string& model_ckpt_override = "");
bench::ScaleReport cmd_scale_sweep(const config::RunConfig& cfg, const std::vector<int>& sizes);

// artifact locations implied by a config
std::string data_dir(const config::RunConfig& cfg);
std::string manifest_path(const config::RunConfig& cfg);
std::string tracer_ckpt_path(const config::RunConfig& cfg);
std::string model_ckpt_path(const config::RunConfig& cfg);
std::string reports_dir(const config::RunConfig& cfg);

/// Full CLI with subcommands gen-data / train-tracer / train-model / eval /
/// report. Exit codes: 0 success, 2 config error, 3 numerical failure.
int run(int argc, char** argv);

}  // namespace gimlab::cli
