#include "gimlab/cli.hpp"

#include <CLI11.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>

namespace fs = std::filesystem;

namespace gimlab::cli {

std::string data_dir(const config::RunConfig& cfg) {
  return (fs::path(cfg.out_root()) / "data" / cfg.data_fingerprint()).string();
}

std::string manifest_path(const config::RunConfig& cfg) {
  return (fs::path(data_dir(cfg)) / "manifest.txt").string();
}

std::string tracer_ckpt_path(const config::RunConfig& cfg) {
  return (fs::path(cfg.out_root()) / "ckpt" / cfg.tracer_fingerprint() / "tracer.ckpt").string();
}

std::string model_ckpt_path(const config::RunConfig& cfg) {
  return (fs::path(cfg.out_root()) / "ckpt" / cfg.model_fingerprint() / "model.ckpt").string();
}

std::string reports_dir(const config::RunConfig& cfg) {
  return (fs::path(cfg.out_root()) / "reports" / cfg.fingerprint()).string();
}

namespace {

synth::DatasetManifest load_verified_manifest(const config::RunConfig& cfg) {
  std::string path = manifest_path(cfg);
  if (!fs::exists(path))
    throw config::ConfigError("manifest not found at " + path + "; run gen-data first");
  synth::DatasetManifest m = synth::DatasetManifest::load(path);
  if (m.fingerprint != cfg.data_fingerprint())
    throw config::ConfigError("manifest fingerprint mismatch at " + path);
  return m;
}

}  // namespace

std::string cmd_gen_data(const config::RunConfig& cfg) {
  std::string dir = data_dir(cfg);
  std::string mpath = manifest_path(cfg);
  if (fs::exists(mpath)) {
    synth::DatasetManifest existing = synth::DatasetManifest::load(mpath);
    if (existing.fingerprint == cfg.data_fingerprint()) return mpath;  // no-op rerun
    throw config::ConfigError("gen-data: output exists with a different fingerprint: " + mpath);
  }
  synth::build_dataset(cfg.datagen(), dir);
  return mpath;
}

std::string cmd_train_tracer(const config::RunConfig& cfg) {
  synth::DatasetManifest manifest = load_verified_manifest(cfg);
  tracer::TracerConfig tcfg = cfg.tracer_cfg();
  std::string ckpt = tracer_ckpt_path(cfg);
  std::string fp = cfg.tracer_fingerprint();
  if (fs::exists(ckpt)) {
    tracer::ShadowTracer existing(tcfg);
    std::string stored = existing.load(ckpt);  // throws on arch mismatch
    if (stored != fp)
      throw config::ConfigError("train-tracer: checkpoint at " + ckpt +
                                " carries a different config fingerprint");
    return ckpt;
  }
  fs::create_directories(fs::path(ckpt).parent_path());
  tracer::ShadowTracer net(tcfg);
  std::ofstream log((fs::path(ckpt).parent_path() / "loss_curve.txt").string());
  tracer::TracerTrainStats stats = tracer::train_tracer(net, manifest, cfg.train_subsets(), tcfg,
                                                        &log);
  log << "final_train_loss " << stats.final_train_loss << "\n";
  log << "val_loss " << stats.val_loss << "\n";
  log << "zero_predictor_val_loss " << stats.zero_predictor_val_loss << "\n";
  net.save(ckpt, fp);
  return ckpt;
}

std::string cmd_train_model(const config::RunConfig& cfg) {
  synth::DatasetManifest manifest = load_verified_manifest(cfg);
  model::ModelConfig mcfg = cfg.model_cfg();
  std::string ckpt = model_ckpt_path(cfg);
  std::string fp = cfg.model_fingerprint();
  if (fs::exists(ckpt)) {
    model::GimFormer existing(mcfg);
    std::string stored = existing.load(ckpt);
    if (stored != fp)
      throw config::ConfigError("train-model: checkpoint at " + ckpt +
                                " carries a different config fingerprint");
    return ckpt;
  }

  std::unique_ptr<tracer::ShadowTracer> tr;
  if (mcfg.use_tracer) {
    std::string tpath = tracer_ckpt_path(cfg);
    if (!fs::exists(tpath))
      throw config::ConfigError("train-model: tracer checkpoint missing at " + tpath +
                                "; run train-tracer first (or ablate the tracer)");
    tr = std::make_unique<tracer::ShadowTracer>(cfg.tracer_cfg());
    tr->load(tpath);
  }
  fs::create_directories(fs::path(ckpt).parent_path());
  model::GimFormer net(mcfg);
  std::ofstream log((fs::path(ckpt).parent_path() / "train_log.txt").string());
  model::train_model(net, tr.get(), manifest, cfg.train_subsets(), &log);
  net.save(ckpt, fp);
  return ckpt;
}

std::vector<std::string> cmd_train_ladder(const config::RunConfig& cfg) {
  // Variant ladder: baseline, +tracer, +tracer+mwam, full.
  const std::vector<std::string> ablates = {"fsb,mwam,tracer", "fsb,mwam", "fsb", ""};
  std::vector<std::string> paths;
  for (const auto& ab : ablates) {
    config::RunConfig variant = cfg;
    variant.set("model.ablate", ab);
    paths.push_back(cmd_train_model(variant));
  }
  return paths;
}

std::string cmd_eval(const config::RunConfig& cfg, const std::string& tracer_ckpt_override,
                     const std::string& model_ckpt_override) {
  synth::DatasetManifest manifest = load_verified_manifest(cfg);
  model::ModelConfig mcfg = cfg.model_cfg();

  std::string mpath = model_ckpt_override.empty() ? model_ckpt_path(cfg) : model_ckpt_override;
  if (!fs::exists(mpath))
    throw config::ConfigError("eval: model checkpoint missing at " + mpath);
  model::GimFormer net(mcfg);
  net.load(mpath);

  std::unique_ptr<tracer::ShadowTracer> tr;
  if (mcfg.use_tracer) {
    std::string tpath = tracer_ckpt_override.empty() ? tracer_ckpt_path(cfg) : tracer_ckpt_override;
    if (!fs::exists(tpath))
      throw config::ConfigError("eval: tracer checkpoint missing at " + tpath);
    tr = std::make_unique<tracer::ShadowTracer>(cfg.tracer_cfg());
    tr->load(tpath);
  }

  int batch = static_cast<int>(cfg.get_int("eval.batch"));
  bool detect_from_map = cfg.get_bool("eval.detect_from_map");
  model::ModelScorer scorer(net, tr.get(), batch);
  bench::ScoreFn fn = [&](const std::vector<Image>& imgs) {
    auto res = scorer.score(imgs);
    std::vector<bench::Prediction> preds(res.size());
    for (size_t i = 0; i < res.size(); ++i) {
      double logit = res[i].label_logit;
      if (detect_from_map) {
        double p = std::clamp(bench::max_map_statistic(res[i].mask_probs), 1e-9, 1.0 - 1e-9);
        logit = std::log(p / (1.0 - p));
      }
      preds[i] = {std::move(res[i].mask_probs), logit};
    }
    return preds;
  };

  bench::Setting setting = cfg.get("eval.setting") == "mix" ? bench::Setting::Mix
                                                            : bench::Setting::Cross;
  double threshold = cfg.get_double("eval.threshold");
  bench::EvalReport report =
      bench::run_setting(fn, manifest, setting, threshold, batch, cfg.seed(), cfg.fingerprint());
  if (cfg.get_bool("eval.robustness"))
    report.robustness = bench::robustness_sweep(fn, manifest, cfg.get("eval.robustness_subset"),
                                                threshold, batch);
  std::string dir = reports_dir(cfg);
  fs::create_directories(dir);
  std::string base = (fs::path(dir) / ("report_" + report.setting)).string();
  report.save_records(base + ".jsonl");
  std::ofstream txt(base + ".txt");
  txt << report.table();
  std::cout << report.table();
  return base + ".jsonl";
}

bench::ScaleReport cmd_scale_sweep(const config::RunConfig& cfg, const std::vector<int>& sizes) {
  bench::ScaleSweepOptions opt;
  opt.sizes = sizes;
  opt.datagen = cfg.datagen();
  opt.tracer_cfg = cfg.tracer_cfg();
  opt.model_cfg = cfg.model_cfg();
  opt.work_dir = (fs::path(cfg.out_root()) / "scale" / cfg.fingerprint()).string();
  bench::ScaleReport report = bench::run_scale_sweep(opt);
  std::string dir = reports_dir(cfg);
  fs::create_directories(dir);
  report.save_records((fs::path(dir) / "scale_sweep.jsonl").string());
  std::ofstream txt((fs::path(dir) / "scale_sweep.txt").string());
  txt << report.table();
  std::cout << report.table();
  return report;
}

// ----------------------------------------------------------------- front end

namespace {

struct CommonOpts {
  std::string config_path;
  std::vector<std::string> sets;
  int64_t seed = -1;
  std::string out;
};

void add_common(CLI::App* sub, CommonOpts& o) {
  sub->add_option("--config", o.config_path, "configuration file (key = value lines)");
  sub->add_option("--set", o.sets, "override a config key, e.g. --set model.epochs=2");
  sub->add_option("--seed", o.seed, "global seed override");
  sub->add_option("--out", o.out, "output root override");
}

config::RunConfig build_config(const CommonOpts& o) {
  config::RunConfig cfg =
      o.config_path.empty() ? config::RunConfig() : config::RunConfig::from_file(o.config_path);
  for (const auto& kv : o.sets) cfg.set_kv(kv);
  if (o.seed >= 0) cfg.set("seed", std::to_string(o.seed));
  if (!o.out.empty()) cfg.set("out_root", o.out);
  return cfg;
}

}  // namespace

int run(int argc, char** argv) {
  CLI::App app{"gimlab: synthetic generative-manipulation localization benchmark"};
  app.require_subcommand(1);

  CommonOpts gen_o, tt_o, tm_o, ev_o, rp_o;
  auto* gen = app.add_subcommand("gen-data", "generate the synthetic dataset");
  add_common(gen, gen_o);

  auto* tt = app.add_subcommand("train-tracer", "train the trace regressor");
  add_common(tt, tt_o);

  auto* tm = app.add_subcommand("train-model", "train the detector/localizer");
  add_common(tm, tm_o);
  std::string ablate;
  bool ladder = false, finetune = false;
  tm->add_option("--ablate", ablate, "comma list of {fsb,mwam,tracer} to remove");
  tm->add_flag("--ladder", ladder, "train the 4-variant ablation ladder");
  tm->add_flag("--finetune-tracer", finetune, "do not freeze the tracer during training");

  auto* ev = app.add_subcommand("eval", "evaluate a trained model");
  add_common(ev, ev_o);
  std::string setting, tracer_ckpt, model_ckpt;
  bool robustness = false;
  ev->add_option("--setting", setting, "mix or cross");
  ev->add_flag("--robustness", robustness, "add the 8-cell distortion sweep");
  ev->add_option("--tracer-ckpt", tracer_ckpt, "explicit tracer checkpoint path");
  ev->add_option("--model-ckpt", model_ckpt, "explicit model checkpoint path");

  auto* rp = app.add_subcommand("report", "print stored reports or run sweeps");
  add_common(rp, rp_o);
  std::string from_dir, sizes_csv;
  rp->add_option("--from", from_dir, "directory containing report .jsonl files");
  rp->add_option("--scale-sweep", sizes_csv, "run the dataset-scale sweep at these sizes (csv)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed()) {
      std::cout << cmd_gen_data(build_config(gen_o)) << "\n";
    } else if (tt->parsed()) {
      std::cout << cmd_train_tracer(build_config(tt_o)) << "\n";
    } else if (tm->parsed()) {
      config::RunConfig cfg = build_config(tm_o);
      if (!ablate.empty()) cfg.set("model.ablate", ablate);
      if (finetune) cfg.set("model.finetune_tracer", "true");
      if (ladder) {
        for (const auto& p : cmd_train_ladder(cfg)) std::cout << p << "\n";
      } else {
        std::cout << cmd_train_model(cfg) << "\n";
      }
    } else if (ev->parsed()) {
      config::RunConfig cfg = build_config(ev_o);
      if (!setting.empty()) cfg.set("eval.setting", setting);
      if (robustness) cfg.set("eval.robustness", "true");
      std::cout << cmd_eval(cfg, tracer_ckpt, model_ckpt) << "\n";
    } else if (rp->parsed()) {
      config::RunConfig cfg = build_config(rp_o);
      if (!sizes_csv.empty()) {
        std::vector<int> sizes;
        std::stringstream ss(sizes_csv);
        std::string tok;
        while (std::getline(ss, tok, ',')) sizes.push_back(std::stoi(tok));
        cmd_scale_sweep(cfg, sizes);
      } else {
        std::string dir = from_dir.empty() ? reports_dir(cfg) : from_dir;
        bool found = false;
        if (fs::exists(dir))
          for (const auto& entry : fs::directory_iterator(dir))
            if (entry.path().extension() == ".jsonl" &&
                entry.path().filename().string().rfind("report_", 0) == 0) {
              std::cout << bench::EvalReport::load_records(entry.path().string()).table() << "\n";
              found = true;
            }
        if (!found) {
          std::cerr << "no reports found under " << dir << "\n";
          return 2;
        }
      }
    }
  } catch (const config::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}

}  // namespace gimlab::cli
