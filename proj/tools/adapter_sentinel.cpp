// SPDX-License-Identifier: Apache-2.0
//
// Batch front-end for the adapter forensics pipeline:
//   pretrain | forge | transform-cache | train-detector | eval | cross-eval |
//   attack | mitigate | report
// Every command reads one JSON config, writes its outputs plus a run.json
// under --out, and is reproducible from that run.json alone.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "sentinel/attacks.hpp"
#include "sentinel/detector.hpp"
#include "sentinel/errors.hpp"
#include "sentinel/forge.hpp"
#include "sentinel/mitigation.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace sentinel;

namespace {

constexpr const char* kVersion = "0.1.0";

int exit_code_for(const Error& e) {
  switch (e.kind()) {
    case ErrorKind::Io:
    case ErrorKind::Format:
      return 4;
    case ErrorKind::Numeric:
      return 3;
    default:
      return 2;
  }
}

json load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::Io, "cannot open config: " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    fail(ErrorKind::Config, std::string("config parse error: ") + e.what());
  }
  return j;
}

struct RunContext {
  std::string command;
  json config;
  fs::path out;
  uint64_t seed = 0;
  int jobs = 1;
  std::chrono::steady_clock::time_point started = std::chrono::steady_clock::now();

  void finish(const json& extra = json::object()) const {
    json run;
    run["command"] = command;
    run["config"] = config;
    run["seed"] = seed;
    run["jobs"] = jobs;
    run["out"] = out.string();
    run["version"] = kVersion;
    run["wall_time_s"] =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    run["outputs"] = extra;
    std::ofstream f(out / "run.json", std::ios::trunc);
    if (!f) fail(ErrorKind::Io, "cannot write run.json under " + out.string());
    f << run.dump(2) << "\n";
  }
};

void write_metrics_csv(const fs::path& path, const std::string& run_id, const std::string& split,
                       const EvalResult& r) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(ErrorKind::Io, "cannot write " + path.string());
  out << "run,split,da,auc\n";
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%s,%s,%.6f,%.6f\n", run_id.c_str(), split.c_str(), r.da, r.auc);
  out << buf;
}

void write_roc_csv(const fs::path& path, const EvalResult& r) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(ErrorKind::Io, "cannot write " + path.string());
  out << "fpr,tpr,threshold\n";
  char buf[128];
  for (const auto& p : r.roc) {
    std::snprintf(buf, sizeof(buf), "%.6f,%.6f,%.6f\n", p.fpr, p.tpr, p.threshold);
    out << buf;
  }
}

ToyTask task_from_manifest(const BenchmarkManifest& m) {
  ToyTask t;
  t.vocab_size = m.task.at("vocab_size").get<int64_t>();
  t.seq_len = m.task.at("seq_len").get<int64_t>();
  t.num_classes = m.task.at("num_classes").get<int>();
  t.rule = m.task.at("rule").get<std::string>();
  t.gen_seed = m.task.at("gen_seed").get<uint64_t>();
  t.marker_count = m.task.at("marker_count").get<int>();
  return t;
}

TriggerSpec trigger_from_manifest(const BenchmarkManifest& m, const std::string& kind) {
  for (const auto& jt : m.config.at("triggers")) {
    if (jt.at("kind").get<std::string>() == kind || kind.empty()) {
      TriggerSpec s;
      s.kind = trigger_kind_from_name(jt.at("kind").get<std::string>());
      s.target_label = jt.at("target_label").get<int>();
      s.poison_rate = jt.at("poison_rate").get<double>();
      s.phrase_len = jt.value("phrase_len", 5);
      return s;
    }
  }
  fail(ErrorKind::Config, "trigger kind '" + kind + "' not present in manifest");
}

int cmd_pretrain(RunContext& ctx) {
  ForgeConfig cfg = forge_config_from_json(ctx.config);
  if (ctx.seed) cfg.master_seed = ctx.seed;
  PretrainResult r = pretrain_base(cfg.model, cfg.task, cfg.train_pool, cfg.test_pool,
                                   cfg.pretrain, Rng(cfg.master_seed).fork(1).seed());
  save_base_model(ctx.out / "base.bin", r.model);
  std::cout << "pretrained base: test CA " << r.test_ca << " after " << r.epochs_run
            << " epochs\n";
  ctx.finish({{"base", "base.bin"}, {"test_ca", r.test_ca}});
  return 0;
}

int cmd_forge(RunContext& ctx, bool resume) {
  ForgeConfig cfg = forge_config_from_json(ctx.config);
  if (ctx.seed) cfg.master_seed = ctx.seed;
  if (ctx.jobs > 1) cfg.jobs = ctx.jobs;
  BenchmarkManifest m = forge_benchmark(cfg, ctx.out, resume);
  std::cout << "forged " << m.entries.size() << " adapters under " << ctx.out << "\n";
  ctx.finish({{"manifest", "manifest.json"}, {"adapters", m.entries.size()}});
  return 0;
}

int cmd_transform_cache(RunContext& ctx) {
  const std::string mpath = ctx.config.at("manifest").get<std::string>();
  BenchmarkManifest m = load_manifest(mpath);
  fs::path cache_dir = ctx.out / "features";
  if (const char* env = std::getenv("ADAPTER_SENTINEL_CACHE")) cache_dir = fs::path(env);
  fs::create_directories(cache_dir);
  size_t written = 0;
  for (const auto& e : m.entries) {
    AdapterBundle b = load_bundle(m.resolve(e.path));
    FeatureTensor f = transform(b);
    Container c;
    c.meta["kind"] = "feature-tensor";
    c.meta["label"] = e.label;
    c.meta["source"] = e.path;
    c.tensors.push_back({"features", f.data});
    fs::path out = cache_dir / (fs::path(e.path).stem().string() + ".feat.bin");
    save_container(out, c);
    ++written;
  }
  std::cout << "cached " << written << " feature tensors under " << cache_dir << "\n";
  ctx.finish({{"cache_dir", cache_dir.string()}, {"count", written}});
  return 0;
}

int cmd_train_detector(RunContext& ctx) {
  const std::string mpath = ctx.config.at("manifest").get<std::string>();
  BenchmarkManifest m = load_manifest(mpath);
  DetectorConfig dc = ctx.config.contains("detector")
                          ? DetectorConfig::from_json(ctx.config["detector"])
                          : DetectorConfig{};
  const uint64_t seed = ctx.seed ? ctx.seed : ctx.config.value("seed", 7u);
  DetectorModel model = train_detector(dc, m, seed);
  save_detector(ctx.out / "detector.bin", model);
  {
    std::ofstream log(ctx.out / "training_log.csv", std::ios::trunc);
    log << "epoch,train_loss,val_da,val_loss\n";
    char buf[160];
    for (const auto& row : model.training_log) {
      std::snprintf(buf, sizeof(buf), "%d,%.6f,%.6f,%.6f\n", row.at("epoch").get<int>(),
                    row.at("train_loss").get<double>(), row.at("val_da").get<double>(),
                    row.at("val_loss").get<double>());
      log << buf;
    }
  }
  std::cout << "trained detector -> " << (ctx.out / "detector.bin") << "\n";
  ctx.finish({{"detector", "detector.bin"}});
  return 0;
}

int cmd_eval(RunContext& ctx, bool cross) {
  const std::string mpath = ctx.config.at("manifest").get<std::string>();
  BenchmarkManifest m = load_manifest(mpath);
  DetectorModel model = load_detector(ctx.config.at("detector").get<std::string>());
  const std::string split = ctx.config.value("split", std::string("test"));
  if (m.split_entries(split).empty())
    fail(ErrorKind::Config, "manifest has no '" + split + "' adapters to evaluate");
  EvalResult r = cross ? cross_evaluate(model, m, split) : evaluate(model, m, split);
  const std::string run_id = ctx.config.value("run_id", std::string(cross ? "cross" : "eval"));
  write_metrics_csv(ctx.out / "metrics.csv", run_id, split, r);
  write_roc_csv(ctx.out / "roc.csv", r);
  std::cout << run_id << ": split=" << split << " DA=" << r.da << " AUC=" << r.auc << "\n";
  ctx.finish({{"metrics", "metrics.csv"}, {"da", r.da}, {"auc", r.auc}});
  return 0;
}

AttackConfig attack_from_json(const json& j) {
  AttackConfig a;
  a.kind = attack_kind_from_name(j.at("kind").get<std::string>());
  a.scale = j.value("scale", 1.0);
  a.parameter_ratio = j.value("parameter_ratio", 0.2);
  a.epsilon = j.value("epsilon", 0.05);
  a.alpha = j.value("alpha", a.epsilon / 10.0);
  a.iters = j.value("iters", 20);
  a.cw_c = j.value("c", 1e-4);
  a.cw_kappa = j.value("kappa", 0.0);
  a.cw_iters = j.value("iter", 20);
  a.cw_lr = j.value("lr", 1e-5);
  return a;
}

int cmd_attack(RunContext& ctx) {
  BenchmarkManifest m = load_manifest(ctx.config.at("manifest").get<std::string>());
  DetectorModel surrogate = load_detector(ctx.config.at("surrogate").get<std::string>());
  DetectorModel target = load_detector(ctx.config.at("target").get<std::string>());
  BaseModel base = load_base_model(m.resolve(m.base_model));
  std::vector<AttackConfig> configs;
  for (const auto& ja : ctx.config.at("attacks")) configs.push_back(attack_from_json(ja));
  const uint64_t seed = ctx.seed ? ctx.seed : ctx.config.value("seed", 11u);
  AttackReport r = run_campaign(m, surrogate, target, base, configs, seed);
  write_campaign_csv(ctx.out / "attack_report.csv", r);
  for (const auto& row : r.rows)
    std::cout << row.attack << " [" << row.params << "] detector_asr=" << row.detector_asr
              << " ca=" << row.ca_under_attack << " asr=" << row.asr_under_attack << "\n";
  ctx.finish({{"report", "attack_report.csv"}, {"rows", r.rows.size()}});
  return 0;
}

int cmd_mitigate(RunContext& ctx) {
  BenchmarkManifest m = load_manifest(ctx.config.at("manifest").get<std::string>());
  BaseModel base = load_base_model(m.resolve(m.base_model));
  const ToyTask task = task_from_manifest(m);
  const Dataset train_pool = load_dataset(m.root / "task_train.bin");
  const Dataset test_pool = load_dataset(m.root / "task_test.bin");

  // target adapter: explicit path, or the first backdoored test entry
  std::string apath = ctx.config.value("adapter", std::string());
  std::string trigger_kind;
  if (apath.empty()) {
    for (const auto* e : m.split_entries("test"))
      if (e->label == 1) {
        apath = e->path;
        trigger_kind = e->trigger;
        break;
      }
  }
  if (apath.empty()) fail(ErrorKind::Config, "no backdoored adapter available to mitigate");
  AdapterBundle bundle = load_bundle(m.resolve(apath));
  const TriggerSpec spec = trigger_from_manifest(m, trigger_kind);

  const double clean_fraction = ctx.config.value("clean_fraction", 0.1);
  const uint64_t seed = ctx.seed ? ctx.seed : ctx.config.value("seed", 13u);
  MitigationHyper hyper;
  if (ctx.config.contains("hyper")) {
    hyper.epochs = ctx.config["hyper"].value("epochs", hyper.epochs);
    hyper.batch = ctx.config["hyper"].value("batch", hyper.batch);
    hyper.lr = ctx.config["hyper"].value("lr", hyper.lr);
  }
  const double rho = ctx.config.value("rho", 0.5);

  // defender's clean budget: a small slice of the training pool
  Rng rng(Rng(seed).fork(55).seed());
  const auto n_clean = static_cast<size_t>(
      std::max<int64_t>(hyper.batch, std::llround(clean_fraction * static_cast<double>(train_pool.size()))));
  std::vector<size_t> pick =
      rng.sample_without_replacement(static_cast<size_t>(train_pool.size()), n_clean);
  std::sort(pick.begin(), pick.end());
  Dataset clean;
  clean.tokens = Tensor(Shape{static_cast<int64_t>(pick.size()), task.seq_len});
  clean.labels.resize(pick.size());
  for (size_t i = 0; i < pick.size(); ++i) {
    clean.set_row(static_cast<int64_t>(i), train_pool.row(static_cast<int64_t>(pick[i])));
    clean.labels[i] = train_pool.labels[pick[i]];
  }

  std::vector<MitigationRow> rows;
  auto add = [&rows](const MitigationOutcome& o) {
    rows.push_back({o.method, o.rho, o.before.asr, o.after.asr, o.before.ca, o.after.ca});
  };
  add(sft_cleanse(base, bundle, clean, task, spec, test_pool, hyper, seed));
  add(fine_mix(base, bundle, rho, clean, task, spec, test_pool, hyper, seed));
  write_mitigation_csv(ctx.out / "mitigation.csv", rows,
                       "fine_mix shrinks the adapter-level effective delta, then SFTs");
  for (const auto& r : rows)
    std::cout << r.method << " rho=" << r.rho << ": ASR " << r.asr_before << " -> " << r.asr_after
              << ", CA " << r.ca_before << " -> " << r.ca_after << "\n";
  ctx.finish({{"report", "mitigation.csv"}, {"adapter", apath}});
  return 0;
}

int cmd_report(RunContext& ctx) {
  // aggregate CSVs from prior run directories into paper-style tables
  std::vector<std::string> runs = ctx.config.at("runs").get<std::vector<std::string>>();
  std::ofstream detect(ctx.out / "detection_table.csv", std::ios::trunc);
  detect << "run,split,da,auc\n";
  std::ofstream transfer(ctx.out / "transfer_table.csv", std::ios::trunc);
  transfer << "run,split,da,auc\n";
  std::ofstream attack(ctx.out / "attack_table.csv", std::ios::trunc);
  attack << "attack,params,ca_under_attack,asr_under_attack,detector_asr\n";
  std::ofstream mitigation(ctx.out / "mitigation_table.csv", std::ios::trunc);
  mitigation << "method,rho,asr_before,asr_after,ca_before,ca_after\n";
  for (const auto& dir : runs) {
    const fs::path root(dir);
    auto append_rows = [](const fs::path& src, std::ofstream& dst) {
      std::ifstream in(src);
      if (!in) return;
      std::string line;
      bool first = true;
      while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        if (first) {
          first = false;
          continue;  // skip per-file header
        }
        dst << line << "\n";
      }
    };
    // eval runs vs cross-eval runs are distinguished by their run id prefix
    if (fs::exists(root / "metrics.csv")) {
      std::ifstream in(root / "metrics.csv");
      std::string line;
      std::getline(in, line);
      while (std::getline(in, line)) {
        if (line.rfind("cross", 0) == 0) transfer << line << "\n";
        else detect << line << "\n";
      }
    }
    append_rows(root / "attack_report.csv", attack);
    append_rows(root / "mitigation.csv", mitigation);
  }
  std::cout << "report tables written under " << ctx.out << "\n";
  ctx.finish({{"tables", {"detection_table.csv", "transfer_table.csv", "attack_table.csv",
                          "mitigation_table.csv"}}});
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"adapter-sentinel: forge, detect, attack, and mitigate low-rank adapter backdoors"};
  app.require_subcommand(1);

  std::string config_path, out_dir = ".";
  uint64_t seed = 0;
  int jobs = 1;
  bool resume = false;
  app.add_option("--config", config_path, "JSON config file")->required();
  app.add_option("--out", out_dir, "output directory");
  app.add_option("--seed", seed, "seed override (0 keeps the config's seed)");
  app.add_option("--jobs", jobs, "worker pool size for independent jobs");
  app.add_flag("--resume", resume, "resume a partial run at adapter granularity");

  auto* pretrain = app.add_subcommand("pretrain", "pretrain and save the frozen base model");
  auto* forge = app.add_subcommand("forge", "forge a benign/backdoored adapter benchmark");
  auto* tcache = app.add_subcommand("transform-cache", "precompute feature tensors");
  auto* traind = app.add_subcommand("train-detector", "train the meta-classifier");
  auto* eval = app.add_subcommand("eval", "evaluate a detector on a manifest split");
  auto* xeval = app.add_subcommand("cross-eval", "zero-shot evaluate on a foreign manifest");
  auto* attack = app.add_subcommand("attack", "run the adaptive-attack campaign");
  auto* mitigate = app.add_subcommand("mitigate", "SFT / fine-mix backdoor removal");
  auto* report = app.add_subcommand("report", "aggregate run CSVs into summary tables");

  CLI11_PARSE(app, argc, argv);

  try {
    RunContext ctx;
    ctx.config = load_config(config_path);
    ctx.out = out_dir;
    ctx.seed = seed;
    ctx.jobs = jobs;
    std::filesystem::create_directories(ctx.out);
    if (pretrain->parsed()) { ctx.command = "pretrain"; return cmd_pretrain(ctx); }
    if (forge->parsed()) { ctx.command = "forge"; return cmd_forge(ctx, resume); }
    if (tcache->parsed()) { ctx.command = "transform-cache"; return cmd_transform_cache(ctx); }
    if (traind->parsed()) { ctx.command = "train-detector"; return cmd_train_detector(ctx); }
    if (eval->parsed()) { ctx.command = "eval"; return cmd_eval(ctx, false); }
    if (xeval->parsed()) { ctx.command = "cross-eval"; return cmd_eval(ctx, true); }
    if (attack->parsed()) { ctx.command = "attack"; return cmd_attack(ctx); }
    if (mitigate->parsed()) { ctx.command = "mitigate"; return cmd_mitigate(ctx); }
    if (report->parsed()) { ctx.command = "report"; return cmd_report(ctx); }
    std::cerr << "no subcommand\n";
    return 2;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
