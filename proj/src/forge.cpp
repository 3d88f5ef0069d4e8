// SPDX-License-Identifier: Apache-2.0
#include "sentinel/forge.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <thread>

#include "sentinel/adam.hpp"
#include "sentinel/errors.hpp"
#include "sentinel/hash.hpp"

namespace sentinel {

namespace {

constexpr int64_t kEvalBatch = 32;

std::vector<int> batch_tokens(const Dataset& ds, const std::vector<size_t>& idx, size_t lo,
                              size_t hi) {
  const int64_t T = ds.seq_len();
  std::vector<int> out((hi - lo) * static_cast<size_t>(T));
  for (size_t b = lo; b < hi; ++b) {
    const std::vector<int> row = ds.row(static_cast<int64_t>(idx[b]));
    std::copy(row.begin(), row.end(), out.begin() + static_cast<int64_t>(b - lo) * T);
  }
  return out;
}

std::vector<int> predict_dataset(const BaseModel& base, const AdapterBundle* bundle,
                                 const Dataset& ds) {
  BaseModel merged = bundle ? merged_copy(base, *bundle) : base;
  std::vector<int> preds(static_cast<size_t>(ds.size()));
  std::vector<size_t> idx(static_cast<size_t>(ds.size()));
  for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  for (size_t lo = 0; lo < idx.size(); lo += kEvalBatch) {
    const size_t hi = std::min(idx.size(), lo + static_cast<size_t>(kEvalBatch));
    std::vector<int> tokens = batch_tokens(ds, idx, lo, hi);
    std::vector<int> p =
        predict_classes(merged, tokens, static_cast<int64_t>(hi - lo), nullptr);
    std::copy(p.begin(), p.end(), preds.begin() + static_cast<int64_t>(lo));
  }
  return preds;
}

}  // namespace

double dataset_accuracy(const BaseModel& base, const AdapterBundle* bundle, const Dataset& ds) {
  if (ds.size() == 0) fail(ErrorKind::Evaluation, "accuracy on empty dataset");
  const std::vector<int> preds = predict_dataset(base, bundle, ds);
  int64_t correct = 0;
  for (int64_t i = 0; i < ds.size(); ++i)
    if (preds[static_cast<size_t>(i)] == ds.labels[static_cast<size_t>(i)]) ++correct;
  return static_cast<double>(correct) / static_cast<double>(ds.size());
}

PretrainResult pretrain_base(const BaseModelConfig& config, const ToyTask& task,
                             int64_t train_pool, int64_t test_pool, const PretrainHyper& hyper,
                             uint64_t seed) {
  if (task.seq_len != config.seq_len || task.vocab_size != config.vocab)
    fail(ErrorKind::Config, "task and model disagree on seq_len/vocab");
  Rng root(seed);
  Rng data_rng = root.fork(1);
  Rng init_rng = root.fork(2);
  Rng train_rng = root.fork(3);
  Dataset train = gen_task_data(task, train_pool, data_rng);
  Dataset test = gen_task_data(task, test_pool, data_rng);

  // hold out 10% of the training pool to drive early stopping
  const int64_t n_val = std::max<int64_t>(1, train_pool / 10);
  Dataset val;
  val.tokens = Tensor(Shape{n_val, task.seq_len});
  val.labels.assign(static_cast<size_t>(n_val), 0);
  Dataset fit;
  fit.tokens = Tensor(Shape{train_pool - n_val, task.seq_len});
  fit.labels.assign(static_cast<size_t>(train_pool - n_val), 0);
  for (int64_t i = 0; i < n_val; ++i) {
    val.set_row(i, train.row(i));
    val.labels[static_cast<size_t>(i)] = train.labels[static_cast<size_t>(i)];
  }
  for (int64_t i = n_val; i < train_pool; ++i) {
    fit.set_row(i - n_val, train.row(i));
    fit.labels[static_cast<size_t>(i - n_val)] = train.labels[static_cast<size_t>(i)];
  }

  PretrainResult result;
  result.model = init_base_model(config, init_rng);
  AdamConfig adam;
  adam.lr = hyper.lr;
  std::vector<AdamState> states;

  const int64_t n = fit.size();
  for (int epoch = 0; epoch < hyper.max_epochs; ++epoch) {
    std::vector<size_t> order = train_rng.permutation(static_cast<size_t>(n));
    for (size_t lo = 0; lo < order.size(); lo += hyper.batch) {
      const size_t hi = std::min(order.size(), lo + static_cast<size_t>(hyper.batch));
      std::vector<int> tokens = batch_tokens(fit, order, lo, hi);
      std::vector<int> labels;
      for (size_t b = lo; b < hi; ++b) labels.push_back(fit.labels[order[b]]);
      Graph g;
      std::vector<ParamBinding> bindings;
      ForwardOptions opts;
      opts.train_base = true;
      Graph::Var logits =
          base_forward(g, result.model, tokens, static_cast<int64_t>(hi - lo), opts, &bindings);
      Graph::Var loss = g.softmax_xent(logits, labels);
      if (!std::isfinite(g.val(loss).data[0]))
        fail(ErrorKind::Numeric, "pretraining loss is non-finite");
      g.backward(loss);
      if (states.size() != bindings.size()) states.resize(bindings.size());
      for (size_t i = 0; i < bindings.size(); ++i)
        adam_step(*bindings[i].tensor, g.grad(bindings[i].var).data, states[i], adam,
                  bindings[i].lr_mult);
    }
    result.epochs_run = epoch + 1;
    const double val_ca = dataset_accuracy(result.model, nullptr, val);
    if (val_ca >= hyper.target_ca + 0.02) break;
  }
  result.test_ca = dataset_accuracy(result.model, nullptr, test);
  if (result.test_ca < hyper.target_ca)
    fail(ErrorKind::Forge, "pretraining stalled: test CA " + std::to_string(result.test_ca) +
                               " < " + std::to_string(hyper.target_ca));
  return result;
}

AdapterBundle finetune_adapter(const BaseModel& base, const MethodSpec& spec,
                               const std::vector<TargetMatrix>& targets, const Dataset& sub_data,
                               const FinetuneHyper& hyper, uint64_t seed) {
  const uint64_t before = base_checksum(base);
  Rng root(seed);
  Rng init_rng = root.fork(1);
  Rng train_rng = root.fork(2);

  // QLoRA trains against the value-snapped frozen base
  const BaseModel train_base_model =
      spec.method == PeftMethod::QLoRA ? quantized_copy(base, spec.quant) : base;
  BaseModel* train_base = const_cast<BaseModel*>(&train_base_model);

  AdapterBundle bundle =
      init_bundle(spec, targets, base.config.num_layers, base.config.d_model,
                  base.config.d_model, train_base_model.target_weights(canonical_target_set(targets)),
                  init_rng);
  bundle.meta.seed = seed;

  AdamConfig adam;
  adam.lr = hyper.lr;
  std::vector<AdamState> states;
  const int64_t n = sub_data.size();
  for (int epoch = 0; epoch < hyper.epochs; ++epoch) {
    std::vector<size_t> order = train_rng.permutation(static_cast<size_t>(n));
    for (size_t lo = 0; lo < order.size(); lo += hyper.batch) {
      const size_t hi = std::min(order.size(), lo + static_cast<size_t>(hyper.batch));
      std::vector<int> tokens = batch_tokens(sub_data, order, lo, hi);
      std::vector<int> labels;
      for (size_t b = lo; b < hi; ++b) labels.push_back(sub_data.labels[order[b]]);
      Graph g;
      std::vector<ParamBinding> bindings;
      ForwardOptions opts;
      opts.bundle = &bundle;
      opts.train_adapter = true;
      Graph::Var logits =
          base_forward(g, *train_base, tokens, static_cast<int64_t>(hi - lo), opts, &bindings);
      Graph::Var loss = g.softmax_xent(logits, labels);
      if (!std::isfinite(g.val(loss).data[0]))
        fail(ErrorKind::Numeric, "adapter fine-tune loss is non-finite");
      g.backward(loss);
      if (states.size() != bindings.size()) states.resize(bindings.size());
      for (size_t i = 0; i < bindings.size(); ++i)
        adam_step(*bindings[i].tensor, g.grad(bindings[i].var).data, states[i], adam,
                  bindings[i].lr_mult);
    }
  }
  if (base_checksum(base) != before)
    fail(ErrorKind::Contamination, "base weights changed during adapter fine-tune");
  return bundle;
}

AsrCa eval_asr_ca(const BaseModel& base, const AdapterBundle* bundle, const ToyTask& task,
                  const TriggerSpec& spec, const Dataset& clean_test, uint64_t eval_seed) {
  AsrCa out;
  out.ca = dataset_accuracy(base, bundle, clean_test);

  // triggered copies of every eligible row (true label != target)
  Rng rng(eval_seed);
  std::vector<int64_t> eligible;
  for (int64_t i = 0; i < clean_test.size(); ++i)
    if (clean_test.labels[static_cast<size_t>(i)] != spec.target_label) eligible.push_back(i);
  if (eligible.empty())
    fail(ErrorKind::Evaluation, "no eligible rows for ASR (all labels equal the target)");
  Dataset triggered;
  triggered.tokens = Tensor(Shape{static_cast<int64_t>(eligible.size()), task.seq_len});
  triggered.labels.assign(eligible.size(), spec.target_label);
  for (size_t i = 0; i < eligible.size(); ++i) {
    std::vector<int> row = clean_test.row(eligible[i]);
    insert_trigger(row, spec, task, rng);
    triggered.set_row(static_cast<int64_t>(i), row);
  }
  const std::vector<int> preds = predict_dataset(base, bundle, triggered);
  int64_t hits = 0;
  for (int pred : preds)
    if (pred == spec.target_label) ++hits;
  out.asr = static_cast<double>(hits) / static_cast<double>(eligible.size());
  return out;
}

// ---- manifest ----

std::vector<const ManifestEntry*> BenchmarkManifest::split_entries(const std::string& split) const {
  std::vector<const ManifestEntry*> out;
  for (const auto& e : entries)
    if (e.split == split || split == "all") out.push_back(&e);
  return out;
}

namespace {

nlohmann::json entry_to_json(const ManifestEntry& e) {
  return {{"path", e.path},   {"label", e.label},     {"split", e.split},
          {"method", e.method}, {"rank", e.rank},     {"trigger", e.trigger},
          {"asr", e.asr},     {"ca", e.ca},           {"seed", e.seed}};
}

ManifestEntry entry_from_json(const nlohmann::json& j) {
  ManifestEntry e;
  e.path = j.at("path").get<std::string>();
  e.label = j.at("label").get<int>();
  e.split = j.at("split").get<std::string>();
  e.method = j.at("method").get<std::string>();
  e.rank = j.at("rank").get<int64_t>();
  e.trigger = j.at("trigger").get<std::string>();
  e.asr = j.at("asr").get<double>();
  e.ca = j.at("ca").get<double>();
  e.seed = j.at("seed").get<uint64_t>();
  return e;
}

nlohmann::json task_to_json(const ToyTask& t) {
  return {{"vocab_size", t.vocab_size}, {"seq_len", t.seq_len},   {"num_classes", t.num_classes},
          {"rule", t.rule},             {"gen_seed", t.gen_seed}, {"marker_count", t.marker_count}};
}

ToyTask task_from_json(const nlohmann::json& j) {
  ToyTask t;
  t.vocab_size = j.at("vocab_size").get<int64_t>();
  t.seq_len = j.at("seq_len").get<int64_t>();
  t.num_classes = j.at("num_classes").get<int>();
  t.rule = j.at("rule").get<std::string>();
  t.gen_seed = j.at("gen_seed").get<uint64_t>();
  t.marker_count = j.at("marker_count").get<int>();
  return t;
}

nlohmann::json trigger_to_json(const TriggerSpec& s) {
  return {{"kind", trigger_kind_name(s.kind)},
          {"target_label", s.target_label},
          {"poison_rate", s.poison_rate},
          {"phrase_len", s.phrase_len}};
}

TriggerSpec trigger_from_json(const nlohmann::json& j) {
  TriggerSpec s;
  s.kind = trigger_kind_from_name(j.at("kind").get<std::string>());
  s.target_label = j.at("target_label").get<int>();
  s.poison_rate = j.at("poison_rate").get<double>();
  if (j.contains("phrase_len")) s.phrase_len = j.at("phrase_len").get<int>();
  return s;
}

}  // namespace

void save_manifest(const std::filesystem::path& path, const BenchmarkManifest& m) {
  nlohmann::json j;
  j["kind"] = "benchmark-manifest";
  j["base_model"] = m.base_model;
  j["delta_convention"] = m.delta_convention;
  j["task"] = m.task;
  j["config"] = m.config;
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& e : m.entries) arr.push_back(entry_to_json(e));
  j["entries"] = arr;
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(ErrorKind::Io, "cannot write manifest: " + path.string());
  out << j.dump(2) << "\n";
}

BenchmarkManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::Io, "cannot open manifest: " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Format, path.string() + ": " + e.what());
  }
  if (!j.contains("kind") || j["kind"] != "benchmark-manifest")
    fail(ErrorKind::Format, path.string() + ": not a benchmark manifest");
  BenchmarkManifest m;
  m.base_model = j.at("base_model").get<std::string>();
  m.delta_convention = j.at("delta_convention").get<std::string>();
  m.task = j.at("task");
  m.config = j.at("config");
  for (const auto& je : j.at("entries")) m.entries.push_back(entry_from_json(je));
  m.root = path.parent_path();
  return m;
}

// ---- benchmark forge ----

ForgeConfig forge_config_from_json(const nlohmann::json& j) {
  ForgeConfig cfg;
  try {
    if (j.contains("model")) {
      const auto& jm = j["model"];
      if (jm.contains("vocab")) cfg.model.vocab = jm["vocab"].get<int64_t>();
      if (jm.contains("seq_len")) cfg.model.seq_len = jm["seq_len"].get<int64_t>();
      if (jm.contains("num_classes")) cfg.model.num_classes = jm["num_classes"].get<int64_t>();
      if (jm.contains("num_layers")) cfg.model.num_layers = jm["num_layers"].get<int64_t>();
      if (jm.contains("d_model")) cfg.model.d_model = jm["d_model"].get<int64_t>();
      if (jm.contains("heads")) cfg.model.heads = jm["heads"].get<int64_t>();
      if (jm.contains("ff_mult")) cfg.model.ff_mult = jm["ff_mult"].get<int64_t>();
    }
    if (j.contains("task")) cfg.task = task_from_json(j["task"]);
    cfg.task.vocab_size = cfg.model.vocab;
    cfg.task.seq_len = cfg.model.seq_len;
    if (j.contains("method")) {
      const auto& jm = j["method"];
      cfg.method.method = peft_method_from_name(jm.value("name", "lora"));
      cfg.method.rank = jm.value("rank", static_cast<int64_t>(8));
      cfg.method.lr_ratio = jm.value("lr_ratio", 1.0);
      if (cfg.method.method == PeftMethod::QLoRA)
        cfg.method.quant = QuantizationSpec::normal_float_default();
      if (jm.contains("quant_block_size"))
        cfg.method.quant.block_size = jm["quant_block_size"].get<int64_t>();
    } else {
      cfg.method.method = PeftMethod::LoRA;
    }
    if (j.contains("targets")) {
      cfg.targets.clear();
      for (char c : j["targets"].get<std::string>())
        cfg.targets.push_back(target_matrix_from_char(c));
    }
    if (j.contains("triggers")) {
      cfg.triggers.clear();
      for (const auto& jt : j["triggers"]) cfg.triggers.push_back(trigger_from_json(jt));
    }
    cfg.n_benign = j.value("n_benign", 100);
    cfg.n_backdoored = j.value("n_backdoored", 100);
    cfg.train_pool = j.value("train_pool", static_cast<int64_t>(1024));
    cfg.test_pool = j.value("test_pool", static_cast<int64_t>(256));
    cfg.subsample_fraction = j.value("subsample_fraction", 0.5);
    if (j.contains("hyper")) {
      cfg.hyper.epochs = j["hyper"].value("epochs", 3);
      cfg.hyper.batch = j["hyper"].value("batch", static_cast<int64_t>(32));
      cfg.hyper.lr = j["hyper"].value("lr", 1e-3);
    }
    if (j.contains("pretrain")) {
      cfg.pretrain.max_epochs = j["pretrain"].value("max_epochs", 25);
      cfg.pretrain.batch = j["pretrain"].value("batch", static_cast<int64_t>(32));
      cfg.pretrain.lr = j["pretrain"].value("lr", 1e-3);
      cfg.pretrain.target_ca = j["pretrain"].value("target_ca", 0.9);
    }
    cfg.master_seed = j.value("master_seed", static_cast<uint64_t>(1));
    cfg.jobs = j.value("jobs", 1);
    cfg.base_model_path = j.value("base_model_path", std::string());
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Config, std::string("forge config: ") + e.what());
  }
  return cfg;
}

nlohmann::json forge_config_to_json(const ForgeConfig& cfg) {
  nlohmann::json j;
  j["model"] = {{"vocab", cfg.model.vocab},       {"seq_len", cfg.model.seq_len},
                {"num_classes", cfg.model.num_classes}, {"num_layers", cfg.model.num_layers},
                {"d_model", cfg.model.d_model},   {"heads", cfg.model.heads},
                {"ff_mult", cfg.model.ff_mult}};
  j["task"] = task_to_json(cfg.task);
  j["method"] = {{"name", peft_method_name(cfg.method.method)},
                 {"rank", cfg.method.rank},
                 {"lr_ratio", cfg.method.lr_ratio}};
  std::string ts;
  for (TargetMatrix t : cfg.targets) ts += target_matrix_char(t);
  j["targets"] = ts;
  nlohmann::json triggers = nlohmann::json::array();
  for (const auto& t : cfg.triggers) triggers.push_back(trigger_to_json(t));
  j["triggers"] = triggers;
  j["n_benign"] = cfg.n_benign;
  j["n_backdoored"] = cfg.n_backdoored;
  j["train_pool"] = cfg.train_pool;
  j["test_pool"] = cfg.test_pool;
  j["subsample_fraction"] = cfg.subsample_fraction;
  j["hyper"] = {{"epochs", cfg.hyper.epochs}, {"batch", cfg.hyper.batch}, {"lr", cfg.hyper.lr}};
  j["pretrain"] = {{"max_epochs", cfg.pretrain.max_epochs},
                   {"batch", cfg.pretrain.batch},
                   {"lr", cfg.pretrain.lr},
                   {"target_ca", cfg.pretrain.target_ca}};
  j["master_seed"] = cfg.master_seed;
  j["jobs"] = cfg.jobs;
  j["base_model_path"] = cfg.base_model_path;
  return j;
}

namespace {

struct AdapterJob {
  int index = 0;            // global adapter index, drives the rng stream
  int label = 0;            // 0 benign, 1 backdoored
  int trigger_idx = -1;     // -1 for benign
  std::string filename;
};

void run_adapter_job(const ForgeConfig& cfg, const BaseModel& base, const Dataset& train_pool,
                     const Dataset& test_pool, const AdapterJob& job,
                     const std::filesystem::path& out_dir, bool resume, ManifestEntry& entry) {
  const std::filesystem::path path = out_dir / job.filename;
  const uint64_t seed = Rng(cfg.master_seed).fork(1000 + static_cast<uint64_t>(job.index)).seed();
  // measurement trigger: backdoored adapters are measured against their own
  // trigger; benign ones against the first configured trigger
  const TriggerSpec& spec = cfg.triggers[static_cast<size_t>(std::max(job.trigger_idx, 0))];

  if (resume && std::filesystem::exists(path)) {
    try {
      AdapterBundle existing = load_bundle(path);
      entry.asr = existing.meta.asr;
      entry.ca = existing.meta.ca;
      entry.seed = seed;
      return;
    } catch (const Error&) {
      // fall through and rebuild
    }
  }

  Rng rng(seed);
  Rng sample_rng = rng.fork(1);
  Rng poison_rng = rng.fork(2);
  const uint64_t ft_seed = rng.fork(3).seed();
  const uint64_t eval_seed = rng.fork(4).seed();

  const auto sub_n = static_cast<size_t>(
      std::llround(cfg.subsample_fraction * static_cast<double>(train_pool.size())));
  std::vector<size_t> pick =
      sample_rng.sample_without_replacement(static_cast<size_t>(train_pool.size()), sub_n);
  std::sort(pick.begin(), pick.end());
  Dataset sub;
  sub.tokens = Tensor(Shape{static_cast<int64_t>(sub_n), cfg.task.seq_len});
  sub.labels.resize(sub_n);
  for (size_t i = 0; i < sub_n; ++i) {
    sub.set_row(static_cast<int64_t>(i), train_pool.row(static_cast<int64_t>(pick[i])));
    sub.labels[i] = train_pool.labels[pick[i]];
  }
  if (job.label == 1) sub = poison(sub, spec, cfg.task, poison_rng).data;

  AdapterBundle bundle = finetune_adapter(base, cfg.method, cfg.targets, sub, cfg.hyper, ft_seed);
  bundle.label = job.label;
  bundle.meta.task_id = cfg.task.rule;
  const AsrCa scores = eval_asr_ca(base, &bundle, cfg.task, spec, test_pool, eval_seed);
  bundle.meta.asr = scores.asr;
  bundle.meta.ca = scores.ca;
  save_bundle(path, bundle);
  entry.asr = scores.asr;
  entry.ca = scores.ca;
  entry.seed = seed;
}

std::vector<std::string> assign_splits(int n, Rng& rng) {
  // 8:2 train+val : test, then 10% of the train side as validation
  const int n_test = static_cast<int>(std::llround(0.2 * n));
  const int n_val = static_cast<int>(std::llround(0.1 * (n - n_test)));
  std::vector<std::string> splits(static_cast<size_t>(n));
  std::vector<size_t> order = rng.permutation(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    const char* s = i < n_test ? "test" : (i < n_test + n_val ? "val" : "train");
    splits[order[static_cast<size_t>(i)]] = s;
  }
  return splits;
}

}  // namespace

BenchmarkManifest forge_benchmark(const ForgeConfig& config, const std::filesystem::path& out_dir,
                                  bool resume) {
  if (config.triggers.empty()) fail(ErrorKind::Config, "forge needs at least one trigger spec");
  for (const auto& t : config.triggers) t.validate(config.task.num_classes);
  config.method.validate(config.model.d_model, config.model.d_model);
  std::filesystem::create_directories(out_dir / "adapters");

  // base model: reuse or pretrain
  BaseModel base;
  std::string base_rel;
  if (!config.base_model_path.empty()) {
    base = load_base_model(config.base_model_path);
    base_rel = config.base_model_path;
  } else {
    const std::filesystem::path base_path = out_dir / "base.bin";
    bool loaded = false;
    if (resume && std::filesystem::exists(base_path)) {
      try {
        base = load_base_model(base_path);
        loaded = true;
      } catch (const Error&) {
      }
    }
    if (!loaded) {
      PretrainResult pre = pretrain_base(config.model, config.task, config.train_pool,
                                         config.test_pool, config.pretrain,
                                         Rng(config.master_seed).fork(1).seed());
      base = std::move(pre.model);
      save_base_model(base_path, base);
    }
    base_rel = "base.bin";
  }

  // shared data pools (same stream layout as pretrain_base, so the adapters
  // never see the held-out test rows)
  Rng data_rng = Rng(Rng(config.master_seed).fork(1).seed()).fork(1);
  Dataset train_pool = gen_task_data(config.task, config.train_pool, data_rng);
  Dataset test_pool = gen_task_data(config.task, config.test_pool, data_rng);
  save_dataset(out_dir / "task_train.bin", train_pool);
  save_dataset(out_dir / "task_test.bin", test_pool);

  // job list: shared benign set first, then backdoored per trigger kind
  std::vector<AdapterJob> jobs;
  char namebuf[64];
  for (int i = 0; i < config.n_benign; ++i) {
    AdapterJob j;
    j.index = static_cast<int>(jobs.size());
    j.label = 0;
    std::snprintf(namebuf, sizeof(namebuf), "adapters/benign_%04d.bin", i);
    j.filename = namebuf;
    jobs.push_back(j);
  }
  for (size_t ti = 0; ti < config.triggers.size(); ++ti)
    for (int i = 0; i < config.n_backdoored; ++i) {
      AdapterJob j;
      j.index = static_cast<int>(jobs.size());
      j.label = 1;
      j.trigger_idx = static_cast<int>(ti);
      std::snprintf(namebuf, sizeof(namebuf), "adapters/bd_%s_%04d.bin",
                    trigger_kind_name(config.triggers[ti].kind).c_str(), i);
      j.filename = namebuf;
      jobs.push_back(j);
    }

  std::vector<ManifestEntry> entries(jobs.size());
  auto worker = [&](size_t lo, size_t hi) {
    for (size_t i = lo; i < hi; ++i) {
      ManifestEntry& e = entries[i];
      e.path = jobs[i].filename;
      e.label = jobs[i].label;
      e.method = peft_method_name(config.method.method);
      e.rank = config.method.rank;
      e.trigger = jobs[i].trigger_idx < 0
                      ? "none"
                      : trigger_kind_name(config.triggers[static_cast<size_t>(jobs[i].trigger_idx)].kind);
      run_adapter_job(config, base, train_pool, test_pool, jobs[i], out_dir, resume, e);
    }
  };
  const int jobs_n = std::max(1, config.jobs);
  if (jobs_n == 1) {
    worker(0, jobs.size());
  } else {
    std::vector<std::thread> threads;
    const size_t chunk = (jobs.size() + static_cast<size_t>(jobs_n) - 1) / static_cast<size_t>(jobs_n);
    for (int t = 0; t < jobs_n; ++t) {
      const size_t lo = static_cast<size_t>(t) * chunk;
      const size_t hi = std::min(jobs.size(), lo + chunk);
      if (lo >= hi) break;
      threads.emplace_back(worker, lo, hi);
    }
    for (auto& th : threads) th.join();
  }

  // split assignment per (label, trigger) group, balanced by construction
  Rng split_rng = Rng(config.master_seed).fork(7);
  size_t cursor = 0;
  {
    std::vector<std::string> s = assign_splits(config.n_benign, split_rng);
    for (int i = 0; i < config.n_benign; ++i) entries[cursor++].split = s[static_cast<size_t>(i)];
  }
  for (size_t ti = 0; ti < config.triggers.size(); ++ti) {
    std::vector<std::string> s = assign_splits(config.n_backdoored, split_rng);
    for (int i = 0; i < config.n_backdoored; ++i)
      entries[cursor++].split = s[static_cast<size_t>(i)];
  }

  BenchmarkManifest manifest;
  manifest.base_model = base_rel;
  manifest.task = task_to_json(config.task);
  manifest.config = forge_config_to_json(config);
  manifest.entries = std::move(entries);
  manifest.root = out_dir;
  save_manifest(out_dir / "manifest.json", manifest);
  return manifest;
}

}  // namespace sentinel
