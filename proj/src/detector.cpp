// SPDX-License-Identifier: Apache-2.0
#include "sentinel/detector.hpp"

#include <algorithm>
#include <cmath>

#include "sentinel/adam.hpp"
#include "sentinel/errors.hpp"

namespace sentinel {

std::string reduction_name(Reduction r) {
  switch (r) {
    case Reduction::Conv: return "conv";
    case Reduction::MaxPool: return "max_pool";
    case Reduction::AdaptiveAvgPool: return "adaptive_avg_pool";
  }
  fail(ErrorKind::Config, "bad reduction");
}

Reduction reduction_from_name(const std::string& s) {
  if (s == "conv") return Reduction::Conv;
  if (s == "max_pool") return Reduction::MaxPool;
  if (s == "adaptive_avg_pool") return Reduction::AdaptiveAvgPool;
  fail(ErrorKind::Config, "unknown reduction '" + s + "'");
}

nlohmann::json DetectorConfig::to_json() const {
  nlohmann::json j;
  j["conv_channels"] = conv_channels;
  j["kernel"] = kernel;
  j["stride"] = stride;
  j["reduction"] = reduction_name(reduction);
  j["mlp_hidden"] = mlp_hidden;
  j["dropout"] = dropout;
  j["loss"] = loss == LossMode::CE ? "ce" : "ce_supcon";
  j["supcon_tau"] = supcon_tau;
  j["supcon_beta"] = supcon_beta;
  j["lr"] = lr;
  j["weight_decay"] = weight_decay;
  j["batch"] = batch;
  j["epochs"] = epochs;
  j["standardize"] = standardize;
  return j;
}

DetectorConfig DetectorConfig::from_json(const nlohmann::json& j) {
  DetectorConfig c;
  c.conv_channels = j.value("conv_channels", static_cast<int64_t>(8));
  c.kernel = j.value("kernel", static_cast<int64_t>(4));
  c.stride = j.value("stride", static_cast<int64_t>(4));
  c.reduction = reduction_from_name(j.value("reduction", std::string("conv")));
  if (j.contains("mlp_hidden")) c.mlp_hidden = j["mlp_hidden"].get<std::vector<int64_t>>();
  c.dropout = j.value("dropout", 0.4);
  c.loss = j.value("loss", std::string("ce")) == "ce_supcon" ? LossMode::CESupCon : LossMode::CE;
  c.supcon_tau = j.value("supcon_tau", 0.07);
  c.supcon_beta = j.value("supcon_beta", 1.0);
  c.lr = j.value("lr", 1e-3);
  c.weight_decay = j.value("weight_decay", 1e-5);
  c.batch = j.value("batch", static_cast<int64_t>(4));
  c.epochs = j.value("epochs", 40);
  c.standardize = j.value("standardize", false);
  if (c.stride < 1) fail(ErrorKind::Config, "stride must be >= 1");
  if (c.dropout < 0.0 || c.dropout >= 1.0) fail(ErrorKind::Config, "dropout must be in [0,1)");
  return c;
}

void DetectorModel::for_each_param(const std::function<void(Tensor&)>& fn) {
  if (config.reduction == Reduction::Conv) {
    fn(conv_w);
    fn(conv_b);
  }
  for (auto& w : mlp_w) fn(w);
  for (auto& b : mlp_b) fn(b);
}

void DetectorModel::for_each_param_const(const std::function<void(const Tensor&)>& fn) const {
  const_cast<DetectorModel*>(this)->for_each_param([&fn](Tensor& t) { fn(t); });
}

namespace {

int64_t reduced_extent(int64_t in, int64_t kernel, int64_t stride) {
  if (kernel > in) fail(ErrorKind::Dimension, "reduction kernel larger than input plane");
  return (in - kernel) / stride + 1;
}

int64_t flat_dim(const DetectorConfig& cfg, const FeatureLayout& layout) {
  const int64_t oh = reduced_extent(layout.d, cfg.kernel, cfg.stride);
  const int64_t ow = reduced_extent(layout.k, cfg.kernel, cfg.stride);
  const int64_t ch = cfg.reduction == Reduction::Conv ? cfg.conv_channels : layout.channels();
  return ch * oh * ow;
}

}  // namespace

DetectorModel init_detector(const DetectorConfig& config, const FeatureLayout& layout, Rng& rng) {
  DetectorModel m;
  m.config = config;
  m.input_layout = layout;
  if (config.reduction == Reduction::Conv) {
    const double ks = 1.0 / std::sqrt(static_cast<double>(layout.channels() * config.kernel *
                                                          config.kernel));
    m.conv_w = Tensor::randn(Shape{config.conv_channels, layout.channels(), config.kernel,
                                   config.kernel},
                             rng, ks);
    m.conv_b = Tensor::zeros(Shape{config.conv_channels});
  }
  int64_t prev = flat_dim(config, layout);
  for (int64_t h : config.mlp_hidden) {
    m.mlp_w.push_back(Tensor::randn(Shape{h, prev}, rng, 1.0 / std::sqrt(static_cast<double>(prev))));
    m.mlp_b.push_back(Tensor::zeros(Shape{h}));
    prev = h;
  }
  m.mlp_w.push_back(Tensor::randn(Shape{2, prev}, rng, 1.0 / std::sqrt(static_cast<double>(prev))));
  m.mlp_b.push_back(Tensor::zeros(Shape{2}));
  return m;
}

Graph::Var detector_forward(Graph& g, const DetectorModel& model, Graph::Var input, bool training,
                            Rng* dropout_rng, std::vector<ParamBinding>* bindings,
                            Graph::Var* embedding_out) {
  using Var = Graph::Var;
  DetectorModel& m = const_cast<DetectorModel&>(model);
  const auto& iv = g.val(input);
  if (iv.rank() != 4 || iv.dim(1) != model.input_layout.channels() ||
      iv.dim(2) != model.input_layout.d || iv.dim(3) != model.input_layout.k)
    fail(ErrorKind::Dimension, "detector input shape " + shape_str(iv.shape) +
                                   " does not match trained layout " +
                                   model.input_layout.describe());
  const int64_t B = iv.dim(0);
  auto param = [&](Tensor& t) {
    if (!bindings) return g.constant(t);
    Tensor copy = t;
    copy.requires_grad = true;
    Var v = g.leaf(copy);
    bindings->push_back({&t, v, 1.0});
    return v;
  };

  Var x;
  switch (model.config.reduction) {
    case Reduction::Conv:
      x = g.relu(g.conv2d(input, param(m.conv_w), param(m.conv_b), model.config.stride));
      break;
    case Reduction::MaxPool:
      x = g.maxpool2d(input, model.config.kernel, model.config.kernel, model.config.stride);
      break;
    case Reduction::AdaptiveAvgPool:
      x = g.avgpool2d(input, model.config.kernel, model.config.kernel, model.config.stride);
      break;
  }
  const auto& xv = g.val(x);
  x = g.reshape(x, Shape{B, xv.numel() / B});
  Var embedding = x;
  for (size_t i = 0; i < m.mlp_w.size(); ++i) {
    const bool last = i + 1 == m.mlp_w.size();
    if (!last) {
      x = g.relu(g.add_bias(g.matmul(x, g.transpose(param(m.mlp_w[i]))), param(m.mlp_b[i])));
      embedding = x;  // pre-logit representation, before dropout
      if (training && dropout_rng)
        x = g.dropout(x, model.config.dropout, *dropout_rng, true);
    } else {
      x = g.add_bias(g.matmul(x, g.transpose(param(m.mlp_w[i]))), param(m.mlp_b[i]));
    }
  }
  if (embedding_out) *embedding_out = embedding;
  return x;
}

Tensor prepare_input(const DetectorModel& model, const FeatureTensor& f) {
  if (!model.config.standardize) return f.data;
  Tensor out = f.data;
  const int64_t C = f.layout.channels();
  const int64_t plane = f.layout.d * f.layout.k;
  for (int64_t c = 0; c < C; ++c) {
    double mean = 0.0;
    for (int64_t i = 0; i < plane; ++i)
      mean += static_cast<double>(out.data[static_cast<size_t>(c * plane + i)]);
    mean /= static_cast<double>(plane);
    double var = 0.0;
    for (int64_t i = 0; i < plane; ++i) {
      const double d = static_cast<double>(out.data[static_cast<size_t>(c * plane + i)]) - mean;
      var += d * d;
    }
    const double inv = 1.0 / std::sqrt(var / static_cast<double>(plane) + 1e-12);
    for (int64_t i = 0; i < plane; ++i) {
      auto& v = out.data[static_cast<size_t>(c * plane + i)];
      v = static_cast<float>((static_cast<double>(v) - mean) * inv);
    }
  }
  return out;
}

Prediction predict(const DetectorModel& model, const FeatureTensor& f) {
  if (!(f.layout == model.input_layout))
    fail(ErrorKind::Dimension, "feature layout " + f.layout.describe() +
                                   " does not match trained layout " +
                                   model.input_layout.describe());
  Graph g;
  Tensor in = prepare_input(model, f);
  Graph::Var input = g.constant(in.reshaped(Shape{1, f.layout.channels(), f.layout.d, f.layout.k}));
  Graph::Var logits = detector_forward(g, model, input, false, nullptr, nullptr, nullptr);
  const Tensor& lv = g.val(logits);
  const double l0 = static_cast<double>(lv.at(0, 0));
  const double l1 = static_cast<double>(lv.at(0, 1));
  Prediction p;
  p.label = l1 > l0 ? 1 : 0;
  p.score = 1.0 / (1.0 + std::exp(l0 - l1));
  return p;
}

TrainDataset load_features(const BenchmarkManifest& manifest) {
  TrainDataset out;
  if (manifest.entries.empty()) fail(ErrorKind::Data, "manifest has no entries");
  for (const auto& e : manifest.entries) {
    AdapterBundle b = load_bundle(manifest.resolve(e.path));
    FeatureTensor f = transform(b);
    if (out.features.empty()) out.layout = f.layout;
    else if (!(f.layout == out.layout))
      fail(ErrorKind::Data, "mixed feature layouts inside one manifest");
    out.features.push_back(std::move(f));
    out.labels.push_back(e.label);
    out.splits.push_back(e.split);
  }
  return out;
}

namespace {

struct BatchView {
  Tensor input;             // [B, C, d, k]
  std::vector<int> labels;
};

BatchView make_batch(const DetectorModel& model, const TrainDataset& data,
                     const std::vector<size_t>& idx, size_t lo, size_t hi) {
  const FeatureLayout& L = data.layout;
  BatchView b;
  b.input = Tensor(Shape{static_cast<int64_t>(hi - lo), L.channels(), L.d, L.k});
  const int64_t vol = L.channels() * L.d * L.k;
  for (size_t i = lo; i < hi; ++i) {
    Tensor prepared = prepare_input(model, data.features[idx[i]]);
    std::copy(prepared.data.begin(), prepared.data.end(),
              b.input.data.begin() + static_cast<int64_t>(i - lo) * vol);
    b.labels.push_back(data.labels[idx[i]]);
  }
  return b;
}

double split_da(const DetectorModel& model, const TrainDataset& data,
                const std::vector<size_t>& idx) {
  std::vector<int> labels, preds;
  for (size_t i : idx) {
    labels.push_back(data.labels[i]);
    preds.push_back(predict(model, data.features[i]).label);
  }
  return detection_accuracy(labels, preds);
}

double split_loss(const DetectorModel& model, const TrainDataset& data,
                  const std::vector<size_t>& idx) {
  double total = 0.0;
  size_t count = 0;
  for (size_t lo = 0; lo < idx.size(); lo += 16) {
    const size_t hi = std::min(idx.size(), lo + 16);
    BatchView b = make_batch(model, data, idx, lo, hi);
    Graph g;
    Graph::Var logits =
        detector_forward(g, model, g.constant(b.input), false, nullptr, nullptr, nullptr);
    Graph::Var loss = g.softmax_xent(logits, b.labels);
    total += static_cast<double>(g.val(loss).data[0]) * static_cast<double>(hi - lo);
    count += hi - lo;
  }
  return count ? total / static_cast<double>(count) : 0.0;
}

}  // namespace

DetectorModel train_detector_on(const DetectorConfig& config, const TrainDataset& data,
                                uint64_t seed) {
  std::vector<size_t> train_idx, val_idx;
  for (size_t i = 0; i < data.features.size(); ++i) {
    if (data.splits[i] == "train") train_idx.push_back(i);
    else if (data.splits[i] == "val") val_idx.push_back(i);
  }
  if (train_idx.empty()) fail(ErrorKind::Data, "empty training split");
  int class_count[2] = {0, 0};
  for (size_t i : train_idx) class_count[data.labels[i] == 1 ? 1 : 0] += 1;
  if (class_count[0] < 2 || class_count[1] < 2)
    fail(ErrorKind::Data, "training split needs at least two examples of each class");

  Rng root(seed);
  Rng init_rng = root.fork(1);
  Rng shuffle_rng = root.fork(2);
  Rng dropout_rng = root.fork(3);

  DetectorModel model = init_detector(config, data.layout, init_rng);
  AdamConfig adam;
  adam.lr = config.lr;
  adam.weight_decay = config.weight_decay;
  std::vector<AdamState> states;

  DetectorModel best = model;
  double best_da = -1.0, best_loss = 0.0;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::vector<size_t> order = train_idx;
    {
      std::vector<size_t> perm = shuffle_rng.permutation(order.size());
      std::vector<size_t> shuffled(order.size());
      for (size_t i = 0; i < order.size(); ++i) shuffled[i] = order[perm[i]];
      order.swap(shuffled);
    }
    double epoch_loss = 0.0;
    size_t seen = 0;
    for (size_t lo = 0; lo < order.size(); lo += config.batch) {
      const size_t hi = std::min(order.size(), lo + static_cast<size_t>(config.batch));
      BatchView b = make_batch(model, data, order, lo, hi);
      Graph g;
      std::vector<ParamBinding> bindings;
      Graph::Var embedding;
      Graph::Var logits = detector_forward(g, model, g.constant(b.input), true, &dropout_rng,
                                           &bindings, &embedding);
      Graph::Var loss = g.softmax_xent(logits, b.labels);
      if (config.loss == LossMode::CESupCon)
        loss = g.add(loss, g.scale(g.supcon(embedding, b.labels, config.supcon_tau),
                                   config.supcon_beta));
      const double lv = static_cast<double>(g.val(loss).data[0]);
      if (!std::isfinite(lv)) fail(ErrorKind::Numeric, "detector loss is non-finite");
      epoch_loss += lv * static_cast<double>(hi - lo);
      seen += hi - lo;
      g.backward(loss);
      if (states.size() != bindings.size()) states.resize(bindings.size());
      for (size_t i = 0; i < bindings.size(); ++i)
        adam_step(*bindings[i].tensor, g.grad(bindings[i].var).data, states[i], adam,
                  bindings[i].lr_mult);
    }
    const double val_da = val_idx.empty() ? 0.0 : split_da(model, data, val_idx);
    const double val_loss = val_idx.empty() ? 0.0 : split_loss(model, data, val_idx);
    model.training_log.push_back({{"epoch", epoch},
                                  {"train_loss", epoch_loss / static_cast<double>(seen)},
                                  {"val_da", val_da},
                                  {"val_loss", val_loss}});
    // model selection: best validation DA, ties broken by lower val loss
    if (val_idx.empty() || val_da > best_da ||
        (val_da == best_da && val_loss < best_loss)) {
      best_da = val_da;
      best_loss = val_loss;
      best = model;
    }
  }
  best.training_log = model.training_log;  // keep the full run history
  return best;
}

DetectorModel train_detector(const DetectorConfig& config, const BenchmarkManifest& manifest,
                             uint64_t seed) {
  TrainDataset data = load_features(manifest);
  return train_detector_on(config, data, seed);
}

DetectorModel fuse(const std::vector<DetectorModel>& models) {
  if (models.empty()) fail(ErrorKind::Config, "fuse needs at least one model");
  DetectorModel out = models[0];
  std::vector<Tensor*> acc;
  out.for_each_param([&acc](Tensor& t) { acc.push_back(&t); });
  for (size_t mi = 1; mi < models.size(); ++mi) {
    std::vector<const Tensor*> theirs;
    models[mi].for_each_param_const([&theirs](const Tensor& t) { theirs.push_back(&t); });
    if (theirs.size() != acc.size())
      fail(ErrorKind::Dimension, "fuse: parameter lists differ in length");
    if (!(models[mi].input_layout == out.input_layout))
      fail(ErrorKind::Dimension, "fuse: models trained on different input layouts");
    for (size_t i = 0; i < acc.size(); ++i) {
      if (theirs[i]->shape != acc[i]->shape)
        fail(ErrorKind::Dimension, "fuse: parameter shape mismatch");
    }
  }
  // elementwise mean, accumulated in double
  size_t pi = 0;
  out.for_each_param([&](Tensor& t) {
    std::vector<double> sum(t.data.size(), 0.0);
    for (const auto& m : models) {
      std::vector<const Tensor*> theirs;
      m.for_each_param_const([&theirs](const Tensor& tt) { theirs.push_back(&tt); });
      for (size_t i = 0; i < sum.size(); ++i)
        sum[i] += static_cast<double>(theirs[pi]->data[i]);
    }
    for (size_t i = 0; i < sum.size(); ++i)
      t.data[i] = static_cast<float>(sum[i] / static_cast<double>(models.size()));
    ++pi;
  });
  out.training_log = nlohmann::json::array();
  return out;
}

namespace {

EvalResult evaluate_on(const DetectorModel& model, const TrainDataset& data,
                       const std::string& split) {
  EvalResult r;
  std::vector<int> preds;
  for (size_t i = 0; i < data.features.size(); ++i) {
    if (split != "all" && data.splits[i] != split) continue;
    Prediction p = predict(model, data.features[i]);
    preds.push_back(p.label);
    r.scores.push_back(p.score);
    r.labels.push_back(data.labels[i]);
  }
  if (r.labels.empty()) fail(ErrorKind::Evaluation, "split '" + split + "' is empty");
  r.da = detection_accuracy(r.labels, preds);
  r.auc = auc_rank(r.labels, r.scores);
  r.roc = roc_points(r.labels, r.scores);
  return r;
}

}  // namespace

EvalResult evaluate(const DetectorModel& model, const BenchmarkManifest& manifest,
                    const std::string& split) {
  TrainDataset data = load_features(manifest);
  return evaluate_on(model, data, split);
}

EvalResult cross_evaluate(const DetectorModel& model, const BenchmarkManifest& foreign,
                          const std::string& split) {
  TrainDataset data = load_features(foreign);
  if (!(data.layout == model.input_layout))
    fail(ErrorKind::Transfer, "transfer-incompatible feature layout: model expects " +
                                  model.input_layout.describe() + ", benchmark provides " +
                                  data.layout.describe());
  return evaluate_on(model, data, split);
}

void save_detector(const std::filesystem::path& path, const DetectorModel& model) {
  Container c;
  c.meta["kind"] = "detector-model";
  c.meta["config"] = model.config.to_json();
  c.meta["layout"] = {{"num_layers", model.input_layout.num_layers},
                      {"d", model.input_layout.d},
                      {"k", model.input_layout.k}};
  std::string ts;
  for (TargetMatrix t : model.input_layout.targets) ts += target_matrix_char(t);
  c.meta["layout"]["targets"] = ts;
  c.meta["training_log"] = model.training_log;
  if (model.config.reduction == Reduction::Conv) {
    c.tensors.push_back({"conv.w", model.conv_w});
    c.tensors.push_back({"conv.b", model.conv_b});
  }
  for (size_t i = 0; i < model.mlp_w.size(); ++i) {
    c.tensors.push_back({"mlp." + std::to_string(i) + ".w", model.mlp_w[i]});
    c.tensors.push_back({"mlp." + std::to_string(i) + ".b", model.mlp_b[i]});
  }
  save_container(path, c);
}

DetectorModel load_detector(const std::filesystem::path& path) {
  Container c = load_container(path);
  if (!c.meta.contains("kind") || c.meta["kind"] != "detector-model")
    fail(ErrorKind::Format, path.string() + ": not a detector model file");
  DetectorModel m;
  m.config = DetectorConfig::from_json(c.meta.at("config"));
  const auto& jl = c.meta.at("layout");
  m.input_layout.num_layers = jl.at("num_layers").get<int64_t>();
  m.input_layout.d = jl.at("d").get<int64_t>();
  m.input_layout.k = jl.at("k").get<int64_t>();
  for (char ch : jl.at("targets").get<std::string>())
    m.input_layout.targets.push_back(target_matrix_from_char(ch));
  m.training_log = c.meta.value("training_log", nlohmann::json::array());
  if (m.config.reduction == Reduction::Conv) {
    m.conv_w = c.require("conv.w");
    m.conv_b = c.require("conv.b");
  }
  for (size_t i = 0;; ++i) {
    const Tensor* w = c.find("mlp." + std::to_string(i) + ".w");
    if (!w) break;
    m.mlp_w.push_back(*w);
    m.mlp_b.push_back(c.require("mlp." + std::to_string(i) + ".b"));
  }
  return m;
}

}  // namespace sentinel
