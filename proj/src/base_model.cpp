// SPDX-License-Identifier: Apache-2.0
#include "sentinel/base_model.hpp"

#include <cmath>
#include <functional>

#include "sentinel/errors.hpp"
#include "sentinel/hash.hpp"

namespace sentinel {

const Tensor& BaseModel::attn_weight(int layer, TargetMatrix t) const {
  return const_cast<BaseModel*>(this)->attn_weight(layer, t);
}

Tensor& BaseModel::attn_weight(int layer, TargetMatrix t) {
  Layer& l = layers[static_cast<size_t>(layer)];
  switch (t) {
    case TargetMatrix::Q: return l.wq;
    case TargetMatrix::K: return l.wk;
    case TargetMatrix::V: return l.wv;
    case TargetMatrix::O: return l.wo;
  }
  fail(ErrorKind::Config, "bad target matrix");
}

std::vector<std::vector<Tensor>> BaseModel::target_weights(
    const std::vector<TargetMatrix>& targets) const {
  std::vector<std::vector<Tensor>> out(layers.size());
  for (size_t l = 0; l < layers.size(); ++l)
    for (TargetMatrix t : targets) out[l].push_back(attn_weight(static_cast<int>(l), t));
  return out;
}

void BaseModel::for_each_tensor(
    const std::function<void(const std::string&, const Tensor&)>& fn) const {
  const_cast<BaseModel*>(this)->for_each_tensor_mut(
      [&fn](const std::string& name, Tensor& t) { fn(name, t); });
}

void BaseModel::for_each_tensor_mut(const std::function<void(const std::string&, Tensor&)>& fn) {
  fn("embed", embed);
  fn("pos", pos);
  for (size_t l = 0; l < layers.size(); ++l) {
    const std::string p = "layer." + std::to_string(l) + ".";
    Layer& lw = layers[l];
    fn(p + "wq", lw.wq);
    fn(p + "wk", lw.wk);
    fn(p + "wv", lw.wv);
    fn(p + "wo", lw.wo);
    fn(p + "ln1.g", lw.ln1_g);
    fn(p + "ln1.b", lw.ln1_b);
    fn(p + "ln2.g", lw.ln2_g);
    fn(p + "ln2.b", lw.ln2_b);
    fn(p + "w1", lw.w1);
    fn(p + "b1", lw.b1);
    fn(p + "w2", lw.w2);
    fn(p + "b2", lw.b2);
  }
  fn("lnf.g", lnf_g);
  fn("lnf.b", lnf_b);
  fn("cls.w", cls_w);
  fn("cls.b", cls_b);
}

BaseModel init_base_model(const BaseModelConfig& config, Rng& rng) {
  if (config.d_model % config.heads != 0)
    fail(ErrorKind::Config, "d_model must be divisible by heads");
  BaseModel m;
  m.config = config;
  const int64_t d = config.d_model;
  const int64_t ff = config.ff_dim();
  const double ws = 1.0 / std::sqrt(static_cast<double>(d));
  m.embed = Tensor::randn(Shape{config.vocab, d}, rng, 0.3);
  m.pos = Tensor::randn(Shape{config.seq_len, d}, rng, 0.1);
  m.layers.resize(static_cast<size_t>(config.num_layers));
  for (auto& l : m.layers) {
    l.wq = Tensor::randn(Shape{d, d}, rng, ws);
    l.wk = Tensor::randn(Shape{d, d}, rng, ws);
    l.wv = Tensor::randn(Shape{d, d}, rng, ws);
    l.wo = Tensor::randn(Shape{d, d}, rng, ws);
    l.ln1_g = Tensor::full(Shape{d}, 1.0f);
    l.ln1_b = Tensor::zeros(Shape{d});
    l.ln2_g = Tensor::full(Shape{d}, 1.0f);
    l.ln2_b = Tensor::zeros(Shape{d});
    l.w1 = Tensor::randn(Shape{ff, d}, rng, ws);
    l.b1 = Tensor::zeros(Shape{ff});
    l.w2 = Tensor::randn(Shape{d, ff}, rng, 1.0 / std::sqrt(static_cast<double>(ff)));
    l.b2 = Tensor::zeros(Shape{d});
  }
  m.lnf_g = Tensor::full(Shape{d}, 1.0f);
  m.lnf_b = Tensor::zeros(Shape{d});
  m.cls_w = Tensor::randn(Shape{config.num_classes, d}, rng, ws);
  m.cls_b = Tensor::zeros(Shape{config.num_classes});
  return m;
}

uint64_t base_checksum(const BaseModel& model) {
  uint64_t h = 0xcbf29ce484222325ULL;
  model.for_each_tensor([&h](const std::string& name, const Tensor& t) {
    h = fnv1a64(name.data(), name.size(), h);
    h = tensor_checksum(t, h);
  });
  return h;
}

void save_base_model(const std::filesystem::path& path, const BaseModel& model) {
  Container c;
  c.meta["kind"] = "base-model";
  c.meta["vocab"] = model.config.vocab;
  c.meta["seq_len"] = model.config.seq_len;
  c.meta["num_classes"] = model.config.num_classes;
  c.meta["num_layers"] = model.config.num_layers;
  c.meta["d_model"] = model.config.d_model;
  c.meta["heads"] = model.config.heads;
  c.meta["ff_mult"] = model.config.ff_mult;
  model.for_each_tensor(
      [&c](const std::string& name, const Tensor& t) { c.tensors.push_back({name, t}); });
  save_container(path, c);
}

BaseModel load_base_model(const std::filesystem::path& path) {
  Container c = load_container(path);
  if (!c.meta.contains("kind") || c.meta["kind"] != "base-model")
    fail(ErrorKind::Format, path.string() + ": not a base model file");
  BaseModelConfig cfg;
  cfg.vocab = c.meta.at("vocab").get<int64_t>();
  cfg.seq_len = c.meta.at("seq_len").get<int64_t>();
  cfg.num_classes = c.meta.at("num_classes").get<int64_t>();
  cfg.num_layers = c.meta.at("num_layers").get<int64_t>();
  cfg.d_model = c.meta.at("d_model").get<int64_t>();
  cfg.heads = c.meta.at("heads").get<int64_t>();
  cfg.ff_mult = c.meta.at("ff_mult").get<int64_t>();
  Rng dummy(0);
  BaseModel m = init_base_model(cfg, dummy);
  m.for_each_tensor_mut([&c, &path](const std::string& name, Tensor& t) {
    const Tensor& src = c.require(name);
    if (src.shape != t.shape)
      fail(ErrorKind::Format, path.string() + ": tensor '" + name + "' has shape " +
                                  shape_str(src.shape) + ", expected " + shape_str(t.shape));
    t = src;
  });
  return m;
}

BaseModel quantized_copy(const BaseModel& model, const QuantizationSpec& spec) {
  BaseModel m = model;
  m.for_each_tensor_mut([&spec](const std::string&, Tensor& t) {
    if (t.rank() == 2) t = quantize_dequantize(t, spec);
  });
  return m;
}

BaseModel merged_copy(const BaseModel& model, const AdapterBundle& bundle) {
  if (bundle.num_layers != model.config.num_layers || bundle.d != model.config.d_model ||
      bundle.k != model.config.d_model)
    fail(ErrorKind::Dimension, "bundle dims do not match base model");
  BaseModel m = bundle.method.method == PeftMethod::QLoRA
                    ? quantized_copy(model, bundle.method.quant)
                    : model;
  for (int64_t l = 0; l < bundle.num_layers; ++l)
    for (TargetMatrix t : bundle.target_set) {
      const Tensor delta = materialize(bundle, static_cast<int>(l), t);
      Tensor& w = m.attn_weight(static_cast<int>(l), t);
      for (size_t i = 0; i < w.data.size(); ++i) w.data[i] += delta.data[i];
    }
  return m;
}

namespace {

using Var = Graph::Var;

Var leaf_of(Graph& g, Tensor& t, bool trainable, double lr_mult,
            std::vector<ParamBinding>* bindings) {
  if (!trainable) return g.constant(t);
  Tensor copy = t;
  copy.requires_grad = true;
  Var v = g.leaf(copy);
  if (bindings) bindings->push_back({&t, v, lr_mult});
  return v;
}

struct AdapterTermBuilder {
  Graph& g;
  AdapterBundle* bundle;
  bool train;
  std::vector<ParamBinding>* bindings;

  // Returns y [N, d] given activations [N, k]: the extra adapter path for
  // one projection, or an invalid Var when this matrix is not adapted.
  // DoRA instead replaces the whole projection, signalled via `replaces`.
  Var build(int layer, TargetMatrix t, Var act, const Tensor& w0, bool& replaces) {
    replaces = false;
    if (!bundle || bundle->target_index(t) < 0) return Var{};
    MatrixDelta& m = bundle->mat(layer, t);
    const PeftMethod method = bundle->method.method;
    if (m.has_dense) {
      Var dv = leaf_of(g, m.dense, train, 1.0, bindings);
      return g.matmul(act, g.transpose(dv));
    }
    switch (method) {
      case PeftMethod::LoRA:
      case PeftMethod::QLoRA:
      case PeftMethod::LoRAPlus: {
        const double b_mult = method == PeftMethod::LoRAPlus ? bundle->method.lr_ratio : 1.0;
        Var bv = leaf_of(g, m.lora_b, train, b_mult, bindings);
        Var av = leaf_of(g, m.lora_a, train, 1.0, bindings);
        return g.matmul(g.matmul(act, g.transpose(av)), g.transpose(bv));
      }
      case PeftMethod::AdaLoRA: {
        Var pv = leaf_of(g, m.ada_p, train, 1.0, bindings);
        Var lv = leaf_of(g, m.ada_lambda, train, 1.0, bindings);
        Var qv = leaf_of(g, m.ada_q, train, 1.0, bindings);
        Var t1 = g.matmul(act, g.transpose(qv));
        Var t2 = g.scale_columns(t1, lv);
        return g.matmul(t2, g.transpose(pv));
      }
      case PeftMethod::DoRA: {
        // W' = (V + BA) columns scaled by m_j / ||(V+BA)_j||
        replaces = true;
        Var bv = leaf_of(g, m.lora_b, train, 1.0, bindings);
        Var av = leaf_of(g, m.lora_a, train, 1.0, bindings);
        Var mv = leaf_of(g, m.dora_m, train, 1.0, bindings);
        Var vb = g.add(g.constant(m.dora_v), g.matmul(bv, av));
        Var norms = g.column_norms(vb);
        Var w = g.divide(mv, norms);
        Var wprime = g.scale_columns(vb, w);
        (void)w0;
        return g.matmul(act, g.transpose(wprime));
      }
    }
    return Var{};
  }
};

}  // namespace

Graph::Var base_forward(Graph& g, BaseModel& model, const std::vector<int>& tokens, int64_t batch,
                        const ForwardOptions& opts, std::vector<ParamBinding>* bindings) {
  const BaseModelConfig& cfg = model.config;
  const int64_t T = cfg.seq_len, D = cfg.d_model, H = cfg.heads, hd = cfg.head_dim();
  if (static_cast<int64_t>(tokens.size()) != batch * T)
    fail(ErrorKind::Dimension, "token batch has wrong length");
  const bool tb = opts.train_base;
  AdapterTermBuilder adapter{g, opts.bundle, opts.bundle && opts.train_adapter, bindings};
  if (opts.bundle &&
      (opts.bundle->num_layers != cfg.num_layers || opts.bundle->d != D || opts.bundle->k != D))
    fail(ErrorKind::Dimension, "adapter bundle dims do not match base model");

  Var emb_table = leaf_of(g, model.embed, tb, 1.0, bindings);
  Var pos_table = leaf_of(g, model.pos, tb, 1.0, bindings);
  std::vector<int> pos_ids(static_cast<size_t>(batch * T));
  for (int64_t b = 0; b < batch; ++b)
    for (int64_t t = 0; t < T; ++t) pos_ids[static_cast<size_t>(b * T + t)] = static_cast<int>(t);
  Var x = g.add(g.embedding(emb_table, tokens), g.embedding(pos_table, pos_ids));  // [B*T, D]

  const double attn_scale = 1.0 / std::sqrt(static_cast<double>(hd));
  for (int64_t l = 0; l < cfg.num_layers; ++l) {
    auto& lw = model.layers[static_cast<size_t>(l)];
    Var ln1_g = leaf_of(g, lw.ln1_g, tb, 1.0, bindings);
    Var ln1_b = leaf_of(g, lw.ln1_b, tb, 1.0, bindings);
    Var h = g.layernorm_lastdim(x, ln1_g, ln1_b);

    auto project = [&](TargetMatrix t, Tensor& w, Var act) {
      bool replaces = false;
      Var extra = adapter.build(static_cast<int>(l), t, act, w, replaces);
      if (replaces) return extra;  // DoRA rebuilds the full projection
      Var base = g.matmul(act, g.transpose(leaf_of(g, w, tb, 1.0, bindings)));
      return extra.valid() ? g.add(base, extra) : base;
    };

    Var q = project(TargetMatrix::Q, lw.wq, h);
    Var kk = project(TargetMatrix::K, lw.wk, h);
    Var v = project(TargetMatrix::V, lw.wv, h);

    auto to_heads = [&](Var m) {
      return g.reshape(g.swap_axes12(g.reshape(m, Shape{batch, T, H, hd})),
                       Shape{batch * H, T, hd});
    };
    Var qh = to_heads(q);
    Var kh = to_heads(kk);
    Var vh = to_heads(v);
    Var scores = g.scale(g.batched_matmul(qh, g.batched_transpose(kh)), attn_scale);
    Var probs = g.softmax_lastdim(scores);
    Var ctx = g.batched_matmul(probs, vh);  // [B*H, T, hd]
    Var merged = g.reshape(
        g.swap_axes12(g.reshape(ctx, Shape{batch, H, T, hd})), Shape{batch * T, D});
    Var attn_out = project(TargetMatrix::O, lw.wo, merged);
    x = g.add(x, attn_out);

    Var ln2_g = leaf_of(g, lw.ln2_g, tb, 1.0, bindings);
    Var ln2_b = leaf_of(g, lw.ln2_b, tb, 1.0, bindings);
    Var h2 = g.layernorm_lastdim(x, ln2_g, ln2_b);
    Var w1 = leaf_of(g, lw.w1, tb, 1.0, bindings);
    Var b1 = leaf_of(g, lw.b1, tb, 1.0, bindings);
    Var w2 = leaf_of(g, lw.w2, tb, 1.0, bindings);
    Var b2 = leaf_of(g, lw.b2, tb, 1.0, bindings);
    Var ff = g.relu(g.add_bias(g.matmul(h2, g.transpose(w1)), b1));
    Var ff_out = g.add_bias(g.matmul(ff, g.transpose(w2)), b2);
    x = g.add(x, ff_out);
  }

  Var lnf_g = leaf_of(g, model.lnf_g, tb, 1.0, bindings);
  Var lnf_b = leaf_of(g, model.lnf_b, tb, 1.0, bindings);
  Var xf = g.layernorm_lastdim(x, lnf_g, lnf_b);
  Var pooled = g.mean_axis1(g.reshape(xf, Shape{batch, T, D}));  // [B, D]
  Var cls_w = leaf_of(g, model.cls_w, tb, 1.0, bindings);
  Var cls_b = leaf_of(g, model.cls_b, tb, 1.0, bindings);
  return g.add_bias(g.matmul(pooled, g.transpose(cls_w)), cls_b);  // [B, C]
}

std::vector<int> predict_classes(BaseModel& model, const std::vector<int>& tokens, int64_t batch,
                                 AdapterBundle* bundle) {
  Graph g;
  ForwardOptions opts;
  opts.bundle = bundle;
  Var logits = base_forward(g, model, tokens, batch, opts, nullptr);
  const Tensor& lv = g.val(logits);
  std::vector<int> out(static_cast<size_t>(batch));
  const int64_t C = lv.dim(1);
  for (int64_t b = 0; b < batch; ++b) {
    int best = 0;
    for (int64_t c = 1; c < C; ++c)
      if (lv.at(b, c) > lv.at(b, best)) best = static_cast<int>(c);
    out[static_cast<size_t>(b)] = best;
  }
  return out;
}

}  // namespace sentinel
