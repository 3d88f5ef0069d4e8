// SPDX-License-Identifier: Apache-2.0
#include "sentinel/adapter.hpp"

#include <algorithm>
#include <cmath>

#include "sentinel/errors.hpp"

namespace sentinel {

std::string peft_method_name(PeftMethod m) {
  switch (m) {
    case PeftMethod::LoRA: return "lora";
    case PeftMethod::QLoRA: return "qlora";
    case PeftMethod::DoRA: return "dora";
    case PeftMethod::LoRAPlus: return "lora_plus";
    case PeftMethod::AdaLoRA: return "adalora";
  }
  fail(ErrorKind::Config, "unknown PEFT method tag");
}

PeftMethod peft_method_from_name(const std::string& s) {
  if (s == "lora") return PeftMethod::LoRA;
  if (s == "qlora") return PeftMethod::QLoRA;
  if (s == "dora") return PeftMethod::DoRA;
  if (s == "lora_plus") return PeftMethod::LoRAPlus;
  if (s == "adalora") return PeftMethod::AdaLoRA;
  fail(ErrorKind::Config, "unknown PEFT method '" + s + "'");
}

TargetMatrix target_matrix_from_char(char c) {
  switch (c) {
    case 'q': return TargetMatrix::Q;
    case 'k': return TargetMatrix::K;
    case 'v': return TargetMatrix::V;
    case 'o': return TargetMatrix::O;
    default: fail(ErrorKind::Config, std::string("unknown target matrix '") + c + "'");
  }
}

std::vector<TargetMatrix> canonical_target_set(std::vector<TargetMatrix> targets) {
  std::sort(targets.begin(), targets.end(),
            [](TargetMatrix a, TargetMatrix b) { return static_cast<int>(a) < static_cast<int>(b); });
  targets.erase(std::unique(targets.begin(), targets.end()), targets.end());
  return targets;
}

// ---- quantization ----

QuantizationSpec QuantizationSpec::normal_float_default() {
  QuantizationSpec spec;
  spec.bits = 4;
  spec.block_size = 64;
  // Normal quantiles at (2i+1)/32, rescaled so the extremes hit +-1; the
  // middle pair is snapped to zero so the codebook contains an exact zero.
  spec.codebook = {
      -1.00000000f, -0.70756877f, -0.54220910f, -0.41681885f, -0.31090474f, -0.21594631f,
      -0.12734098f, 0.00000000f,  0.00000000f,  0.12734098f,  0.21594631f,  0.31090474f,
      0.41681885f,  0.54220910f,  0.70756877f,  1.00000000f};
  return spec;
}

void QuantizationSpec::validate() const {
  if (block_size < 1) fail(ErrorKind::Config, "quantization block_size must be >= 1");
  if (codebook.empty()) fail(ErrorKind::Config, "quantization codebook is empty");
  if (!std::is_sorted(codebook.begin(), codebook.end()))
    fail(ErrorKind::Config, "quantization codebook must be sorted");
  if (codebook.front() < -1.0f || codebook.back() > 1.0f)
    fail(ErrorKind::Config, "quantization codebook must lie in [-1, 1]");
  bool has_zero = false;
  for (float v : codebook) has_zero |= v == 0.0f;
  if (!has_zero) fail(ErrorKind::Config, "quantization codebook must include 0");
  for (float v : codebook) {
    bool has_neg = false;
    for (float w : codebook) has_neg |= w == -v;
    if (!has_neg) fail(ErrorKind::Config, "quantization codebook must be symmetric about 0");
  }
}

namespace {

float snap_to_codebook(float x, const std::vector<float>& cb) {
  auto it = std::lower_bound(cb.begin(), cb.end(), x);
  if (it == cb.begin()) return cb.front();
  if (it == cb.end()) return cb.back();
  const float hi = *it;
  const float lo = *(it - 1);
  // ties go to the lower level, deterministically
  return (x - lo) <= (hi - x) ? lo : hi;
}

}  // namespace

Tensor quantize_dequantize(const Tensor& w, const QuantizationSpec& spec) {
  spec.validate();
  if (w.data.empty()) fail(ErrorKind::Dimension, "quantize_dequantize: empty tensor");
  Tensor out(w.shape);
  const int64_t n = w.numel();
  for (int64_t start = 0; start < n; start += spec.block_size) {
    const int64_t end = std::min(n, start + spec.block_size);
    float scale = 0.0f;
    for (int64_t i = start; i < end; ++i) scale = std::max(scale, std::abs(w.data[static_cast<size_t>(i)]));
    if (scale == 0.0f) {
      for (int64_t i = start; i < end; ++i) out.data[static_cast<size_t>(i)] = 0.0f;
      continue;
    }
    for (int64_t i = start; i < end; ++i) {
      const float t = w.data[static_cast<size_t>(i)] / scale;
      out.data[static_cast<size_t>(i)] = scale * snap_to_codebook(t, spec.codebook);
    }
  }
  return out;
}

// ---- bundle construction ----

void MethodSpec::validate(int64_t d, int64_t k) const {
  if (rank < 1 || rank > std::min(d, k))
    fail(ErrorKind::Config, "rank " + std::to_string(rank) + " outside [1, min(d,k)=" +
                                std::to_string(std::min(d, k)) + "]");
  if (method == PeftMethod::LoRAPlus && lr_ratio < 1.0)
    fail(ErrorKind::Config, "LoRA+ learning-rate ratio must be >= 1");
  if (method == PeftMethod::QLoRA) quant.validate();
}

int AdapterBundle::target_index(TargetMatrix t) const {
  for (size_t i = 0; i < target_set.size(); ++i)
    if (target_set[i] == t) return static_cast<int>(i);
  return -1;
}

MatrixDelta& AdapterBundle::mat(int layer, TargetMatrix t) {
  const int ti = target_index(t);
  if (ti < 0)
    fail(ErrorKind::MissingMatrix,
         std::string("matrix '") + target_matrix_char(t) + "' not in bundle target set");
  return layers[static_cast<size_t>(layer)].mats[static_cast<size_t>(ti)];
}

const MatrixDelta& AdapterBundle::mat(int layer, TargetMatrix t) const {
  return const_cast<AdapterBundle*>(this)->mat(layer, t);
}

AdapterBundle init_bundle(const MethodSpec& spec, std::vector<TargetMatrix> targets,
                          int64_t num_layers, int64_t d, int64_t k,
                          const std::vector<std::vector<Tensor>>& base_weights, Rng& rng) {
  spec.validate(d, k);
  AdapterBundle b;
  b.method = spec;
  b.target_set = canonical_target_set(std::move(targets));
  if (b.target_set.empty()) fail(ErrorKind::Config, "empty target set");
  b.num_layers = num_layers;
  b.d = d;
  b.k = k;
  b.layers.resize(static_cast<size_t>(num_layers));
  const int64_t r = spec.rank;
  for (int64_t l = 0; l < num_layers; ++l) {
    auto& layer = b.layers[static_cast<size_t>(l)];
    layer.mats.resize(b.target_set.size());
    for (size_t ti = 0; ti < b.target_set.size(); ++ti) {
      MatrixDelta& m = layer.mats[ti];
      switch (spec.method) {
        case PeftMethod::LoRA:
        case PeftMethod::QLoRA:
        case PeftMethod::LoRAPlus:
          m.lora_b = Tensor::zeros(Shape{d, r});
          m.lora_a = Tensor::randn(Shape{r, k}, rng, 0.02);
          break;
        case PeftMethod::AdaLoRA:
          m.ada_p = Tensor::randn(Shape{d, r}, rng, 0.02);
          m.ada_lambda = Tensor::zeros(Shape{r});
          m.ada_q = Tensor::randn(Shape{r, k}, rng, 0.02);
          break;
        case PeftMethod::DoRA: {
          if (base_weights.empty())
            fail(ErrorKind::Config, "DoRA initialization requires base weights");
          const Tensor& w0 = base_weights[static_cast<size_t>(l)][ti];
          if (w0.shape != Shape{d, k})
            fail(ErrorKind::Dimension, "DoRA base weight shape mismatch");
          m.lora_b = Tensor::zeros(Shape{d, r});
          m.lora_a = Tensor::randn(Shape{r, k}, rng, 0.02);
          m.dora_v = w0;
          m.dora_m = Tensor(Shape{k});
          for (int64_t j = 0; j < k; ++j) {
            double acc = 0.0;
            for (int64_t i = 0; i < d; ++i) {
              const double v = static_cast<double>(w0.at(i, j));
              acc += v * v;
            }
            m.dora_m.at(j) = static_cast<float>(std::sqrt(acc));
          }
          break;
        }
      }
    }
  }
  return b;
}

// ---- materialization ----

Tensor materialize(const AdapterBundle& bundle, int layer, TargetMatrix t) {
  if (layer < 0 || layer >= static_cast<int>(bundle.layers.size()))
    fail(ErrorKind::Index, "layer " + std::to_string(layer) + " out of range");
  const int ti = bundle.target_index(t);
  if (ti < 0) {
    fail(ErrorKind::MissingMatrix,
         std::string("matrix '") + target_matrix_char(t) + "' not in target set");
  }
  const MatrixDelta& m = bundle.layers[static_cast<size_t>(layer)].mats[static_cast<size_t>(ti)];
  if (m.has_dense) return m.dense;

  switch (bundle.method.method) {
    case PeftMethod::LoRA:
    case PeftMethod::QLoRA:
    case PeftMethod::LoRAPlus:
      return matmul_value(m.lora_b, m.lora_a);
    case PeftMethod::AdaLoRA: {
      // P diag(lambda) Q
      Tensor lq(Shape{bundle.method.rank, bundle.k});
      for (int64_t i = 0; i < bundle.method.rank; ++i)
        for (int64_t j = 0; j < bundle.k; ++j)
          lq.at(i, j) = m.ada_lambda.at(i) * m.ada_q.at(i, j);
      return matmul_value(m.ada_p, lq);
    }
    case PeftMethod::DoRA: {
      // m . columns of (V + BA) / ||V + BA||_c, minus the frozen base V
      Tensor vb = matmul_value(m.lora_b, m.lora_a);
      for (size_t i = 0; i < vb.data.size(); ++i) vb.data[i] += m.dora_v.data[i];
      Tensor out(Shape{bundle.d, bundle.k});
      for (int64_t j = 0; j < bundle.k; ++j) {
        double acc = 0.0;
        for (int64_t i = 0; i < bundle.d; ++i) {
          const double v = static_cast<double>(vb.at(i, j));
          acc += v * v;
        }
        const double norm = std::sqrt(acc);
        if (norm == 0.0)
          fail(ErrorKind::Singularity,
               "DoRA column " + std::to_string(j) + " of layer " + std::to_string(layer) +
                   " has zero norm");
        const double s = static_cast<double>(m.dora_m.at(j)) / norm;
        for (int64_t i = 0; i < bundle.d; ++i)
          out.at(i, j) = static_cast<float>(static_cast<double>(vb.at(i, j)) * s -
                                            static_cast<double>(m.dora_v.at(i, j)));
      }
      return out;
    }
  }
  fail(ErrorKind::Method, "unhandled PEFT method");
}

Tensor dora_column_norms(const AdapterBundle& bundle, int layer, TargetMatrix t) {
  if (bundle.method.method != PeftMethod::DoRA)
    fail(ErrorKind::Method, "dora_column_norms requires a DoRA bundle");
  const MatrixDelta& m = bundle.mat(layer, t);
  Tensor delta = materialize(bundle, layer, t);
  Tensor norms(Shape{bundle.k});
  for (int64_t j = 0; j < bundle.k; ++j) {
    double acc = 0.0;
    for (int64_t i = 0; i < bundle.d; ++i) {
      const double v = static_cast<double>(delta.at(i, j)) + static_cast<double>(m.dora_v.at(i, j));
      acc += v * v;
    }
    norms.at(j) = static_cast<float>(std::sqrt(acc));
  }
  return norms;
}

// ---- persistence ----

namespace {

std::string tensor_name(int layer, TargetMatrix t, const char* part) {
  return "layer." + std::to_string(layer) + "." + target_matrix_char(t) + "." + part;
}

void push_if(Container& c, const std::string& name, const Tensor& t) {
  if (t.numel() > 0 && !t.shape.empty()) c.tensors.push_back({name, t});
}

}  // namespace

void save_bundle(const std::filesystem::path& path, const AdapterBundle& bundle) {
  if (bundle.target_set.empty())
    fail(ErrorKind::Config, "refusing to save bundle with empty target set");
  if (bundle.layers.size() != static_cast<size_t>(bundle.num_layers))
    fail(ErrorKind::Dimension, "bundle layer count mismatch");
  Container c;
  c.meta["kind"] = "adapter-bundle";
  c.meta["method"] = peft_method_name(bundle.method.method);
  c.meta["r"] = bundle.method.rank;
  c.meta["lr_ratio"] = bundle.method.lr_ratio;
  c.meta["L"] = bundle.num_layers;
  c.meta["d"] = bundle.d;
  c.meta["k"] = bundle.k;
  std::string ts;
  for (TargetMatrix t : bundle.target_set) ts += target_matrix_char(t);
  c.meta["target_set"] = ts;
  c.meta["label"] = bundle.label;
  c.meta["seed"] = bundle.meta.seed;
  c.meta["task"] = bundle.meta.task_id;
  c.meta["asr"] = bundle.meta.asr;
  c.meta["ca"] = bundle.meta.ca;
  c.meta["perturbed"] = bundle.meta.perturbed;
  c.meta["note"] = bundle.meta.note;
  if (bundle.method.method == PeftMethod::QLoRA) {
    c.meta["quant_block_size"] = bundle.method.quant.block_size;
    c.meta["quant_codebook"] = bundle.method.quant.codebook;
  }
  for (int64_t l = 0; l < bundle.num_layers; ++l) {
    for (size_t ti = 0; ti < bundle.target_set.size(); ++ti) {
      const TargetMatrix t = bundle.target_set[ti];
      const MatrixDelta& m = bundle.layers[static_cast<size_t>(l)].mats[ti];
      const int li = static_cast<int>(l);
      push_if(c, tensor_name(li, t, "B"), m.lora_b);
      push_if(c, tensor_name(li, t, "A"), m.lora_a);
      push_if(c, tensor_name(li, t, "m"), m.dora_m);
      push_if(c, tensor_name(li, t, "V"), m.dora_v);
      push_if(c, tensor_name(li, t, "P"), m.ada_p);
      push_if(c, tensor_name(li, t, "Lambda"), m.ada_lambda);
      push_if(c, tensor_name(li, t, "Q"), m.ada_q);
      if (m.has_dense) push_if(c, tensor_name(li, t, "dense"), m.dense);
    }
  }
  save_container(path, c);
}

AdapterBundle load_bundle(const std::filesystem::path& path) {
  Container c = load_container(path);
  if (!c.meta.contains("kind") || c.meta["kind"] != "adapter-bundle")
    fail(ErrorKind::Format, path.string() + ": not an adapter bundle");
  AdapterBundle b;
  b.method.method = peft_method_from_name(c.meta.at("method").get<std::string>());
  b.method.rank = c.meta.at("r").get<int64_t>();
  b.method.lr_ratio = c.meta.at("lr_ratio").get<double>();
  b.num_layers = c.meta.at("L").get<int64_t>();
  b.d = c.meta.at("d").get<int64_t>();
  b.k = c.meta.at("k").get<int64_t>();
  for (char ch : c.meta.at("target_set").get<std::string>())
    b.target_set.push_back(target_matrix_from_char(ch));
  b.label = c.meta.at("label").get<int>();
  b.meta.seed = c.meta.at("seed").get<uint64_t>();
  b.meta.task_id = c.meta.at("task").get<std::string>();
  b.meta.asr = c.meta.at("asr").get<double>();
  b.meta.ca = c.meta.at("ca").get<double>();
  b.meta.perturbed = c.meta.at("perturbed").get<bool>();
  b.meta.note = c.meta.at("note").get<std::string>();
  if (b.method.method == PeftMethod::QLoRA) {
    b.method.quant.block_size = c.meta.at("quant_block_size").get<int64_t>();
    b.method.quant.codebook = c.meta.at("quant_codebook").get<std::vector<float>>();
  }
  b.layers.resize(static_cast<size_t>(b.num_layers));
  for (auto& layer : b.layers) layer.mats.resize(b.target_set.size());

  size_t expected = 0;
  for (const auto& nt : c.tensors) {
    // layer.{i}.{q|k|v|o}.{part}
    const std::string& name = nt.name;
    size_t p1 = name.find('.');
    size_t p2 = name.find('.', p1 + 1);
    size_t p3 = name.find('.', p2 + 1);
    if (p1 == std::string::npos || p2 == std::string::npos || p3 == std::string::npos ||
        name.substr(0, p1) != "layer")
      fail(ErrorKind::Format, path.string() + ": unexpected tensor name '" + name + "'");
    const int layer = std::stoi(name.substr(p1 + 1, p2 - p1 - 1));
    const TargetMatrix t = target_matrix_from_char(name[p2 + 1]);
    const std::string part = name.substr(p3 + 1);
    if (layer < 0 || layer >= static_cast<int>(b.num_layers))
      fail(ErrorKind::Format, path.string() + ": tensor layer index out of range in '" + name + "'");
    MatrixDelta& m = b.mat(layer, t);
    if (part == "B") m.lora_b = nt.tensor;
    else if (part == "A") m.lora_a = nt.tensor;
    else if (part == "m") m.dora_m = nt.tensor;
    else if (part == "V") m.dora_v = nt.tensor;
    else if (part == "P") m.ada_p = nt.tensor;
    else if (part == "Lambda") m.ada_lambda = nt.tensor;
    else if (part == "Q") m.ada_q = nt.tensor;
    else if (part == "dense") {
      m.dense = nt.tensor;
      m.has_dense = true;
    } else {
      fail(ErrorKind::Format, path.string() + ": unknown tensor part '" + part + "'");
    }
    ++expected;
  }
  if (expected != c.tensors.size())
    fail(ErrorKind::Format, path.string() + ": tensor count mismatch");
  return b;
}

namespace {

bool tensors_equal(const Tensor& a, const Tensor& b) {
  return a.shape == b.shape && a.data == b.data;
}

}  // namespace

bool bundles_bitwise_equal(const AdapterBundle& a, const AdapterBundle& b) {
  if (a.method.method != b.method.method || a.method.rank != b.method.rank ||
      a.method.lr_ratio != b.method.lr_ratio || a.target_set != b.target_set ||
      a.num_layers != b.num_layers || a.d != b.d || a.k != b.k || a.label != b.label ||
      a.meta.seed != b.meta.seed || a.meta.task_id != b.meta.task_id || a.meta.asr != b.meta.asr ||
      a.meta.ca != b.meta.ca || a.meta.perturbed != b.meta.perturbed || a.meta.note != b.meta.note)
    return false;
  for (int64_t l = 0; l < a.num_layers; ++l)
    for (size_t ti = 0; ti < a.target_set.size(); ++ti) {
      const MatrixDelta& ma = a.layers[static_cast<size_t>(l)].mats[ti];
      const MatrixDelta& mb = b.layers[static_cast<size_t>(l)].mats[ti];
      if (ma.has_dense != mb.has_dense) return false;
      if (!tensors_equal(ma.lora_b, mb.lora_b) || !tensors_equal(ma.lora_a, mb.lora_a) ||
          !tensors_equal(ma.dora_m, mb.dora_m) || !tensors_equal(ma.dora_v, mb.dora_v) ||
          !tensors_equal(ma.ada_p, mb.ada_p) || !tensors_equal(ma.ada_lambda, mb.ada_lambda) ||
          !tensors_equal(ma.ada_q, mb.ada_q) || !tensors_equal(ma.dense, mb.dense))
        return false;
    }
  return true;
}

}  // namespace sentinel
