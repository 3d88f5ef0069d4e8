// SPDX-License-Identifier: Apache-2.0
#include "sentinel/mitigation.hpp"

#include <fstream>

#include "sentinel/adam.hpp"
#include "sentinel/errors.hpp"
#include "sentinel/hash.hpp"
#include "sentinel/transform.hpp"

namespace sentinel {

namespace {

void scan_for_triggers(const Dataset& data) {
  for (int64_t i = 0; i < data.size(); ++i)
    for (int tok : data.row(i))
      if (tok >= vocab::kRareTriggerFirst && tok < vocab::kPhraseFirst + vocab::kPhraseCount)
        fail(ErrorKind::Contamination, "reserved trigger token " + std::to_string(tok) +
                                           " found in 'clean' subset row " + std::to_string(i));
}

uint64_t bundle_hash(const AdapterBundle& b) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& layer : b.layers)
    for (const auto& m : layer.mats) {
      h = tensor_checksum(m.lora_b, h);
      h = tensor_checksum(m.lora_a, h);
      h = tensor_checksum(m.dora_m, h);
      h = tensor_checksum(m.dora_v, h);
      h = tensor_checksum(m.ada_p, h);
      h = tensor_checksum(m.ada_lambda, h);
      h = tensor_checksum(m.ada_q, h);
      if (m.has_dense) h = tensor_checksum(m.dense, h);
    }
  return h;
}

MitigationOutcome cleanse_impl(const BaseModel& base, const AdapterBundle& original,
                               AdapterBundle working, const std::string& method, double rho,
                               const Dataset& clean_subset, const ToyTask& task,
                               const TriggerSpec& spec, const Dataset& test_data,
                               const MitigationHyper& hyper, uint64_t seed) {
  scan_for_triggers(clean_subset);
  const uint64_t base_before = base_checksum(base);

  MitigationOutcome out;
  out.method = method;
  out.rho = rho;
  out.before = eval_asr_ca(base, &original, task, spec, test_data, Rng(seed).fork(90).seed());

  if (hyper.epochs > 0) {
    FinetuneHyper ft;
    ft.epochs = hyper.epochs;
    ft.batch = hyper.batch;
    ft.lr = hyper.lr;
    // continue training this bundle's parameters on clean data only
    working = [&] {
      AdapterBundle b = std::move(working);
      Rng root(seed);
      Rng train_rng = root.fork(2);
      const BaseModel train_base_model = b.method.method == PeftMethod::QLoRA
                                             ? quantized_copy(base, b.method.quant)
                                             : base;
      BaseModel* train_base = const_cast<BaseModel*>(&train_base_model);
      AdamConfig adam;
      adam.lr = ft.lr;
      std::vector<AdamState> states;
      for (int epoch = 0; epoch < ft.epochs; ++epoch) {
        std::vector<size_t> order =
            train_rng.permutation(static_cast<size_t>(clean_subset.size()));
        for (size_t lo = 0; lo < order.size(); lo += ft.batch) {
          const size_t hi = std::min(order.size(), lo + static_cast<size_t>(ft.batch));
          std::vector<int> tokens((hi - lo) * static_cast<size_t>(clean_subset.seq_len()));
          std::vector<int> labels;
          for (size_t bi = lo; bi < hi; ++bi) {
            const auto row = clean_subset.row(static_cast<int64_t>(order[bi]));
            std::copy(row.begin(), row.end(),
                      tokens.begin() + static_cast<int64_t>(bi - lo) * clean_subset.seq_len());
            labels.push_back(clean_subset.labels[order[bi]]);
          }
          Graph g;
          std::vector<ParamBinding> bindings;
          ForwardOptions opts;
          opts.bundle = &b;
          opts.train_adapter = true;
          Graph::Var logits =
              base_forward(g, *train_base, tokens, static_cast<int64_t>(hi - lo), opts, &bindings);
          Graph::Var loss = g.softmax_xent(logits, labels);
          if (!std::isfinite(g.val(loss).data[0]))
            fail(ErrorKind::Numeric, "mitigation SFT loss is non-finite");
          g.backward(loss);
          if (states.size() != bindings.size()) states.resize(bindings.size());
          for (size_t i = 0; i < bindings.size(); ++i)
            adam_step(*bindings[i].tensor, g.grad(bindings[i].var).data, states[i], adam,
                      bindings[i].lr_mult);
        }
      }
      return b;
    }();
  }

  if (base_checksum(base) != base_before)
    fail(ErrorKind::Contamination, "base weights changed during mitigation");

  working.meta.note = "mitigated method=" + method + " rho=" + std::to_string(rho) +
                      " origin=" + hash_hex(bundle_hash(original));
  out.after = eval_asr_ca(base, &working, task, spec, test_data, Rng(seed).fork(91).seed());
  out.bundle = std::move(working);
  return out;
}

}  // namespace

MitigationOutcome sft_cleanse(const BaseModel& base, const AdapterBundle& bundle,
                              const Dataset& clean_subset, const ToyTask& task,
                              const TriggerSpec& spec, const Dataset& test_data,
                              const MitigationHyper& hyper, uint64_t seed) {
  return cleanse_impl(base, bundle, bundle, "sft", 0.0, clean_subset, task, spec, test_data,
                      hyper, seed);
}

MitigationOutcome fine_mix(const BaseModel& base, const AdapterBundle& bundle, double rho,
                           const Dataset& clean_subset, const ToyTask& task,
                           const TriggerSpec& spec, const Dataset& test_data,
                           const MitigationHyper& hyper, uint64_t seed) {
  if (rho < 0.0 || rho > 1.0) fail(ErrorKind::Config, "fine_mix: rho must be in [0, 1]");
  AdapterBundle mixed = bundle;
  if (rho != 0.0) {
    const float keep = static_cast<float>(1.0 - rho);
    // scale the effective delta; exact on the factored forms where one
    // factor is linear in the delta, dense otherwise
    switch (bundle.method.method) {
      case PeftMethod::LoRA:
      case PeftMethod::QLoRA:
      case PeftMethod::LoRAPlus:
        for (auto& layer : mixed.layers)
          for (auto& m : layer.mats) {
            if (m.has_dense)
              for (auto& v : m.dense.data) v *= keep;
            else
              for (auto& v : m.lora_b.data) v *= keep;
          }
        break;
      case PeftMethod::AdaLoRA:
        for (auto& layer : mixed.layers)
          for (auto& m : layer.mats) {
            if (m.has_dense)
              for (auto& v : m.dense.data) v *= keep;
            else
              for (auto& v : m.ada_lambda.data) v *= keep;
          }
        break;
      case PeftMethod::DoRA: {
        // the DoRA delta is not linear in any single factor; shrink densely
        for (int64_t l = 0; l < mixed.num_layers; ++l)
          for (size_t ti = 0; ti < mixed.target_set.size(); ++ti) {
            Tensor delta = materialize(bundle, static_cast<int>(l), mixed.target_set[ti]);
            for (auto& v : delta.data) v *= keep;
            MatrixDelta& m = mixed.layers[static_cast<size_t>(l)].mats[ti];
            m.dense = std::move(delta);
            m.has_dense = true;
          }
        break;
      }
    }
  }
  return cleanse_impl(base, bundle, std::move(mixed), "fine_mix", rho, clean_subset, task, spec,
                      test_data, hyper, seed);
}

void write_mitigation_csv(const std::filesystem::path& path,
                          const std::vector<MitigationRow>& rows,
                          const std::string& header_note) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(ErrorKind::Io, "cannot write " + path.string());
  if (!header_note.empty()) out << "# " << header_note << "\n";
  out << "method,rho,asr_before,asr_after,ca_before,ca_after\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%s,%.3f,%.6f,%.6f,%.6f,%.6f\n", r.method.c_str(), r.rho,
                  r.asr_before, r.asr_after, r.ca_before, r.ca_after);
    out << buf;
  }
}

}  // namespace sentinel
