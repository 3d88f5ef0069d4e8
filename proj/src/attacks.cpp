// SPDX-License-Identifier: Apache-2.0
#include "sentinel/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "sentinel/adam.hpp"
#include "sentinel/errors.hpp"
#include "sentinel/hash.hpp"

namespace sentinel {

std::string attack_kind_name(AttackKind k) {
  switch (k) {
    case AttackKind::None: return "none";
    case AttackKind::GaussStd: return "gauss_std";
    case AttackKind::GaussRatio: return "gauss_ratio";
    case AttackKind::FGSM: return "fgsm";
    case AttackKind::IFGSM: return "ifgsm";
    case AttackKind::PGD: return "pgd";
    case AttackKind::CW: return "cw";
  }
  fail(ErrorKind::Config, "bad attack kind");
}

AttackKind attack_kind_from_name(const std::string& s) {
  if (s == "none") return AttackKind::None;
  if (s == "gauss_std") return AttackKind::GaussStd;
  if (s == "gauss_ratio") return AttackKind::GaussRatio;
  if (s == "fgsm") return AttackKind::FGSM;
  if (s == "ifgsm") return AttackKind::IFGSM;
  if (s == "pgd") return AttackKind::PGD;
  if (s == "cw") return AttackKind::CW;
  fail(ErrorKind::Config, "unknown attack kind '" + s + "'");
}

std::string AttackConfig::params_str() const {
  std::ostringstream os;
  switch (kind) {
    case AttackKind::None: os << "-"; break;
    case AttackKind::GaussStd: os << "scale=" << scale; break;
    case AttackKind::GaussRatio: os << "parameter_ratio=" << parameter_ratio; break;
    case AttackKind::FGSM: os << "eps=" << epsilon; break;
    case AttackKind::IFGSM:
    case AttackKind::PGD: os << "eps=" << epsilon << " alpha=" << alpha << " iters=" << iters; break;
    case AttackKind::CW:
      os << "c=" << cw_c << " kappa=" << cw_kappa << " iter=" << cw_iters << " lr=" << cw_lr;
      break;
  }
  return os.str();
}

double bundle_delta_std(const AdapterBundle& bundle) {
  const FeatureTensor f = transform(bundle);
  return f.data.stddev();
}

namespace {

// New bundle carrying `data` as dense deltas; metadata notes the attack.
AdapterBundle densify(const AdapterBundle& bundle, const Tensor& data, const std::string& note) {
  AdapterBundle out = bundle;
  apply_dense_deltas(out, data);
  out.meta.perturbed = true;
  out.meta.note = note;
  return out;
}

// dLoss/dInput for CE toward `toward_label` on the surrogate, plus logits.
Tensor input_gradient(const DetectorModel& model, const Tensor& features, int toward_label,
                      Tensor* logits_out) {
  Graph g;
  const FeatureLayout& L = model.input_layout;
  Tensor in = features.reshaped(Shape{1, L.channels(), L.d, L.k});
  in.requires_grad = true;
  Graph::Var input = g.leaf(in);
  Graph::Var logits = detector_forward(g, model, input, false, nullptr, nullptr, nullptr);
  Graph::Var loss = g.softmax_xent(logits, {toward_label});
  g.backward(loss);
  if (logits_out) *logits_out = g.val(logits);
  return g.grad(input).reshaped(L.shape());
}

int surrogate_label(const DetectorModel& model, const Tensor& features) {
  const FeatureLayout& L = model.input_layout;
  FeatureTensor f;
  f.layout = L;
  f.data = features;
  return predict(model, f).label;
}

}  // namespace

AdapterBundle gauss_attack(const AdapterBundle& bundle, const AttackConfig& cfg, Rng& rng) {
  FeatureTensor f = transform(bundle);
  const int64_t plane = f.layout.d * f.layout.k;
  if (cfg.kind == AttackKind::GaussStd) {
    Tensor out = f.data;
    for (int64_t c = 0; c < f.layout.channels(); ++c) {
      // per-matrix element std scales the noise for that matrix
      Tensor view(Shape{plane});
      std::copy(f.data.data.begin() + c * plane, f.data.data.begin() + (c + 1) * plane,
                view.data.begin());
      const double sigma = view.stddev() * cfg.scale;
      if (sigma == 0.0) continue;
      for (int64_t i = 0; i < plane; ++i)
        out.data[static_cast<size_t>(c * plane + i)] += static_cast<float>(rng.gaussian(0.0, sigma));
    }
    return densify(bundle, out, "attack=gauss_std " + cfg.params_str());
  }
  if (cfg.kind != AttackKind::GaussRatio) fail(ErrorKind::Config, "gauss_attack: wrong kind");
  // exactly round(ratio * N) elements, chosen uniformly over the whole bundle
  Tensor out = f.data;
  const int64_t n = f.data.numel();
  const auto hits = static_cast<size_t>(std::llround(cfg.parameter_ratio * static_cast<double>(n)));
  std::vector<size_t> chosen = rng.sample_without_replacement(static_cast<size_t>(n), hits);
  // per-matrix sigma, fixed scale 5
  std::vector<double> sigma(static_cast<size_t>(f.layout.channels()));
  for (int64_t c = 0; c < f.layout.channels(); ++c) {
    Tensor view(Shape{plane});
    std::copy(f.data.data.begin() + c * plane, f.data.data.begin() + (c + 1) * plane,
              view.data.begin());
    sigma[static_cast<size_t>(c)] = view.stddev() * 5.0;
  }
  for (size_t pos : chosen) {
    const auto c = static_cast<size_t>(static_cast<int64_t>(pos) / plane);
    double noise = rng.gaussian(0.0, sigma[c]);
    if (noise == 0.0) noise = sigma[c] > 0.0 ? sigma[c] : 1e-12;  // keep the element count exact
    out.data[pos] += static_cast<float>(noise);
  }
  return densify(bundle, out, "attack=gauss_ratio " + cfg.params_str());
}

AdapterBundle fgsm_attack(const AdapterBundle& bundle, const DetectorModel& surrogate,
                          const AttackConfig& cfg) {
  FeatureTensor f = transform(bundle);
  const double eps = cfg.epsilon * bundle_delta_std(bundle);
  // ascend the backdoored-class loss == descend toward the benign class
  Tensor grad = input_gradient(surrogate, f.data, /*toward_label=*/1, nullptr);
  bool any = false;
  Tensor out = f.data;
  for (size_t i = 0; i < out.data.size(); ++i) {
    const float gv = grad.data[i];
    if (gv > 0.0f) {
      out.data[i] += static_cast<float>(eps);
      any = true;
    } else if (gv < 0.0f) {
      out.data[i] -= static_cast<float>(eps);
      any = true;
    }
  }
  if (!any || cfg.epsilon == 0.0) {
    // zero gradient everywhere (or zero budget): explicit no-op
    return densify(bundle, f.data, "attack=fgsm " + cfg.params_str() + " (no-op)");
  }
  return densify(bundle, out, "attack=fgsm " + cfg.params_str());
}

AdapterBundle iterative_attack(const AdapterBundle& bundle, const DetectorModel& surrogate,
                               const AttackConfig& cfg) {
  if (cfg.kind != AttackKind::IFGSM && cfg.kind != AttackKind::PGD)
    fail(ErrorKind::Config, "iterative_attack handles ifgsm/pgd only");
  if (cfg.alpha > cfg.epsilon) fail(ErrorKind::Config, "alpha must be <= epsilon");
  const double sd = bundle_delta_std(bundle);
  const float eps = static_cast<float>(cfg.epsilon * sd);
  const float alpha = static_cast<float>(cfg.alpha * sd);
  FeatureTensor f = transform(bundle);
  const Tensor& orig = f.data;
  Tensor cur = orig;
  if (cfg.kind == AttackKind::PGD) {
    Rng rng(cfg.seed);
    for (auto& v : cur.data) v += static_cast<float>(rng.uniform(-eps, eps));
  }
  for (int it = 0; it < cfg.iters; ++it) {
    Tensor grad = input_gradient(surrogate, cur, /*toward_label=*/1, nullptr);
    for (size_t i = 0; i < cur.data.size(); ++i) {
      float v = cur.data[i];
      const float gv = grad.data[i];
      if (gv > 0.0f) v += alpha;
      else if (gv < 0.0f) v -= alpha;
      // project back into the eps-ball around the original
      const float lo = orig.data[i] - eps;
      const float hi = orig.data[i] + eps;
      cur.data[i] = std::min(std::max(v, lo), hi);
    }
  }
  return densify(bundle, cur,
                 "attack=" + attack_kind_name(cfg.kind) + " " + cfg.params_str());
}

AdapterBundle cw_attack(const AdapterBundle& bundle, const DetectorModel& surrogate,
                        const AttackConfig& cfg) {
  if (cfg.cw_c <= 0.0) fail(ErrorKind::Config, "cw: c must be > 0");
  if (cfg.cw_kappa < 0.0) fail(ErrorKind::Config, "cw: kappa must be >= 0");
  const double sd = bundle_delta_std(bundle);
  FeatureTensor f = transform(bundle);
  const FeatureLayout& L = surrogate.input_layout;
  const Tensor orig = f.data;

  Tensor delta = Tensor::zeros(orig.shape);
  AdamConfig adam;
  adam.lr = cfg.cw_lr * sd;
  AdamState state;

  Tensor margin_w(Shape{2, 1}, {-1.0f, 1.0f});  // logits . w = l_bd - l_benign
  Tensor best_delta = delta;
  double best_obj = std::numeric_limits<double>::infinity();
  bool best_evades = false;

  for (int it = 0; it < cfg.cw_iters; ++it) {
    Graph g;
    Tensor dcopy = delta;
    dcopy.requires_grad = true;
    Graph::Var dv = g.leaf(dcopy);
    Graph::Var input = g.reshape(g.add(g.constant(orig), dv),
                                 Shape{1, L.channels(), L.d, L.k});
    Graph::Var logits = detector_forward(g, surrogate, input, false, nullptr, nullptr, nullptr);
    Graph::Var margin = g.matmul(logits, g.constant(margin_w));            // [1,1]
    Graph::Var clamped = g.add_scalar(g.relu(g.add_scalar(margin, cfg.cw_kappa)), -cfg.cw_kappa);
    Graph::Var obj = g.add(g.sum_all(g.mul(dv, dv)), g.scale(clamped, cfg.cw_c));
    const double obj_v = static_cast<double>(g.val(obj).data[0]);
    const Tensor& lv = g.val(logits);
    const bool evades = lv.at(0, 0) >= lv.at(0, 1);
    // best-found rule: prefer successful evasions, then lowest objective
    if ((evades && !best_evades) || (evades == best_evades && obj_v < best_obj)) {
      best_obj = obj_v;
      best_delta = delta;
      best_evades = evades;
    }
    g.backward(obj);
    adam_step(delta, g.grad(dv).data, state, adam);
  }
  // final iterate competes too
  {
    Tensor sum = orig;
    for (size_t i = 0; i < sum.data.size(); ++i) sum.data[i] += delta.data[i];
    FeatureTensor ff;
    ff.layout = f.layout;
    ff.data = sum;
    const Prediction p = predict(surrogate, ff);
    const bool evades = p.label == 0;
    if (evades && !best_evades) {
      best_delta = delta;
      best_evades = true;
    }
  }
  Tensor out = orig;
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += best_delta.data[i];
  Tensor bd(Shape{best_delta.numel()});
  bd.data = best_delta.data;
  return densify(bundle, out, "attack=cw " + cfg.params_str() + " l2=" + std::to_string(bd.norm2()));
}

AdapterBundle run_attack(const AdapterBundle& bundle, const DetectorModel& surrogate,
                         const AttackConfig& cfg) {
  switch (cfg.kind) {
    case AttackKind::None: {
      AdapterBundle out = bundle;
      return out;
    }
    case AttackKind::GaussStd:
    case AttackKind::GaussRatio: {
      Rng rng(cfg.seed);
      return gauss_attack(bundle, cfg, rng);
    }
    case AttackKind::FGSM: return fgsm_attack(bundle, surrogate, cfg);
    case AttackKind::IFGSM:
    case AttackKind::PGD: return iterative_attack(bundle, surrogate, cfg);
    case AttackKind::CW: return cw_attack(bundle, surrogate, cfg);
  }
  fail(ErrorKind::Config, "bad attack kind");
}

bool respects_linf_budget(const Tensor& original, const Tensor& perturbed, double eps) {
  if (!original.same_shape(perturbed)) return false;
  for (size_t i = 0; i < original.data.size(); ++i) {
    const double diff = std::abs(static_cast<double>(perturbed.data[i]) -
                                 static_cast<double>(original.data[i]));
    const double slack =
        std::abs(static_cast<double>(original.data[i])) * 1.2e-7 + 1e-12;  // one f32 ulp
    if (diff > eps + slack) return false;
  }
  return true;
}

AttackReport run_campaign(const BenchmarkManifest& manifest, const DetectorModel& surrogate,
                          const DetectorModel& target, const BaseModel& base,
                          const std::vector<AttackConfig>& configs, uint64_t seed) {
  AttackReport report;
  const ToyTask task = [&manifest] {
    ToyTask t;
    t.vocab_size = manifest.task.at("vocab_size").get<int64_t>();
    t.seq_len = manifest.task.at("seq_len").get<int64_t>();
    t.num_classes = manifest.task.at("num_classes").get<int>();
    t.rule = manifest.task.at("rule").get<std::string>();
    t.gen_seed = manifest.task.at("gen_seed").get<uint64_t>();
    t.marker_count = manifest.task.at("marker_count").get<int>();
    return t;
  }();
  const Dataset test_pool = load_dataset(manifest.root / "task_test.bin");

  // test-split backdoored adapters the target detector flags before attack
  struct Victim {
    std::string path;
    AdapterBundle bundle;
    TriggerSpec spec;
  };
  std::vector<Victim> victims;
  for (const auto* e : manifest.split_entries("test")) {
    if (e->label != 1) continue;
    Victim v;
    v.path = e->path;
    v.bundle = load_bundle(manifest.resolve(e->path));
    for (const auto& jt : manifest.config.at("triggers")) {
      if (jt.at("kind").get<std::string>() == e->trigger) {
        v.spec.kind = trigger_kind_from_name(e->trigger);
        v.spec.target_label = jt.at("target_label").get<int>();
        v.spec.poison_rate = jt.at("poison_rate").get<double>();
        v.spec.phrase_len = jt.value("phrase_len", 5);
      }
    }
    if (predict(target, transform(v.bundle)).label == 1) victims.push_back(std::move(v));
  }
  if (victims.empty())
    fail(ErrorKind::Evaluation, "no correctly flagged backdoored test adapters to attack");

  uint64_t attack_idx = 0;
  for (const AttackConfig& base_cfg : configs) {
    CampaignRow row;
    row.attack = attack_kind_name(base_cfg.kind);
    row.params = base_cfg.params_str();
    double ca_sum = 0.0, ca_sq = 0.0, asr_sum = 0.0, asr_sq = 0.0;
    size_t target_flips = 0, surrogate_flips = 0;
    for (size_t vi = 0; vi < victims.size(); ++vi) {
      AttackConfig cfg = base_cfg;
      cfg.seed = Rng(seed).fork(attack_idx * 10000 + vi).seed();
      const Victim& v = victims[vi];
      AdapterBundle perturbed = run_attack(v.bundle, surrogate, cfg);

      AttackAdapterRecord rec;
      rec.path = v.path;
      const Tensor f0 = transform(v.bundle).data;
      const Tensor f1 = transform(perturbed).data;
      double linf = 0.0, l2 = 0.0;
      for (size_t i = 0; i < f0.data.size(); ++i) {
        const double d = static_cast<double>(f1.data[i]) - static_cast<double>(f0.data[i]);
        linf = std::max(linf, std::abs(d));
        l2 += d * d;
      }
      rec.linf = linf;
      rec.l2 = std::sqrt(l2);
      // enforce the declared budget on every infinity-norm attack
      if (cfg.kind == AttackKind::FGSM || cfg.kind == AttackKind::IFGSM ||
          cfg.kind == AttackKind::PGD) {
        const double eps = cfg.epsilon * bundle_delta_std(v.bundle);
        if (!respects_linf_budget(f0, f1, eps))
          fail(ErrorKind::Numeric, "attack exceeded its infinity-norm budget on " + v.path);
      }
      FeatureTensor fp;
      fp.layout = surrogate.input_layout;
      fp.data = f1;
      rec.surrogate_flip = predict(surrogate, fp).label == 0;
      rec.target_flip = predict(target, fp).label == 0;
      const AsrCa scores = eval_asr_ca(base, &perturbed, task, v.spec, test_pool,
                                       Rng(seed).fork(500000 + vi).seed());
      rec.ca_under_attack = scores.ca;
      rec.asr_under_attack = scores.asr;

      ca_sum += scores.ca;
      ca_sq += scores.ca * scores.ca;
      asr_sum += scores.asr;
      asr_sq += scores.asr * scores.asr;
      if (rec.target_flip) ++target_flips;
      if (rec.surrogate_flip) ++surrogate_flips;
      row.adapters.push_back(std::move(rec));
    }
    const double n = static_cast<double>(victims.size());
    row.ca_under_attack = ca_sum / n;
    row.ca_std = std::sqrt(std::max(0.0, ca_sq / n - row.ca_under_attack * row.ca_under_attack));
    row.asr_under_attack = asr_sum / n;
    row.asr_std = std::sqrt(std::max(0.0, asr_sq / n - row.asr_under_attack * row.asr_under_attack));
    row.detector_asr = static_cast<double>(target_flips) / n;
    row.surrogate_asr = static_cast<double>(surrogate_flips) / n;
    report.rows.push_back(std::move(row));
    ++attack_idx;
  }
  return report;
}

void write_campaign_csv(const std::filesystem::path& path, const AttackReport& report) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(ErrorKind::Io, "cannot write " + path.string());
  out << "# delta space: " << report.delta_space << "\n";
  out << "attack,params,ca_under_attack,asr_under_attack,detector_asr\n";
  char buf[512];
  for (const auto& r : report.rows) {
    std::snprintf(buf, sizeof(buf), "%s,\"%s\",%.6f,%.6f,%.6f\n", r.attack.c_str(),
                  r.params.c_str(), r.ca_under_attack, r.asr_under_attack, r.detector_asr);
    out << buf;
  }
}

}  // namespace sentinel
