#pragma once

// The four experiments: ASR, layer/token sweeps, dimension sweeps with
// Monte-Carlo statistics, KL retention with the 0.1 gate, DIM-alignment
// tables, and PCA projection export.

#include <algorithm>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "conecraft/cone_opt.hpp"
#include "conecraft/interventions.hpp"
#include "conecraft/model.hpp"

namespace conecraft {

enum class ASRMode { kAblateTrue, kAddFalse };

inline std::string asr_mode_name(ASRMode m) {
  return m == ASRMode::kAblateTrue ? "ablate_true" : "add_false";
}

struct ASRRecord {
  std::string statement;
  bool before_yes = false;
  bool after_yes = false;
};

struct ASRReport {
  int n_prompts = 0;
  int baseline_truthful = 0;
  int flipped = 0;
  double asr = 0.0;
  std::string mode;
  std::vector<ASRRecord> records;
};

// ASR = flips among baseline-truthful prompts / baseline-truthful prompts.
// Answers are restricted Yes/No argmax at the final position; a probability
// shift that does not cross the argmax is not a flip.
inline ASRReport eval_asr(const ModelParameters& params, const ModelConfig& cfg,
                          const Tokenizer& tk, const InterventionPlan& plan,
                          const std::vector<LabeledStatement>& dataset,
                          ASRMode mode, const PromptTemplate& tmpl) {
  ASRReport rep;
  rep.mode = asr_mode_name(mode);
  bool want_label = mode == ASRMode::kAblateTrue;
  for (const auto& s : dataset) {
    if (s.label != want_label) continue;
    ++rep.n_prompts;
    TokenSequence seq = prompt_tokens(tk, s, tmpl);
    auto answer_yes = [&](const InterventionPlan& p) {
      ForwardResult r = forward_with_interventions(params, cfg, seq, p);
      auto [py, pn] = restricted_binary_probs(r.logits.row(r.logits.rows() - 1),
                                              tk.yes_id(), tk.no_id());
      return py >= pn;
    };
    bool before = answer_yes(InterventionPlan::none());
    bool truthful_before = before == s.label;
    ASRRecord rec{s.text, before, before};
    if (truthful_before) {
      ++rep.baseline_truthful;
      rec.after_yes = answer_yes(plan);
      bool truthful_after = rec.after_yes == s.label;
      if (!truthful_after) ++rep.flipped;
    }
    rep.records.push_back(rec);
  }
  if (rep.baseline_truthful == 0)
    throw RuntimeFailure("eval_asr: no baseline-truthful prompts (undefined ASR)");
  rep.asr = static_cast<double>(rep.flipped) / rep.baseline_truthful;
  return rep;
}

struct LayerSweepEntry {
  int layer = 0;
  double normalized_depth = 0.0;
  int token_position = 0;
  double asr = 0.0;
};

struct LayerSweepReport {
  std::vector<LayerSweepEntry> entries;  // L x positions cells
};

// Experiment 1: a 1-D cone per (layer, token position from end), each with
// the same optimization budget, evaluated in ablate_true mode on `eval_set`.
inline LayerSweepReport sweep_layers(
    const ModelParameters& params, const ModelConfig& cfg, const Tokenizer& tk,
    const TargetSet& targets, const std::vector<LabeledStatement>& eval_set,
    const PromptTemplate& tmpl, const ConeOptConfig& base_cfg,
    int n_positions = 5) {
  LayerSweepReport rep;
  for (int layer = 1; layer <= cfg.n_layers; ++layer) {
    for (int pos = 1; pos <= n_positions; ++pos) {
      ConeOptConfig oc = base_cfg;
      oc.k = 1;
      oc.n_cone_samples = 1;
      oc.layer = layer;
      oc.token_position = pos;
      double cell_asr = 0.0;
      try {
        ConeOptResult r = optimize_cone(params, cfg, targets, oc);
        InterventionPlan plan =
            InterventionPlan::ablation(Direction{r.cone.basis.col(0), true});
        cell_asr = eval_asr(params, cfg, tk, plan, eval_set,
                            ASRMode::kAblateTrue, tmpl)
                       .asr;
      } catch (const ContractError& e) {
        // a site can carry no truth signal at all (e.g. identical activations
        // for every prompt, making DIM degenerate); score it as no attack
        if (std::string(e.what()).find("degenerate") == std::string::npos)
          throw;
      }
      rep.entries.push_back({layer,
                             static_cast<double>(layer) / cfg.n_layers, pos,
                             cell_asr});
    }
  }
  return rep;
}

struct DimSweepEntry {
  int k = 0;
  double basis_asr = 0.0;  // joint ablation of all k basis vectors
  std::vector<double> sample_asrs;
  double min = 0, q1 = 0, median = 0, q3 = 0, max = 0;
};

struct DimSweepReport {
  std::vector<DimSweepEntry> entries;
  int n_samples = 0;
};

inline double quantile_sorted(const std::vector<double>& sorted, double q) {
  if (sorted.empty()) return 0.0;
  double pos = q * (sorted.size() - 1);
  size_t lo = static_cast<size_t>(pos);
  size_t hi = std::min(lo + 1, sorted.size() - 1);
  double frac = pos - lo;
  return sorted[lo] * (1.0 - frac) + sorted[hi] * frac;
}

// Experiment 2: cones of dimension 1..k_max, each optimized independently;
// 64 Monte-Carlo directions per cone evaluated in ablate_true mode.
inline DimSweepReport sweep_dims(const ModelParameters& params,
                                 const ModelConfig& cfg, const Tokenizer& tk,
                                 const TargetSet& targets,
                                 const std::vector<LabeledStatement>& eval_set,
                                 const PromptTemplate& tmpl,
                                 const ConeOptConfig& base_cfg, int k_max = 5,
                                 int mc_samples = 64,
                                 std::vector<ConceptCone>* cones_out = nullptr) {
  DimSweepReport rep;
  rep.n_samples = mc_samples;
  for (int k = 1; k <= k_max; ++k) {
    ConeOptConfig oc = base_cfg;
    oc.k = k;
    oc.n_cone_samples = std::max(base_cfg.n_cone_samples, k);
    if (k == 1) oc.n_cone_samples = 1;
    ConeOptResult r = optimize_cone(params, cfg, targets, oc);
    if (cones_out) cones_out->push_back(r.cone);

    DimSweepEntry entry;
    entry.k = k;
    entry.basis_asr = eval_asr(params, cfg, tk,
                               InterventionPlan::cone_ablation(r.cone),
                               eval_set, ASRMode::kAblateTrue, tmpl)
                          .asr;
    auto samples = sample_cone(r.cone, mc_samples, sub_seed(oc.seed, "mc-eval"));
    for (const auto& smp : samples) {
      InterventionPlan plan = InterventionPlan::ablation(smp.direction);
      entry.sample_asrs.push_back(
          eval_asr(params, cfg, tk, plan, eval_set, ASRMode::kAblateTrue, tmpl)
              .asr);
    }
    std::vector<double> sorted = entry.sample_asrs;
    std::sort(sorted.begin(), sorted.end());
    entry.min = sorted.front();
    entry.q1 = quantile_sorted(sorted, 0.25);
    entry.median = quantile_sorted(sorted, 0.5);
    entry.q3 = quantile_sorted(sorted, 0.75);
    entry.max = sorted.back();
    rep.entries.push_back(std::move(entry));
  }
  return rep;
}

struct KLVectorResult {
  int vector_index = 0;  // 0-based basis column
  std::vector<double> per_prompt_kl;
  double mean_kl = 0.0;
  bool passed = false;
};

struct KLReport {
  std::vector<KLVectorResult> vectors;
  double threshold = 0.1;
  double mean_kl = 0.0;  // over all vectors
  bool passed = false;   // every basis vector passes the gate
};

// Mean per-step KL of 30-token teacher-forced continuations, clean vs
// ablated, per retain prompt.
inline std::vector<double> kl_per_prompt(const ModelParameters& params,
                                         const ModelConfig& cfg,
                                         const Direction& dir,
                                         const std::vector<RetainTarget>& retain,
                                         int continuation_len) {
  std::vector<double> out;
  InterventionPlan plan = InterventionPlan::ablation(make_direction(dir.vector));
  for (const auto& rt : retain) {
    TokenSequence full = rt.prompt;
    full.ids.insert(full.ids.end(), rt.continuation.begin(),
                    rt.continuation.end());
    ForwardResult fr = forward_with_interventions(params, cfg, full, plan);
    Mat dists = softmax_rows(
        fr.logits.middleRows(rt.prompt.size() - 1, continuation_len));
    double kl_sum = 0.0;
    for (int s = 0; s < continuation_len; ++s) {
      for (int j = 0; j < dists.cols(); ++j) {
        double p0 = rt.base_dists(s, j);
        if (p0 > 0.0) kl_sum += p0 * (std::log(p0) - std::log(dists(s, j)));
      }
    }
    out.push_back(std::max(kl_sum, 0.0) / continuation_len);
  }
  return out;
}

// Experiment 3: the KL gate is applied per basis vector; the cone passes iff
// every basis vector's mean KL is within the threshold.
inline KLReport eval_kl_retention(const ModelParameters& params,
                                  const ModelConfig& cfg,
                                  const ConceptCone& cone,
                                  const std::vector<RetainTarget>& retain,
                                  int continuation_len = 30,
                                  double threshold = 0.1) {
  if (retain.empty()) throw ContractError("eval_kl_retention: empty retain set");
  KLReport rep;
  rep.threshold = threshold;
  rep.passed = true;
  for (int j = 0; j < cone.k; ++j) {
    KLVectorResult vr;
    vr.vector_index = j;
    vr.per_prompt_kl = kl_per_prompt(params, cfg,
                                     Direction{cone.basis.col(j), true}, retain,
                                     continuation_len);
    double sum = 0.0;
    for (double v : vr.per_prompt_kl) sum += v;
    vr.mean_kl = sum / vr.per_prompt_kl.size();
    vr.passed = vr.mean_kl <= threshold;
    rep.passed = rep.passed && vr.passed;
    rep.mean_kl += vr.mean_kl / cone.k;
    rep.vectors.push_back(std::move(vr));
  }
  return rep;
}

struct CosSimTable {
  // entries[c][r] = cos(v_{r+1}, DIM) for the cone of dimension dims[c]
  std::vector<int> dims;
  std::vector<std::vector<double>> entries;
  Direction dim;
};

// Experiment 4: cosine of every cone basis vector against the DIM direction
// computed at the same layer/position.
inline CosSimTable dim_vs_cone_alignment(const ModelParameters& params,
                                         const ModelConfig& cfg,
                                         const TargetSet& targets,
                                         const std::vector<ConceptCone>& cones) {
  if (cones.empty()) throw ContractError("dim_vs_cone_alignment: no cones");
  auto acts_true = readout_activations(params, cfg, targets.true_prompts,
                                       cones[0].layer, cones[0].token_position);
  auto acts_false = readout_activations(params, cfg, targets.false_prompts,
                                        cones[0].layer, cones[0].token_position);
  DimResult dim = dim_direction(acts_true, acts_false);
  CosSimTable table;
  table.dim = dim.direction;
  for (const auto& cone : cones) {
    table.dims.push_back(cone.k);
    std::vector<double> col;
    for (int j = 0; j < cone.k; ++j)
      col.push_back(cosine_similarity(Direction{cone.basis.col(j), true},
                                      dim.direction));
    table.entries.push_back(std::move(col));
  }
  return table;
}

struct PCALayerProjection {
  int layer = 0;  // 1..L+1 (L+1 = pre-unembed stream)
  std::vector<double> pc1, pc2;
  std::vector<bool> labels;
  std::vector<std::string> statements;
  double explained_var1 = 0.0, explained_var2 = 0.0;
};

struct PCAProjection {
  std::vector<PCALayerProjection> layers;
};

// Appendix-G style export: final-token activations per layer, mean-centered,
// projected onto the top two covariance eigenvectors. Eigenvector sign is
// fixed by making the largest-magnitude coordinate positive.
inline PCAProjection export_pca(const ModelParameters& params,
                                const ModelConfig& cfg, const Tokenizer& tk,
                                const std::vector<LabeledStatement>& dataset,
                                const PromptTemplate& tmpl) {
  if (dataset.size() < 3) throw ContractError("export_pca: need >= 3 statements");
  bool has_true = false, has_false = false;
  for (const auto& s : dataset) (s.label ? has_true : has_false) = true;
  if (!has_true || !has_false)
    throw ContractError("export_pca: dataset must contain both labels");

  int n = static_cast<int>(dataset.size());
  int n_sites = cfg.n_layers + 1;
  std::vector<Mat> acts(n_sites, Mat(n, cfg.d_model));
  for (int i = 0; i < n; ++i) {
    TokenSequence seq = prompt_tokens(tk, dataset[i], tmpl);
    ForwardResult r = forward(params, cfg, seq, /*capture=*/true);
    int pos = seq.size() - 1;
    for (int l = 0; l < cfg.n_layers; ++l) acts[l].row(i) = r.cache.pre[l].row(pos);
    acts[cfg.n_layers].row(i) = r.cache.final_pre.row(pos);
  }

  PCAProjection out;
  for (int l = 0; l < n_sites; ++l) {
    Mat centered = acts[l].rowwise() - acts[l].colwise().mean();
    Mat cov = centered.transpose() * centered / static_cast<double>(n - 1);
    Eigen::SelfAdjointEigenSolver<Mat> eig(cov);
    // eigenvalues ascending; take the last two
    int d = cfg.d_model;
    Vec v1 = eig.eigenvectors().col(d - 1);
    Vec v2 = eig.eigenvectors().col(d - 2);
    auto fix_sign = [](Vec& v) {
      int imax = 0;
      for (int i = 1; i < v.size(); ++i)
        if (std::abs(v(i)) > std::abs(v(imax))) imax = i;
      if (v(imax) < 0) v = -v;
    };
    fix_sign(v1);
    fix_sign(v2);
    PCALayerProjection lp;
    lp.layer = l + 1;
    lp.explained_var1 = eig.eigenvalues()(d - 1);
    lp.explained_var2 = eig.eigenvalues()(d - 2);
    Vec p1 = centered * v1, p2 = centered * v2;
    for (int i = 0; i < n; ++i) {
      lp.pc1.push_back(p1(i));
      lp.pc2.push_back(p2(i));
      lp.labels.push_back(dataset[i].label);
      lp.statements.push_back(dataset[i].text);
    }
    out.layers.push_back(std::move(lp));
  }
  return out;
}

// ---- JSON serialization ------------------------------------------------------

inline nlohmann::json to_json(const ASRReport& r) {
  nlohmann::json recs = nlohmann::json::array();
  for (const auto& rec : r.records)
    recs.push_back({{"statement", rec.statement},
                    {"before_yes", rec.before_yes},
                    {"after_yes", rec.after_yes}});
  return {{"n_prompts", r.n_prompts},
          {"baseline_truthful", r.baseline_truthful},
          {"flipped", r.flipped},
          {"asr", r.asr},
          {"mode", r.mode},
          {"records", recs}};
}

inline nlohmann::json to_json(const LayerSweepReport& r) {
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& e : r.entries)
    entries.push_back({{"layer", e.layer},
                       {"normalized_depth", e.normalized_depth},
                       {"token_position", e.token_position},
                       {"asr", e.asr}});
  return {{"entries", entries}};
}

inline nlohmann::json to_json(const DimSweepReport& r) {
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& e : r.entries)
    entries.push_back({{"k", e.k},
                       {"basis_asr", e.basis_asr},
                       {"sample_asrs", e.sample_asrs},
                       {"min", e.min},
                       {"q1", e.q1},
                       {"median", e.median},
                       {"q3", e.q3},
                       {"max", e.max}});
  return {{"n_samples", r.n_samples}, {"entries", entries}};
}

inline nlohmann::json to_json(const KLReport& r) {
  nlohmann::json vecs = nlohmann::json::array();
  for (const auto& v : r.vectors)
    vecs.push_back({{"vector_index", v.vector_index},
                    {"per_prompt_kl", v.per_prompt_kl},
                    {"mean_kl", v.mean_kl},
                    {"passed", v.passed}});
  return {{"vectors", vecs},
          {"threshold", r.threshold},
          {"mean_kl", r.mean_kl},
          {"passed", r.passed}};
}

inline nlohmann::json to_json(const CosSimTable& r) {
  nlohmann::json cols = nlohmann::json::array();
  for (size_t c = 0; c < r.dims.size(); ++c)
    cols.push_back({{"dim", r.dims[c]}, {"cosines", r.entries[c]}});
  return {{"columns", cols}};
}

}  // namespace conecraft
