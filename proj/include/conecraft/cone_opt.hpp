#pragma once

// Gradient-based discovery of a k-dimensional orthonormal truth cone by
// minimizing lambda1*L_add + lambda2*L_ablate + lambda3*L_retain. The
// unconstrained parameter is a d x k matrix W; the basis V is its
// Gram-Schmidt orthonormalization, re-derived every step.

#include <limits>
#include <numeric>
#include <random>
#include <set>
#include <vector>

#include "conecraft/interventions.hpp"
#include "conecraft/model.hpp"
#include "conecraft/train.hpp"

namespace conecraft {

struct LossWeights {
  double add = 1.0;
  double ablate = 1.0;
  double retain = 1.0;
};

struct ConeOptConfig {
  int k = 1;
  int layer = 3;           // 1-based
  int token_position = 1;  // index from the end of the prompt
  int steps = 300;
  double learning_rate = 0.02;
  int batch_size = 4;
  int n_cone_samples = 16;
  double alpha_add = 0.0;  // <= 0 resolves to 8 * median act norm / sqrt(d)
  uint64_t seed = 0;
  LossWeights weights;
  bool add_all_positions = true;

  void validate() const {
    if (k < 1) throw ContractError("cone opt: k must be >= 1");
    if (n_cone_samples < k)
      throw ContractError("cone opt: n_cone_samples must be >= k");
    if (batch_size < 1) throw ContractError("cone opt: batch_size must be >= 1");
    if (weights.add == 0 && weights.ablate == 0 && weights.retain == 0)
      throw ContractError("cone opt: loss weights must not all be zero");
    if (weights.add < 0 || weights.ablate < 0 || weights.retain < 0)
      throw ContractError("cone opt: loss weights must be nonnegative");
  }
};

struct RetainTarget {
  TokenSequence prompt;
  std::vector<int> continuation;  // exactly continuation_len tokens
  Mat base_dists;                 // continuation_len x vocab, softmax rows
};

struct TargetSet {
  std::vector<TokenSequence> false_prompts;  // target Yes under addition
  std::vector<TokenSequence> true_prompts;   // target No under ablation
  std::vector<RetainTarget> retain;
  int yes_id = -1, no_id = -1;
  int continuation_len = 30;
};

struct LossBreakdown {
  double add = 0, ablate = 0, retain = 0, total = 0;
  int step = 0;
};

inline Mat softmax_rows(const Mat& logits) {
  Mat out(logits.rows(), logits.cols());
  for (int i = 0; i < logits.rows(); ++i) {
    double mx = logits.row(i).maxCoeff();
    Eigen::RowVectorXd e = (logits.row(i).array() - mx).exp();
    out.row(i) = e / e.sum();
  }
  return out;
}

// Step 1 of the algorithm: addition/ablation answer targets plus the clean
// model's greedy continuations and per-step distributions for the KL term.
// If the model is below the accuracy prerequisite, keeps only the
// truthfully-answered statements as baseline (with a warning flag).
struct BuildTargetsResult {
  TargetSet targets;
  double model_accuracy = 0.0;
  bool below_threshold = false;
};

inline BuildTargetsResult build_targets(
    const ModelParameters& params, const ModelConfig& cfg, const Tokenizer& tk,
    const std::vector<LabeledStatement>& true_set,
    const std::vector<LabeledStatement>& false_set,
    const std::vector<RetainPrompt>& retain_set, const PromptTemplate& tmpl,
    int continuation_len = 30, double accuracy_threshold = 0.95) {
  if (true_set.empty() || false_set.empty())
    throw ContractError("build_targets: empty statement set");
  if (retain_set.empty()) throw ContractError("build_targets: empty retain set");

  BuildTargetsResult out;
  out.targets.yes_id = tk.yes_id();
  out.targets.no_id = tk.no_id();
  out.targets.continuation_len = continuation_len;

  int correct = 0, total = 0;
  auto answer_of = [&](const TokenSequence& seq) {
    ForwardResult r = forward(params, cfg, seq);
    auto [p_yes, p_no] = restricted_binary_probs(
        r.logits.row(r.logits.rows() - 1), tk.yes_id(), tk.no_id());
    return p_yes >= p_no;
  };
  for (const auto& s : true_set) {
    TokenSequence seq = prompt_tokens(tk, s, tmpl);
    bool yes = answer_of(seq);
    ++total;
    if (yes) {
      ++correct;
      out.targets.true_prompts.push_back(seq);
    }
  }
  for (const auto& s : false_set) {
    TokenSequence seq = prompt_tokens(tk, s, tmpl);
    bool yes = answer_of(seq);
    ++total;
    if (!yes) {
      ++correct;
      out.targets.false_prompts.push_back(seq);
    }
  }
  out.model_accuracy = static_cast<double>(correct) / total;
  out.below_threshold = out.model_accuracy < accuracy_threshold;
  if (out.targets.true_prompts.empty() || out.targets.false_prompts.empty())
    throw RuntimeFailure("build_targets: no truthfully answered prompts left");

  for (const auto& r : retain_set) {
    RetainTarget rt;
    rt.prompt = tk.encode(r.instruction, /*add_bos=*/true);
    if (rt.prompt.size() + continuation_len > cfg.max_seq_len)
      throw ContractError("build_targets: retain prompt too long for model");
    TokenSequence full =
        greedy_continuation(params, cfg, rt.prompt, continuation_len);
    rt.continuation.assign(full.ids.begin() + rt.prompt.size(), full.ids.end());
    ForwardResult fr = forward(params, cfg, full);
    rt.base_dists =
        softmax_rows(fr.logits.middleRows(rt.prompt.size() - 1, continuation_len));
    out.targets.retain.push_back(std::move(rt));
  }
  return out;
}

// 8 * (median activation norm at the cone layer / sqrt(d_model)), measured at
// the readout position of the target prompts.
inline double resolve_alpha(const ModelParameters& params,
                            const ModelConfig& cfg, const ConeOptConfig& oc,
                            const TargetSet& targets) {
  if (oc.alpha_add > 0) return oc.alpha_add;
  std::vector<double> norms;
  auto collect = [&](const std::vector<TokenSequence>& seqs) {
    for (const auto& s : seqs) {
      ForwardResult r = forward(params, cfg, s, /*capture=*/true);
      int pos = s.size() - oc.token_position;
      if (pos < 0) throw ContractError("token_position beyond prompt length");
      norms.push_back(r.cache.pre.at(oc.layer - 1).row(pos).norm());
    }
  };
  collect(targets.true_prompts);
  collect(targets.false_prompts);
  std::sort(norms.begin(), norms.end());
  double median = norms[norms.size() / 2];
  return 8.0 * median / std::sqrt(static_cast<double>(cfg.d_model));
}

namespace detail {

// V = Gram-Schmidt(W) on the tape; matches orthonormalize_columns().
inline Var gram_schmidt_graph(Tape& t, Var w, int k) {
  std::vector<Var> q;
  for (int j = 0; j < k; ++j) {
    Var c = t.slice_cols(w, j, 1);
    for (int i = 0; i < j; ++i) c = t.sub(c, t.smul(q[i], t.dot(q[i], c)));
    q.push_back(t.normalize_vec(c));
  }
  return t.hcat(q);
}

// Fixed per-step sampling so the loss is a deterministic function of W.
struct StepPlan {
  std::vector<Vec> lambdas;  // one per evaluated direction
  std::vector<int> add_batch, ablate_batch, retain_batch;
};

inline std::vector<int> pick_batch(std::mt19937_64& rng, int set_size,
                                   int batch) {
  std::vector<int> out;
  if (set_size <= batch) {
    out.resize(set_size);
    std::iota(out.begin(), out.end(), 0);
    return out;
  }
  std::uniform_int_distribution<int> pick(0, set_size - 1);
  std::set<int> seen;
  while (static_cast<int>(seen.size()) < batch) seen.insert(pick(rng));
  out.assign(seen.begin(), seen.end());
  return out;
}

inline StepPlan make_step_plan(const ConeOptConfig& oc, const TargetSet& ts,
                               int step) {
  std::mt19937_64 rng(splitmix64(sub_seed(oc.seed, "mc") + step));
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  StepPlan plan;
  // the k basis vectors are always among the evaluated directions
  for (int j = 0; j < oc.k; ++j) {
    Vec e = Vec::Zero(oc.k);
    e(j) = 1.0;
    plan.lambdas.push_back(e);
  }
  while (static_cast<int>(plan.lambdas.size()) < oc.n_cone_samples) {
    Vec lam(oc.k);
    for (int i = 0; i < oc.k; ++i) lam(i) = uni(rng);
    if (lam.maxCoeff() < 1e-9) continue;
    plan.lambdas.push_back(lam);
  }
  plan.add_batch =
      pick_batch(rng, static_cast<int>(ts.false_prompts.size()), oc.batch_size);
  plan.ablate_batch =
      pick_batch(rng, static_cast<int>(ts.true_prompts.size()), oc.batch_size);
  plan.retain_batch =
      pick_batch(rng, static_cast<int>(ts.retain.size()), oc.batch_size);
  return plan;
}

struct GraphTerms {
  Var add, ablate, retain;  // per-direction means (1x1), invalid if unused
};

// Builds the three loss terms for one direction on the given tape.
inline GraphTerms direction_terms(Tape& t, const ParamVars& pv,
                                  const ModelConfig& cfg, Var dir,
                                  const ConeOptConfig& oc, const TargetSet& ts,
                                  const StepPlan& plan, double alpha) {
  GraphTerms out;
  if (oc.weights.add > 0 && !plan.add_batch.empty()) {
    Var sum = t.scalar(0.0);
    for (int idx : plan.add_batch) {
      GraphPlan gp;
      gp.adds.push_back({oc.layer, alpha, dir});
      Var logits = forward_graph(t, pv, cfg, ts.false_prompts[idx].ids, &gp);
      Var p = t.restricted_yes_prob(t.row(logits, t.val(logits).rows() - 1),
                                    ts.yes_id, ts.no_id);
      sum = t.add(sum, t.neg_log(p));
    }
    out.add = t.scale(sum, 1.0 / plan.add_batch.size());
  }
  if (oc.weights.ablate > 0 && !plan.ablate_batch.empty()) {
    Var sum = t.scalar(0.0);
    for (int idx : plan.ablate_batch) {
      GraphPlan gp;
      gp.ablations.push_back(dir);
      Var logits = forward_graph(t, pv, cfg, ts.true_prompts[idx].ids, &gp);
      Var p = t.restricted_yes_prob(t.row(logits, t.val(logits).rows() - 1),
                                    ts.yes_id, ts.no_id);
      sum = t.add(sum, t.neg_log(t.sub(t.scalar(1.0), p)));
    }
    out.ablate = t.scale(sum, 1.0 / plan.ablate_batch.size());
  }
  if (oc.weights.retain > 0 && !plan.retain_batch.empty()) {
    Var sum = t.scalar(0.0);
    for (int idx : plan.retain_batch) {
      const RetainTarget& rt = ts.retain[idx];
      GraphPlan gp;
      gp.ablations.push_back(dir);
      std::vector<int> full = rt.prompt.ids;
      full.insert(full.end(), rt.continuation.begin(), rt.continuation.end());
      Var logits = forward_graph(t, pv, cfg, full, &gp);
      Var kl_sum = t.scalar(0.0);
      int base = rt.prompt.size() - 1;
      for (int s = 0; s < ts.continuation_len; ++s)
        kl_sum = t.add(kl_sum, t.kl_const_ref(t.row(logits, base + s),
                                              rt.base_dists.row(s).transpose()));
      sum = t.add(sum, t.scale(kl_sum, 1.0 / ts.continuation_len));
    }
    out.retain = t.scale(sum, 1.0 / plan.retain_batch.size());
  }
  return out;
}

}  // namespace detail

// Deterministic step loss (and optionally its gradient w.r.t. W) under the
// step's fixed sampling plan. Terms are averaged over n_cone_samples
// directions: the k basis vectors plus Monte-Carlo cone samples.
inline LossBreakdown step_loss(const ModelParameters& params,
                               const ModelConfig& cfg, const Mat& w,
                               const ConeOptConfig& oc, const TargetSet& ts,
                               const detail::StepPlan& plan, double alpha,
                               Mat* grad_out = nullptr) {
  int n_dirs = static_cast<int>(plan.lambdas.size());
  LossBreakdown bd;
  if (grad_out) *grad_out = Mat::Zero(w.rows(), w.cols());
  for (int j = 0; j < n_dirs; ++j) {
    Tape t;
    ParamVars pv = leaf_parameters(t, params, false);
    Var wv = t.leaf(w, grad_out != nullptr);
    Var v = detail::gram_schmidt_graph(t, wv, oc.k);
    Var dir = t.normalize_vec(t.matmul(v, t.constant(plan.lambdas[j])));
    detail::GraphTerms terms =
        detail::direction_terms(t, pv, cfg, dir, oc, ts, plan, alpha);
    Var total = t.scalar(0.0);
    if (terms.add.valid()) {
      total = t.add(total, t.scale(terms.add, oc.weights.add));
      bd.add += t.sval(terms.add) / n_dirs;
    }
    if (terms.ablate.valid()) {
      total = t.add(total, t.scale(terms.ablate, oc.weights.ablate));
      bd.ablate += t.sval(terms.ablate) / n_dirs;
    }
    if (terms.retain.valid()) {
      total = t.add(total, t.scale(terms.retain, oc.weights.retain));
      bd.retain += t.sval(terms.retain) / n_dirs;
    }
    if (grad_out) {
      t.backward(total);
      *grad_out += t.grad(wv) / n_dirs;
    }
  }
  bd.total = oc.weights.add * bd.add + oc.weights.ablate * bd.ablate +
             oc.weights.retain * bd.retain;
  if (grad_out && !grad_out->allFinite())
    throw RuntimeFailure("cone opt: non-finite gradient");
  return bd;
}

// ---- spec-level loss operations (full prompt sets, fixed direction) --------

namespace detail {

inline StepPlan full_plan(int k, int n_add, int n_ablate, int n_retain) {
  StepPlan plan;
  Vec e = Vec::Zero(k);
  e(0) = 1.0;
  plan.lambdas.push_back(e);
  plan.add_batch.resize(n_add);
  std::iota(plan.add_batch.begin(), plan.add_batch.end(), 0);
  plan.ablate_batch.resize(n_ablate);
  std::iota(plan.ablate_batch.begin(), plan.ablate_batch.end(), 0);
  plan.retain_batch.resize(n_retain);
  std::iota(plan.retain_batch.begin(), plan.retain_batch.end(), 0);
  return plan;
}

inline LossBreakdown fixed_direction_losses(const ModelParameters& params,
                                            const ModelConfig& cfg,
                                            const Direction& dir,
                                            const ConeOptConfig& oc,
                                            const TargetSet& ts, double alpha,
                                            bool add, bool ablate, bool retain) {
  Direction unit = make_direction(dir.vector);
  ConeOptConfig c = oc;
  c.weights = LossWeights{add ? 1.0 : 0.0, ablate ? 1.0 : 0.0,
                          retain ? 1.0 : 0.0};
  c.k = 1;
  c.n_cone_samples = 1;
  StepPlan plan = full_plan(1, add ? ts.false_prompts.size() : 0,
                            ablate ? ts.true_prompts.size() : 0,
                            retain ? ts.retain.size() : 0);
  Mat w = unit.vector;
  return step_loss(params, cfg, w, c, ts, plan, alpha);
}

}  // namespace detail

// Mean over false prompts of -log p(Yes) after adding alpha * direction at
// the cone layer, all token positions.
inline double loss_add(const ModelParameters& params, const ModelConfig& cfg,
                       const Direction& dir, double alpha,
                       const ConeOptConfig& oc, const TargetSet& ts) {
  if (ts.false_prompts.empty()) throw ContractError("loss_add: empty prompt set");
  return detail::fixed_direction_losses(params, cfg, dir, oc, ts, alpha, true,
                                        false, false)
      .add;
}

// Mean over true prompts of -log(1 - p(Yes)) after ablating the direction
// at all layers and positions.
inline double loss_ablate(const ModelParameters& params, const ModelConfig& cfg,
                          const Direction& dir, const ConeOptConfig& oc,
                          const TargetSet& ts) {
  if (ts.true_prompts.empty())
    throw ContractError("loss_ablate: empty prompt set");
  return detail::fixed_direction_losses(params, cfg, dir, oc, ts, 0.0, false,
                                        true, false)
      .ablate;
}

// Mean over retain prompts of the mean per-step KL between the clean and
// ablated next-token distributions, teacher-forced on the base continuation.
inline double loss_retain(const ModelParameters& params, const ModelConfig& cfg,
                          const Direction& dir, const ConeOptConfig& oc,
                          const TargetSet& ts) {
  if (ts.retain.empty()) throw ContractError("loss_retain: empty retain set");
  return detail::fixed_direction_losses(params, cfg, dir, oc, ts, 0.0, false,
                                        false, true)
      .retain;
}

// Full-set loss of a basis V (no batching): the k basis vectors plus
// Monte-Carlo samples, as in training but over every prompt.
inline LossBreakdown total_loss(const ModelParameters& params,
                                const ModelConfig& cfg, const Mat& basis,
                                const ConeOptConfig& oc, const TargetSet& ts,
                                int step = 0) {
  oc.validate();
  double alpha = resolve_alpha(params, cfg, oc, ts);
  detail::StepPlan plan = detail::make_step_plan(oc, ts, step);
  plan.add_batch.resize(ts.false_prompts.size());
  std::iota(plan.add_batch.begin(), plan.add_batch.end(), 0);
  plan.ablate_batch.resize(ts.true_prompts.size());
  std::iota(plan.ablate_batch.begin(), plan.ablate_batch.end(), 0);
  plan.retain_batch.resize(ts.retain.size());
  std::iota(plan.retain_batch.begin(), plan.retain_batch.end(), 0);
  LossBreakdown bd = step_loss(params, cfg, basis, oc, ts, plan, alpha);
  bd.step = step;
  return bd;
}

// Gradient of the step loss w.r.t. the unconstrained matrix W (the basis is
// re-derived as Gram-Schmidt(W) inside the graph).
inline Mat grad_total_loss(const ModelParameters& params,
                           const ModelConfig& cfg, const Mat& w,
                           const ConeOptConfig& oc, const TargetSet& ts,
                           int step, LossBreakdown* bd_out = nullptr) {
  oc.validate();
  double alpha = resolve_alpha(params, cfg, oc, ts);
  detail::StepPlan plan = detail::make_step_plan(oc, ts, step);
  Mat grad;
  LossBreakdown bd = step_loss(params, cfg, w, oc, ts, plan, alpha, &grad);
  if (bd_out) {
    bd.step = step;
    *bd_out = bd;
  }
  return grad;
}

struct ConeOptResult {
  ConceptCone cone;
  std::vector<LossBreakdown> trace;
  bool improved = false;
  double alpha_add = 0.0;
  Direction dim;  // the DIM direction used for initialization
};

// Readout activations at (layer, token_position) for DIM and init.
inline std::vector<Vec> readout_activations(const ModelParameters& params,
                                            const ModelConfig& cfg,
                                            const std::vector<TokenSequence>& seqs,
                                            int layer, int token_position) {
  std::vector<Vec> acts;
  for (const auto& s : seqs) {
    ForwardResult r = forward(params, cfg, s, /*capture=*/true);
    int pos = s.size() - token_position;
    if (pos < 0 || pos >= s.size())
      throw ContractError("readout: token_position beyond prompt length");
    acts.push_back(r.cache.pre.at(layer - 1).row(pos).transpose());
  }
  return acts;
}

// The 5-step algorithm: build targets (done by the caller), then AdamW on W
// with re-orthonormalization, tracking the best step loss.
inline ConeOptResult optimize_cone(const ModelParameters& params,
                                   const ModelConfig& cfg,
                                   const TargetSet& targets,
                                   const ConeOptConfig& oc) {
  oc.validate();
  if (oc.layer < 1 || oc.layer > cfg.n_layers)
    throw ContractError("cone opt: layer out of range");
  double alpha = resolve_alpha(params, cfg, oc, targets);

  // init: column 1 = DIM, the rest random Gaussian
  auto acts_true = readout_activations(params, cfg, targets.true_prompts,
                                       oc.layer, oc.token_position);
  auto acts_false = readout_activations(params, cfg, targets.false_prompts,
                                        oc.layer, oc.token_position);
  DimResult dim = dim_direction(acts_true, acts_false);
  Mat w(cfg.d_model, oc.k);
  w.col(0) = dim.direction.vector;
  std::mt19937_64 rng(sub_seed(oc.seed, "opt-init"));
  std::normal_distribution<double> nd(0.0, 1.0);
  for (int j = 1; j < oc.k; ++j) {
    for (int i = 0; i < cfg.d_model; ++i) w(i, j) = nd(rng);
    w.col(j) /= w.col(j).norm();
  }

  ConeOptResult res;
  res.alpha_add = alpha;
  res.dim = dim.direction;
  AdamW opt(oc.learning_rate, 0.0);
  Mat best_w = w;
  double best_total = std::numeric_limits<double>::infinity();
  ConeOptConfig step_cfg = oc;
  step_cfg.alpha_add = alpha;

  for (int step = 0; step < oc.steps; ++step) {
    detail::StepPlan plan = detail::make_step_plan(oc, targets, step);
    Mat grad;
    LossBreakdown bd = step_loss(params, cfg, w, step_cfg, targets, plan,
                                 alpha, &grad);
    bd.step = step;
    res.trace.push_back(bd);
    if (bd.total < best_total) {
      best_total = bd.total;
      best_w = w;
      if (step > 0) res.improved = true;
    }
    opt.update(w, grad, "w", /*decay=*/false);
  }
  res.cone = make_cone(best_w, oc.layer, oc.token_position);
  return res;
}

}  // namespace conecraft
