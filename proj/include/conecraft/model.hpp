#pragma once

// Minimal decoder-only transformer with readable/writable residual stream.
// Residual update per layer: x~ = x + Attn(x); x' = x~ + MLP(x~), with
// optional RMS pre-norm and learned absolute positional embeddings.

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "conecraft/autodiff.hpp"
#include "conecraft/common.hpp"
#include "conecraft/interventions.hpp"
#include "conecraft/tokenizer.hpp"

namespace conecraft {

enum class NormKind { kNone, kRms };

inline std::string norm_kind_name(NormKind k) {
  return k == NormKind::kRms ? "rms" : "none";
}
inline NormKind norm_kind_from(const std::string& s) {
  if (s == "rms") return NormKind::kRms;
  if (s == "none") return NormKind::kNone;
  throw ContractError("unknown norm_kind: " + s);
}

struct ModelConfig {
  int n_layers = 4;
  int d_model = 64;
  int n_heads = 4;
  int d_mlp = 256;
  int vocab_size = 0;
  int max_seq_len = 64;
  NormKind norm_kind = NormKind::kRms;
  uint64_t seed = 0;

  void validate() const {
    if (n_layers < 1 || d_model < 1 || n_heads < 1 || d_mlp < 1 ||
        vocab_size < 1)
      throw ContractError("ModelConfig: all counts must be >= 1");
    if (max_seq_len < 2) throw ContractError("ModelConfig: max_seq_len < 2");
    if (d_model % n_heads != 0)
      throw ContractError("ModelConfig: d_model not divisible by n_heads");
  }
};

struct LayerParameters {
  Mat wq, wk, wv, wo;      // d x d
  Mat w1, w2;              // d x d_mlp, d_mlp x d
  Mat attn_gain, mlp_gain;  // 1 x d RMS gains (unused when norm_kind=none)
};

struct ModelParameters {
  Mat embed;      // vocab x d
  Mat pos;        // max_seq x d
  std::vector<LayerParameters> layers;
  Mat final_gain;  // 1 x d
  Mat unembed;    // d x vocab
};

// Visits every tensor with its stable checkpoint name, in manifest order.
template <typename P, typename Fn>
void for_each_tensor(P& params, Fn&& fn) {
  fn("embed", params.embed);
  fn("pos_embed", params.pos);
  for (size_t l = 0; l < params.layers.size(); ++l) {
    auto& lay = params.layers[l];
    std::string p = "layers." + std::to_string(l) + ".";
    fn(p + "attn.wq", lay.wq);
    fn(p + "attn.wk", lay.wk);
    fn(p + "attn.wv", lay.wv);
    fn(p + "attn.wo", lay.wo);
    fn(p + "mlp.w1", lay.w1);
    fn(p + "mlp.w2", lay.w2);
    fn(p + "norm.attn_gain", lay.attn_gain);
    fn(p + "norm.mlp_gain", lay.mlp_gain);
  }
  fn("norm.final_gain", params.final_gain);
  fn("unembed", params.unembed);
}

inline void validate_shapes(const ModelParameters& p, const ModelConfig& cfg) {
  cfg.validate();
  auto expect = [](const Mat& m, int r, int c, const std::string& name) {
    if (m.rows() != r || m.cols() != c)
      throw ContractError("parameter shape mismatch: " + name);
  };
  expect(p.embed, cfg.vocab_size, cfg.d_model, "embed");
  expect(p.pos, cfg.max_seq_len, cfg.d_model, "pos_embed");
  if (static_cast<int>(p.layers.size()) != cfg.n_layers)
    throw ContractError("parameter shape mismatch: layer count");
  for (const auto& l : p.layers) {
    expect(l.wq, cfg.d_model, cfg.d_model, "attn.wq");
    expect(l.wk, cfg.d_model, cfg.d_model, "attn.wk");
    expect(l.wv, cfg.d_model, cfg.d_model, "attn.wv");
    expect(l.wo, cfg.d_model, cfg.d_model, "attn.wo");
    expect(l.w1, cfg.d_model, cfg.d_mlp, "mlp.w1");
    expect(l.w2, cfg.d_mlp, cfg.d_model, "mlp.w2");
    expect(l.attn_gain, 1, cfg.d_model, "norm.attn_gain");
    expect(l.mlp_gain, 1, cfg.d_model, "norm.mlp_gain");
  }
  expect(p.final_gain, 1, cfg.d_model, "norm.final_gain");
  expect(p.unembed, cfg.d_model, cfg.vocab_size, "unembed");
}

inline void validate_parameters(const ModelParameters& p,
                                const ModelConfig& cfg) {
  validate_shapes(p, cfg);
  for_each_tensor(p, [](const std::string& name, const Mat& m) {
    if (!m.allFinite())
      throw ContractError("parameter has non-finite values: " + name);
  });
}

// GPT-style init: N(0, 0.02) embeddings, fan-in scaled projections with the
// residual branches damped by 1/sqrt(2L).
inline ModelParameters init_parameters(const ModelConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(sub_seed(cfg.seed, "init"));
  std::normal_distribution<double> nd(0.0, 1.0);
  auto randn = [&](int r, int c, double s) {
    Mat m(r, c);
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j) m(i, j) = nd(rng) * s;
    return m;
  };
  double resid_scale = 1.0 / std::sqrt(2.0 * cfg.n_layers);
  ModelParameters p;
  p.embed = randn(cfg.vocab_size, cfg.d_model, 0.02);
  p.pos = randn(cfg.max_seq_len, cfg.d_model, 0.02);
  p.layers.resize(cfg.n_layers);
  for (auto& l : p.layers) {
    double s = 1.0 / std::sqrt(cfg.d_model);
    l.wq = randn(cfg.d_model, cfg.d_model, s);
    l.wk = randn(cfg.d_model, cfg.d_model, s);
    l.wv = randn(cfg.d_model, cfg.d_model, s);
    l.wo = randn(cfg.d_model, cfg.d_model, s * resid_scale);
    l.w1 = randn(cfg.d_model, cfg.d_mlp, s);
    l.w2 = randn(cfg.d_mlp, cfg.d_model, resid_scale / std::sqrt(cfg.d_mlp));
    l.attn_gain = Mat::Ones(1, cfg.d_model);
    l.mlp_gain = Mat::Ones(1, cfg.d_model);
  }
  p.final_gain = Mat::Ones(1, cfg.d_model);
  p.unembed = randn(cfg.d_model, cfg.vocab_size, 0.02);
  return p;
}

inline std::string model_hash(const ModelParameters& p) {
  uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&](const Mat& m) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(m.data());
    for (size_t i = 0; i < sizeof(double) * m.size(); ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ULL;
    }
  };
  for_each_tensor(p, [&](const std::string&, const Mat& m) { mix(m); });
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// ---- graph construction ----------------------------------------------------

struct LayerVars {
  Var wq, wk, wv, wo, w1, w2, attn_gain, mlp_gain;
};

struct ParamVars {
  Var embed, pos;
  std::vector<LayerVars> layers;
  Var final_gain, unembed;
};

inline ParamVars leaf_parameters(Tape& t, const ModelParameters& p,
                                 bool needs_grad) {
  ParamVars v;
  v.embed = t.leaf(p.embed, needs_grad);
  v.pos = t.leaf(p.pos, needs_grad);
  for (const auto& l : p.layers)
    v.layers.push_back(LayerVars{
        t.leaf(l.wq, needs_grad), t.leaf(l.wk, needs_grad),
        t.leaf(l.wv, needs_grad), t.leaf(l.wo, needs_grad),
        t.leaf(l.w1, needs_grad), t.leaf(l.w2, needs_grad),
        t.leaf(l.attn_gain, needs_grad), t.leaf(l.mlp_gain, needs_grad)});
  v.final_gain = t.leaf(p.final_gain, needs_grad);
  v.unembed = t.leaf(p.unembed, needs_grad);
  return v;
}

// Intervention plan lifted onto a tape; directions may be optimizer variables.
struct GraphPlan {
  struct Add {
    int layer;
    double alpha;
    Var dir;  // d x 1
  };
  std::vector<Add> adds;
  std::vector<Var> ablations;  // unit d x 1
};

inline GraphPlan lift_plan(Tape& t, const InterventionPlan& plan, int d_model,
                           int n_layers) {
  GraphPlan g;
  for (const auto& e : plan.edits) {
    if (e.direction.vector.size() != d_model)
      throw ContractError("intervention direction dimension mismatch");
    if (e.kind == InterventionEdit::Kind::kAdd) {
      if (e.layer < 1 || e.layer > n_layers)
        throw ContractError("intervention: unknown layer index " +
                            std::to_string(e.layer));
      g.adds.push_back({e.layer, e.alpha, t.constant(e.direction.vector)});
    } else {
      if (std::abs(e.direction.vector.norm() - 1.0) > 1e-6)
        throw ContractError("ablation direction must be unit norm");
      g.ablations.push_back(t.constant(e.direction.vector));
    }
  }
  return g;
}

struct GraphCache {
  std::vector<Var> pre;   // x^(l), after any edits, l = 1..L
  std::vector<Var> mid;   // x~^(l), after any edits
  Var final_pre;          // x^(L+1), after any edits
};

// Builds the forward pass for one token sequence. Edits are applied at their
// declared sites before downstream computation reads the activation;
// additions first, then ablations. Ablations also hit x^(L+1).
inline Var forward_graph(Tape& t, const ParamVars& pv, const ModelConfig& cfg,
                         const std::vector<int>& ids, const GraphPlan* plan,
                         GraphCache* cache = nullptr) {
  int n = static_cast<int>(ids.size());
  if (n == 0) throw ContractError("forward: empty token sequence");
  if (n > cfg.max_seq_len) throw ContractError("forward: sequence too long");
  for (int id : ids)
    if (id < 0 || id >= cfg.vocab_size)
      throw ContractError("forward: token id out of range");

  std::vector<int> pos_ids(n);
  std::iota(pos_ids.begin(), pos_ids.end(), 0);
  Var x = t.add(t.gather_rows(pv.embed, ids), t.gather_rows(pv.pos, pos_ids));

  int dh = cfg.d_model / cfg.n_heads;
  double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
  bool rms = cfg.norm_kind == NormKind::kRms;

  auto apply_edits = [&](Var h, int layer, bool pre_site) {
    if (!plan) return h;
    if (pre_site)
      for (const auto& a : plan->adds)
        if (a.layer == layer) h = t.add_dir_rows(h, a.dir, a.alpha);
    for (Var r : plan->ablations) h = t.ablate_rows(h, r);
    return h;
  };

  for (int l = 0; l < cfg.n_layers; ++l) {
    const LayerVars& lv = pv.layers[l];
    x = apply_edits(x, l + 1, /*pre_site=*/true);
    if (cache) cache->pre.push_back(x);

    Var a_in = rms ? t.rms_norm(x, lv.attn_gain) : x;
    Var q = t.matmul(a_in, lv.wq);
    Var k = t.matmul(a_in, lv.wk);
    Var v = t.matmul(a_in, lv.wv);
    std::vector<Var> heads;
    heads.reserve(cfg.n_heads);
    for (int h = 0; h < cfg.n_heads; ++h) {
      Var qh = t.slice_cols(q, h * dh, dh);
      Var kh = t.slice_cols(k, h * dh, dh);
      Var vh = t.slice_cols(v, h * dh, dh);
      Var scores = t.scale(t.matmul_nt(qh, kh), inv_sqrt_dh);
      heads.push_back(t.matmul(t.causal_softmax(scores), vh));
    }
    Var attn_out = t.matmul(t.hcat(heads), lv.wo);
    Var xmid = t.add(x, attn_out);  // x~ = x + Attn(x)

    xmid = apply_edits(xmid, l + 1, /*pre_site=*/false);
    if (cache) cache->mid.push_back(xmid);

    Var m_in = rms ? t.rms_norm(xmid, lv.mlp_gain) : xmid;
    Var mlp_out = t.matmul(t.gelu(t.matmul(m_in, lv.w1)), lv.w2);
    x = t.add(xmid, mlp_out);  // x' = x~ + MLP(x~)
  }

  x = apply_edits(x, cfg.n_layers + 1, /*pre_site=*/true);
  if (cache) cache->final_pre = x;

  Var h_final = rms ? t.rms_norm(x, pv.final_gain) : x;
  return t.matmul(h_final, pv.unembed);
}

// ---- non-graph convenience API ----------------------------------------------

struct ResidualCache {
  std::vector<Mat> pre;  // n x d per layer, 1..L
  std::vector<Mat> mid;
  Mat final_pre;  // x^(L+1)
};

struct ForwardResult {
  Mat logits;  // n x vocab
  ResidualCache cache;
  bool has_cache = false;
};

inline ForwardResult forward_with_interventions(const ModelParameters& params,
                                                const ModelConfig& cfg,
                                                const TokenSequence& tokens,
                                                const InterventionPlan& plan,
                                                bool capture = false) {
  validate_shapes(params, cfg);
  Tape t;
  ParamVars pv = leaf_parameters(t, params, false);
  GraphPlan gp = lift_plan(t, plan, cfg.d_model, cfg.n_layers);
  GraphCache gc;
  Var logits = forward_graph(t, pv, cfg, tokens.ids, plan.empty() ? nullptr : &gp,
                             capture ? &gc : nullptr);
  ForwardResult out;
  out.logits = t.val(logits);
  if (!out.logits.allFinite())
    throw RuntimeFailure("forward produced non-finite logits");
  if (capture) {
    out.has_cache = true;
    for (Var v : gc.pre) out.cache.pre.push_back(t.val(v));
    for (Var v : gc.mid) out.cache.mid.push_back(t.val(v));
    out.cache.final_pre = t.val(gc.final_pre);
  }
  return out;
}

inline ForwardResult forward(const ModelParameters& params,
                             const ModelConfig& cfg,
                             const TokenSequence& tokens,
                             bool capture = false) {
  return forward_with_interventions(params, cfg, tokens,
                                    InterventionPlan::none(), capture);
}

// MLP block contribution given x~ rows; mirrors the in-graph computation, for
// verifying the residual identity x^(l+1) - x~^(l) = MLP(x~^(l)).
inline Mat mlp_block(const ModelParameters& params, const ModelConfig& cfg,
                     int layer, const Mat& xmid) {
  const auto& l = params.layers.at(layer - 1);
  Mat m_in = xmid;
  if (cfg.norm_kind == NormKind::kRms) {
    for (int i = 0; i < m_in.rows(); ++i) {
      double r = std::sqrt(m_in.row(i).squaredNorm() / cfg.d_model + 1e-6);
      m_in.row(i) = xmid.row(i).cwiseProduct(l.mlp_gain.row(0)) / r;
    }
  }
  Mat h = (m_in * l.w1).unaryExpr([](double x) {
    constexpr double c = 0.7978845608028654;
    return 0.5 * x * (1.0 + std::tanh(c * (x + 0.044715 * x * x * x)));
  });
  return h * l.w2;
}

// Two-way softmax over the Yes/No logits; sums to 1 exactly.
inline std::pair<double, double> restricted_binary_probs(
    const Eigen::RowVectorXd& logits_row, int yes_id, int no_id) {
  if (yes_id == no_id) throw ContractError("restricted_binary_probs: ids equal");
  if (yes_id < 0 || no_id < 0 || yes_id >= logits_row.size() ||
      no_id >= logits_row.size())
    throw ContractError("restricted_binary_probs: id out of range");
  double p_yes = 1.0 / (1.0 + std::exp(logits_row(no_id) - logits_row(yes_id)));
  return {p_yes, 1.0 - p_yes};
}

inline int argmax_token(const Eigen::RowVectorXd& logits_row) {
  int best = 0;
  for (int j = 1; j < logits_row.size(); ++j)
    if (logits_row(j) > logits_row(best)) best = j;  // ties: lowest id wins
  return best;
}

inline TokenSequence greedy_continuation(const ModelParameters& params,
                                         const ModelConfig& cfg,
                                         const TokenSequence& tokens, int n,
                                         const InterventionPlan& plan =
                                             InterventionPlan::none()) {
  if (n < 1) throw ContractError("greedy_continuation: n must be >= 1");
  if (tokens.size() + n > cfg.max_seq_len)
    throw ContractError("greedy_continuation: sequence overflow");
  TokenSequence seq = tokens;
  for (int step = 0; step < n; ++step) {
    ForwardResult r = forward_with_interventions(params, cfg, seq, plan);
    seq.ids.push_back(argmax_token(r.logits.row(r.logits.rows() - 1)));
  }
  return seq;
}

}  // namespace conecraft
