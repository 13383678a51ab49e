#pragma once

// Direction and cone algebra: activation addition, directional ablation,
// difference-in-means, orthonormal cone bases and Monte-Carlo sampling.

#include <fstream>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "conecraft/common.hpp"

namespace conecraft {

struct Direction {
  Vec vector;
  bool normalized = false;
};

inline Direction make_direction(Vec v, bool normalize = true) {
  if (!v.allFinite()) throw ContractError("direction: non-finite entries");
  double n = v.norm();
  if (n == 0.0) throw ContractError("direction: zero vector");
  if (normalize) return Direction{v / n, true};
  return Direction{std::move(v), std::abs(n - 1.0) <= 1e-6};
}

// x - r r^T x  (Eq. 4 style rank-1 projection)
inline Vec ablate_vector(const Vec& x, const Direction& r) {
  if (!r.normalized) throw ContractError("ablate_vector: r must be unit norm");
  if (x.size() != r.vector.size())
    throw ContractError("ablate_vector: dimension mismatch");
  return x - r.vector * (r.vector.dot(x));
}

// x + alpha * r
inline Vec add_vector(const Vec& x, double alpha, const Direction& r) {
  if (x.size() != r.vector.size())
    throw ContractError("add_vector: dimension mismatch");
  return x + alpha * r.vector;
}

struct DimResult {
  Direction direction;
  double raw_norm = 0.0;
};

// Difference-in-means direction: normalize(mean(true) - mean(false)).
inline DimResult dim_direction(const std::vector<Vec>& acts_true,
                               const std::vector<Vec>& acts_false) {
  if (acts_true.empty() || acts_false.empty())
    throw ContractError("dim_direction: empty activation set");
  Vec mt = Vec::Zero(acts_true[0].size());
  for (const auto& a : acts_true) mt += a;
  mt /= static_cast<double>(acts_true.size());
  Vec mf = Vec::Zero(acts_false[0].size());
  for (const auto& a : acts_false) mf += a;
  mf /= static_cast<double>(acts_false.size());
  Vec diff = mt - mf;
  double n = diff.norm();
  if (n < 1e-12) throw ContractError("dim_direction: degenerate (equal means)");
  return DimResult{Direction{diff / n, true}, n};
}

struct ConceptCone {
  Mat basis;           // d_model x k, orthonormal columns
  int layer = 0;       // 1-based layer index
  int token_position = 1;  // index from the end of the prompt, 1 = final
  int k = 0;
};

// Modified Gram-Schmidt; equivalent to thin QR with the diagonal of R forced
// positive, so column signs are deterministic.
inline Mat orthonormalize_columns(const Mat& raw, double rank_tol = 1e-10) {
  Mat q = raw;
  for (int j = 0; j < q.cols(); ++j) {
    for (int i = 0; i < j; ++i) q.col(j) -= q.col(i) * q.col(i).dot(q.col(j));
    double n = q.col(j).norm();
    if (n <= rank_tol * std::max(1.0, raw.col(j).norm()))
      throw ContractError("orthonormalize: rank-deficient input at column " +
                          std::to_string(j));
    q.col(j) /= n;
  }
  return q;
}

inline ConceptCone make_cone(const Mat& raw, int layer, int token_position) {
  if (raw.cols() < 1) throw ContractError("make_cone: k must be >= 1");
  return ConceptCone{orthonormalize_columns(raw), layer, token_position,
                     static_cast<int>(raw.cols())};
}

struct ConeSample {
  Vec lambdas;
  Direction direction;
};

// Uniform nonnegative coefficients over the basis, normalized; degenerate
// all-zero draws are resampled (zero is excluded from the cone).
inline std::vector<ConeSample> sample_cone(const ConceptCone& cone, int n,
                                           uint64_t seed) {
  if (n < 1) throw ContractError("sample_cone: n must be >= 1");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  std::vector<ConeSample> out;
  out.reserve(n);
  while (static_cast<int>(out.size()) < n) {
    Vec lam(cone.k);
    for (int i = 0; i < cone.k; ++i) lam(i) = uni(rng);
    if (lam.maxCoeff() < 1e-9) continue;
    Vec v = cone.basis * lam;
    out.push_back(ConeSample{lam, Direction{v / v.norm(), true}});
  }
  return out;
}

inline double cosine_similarity(const Direction& a, const Direction& b) {
  double na = a.vector.norm(), nb = b.vector.norm();
  if (na == 0.0 || nb == 0.0)
    throw ContractError("cosine_similarity: zero vector");
  double c = a.vector.dot(b.vector) / (na * nb);
  return std::min(1.0, std::max(-1.0, c));
}

struct Membership {
  bool inside = false;
  Vec lambdas;
};

// v is in the cone iff its coordinates in the basis are (near-)nonnegative
// and the basis reconstructs it.
inline Membership cone_membership(const ConceptCone& cone, const Direction& v,
                                  double tol = 1e-6) {
  Vec lam = cone.basis.transpose() * v.vector;
  bool nonneg = (lam.array() >= -tol).all();
  double resid = (cone.basis * lam - v.vector).norm();
  return Membership{nonneg && resid <= tol, lam};
}

// One atomic residual-stream edit. `add` applies at its layer across all
// token positions; `ablate` applies at every layer and position, pre and mid.
struct InterventionEdit {
  enum class Kind { kAdd, kAblate };
  Kind kind;
  int layer = 0;    // add only
  double alpha = 0;  // add only
  Direction direction;
};

struct InterventionPlan {
  std::vector<InterventionEdit> edits;

  bool empty() const { return edits.empty(); }

  static InterventionPlan none() { return {}; }

  static InterventionPlan addition(int layer, double alpha, Direction d) {
    InterventionPlan p;
    p.edits.push_back({InterventionEdit::Kind::kAdd, layer, alpha, std::move(d)});
    return p;
  }

  static InterventionPlan ablation(Direction d) {
    if (!d.normalized)
      throw ContractError("ablation plan: direction must be normalized");
    InterventionPlan p;
    p.edits.push_back({InterventionEdit::Kind::kAblate, 0, 0.0, std::move(d)});
    return p;
  }

  // Ablate every basis vector of the cone (the columns are orthonormal, so
  // order does not matter).
  static InterventionPlan cone_ablation(const ConceptCone& cone) {
    InterventionPlan p;
    for (int j = 0; j < cone.k; ++j)
      p.edits.push_back({InterventionEdit::Kind::kAblate, 0, 0.0,
                         Direction{cone.basis.col(j), true}});
    return p;
  }
};

struct ConeProvenance {
  std::string model_hash;
  std::vector<double> loss_weights;  // lambda1..3
  uint64_t seed = 0;
};

inline void save_cone_json(const ConceptCone& cone, const ConeProvenance& prov,
                           const std::string& path) {
  nlohmann::json j;
  j["format_version"] = 1;
  j["layer"] = cone.layer;
  j["token_position"] = cone.token_position;
  j["k"] = cone.k;
  j["d_model"] = cone.basis.rows();
  std::vector<double> flat;
  flat.reserve(cone.k * cone.basis.rows());
  for (int i = 0; i < cone.k; ++i)  // row-major k x d_model
    for (int r = 0; r < cone.basis.rows(); ++r) flat.push_back(cone.basis(r, i));
  j["basis"] = flat;
  j["provenance"] = {{"model_hash", prov.model_hash},
                     {"loss_weights", prov.loss_weights},
                     {"seed", prov.seed}};
  std::ofstream f(path);
  if (!f) throw RuntimeFailure("cannot write cone file: " + path);
  f << j.dump(2) << "\n";
}

inline ConceptCone load_cone_json(const std::string& path,
                                  ConeProvenance* prov = nullptr) {
  std::ifstream f(path);
  if (!f) throw RuntimeFailure("cannot read cone file: " + path);
  nlohmann::json j = nlohmann::json::parse(f);
  if (j.at("format_version").get<int>() != 1)
    throw RuntimeFailure("cone file: unknown format version");
  int k = j.at("k").get<int>();
  int d = j.at("d_model").get<int>();
  auto flat = j.at("basis").get<std::vector<double>>();
  if (static_cast<int>(flat.size()) != k * d)
    throw RuntimeFailure("cone file: basis length mismatch");
  ConceptCone cone;
  cone.layer = j.at("layer").get<int>();
  cone.token_position = j.at("token_position").get<int>();
  cone.k = k;
  cone.basis = Mat(d, k);
  for (int i = 0; i < k; ++i)
    for (int r = 0; r < d; ++r) cone.basis(r, i) = flat[i * d + r];
  Mat gram = cone.basis.transpose() * cone.basis - Mat::Identity(k, k);
  if (gram.cwiseAbs().maxCoeff() > 1e-5)
    throw RuntimeFailure("cone file: basis fails orthonormality check");
  if (prov && j.contains("provenance")) {
    const auto& p = j["provenance"];
    prov->model_hash = p.value("model_hash", std::string());
    prov->loss_weights = p.value("loss_weights", std::vector<double>());
    prov->seed = p.value("seed", uint64_t{0});
  }
  return cone;
}

}  // namespace conecraft
