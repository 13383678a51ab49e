#pragma once

// Reverse-mode autodiff tape over Eigen matrices. Nodes are appended in
// topological order; backward() walks the tape in reverse. Scalars are 1x1
// matrices. Only the ops the transformer and the cone losses need.

#include <cmath>
#include <functional>
#include <utility>
#include <deque>
#include <vector>

#include "conecraft/common.hpp"

namespace conecraft {

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

class Tape {
 public:
  Var leaf(Mat v, bool needs_grad = false) {
    return push(std::move(v), needs_grad, nullptr);
  }
  Var constant(Mat v) { return leaf(std::move(v), false); }
  Var scalar(double v) { return constant(Mat::Constant(1, 1, v)); }

  const Mat& val(Var x) const { return nodes_[x.id].val; }
  double sval(Var x) const { return nodes_[x.id].val(0, 0); }

  // Gradient of the last backward() target w.r.t. x; zeros if x never
  // influenced it.
  Mat grad(Var x) const {
    const Node& n = nodes_[x.id];
    if (n.grad.size() == 0) return Mat::Zero(n.val.rows(), n.val.cols());
    return n.grad;
  }

  size_t size() const { return nodes_.size(); }

  Var add(Var a, Var b) {
    Mat y = val(a) + val(b);
    return push(std::move(y), needs(a) || needs(b), [=](Tape& t) {
      const Mat& g = t.nodes_[t.cur_].grad;
      t.accum(a, g);
      t.accum(b, g);
    });
  }

  Var sub(Var a, Var b) {
    Mat y = val(a) - val(b);
    return push(std::move(y), needs(a) || needs(b), [=](Tape& t) {
      const Mat& g = t.nodes_[t.cur_].grad;
      t.accum(a, g);
      t.accum(b, -g);
    });
  }

  Var scale(Var a, double c) {
    Mat y = val(a) * c;
    return push(std::move(y), needs(a), [=](Tape& t) {
      t.accum(a, c * t.nodes_[t.cur_].grad);
    });
  }

  Var cmul(Var a, Var b) {
    Mat y = val(a).cwiseProduct(val(b));
    return push(std::move(y), needs(a) || needs(b), [=](Tape& t) {
      const Mat& g = t.nodes_[t.cur_].grad;
      t.accum(a, g.cwiseProduct(t.val(b)));
      t.accum(b, g.cwiseProduct(t.val(a)));
    });
  }

  // y = a * s, s a 1x1 scalar node
  Var smul(Var a, Var s) {
    Mat y = val(a) * sval(s);
    return push(std::move(y), needs(a) || needs(s), [=](Tape& t) {
      const Mat& g = t.nodes_[t.cur_].grad;
      t.accum(a, g * t.sval(s));
      t.accum(s, Mat::Constant(1, 1, g.cwiseProduct(t.val(a)).sum()));
    });
  }

  Var matmul(Var a, Var b) {
    Mat y = val(a) * val(b);
    return push(std::move(y), needs(a) || needs(b), [=](Tape& t) {
      const Mat& g = t.nodes_[t.cur_].grad;
      t.accum(a, g * t.val(b).transpose());
      t.accum(b, t.val(a).transpose() * g);
    });
  }

  // y = a * b^T
  Var matmul_nt(Var a, Var b) {
    Mat y = val(a) * val(b).transpose();
    return push(std::move(y), needs(a) || needs(b), [=](Tape& t) {
      const Mat& g = t.nodes_[t.cur_].grad;
      t.accum(a, g * t.val(b));
      t.accum(b, g.transpose() * t.val(a));
    });
  }

  Var gather_rows(Var table, std::vector<int> ids) {
    Mat y(static_cast<int>(ids.size()), val(table).cols());
    for (size_t i = 0; i < ids.size(); ++i) y.row(i) = val(table).row(ids[i]);
    return push(std::move(y), needs(table), [=, ids = std::move(ids)](Tape& t) {
      const Mat& g = t.nodes_[t.cur_].grad;
      Mat& tg = t.grad_ref(table);
      for (size_t i = 0; i < ids.size(); ++i) tg.row(ids[i]) += g.row(i);
    });
  }

  Var slice_cols(Var a, int j0, int n) {
    Mat y = val(a).middleCols(j0, n);
    return push(std::move(y), needs(a), [=](Tape& t) {
      t.grad_ref(a).middleCols(j0, n) += t.nodes_[t.cur_].grad;
    });
  }

  Var hcat(const std::vector<Var>& parts) {
    int rows = val(parts[0]).rows(), cols = 0;
    for (Var p : parts) cols += val(p).cols();
    Mat y(rows, cols);
    bool ng = false;
    int off = 0;
    for (Var p : parts) {
      y.middleCols(off, val(p).cols()) = val(p);
      off += val(p).cols();
      ng = ng || needs(p);
    }
    return push(std::move(y), ng, [=](Tape& t) {
      const Mat& g = t.nodes_[t.cur_].grad;
      int o = 0;
      for (Var p : parts) {
        int w = t.val(p).cols();
        t.accum(p, g.middleCols(o, w));
        o += w;
      }
    });
  }

  Var row(Var a, int i) {
    Mat y = val(a).row(i);
    return push(std::move(y), needs(a), [=](Tape& t) {
      t.grad_ref(a).row(i) += t.nodes_[t.cur_].grad;
    });
  }

  // Row-wise softmax of a square score matrix with a causal mask: row i only
  // attends to columns 0..i.
  Var causal_softmax(Var s) {
    const Mat& sv = val(s);
    int n = sv.rows();
    Mat y = Mat::Zero(n, sv.cols());
    for (int i = 0; i < n; ++i) {
      int m = i + 1;
      Eigen::RowVectorXd r = sv.row(i).head(m);
      double mx = r.maxCoeff();
      Eigen::RowVectorXd e = (r.array() - mx).exp();
      y.row(i).head(m) = e / e.sum();
    }
    return push(std::move(y), needs(s), [=](Tape& t) {
      const Mat& g = t.nodes_[t.cur_].grad;
      const Mat& p = t.nodes_[t.cur_].val;
      Mat& sg = t.grad_ref(s);
      for (int i = 0; i < p.rows(); ++i) {
        int m = i + 1;
        double dot = g.row(i).head(m).cwiseProduct(p.row(i).head(m)).sum();
        sg.row(i).head(m) += p.row(i).head(m).cwiseProduct(
            (g.row(i).head(m).array() - dot).matrix());
      }
    });
  }

  // tanh-approximation GELU, smooth everywhere (finite-difference friendly)
  Var gelu(Var a) {
    const Mat& x = val(a);
    Mat y = x.unaryExpr([](double v) { return gelu_f(v); });
    return push(std::move(y), needs(a), [=](Tape& t) {
      const Mat& g = t.nodes_[t.cur_].grad;
      Mat d = t.val(a).unaryExpr([](double v) { return gelu_df(v); });
      t.accum(a, g.cwiseProduct(d));
    });
  }

  // Row-wise RMS norm with a learned gain: y_r = x_r / rms(x_r) .* gain
  Var rms_norm(Var a, Var gain, double eps = 1e-6) {
    const Mat& x = val(a);
    const Mat& gn = val(gain);  // 1 x d
    int d = x.cols();
    Mat y(x.rows(), d);
    for (int i = 0; i < x.rows(); ++i) {
      double r = std::sqrt(x.row(i).squaredNorm() / d + eps);
      y.row(i) = x.row(i).cwiseProduct(gn.row(0)) / r;
    }
    return push(std::move(y), needs(a) || needs(gain), [=](Tape& t) {
      const Mat& g = t.nodes_[t.cur_].grad;
      const Mat& x = t.val(a);
      const Mat& gn = t.val(gain);
      int d = x.cols();
      Mat dx = Mat::Zero(x.rows(), d);
      Mat dgn = Mat::Zero(1, d);
      for (int i = 0; i < x.rows(); ++i) {
        double r = std::sqrt(x.row(i).squaredNorm() / d + eps);
        Eigen::RowVectorXd gg = g.row(i).cwiseProduct(gn.row(0));
        double s = gg.cwiseProduct(x.row(i)).sum();
        dx.row(i) = gg / r - x.row(i) * (s / (d * r * r * r));
        dgn.row(0) += g.row(i).cwiseProduct(x.row(i)) / r;
      }
      t.accum(a, dx);
      t.accum(gain, dgn);
    });
  }

  // v (d x 1) -> v / ||v||
  Var normalize_vec(Var v) {
    double nrm = val(v).norm();
    if (nrm == 0.0) throw ContractError("normalize_vec: zero vector");
    Mat y = val(v) / nrm;
    return push(std::move(y), needs(v), [=](Tape& t) {
      const Mat& g = t.nodes_[t.cur_].grad;
      const Mat& y = t.nodes_[t.cur_].val;
      t.accum(v, (g - y * (y.transpose() * g)) / nrm);
    });
  }

  // Y = X - (X r) r^T for unit r (d x 1); rank-1 projection of every row.
  Var ablate_rows(Var x, Var r) {
    Mat y = val(x) - (val(x) * val(r)) * val(r).transpose();
    return push(std::move(y), needs(x) || needs(r), [=](Tape& t) {
      const Mat& g = t.nodes_[t.cur_].grad;
      const Mat& xv = t.val(x);
      const Mat& rv = t.val(r);
      t.accum(x, g - (g * rv) * rv.transpose());
      t.accum(r, -(xv.transpose() * (g * rv) + g.transpose() * (xv * rv)));
    });
  }

  // Y = X + alpha * 1 r^T; adds alpha*r to every row.
  Var add_dir_rows(Var x, Var r, double alpha) {
    Mat y = val(x) + alpha * (Vec::Ones(val(x).rows()) * val(r).transpose());
    return push(std::move(y), needs(x) || needs(r), [=](Tape& t) {
      const Mat& g = t.nodes_[t.cur_].grad;
      t.accum(x, g);
      t.accum(r, alpha * g.colwise().sum().transpose());
    });
  }

  // column vectors (d x 1) -> 1x1
  Var dot(Var a, Var b) {
    Mat y = Mat::Constant(1, 1, (val(a).transpose() * val(b))(0, 0));
    return push(std::move(y), needs(a) || needs(b), [=](Tape& t) {
      double g = t.nodes_[t.cur_].grad(0, 0);
      t.accum(a, g * t.val(b));
      t.accum(b, g * t.val(a));
    });
  }

  // -log(clamp(p, eps, 1-eps)) of a 1x1 probability node
  Var neg_log(Var p, double eps = 1e-7) {
    double pv = sval(p);
    double pc = std::min(std::max(pv, eps), 1.0 - eps);
    Mat y = Mat::Constant(1, 1, -std::log(pc));
    bool clamped = pv != pc;
    return push(std::move(y), needs(p), [=](Tape& t) {
      if (clamped) return;
      t.accum(p, Mat::Constant(1, 1, -t.nodes_[t.cur_].grad(0, 0) / pc));
    });
  }

  // p(yes) of a two-way softmax over {yes, no} entries of a 1 x V logits row
  Var restricted_yes_prob(Var logits_row, int yes_id, int no_id) {
    double ly = val(logits_row)(0, yes_id), ln = val(logits_row)(0, no_id);
    double p = 1.0 / (1.0 + std::exp(ln - ly));
    return push(Mat::Constant(1, 1, p), needs(logits_row), [=](Tape& t) {
      double g = t.nodes_[t.cur_].grad(0, 0) * p * (1.0 - p);
      Mat& lg = t.grad_ref(logits_row);
      lg(0, yes_id) += g;
      lg(0, no_id) -= g;
    });
  }

  // KL(p0 || softmax(logits_row)) against a fixed reference distribution
  Var kl_const_ref(Var logits_row, Vec p0) {
    const Mat& l = val(logits_row);
    Eigen::RowVectorXd ls = l.row(0);
    double mx = ls.maxCoeff();
    Eigen::RowVectorXd e = (ls.array() - mx).exp();
    double z = e.sum();
    Eigen::RowVectorXd logq = ls.array() - mx - std::log(z);
    double kl = 0.0;
    for (int j = 0; j < ls.size(); ++j)
      if (p0(j) > 0.0) kl += p0(j) * (std::log(p0(j)) - logq(j));
    Eigen::RowVectorXd q = e / z;
    return push(Mat::Constant(1, 1, std::max(kl, 0.0)),
                needs(logits_row), [=, p0 = std::move(p0)](Tape& t) {
                  double g = t.nodes_[t.cur_].grad(0, 0);
                  t.accum(logits_row, g * (q - p0.transpose()));
                });
  }

  // Weighted mean cross entropy over rows of a logits matrix.
  Var ce_rows(Var logits, std::vector<int> targets, std::vector<double> w) {
    const Mat& l = val(logits);
    double wsum = 0.0, loss = 0.0;
    Mat soft(l.rows(), l.cols());
    for (int i = 0; i < l.rows(); ++i) {
      double mx = l.row(i).maxCoeff();
      Eigen::RowVectorXd e = (l.row(i).array() - mx).exp();
      double z = e.sum();
      soft.row(i) = e / z;
      loss += w[i] * -(l(i, targets[i]) - mx - std::log(z));
      wsum += w[i];
    }
    loss /= wsum;
    return push(Mat::Constant(1, 1, loss), needs(logits),
                [=, targets = std::move(targets), w = std::move(w),
                 soft = std::move(soft)](Tape& t) {
                  double g = t.nodes_[t.cur_].grad(0, 0);
                  Mat d = soft;
                  for (size_t i = 0; i < targets.size(); ++i) {
                    d(static_cast<int>(i), targets[i]) -= 1.0;
                    d.row(static_cast<int>(i)) *= g * w[i] / wsum;
                  }
                  t.accum(logits, d);
                });
  }

  void backward(Var loss) {
    if (val(loss).size() != 1)
      throw ContractError("backward: target must be scalar");
    grad_ref(loss)(0, 0) = 1.0;
    for (int i = loss.id; i >= 0; --i) {
      Node& n = nodes_[i];
      if (!n.needs_grad || !n.backward || n.grad.size() == 0) continue;
      cur_ = i;
      n.backward(*this);
    }
  }

 private:
  struct Node {
    Mat val;
    Mat grad;  // empty until touched
    bool needs_grad = false;
    std::function<void(Tape&)> backward;
  };

  static double gelu_f(double x) {
    constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
    return 0.5 * x * (1.0 + std::tanh(c * (x + 0.044715 * x * x * x)));
  }
  static double gelu_df(double x) {
    constexpr double c = 0.7978845608028654;
    double u = c * (x + 0.044715 * x * x * x);
    double th = std::tanh(u);
    double sech2 = 1.0 - th * th;
    return 0.5 * (1.0 + th) + 0.5 * x * sech2 * c * (1.0 + 3 * 0.044715 * x * x);
  }

  bool needs(Var x) const { return nodes_[x.id].needs_grad; }

  Mat& grad_ref(Var x) {
    Node& n = nodes_[x.id];
    if (n.grad.size() == 0) n.grad = Mat::Zero(n.val.rows(), n.val.cols());
    return n.grad;
  }

  template <typename Expr>
  void accum(Var x, const Expr& g) {
    if (nodes_[x.id].needs_grad) grad_ref(x) += g;
  }
  Var push(Mat v, bool needs_grad, std::function<void(Tape&)> bw) {
    nodes_.push_back(Node{std::move(v), Mat(), needs_grad, std::move(bw)});
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  // deque keeps references returned by val()/grad_ref() valid while new
  // nodes are pushed, which forward builders rely on.
  std::deque<Node> nodes_;
  int cur_ = -1;
};

}  // namespace conecraft
