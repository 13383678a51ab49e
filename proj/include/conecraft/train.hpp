#pragma once

// Desk-scale next-token training of the toy transformer with AdamW.

#include <map>
#include <random>
#include <string>
#include <vector>

#include "conecraft/data.hpp"
#include "conecraft/model.hpp"
#include "conecraft/tokenizer.hpp"

namespace conecraft {

inline TokenSequence prompt_tokens(const Tokenizer& tk,
                                   const LabeledStatement& stmt,
                                   const PromptTemplate& tmpl) {
  return tk.encode(format_prompt(stmt, tmpl), /*add_bos=*/true);
}

struct TrainExample {
  std::vector<int> ids;
  std::vector<double> target_weights;  // one per predicted position
};

namespace detail {

// Deterministic response text for retain-style instructions, so greedy
// continuations after training are meaningful rather than noise.
inline std::string retain_response(const std::string& instruction) {
  auto words = Tokenizer::split(instruction);
  auto count_of = [](const std::string& w) {
    if (w == "two") return 2;
    if (w == "three") return 3;
    if (w == "four") return 4;
    if (w == "five") return 5;
    return 0;
  };
  if (words.size() >= 10 && words[1] == "the" && words[2] == "word" &&
      words[4] == "next") {
    return words[3] + " " + words[8] + " .";
  }
  if (words.size() >= 6 && words[1] == "the" && words[2] == "word" &&
      count_of(words[4]) > 0) {
    std::string out;
    for (int i = 0; i < count_of(words[4]); ++i)
      out += (i ? " " : "") + words[3];
    return out + " .";
  }
  if (instruction == "Count from one to five .")
    return "one two three four five .";
  if (instruction == "Count from one to ten .")
    return "one two three four five six seven eight nine ten .";
  if (instruction == "List the days of the week .")
    return "Monday Tuesday Wednesday Thursday Friday Saturday Sunday .";
  if (instruction == "Name the four seasons .")
    return "spring summer autumn winter .";
  return "done .";
}

}  // namespace detail

// All raw text the tokenizer vocabulary must cover for a run.
inline std::vector<std::string> corpus_texts(
    const std::vector<LabeledStatement>& facts,
    const std::vector<RetainPrompt>& retain, const PromptTemplate& tmpl) {
  std::vector<std::string> texts;
  texts.push_back(tmpl.system_text + "\nAnswer: Yes No");
  for (const auto& s : facts) texts.push_back(s.text);
  for (const auto& r : retain)
    texts.push_back(r.instruction + " " + detail::retain_response(r.instruction));
  return texts;
}

// Fact prompts with the Yes/No answer appended (answer position upweighted),
// plus retain instructions with their canned responses as plain LM text.
inline std::vector<TrainExample> build_training_set(
    const Tokenizer& tk, const std::vector<LabeledStatement>& facts,
    const std::vector<RetainPrompt>& retain, const PromptTemplate& tmpl,
    double answer_weight = 5.0) {
  std::vector<TrainExample> out;
  for (const auto& s : facts) {
    TokenSequence seq = prompt_tokens(tk, s, tmpl);
    seq.ids.push_back(s.label ? tk.yes_id() : tk.no_id());
    TrainExample ex;
    ex.ids = seq.ids;
    ex.target_weights.assign(ex.ids.size() - 1, 1.0);
    ex.target_weights.back() = answer_weight;
    out.push_back(std::move(ex));
  }
  for (const auto& r : retain) {
    TokenSequence seq = tk.encode(
        r.instruction + " " + detail::retain_response(r.instruction),
        /*add_bos=*/true);
    TrainExample ex;
    ex.ids = seq.ids;
    ex.target_weights.assign(ex.ids.size() - 1, 1.0);
    out.push_back(std::move(ex));
  }
  return out;
}

struct TrainOptions {
  int steps = 2000;
  double learning_rate = 3e-3;
  int batch_size = 16;
  uint64_t seed = 0;
  double weight_decay = 0.01;
  double grad_clip = 1.0;
  int log_every = 50;
};

struct StepLoss {
  int step;
  double loss;
};

class AdamW {
 public:
  AdamW(double lr, double wd, double beta1 = 0.9, double beta2 = 0.999,
        double eps = 1e-8)
      : lr_(lr), wd_(wd), b1_(beta1), b2_(beta2), eps_(eps) {}

  void update(Mat& param, const Mat& grad, const std::string& name,
              bool decay) {
    auto& s = state_[name];
    if (s.m.size() == 0) {
      s.m = Mat::Zero(param.rows(), param.cols());
      s.v = Mat::Zero(param.rows(), param.cols());
    }
    s.t += 1;
    s.m = b1_ * s.m + (1.0 - b1_) * grad;
    s.v = b2_ * s.v + (1.0 - b2_) * grad.cwiseProduct(grad);
    double bc1 = 1.0 - std::pow(b1_, s.t);
    double bc2 = 1.0 - std::pow(b2_, s.t);
    Mat mh = s.m / bc1;
    Mat vh = s.v / bc2;
    if (decay) param -= lr_ * wd_ * param;
    param -= lr_ * mh.cwiseQuotient((vh.cwiseSqrt().array() + eps_).matrix());
  }

 private:
  struct State {
    Mat m, v;
    long t = 0;
  };
  double lr_, wd_, b1_, b2_, eps_;
  std::map<std::string, State> state_;
};

// Next-token training; 0 steps returns the seeded initialization untouched.
inline ModelParameters train_toy_model(const std::vector<TrainExample>& data,
                                       const ModelConfig& cfg,
                                       const TrainOptions& opts,
                                       std::vector<StepLoss>* trace = nullptr) {
  if (data.empty()) throw ContractError("train: empty dataset");
  for (const auto& ex : data) {
    if (static_cast<int>(ex.ids.size()) > cfg.max_seq_len)
      throw ContractError("train: sequence exceeds max_seq_len");
    if (ex.target_weights.size() != ex.ids.size() - 1)
      throw ContractError("train: weight/sequence length mismatch");
  }
  ModelParameters params = init_parameters(cfg);
  if (opts.steps == 0) return params;

  AdamW opt(opts.learning_rate, opts.weight_decay);
  std::mt19937_64 rng(sub_seed(opts.seed, "train"));
  std::uniform_int_distribution<int> pick(0, static_cast<int>(data.size()) - 1);

  for (int step = 1; step <= opts.steps; ++step) {
    Tape t;
    ParamVars pv = leaf_parameters(t, params, /*needs_grad=*/true);
    int bs = std::min<int>(opts.batch_size, static_cast<int>(data.size()));
    Var loss = t.scalar(0.0);
    for (int b = 0; b < bs; ++b) {
      const TrainExample& ex = data[pick(rng)];
      std::vector<int> input(ex.ids.begin(), ex.ids.end() - 1);
      std::vector<int> targets(ex.ids.begin() + 1, ex.ids.end());
      Var logits = forward_graph(t, pv, cfg, input, nullptr);
      loss = t.add(loss, t.ce_rows(logits, targets, ex.target_weights));
    }
    loss = t.scale(loss, 1.0 / bs);
    double loss_val = t.sval(loss);
    if (!std::isfinite(loss_val))
      throw RuntimeFailure("training diverged (non-finite loss) at step " +
                           std::to_string(step));
    if (trace && (step % opts.log_every == 0 || step == 1 ||
                  step == opts.steps))
      trace->push_back({step, loss_val});
    t.backward(loss);

    int li = 0;
    auto step_tensor = [&](Mat& p, Var v, const std::string& name, bool decay) {
      Mat g = t.grad(v);
      double n = g.norm();
      if (opts.grad_clip > 0 && n > opts.grad_clip) g *= opts.grad_clip / n;
      opt.update(p, g, name, decay);
    };
    step_tensor(params.embed, pv.embed, "embed", true);
    step_tensor(params.pos, pv.pos, "pos", true);
    for (auto& l : params.layers) {
      const LayerVars& lv = pv.layers[li];
      std::string base = "layers." + std::to_string(li) + ".";
      step_tensor(l.wq, lv.wq, base + "wq", true);
      step_tensor(l.wk, lv.wk, base + "wk", true);
      step_tensor(l.wv, lv.wv, base + "wv", true);
      step_tensor(l.wo, lv.wo, base + "wo", true);
      step_tensor(l.w1, lv.w1, base + "w1", true);
      step_tensor(l.w2, lv.w2, base + "w2", true);
      step_tensor(l.attn_gain, lv.attn_gain, base + "ga", false);
      step_tensor(l.mlp_gain, lv.mlp_gain, base + "gm", false);
      ++li;
    }
    step_tensor(params.final_gain, pv.final_gain, "gf", false);
    step_tensor(params.unembed, pv.unembed, "unembed", true);
  }
  validate_parameters(params, cfg);
  return params;
}

// Fraction of statements whose restricted Yes/No argmax matches the label.
inline double eval_accuracy(const ModelParameters& params,
                            const ModelConfig& cfg, const Tokenizer& tk,
                            const std::vector<LabeledStatement>& stmts,
                            const PromptTemplate& tmpl) {
  if (stmts.empty()) throw ContractError("eval_accuracy: empty statement set");
  int correct = 0;
  for (const auto& s : stmts) {
    TokenSequence seq = prompt_tokens(tk, s, tmpl);
    ForwardResult r = forward(params, cfg, seq);
    auto [p_yes, p_no] = restricted_binary_probs(
        r.logits.row(r.logits.rows() - 1), tk.yes_id(), tk.no_id());
    bool answer_yes = p_yes >= p_no;
    if (answer_yes == s.label) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(stmts.size());
}

}  // namespace conecraft
