// conecraft command-line front end: reproducible experiment runs driven by a
// JSON config. Commands: train-toy, find-cone, sweep-layers, sweep-dims,
// eval-asr, eval-kl, cos-sim, export-pca, sample-cone.
//
// Exit codes: 0 success, 1 validation error, 2 runtime failure.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "conecraft/checkpoint.hpp"
#include "conecraft/cone_opt.hpp"
#include "conecraft/data.hpp"
#include "conecraft/eval.hpp"
#include "conecraft/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace conecraft;

namespace {

// ---- config -----------------------------------------------------------------

json default_config() {
  return json{
      {"seed", 0},
      {"out_dir", "out"},
      {"template_id", 2},
      {"dataset",
       {{"source", "synthetic"},
        {"statements_csv", ""},
        {"retain_source", "synthetic"},
        {"retain_file", ""},
        {"n_entities", 20},
        {"n_retain", 64},
        {"train_fraction", 0.8}}},
      {"model",
       {{"checkpoint", ""},
        {"n_layers", 4},
        {"d_model", 64},
        {"n_heads", 4},
        {"d_mlp", 256},
        {"max_seq_len", 64},
        {"norm_kind", "rms"}}},
      {"train",
       {{"steps", 2000},
        {"learning_rate", 3e-3},
        {"batch_size", 16},
        {"weight_decay", 0.01},
        {"grad_clip", 1.0},
        {"log_every", 50},
        {"answer_weight", 5.0},
        {"dtype", "f64"}}},
      {"cone",
       {{"k", 1},
        {"layer", 3},
        {"token_position", 1},
        {"steps", 300},
        {"learning_rate", 0.02},
        {"batch_size", 4},
        {"n_cone_samples", 16},
        {"alpha_add", 0.0},
        {"weights", {{"add", 1.0}, {"ablate", 1.0}, {"retain", 1.0}}},
        {"cone_file", ""}}},
      {"eval",
       {{"mode", "ablate_true"},
        {"intervention", "cone"},
        {"split", "test"},
        {"continuation_len", 30},
        {"kl_threshold", 0.1},
        {"k_max", 5},
        {"mc_samples", 64},
        {"n_positions", 5},
        {"alpha", 0.0},
        {"n_samples", 16},
        {"cone_files", json::array()}}}};
}

bool type_compatible(const json& a, const json& b) {
  if (a.is_number() && b.is_number()) return true;
  return a.type() == b.type();
}

void validate_against_defaults(const json& user, const json& defaults,
                               const std::string& path) {
  for (auto it = user.begin(); it != user.end(); ++it) {
    std::string key = path.empty() ? it.key() : path + "." + it.key();
    if (!defaults.contains(it.key()))
      throw ContractError("config: unknown key \"" + key + "\"");
    const json& dv = defaults.at(it.key());
    if (dv.is_object()) {
      if (!it->is_object())
        throw ContractError("config: expected object at \"" + key + "\"");
      validate_against_defaults(*it, dv, key);
    } else if (!dv.is_array() && !type_compatible(*it, dv)) {
      throw ContractError("config: wrong type for \"" + key + "\"");
    }
  }
}

void deep_merge(json& base, const json& over) {
  for (auto it = over.begin(); it != over.end(); ++it) {
    if (it->is_object() && base.contains(it.key()) &&
        base[it.key()].is_object())
      deep_merge(base[it.key()], *it);
    else
      base[it.key()] = *it;
  }
}

void apply_set(json& cfg, const std::string& kv) {
  auto eq = kv.find('=');
  if (eq == std::string::npos)
    throw ContractError("--set expects key=value, got: " + kv);
  std::string key = kv.substr(0, eq), raw = kv.substr(eq + 1);
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::parse_error&) {
    value = raw;  // bare strings need no quotes
  }
  json* node = &cfg;
  size_t start = 0;
  while (true) {
    auto dot = key.find('.', start);
    std::string part =
        key.substr(start, dot == std::string::npos ? key.size() : dot - start);
    if (part.empty()) throw ContractError("--set: empty key segment in " + kv);
    if (dot == std::string::npos) {
      (*node)[part] = value;
      break;
    }
    node = &(*node)[part];
    start = dot + 1;
  }
}

struct CliArgs {
  std::string command;
  std::string config_path;
  std::vector<std::string> sets;
};

CliArgs parse_args(int argc, char** argv) {
  CliArgs a;
  if (argc < 2) throw ContractError("usage: conecraft <command> [--config path] [--set key=value]...");
  a.command = argv[1];
  for (int i = 2; i < argc; ++i) {
    std::string arg = argv[i];
    auto next = [&](const char* flag) -> std::string {
      if (i + 1 >= argc)
        throw ContractError(std::string(flag) + " expects an argument");
      return argv[++i];
    };
    if (arg == "--config")
      a.config_path = next("--config");
    else if (arg == "--set")
      a.sets.push_back(next("--set"));
    else
      throw ContractError("unknown argument: " + arg);
  }
  return a;
}

json resolve_config(const CliArgs& args) {
  json cfg = default_config();
  if (!args.config_path.empty()) {
    std::ifstream f(args.config_path);
    if (!f) throw RuntimeFailure("cannot open config: " + args.config_path);
    json user = json::parse(f);
    validate_against_defaults(user, default_config(), "");
    deep_merge(cfg, user);
  }
  for (const auto& kv : args.sets) {
    json patch = default_config();
    apply_set(patch, kv);
    // re-validate the patched tree so typos in --set are caught too
    validate_against_defaults(patch, default_config(), "");
    apply_set(cfg, kv);
  }
  if (const char* env = std::getenv("CONECRAFT_OUT"))
    if (*env) cfg["out_dir"] = std::string(env);
  return cfg;
}

// ---- shared plumbing ----------------------------------------------------------

std::string out_path(const json& cfg, const std::string& name) {
  fs::path dir(cfg.at("out_dir").get<std::string>());
  fs::create_directories(dir);
  return (dir / name).string();
}

void write_report(const json& cfg, const std::string& name,
                  const json& results) {
  json rep{{"format_version", 1}, {"config_echo", cfg}, {"results", results}};
  std::string path = out_path(cfg, name);
  std::ofstream f(path);
  if (!f) throw RuntimeFailure("cannot write report: " + path);
  f << rep.dump(2) << "\n";
  std::cout << "wrote " << path << "\n";
}

void save_vocab(const Tokenizer& tk, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw RuntimeFailure("cannot write vocab: " + path);
  for (const auto& w : tk.words()) f << w << "\n";
}

Tokenizer load_vocab(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw RuntimeFailure("cannot read vocab: " + path);
  std::vector<std::string> words;
  std::string line;
  while (std::getline(f, line))
    if (!line.empty()) words.push_back(line);
  if (words.size() < 5 || words[0] != Tokenizer::kPad)
    throw RuntimeFailure("vocab file is not a tokenizer sidecar: " + path);
  // rebuild by feeding the non-special words in their original order
  std::string rest;
  for (size_t i = 5; i < words.size(); ++i) rest += words[i] + " ";
  Tokenizer tk = Tokenizer::build({rest});
  if (tk.words() != words)
    throw RuntimeFailure("vocab file failed round-trip: " + path);
  return tk;
}

struct Dataset {
  std::vector<LabeledStatement> all, train, test;
  std::vector<RetainPrompt> retain;
};

Dataset build_dataset(const json& cfg) {
  Dataset d;
  uint64_t seed = cfg.at("seed").get<uint64_t>();
  const json& dc = cfg.at("dataset");
  if (dc.at("source") == "csv") {
    d.all = load_statements_csv(dc.at("statements_csv").get<std::string>());
  } else if (dc.at("source") == "synthetic") {
    d.all = gen_synthetic_facts(sub_seed(seed, "data"),
                                dc.at("n_entities").get<int>());
  } else {
    throw ContractError("dataset.source must be synthetic or csv");
  }
  double tf = dc.at("train_fraction").get<double>();
  Split sp = split_dataset(d.all, tf, 1.0 - tf, sub_seed(seed, "split"));
  d.train = std::move(sp.train);
  d.test = std::move(sp.test);
  if (dc.at("retain_source") == "file")
    d.retain = load_retain_prompts(dc.at("retain_file").get<std::string>());
  else
    d.retain = gen_retain_corpus(sub_seed(seed, "retain"),
                                 dc.at("n_retain").get<int>());
  return d;
}

struct Workspace {
  Dataset data;
  Tokenizer tk;
  ModelConfig mcfg;
  ModelParameters params;
  PromptTemplate tmpl;
};

// Loads the artifacts a post-training command needs: checkpoint, vocab
// sidecar, and the dataset (regenerated from the same seeds).
Workspace load_workspace(const json& cfg) {
  Workspace w;
  w.tmpl = prompt_template(cfg.at("template_id").get<int>());
  w.data = build_dataset(cfg);
  std::string ckpt = cfg.at("model").at("checkpoint").get<std::string>();
  if (ckpt.empty()) ckpt = out_path(cfg, "model.json");
  auto [params, mcfg] = load_checkpoint(ckpt);
  w.params = std::move(params);
  w.mcfg = mcfg;
  fs::path vocab = fs::path(ckpt).parent_path() / "vocab.txt";
  w.tk = load_vocab(vocab.string());
  if (w.tk.vocab_size() != w.mcfg.vocab_size)
    throw RuntimeFailure("vocab sidecar does not match checkpoint vocab size");
  return w;
}

ConeOptConfig cone_config(const json& cfg) {
  const json& cc = cfg.at("cone");
  ConeOptConfig oc;
  oc.k = cc.at("k").get<int>();
  oc.layer = cc.at("layer").get<int>();
  oc.token_position = cc.at("token_position").get<int>();
  oc.steps = cc.at("steps").get<int>();
  oc.learning_rate = cc.at("learning_rate").get<double>();
  oc.batch_size = cc.at("batch_size").get<int>();
  oc.n_cone_samples = cc.at("n_cone_samples").get<int>();
  oc.alpha_add = cc.at("alpha_add").get<double>();
  oc.seed = cfg.at("seed").get<uint64_t>();
  oc.weights.add = cc.at("weights").at("add").get<double>();
  oc.weights.ablate = cc.at("weights").at("ablate").get<double>();
  oc.weights.retain = cc.at("weights").at("retain").get<double>();
  oc.validate();
  return oc;
}

TargetSet make_targets(const Workspace& w, const json& cfg, double* accuracy,
                       bool* below) {
  std::vector<LabeledStatement> ts, fs_;
  for (const auto& s : w.data.train) (s.label ? ts : fs_).push_back(s);
  auto res = build_targets(w.params, w.mcfg, w.tk, ts, fs_, w.data.retain,
                           w.tmpl, cfg.at("eval").at("continuation_len").get<int>());
  if (res.below_threshold)
    std::cerr << "warning: model accuracy "
              << res.model_accuracy
              << " is below the 0.95 prerequisite; using the truthfully "
                 "answered subset\n";
  if (accuracy) *accuracy = res.model_accuracy;
  if (below) *below = res.below_threshold;
  return std::move(res.targets);
}

std::string cone_path(const json& cfg) {
  std::string p = cfg.at("cone").at("cone_file").get<std::string>();
  return p.empty() ? out_path(cfg, "cone.json") : p;
}

const std::vector<LabeledStatement>& eval_split(const Workspace& w,
                                                const json& cfg) {
  std::string split = cfg.at("eval").at("split").get<std::string>();
  if (split == "test") return w.data.test;
  if (split == "train") return w.data.train;
  if (split == "all") return w.data.all;
  throw ContractError("eval.split must be train, test, or all");
}

// ---- commands -----------------------------------------------------------------

int cmd_train_toy(const json& cfg) {
  PromptTemplate tmpl = prompt_template(cfg.at("template_id").get<int>());
  Dataset d = build_dataset(cfg);
  Tokenizer tk = Tokenizer::build(corpus_texts(d.all, d.retain, tmpl));

  const json& mc = cfg.at("model");
  ModelConfig mcfg;
  mcfg.n_layers = mc.at("n_layers").get<int>();
  mcfg.d_model = mc.at("d_model").get<int>();
  mcfg.n_heads = mc.at("n_heads").get<int>();
  mcfg.d_mlp = mc.at("d_mlp").get<int>();
  mcfg.max_seq_len = mc.at("max_seq_len").get<int>();
  mcfg.norm_kind = norm_kind_from(mc.at("norm_kind").get<std::string>());
  mcfg.vocab_size = tk.vocab_size();
  mcfg.seed = cfg.at("seed").get<uint64_t>();
  mcfg.validate();

  const json& tc = cfg.at("train");
  auto data = build_training_set(tk, d.train, d.retain, tmpl,
                                 tc.at("answer_weight").get<double>());
  TrainOptions opts;
  opts.steps = tc.at("steps").get<int>();
  opts.learning_rate = tc.at("learning_rate").get<double>();
  opts.batch_size = tc.at("batch_size").get<int>();
  opts.weight_decay = tc.at("weight_decay").get<double>();
  opts.grad_clip = tc.at("grad_clip").get<double>();
  opts.log_every = tc.at("log_every").get<int>();
  opts.seed = cfg.at("seed").get<uint64_t>();

  std::vector<StepLoss> trace;
  ModelParameters params = train_toy_model(data, mcfg, opts, &trace);

  std::string ckpt = out_path(cfg, "model.json");
  save_checkpoint(params, mcfg, ckpt, tc.at("dtype").get<std::string>());
  save_vocab(tk, out_path(cfg, "vocab.txt"));
  save_statements_csv(d.train, out_path(cfg, "train_statements.csv"));
  save_statements_csv(d.test, out_path(cfg, "test_statements.csv"));
  {
    std::ofstream f(out_path(cfg, "retain_prompts.txt"));
    for (const auto& r : d.retain) f << r.instruction << "\n";
  }
  {
    std::ofstream f(out_path(cfg, "train_metrics.csv"));
    f << "step,loss\n";
    for (const auto& sl : trace) f << sl.step << "," << sl.loss << "\n";
  }
  double train_acc = eval_accuracy(params, mcfg, tk, d.train, tmpl);
  double test_acc = eval_accuracy(params, mcfg, tk, d.test, tmpl);
  write_report(cfg, "train_report.json",
               {{"model_hash", model_hash(params)},
                {"checkpoint", ckpt},
                {"final_loss", trace.empty() ? 0.0 : trace.back().loss},
                {"train_accuracy", train_acc},
                {"heldout_accuracy", test_acc},
                {"vocab_size", tk.vocab_size()},
                {"n_train", d.train.size()},
                {"n_test", d.test.size()}});
  std::cout << "train accuracy " << train_acc << ", held-out " << test_acc
            << "\n";
  return 0;
}

int cmd_find_cone(const json& cfg) {
  Workspace w = load_workspace(cfg);
  ConeOptConfig oc = cone_config(cfg);
  double acc = 0;
  bool below = false;
  TargetSet targets = make_targets(w, cfg, &acc, &below);
  ConeOptResult res = optimize_cone(w.params, w.mcfg, targets, oc);

  ConeProvenance prov{model_hash(w.params),
                      {oc.weights.add, oc.weights.ablate, oc.weights.retain},
                      oc.seed};
  std::string cone_file = out_path(cfg, "cone.json");
  save_cone_json(res.cone, prov, cone_file);
  {
    std::ofstream f(out_path(cfg, "cone_trace.csv"));
    f << "step,add,ablate,retain,total\n";
    for (const auto& bd : res.trace)
      f << bd.step << "," << bd.add << "," << bd.ablate << "," << bd.retain
        << "," << bd.total << "\n";
  }
  std::vector<double> dim_cos;
  for (int j = 0; j < res.cone.k; ++j)
    dim_cos.push_back(cosine_similarity(
        Direction{res.cone.basis.col(j), true}, res.dim));
  // The emitted cone is the best iterate, so report the trace minimum rather
  // than the last step's loss.
  double final_total = res.trace.front().total;
  for (const auto& bd : res.trace) final_total = std::min(final_total, bd.total);
  write_report(cfg, "cone_report.json",
               {{"cone_file", cone_file},
                {"alpha_add", res.alpha_add},
                {"model_accuracy", acc},
                {"below_accuracy_threshold", below},
                {"improved", res.improved},
                {"initial_total", res.trace.front().total},
                {"final_total", final_total},
                {"dim_cosines", dim_cos}});
  return 0;
}

int cmd_sweep_layers(const json& cfg) {
  Workspace w = load_workspace(cfg);
  ConeOptConfig oc = cone_config(cfg);
  TargetSet targets = make_targets(w, cfg, nullptr, nullptr);
  LayerSweepReport rep =
      sweep_layers(w.params, w.mcfg, w.tk, targets, eval_split(w, cfg), w.tmpl,
                   oc, cfg.at("eval").at("n_positions").get<int>());
  write_report(cfg, "layer_sweep.json", to_json(rep));
  return 0;
}

int cmd_sweep_dims(const json& cfg) {
  Workspace w = load_workspace(cfg);
  ConeOptConfig oc = cone_config(cfg);
  TargetSet targets = make_targets(w, cfg, nullptr, nullptr);
  DimSweepReport rep = sweep_dims(
      w.params, w.mcfg, w.tk, targets, eval_split(w, cfg), w.tmpl, oc,
      cfg.at("eval").at("k_max").get<int>(),
      cfg.at("eval").at("mc_samples").get<int>());
  {
    std::ofstream f(out_path(cfg, "dim_sweep.csv"));
    f << "k,sample_index,asr\n";
    for (const auto& e : rep.entries)
      for (size_t i = 0; i < e.sample_asrs.size(); ++i)
        f << e.k << "," << i << "," << e.sample_asrs[i] << "\n";
  }
  write_report(cfg, "dim_sweep.json", to_json(rep));
  return 0;
}

int cmd_eval_asr(const json& cfg) {
  Workspace w = load_workspace(cfg);
  ConceptCone cone = load_cone_json(cone_path(cfg));
  std::string mode_s = cfg.at("eval").at("mode").get<std::string>();
  ASRMode mode;
  if (mode_s == "ablate_true")
    mode = ASRMode::kAblateTrue;
  else if (mode_s == "add_false")
    mode = ASRMode::kAddFalse;
  else
    throw ContractError("eval.mode must be ablate_true or add_false");

  std::string ikind = cfg.at("eval").at("intervention").get<std::string>();
  InterventionPlan plan;
  if (ikind == "none") {
    plan = InterventionPlan::none();
  } else if (ikind == "cone") {
    if (mode == ASRMode::kAblateTrue) {
      plan = InterventionPlan::cone_ablation(cone);
    } else {
      double alpha = cfg.at("eval").at("alpha").get<double>();
      if (alpha <= 0) {
        ConeOptConfig oc = cone_config(cfg);
        oc.layer = cone.layer;
        oc.token_position = cone.token_position;
        TargetSet targets = make_targets(w, cfg, nullptr, nullptr);
        alpha = resolve_alpha(w.params, w.mcfg, oc, targets);
      }
      plan = InterventionPlan::addition(cone.layer, alpha,
                                        Direction{cone.basis.col(0), true});
    }
  } else {
    throw ContractError("eval.intervention must be cone or none");
  }
  ASRReport rep = eval_asr(w.params, w.mcfg, w.tk, plan, eval_split(w, cfg),
                           mode, w.tmpl);
  write_report(cfg, "asr_report.json", to_json(rep));
  std::cout << "asr " << rep.asr << " (" << rep.flipped << "/"
            << rep.baseline_truthful << ")\n";
  return 0;
}

int cmd_eval_kl(const json& cfg) {
  Workspace w = load_workspace(cfg);
  ConceptCone cone = load_cone_json(cone_path(cfg));
  TargetSet targets = make_targets(w, cfg, nullptr, nullptr);
  KLReport rep = eval_kl_retention(
      w.params, w.mcfg, cone, targets.retain,
      cfg.at("eval").at("continuation_len").get<int>(),
      cfg.at("eval").at("kl_threshold").get<double>());
  write_report(cfg, "kl_report.json", to_json(rep));
  std::cout << "mean kl " << rep.mean_kl << ", gate "
            << (rep.passed ? "passed" : "failed") << "\n";
  return 0;
}

int cmd_cos_sim(const json& cfg) {
  Workspace w = load_workspace(cfg);
  std::vector<std::string> files;
  for (const auto& f : cfg.at("eval").at("cone_files"))
    files.push_back(f.get<std::string>());
  if (files.empty()) files.push_back(cone_path(cfg));
  std::vector<ConceptCone> cones;
  for (const auto& f : files) cones.push_back(load_cone_json(f));
  TargetSet targets = make_targets(w, cfg, nullptr, nullptr);
  CosSimTable table = dim_vs_cone_alignment(w.params, w.mcfg, targets, cones);
  write_report(cfg, "cos_sim.json", to_json(table));
  return 0;
}

int cmd_export_pca(const json& cfg) {
  Workspace w = load_workspace(cfg);
  PCAProjection proj =
      export_pca(w.params, w.mcfg, w.tk, eval_split(w, cfg), w.tmpl);
  json layers = json::array();
  {
    std::ofstream f(out_path(cfg, "pca.csv"));
    f << "layer,pc1,pc2,label,statement\n";
    for (const auto& lp : proj.layers) {
      for (size_t i = 0; i < lp.pc1.size(); ++i)
        f << lp.layer << "," << lp.pc1[i] << "," << lp.pc2[i] << ","
          << (lp.labels[i] ? 1 : 0) << ","
          << detail::csv_escape(lp.statements[i]) << "\n";
      layers.push_back({{"layer", lp.layer},
                        {"explained_var1", lp.explained_var1},
                        {"explained_var2", lp.explained_var2},
                        {"pc1", lp.pc1},
                        {"pc2", lp.pc2},
                        {"labels", lp.labels}});
    }
  }
  write_report(cfg, "pca.json", {{"layers", layers}});
  return 0;
}

int cmd_sample_cone(const json& cfg) {
  ConceptCone cone = load_cone_json(cone_path(cfg));
  int n = cfg.at("eval").at("n_samples").get<int>();
  auto samples = sample_cone(cone, n, sub_seed(cfg.at("seed").get<uint64_t>(),
                                               "sample-cone"));
  json out = json::array();
  for (const auto& s : samples) {
    Membership m = cone_membership(cone, s.direction);
    if (!m.inside)
      throw RuntimeFailure("sample-cone: drawn direction failed membership");
    out.push_back(
        {{"lambdas", std::vector<double>(s.lambdas.data(),
                                         s.lambdas.data() + s.lambdas.size())},
         {"vector",
          std::vector<double>(s.direction.vector.data(),
                              s.direction.vector.data() +
                                  s.direction.vector.size())}});
  }
  write_report(cfg, "cone_samples.json",
               {{"k", cone.k}, {"n_samples", n}, {"samples", out}});
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    CliArgs args = parse_args(argc, argv);
    json cfg = resolve_config(args);
    if (args.command == "train-toy") return cmd_train_toy(cfg);
    if (args.command == "find-cone") return cmd_find_cone(cfg);
    if (args.command == "sweep-layers") return cmd_sweep_layers(cfg);
    if (args.command == "sweep-dims") return cmd_sweep_dims(cfg);
    if (args.command == "eval-asr") return cmd_eval_asr(cfg);
    if (args.command == "eval-kl") return cmd_eval_kl(cfg);
    if (args.command == "cos-sim") return cmd_cos_sim(cfg);
    if (args.command == "export-pca") return cmd_export_pca(cfg);
    if (args.command == "sample-cone") return cmd_sample_cone(cfg);
    throw ContractError("unknown command: " + args.command);
  } catch (const ContractError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "failure: " << e.what() << "\n";
    return 2;
  }
}
