#pragma once

// Dataset ingestion, prompt formatting, synthetic fact and retain-corpus
// generation, and stratified splits.

#include <algorithm>
#include <fstream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "conecraft/common.hpp"

namespace conecraft {

struct LabeledStatement {
  std::string text;
  bool label = false;  // true = factually true
  std::string topic;
};

struct PromptTemplate {
  int id = 2;
  std::string system_text;
};

// The four binary Yes/No system prompts, retrievable by id.
inline PromptTemplate prompt_template(int id) {
  switch (id) {
    case 1:
      return {1, "Respond to the following statement with a \"Yes\" or a \"No.\""};
    case 2:
      return {2,
              "Respond to the following statements with either \"Yes\" or "
              "\"No\" based on their factual accuracy."};
    case 3:
      return {3,
              "Answer with exactly one word - \"Yes\" if the statement is "
              "true, otherwise \"No\"."};
    case 4:
      return {4,
              "Based on your best estimate of the following statement, "
              "respond \"Yes\" or \"No.\""};
    default:
      throw ContractError("prompt_template: id must be 1..4");
  }
}

// system text + statement + answer cue; the cue keeps the final prompt token
// constant across statements.
inline std::string format_prompt(const LabeledStatement& stmt,
                                 const PromptTemplate& tmpl) {
  return tmpl.system_text + "\n" + stmt.text + "\nAnswer:";
}

namespace detail {

inline std::vector<std::string> parse_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  for (size_t i = 0; i < line.size(); ++i) {
    char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  fields.push_back(cur);
  return fields;
}

inline std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(),
                 [](unsigned char c) { return std::tolower(c); });
  return s;
}

inline std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += "\"\"";
    out += c;
  }
  return out + "\"";
}

}  // namespace detail

// CSV with a header containing at least statement,label (extra columns
// ignored); label parsed from {1,0,true,false} case-insensitively.
inline std::vector<LabeledStatement> load_statements_csv(
    const std::string& path) {
  std::ifstream f(path);
  if (!f) throw RuntimeFailure("cannot open statements file: " + path);
  std::string line;
  if (!std::getline(f, line))
    throw RuntimeFailure("statements file is empty: " + path);
  auto header = detail::parse_csv_line(line);
  int col_stmt = -1, col_label = -1, col_topic = -1;
  for (size_t i = 0; i < header.size(); ++i) {
    std::string h = detail::lower(header[i]);
    if (h == "statement") col_stmt = static_cast<int>(i);
    if (h == "label") col_label = static_cast<int>(i);
    if (h == "topic") col_topic = static_cast<int>(i);
  }
  if (col_stmt < 0 || col_label < 0)
    throw RuntimeFailure("statements file missing statement/label columns");

  std::vector<LabeledStatement> out;
  int row = 1;
  while (std::getline(f, line)) {
    ++row;
    if (line.empty()) continue;
    auto fields = detail::parse_csv_line(line);
    if (static_cast<int>(fields.size()) <= std::max(col_stmt, col_label))
      throw RuntimeFailure("statements file: short row " + std::to_string(row));
    std::string lab = detail::lower(fields[col_label]);
    bool value;
    if (lab == "1" || lab == "true")
      value = true;
    else if (lab == "0" || lab == "false")
      value = false;
    else
      throw RuntimeFailure("statements file: unparsable label at row " +
                           std::to_string(row));
    LabeledStatement s;
    s.text = fields[col_stmt];
    s.label = value;
    if (col_topic >= 0 && col_topic < static_cast<int>(fields.size()))
      s.topic = fields[col_topic];
    out.push_back(std::move(s));
  }
  return out;
}

inline void save_statements_csv(const std::vector<LabeledStatement>& stmts,
                                const std::string& path) {
  std::ofstream f(path);
  if (!f) throw RuntimeFailure("cannot write statements file: " + path);
  f << "statement,label,topic\n";
  for (const auto& s : stmts)
    f << detail::csv_escape(s.text) << "," << (s.label ? 1 : 0) << ","
      << detail::csv_escape(s.topic) << "\n";
}

namespace detail {

struct FactFamily {
  std::string topic;
  std::vector<std::string> entities;
  std::vector<std::string> attributes;  // attributes[i] is true for entities[i]
  std::vector<std::string> patterns;    // with {E} and {A} slots
};

inline std::vector<FactFamily> fact_families() {
  return {
      {"capital_city",
       {"France", "Italy", "Spain", "Poland", "Norway", "Japan", "Brazil",
        "Chile", "Kenya", "Egypt", "Canada", "Peru", "Greece", "Austria",
        "Portugal", "Ireland", "Cuba", "Jordan", "Nepal", "Mongolia"},
       {"Paris", "Rome", "Madrid", "Warsaw", "Oslo", "Tokyo", "Brasilia",
        "Santiago", "Nairobi", "Cairo", "Ottawa", "Lima", "Athens", "Vienna",
        "Lisbon", "Dublin", "Havana", "Amman", "Kathmandu", "Ulaanbaatar"},
       {"The capital of {E} is {A} .", "{A} is the capital of {E} .",
        "The capital city of {E} is {A} .", "In {E} the capital is {A} .",
        "{E} has {A} as its capital .", "{A} serves as the capital of {E} .",
        "The city of {A} is the capital of {E} .",
        "As for {E} , the capital is {A} .",
        "{E} is governed from {A} .", "People of {E} call {A} the capital .",
        "Maps of {E} mark {A} as the capital .",
        "When in {E} , the capital to visit is {A} ."}},
      {"element_symbol",
       {"gold", "silver", "iron", "copper", "oxygen", "hydrogen", "carbon",
        "helium", "sodium", "zinc", "tin", "lead", "neon", "sulfur",
        "calcium", "argon", "nickel", "boron", "lithium", "krypton"},
       {"Au", "Ag", "Fe", "Cu", "O", "H", "C", "He", "Na", "Zn", "Sn", "Pb",
        "Ne", "S", "Ca", "Ar", "Ni", "B", "Li", "Kr"},
       {"The symbol of {E} is {A} .", "The element {E} has the symbol {A} .",
        "The chemical symbol of {E} is {A} .", "{A} is the symbol of {E} .",
        "{E} is written as {A} .", "{A} stands for {E} .",
        "On the periodic table {E} appears as {A} .",
        "The notation for {E} is {A} .",
        "Chemists write {E} as {A} .", "{A} denotes the element {E} .",
        "In formulas {E} shows up as {A} .",
        "The shorthand for {E} is {A} ."}},
      // classes are interleaved so any n_entities prefix spans at least two
      // distinct attributes (needed to build mismatched false statements)
      {"animal_class",
       {"dog", "eagle", "frog", "shark", "bee", "cat", "sparrow", "toad",
        "salmon", "ant", "cow", "owl", "newt", "trout", "beetle", "wolf",
        "penguin", "salamander", "cod", "moth"},
       {"mammal", "bird", "amphibian", "fish", "insect", "mammal", "bird",
        "amphibian", "fish", "insect", "mammal", "bird", "amphibian", "fish",
        "insect", "mammal", "bird", "amphibian", "fish", "insect"},
       {"The {E} is a {A} .", "Every {E} is a {A} .",
        "A {E} is a kind of {A} .", "The {E} belongs to the {A} group .",
        "The {E} is classified as a {A} .", "{A} is the class of the {E} .",
        "Biologists class the {E} as a {A} .",
        "The {E} counts as a {A} .",
        "Among animals the {E} ranks as a {A} .",
        "Field guides list the {E} as a {A} .",
        "By taxonomy the {E} is a {A} .",
        "You would file the {E} under {A} ."}},
  };
}

inline std::string fill(const std::string& pattern, const std::string& e,
                        const std::string& a) {
  std::string out = pattern;
  auto rep = [&](const std::string& slot, const std::string& val) {
    auto p = out.find(slot);
    if (p != std::string::npos) out.replace(p, slot.size(), val);
  };
  rep("{E}", e);
  rep("{A}", a);
  return out;
}

}  // namespace detail

// Balanced true/false statements over three topic families (capital-city,
// element-symbol, animal-class) built from a closed synthetic vocabulary.
// False statements are mismatched (entity, attribute) pairings.
inline std::vector<LabeledStatement> gen_synthetic_facts(uint64_t seed,
                                                         int n_entities = 20) {
  if (n_entities < 4)
    throw ContractError("gen_synthetic_facts: n_entities must be >= 4");
  std::mt19937_64 rng(seed);
  std::vector<LabeledStatement> out;
  for (const auto& fam : detail::fact_families()) {
    int m = std::min<int>(n_entities, static_cast<int>(fam.entities.size()));
    bool two_classes = false;
    for (int i = 1; i < m && !two_classes; ++i)
      two_classes = fam.attributes[i] != fam.attributes[0];
    if (!two_classes)
      throw ContractError(
          "gen_synthetic_facts: family '" + fam.topic +
          "' has a single attribute among the first " + std::to_string(m) +
          " entities; no false statement exists");
    for (int i = 0; i < m; ++i) {
      for (const auto& pat : fam.patterns) {
        out.push_back({detail::fill(pat, fam.entities[i], fam.attributes[i]),
                       true, fam.topic});
        // pick a wrong attribute for the mismatched (false) statement
        std::uniform_int_distribution<int> pick(0, m - 1);
        int j = i;
        while (fam.attributes[j] == fam.attributes[i]) j = pick(rng);
        out.push_back({detail::fill(pat, fam.entities[i], fam.attributes[j]),
                       false, fam.topic});
      }
    }
  }
  return out;
}

struct RetainPrompt {
  std::string instruction;
};

// Instruction-like prompts (rewrite/count/copy tasks) over the toy
// vocabulary; structurally disjoint from the fact statements.
inline std::vector<RetainPrompt> gen_retain_corpus(uint64_t seed, int n) {
  if (n < 1) throw ContractError("gen_retain_corpus: n must be >= 1");
  std::vector<std::string> verbs = {"Repeat", "Copy", "Write", "Say", "Spell"};
  std::vector<std::string> words = {"river",  "stone",  "cloud", "window",
                                    "garden", "bridge", "candle", "forest",
                                    "mirror", "basket", "ladder", "bottle"};
  std::vector<std::string> counts = {"two", "three", "four", "five"};
  std::vector<std::string> others = {
      "Count from one to five .", "Count from one to ten .",
      "List the days of the week .", "Name the four seasons .",
      "Sort these words by length .", "Reverse the order of these words ."};
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> pv(0, static_cast<int>(verbs.size()) - 1);
  std::uniform_int_distribution<int> pw(0, static_cast<int>(words.size()) - 1);
  std::uniform_int_distribution<int> pc(0, static_cast<int>(counts.size()) - 1);
  std::uniform_int_distribution<int> po(0, static_cast<int>(others.size()) - 1);
  std::uniform_int_distribution<int> kind(0, 2);
  std::vector<RetainPrompt> out;
  out.reserve(n);
  for (int i = 0; i < n; ++i) {
    switch (kind(rng)) {
      case 0:
        out.push_back({verbs[pv(rng)] + " the word " + words[pw(rng)] + " " +
                       counts[pc(rng)] + " times ."});
        break;
      case 1:
        out.push_back({"Write the word " + words[pw(rng)] + " next to the word " +
                       words[pw(rng)] + " ."});
        break;
      default:
        out.push_back({others[po(rng)]});
    }
  }
  return out;
}

inline std::vector<RetainPrompt> load_retain_prompts(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw RuntimeFailure("cannot open retain prompts file: " + path);
  std::vector<RetainPrompt> out;
  std::string line;
  while (std::getline(f, line))
    if (!line.empty()) out.push_back({line});
  if (out.empty()) throw RuntimeFailure("retain prompts file is empty: " + path);
  return out;
}

struct Split {
  std::vector<LabeledStatement> train;
  std::vector<LabeledStatement> test;
};

// Label-stratified, disjoint, exhaustive, seeded.
inline Split split_dataset(const std::vector<LabeledStatement>& data,
                           double train_fraction, double test_fraction,
                           uint64_t seed) {
  if (std::abs(train_fraction + test_fraction - 1.0) > 1e-9)
    throw ContractError("split: fractions must sum to 1");
  Split out;
  std::mt19937_64 rng(seed);
  for (bool label : {true, false}) {
    std::vector<int> idx;
    for (size_t i = 0; i < data.size(); ++i)
      if (data[i].label == label) idx.push_back(static_cast<int>(i));
    std::shuffle(idx.begin(), idx.end(), rng);
    size_t n_train = static_cast<size_t>(
        std::llround(train_fraction * static_cast<double>(idx.size())));
    for (size_t i = 0; i < idx.size(); ++i)
      (i < n_train ? out.train : out.test).push_back(data[idx[i]]);
  }
  return out;
}

}  // namespace conecraft
