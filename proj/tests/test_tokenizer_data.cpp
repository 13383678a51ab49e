#include <catch2/catch_amalgamated.hpp>
#include <cstdio>
#include <fstream>
#include <set>

#include "conecraft/data.hpp"
#include "conecraft/tokenizer.hpp"

using namespace conecraft;

namespace {

std::string temp_file(const std::string& name) {
  return std::string("/tmp/conecraft_test_") + name;
}

}  // namespace

TEST_CASE("tokenizer reserves special ids and round-trips text") {
  Tokenizer tk = Tokenizer::build({"The capital of France is Paris ."});
  CHECK(tk.pad_id() == 0);
  CHECK(tk.bos_id() == 1);
  CHECK(tk.unk_id() == 2);
  CHECK(tk.yes_id() == 3);
  CHECK(tk.no_id() == 4);
  CHECK(tk.id_of("Yes") == 3);
  CHECK(tk.id_of("No") == 4);
  // 5 specials + 7 corpus words
  CHECK(tk.vocab_size() == 12);

  std::string text = "The capital of France is Paris .";
  TokenSequence s = tk.encode(text, /*add_bos=*/true);
  REQUIRE(s.size() == 8);
  CHECK(s.ids[0] == tk.bos_id());
  CHECK(tk.decode(s.ids) == text);
}

TEST_CASE("tokenizer hand-computed ids for a tiny corpus") {
  // words enter the vocab in first-seen order after the 5 specials
  Tokenizer tk = Tokenizer::build({"a b a c"});
  CHECK(tk.id_of("a") == 5);
  CHECK(tk.id_of("b") == 6);
  CHECK(tk.id_of("c") == 7);
  TokenSequence s = tk.encode("c b zzz", false);
  REQUIRE(s.ids == std::vector<int>{7, 6, tk.unk_id()});
}

TEST_CASE("tokenizer maps unknown words to unk") {
  Tokenizer tk = Tokenizer::build({"alpha beta"});
  CHECK(tk.id_of("gamma") == tk.unk_id());
  CHECK(tk.encode("gamma alpha", false).ids[0] == tk.unk_id());
}

TEST_CASE("prompt templates are retrievable and fixed") {
  CHECK(prompt_template(1).system_text ==
        "Respond to the following statement with a \"Yes\" or a \"No.\"");
  CHECK(prompt_template(2).system_text ==
        "Respond to the following statements with either \"Yes\" or \"No\" "
        "based on their factual accuracy.");
  CHECK(prompt_template(3).system_text ==
        "Answer with exactly one word - \"Yes\" if the statement is true, "
        "otherwise \"No\".");
  CHECK(prompt_template(4).system_text ==
        "Based on your best estimate of the following statement, respond "
        "\"Yes\" or \"No.\"");
  CHECK_THROWS_AS(prompt_template(0), ContractError);
  CHECK_THROWS_AS(prompt_template(5), ContractError);
}

TEST_CASE("format_prompt joins system text, statement, and answer cue") {
  LabeledStatement s{"The sky is blue .", true, "misc"};
  std::string p = format_prompt(s, prompt_template(2));
  CHECK(p ==
        "Respond to the following statements with either \"Yes\" or \"No\" "
        "based on their factual accuracy.\nThe sky is blue .\nAnswer:");
  // cue makes the last whitespace token identical across statements
  auto toks = Tokenizer::split(p);
  CHECK(toks.back() == "Answer:");
}

TEST_CASE("statement csv loads labels, topics, and quoted fields") {
  std::string path = temp_file("stmts.csv");
  {
    std::ofstream f(path);
    f << "statement,label,topic\n";
    f << "The capital of France is Paris .,1,capital_city\n";
    f << "The capital of France is Rome .,0,capital_city\n";
    f << "\"A statement, with a comma\",TRUE,misc\n";
    f << "Another one,False,\n";
  }
  auto stmts = load_statements_csv(path);
  REQUIRE(stmts.size() == 4);
  CHECK(stmts[0].text == "The capital of France is Paris .");
  CHECK(stmts[0].label == true);
  CHECK(stmts[0].topic == "capital_city");
  CHECK(stmts[1].label == false);
  CHECK(stmts[2].text == "A statement, with a comma");
  CHECK(stmts[2].label == true);
  CHECK(stmts[3].label == false);
  std::remove(path.c_str());
}

TEST_CASE("statement csv rejects bad labels and missing columns") {
  std::string path = temp_file("bad.csv");
  {
    std::ofstream f(path);
    f << "statement,label\nhello,maybe\n";
  }
  CHECK_THROWS_AS(load_statements_csv(path), RuntimeFailure);
  {
    std::ofstream f(path);
    f << "text,value\nhello,1\n";
  }
  CHECK_THROWS_AS(load_statements_csv(path), RuntimeFailure);
  CHECK_THROWS_AS(load_statements_csv("/nonexistent/zzz.csv"), RuntimeFailure);
  std::remove(path.c_str());
}

TEST_CASE("statement csv round-trips through save and load") {
  auto facts = gen_synthetic_facts(7);
  std::string path = temp_file("roundtrip.csv");
  save_statements_csv(facts, path);
  auto loaded = load_statements_csv(path);
  REQUIRE(loaded.size() == facts.size());
  for (size_t i = 0; i < facts.size(); ++i) {
    CHECK(loaded[i].text == facts[i].text);
    CHECK(loaded[i].label == facts[i].label);
    CHECK(loaded[i].topic == facts[i].topic);
  }
  std::remove(path.c_str());
}

TEST_CASE("synthetic facts are balanced, unique-per-label, and seeded") {
  auto facts = gen_synthetic_facts(11);
  // 3 families x 20 entities x 12 patterns x {true,false}
  REQUIRE(facts.size() == 1440);
  int n_true = 0;
  for (const auto& s : facts) n_true += s.label ? 1 : 0;
  CHECK(n_true * 2 == static_cast<int>(facts.size()));

  // no statement appears with both labels
  std::set<std::string> trues, falses;
  for (const auto& s : facts) (s.label ? trues : falses).insert(s.text);
  for (const auto& t : trues) CHECK(falses.count(t) == 0);

  // determinism in the seed
  auto again = gen_synthetic_facts(11);
  REQUIRE(again.size() == facts.size());
  for (size_t i = 0; i < facts.size(); ++i) CHECK(again[i].text == facts[i].text);

  // different seeds change the mismatched (false) pairings
  auto other = gen_synthetic_facts(12);
  bool any_diff = false;
  for (size_t i = 0; i < facts.size(); ++i)
    if (other[i].text != facts[i].text) any_diff = true;
  CHECK(any_diff);
}

TEST_CASE("synthetic facts use the declared topics and truthful pairings") {
  auto facts = gen_synthetic_facts(3);
  std::set<std::string> topics;
  for (const auto& s : facts) topics.insert(s.topic);
  CHECK(topics == std::set<std::string>{"capital_city", "element_symbol",
                                        "animal_class"});
  bool saw_paris = false;
  for (const auto& s : facts)
    if (s.text == "The capital of France is Paris .") {
      saw_paris = true;
      CHECK(s.label == true);
    }
  CHECK(saw_paris);
  CHECK_THROWS_AS(gen_synthetic_facts(3, 2), ContractError);
}

TEST_CASE("retain corpus is seeded and disjoint from fact statements") {
  auto retain = gen_retain_corpus(5, 40);
  REQUIRE(retain.size() == 40);
  auto again = gen_retain_corpus(5, 40);
  for (size_t i = 0; i < retain.size(); ++i)
    CHECK(again[i].instruction == retain[i].instruction);

  auto facts = gen_synthetic_facts(5);
  std::set<std::string> fact_texts;
  for (const auto& s : facts) fact_texts.insert(s.text);
  for (const auto& r : retain) CHECK(fact_texts.count(r.instruction) == 0);
  CHECK_THROWS_AS(gen_retain_corpus(5, 0), ContractError);
}

TEST_CASE("retain prompts load from a plain text file") {
  std::string path = temp_file("retain.txt");
  {
    std::ofstream f(path);
    f << "Count from one to five .\n\nRepeat the word river two times .\n";
  }
  auto prompts = load_retain_prompts(path);
  REQUIRE(prompts.size() == 2);
  CHECK(prompts[0].instruction == "Count from one to five .");
  std::remove(path.c_str());
}

TEST_CASE("split is stratified, disjoint, exhaustive, and seeded") {
  auto facts = gen_synthetic_facts(21);
  Split sp = split_dataset(facts, 0.8, 0.2, 99);
  CHECK(sp.train.size() + sp.test.size() == facts.size());
  auto count_true = [](const std::vector<LabeledStatement>& v) {
    int n = 0;
    for (const auto& s : v) n += s.label ? 1 : 0;
    return n;
  };
  // exact stratification: each label pool is split by the same fraction
  CHECK(count_true(sp.train) * 2 == static_cast<int>(sp.train.size()));
  CHECK(count_true(sp.test) * 2 == static_cast<int>(sp.test.size()));
  CHECK(sp.test.size() == facts.size() / 5);

  // disjointness by text
  std::set<std::string> train_texts;
  for (const auto& s : sp.train) train_texts.insert(s.text + (s.label ? "#t" : "#f"));
  for (const auto& s : sp.test)
    CHECK(train_texts.count(s.text + (s.label ? "#t" : "#f")) == 0);

  // determinism
  Split sp2 = split_dataset(facts, 0.8, 0.2, 99);
  REQUIRE(sp2.train.size() == sp.train.size());
  for (size_t i = 0; i < sp.train.size(); ++i)
    CHECK(sp2.train[i].text == sp.train[i].text);

  CHECK_THROWS_AS(split_dataset(facts, 0.8, 0.1, 7), ContractError);
}
