#pragma once

// Whitespace word-level tokenizer over a closed synthetic corpus. Guarantees
// "Yes" and "No" map to single ids; unknown words fall into a reserved UNK.

#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "conecraft/common.hpp"

namespace conecraft {

struct TokenSequence {
  std::vector<int> ids;
  std::string text;
  int size() const { return static_cast<int>(ids.size()); }
};

class Tokenizer {
 public:
  static constexpr const char* kPad = "<pad>";
  static constexpr const char* kBos = "<bos>";
  static constexpr const char* kUnk = "<unk>";

  // Builds the vocabulary from whitespace-split words of the given texts,
  // in first-seen order after the specials.
  static Tokenizer build(const std::vector<std::string>& texts) {
    Tokenizer tk;
    tk.add_word(kPad);
    tk.add_word(kBos);
    tk.add_word(kUnk);
    tk.add_word("Yes");
    tk.add_word("No");
    for (const auto& t : texts)
      for (const auto& w : split(t)) tk.add_word(w);
    return tk;
  }

  int vocab_size() const { return static_cast<int>(words_.size()); }
  int pad_id() const { return 0; }
  int bos_id() const { return 1; }
  int unk_id() const { return 2; }
  int yes_id() const { return 3; }
  int no_id() const { return 4; }

  int id_of(const std::string& w) const {
    auto it = index_.find(w);
    return it == index_.end() ? unk_id() : it->second;
  }
  const std::string& word(int id) const { return words_.at(id); }

  TokenSequence encode(const std::string& text, bool add_bos = false) const {
    TokenSequence s;
    s.text = text;
    if (add_bos) s.ids.push_back(bos_id());
    for (const auto& w : split(text)) s.ids.push_back(id_of(w));
    return s;
  }

  std::string decode(const std::vector<int>& ids) const {
    std::string out;
    for (int id : ids) {
      if (id == bos_id() || id == pad_id()) continue;
      if (!out.empty()) out += ' ';
      out += words_.at(id);
    }
    return out;
  }

  const std::vector<std::string>& words() const { return words_; }

  static std::vector<std::string> split(const std::string& text) {
    std::vector<std::string> out;
    std::istringstream is(text);
    std::string w;
    while (is >> w) out.push_back(w);
    return out;
  }

 private:
  void add_word(const std::string& w) {
    if (index_.count(w)) return;
    index_[w] = static_cast<int>(words_.size());
    words_.push_back(w);
  }

  std::vector<std::string> words_;
  std::map<std::string, int> index_;
};

}  // namespace conecraft
