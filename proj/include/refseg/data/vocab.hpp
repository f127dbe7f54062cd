#pragma once
// Fixed vocabulary for the templated referring expressions: three special
// tokens, one article, six colors, three shape kinds, and the relation words.
// Ids are stable across runs by construction (a hard-coded table).

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace refseg::data {

class Vocabulary {
 public:
  static constexpr std::int32_t pad = 0;
  static constexpr std::int32_t sos = 1;
  static constexpr std::int32_t eos = 2;

  Vocabulary();

  std::int32_t id(std::string_view word) const;  // throws on unknown word
  const std::string& word(std::int32_t id) const;  // throws on special / bad id
  std::size_t size() const { return words_.size(); }

  // [SOS] + word ids + [EOS] + PAD... to exactly max_len entries.
  // Throws on unknown words and when the sentence does not fit.
  std::vector<std::int32_t> tokenize(std::string_view sentence,
                                     std::size_t max_len) const;

  // Inverse over tokenized output: drops SOS/EOS/PAD, joins words with
  // single spaces.  Throws on malformed input (no SOS/EOS frame, bad id).
  std::string detokenize(std::span<const std::int32_t> tokens) const;

 private:
  std::vector<std::string> words_;  // index == id; specials hold placeholders
};

}  // namespace refseg::data
