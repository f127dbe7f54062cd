#include "refseg/data/vocab.hpp"

#include <sstream>
#include <stdexcept>

namespace refseg::data {

Vocabulary::Vocabulary() {
  words_ = {"<pad>", "<sos>", "<eos>",
            "the",
            "red", "green", "blue", "yellow", "purple", "orange",
            "circle", "square", "triangle",
            "left", "right", "above", "below", "of"};
}

std::int32_t Vocabulary::id(std::string_view word) const {
  for (std::size_t i = 3; i < words_.size(); ++i)
    if (words_[i] == word) return std::int32_t(i);
  throw std::invalid_argument("Vocabulary: unknown word '" + std::string(word) +
                              "'");
}

const std::string& Vocabulary::word(std::int32_t id) const {
  if (id < 3 || std::size_t(id) >= words_.size())
    throw std::invalid_argument("Vocabulary: no word with id " +
                                std::to_string(id));
  return words_[std::size_t(id)];
}

std::vector<std::int32_t> Vocabulary::tokenize(std::string_view sentence,
                                               std::size_t max_len) const {
  std::vector<std::int32_t> out;
  out.push_back(sos);
  std::istringstream in{std::string(sentence)};
  std::string w;
  while (in >> w) out.push_back(id(w));
  out.push_back(eos);
  if (out.size() > max_len)
    throw std::invalid_argument("Vocabulary: expression needs " +
                                std::to_string(out.size()) +
                                " tokens but max length is " +
                                std::to_string(max_len));
  out.resize(max_len, pad);
  return out;
}

std::string Vocabulary::detokenize(std::span<const std::int32_t> tokens) const {
  if (tokens.empty() || tokens.front() != sos)
    throw std::invalid_argument("Vocabulary: token sequence must start with SOS");
  std::string out;
  std::size_t i = 1;
  for (; i < tokens.size() && tokens[i] != eos; ++i) {
    if (!out.empty()) out += ' ';
    out += word(tokens[i]);
  }
  if (i == tokens.size())
    throw std::invalid_argument("Vocabulary: token sequence has no EOS");
  for (++i; i < tokens.size(); ++i)
    if (tokens[i] != pad)
      throw std::invalid_argument("Vocabulary: non-PAD token after EOS");
  return out;
}

}  // namespace refseg::data
