#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "motok/rng.hpp"
#include "motok/tensor.hpp"

namespace motok::text {

// Per-word text features, [s, dim] with s >= 1.
struct TextEmbedding {
  Tensor tokens;

  std::size_t length() const { return tokens.rows(); }
};

// Anything that maps a prompt to TextEmbedding rows of a fixed width.
class TextEmbedder {
 public:
  virtual ~TextEmbedder() = default;
  virtual std::size_t dim() const = 0;
  // Throws std::invalid_argument on a prompt without words.
  virtual TextEmbedding embed(std::string_view prompt) const = 0;
};

// Lowercased alphanumeric words.
std::vector<std::string> words(std::string_view prompt);

// Each word hashes to a row of a seeded random table; position i holds the
// sum of the rows of words i-1 and i.
class HashedBagOfWords final : public TextEmbedder {
 public:
  HashedBagOfWords(std::size_t dim, std::size_t buckets, std::uint64_t seed);

  std::size_t dim() const override { return table_.cols(); }
  std::size_t buckets() const { return table_.rows(); }
  std::size_t bucket(std::string_view word) const;
  TextEmbedding embed(std::string_view prompt) const override;
  // Mean over positions, [1, dim].
  Tensor pooled(std::string_view prompt) const;

 private:
  Tensor table_;
};

}  // namespace motok::text
