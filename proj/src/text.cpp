#include "motok/text.hpp"

#include <cctype>
#include <cmath>
#include <stdexcept>

namespace motok::text {

std::vector<std::string> words(std::string_view prompt) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : prompt) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isalnum(c)) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

HashedBagOfWords::HashedBagOfWords(std::size_t dim, std::size_t buckets, std::uint64_t seed)
    : table_({buckets, dim}) {
  if (dim == 0 || buckets == 0) throw std::invalid_argument("text embedder needs positive dim and buckets");
  Rng rng = Rng(seed).split("text-table");
  const double scale = 1.0 / std::sqrt(static_cast<double>(dim));
  for (auto& v : table_.vec()) v = scale * rng.normal();
}

std::size_t HashedBagOfWords::bucket(std::string_view word) const {
  return static_cast<std::size_t>(fnv1a64(word) % table_.rows());
}

TextEmbedding HashedBagOfWords::embed(std::string_view prompt) const {
  const auto ws = words(prompt);
  if (ws.empty()) throw std::invalid_argument("prompt has no words");
  const std::size_t d = dim();
  TextEmbedding e{Tensor({ws.size(), d})};
  for (std::size_t i = 0; i < ws.size(); ++i)
    for (std::size_t w = (i == 0 ? 0 : i - 1); w <= i; ++w) {
      const std::size_t b = bucket(ws[w]);
      for (std::size_t k = 0; k < d; ++k) e.tokens[i * d + k] += table_[b * d + k];
    }
  return e;
}

Tensor HashedBagOfWords::pooled(std::string_view prompt) const {
  const TextEmbedding e = embed(prompt);
  const std::size_t d = dim();
  Tensor p({1, d});
  for (std::size_t i = 0; i < e.length(); ++i)
    for (std::size_t k = 0; k < d; ++k) p[k] += e.tokens[i * d + k];
  for (auto& v : p.vec()) v /= static_cast<double>(e.length());
  return p;
}

}  // namespace motok::text
