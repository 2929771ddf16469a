#include "hidvae/embedder.hpp"

#include <cctype>

namespace hidvae {

Vec HashedBowEmbedder::embed(const std::string& text) const {
  Vec v = Vec::Zero(dim_);
  std::string token;
  auto flush = [&]() {
    if (token.empty()) return;
    const std::uint64_t h = fnv1a64(token);
    const int bucket = static_cast<int>(h % static_cast<std::uint64_t>(dim_));
    const double sign = (h >> 63) ? -1.0 : 1.0;
    v(bucket) += sign;
    token.clear();
  };
  for (char c : text) {
    if (std::isalnum(static_cast<unsigned char>(c))) {
      token.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    } else {
      flush();
    }
  }
  flush();
  const double n = v.norm();
  if (n > 0.0) v /= n;
  return v;
}

std::unique_ptr<EmbedderInterface> make_embedder(const std::string& name, int dim) {
  if (name == "hashed-bow" || name.empty()) {
    return std::make_unique<HashedBowEmbedder>(dim);
  }
  throw std::invalid_argument("unknown embedder: " + name);
}

}  // namespace hidvae
