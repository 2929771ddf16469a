#pragma once

#include <memory>
#include <string>

#include "hidvae/common.hpp"

namespace hidvae {

// Sentence embedder contract: fixed output dimension, deterministic for a
// fixed input string.
class EmbedderInterface {
 public:
  virtual ~EmbedderInterface() = default;
  virtual Vec embed(const std::string& text) const = 0;
  virtual int dim() const = 0;
  virtual std::string name() const = 0;
};

// Feature-hashing bag-of-words embedder: lowercased alphanumeric tokens are
// hashed into `dim` signed buckets and the result is L2-normalized. Purely
// offline stand-in for a neural sentence encoder.
class HashedBowEmbedder : public EmbedderInterface {
 public:
  explicit HashedBowEmbedder(int dim) : dim_(dim) {
    if (dim < 1) throw std::invalid_argument("HashedBowEmbedder: dim must be positive");
  }

  Vec embed(const std::string& text) const override;
  int dim() const override { return dim_; }
  std::string name() const override { return "hashed-bow"; }

 private:
  int dim_;
};

std::unique_ptr<EmbedderInterface> make_embedder(const std::string& name, int dim);

}  // namespace hidvae
