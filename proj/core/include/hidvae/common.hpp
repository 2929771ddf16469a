#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace hidvae {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

// Deterministic generator built on SplitMix64. std:: distributions are
// implementation-defined, so all sampling goes through this to keep
// byte-identical runs across toolchains.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // [0, 1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // [0, n)
  int uniform_int(int n) {
    if (n <= 0) throw std::invalid_argument("uniform_int: n must be positive");
    return static_cast<int>(next_u64() % static_cast<std::uint64_t>(n));
  }

  // Box-Muller without a cached spare: two uniforms per draw, fully ordered.
  double normal();

  // Marsaglia-Tsang; used for Dirichlet sampling.
  double gamma(double alpha);

  // Derives an independent stream; the parent state is untouched.
  Rng fork(std::uint64_t stream) const {
    Rng child(state_ ^ (0x9e3779b97f4a7c15ULL * (stream + 1)));
    child.next_u64();
    return child;
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (int i = static_cast<int>(v.size()) - 1; i > 0; --i) {
      std::swap(v[static_cast<size_t>(i)], v[static_cast<size_t>(uniform_int(i + 1))]);
    }
  }

 private:
  std::uint64_t state_;
};

std::uint64_t fnv1a64(const std::string& s);
std::string hex64(std::uint64_t v);

// Shortest text that parses back to the same double.
std::string format_double(double v);

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& content);

}  // namespace hidvae
