#include "faki/random.hpp"

#include <vector>

namespace faki {

Rng Rng::derive(std::uint64_t seed, std::initializer_list<std::uint64_t> tags) {
  std::vector<std::uint32_t> words;
  words.push_back(static_cast<std::uint32_t>(seed));
  words.push_back(static_cast<std::uint32_t>(seed >> 32));
  for (auto tag : tags) {
    words.push_back(static_cast<std::uint32_t>(tag));
    words.push_back(static_cast<std::uint32_t>(tag >> 32));
  }
  std::seed_seq seq(words.begin(), words.end());
  std::uint64_t out[2];
  std::uint32_t raw[4];
  seq.generate(raw, raw + 4);
  out[0] = (static_cast<std::uint64_t>(raw[0]) << 32) | raw[1];
  out[1] = (static_cast<std::uint64_t>(raw[2]) << 32) | raw[3];
  return Rng(out[0] ^ (out[1] * 0x9E3779B97F4A7C15ULL));
}

Eigen::VectorXd Rng::normal_vector(Eigen::Index n) {
  Eigen::VectorXd v(n);
  for (Eigen::Index i = 0; i < n; ++i) v(i) = normal();
  return v;
}

Eigen::MatrixXd Rng::normal_matrix(Eigen::Index rows, Eigen::Index cols) {
  // Row-major draw order so that row j depends only on draws for rows < j.
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = normal();
  return m;
}

}  // namespace faki
