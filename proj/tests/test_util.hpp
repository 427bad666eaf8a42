#pragma once

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <random>
#include <string>

#include "halomil/bagstore.hpp"

namespace halomil::test {

/// Per-test scratch directory, created empty.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const char* root = std::getenv("HALOMIL_TEST_TMP");
  std::filesystem::path dir =
      std::filesystem::path(root ? root : std::filesystem::temp_directory_path().string()) /
      ("halomil_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline Matrix random_tokens(std::size_t T, std::size_t d, std::mt19937_64& rng,
                            double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Matrix m(static_cast<Eigen::Index>(T), static_cast<Eigen::Index>(d));
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

/// Tokens rounded to float32 so that HSB round trips are exact.
inline Matrix float_tokens(std::size_t T, std::size_t d, std::mt19937_64& rng) {
  Matrix m = random_tokens(T, d, rng);
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    m.data()[i] = static_cast<double>(static_cast<float>(m.data()[i]));
  }
  return m;
}

inline Bag make_bag(std::uint64_t id, Matrix tokens, Label label = Label::Unknown,
                    Split split = Split::Train, std::optional<double> p_sem = std::nullopt) {
  Bag b;
  b.id = id;
  b.tokens = std::move(tokens);
  b.label = label;
  b.split = split;
  b.p_sem = p_sem;
  return b;
}

inline Matrix rows(std::initializer_list<std::initializer_list<double>> r) {
  Matrix m(static_cast<Eigen::Index>(r.size()), static_cast<Eigen::Index>(r.begin()->size()));
  Eigen::Index i = 0;
  for (const auto& row : r) {
    Eigen::Index j = 0;
    for (double v : row) m(i, j++) = v;
    ++i;
  }
  return m;
}

}  // namespace halomil::test
