#ifndef MILKIT_TESTS_SUPPORT_HPP_
#define MILKIT_TESTS_SUPPORT_HPP_

#include <gtest/gtest.h>
#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "gradcheck.hpp"
#include "milkit/autograd.hpp"
#include "milkit/error.hpp"
#include "milkit/rng.hpp"

#define EXPECT_MIL_ERROR(stmt, expected_code)                                  \
  do {                                                                         \
    try {                                                                      \
      stmt;                                                                    \
      ADD_FAILURE() << "expected " << ::milkit::error_code_name(expected_code) \
                    << " from " #stmt;                                         \
    } catch (const ::milkit::MilError& e) {                                    \
      EXPECT_EQ(e.code(), expected_code) << e.what();                          \
    }                                                                          \
  } while (0)

namespace milkit::testing {

using ag::Matrix;

inline Matrix random_matrix(int rows, int cols, Rng& rng, double scale = 1.0) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
  return m;
}

inline std::filesystem::path temp_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() /
                   ("milkit_test_" + name + "_" + std::to_string(::getpid()));
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace milkit::testing

#endif  // MILKIT_TESTS_SUPPORT_HPP_
