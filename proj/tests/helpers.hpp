#pragma once

#include "stm/common.hpp"
#include "stm/tensor_store.hpp"

#include <cstdlib>
#include <filesystem>
#include <string>
#include <vector>

namespace stm::test {

// Fresh scratch directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("stm_test_" + tag + "_" + std::to_string(::getpid()) + "_" +
             std::to_string(counter++));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path file(const std::string& name) const {
    return path_ / name;
  }

 private:
  std::filesystem::path path_;
};

inline Checkpoint make_ckpt(
    const std::vector<std::pair<std::string, std::vector<float>>>& vectors) {
  Checkpoint c;
  for (const auto& [name, vals] : vectors) {
    Eigen::VectorXf v(static_cast<Index>(vals.size()));
    for (std::size_t i = 0; i < vals.size(); ++i) {
      v[static_cast<Index>(i)] = vals[i];
    }
    c.insert(name, Tensor::from_vector(v));
  }
  return c;
}

inline Checkpoint random_ckpt(Rng& rng,
                              const std::vector<std::pair<std::string, std::vector<Index>>>& specs,
                              double scale = 1.0) {
  Checkpoint c;
  for (const auto& [name, shape] : specs) {
    Index n = 1;
    for (Index d : shape) n *= d;
    Eigen::VectorXf v(n);
    for (Index i = 0; i < n; ++i) {
      v[i] = static_cast<float>(rng.normal(0.0, scale));
    }
    c.insert(name, Tensor(shape, std::move(v)));
  }
  return c;
}

inline std::filesystem::path source_dir() {
  return std::filesystem::path(STM_SOURCE_DIR);
}

}  // namespace stm::test
