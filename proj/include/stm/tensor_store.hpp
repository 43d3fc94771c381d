#pragma once

#include <Eigen/Core>

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace stm {

using Index = Eigen::Index;
using RowMatrixXf =
    Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMatrixXd =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Dense named tensor: rank 1 (vector) or rank 2 (matrix), row-major f32
// storage. Arithmetic that feeds back into a Tensor accumulates in f64 and
// rounds once at write-back.
class Tensor {
 public:
  Tensor() = default;
  Tensor(std::vector<Index> shape, Eigen::VectorXf data);

  static Tensor from_vector(Eigen::VectorXf v);
  static Tensor from_matrix(const Eigen::Ref<const RowMatrixXf>& m);
  static Tensor zeros(const std::vector<Index>& shape);

  int rank() const { return static_cast<int>(shape_.size()); }
  const std::vector<Index>& shape() const { return shape_; }
  Index size() const { return data_.size(); }
  Index rows() const;
  Index cols() const;

  const Eigen::VectorXf& flat() const { return data_; }
  Eigen::VectorXf& flat() { return data_; }

  // Rank-2 view over the flat storage.
  Eigen::Map<const RowMatrixXf> matrix() const;

  // f64 working copies for numeric kernels.
  Eigen::VectorXd flat64() const { return data_.cast<double>(); }
  RowMatrixXd matrix64() const;

  bool same_shape(const Tensor& other) const;
  bool bit_equal(const Tensor& other) const;
  bool all_finite() const;

 private:
  std::vector<Index> shape_;
  Eigen::VectorXf data_;
};

// Ordered collection of uniquely named tensors plus advisory string metadata.
// Iteration is lexicographic by name, so serializing the same checkpoint twice
// yields identical bytes. Immutable by convention once fully constructed.
class Checkpoint {
 public:
  using EntryMap = std::map<std::string, Tensor>;
  using MetaMap = std::map<std::string, std::string>;

  void insert(const std::string& name, Tensor t);
  bool contains(const std::string& name) const;
  const Tensor& at(const std::string& name) const;

  EntryMap::const_iterator begin() const { return entries_.begin(); }
  EntryMap::const_iterator end() const { return entries_.end(); }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }

  MetaMap& meta() { return meta_; }
  const MetaMap& meta() const { return meta_; }

  // Entry-wise bitwise equality; metadata is advisory and not compared.
  bool bit_equal(const Checkpoint& other) const;

 private:
  EntryMap entries_;
  MetaMap meta_;
};

// Container format, little-endian:
//   [u64 header byte length]
//   [header: UTF-8 JSON mapping tensor name ->
//       {dtype:"f32", shape:[...], offset_begin, offset_end}
//    plus "__meta__": {string map}]
//   [raw concatenated row-major f32 payload]
// Offsets are relative to payload start.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Errors with the first divergent tensor name unless all checkpoints share
// the same name set and per-name shapes.
void assert_compatible(const std::vector<const Checkpoint*>& ckpts);
void assert_compatible(const Checkpoint& a, const Checkpoint& b);

// Elementwise dst + a * src; inputs are untouched.
Checkpoint axpy_scale(const Checkpoint& dst, const Checkpoint& src, double a);

}  // namespace stm
