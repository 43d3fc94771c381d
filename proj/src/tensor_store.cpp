#include "stm/tensor_store.hpp"

#include <json.hpp>

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

namespace stm {

static_assert(std::endian::native == std::endian::little,
              "checkpoint container assumes a little-endian host");

namespace {

using nlohmann::json;

Index shape_product(const std::vector<Index>& shape) {
  Index n = 1;
  for (Index d : shape) n *= d;
  return n;
}

void validate_shape(const std::vector<Index>& shape) {
  if (shape.empty() || shape.size() > 2) {
    throw std::invalid_argument("tensor rank must be 1 or 2, got rank " +
                                std::to_string(shape.size()));
  }
  for (Index d : shape) {
    if (d <= 0) throw std::invalid_argument("tensor dimensions must be positive");
  }
}

}  // namespace

Tensor::Tensor(std::vector<Index> shape, Eigen::VectorXf data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  validate_shape(shape_);
  if (shape_product(shape_) != data_.size()) {
    throw std::invalid_argument(
        "tensor data length " + std::to_string(data_.size()) +
        " does not match shape product " + std::to_string(shape_product(shape_)));
  }
}

Tensor Tensor::from_vector(Eigen::VectorXf v) {
  Index n = v.size();
  return Tensor({n}, std::move(v));
}

Tensor Tensor::from_matrix(const Eigen::Ref<const RowMatrixXf>& m) {
  Eigen::VectorXf flat(m.size());
  Eigen::Map<RowMatrixXf>(flat.data(), m.rows(), m.cols()) = m;
  return Tensor({m.rows(), m.cols()}, std::move(flat));
}

Tensor Tensor::zeros(const std::vector<Index>& shape) {
  validate_shape(shape);
  return Tensor(shape, Eigen::VectorXf::Zero(shape_product(shape)));
}

Index Tensor::rows() const { return shape_[0]; }

Index Tensor::cols() const { return rank() == 2 ? shape_[1] : Index{1}; }

Eigen::Map<const RowMatrixXf> Tensor::matrix() const {
  if (rank() != 2) throw std::logic_error("matrix() requires a rank-2 tensor");
  return {data_.data(), shape_[0], shape_[1]};
}

RowMatrixXd Tensor::matrix64() const {
  return matrix().cast<double>();
}

bool Tensor::same_shape(const Tensor& other) const {
  return shape_ == other.shape_;
}

bool Tensor::bit_equal(const Tensor& other) const {
  if (!same_shape(other)) return false;
  return std::memcmp(data_.data(), other.data_.data(),
                     sizeof(float) * static_cast<std::size_t>(data_.size())) == 0;
}

bool Tensor::all_finite() const {
  return data_.allFinite();
}

void Checkpoint::insert(const std::string& name, Tensor t) {
  if (name.empty()) throw std::invalid_argument("tensor name must be non-empty");
  if (name == "__meta__") {
    throw std::invalid_argument("tensor name '__meta__' is reserved");
  }
  auto [it, inserted] = entries_.emplace(name, std::move(t));
  (void)it;
  if (!inserted) {
    throw std::invalid_argument("duplicate tensor name '" + name + "'");
  }
}

bool Checkpoint::contains(const std::string& name) const {
  return entries_.count(name) != 0;
}

const Tensor& Checkpoint::at(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) {
    throw std::out_of_range("checkpoint has no tensor named '" + name + "'");
  }
  return it->second;
}

bool Checkpoint::bit_equal(const Checkpoint& other) const {
  if (entries_.size() != other.entries_.size()) return false;
  auto a = entries_.begin();
  auto b = other.entries_.begin();
  for (; a != entries_.end(); ++a, ++b) {
    if (a->first != b->first) return false;
    if (!a->second.bit_equal(b->second)) return false;
  }
  return true;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  json header = json::object();
  std::uint64_t offset = 0;
  for (const auto& [name, tensor] : ckpt) {
    if (!tensor.all_finite()) {
      throw std::runtime_error("refusing to save non-finite tensor '" + name + "'");
    }
    std::uint64_t bytes = sizeof(float) * static_cast<std::uint64_t>(tensor.size());
    json entry;
    entry["dtype"] = "f32";
    entry["shape"] = tensor.shape();
    entry["offset_begin"] = offset;
    entry["offset_end"] = offset + bytes;
    header[name] = std::move(entry);
    offset += bytes;
  }
  header["__meta__"] = ckpt.meta();

  const std::string header_text = header.dump();
  const std::uint64_t header_len = header_text.size();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  }
  out.write(reinterpret_cast<const char*>(&header_len), sizeof(header_len));
  out.write(header_text.data(),
            static_cast<std::streamsize>(header_text.size()));
  for (const auto& [name, tensor] : ckpt) {
    (void)name;
    out.write(reinterpret_cast<const char*>(tensor.flat().data()),
              static_cast<std::streamsize>(sizeof(float) * tensor.size()));
  }
  out.flush();
  if (!out) {
    throw std::runtime_error("I/O failure while writing '" + path.string() + "'");
  }
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw std::runtime_error("cannot open checkpoint '" + path.string() + "'");
  }
  in.seekg(0, std::ios::end);
  const std::uint64_t file_size = static_cast<std::uint64_t>(in.tellg());
  in.seekg(0, std::ios::beg);

  std::uint64_t header_len = 0;
  if (file_size < sizeof(header_len)) {
    throw std::runtime_error("malformed header: '" + path.string() +
                             "' is shorter than the length prefix");
  }
  in.read(reinterpret_cast<char*>(&header_len), sizeof(header_len));
  if (header_len > file_size - sizeof(header_len)) {
    throw std::runtime_error("malformed header: declared header length " +
                             std::to_string(header_len) + " exceeds file size");
  }

  std::string header_text(header_len, '\0');
  in.read(header_text.data(), static_cast<std::streamsize>(header_len));
  json header;
  try {
    header = json::parse(header_text);
  } catch (const json::exception& e) {
    throw std::runtime_error("malformed header JSON in '" + path.string() +
                             "': " + e.what());
  }
  if (!header.is_object()) {
    throw std::runtime_error("malformed header: expected JSON object");
  }

  const std::uint64_t payload_size = file_size - sizeof(header_len) - header_len;
  const std::uint64_t payload_start = sizeof(header_len) + header_len;

  Checkpoint ckpt;
  for (const auto& [name, entry] : header.items()) {
    if (name == "__meta__") {
      for (const auto& [k, v] : entry.items()) {
        ckpt.meta()[k] = v.get<std::string>();
      }
      continue;
    }
    if (!entry.is_object() || !entry.contains("dtype") ||
        !entry.contains("shape") || !entry.contains("offset_begin") ||
        !entry.contains("offset_end")) {
      throw std::runtime_error("malformed header entry for tensor '" + name + "'");
    }
    if (entry["dtype"].get<std::string>() != "f32") {
      throw std::runtime_error("tensor '" + name + "' has unsupported dtype '" +
                               entry["dtype"].get<std::string>() + "'");
    }
    std::vector<Index> shape = entry["shape"].get<std::vector<Index>>();
    validate_shape(shape);
    const std::uint64_t begin = entry["offset_begin"].get<std::uint64_t>();
    const std::uint64_t end = entry["offset_end"].get<std::uint64_t>();
    if (end < begin) {
      throw std::runtime_error("tensor '" + name + "' has offset_end < offset_begin");
    }
    const std::uint64_t expected =
        sizeof(float) * static_cast<std::uint64_t>(shape_product(shape));
    if (end - begin != expected) {
      throw std::runtime_error(
          "tensor '" + name + "' length mismatch: shape needs " +
          std::to_string(expected) + " bytes, header declares " +
          std::to_string(end - begin));
    }
    if (end > payload_size) {
      throw std::runtime_error("truncated payload: tensor '" + name +
                               "' extends past end of file");
    }
    Eigen::VectorXf data(shape_product(shape));
    in.seekg(static_cast<std::streamoff>(payload_start + begin), std::ios::beg);
    in.read(reinterpret_cast<char*>(data.data()),
            static_cast<std::streamsize>(expected));
    if (!in) {
      throw std::runtime_error("I/O failure reading tensor '" + name + "'");
    }
    Tensor t(std::move(shape), std::move(data));
    if (!t.all_finite()) {
      throw std::runtime_error("tensor '" + name + "' contains NaN or Inf");
    }
    ckpt.insert(name, std::move(t));
  }
  return ckpt;
}

void assert_compatible(const std::vector<const Checkpoint*>& ckpts) {
  if (ckpts.empty()) {
    throw std::invalid_argument("assert_compatible: empty checkpoint list");
  }
  const Checkpoint& ref = *ckpts.front();
  for (std::size_t i = 1; i < ckpts.size(); ++i) {
    const Checkpoint& other = *ckpts[i];
    auto a = ref.begin();
    auto b = other.begin();
    for (; a != ref.end() && b != other.end(); ++a, ++b) {
      if (a->first != b->first) {
        const std::string& divergent = std::min(a->first, b->first);
        throw std::runtime_error("checkpoints differ in name set at '" +
                                 divergent + "'");
      }
      if (!a->second.same_shape(b->second)) {
        throw std::runtime_error("checkpoints disagree on shape of '" +
                                 a->first + "'");
      }
    }
    if (a != ref.end() || b != other.end()) {
      const std::string& divergent =
          a != ref.end() ? a->first : b->first;
      throw std::runtime_error("checkpoints differ in name set at '" +
                               divergent + "'");
    }
  }
}

void assert_compatible(const Checkpoint& a, const Checkpoint& b) {
  assert_compatible({&a, &b});
}

Checkpoint axpy_scale(const Checkpoint& dst, const Checkpoint& src, double a) {
  assert_compatible(dst, src);
  Checkpoint out;
  auto d = dst.begin();
  auto s = src.begin();
  for (; d != dst.end(); ++d, ++s) {
    Eigen::VectorXd acc =
        d->second.flat64() + a * s->second.flat64();
    Tensor t(d->second.shape(), acc.cast<float>());
    if (!t.all_finite()) {
      throw std::runtime_error("axpy_scale produced non-finite values in '" +
                               d->first + "'");
    }
    out.insert(d->first, std::move(t));
  }
  return out;
}

}  // namespace stm
