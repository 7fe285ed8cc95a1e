#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace condacl {

enum class Err {
  BadShape,
  DuplicateParam,
  BadConfig,
  DomainError,
  BadLabel,
  BadBatch,
  SingularMix,
  EmptyLoss,
  InfiniteKL,
  EmptyMetric,
  IncompleteRecords,
  AccessDenied,
  GenerationFailure,
  CorruptDataset,
  WriteError,
  ConfigError,
  MissingArtifact,
};

const char* err_name(Err e);

class Error : public std::runtime_error {
 public:
  Error(Err kind, const std::string& msg)
      : std::runtime_error(std::string(err_name(kind)) + ": " + msg), kind_(kind) {}
  Err kind() const { return kind_; }

 private:
  Err kind_;
};

[[noreturn]] inline void fail(Err kind, const std::string& msg) { throw Error(kind, msg); }

/// Dense row-major tensor of 64-bit reals.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int64_t> shape) : shape_(std::move(shape)) {
    data_.assign(static_cast<size_t>(checked_numel(shape_)), 0.0);
  }

  Tensor(std::vector<int64_t> shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (static_cast<int64_t>(data_.size()) != checked_numel(shape_))
      fail(Err::BadShape, "data length does not match shape");
  }

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  static Tensor full(std::vector<int64_t> shape, double v) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), v);
    return t;
  }

  const std::vector<int64_t>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int64_t dim(int i) const { return shape_[static_cast<size_t>(i)]; }
  int64_t numel() const { return static_cast<int64_t>(data_.size()); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  double& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  double operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

  std::vector<double>& vec() { return data_; }
  const std::vector<double>& vec() const { return data_; }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  // Index helpers for the NCHW layouts used throughout.
  double& at4(int64_t n, int64_t c, int64_t h, int64_t w) {
    return data_[static_cast<size_t>(((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
  }
  double at4(int64_t n, int64_t c, int64_t h, int64_t w) const {
    return data_[static_cast<size_t>(((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
  }
  double& at2(int64_t r, int64_t c) { return data_[static_cast<size_t>(r * shape_[1] + c)]; }
  double at2(int64_t r, int64_t c) const { return data_[static_cast<size_t>(r * shape_[1] + c)]; }

  static int64_t checked_numel(const std::vector<int64_t>& shape) {
    if (shape.empty()) fail(Err::BadShape, "empty shape");
    int64_t n = 1;
    for (int64_t e : shape) {
      if (e <= 0) fail(Err::BadShape, "extents must be positive");
      n *= e;
    }
    return n;
  }

 private:
  std::vector<int64_t> shape_;
  std::vector<double> data_;
};

std::string shape_str(const std::vector<int64_t>& shape);

}  // namespace condacl
