#pragma once

#include <Eigen/Dense>
#include <array>
#include <cstddef>
#include <vector>

namespace sra {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVec = Eigen::Matrix<double, 1, Eigen::Dynamic>;

/// Dense 4-D tensor of attention weights indexed [layer][head][row][column].
class AttentionTrace {
 public:
  AttentionTrace() = default;
  AttentionTrace(std::size_t layers, std::size_t heads, std::size_t rows, std::size_t cols)
      : dims_{layers, heads, rows, cols}, data_(layers * heads * rows * cols, 0.0) {}

  std::size_t layers() const { return dims_[0]; }
  std::size_t heads() const { return dims_[1]; }
  std::size_t rows() const { return dims_[2]; }
  std::size_t cols() const { return dims_[3]; }

  double& operator()(std::size_t m, std::size_t h, std::size_t r, std::size_t c) {
    return data_[((m * dims_[1] + h) * dims_[2] + r) * dims_[3] + c];
  }
  double operator()(std::size_t m, std::size_t h, std::size_t r, std::size_t c) const {
    return data_[((m * dims_[1] + h) * dims_[2] + r) * dims_[3] + c];
  }

  /// Copy restricted to columns [0, cols).
  AttentionTrace slice_cols(std::size_t cols) const;
  /// Copy restricted to rows [begin, end).
  AttentionTrace slice_rows(std::size_t begin, std::size_t end) const;

  const std::vector<double>& data() const { return data_; }

 private:
  std::array<std::size_t, 4> dims_{0, 0, 0, 0};
  std::vector<double> data_;
};

}  // namespace sra
