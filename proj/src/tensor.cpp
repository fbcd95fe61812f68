#include "sra/tensor.hpp"

#include <algorithm>

#include "sra/common.hpp"

namespace sra {

AttentionTrace AttentionTrace::slice_cols(std::size_t cols) const {
  if (cols > this->cols()) throw InvalidArgument("trace column slice out of range");
  AttentionTrace out(layers(), heads(), rows(), cols);
  for (std::size_t m = 0; m < layers(); ++m)
    for (std::size_t h = 0; h < heads(); ++h)
      for (std::size_t r = 0; r < rows(); ++r)
        for (std::size_t c = 0; c < cols; ++c) out(m, h, r, c) = (*this)(m, h, r, c);
  return out;
}

AttentionTrace AttentionTrace::slice_rows(std::size_t begin, std::size_t end) const {
  if (begin > end || end > rows()) throw InvalidArgument("trace row slice out of range");
  AttentionTrace out(layers(), heads(), end - begin, cols());
  for (std::size_t m = 0; m < layers(); ++m)
    for (std::size_t h = 0; h < heads(); ++h)
      for (std::size_t r = begin; r < end; ++r)
        for (std::size_t c = 0; c < cols(); ++c) out(m, h, r - begin, c) = (*this)(m, h, r, c);
  return out;
}

}  // namespace sra
