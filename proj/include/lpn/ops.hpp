#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "lpn/tensor.hpp"

// Differentiable operations. Ranks are checked eagerly and mismatches raise
// DimensionError naming the offending shapes.
namespace lpn::ops {

// Elementwise, identical shapes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);  // stays inside (0,1) where exp saturates
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);

// Reductions to a scalar.
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

// Matrix operations.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor add_row_vector(const Tensor& a, const Tensor& row);   // a[m,n] + row[n]
Tensor mul_row_vector(const Tensor& a, const Tensor& row);   // a[m,n] * row[n]
Tensor mul_col_vector(const Tensor& a, const Tensor& col);   // a[m,n] * col[m]
Tensor row_means(const Tensor& a);                           // [m,n] -> [m]
Tensor col_means(const Tensor& a);                           // [m,n] -> [n]

// Row-wise softmax of scale*a, max-subtracted.
Tensor softmax_rows(const Tensor& a, double scale = 1.0);
Tensor log_softmax_rows(const Tensor& a, double scale = 1.0);
// Softmax of a vector [n].
Tensor softmax(const Tensor& v, double scale = 1.0);
// Rows scaled to unit L2 norm; a zero row raises DegenerateInputError.
Tensor normalize_rows(const Tensor& a);
// Rows standardised to zero mean and unit variance (no affine).
Tensor layer_norm_rows(const Tensor& a, double eps = 1e-5);

// Cosine similarity of two vectors [d] -> scalar.
Tensor cosine(const Tensor& u, const Tensor& v);
// Pairwise row cosines: a[m,d], b[n,d] -> [m,n].
Tensor cosine_matrix(const Tensor& a, const Tensor& b);
Tensor dot(const Tensor& u, const Tensor& v);

// Structure.
Tensor reshape(const Tensor& a, Shape shape);
Tensor select(const Tensor& a, std::size_t index);             // along axis 0
Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end);
Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end);
Tensor concat_rows(std::span<const Tensor> parts);              // 2-D parts
Tensor concat_cols(std::span<const Tensor> parts);              // 2-D parts
Tensor stack(std::span<const Tensor> rows);                     // [d] parts -> [n,d]
Tensor gather_rows(const Tensor& a, std::span<const std::size_t> index);
Tensor pick(const Tensor& a, std::span<const std::size_t> column_per_row);  // -> [m]

// Feature maps: x[B,C,H,W], weight[O,C,k,k], bias[O]; stride 1, zero padding k/2.
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias);
// 2x2 average pooling with stride 2 (odd trailing rows/cols dropped).
Tensor avg_pool2(const Tensor& x);

// Sum of the k largest entries of each row: a[m,n] -> [m]. Ties resolve to
// the lower column index.
Tensor topk_sum_rows(const Tensor& a, std::size_t k);

} // namespace lpn::ops
