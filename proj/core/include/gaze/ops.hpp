#pragma once

#include "gaze/tensor.hpp"

namespace gaze {

// Elementwise with numpy-style broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& a, double s);
Tensor relu(const Tensor& a);
Tensor gelu(const Tensor& a);
Tensor abs(const Tensor& a);  // subgradient 0 at 0

Tensor sum_all(const Tensor& a);   // -> [1]
Tensor mean_all(const Tensor& a);  // -> [1]

// [n,c,h,w] -> [n,c], mean over the spatial axes.
Tensor spatial_mean(const Tensor& x);

// Batched matrix product [..,m,k] x [..,k,p] -> [..,m,p]; leading batch
// dims broadcast.
Tensor matmul(const Tensor& a, const Tensor& b);

// Row-wise softmax over the last dimension, max-subtracted.
Tensor softmax_rows(const Tensor& x);

Tensor transpose_last2(const Tensor& x);
// Swap dims 1 and 2 of a 4-D tensor (head split/merge).
Tensor transpose_12(const Tensor& x);

Tensor reshape(const Tensor& x, Shape shape);
Tensor broadcast_to(const Tensor& x, const Shape& shape);

// Concatenate along the row axis (dim -2); all other dims must agree.
Tensor concat_rows(const Tensor& a, const Tensor& b);
// Select one row: [..,s,d] -> [..,d].
Tensor slice_row(const Tensor& x, int64_t row);

// [n,c,h,w] -> [n, gh*gw, (h/gh)*(w/gw)*c]; cell vectors are laid out
// channel-major, cells in row-major grid order.
Tensor image_to_patches(const Tensor& x, int64_t grid_h, int64_t grid_w);

// x[..,in] * w[out,in]^T + b[out]
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

// Cross-correlation (deep-learning convention) with zero padding.
Tensor conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias, int64_t stride,
              int64_t padding);

// k x k max pooling; ties route the gradient to the first index.
Tensor maxpool2d(const Tensor& x, int64_t k, int64_t stride);

Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double epsilon);

// Per-channel batch normalization over [n,c,h,w]. In train mode
// normalizes with batch statistics and updates the running buffers;
// in eval mode uses the running buffers only.
Tensor batchnorm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                   std::vector<double>& running_mean, std::vector<double>& running_var,
                   double momentum, double epsilon, bool training);

// Inverted dropout; identity when training is false or rate is 0.
Tensor dropout(const Tensor& x, double rate, bool training, Rng& rng);

}  // namespace gaze
