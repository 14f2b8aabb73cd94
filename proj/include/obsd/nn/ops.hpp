#pragma once

#include "obsd/nn/tensor.hpp"

namespace obsd::nn {

// elementwise
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);
Tensor silu(const Tensor& x);
Tensor relu(const Tensor& x);

// shape
Tensor reshape(const Tensor& x, std::vector<int> shape);
Tensor transpose2d(const Tensor& x);                       // (m,n) -> (n,m)
Tensor concat_channels(const Tensor& a, const Tensor& b);  // NCHW along C
Tensor select_batch(const Tensor& x, int n);               // (N,...) -> (...)
Tensor stack_batch(const std::vector<Tensor>& parts);      // K x (...) -> (K,...)

// linear algebra
Tensor matmul(const Tensor& a, const Tensor& b);  // (m,k)x(k,n)
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);  // x(n,in) w(out,in)

// conv & spatial
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad);
// 3x3 deformable conv, stride 1, pad 1, zero-padding bilinear sampling.
// offsets: (N, 2K, H, W), channel 2k = dy of tap k, 2k+1 = dx (row-major taps).
Tensor deformable_conv2d(const Tensor& x, const Tensor& offsets, const Tensor& w,
                         const Tensor& b);
Tensor upsample2x(const Tensor& x);
Tensor avgpool2(const Tensor& x);
Tensor global_avgpool(const Tensor& x);  // (N,C,H,W) -> (N,C)

// normalization & broadcasting
Tensor group_norm(const Tensor& x, int groups, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-5);
Tensor add_channel_bias(const Tensor& x, const Tensor& b);     // (N,C,H,W)+(C)
Tensor add_sample_channel(const Tensor& x, const Tensor& s);   // (N,C,H,W)+(N,C)
Tensor film(const Tensor& x, const Tensor& scale, const Tensor& shift);  // x*(1+sc)+sh, (N,C)

// attention pieces
Tensor softmax_rows(const Tensor& x);  // (m,n), softmax per row

// reductions / losses
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);
Tensor mse(const Tensor& a, const Tensor& b);
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels);
// mean Euclidean norm of (dy,dx) offset pairs; offsets (N,2K,H,W).
Tensor offset_mean_norm(const Tensor& offsets);

}  // namespace obsd::nn
