#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "dit/rng.hpp"
#include "dit/tensor.hpp"

/// Differentiable operation set.
///
/// Layout conventions: sequences are 2-D [N, C] row-major; feature maps are
/// 3-D [C, H, W] (one image, no batch dimension). Linear weights are stored
/// [in, out] so that linear(x, w, b) = x·w + b.
namespace dit::ops {

// Raw kernels (no autograd), exposed for reuse and testing.
// C[M,N] (+)= A[M,K]·B[K,N]
void gemm_nn(const float* a, const float* b, float* c, std::size_t m, std::size_t n, std::size_t k,
             bool accumulate);
// C[M,N] (+)= A[M,K]·B[N,K]^T
void gemm_nt(const float* a, const float* b, float* c, std::size_t m, std::size_t n, std::size_t k,
             bool accumulate);
// C[M,N] (+)= A[K,M]^T·B[K,N]
void gemm_tn(const float* a, const float* b, float* c, std::size_t m, std::size_t n, std::size_t k,
             bool accumulate);

// Elementwise and reductions.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float s);
Tensor add_scalar(const Tensor& a, float s);
Tensor gelu(const Tensor& x);  // exact erf form
Tensor relu(const Tensor& x);
Tensor log(const Tensor& x, float eps = 0.0f);  // ln(x + eps)
Tensor exp(const Tensor& x);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

// Matrix ops on [N, C].
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);  // b may be undefined
Tensor add_row(const Tensor& x, const Tensor& row);                // x[N,C] + row[C]
Tensor transpose(const Tensor& x);
Tensor reshape(const Tensor& x, Shape shape);
Tensor softmax(const Tensor& x);  // over the last dimension
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps = 1e-6f);
Tensor mean_rows(const Tensor& x);                    // [N,C] -> [1,C]
Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t count);
Tensor concat_cols(const std::vector<Tensor>& xs);
Tensor concat_rows(const std::vector<Tensor>& xs);
Tensor gather_rows(const Tensor& table, std::span<const std::size_t> rows);  // embedding lookup
Tensor broadcast_rows(const Tensor& row, std::size_t n);                     // [1,C] or [C] -> [N,C]
/// Rows i with mask[i] set are taken from `source`, all others from `x`.
Tensor replace_rows(const Tensor& x, const std::vector<bool>& mask, const Tensor& source);

// Feature-map ops on [C, H, W].
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride, std::size_t pad);
/// Stride-2 2x2 transposed convolution; w is [Cin, Cout, 2, 2]. Output is 2H x 2W.
Tensor conv_transpose2x2(const Tensor& x, const Tensor& w, const Tensor& b);
/// Stride-2 2x2 max pooling (floor on odd sizes).
Tensor maxpool2x2(const Tensor& x);
/// Layer norm over the channel dimension at every spatial position.
Tensor channel_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps = 1e-6f);

// Losses.
/// Mean softmax cross-entropy over rows of logits[M,K].
Tensor cross_entropy(const Tensor& logits, std::span<const std::int64_t> targets);
/// Sum of smooth-L1 over all elements against a constant target.
Tensor smooth_l1(const Tensor& pred, std::span<const float> target, float beta);
/// Mean squared error against a constant target.
Tensor mse(const Tensor& pred, std::span<const float> target);

/// Forward: one-hot of the row argmax (lowest index on ties).
/// Backward: identity, i.e. the gradient of the soft input.
Tensor straight_through(const Tensor& soft);

Tensor dropout(const Tensor& x, float p, bool training, Rng& rng);
/// Drops the whole tensor with probability p (training), else rescales by 1/(1-p).
Tensor stochastic_depth(const Tensor& x, float p, bool training, Rng& rng);

/// softmax(Q K^T / sqrt(d_head)) V per head, concatenated and projected.
/// x[N,h]; qkv_w[h,3h]; proj_w[h,h].
Tensor multi_head_attention(const Tensor& x, const Tensor& qkv_w, const Tensor& qkv_b,
                            const Tensor& proj_w, const Tensor& proj_b, std::size_t heads);

}  // namespace dit::ops
