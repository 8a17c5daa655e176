#pragma once

#include "lipsync/nn/tensor.hpp"

namespace lipsync::nn {

// Elementwise / scalar
Tensor add(Tensor a, Tensor b);
Tensor sub(Tensor a, Tensor b);
Tensor mul(Tensor a, Tensor b);
Tensor scale(Tensor a, float c);
Tensor add_scalar(Tensor a, float c);
Tensor relu(Tensor a);
Tensor leaky_relu(Tensor a, float slope);
Tensor sigmoid(Tensor a);
Tensor tanh_act(Tensor a);
Tensor silu(Tensor a);
Tensor abs_act(Tensor a);
Tensor exp_act(Tensor a);
Tensor log_act(Tensor a);
Tensor clamp(Tensor a, float lo, float hi);
Tensor dropout(Tensor a, float p);

// Matrix [R,C]
Tensor matmul(Tensor a, Tensor b);     // [M,K]x[K,N]
Tensor matmul_nt(Tensor a, Tensor b);  // [M,K]x[N,K]^T
Tensor matmul_tn(Tensor a, Tensor b);  // [K,M]^T x [K,N]
Tensor add_bias(Tensor x, Tensor b);   // [R,C] + [C] broadcast over rows
Tensor softmax_rows(Tensor x);
Tensor layer_norm_rows(Tensor x, Tensor gamma, Tensor beta, float eps = 1e-5f);
Tensor l2_normalize_rows(Tensor x, float eps = 1e-12f);
Tensor rows_dot(Tensor a, Tensor b);  // [R,C],[R,C] -> [R]

// Structure
Tensor reshape(Tensor x, Shape shape);
Tensor concat_axis0(const std::vector<Tensor>& xs);
Tensor slice_axis0(Tensor x, int begin, int end);
Tensor concat_cols(const std::vector<Tensor>& xs);
Tensor slice_cols(Tensor x, int begin, int end);

// Reductions
Tensor sum_all(Tensor x);
Tensor mean_all(Tensor x);

// Convolutions / image ops. Images are CHW; 1-d sequences are [T,C].
// conv2d weight layout: [Cout, Cin*k*k]; conv1d weight: [Cout, k*Cin].
Tensor conv2d(Tensor x, Tensor w, Tensor b, int k, int stride, int pad);
Tensor conv1d(Tensor x, Tensor w, Tensor b, int k, int stride, int pad);
Tensor conv1d_depthwise(Tensor x, Tensor w, Tensor b);  // same padding, odd k
Tensor group_norm(Tensor x, int groups, Tensor gamma, Tensor beta, float eps = 1e-5f);
Tensor upsample2x(Tensor x);
Tensor global_avg_pool(Tensor x);              // [C,H,W] -> [C]
Tensor add_channel_bias(Tensor x, Tensor b);   // [C,H,W] + [C]

// Losses
Tensor mse_loss(Tensor a, Tensor b);  // mean squared error
Tensor l1_loss(Tensor a, Tensor b);   // mean absolute error
Tensor cross_entropy_rows(Tensor logits, const std::vector<int>& labels);  // mean over rows
// Additive angular margin adjustment of a cosine matrix: target entries
// become cos(theta + margin), others pass through. cos values are clamped
// to +-(1 - 1e-7) before the angle shift.
Tensor arcface_adjust(Tensor cos_mat, const std::vector<int>& labels, float margin);

} // namespace lipsync::nn
