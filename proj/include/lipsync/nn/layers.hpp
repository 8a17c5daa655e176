#pragma once

#include "lipsync/nn/ops.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace lipsync::nn {

// Torch-style fan-in uniform init bound.
inline float fan_in_bound(int fan_in) { return 1.0f / std::sqrt(static_cast<float>(fan_in)); }

struct Linear {
    Param w, b;  // w: [Cin, Cout]

    Linear() = default;
    Linear(const std::string& name, int cin, int cout, Rng& rng, bool zero_init = false)
        : w(name + ".w", {cin, cout}), b(name + ".b", {cout}) {
        if (!zero_init) w.init_uniform(rng, fan_in_bound(cin));
    }
    Tensor operator()(Graph& g, Tensor x) { return add_bias(matmul(x, g.param(w)), g.param(b)); }
    void collect(std::vector<Param*>& out) {
        out.push_back(&w);
        out.push_back(&b);
    }
};

struct LayerNorm {
    Param gamma, beta;

    LayerNorm() = default;
    LayerNorm(const std::string& name, int dim) : gamma(name + ".g", {dim}, 1.0f), beta(name + ".b", {dim}) {}
    Tensor operator()(Graph& g, Tensor x) { return layer_norm_rows(x, g.param(gamma), g.param(beta)); }
    void collect(std::vector<Param*>& out) {
        out.push_back(&gamma);
        out.push_back(&beta);
    }
};

struct Conv2d {
    Param w, b;  // w: [Cout, Cin*k*k]
    int k = 3, stride = 1, pad = 1;

    Conv2d() = default;
    Conv2d(const std::string& name, int cin, int cout, int k_, int stride_, int pad_, Rng& rng,
           bool zero_init = false)
        : w(name + ".w", {cout, cin * k_ * k_}), b(name + ".b", {cout}), k(k_), stride(stride_), pad(pad_) {
        if (!zero_init) w.init_uniform(rng, fan_in_bound(cin * k_ * k_));
    }
    Tensor operator()(Graph& g, Tensor x) { return conv2d(x, g.param(w), g.param(b), k, stride, pad); }
    void collect(std::vector<Param*>& out) {
        out.push_back(&w);
        out.push_back(&b);
    }
};

struct Conv1d {
    Param w, b;  // w: [Cout, k*Cin]
    int k = 3, stride = 1, pad = 1;

    Conv1d() = default;
    Conv1d(const std::string& name, int cin, int cout, int k_, int stride_, int pad_, Rng& rng)
        : w(name + ".w", {cout, k_ * cin}), b(name + ".b", {cout}), k(k_), stride(stride_), pad(pad_) {
        w.init_uniform(rng, fan_in_bound(cin * k_));
    }
    Tensor operator()(Graph& g, Tensor x) { return conv1d(x, g.param(w), g.param(b), k, stride, pad); }
    void collect(std::vector<Param*>& out) {
        out.push_back(&w);
        out.push_back(&b);
    }
};

struct Conv1dDepthwise {
    Param w, b;  // w: [K, C]

    Conv1dDepthwise() = default;
    Conv1dDepthwise(const std::string& name, int channels, int k, Rng& rng)
        : w(name + ".w", {k, channels}), b(name + ".b", {channels}) {
        w.init_uniform(rng, fan_in_bound(k));
    }
    Tensor operator()(Graph& g, Tensor x) { return conv1d_depthwise(x, g.param(w), g.param(b)); }
    void collect(std::vector<Param*>& out) {
        out.push_back(&w);
        out.push_back(&b);
    }
};

struct GroupNorm {
    Param gamma, beta;
    int groups = 8;

    GroupNorm() = default;
    GroupNorm(const std::string& name, int channels, int groups_)
        : gamma(name + ".g", {channels}, 1.0f), beta(name + ".b", {channels}), groups(groups_) {}
    Tensor operator()(Graph& g, Tensor x) { return group_norm(x, groups, g.param(gamma), g.param(beta)); }
    void collect(std::vector<Param*>& out) {
        out.push_back(&gamma);
        out.push_back(&beta);
    }
};

// Standard multi-head attention over [N,D] sequences; kv_in may differ from
// q_in (cross-attention). Heads are realized as column slices of one QKV
// projection.
struct MultiheadAttention {
    Linear wq, wk, wv, wo;
    int heads = 1, dim = 0;

    MultiheadAttention() = default;
    MultiheadAttention(const std::string& name, int dim_, int heads_, Rng& rng)
        : wq(name + ".q", dim_, dim_, rng),
          wk(name + ".k", dim_, dim_, rng),
          wv(name + ".v", dim_, dim_, rng),
          wo(name + ".o", dim_, dim_, rng),
          heads(heads_),
          dim(dim_) {
        LS_CHECK(dim_ % heads_ == 0, "attention: dim %d not divisible by heads %d", dim_, heads_);
    }
    Tensor operator()(Graph& g, Tensor q_in, Tensor kv_in, float dropout_p = 0.0f);
    void collect(std::vector<Param*>& out) {
        wq.collect(out);
        wk.collect(out);
        wv.collect(out);
        wo.collect(out);
    }
};

// Checkpoint io: one container file per parameter plus a JSON metadata file.
void save_params(const std::filesystem::path& dir, const std::vector<Param*>& params,
                 const std::string& meta_json);
std::string load_params(const std::filesystem::path& dir, const std::vector<Param*>& params);
std::string load_checkpoint_meta(const std::filesystem::path& dir);

// Host-side sinusoidal embedding (timesteps, positions).
std::vector<float> sinusoidal_embedding(float position, int dim, float max_period = 10000.0f);

} // namespace lipsync::nn
