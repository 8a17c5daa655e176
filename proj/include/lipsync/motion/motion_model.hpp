#pragma once

#include "lipsync/core/ndarray.hpp"
#include "lipsync/core/topology.hpp"
#include "lipsync/nn/layers.hpp"

#include <filesystem>
#include <functional>
#include <optional>

namespace lipsync::motion {

enum class CondMode {
    kIdCrossAttention,          // default: identity embedding via cross-attention
    kConcatKeyLandmark,         // reference landmark token prepended to the sequence
    kAddKeyLandmark,            // reference landmark feature added to every token
    kKeyLandmarkCrossAttention  // reference landmark token via cross-attention
};

const char* cond_mode_name(CondMode m);
CondMode cond_mode_from_name(const std::string& s);

struct MotionModelConfig {
    int conformer_layers = 4;
    int hidden_dim = 128;
    int ffn_dim = 256;
    int heads = 4;
    int conv_kernel = 5;
    float dropout = 0.1f;

    int audio_layers = 2;
    int audio_dim = 64;
    int audio_ffn = 128;
    int audio_heads = 4;
    int audio_kernel = 7;
    int speech_dim = 16;  // raw per-row speech feature width

    int ds_kernel = 3, ds_stride = 2, ds_pad = 1;  // audio downsample

    CondMode cond_mode = CondMode::kIdCrossAttention;
    int id_dim = 64;  // identity embedding width (extractor embed_dim)
    int max_seq_len = 250;

    static MotionModelConfig desk();
    static MotionModelConfig paper();  // Conformer 12x768, audio encoder 4x768

    std::string to_json() const;
    static MotionModelConfig from_json(const std::string& text);
};

// One Conformer block: half-step FFN, self-attention, optional cross-
// attention to a conditioning token, depthwise-conv module, half-step FFN,
// final norm. Pre-norm residuals throughout.
struct ConformerBlock {
    nn::LayerNorm ln_ffn1;
    nn::Linear ffn1_in, ffn1_out;
    nn::LayerNorm ln_attn;
    nn::MultiheadAttention attn;
    bool has_cross = false;
    nn::LayerNorm ln_cross;
    nn::MultiheadAttention cross;
    nn::LayerNorm ln_conv;
    nn::Linear conv_pw1;  // D -> 2D, gated
    nn::Conv1dDepthwise conv_dw;
    nn::LayerNorm ln_conv_mid;
    nn::Linear conv_pw2;
    nn::LayerNorm ln_ffn2;
    nn::Linear ffn2_in, ffn2_out;
    nn::LayerNorm ln_out;
    float dropout_p = 0.1f;

    ConformerBlock() = default;
    ConformerBlock(const std::string& name, int dim, int ffn_dim, int heads, int kernel, bool with_cross,
                   float dropout, nn::Rng& rng);
    nn::Tensor forward(nn::Graph& g, nn::Tensor x, std::optional<nn::Tensor> cond_token);
    void collect(std::vector<nn::Param*>& out);
};

// Speech-conditioned landmark denoiser. Consumes the noisy lower-face
// compact coordinates plus the frame-aligned upper-face prefix and predicts
// the clean lower-face coordinates (x0 parameterization).
class MotionModel {
public:
    MotionModel(const MotionModelConfig& cfg, const LandmarkTopology& topology, uint64_t seed);

    const MotionModelConfig& config() const { return cfg_; }
    const LandmarkTopology& topology() const { return topo_; }
    int lower_dim() const { return lower_dim_; }
    int upper_dim() const { return upper_dim_; }
    int cond_dim() const;  // width of the conditioning vector for the active mode

    std::vector<nn::Param*> params();

    struct CondTensors {
        int t = 0;                // diffusion step index
        nn::Tensor speech_feats;  // [2N, speech_dim]
        nn::Tensor cond_vec;      // [1, cond_dim]: z_id or flattened key landmark
    };

    // [N, lower_dim] x [N, upper_dim] -> [N, lower_dim].
    nn::Tensor forward(nn::Graph& g, nn::Tensor m_t_lower, nn::Tensor upper_prefix, const CondTensors& cond);

    // Eval-mode host forward.
    NdArray denoise(const NdArray& m_t_lower, const NdArray& upper_prefix, int t, const NdArray& speech_feats,
                    const NdArray& cond_vec) const;

    void save(const std::filesystem::path& dir, const std::string& extra_meta = "{}");
    static MotionModel load(const std::filesystem::path& dir);

private:
    MotionModelConfig cfg_;
    LandmarkTopology topo_;
    int lower_dim_ = 0, upper_dim_ = 0, full_dim_ = 0;

    nn::Linear tok_proj_, prefix_proj_;
    nn::Param seg_embed_;  // [2, hidden]
    nn::Linear t_proj1_, t_proj2_;
    nn::Linear audio_in_;
    std::vector<ConformerBlock> audio_blocks_;
    nn::Conv1d audio_ds_;
    nn::Linear speech_proj_;
    nn::Linear cond_proj_;
    std::vector<ConformerBlock> blocks_;
    nn::LayerNorm out_ln_;
    nn::Linear out_proj_;  // zero-init
};

} // namespace lipsync::motion
