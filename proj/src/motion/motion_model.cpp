#include "lipsync/motion/motion_model.hpp"

#include <nlohmann/json.hpp>

namespace lipsync::motion {

using json = nlohmann::json;
using namespace lipsync::nn;

const char* cond_mode_name(CondMode m) {
    switch (m) {
        case CondMode::kIdCrossAttention: return "id_cross_attention";
        case CondMode::kConcatKeyLandmark: return "concat_key_landmark";
        case CondMode::kAddKeyLandmark: return "add_key_landmark";
        case CondMode::kKeyLandmarkCrossAttention: return "key_landmark_cross_attention";
    }
    return "id_cross_attention";
}

CondMode cond_mode_from_name(const std::string& s) {
    if (s == "id_cross_attention") return CondMode::kIdCrossAttention;
    if (s == "concat_key_landmark") return CondMode::kConcatKeyLandmark;
    if (s == "add_key_landmark") return CondMode::kAddKeyLandmark;
    if (s == "key_landmark_cross_attention") return CondMode::kKeyLandmarkCrossAttention;
    throw ConfigError("unknown cond_mode: " + s);
}

MotionModelConfig MotionModelConfig::desk() { return MotionModelConfig{}; }

MotionModelConfig MotionModelConfig::paper() {
    MotionModelConfig c;
    c.conformer_layers = 12;
    c.hidden_dim = 768;
    c.ffn_dim = 2048;
    c.heads = 12;
    c.conv_kernel = 5;
    c.audio_layers = 4;
    c.audio_dim = 768;
    c.audio_ffn = 2048;
    c.audio_heads = 8;
    c.audio_kernel = 13;
    return c;
}

std::string MotionModelConfig::to_json() const {
    json j = {{"conformer_layers", conformer_layers},
              {"hidden_dim", hidden_dim},
              {"ffn_dim", ffn_dim},
              {"heads", heads},
              {"conv_kernel", conv_kernel},
              {"dropout", dropout},
              {"audio_layers", audio_layers},
              {"audio_dim", audio_dim},
              {"audio_ffn", audio_ffn},
              {"audio_heads", audio_heads},
              {"audio_kernel", audio_kernel},
              {"speech_dim", speech_dim},
              {"ds_kernel", ds_kernel},
              {"ds_stride", ds_stride},
              {"ds_pad", ds_pad},
              {"cond_mode", cond_mode_name(cond_mode)},
              {"id_dim", id_dim},
              {"max_seq_len", max_seq_len}};
    return j.dump();
}

MotionModelConfig MotionModelConfig::from_json(const std::string& text) {
    json j = json::parse(text);
    MotionModelConfig c;
    c.conformer_layers = j.at("conformer_layers").get<int>();
    c.hidden_dim = j.at("hidden_dim").get<int>();
    c.ffn_dim = j.at("ffn_dim").get<int>();
    c.heads = j.at("heads").get<int>();
    c.conv_kernel = j.at("conv_kernel").get<int>();
    c.dropout = j.at("dropout").get<float>();
    c.audio_layers = j.at("audio_layers").get<int>();
    c.audio_dim = j.at("audio_dim").get<int>();
    c.audio_ffn = j.at("audio_ffn").get<int>();
    c.audio_heads = j.at("audio_heads").get<int>();
    c.audio_kernel = j.at("audio_kernel").get<int>();
    c.speech_dim = j.at("speech_dim").get<int>();
    c.ds_kernel = j.at("ds_kernel").get<int>();
    c.ds_stride = j.at("ds_stride").get<int>();
    c.ds_pad = j.at("ds_pad").get<int>();
    c.cond_mode = cond_mode_from_name(j.at("cond_mode").get<std::string>());
    c.id_dim = j.at("id_dim").get<int>();
    c.max_seq_len = j.at("max_seq_len").get<int>();
    return c;
}

// ---------------------------------------------------------------------------
// Conformer block
// ---------------------------------------------------------------------------

ConformerBlock::ConformerBlock(const std::string& name, int dim, int ffn_dim, int heads, int kernel,
                               bool with_cross, float dropout, Rng& rng)
    : ln_ffn1(name + ".ln_ffn1", dim),
      ffn1_in(name + ".ffn1_in", dim, ffn_dim, rng),
      ffn1_out(name + ".ffn1_out", ffn_dim, dim, rng),
      ln_attn(name + ".ln_attn", dim),
      attn(name + ".attn", dim, heads, rng),
      has_cross(with_cross),
      ln_conv(name + ".ln_conv", dim),
      conv_pw1(name + ".conv_pw1", dim, 2 * dim, rng),
      conv_dw(name + ".conv_dw", dim, kernel, rng),
      ln_conv_mid(name + ".ln_conv_mid", dim),
      conv_pw2(name + ".conv_pw2", dim, dim, rng),
      ln_ffn2(name + ".ln_ffn2", dim),
      ffn2_in(name + ".ffn2_in", dim, ffn_dim, rng),
      ffn2_out(name + ".ffn2_out", ffn_dim, dim, rng),
      ln_out(name + ".ln_out", dim),
      dropout_p(dropout) {
    if (with_cross) {
        ln_cross = LayerNorm(name + ".ln_cross", dim);
        cross = MultiheadAttention(name + ".cross", dim, heads, rng);
    }
}

Tensor ConformerBlock::forward(Graph& g, Tensor x, std::optional<Tensor> cond_token) {
    const int dim = x.dim(1);
    // half-step FFN
    Tensor h = add(x, scale(dropout(ffn1_out(g, silu(ffn1_in(g, ln_ffn1(g, x)))), dropout_p), 0.5f));
    // self-attention
    {
        Tensor n = ln_attn(g, h);
        h = add(h, dropout(attn(g, n, n, dropout_p), dropout_p));
    }
    // cross-attention to the conditioning token
    if (has_cross) {
        LS_CHECK(cond_token.has_value(), "conformer block expects a conditioning token");
        h = add(h, dropout(cross(g, ln_cross(g, h), *cond_token), dropout_p));
    }
    // convolution module: pointwise gate, depthwise conv, pointwise
    {
        Tensor n = ln_conv(g, h);
        Tensor pw = conv_pw1(g, n);
        Tensor gated = mul(slice_cols(pw, 0, dim), sigmoid(slice_cols(pw, dim, 2 * dim)));
        Tensor c = conv_dw(g, gated);
        c = conv_pw2(g, silu(ln_conv_mid(g, c)));
        h = add(h, dropout(c, dropout_p));
    }
    // half-step FFN
    h = add(h, scale(dropout(ffn2_out(g, silu(ffn2_in(g, ln_ffn2(g, h)))), dropout_p), 0.5f));
    return ln_out(g, h);
}

void ConformerBlock::collect(std::vector<Param*>& out) {
    ln_ffn1.collect(out);
    ffn1_in.collect(out);
    ffn1_out.collect(out);
    ln_attn.collect(out);
    attn.collect(out);
    if (has_cross) {
        ln_cross.collect(out);
        cross.collect(out);
    }
    ln_conv.collect(out);
    conv_pw1.collect(out);
    conv_dw.collect(out);
    ln_conv_mid.collect(out);
    conv_pw2.collect(out);
    ln_ffn2.collect(out);
    ffn2_in.collect(out);
    ffn2_out.collect(out);
    ln_out.collect(out);
}

// ---------------------------------------------------------------------------
// Motion model
// ---------------------------------------------------------------------------

MotionModel::MotionModel(const MotionModelConfig& cfg, const LandmarkTopology& topology, uint64_t seed)
    : cfg_(cfg), topo_(topology) {
    topo_.finalize();
    lower_dim_ = static_cast<int>(topo_.lower_compact_idx.size()) * 2;
    upper_dim_ = static_cast<int>(topo_.upper_compact_idx.size()) * 2;
    full_dim_ = topo_.total_points * 2;
    LS_CHECK(lower_dim_ > 0 && upper_dim_ > 0, "MotionModel: topology has empty lower/upper compact sets");

    Rng rng(seed);
    const int D = cfg_.hidden_dim;
    tok_proj_ = Linear("motion.tok_proj", lower_dim_, D, rng);
    prefix_proj_ = Linear("motion.prefix_proj", upper_dim_, D, rng);
    seg_embed_ = Param("motion.seg_embed", {2, D});
    seg_embed_.init_gauss(rng, 0.02f);
    t_proj1_ = Linear("motion.t_proj1", D, D, rng);
    t_proj2_ = Linear("motion.t_proj2", D, D, rng);
    audio_in_ = Linear("motion.audio_in", cfg_.speech_dim, cfg_.audio_dim, rng);
    for (int l = 0; l < cfg_.audio_layers; l++)
        audio_blocks_.emplace_back(strf("motion.audio%d", l), cfg_.audio_dim, cfg_.audio_ffn,
                                   cfg_.audio_heads, cfg_.audio_kernel, /*with_cross=*/false, cfg_.dropout,
                                   rng);
    audio_ds_ = Conv1d("motion.audio_ds", cfg_.audio_dim, cfg_.audio_dim, cfg_.ds_kernel, cfg_.ds_stride,
                       cfg_.ds_pad, rng);
    speech_proj_ = Linear("motion.speech_proj", cfg_.audio_dim, D, rng);
    cond_proj_ = Linear("motion.cond_proj", cond_dim(), D, rng);
    const bool with_cross = cfg_.cond_mode == CondMode::kIdCrossAttention ||
                            cfg_.cond_mode == CondMode::kKeyLandmarkCrossAttention;
    for (int l = 0; l < cfg_.conformer_layers; l++)
        blocks_.emplace_back(strf("motion.block%d", l), D, cfg_.ffn_dim, cfg_.heads, cfg_.conv_kernel,
                             with_cross, cfg_.dropout, rng);
    out_ln_ = LayerNorm("motion.out_ln", D);
    out_proj_ = Linear("motion.out_proj", D, lower_dim_, rng, /*zero_init=*/true);
}

int MotionModel::cond_dim() const {
    return cfg_.cond_mode == CondMode::kIdCrossAttention ? cfg_.id_dim : full_dim_;
}

std::vector<Param*> MotionModel::params() {
    std::vector<Param*> out;
    tok_proj_.collect(out);
    prefix_proj_.collect(out);
    out.push_back(&seg_embed_);
    t_proj1_.collect(out);
    t_proj2_.collect(out);
    audio_in_.collect(out);
    for (auto& b : audio_blocks_) b.collect(out);
    audio_ds_.collect(out);
    speech_proj_.collect(out);
    cond_proj_.collect(out);
    for (auto& b : blocks_) b.collect(out);
    out_ln_.collect(out);
    out_proj_.collect(out);
    return out;
}

Tensor MotionModel::forward(Graph& g, Tensor m_t_lower, Tensor upper_prefix, const CondTensors& cond) {
    LS_CHECK(m_t_lower.rank() == 2 && m_t_lower.dim(1) == lower_dim_, "forward: m_t_lower must be [N,%d]",
             lower_dim_);
    const int N = m_t_lower.dim(0);
    LS_CHECK(N <= cfg_.max_seq_len, "forward: sequence length %d exceeds max_seq_len %d", N,
             cfg_.max_seq_len);
    LS_CHECK(upper_prefix.rank() == 2 && upper_prefix.dim(0) == N && upper_prefix.dim(1) == upper_dim_,
             "forward: upper_prefix must be [%d,%d]", N, upper_dim_);
    LS_CHECK(cond.speech_feats.rank() == 2 && cond.speech_feats.dim(0) == 2 * N &&
                 cond.speech_feats.dim(1) == cfg_.speech_dim,
             "forward: speech_feats must be [%d,%d]", 2 * N, cfg_.speech_dim);
    LS_CHECK(cond.cond_vec.rank() == 2 && cond.cond_vec.dim(0) == 1 && cond.cond_vec.dim(1) == cond_dim(),
             "forward: cond_vec must be [1,%d] for mode %s", cond_dim(), cond_mode_name(cfg_.cond_mode));
    const int D = cfg_.hidden_dim;

    // Speech path: 2x-rate features -> Conformer stack -> stride-2 conv ->
    // one aligned row per video frame.
    Tensor a = audio_in_(g, cond.speech_feats);
    for (auto& b : audio_blocks_) a = b.forward(g, a, std::nullopt);
    a = audio_ds_(g, a);
    LS_CHECK(a.dim(0) == N, "audio downsample produced %d rows for %d frames", a.dim(0), N);
    Tensor speech_token = speech_proj_(g, a);  // [N, D]

    // Timestep encoding, projected and added to the input of every layer.
    std::vector<float> t_sin = sinusoidal_embedding(static_cast<float>(cond.t), D);
    Tensor t_emb = t_proj2_(g, silu(t_proj1_(g, g.input({1, D}, t_sin.data()))));
    Tensor t_row = reshape(t_emb, {D});

    // Frame-aligned position encoding shared by prefix and noisy tokens; the
    // learned segment flag is what distinguishes them.
    std::vector<float> pos(static_cast<size_t>(N) * D);
    for (int i = 0; i < N; i++) {
        std::vector<float> pe = sinusoidal_embedding(static_cast<float>(i), D);
        std::copy(pe.begin(), pe.end(), pos.begin() + static_cast<size_t>(i) * D);
    }
    Tensor pos_t = g.input({N, D}, pos.data());

    Tensor seg = g.param(seg_embed_);
    Tensor prefix = add(add_bias(prefix_proj_(g, upper_prefix), reshape(slice_axis0(seg, 0, 1), {D})), pos_t);
    Tensor noisy = add(add_bias(tok_proj_(g, m_t_lower), reshape(slice_axis0(seg, 1, 2), {D})), pos_t);

    Tensor cond_token = cond_proj_(g, cond.cond_vec);  // [1, D]

    std::vector<Tensor> pieces;
    int out_begin = N;
    if (cfg_.cond_mode == CondMode::kConcatKeyLandmark) {
        pieces = {cond_token, prefix, noisy};
        out_begin = 1 + N;
    } else {
        pieces = {prefix, noisy};
    }
    Tensor x = concat_axis0(pieces);
    const int total_rows = x.dim(0);

    // Per-frame speech rows aligned to both the prefix and noisy positions.
    Tensor speech_full = cfg_.cond_mode == CondMode::kConcatKeyLandmark
                             ? concat_axis0({g.input({1, D}), speech_token, speech_token})
                             : concat_axis0({speech_token, speech_token});
    LS_CHECK(speech_full.dim(0) == total_rows, "speech alignment failed");

    std::optional<Tensor> cross_token;
    if (cfg_.cond_mode == CondMode::kIdCrossAttention ||
        cfg_.cond_mode == CondMode::kKeyLandmarkCrossAttention)
        cross_token = cond_token;

    Tensor add_row = cfg_.cond_mode == CondMode::kAddKeyLandmark
                         ? add(t_row, reshape(cond_token, {D}))
                         : t_row;

    for (auto& block : blocks_) {
        Tensor layer_in = add(add_bias(x, add_row), speech_full);
        x = block.forward(g, layer_in, cross_token);
    }

    Tensor out_tokens = slice_axis0(x, out_begin, out_begin + N);
    return add_bias(matmul(out_ln_(g, out_tokens), g.param(out_proj_.w)), g.param(out_proj_.b));
}

NdArray MotionModel::denoise(const NdArray& m_t_lower, const NdArray& upper_prefix, int t,
                             const NdArray& speech_feats, const NdArray& cond_vec) const {
    auto* self = const_cast<MotionModel*>(this);
    Graph g(false, 0);
    CondTensors cond;
    cond.t = t;
    cond.speech_feats = g.input(speech_feats.shape(), speech_feats.data());
    cond.cond_vec = g.input({1, static_cast<int>(cond_vec.numel())}, cond_vec.data());
    Tensor out = self->forward(g, g.input(m_t_lower.shape(), m_t_lower.data()),
                               g.input(upper_prefix.shape(), upper_prefix.data()), cond);
    return NdArray::from(out.shape(), out.node()->val);
}

void MotionModel::save(const std::filesystem::path& dir, const std::string& extra_meta) {
    json meta = json::parse(extra_meta);
    meta["kind"] = "motion_model";
    meta["config"] = json::parse(cfg_.to_json());
    meta["topology"] = json::parse(topo_.to_json());
    save_params(dir, params(), meta.dump());
}

MotionModel MotionModel::load(const std::filesystem::path& dir) {
    json meta = json::parse(load_checkpoint_meta(dir));
    LS_CHECK_CFG(meta.value("kind", "") == "motion_model", "not a motion model checkpoint: %s",
                 dir.string().c_str());
    MotionModel model(MotionModelConfig::from_json(meta.at("config").dump()),
                      LandmarkTopology::from_json(meta.at("topology").dump()), 0);
    load_params(dir, model.params());
    return model;
}

} // namespace lipsync::motion
