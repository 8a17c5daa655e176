#include "lipsync/appearance/appearance.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>

namespace lipsync::appearance {

using json = nlohmann::json;
using namespace lipsync::nn;

const char* reference_mode_name(ReferenceMode m) {
    switch (m) {
        case ReferenceMode::kMultiMasked: return "multi_masked";
        case ReferenceMode::kSingleMasked: return "single_masked";
        case ReferenceMode::kSingleFull: return "single_full";
    }
    return "multi_masked";
}

ReferenceMode reference_mode_from_name(const std::string& s) {
    if (s == "multi_masked") return ReferenceMode::kMultiMasked;
    if (s == "single_masked") return ReferenceMode::kSingleMasked;
    if (s == "single_full") return ReferenceMode::kSingleFull;
    throw ConfigError("unknown reference_mode: " + s);
}

AppearanceModelConfig AppearanceModelConfig::desk() { return AppearanceModelConfig{}; }

AppearanceModelConfig AppearanceModelConfig::paper() {
    AppearanceModelConfig c;
    c.hidden_dim = 256;
    c.resblocks_encoder = 8;
    c.resblocks_decoder = 8;
    c.resblocks_fusion = 4;
    c.image_size = 256;
    return c;
}

std::string AppearanceModelConfig::to_json() const {
    json j = {{"hidden_dim", hidden_dim},
              {"resblocks_encoder", resblocks_encoder},
              {"resblocks_decoder", resblocks_decoder},
              {"resblocks_fusion", resblocks_fusion},
              {"conv_kernel", conv_kernel},
              {"downsamples", downsamples},
              {"kl_weight", kl_weight},
              {"disc_weight", disc_weight},
              {"k_ref", k_ref},
              {"reference_mode", reference_mode_name(reference_mode)},
              {"image_size", image_size}};
    return j.dump();
}

AppearanceModelConfig AppearanceModelConfig::from_json(const std::string& text) {
    json j = json::parse(text);
    AppearanceModelConfig c;
    c.hidden_dim = j.at("hidden_dim").get<int>();
    c.resblocks_encoder = j.at("resblocks_encoder").get<int>();
    c.resblocks_decoder = j.at("resblocks_decoder").get<int>();
    c.resblocks_fusion = j.at("resblocks_fusion").get<int>();
    c.conv_kernel = j.at("conv_kernel").get<int>();
    c.downsamples = j.at("downsamples").get<int>();
    c.kl_weight = j.at("kl_weight").get<float>();
    c.disc_weight = j.at("disc_weight").get<float>();
    c.k_ref = j.at("k_ref").get<int>();
    c.reference_mode = reference_mode_from_name(j.at("reference_mode").get<std::string>());
    c.image_size = j.at("image_size").get<int>();
    return c;
}

// ---------------------------------------------------------------------------
// Region / raster ops
// ---------------------------------------------------------------------------

Frame rasterize_landmarks(const NdArray& landmarks_frame, int size) {
    LS_CHECK(landmarks_frame.rank() == 2 && landmarks_frame.dim(1) == 2,
             "rasterize_landmarks: expected [L,2]");
    for (int64_t i = 0; i < landmarks_frame.numel(); i++)
        LS_CHECK(landmarks_frame[i] >= -1.0f && landmarks_frame[i] <= 1.0f,
                 "rasterize_landmarks: coord %g outside [-1,1]", landmarks_frame[i]);
    Frame img({size, size, 3});
    const float radius = 1.5f;
    for (int p = 0; p < landmarks_frame.dim(0); p++) {
        const float cx = denormalize_coord(landmarks_frame.at(p, 0), size);
        const float cy = denormalize_coord(landmarks_frame.at(p, 1), size);
        const int r0 = std::max(0, static_cast<int>(std::floor(cy - radius - 1)));
        const int r1 = std::min(size - 1, static_cast<int>(std::ceil(cy + radius + 1)));
        const int c0 = std::max(0, static_cast<int>(std::floor(cx - radius - 1)));
        const int c1 = std::min(size - 1, static_cast<int>(std::ceil(cx + radius + 1)));
        for (int r = r0; r <= r1; r++)
            for (int c = c0; c <= c1; c++) {
                const float dx = static_cast<float>(c) + 0.5f - cx;
                const float dy = static_cast<float>(r) + 0.5f - cy;
                const float d = std::sqrt(dx * dx + dy * dy);
                const float v = std::clamp(radius - d, 0.0f, 1.0f);
                if (v > img.at(r, c, 0))
                    for (int ch = 0; ch < 3; ch++) img.at(r, c, ch) = v;
            }
    }
    return img;
}

RegionFrames make_region_frames(const Frame& frame, const NdArray& landmarks_frame,
                                const LandmarkTopology& topology) {
    LS_CHECK(frame.rank() == 3 && frame.dim(0) == frame.dim(1) && frame.dim(2) == 3,
             "make_region_frames: expected square [H,W,3] frame");
    LS_CHECK(!topology.lip_hull_idx.empty(), "make_region_frames: degenerate mask (empty lip hull)");
    RegionFrames out;
    out.mask = lip_mask_from_landmarks(landmarks_frame, topology, frame.dim(0));
    out.x_lip = Frame(frame.shape());
    out.x_nonlip = Frame(frame.shape());
    const int S = frame.dim(0);
    for (int r = 0; r < S; r++)
        for (int c = 0; c < S; c++) {
            const bool in = out.mask.mask.at(r, c) > 0.5f;
            for (int ch = 0; ch < 3; ch++) {
                if (in)
                    out.x_lip.at(r, c, ch) = frame.at(r, c, ch);
                else
                    out.x_nonlip.at(r, c, ch) = frame.at(r, c, ch);
            }
        }
    return out;
}

std::vector<int> select_reference_indices(int clip_len, int k, uint64_t seed, int exclude_idx) {
    LS_CHECK(k >= 1, "select_references: k must be >= 1");
    const bool excluded = exclude_idx >= 0 && exclude_idx < clip_len;
    LS_CHECK(clip_len >= k + (excluded ? 1 : 0), "select_references: clip of %d frames too short for k=%d",
             clip_len, k);
    Rng rng(seed ^ 0x5E1EC7ull);
    return rng.sample_without_replacement(clip_len, k, excluded ? exclude_idx : -1);
}

std::vector<Frame> select_references(const VideoClip& clip, const LandmarkSequence& landmarks, int k,
                                     uint64_t seed, int exclude_idx, ReferenceMode mode) {
    LS_CHECK(clip.n_frames() == landmarks.n_frames(), "select_references: clip/landmark length mismatch");
    std::vector<int> idx = select_reference_indices(clip.n_frames(), k, seed, exclude_idx);
    std::vector<Frame> out;
    out.reserve(idx.size());
    for (int i : idx) {
        if (mode == ReferenceMode::kSingleFull) {
            out.push_back(clip.frame(i));
        } else {
            out.push_back(make_region_frames(clip.frame(i), landmarks.frame(i), landmarks.topology).x_lip);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Blocks
// ---------------------------------------------------------------------------

static int gn_groups(int channels) { return channels >= 32 ? 8 : 4; }

ResBlock::ResBlock(const std::string& name, int channels, int kernel, Rng& rng)
    : gn1(name + ".gn1", channels, gn_groups(channels)),
      gn2(name + ".gn2", channels, gn_groups(channels)),
      conv1(name + ".conv1", channels, channels, kernel, 1, kernel / 2, rng),
      conv2(name + ".conv2", channels, channels, kernel, 1, kernel / 2, rng) {}

Tensor ResBlock::forward(Graph& g, Tensor x) {
    Tensor h = conv1(g, silu(gn1(g, x)));
    h = conv2(g, silu(gn2(g, h)));
    return add(x, h);
}

void ResBlock::collect(std::vector<Param*>& out) {
    gn1.collect(out);
    gn2.collect(out);
    conv1.collect(out);
    conv2.collect(out);
}

namespace {
struct Widths {
    int c0, c1, c2;
};
Widths widths_of(const AppearanceModelConfig& cfg) {
    return {std::max(8, cfg.hidden_dim / 4), std::max(8, cfg.hidden_dim / 2), cfg.hidden_dim};
}
struct BlockSplit {
    int n0, n1, n2;
};
BlockSplit split_blocks(int n) {
    const int n0 = std::max(1, n / 4);
    const int n1 = std::max(1, n / 4);
    return {n0, n1, std::max(1, n - n0 - n1)};
}
} // namespace

Encoder::Encoder(const std::string& name, const AppearanceModelConfig& cfg, Rng& rng) {
    LS_CHECK(cfg.downsamples == 2, "Encoder: ladder is built for 2 downsamples, got %d", cfg.downsamples);
    const Widths w = widths_of(cfg);
    const BlockSplit bs = split_blocks(cfg.resblocks_encoder);
    const int k = cfg.conv_kernel;
    conv_in = Conv2d(name + ".in", 3, w.c0, k, 1, k / 2, rng);
    for (int i = 0; i < bs.n0; i++) rb0.emplace_back(strf("%s.rb0_%d", name.c_str(), i), w.c0, k, rng);
    down1 = Conv2d(name + ".down1", w.c0, w.c1, k, 2, k / 2, rng);
    for (int i = 0; i < bs.n1; i++) rb1.emplace_back(strf("%s.rb1_%d", name.c_str(), i), w.c1, k, rng);
    down2 = Conv2d(name + ".down2", w.c1, w.c2, k, 2, k / 2, rng);
    for (int i = 0; i < bs.n2; i++) rb2.emplace_back(strf("%s.rb2_%d", name.c_str(), i), w.c2, k, rng);
}

Tensor Encoder::forward(Graph& g, Tensor chw) {
    Tensor h = conv_in(g, chw);
    for (auto& rb : rb0) h = rb.forward(g, h);
    h = down1(g, h);
    for (auto& rb : rb1) h = rb.forward(g, h);
    h = down2(g, h);
    for (auto& rb : rb2) h = rb.forward(g, h);
    return h;
}

void Encoder::collect(std::vector<Param*>& out) {
    conv_in.collect(out);
    for (auto& rb : rb0) rb.collect(out);
    down1.collect(out);
    for (auto& rb : rb1) rb.collect(out);
    down2.collect(out);
    for (auto& rb : rb2) rb.collect(out);
}

FusionNet::FusionNet(const std::string& name, const AppearanceModelConfig& cfg, Rng& rng) {
    const int h = cfg.hidden_dim;
    const int in_ch = cfg.effective_k_ref() * h + h;
    fuse_in = Conv2d(name + ".in", in_ch, h, 1, 1, 0, rng);
    for (int i = 0; i < cfg.resblocks_fusion; i++)
        rbs.emplace_back(strf("%s.rb%d", name.c_str(), i), h, cfg.conv_kernel, rng);
    gn_out = GroupNorm(name + ".gn_out", h, gn_groups(h));
    to_moments = Conv2d(name + ".moments", h, 2 * h, 1, 1, 0, rng);
}

void FusionNet::collect(std::vector<Param*>& out) {
    fuse_in.collect(out);
    for (auto& rb : rbs) rb.collect(out);
    gn_out.collect(out);
    to_moments.collect(out);
}

Decoder::Decoder(const std::string& name, const AppearanceModelConfig& cfg, Rng& rng) {
    const Widths w = widths_of(cfg);
    const BlockSplit bs = split_blocks(cfg.resblocks_decoder);
    const int k = cfg.conv_kernel;
    conv_in = Conv2d(name + ".in", 2 * cfg.hidden_dim, w.c2, k, 1, k / 2, rng);
    for (int i = 0; i < bs.n2; i++) rb2.emplace_back(strf("%s.rb2_%d", name.c_str(), i), w.c2, k, rng);
    up1 = Conv2d(name + ".up1", w.c2, w.c1, k, 1, k / 2, rng);
    for (int i = 0; i < bs.n1; i++) rb1.emplace_back(strf("%s.rb1_%d", name.c_str(), i), w.c1, k, rng);
    up2 = Conv2d(name + ".up2", w.c1, w.c0, k, 1, k / 2, rng);
    for (int i = 0; i < bs.n0; i++) rb0.emplace_back(strf("%s.rb0_%d", name.c_str(), i), w.c0, k, rng);
    gn_out = GroupNorm(name + ".gn_out", w.c0, gn_groups(w.c0));
    conv_out = Conv2d(name + ".out", w.c0, 3, k, 1, k / 2, rng);
}

Tensor Decoder::forward(Graph& g, Tensor x) {
    Tensor h = conv_in(g, x);
    for (auto& rb : rb2) h = rb.forward(g, h);
    h = up1(g, upsample2x(h));
    for (auto& rb : rb1) h = rb.forward(g, h);
    h = up2(g, upsample2x(h));
    for (auto& rb : rb0) h = rb.forward(g, h);
    return sigmoid(conv_out(g, silu(gn_out(g, h))));
}

void Decoder::collect(std::vector<Param*>& out) {
    conv_in.collect(out);
    for (auto& rb : rb2) rb.collect(out);
    up1.collect(out);
    for (auto& rb : rb1) rb.collect(out);
    up2.collect(out);
    for (auto& rb : rb0) rb.collect(out);
    gn_out.collect(out);
    conv_out.collect(out);
}

// ---------------------------------------------------------------------------
// Appearance model
// ---------------------------------------------------------------------------

AppearanceModel::AppearanceModel(const AppearanceModelConfig& cfg, uint64_t seed) : cfg_(cfg) {
    Rng rng(seed);
    enc_lip_ = Encoder("app.enc_lip", cfg, rng);
    enc_nonlip_ = Encoder("app.enc_nonlip", cfg, rng);
    enc_motion_ = Encoder("app.enc_motion", cfg, rng);
    fusion_ = FusionNet("app.fusion", cfg, rng);
    const int h = cfg.hidden_dim;
    landmark_quant_ = Conv2d("app.landmark_quant", h, h, 1, 1, 0, rng);
    appear_landmark_quant_ = Conv2d("app.appear_landmark_quant", h, h, 1, 1, 0, rng);
    post_quant_ = Conv2d("app.post_quant", 2 * h, 2 * h, 1, 1, 0, rng);
    dec_ = Decoder("app.dec", cfg, rng);
}

std::vector<Param*> AppearanceModel::params() {
    std::vector<Param*> out;
    enc_lip_.collect(out);
    enc_nonlip_.collect(out);
    enc_motion_.collect(out);
    fusion_.collect(out);
    landmark_quant_.collect(out);
    appear_landmark_quant_.collect(out);
    post_quant_.collect(out);
    dec_.collect(out);
    return out;
}

Tensor AppearanceModel::encode_lip(Graph& g, const std::vector<Tensor>& refs_chw) {
    LS_CHECK(static_cast<int>(refs_chw.size()) == cfg_.effective_k_ref(),
             "encode_lip: expected %d references, got %zu", cfg_.effective_k_ref(), refs_chw.size());
    std::vector<Tensor> encoded;
    encoded.reserve(refs_chw.size());
    for (Tensor r : refs_chw) {
        LS_CHECK(r.rank() == 3 && r.dim(0) == 3 && r.dim(1) == cfg_.image_size,
                 "encode_lip: reference resolution mismatch (%s, expected [3,%d,%d])",
                 shape_str(r.shape()).c_str(), cfg_.image_size, cfg_.image_size);
        encoded.push_back(enc_lip_.forward(g, r));
    }
    return encoded.size() == 1 ? encoded[0] : concat_axis0(encoded);
}

Tensor AppearanceModel::encode_nonlip(Graph& g, Tensor chw) {
    LS_CHECK(chw.rank() == 3 && chw.dim(0) == 3 && chw.dim(1) == cfg_.image_size,
             "encode_nonlip: resolution mismatch");
    return enc_nonlip_.forward(g, chw);
}

Tensor AppearanceModel::encode_motion(Graph& g, Tensor chw) {
    LS_CHECK(chw.rank() == 3 && chw.dim(0) == 3 && chw.dim(1) == cfg_.image_size,
             "encode_motion: resolution mismatch");
    return enc_motion_.forward(g, chw);
}

AppearanceModel::Moments AppearanceModel::fuse(Graph& g, Tensor z_lip, Tensor z_nonlip) {
    const int h = cfg_.hidden_dim;
    LS_CHECK(z_lip.rank() == 3 && z_nonlip.rank() == 3 && z_lip.dim(1) == z_nonlip.dim(1) &&
                 z_lip.dim(2) == z_nonlip.dim(2),
             "fuse: latent grids not spatially aligned (%s vs %s)", shape_str(z_lip.shape()).c_str(),
             shape_str(z_nonlip.shape()).c_str());
    Tensor x = fusion_.fuse_in(g, concat_axis0({z_lip, z_nonlip}));
    for (auto& rb : fusion_.rbs) x = rb.forward(g, x);
    Tensor moments = fusion_.to_moments(g, silu(fusion_.gn_out(g, x)));
    Moments m;
    m.mu = slice_axis0(moments, 0, h);
    m.logvar = clamp(slice_axis0(moments, h, 2 * h), -30.0f, 10.0f);
    return m;
}

Tensor AppearanceModel::decode(Graph& g, Tensor z_appear, Tensor z_motion) {
    LS_CHECK(z_appear.rank() == 3 && z_motion.rank() == 3 && z_appear.dim(1) == z_motion.dim(1) &&
                 z_appear.dim(2) == z_motion.dim(2),
             "decode: latent grids not spatially aligned");
    Tensor za = appear_landmark_quant_(g, z_appear);
    Tensor zm = landmark_quant_(g, z_motion);
    Tensor x = post_quant_(g, concat_axis0({za, zm}));
    return dec_.forward(g, x);
}

AppearanceModel::ForwardOut AppearanceModel::forward(Graph& g, const std::vector<Tensor>& refs,
                                                     Tensor x_nl, Tensor x_m, bool sample_latent) {
    Tensor z_lip = encode_lip(g, refs);
    Tensor z_nonlip = encode_nonlip(g, x_nl);
    Moments m = fuse(g, z_lip, z_nonlip);
    Tensor z = m.mu;
    if (sample_latent) {
        NdArray eps_host(m.mu.shape());
        g.rng().fill_gauss(eps_host.data(), eps_host.numel());
        Tensor eps = g.input(m.mu.shape(), eps_host.data());
        z = add(m.mu, mul(exp_act(nn::scale(m.logvar, 0.5f)), eps));
    }
    Tensor z_motion = encode_motion(g, x_m);
    ForwardOut out;
    out.recon = decode(g, z, z_motion);
    out.mu = m.mu;
    out.logvar = m.logvar;
    return out;
}

Frame AppearanceModel::reconstruct(const std::vector<Frame>& refs, const Frame& x_nl,
                                   const Frame& x_m) const {
    auto* self = const_cast<AppearanceModel*>(this);
    Graph g;
    std::vector<Tensor> ref_t;
    std::vector<NdArray> ref_chw;
    ref_chw.reserve(refs.size());
    for (const Frame& r : refs) {
        ref_chw.push_back(chw_from_frame(r));
        ref_t.push_back(g.input(ref_chw.back().shape(), ref_chw.back().data()));
    }
    NdArray nl = chw_from_frame(x_nl), m = chw_from_frame(x_m);
    ForwardOut out = self->forward(g, ref_t, g.input(nl.shape(), nl.data()), g.input(m.shape(), m.data()),
                                   /*sample_latent=*/false);
    return frame_from_chw(NdArray::from(out.recon.shape(), out.recon.node()->val));
}

void AppearanceModel::save(const std::filesystem::path& dir, const std::string& extra_meta) {
    json meta = json::parse(extra_meta);
    meta["kind"] = "appearance_model";
    meta["config"] = json::parse(cfg_.to_json());
    save_params(dir, params(), meta.dump());
}

AppearanceModel AppearanceModel::load(const std::filesystem::path& dir) {
    json meta = json::parse(load_checkpoint_meta(dir));
    LS_CHECK_CFG(meta.value("kind", "") == "appearance_model", "not an appearance checkpoint: %s",
                 dir.string().c_str());
    AppearanceModel model(AppearanceModelConfig::from_json(meta.at("config").dump()), 0);
    load_params(dir, model.params());
    return model;
}

// ---------------------------------------------------------------------------
// Discriminator
// ---------------------------------------------------------------------------

Discriminator::Discriminator(int image_size, uint64_t seed) {
    LS_CHECK(image_size >= 16, "Discriminator: image too small");
    Rng rng(seed ^ 0xD15Cull);
    c1 = Conv2d("disc.c1", 3, 32, 4, 2, 1, rng);
    c2 = Conv2d("disc.c2", 32, 64, 4, 2, 1, rng);
    c3 = Conv2d("disc.c3", 64, 64, 4, 2, 1, rng);
    c4 = Conv2d("disc.c4", 64, 1, 3, 1, 1, rng);
}

Tensor Discriminator::logits(Graph& g, Tensor chw) {
    Tensor h = leaky_relu(c1(g, chw), 0.2f);
    h = leaky_relu(c2(g, h), 0.2f);
    h = leaky_relu(c3(g, h), 0.2f);
    return c4(g, h);
}

std::vector<Param*> Discriminator::params() {
    std::vector<Param*> out;
    c1.collect(out);
    c2.collect(out);
    c3.collect(out);
    c4.collect(out);
    return out;
}

void Discriminator::save(const std::filesystem::path& dir) {
    save_params(dir, params(), R"({"kind":"discriminator"})");
}

Discriminator Discriminator::load(const std::filesystem::path& dir) {
    Discriminator d(64, 0);
    load_params(dir, d.params());
    return d;
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

static Tensor clamped_prob(Tensor logits) { return clamp(sigmoid(logits), 1e-7f, 1.0f - 1e-7f); }

Tensor disc_objective(Graph& g, Discriminator& disc, Tensor real_chw, Tensor fake_chw) {
    Tensor p_real = clamped_prob(disc.logits(g, real_chw));
    Tensor p_fake = clamped_prob(disc.logits(g, fake_chw));
    Tensor one_minus = add_scalar(nn::scale(p_fake, -1.0f), 1.0f);
    return add(mean_all(log_act(p_real)), mean_all(log_act(one_minus)));
}

Tensor generator_adv_loss(Graph& g, Discriminator& disc, Tensor fake_chw) {
    return nn::scale(mean_all(log_act(clamped_prob(disc.logits(g, fake_chw)))), -1.0f);
}

DiscLossResult disc_loss(const Frame& real, const Frame& fake, const Discriminator& disc) {
    LS_CHECK(real.shape() == fake.shape(), "disc_loss: shape mismatch");
    auto& d = const_cast<Discriminator&>(disc);
    Graph g;
    NdArray real_chw = chw_from_frame(real), fake_chw = chw_from_frame(fake);
    Tensor fake_t = g.input(fake_chw.shape(), fake_chw.data(), /*needs_grad=*/true);
    Tensor value = disc_objective(g, d, g.input(real_chw.shape(), real_chw.data()), fake_t);
    g.backward(value);
    DiscLossResult out;
    out.value = value.item();
    out.grad_fake = NdArray::from(fake_chw.shape(), fake_t.node()->grad);
    return out;
}

Tensor kl_divergence(Graph& g, Tensor mu, Tensor logvar) {
    (void)g;
    LS_CHECK(mu.shape() == logvar.shape(), "kl_divergence: shape mismatch");
    Tensor term = sub(add_scalar(add(mul(mu, mu), exp_act(logvar)), -1.0f), logvar);
    return nn::scale(sum_all(term), 0.5f);
}

double kl_divergence_value(const NdArray& mu, const NdArray& logvar) {
    LS_CHECK(mu.shape() == logvar.shape(), "kl_divergence_value: shape mismatch");
    double total = 0;
    for (int64_t i = 0; i < mu.numel(); i++)
        total += static_cast<double>(mu[i]) * mu[i] + std::exp(static_cast<double>(logvar[i])) - 1.0 -
                 logvar[i];
    return 0.5 * total;
}

VaeLossParts vae_loss(const std::vector<Frame>& refs, const Frame& x_nl, const Frame& x_m,
                      const Frame& target, const AppearanceModel& model, const Discriminator& disc,
                      bool with_adv) {
    auto* m = const_cast<AppearanceModel*>(&model);
    auto& d = const_cast<Discriminator&>(disc);
    Graph g;
    std::vector<Tensor> ref_t;
    std::vector<NdArray> ref_chw;
    for (const Frame& r : refs) {
        ref_chw.push_back(chw_from_frame(r));
        ref_t.push_back(g.input(ref_chw.back().shape(), ref_chw.back().data()));
    }
    NdArray nl = chw_from_frame(x_nl), xm = chw_from_frame(x_m), tgt = chw_from_frame(target);
    AppearanceModel::ForwardOut out = m->forward(g, ref_t, g.input(nl.shape(), nl.data()),
                                                 g.input(xm.shape(), xm.data()), /*sample_latent=*/false);
    VaeLossParts parts;
    parts.l1 = l1_loss(out.recon, g.input(tgt.shape(), tgt.data())).item();
    parts.kl = kl_divergence(g, out.mu, out.logvar).item();
    parts.adv = with_adv ? generator_adv_loss(g, d, out.recon).item() : 0.0f;
    parts.total = parts.l1 + model.config().kl_weight * parts.kl +
                  (with_adv ? model.config().disc_weight * parts.adv : 0.0f);
    return parts;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

namespace {

struct CachedClip {
    NdArray frames;  // [N,S,S,3]
    LandmarkSequence landmarks;
    int n_frames = 0;
};

Frame frame_of(const CachedClip& c, int t) {
    const int S = c.frames.dim(1);
    Frame f({S, S, 3});
    std::memcpy(f.data(), c.frames.data() + static_cast<int64_t>(t) * S * S * 3,
                static_cast<size_t>(S) * S * 3 * sizeof(float));
    return f;
}

struct SampleInputs {
    std::vector<NdArray> refs_chw;
    NdArray nl_chw, xm_chw, target_chw;
    NdArray mask;  // [S,S]
};

SampleInputs build_inputs(const CachedClip& clip, int t, const AppearanceModelConfig& cfg, uint64_t seed) {
    SampleInputs in;
    const Frame target = frame_of(clip, t);
    RegionFrames regions = make_region_frames(target, clip.landmarks.frame(t), clip.landmarks.topology);
    in.nl_chw = chw_from_frame(regions.x_nonlip);
    in.xm_chw = chw_from_frame(rasterize_landmarks(clip.landmarks.frame(t), cfg.image_size));
    in.target_chw = chw_from_frame(target);
    in.mask = regions.mask.mask;
    std::vector<int> idx = select_reference_indices(clip.n_frames, cfg.effective_k_ref(), seed, t);
    for (int i : idx) {
        const Frame rf = frame_of(clip, i);
        if (cfg.reference_mode == ReferenceMode::kSingleFull) {
            in.refs_chw.push_back(chw_from_frame(rf));
        } else {
            in.refs_chw.push_back(chw_from_frame(
                make_region_frames(rf, clip.landmarks.frame(i), clip.landmarks.topology).x_lip));
        }
    }
    return in;
}

void set_trainable(const std::vector<Param*>& params, bool flag) {
    for (Param* p : params) p->trainable = flag;
}

} // namespace

AppearanceTrainResult train_appearance(AppearanceModel& model, Discriminator& disc,
                                       const synth::Dataset& dataset, const AppearanceTrainConfig& cfg) {
    const AppearanceModelConfig& mc = model.config();
    LS_CHECK_CFG(dataset.params().image_size == mc.image_size,
                 "train_appearance: dataset resolution %d vs model %d", dataset.params().image_size,
                 mc.image_size);
    std::vector<int> train_idx = dataset.train_indices();
    LS_CHECK(!train_idx.empty(), "train_appearance: no training clips");

    std::vector<CachedClip> cache;
    cache.reserve(train_idx.size());
    for (int ci : train_idx) {
        synth::ClipData data = dataset.load_clip(ci, /*with_frames=*/true);
        CachedClip c;
        c.frames = std::move(data.clip.frames);
        c.landmarks = std::move(data.landmarks);
        c.n_frames = c.landmarks.n_frames();
        cache.push_back(std::move(c));
    }

    std::vector<Param*> gen_params = model.params();
    std::vector<Param*> disc_params = disc.params();
    Adam gen_opt, disc_opt;
    Rng rng(cfg.seed);
    AppearanceTrainResult result;
    int64_t step = 0;

    for (int epoch = 0; epoch < cfg.epochs; epoch++) {
        // One entry per (clip, frame) sample this epoch.
        std::vector<std::pair<int, int>> samples;
        for (size_t c = 0; c < cache.size(); c++)
            for (int k = 0; k < cfg.frames_per_clip_epoch; k++)
                samples.emplace_back(static_cast<int>(c),
                                     static_cast<int>(rng.randint(cache[c].n_frames)));
        for (int i = static_cast<int>(samples.size()) - 1; i > 0; i--)
            std::swap(samples[static_cast<size_t>(i)], samples[static_cast<size_t>(rng.randint(i + 1))]);

        double e_l1 = 0, e_kl = 0, e_adv = 0, e_disc = 0;
        int n_l1 = 0, n_disc = 0;

        for (size_t start = 0; start < samples.size(); start += static_cast<size_t>(cfg.batch_size)) {
            const size_t end = std::min(samples.size(), start + static_cast<size_t>(cfg.batch_size));
            const int B = static_cast<int>(end - start);
            const bool adv_on = step >= cfg.disc_warmup_steps;

            // Generator step; discriminator weights are frozen here.
            std::vector<SampleInputs> inputs;
            std::vector<NdArray> recons;
            Adam::zero_grad(gen_params);
            set_trainable(disc_params, false);
            for (size_t i = start; i < end; i++) {
                const CachedClip& clip = cache[static_cast<size_t>(samples[i].first)];
                SampleInputs in = build_inputs(clip, samples[i].second, mc, rng.next_u64());
                Graph g(true, rng.next_u64());
                std::vector<Tensor> refs;
                for (const NdArray& r : in.refs_chw) refs.push_back(g.input(r.shape(), r.data()));
                AppearanceModel::ForwardOut out =
                    model.forward(g, refs, g.input(in.nl_chw.shape(), in.nl_chw.data()),
                                  g.input(in.xm_chw.shape(), in.xm_chw.data()), /*sample_latent=*/true);
                Tensor l1 = l1_loss(out.recon, g.input(in.target_chw.shape(), in.target_chw.data()));
                Tensor kl = kl_divergence(g, out.mu, out.logvar);
                Tensor loss = add(l1, nn::scale(kl, mc.kl_weight));
                Tensor adv;
                if (adv_on) {
                    adv = generator_adv_loss(g, disc, out.recon);
                    loss = add(loss, nn::scale(adv, mc.disc_weight));
                }
                g.backward(nn::scale(loss, 1.0f / static_cast<float>(B)));
                g.accumulate_param_grads();
                e_l1 += l1.item();
                e_kl += kl.item();
                if (adv_on) e_adv += adv.item();
                n_l1++;
                recons.push_back(NdArray::from(out.recon.shape(), out.recon.node()->val));
                inputs.push_back(std::move(in));
            }
            set_trainable(disc_params, true);
            gen_opt.step(gen_params, cfg.lr);

            // Discriminator step on detached reconstructions.
            if (adv_on) {
                Adam::zero_grad(disc_params);
                set_trainable(gen_params, false);
                for (size_t i = 0; i < inputs.size(); i++) {
                    Graph g(true, rng.next_u64());
                    Tensor obj = disc_objective(g, disc,
                                                g.input(inputs[i].target_chw.shape(),
                                                        inputs[i].target_chw.data()),
                                                g.input(recons[i].shape(), recons[i].data()));
                    g.backward(nn::scale(obj, -1.0f / static_cast<float>(B)));
                    g.accumulate_param_grads();
                    e_disc += obj.item();
                    n_disc++;
                }
                set_trainable(gen_params, true);
                disc_opt.step(disc_params, cfg.disc_lr);
            }
            step++;
        }
        result.epoch_l1.push_back(static_cast<float>(e_l1 / std::max(1, n_l1)));
        result.epoch_kl.push_back(static_cast<float>(e_kl / std::max(1, n_l1)));
        result.epoch_adv.push_back(static_cast<float>(e_adv / std::max(1, n_l1)));
        result.epoch_disc.push_back(n_disc > 0 ? static_cast<float>(e_disc / n_disc) : 0.0f);
        if (cfg.verbose)
            std::printf("[appearance] epoch %3d  l1 %.5f  kl %.1f  adv %.4f  disc %.4f\n", epoch,
                        result.epoch_l1.back(), result.epoch_kl.back(), result.epoch_adv.back(),
                        result.epoch_disc.back());

        if (cfg.grid_every > 0 && !cfg.sample_dir.empty() &&
            (epoch % cfg.grid_every == 0 || epoch + 1 == cfg.epochs)) {
            std::filesystem::create_directories(cfg.sample_dir);
            const CachedClip& clip = cache[0];
            const int rows = std::min(4, clip.n_frames);
            const int S = mc.image_size;
            Frame grid({rows * S, 3 * S, 3});
            for (int r = 0; r < rows; r++) {
                const int t = r * (clip.n_frames - 1) / std::max(1, rows - 1);
                SampleInputs in = build_inputs(clip, t, mc, 17);
                std::vector<Frame> refs;
                for (const NdArray& rc : in.refs_chw) refs.push_back(frame_from_chw(rc));
                Frame recon = model.reconstruct(refs, frame_from_chw(in.nl_chw), frame_from_chw(in.xm_chw));
                const Frame target = frame_of(clip, t);
                const Frame raster = frame_from_chw(in.xm_chw);
                for (int y = 0; y < S; y++)
                    for (int x = 0; x < S; x++)
                        for (int ch = 0; ch < 3; ch++) {
                            grid.at(r * S + y, x, ch) = target.at(y, x, ch);
                            grid.at(r * S + y, S + x, ch) = raster.at(y, x, ch);
                            grid.at(r * S + y, 2 * S + x, ch) = recon.at(y, x, ch);
                        }
            }
            write_ppm(cfg.sample_dir / strf("epoch_%04d.ppm", epoch), grid);
        }
    }
    return result;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

VideoClip reconstruct_clip(const AppearanceModel& model, const VideoClip& clip,
                           const LandmarkSequence& landmarks, uint64_t ref_seed) {
    const AppearanceModelConfig& mc = model.config();
    LS_CHECK(clip.height() == mc.image_size, "reconstruct_clip: resolution mismatch");
    std::vector<Frame> refs = select_references(clip, landmarks, mc.effective_k_ref(), ref_seed,
                                                /*exclude_idx=*/0, mc.reference_mode);
    VideoClip out;
    out.fps = clip.fps;
    out.frames = NdArray({clip.n_frames(), mc.image_size, mc.image_size, 3});
    for (int t = 0; t < clip.n_frames(); t++) {
        RegionFrames regions = make_region_frames(clip.frame(t), landmarks.frame(t), landmarks.topology);
        Frame raster = rasterize_landmarks(landmarks.frame(t), mc.image_size);
        out.set_frame(t, model.reconstruct(refs, regions.x_nonlip, raster));
    }
    return out;
}

AppearanceEvalResult eval_appearance(const AppearanceModel& model, const synth::Dataset& dataset,
                                     const std::vector<int>& clip_indices, uint64_t seed,
                                     int max_frames_per_clip) {
    AppearanceEvalResult out;
    for (int ci : clip_indices) {
        synth::ClipData data = dataset.load_clip(ci, /*with_frames=*/true);
        VideoClip clip = data.clip;
        LandmarkSequence lms = data.landmarks;
        if (max_frames_per_clip > 0 && clip.n_frames() > max_frames_per_clip) {
            // Evenly strided subset keeps aperture variety.
            NdArray frames({max_frames_per_clip, clip.height(), clip.width(), 3});
            NdArray coords({max_frames_per_clip, lms.n_points(), 2});
            for (int k = 0; k < max_frames_per_clip; k++) {
                const int t = k * (clip.n_frames() - 1) / (max_frames_per_clip - 1);
                std::memcpy(frames.data() + static_cast<int64_t>(k) * clip.height() * clip.width() * 3,
                            clip.frames.data() + static_cast<int64_t>(t) * clip.height() * clip.width() * 3,
                            static_cast<size_t>(clip.height()) * clip.width() * 3 * sizeof(float));
                std::memcpy(coords.data() + static_cast<int64_t>(k) * lms.n_points() * 2,
                            lms.coords.data() + static_cast<int64_t>(t) * lms.n_points() * 2,
                            static_cast<size_t>(lms.n_points()) * 2 * sizeof(float));
            }
            clip.frames = std::move(frames);
            lms.coords = std::move(coords);
            lms.valid_len = max_frames_per_clip;
        }
        VideoClip recon = reconstruct_clip(model, clip, lms, seed + static_cast<uint64_t>(ci));

        double mse = 0, nl_l1 = 0;
        int64_t nl_count = 0;
        for (int t = 0; t < clip.n_frames(); t++) {
            MaskSpec mask = lip_mask_from_landmarks(lms.frame(t), lms.topology, clip.height());
            for (int r = 0; r < clip.height(); r++)
                for (int c = 0; c < clip.width(); c++) {
                    const bool in_mask = mask.mask.at(r, c) > 0.5f;
                    for (int ch = 0; ch < 3; ch++) {
                        const double d = static_cast<double>(recon.frames.at(t, r, c, ch)) -
                                         clip.frames.at(t, r, c, ch);
                        mse += d * d;
                        if (!in_mask) {
                            nl_l1 += std::fabs(d);
                            nl_count++;
                        }
                    }
                }
        }
        mse /= static_cast<double>(clip.frames.numel());
        out.psnr += mse <= 0 ? 99.0 : std::min(99.0, 10.0 * std::log10(1.0 / mse));
        out.nonlip_l1 += nl_l1 / static_cast<double>(nl_count);
        out.n_clips++;
    }
    if (out.n_clips > 0) {
        out.psnr /= out.n_clips;
        out.nonlip_l1 /= out.n_clips;
    }
    return out;
}

} // namespace lipsync::appearance
