#pragma once

#include "lipsync/core/types.hpp"
#include "lipsync/core/video.hpp"
#include "lipsync/nn/layers.hpp"
#include "lipsync/nn/optim.hpp"
#include "lipsync/synth/synth.hpp"

#include <filesystem>

namespace lipsync::appearance {

enum class ReferenceMode { kMultiMasked, kSingleMasked, kSingleFull };
const char* reference_mode_name(ReferenceMode m);
ReferenceMode reference_mode_from_name(const std::string& s);

struct AppearanceModelConfig {
    int hidden_dim = 64;  // latent channels; encoder widths ramp h/4 -> h/2 -> h
    int resblocks_encoder = 4;
    int resblocks_decoder = 4;
    int resblocks_fusion = 2;
    int conv_kernel = 3;
    int downsamples = 2;
    float kl_weight = 1e-6f;
    float disc_weight = 0.5f;
    int k_ref = 3;
    ReferenceMode reference_mode = ReferenceMode::kMultiMasked;
    int image_size = 64;

    int effective_k_ref() const { return reference_mode == ReferenceMode::kMultiMasked ? k_ref : 1; }
    int latent_size() const { return image_size >> downsamples; }

    static AppearanceModelConfig desk();
    static AppearanceModelConfig paper();  // hidden 256, 8/8/4 blocks, 256x256

    std::string to_json() const;
    static AppearanceModelConfig from_json(const std::string& text);
};

// ---------------------------------------------------------------------------
// Region / raster ops
// ---------------------------------------------------------------------------

// Point-splat rasterization of one landmark frame: anti-aliased 2-pixel
// discs on black, single channel replicated to 3.
Frame rasterize_landmarks(const NdArray& landmarks_frame, int size);

struct RegionFrames {
    Frame x_lip;     // frame * mask
    Frame x_nonlip;  // frame * (1 - mask)
    MaskSpec mask;
};
RegionFrames make_region_frames(const Frame& frame, const NdArray& landmarks_frame,
                                const LandmarkTopology& topology);

// k distinct reference frame indices, excluding exclude_idx, seeded.
std::vector<int> select_reference_indices(int clip_len, int k, uint64_t seed, int exclude_idx);
// Lip-masked (or full, per mode) reference frames from a clip.
std::vector<Frame> select_references(const VideoClip& clip, const LandmarkSequence& landmarks, int k,
                                     uint64_t seed, int exclude_idx,
                                     ReferenceMode mode = ReferenceMode::kMultiMasked);

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

struct ResBlock {
    nn::GroupNorm gn1, gn2;
    nn::Conv2d conv1, conv2;

    ResBlock() = default;
    ResBlock(const std::string& name, int channels, int kernel, nn::Rng& rng);
    nn::Tensor forward(nn::Graph& g, nn::Tensor x);
    void collect(std::vector<nn::Param*>& out);
};

// Shared encoder architecture (separate weights per role): conv stem, then
// resblock/downsample ladder to [hidden, S/4, S/4].
struct Encoder {
    nn::Conv2d conv_in;
    std::vector<ResBlock> rb0, rb1, rb2;
    nn::Conv2d down1, down2;

    Encoder() = default;
    Encoder(const std::string& name, const AppearanceModelConfig& cfg, nn::Rng& rng);
    nn::Tensor forward(nn::Graph& g, nn::Tensor chw);
    void collect(std::vector<nn::Param*>& out);
};

struct FusionNet {
    nn::Conv2d fuse_in;  // 1x1 (k*h + h) -> h
    std::vector<ResBlock> rbs;
    nn::GroupNorm gn_out;
    nn::Conv2d to_moments;  // 1x1 h -> 2h (mu, logvar)

    FusionNet() = default;
    FusionNet(const std::string& name, const AppearanceModelConfig& cfg, nn::Rng& rng);
    void collect(std::vector<nn::Param*>& out);
};

struct Decoder {
    nn::Conv2d conv_in;  // 2h -> h after the quant convs
    std::vector<ResBlock> rb2, rb1, rb0;
    nn::Conv2d up1, up2;  // after nearest upsampling
    nn::GroupNorm gn_out;
    nn::Conv2d conv_out;

    Decoder() = default;
    Decoder(const std::string& name, const AppearanceModelConfig& cfg, nn::Rng& rng);
    nn::Tensor forward(nn::Graph& g, nn::Tensor x);
    void collect(std::vector<nn::Param*>& out);
};

class AppearanceModel {
public:
    AppearanceModel(const AppearanceModelConfig& cfg, uint64_t seed);

    const AppearanceModelConfig& config() const { return cfg_; }
    std::vector<nn::Param*> params();

    nn::Tensor encode_lip(nn::Graph& g, const std::vector<nn::Tensor>& refs_chw);  // [k*h, s, s]
    nn::Tensor encode_nonlip(nn::Graph& g, nn::Tensor chw);                        // [h, s, s]
    nn::Tensor encode_motion(nn::Graph& g, nn::Tensor chw);                        // [h, s, s]

    struct Moments {
        nn::Tensor mu, logvar;
    };
    Moments fuse(nn::Graph& g, nn::Tensor z_lip, nn::Tensor z_nonlip);
    nn::Tensor decode(nn::Graph& g, nn::Tensor z_appear, nn::Tensor z_motion);  // [3,S,S] in [0,1]

    struct ForwardOut {
        nn::Tensor recon, mu, logvar;
    };
    // sample_latent: reparameterize (training); otherwise use the mean.
    ForwardOut forward(nn::Graph& g, const std::vector<nn::Tensor>& refs, nn::Tensor x_nl, nn::Tensor x_m,
                       bool sample_latent);

    // Eval-mode reconstruction of one frame from host-side data.
    Frame reconstruct(const std::vector<Frame>& refs, const Frame& x_nl, const Frame& x_m) const;

    void save(const std::filesystem::path& dir, const std::string& extra_meta = "{}");
    static AppearanceModel load(const std::filesystem::path& dir);

private:
    AppearanceModelConfig cfg_;
    Encoder enc_lip_, enc_nonlip_, enc_motion_;
    FusionNet fusion_;
    nn::Conv2d landmark_quant_;         // 1x1 h -> h on the motion latent
    nn::Conv2d appear_landmark_quant_;  // 1x1 h -> h on the sampled appearance latent
    nn::Conv2d post_quant_;             // 1x1 2h -> 2h on the concatenated latents
    Decoder dec_;
};

struct Discriminator {
    nn::Conv2d c1, c2, c3, c4;  // patch logits

    Discriminator() = default;
    Discriminator(int image_size, uint64_t seed);
    nn::Tensor logits(nn::Graph& g, nn::Tensor chw);  // [1, s, s]
    std::vector<nn::Param*> params();
    void save(const std::filesystem::path& dir);
    static Discriminator load(const std::filesystem::path& dir);
};

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

// Eq.-8 style objective value: mean_patches[log D(x) + log(1 - D(x_hat))].
// D outputs are clamped to [1e-7, 1-1e-7]. The discriminator maximizes this
// (its training step minimizes the negation); the generator minimizes
// -mean log D(x_hat).
nn::Tensor disc_objective(nn::Graph& g, Discriminator& disc, nn::Tensor real_chw, nn::Tensor fake_chw);
nn::Tensor generator_adv_loss(nn::Graph& g, Discriminator& disc, nn::Tensor fake_chw);

struct DiscLossResult {
    float value = 0;
    NdArray grad_fake;  // d value / d fake pixels
};
DiscLossResult disc_loss(const Frame& real, const Frame& fake, const Discriminator& disc);

// Closed-form Gaussian KL against N(0, I): 0.5 * sum(mu^2 + sigma^2 - 1 - log sigma^2).
nn::Tensor kl_divergence(nn::Graph& g, nn::Tensor mu, nn::Tensor logvar);
double kl_divergence_value(const NdArray& mu, const NdArray& logvar);

struct VaeLossParts {
    float total = 0, l1 = 0, kl = 0, adv = 0;
};
// Single-frame objective breakdown (eval-mode latent sampling disabled).
VaeLossParts vae_loss(const std::vector<Frame>& refs, const Frame& x_nl, const Frame& x_m,
                      const Frame& target, const AppearanceModel& model, const Discriminator& disc,
                      bool with_adv);

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct AppearanceTrainConfig {
    int epochs = 20;
    int frames_per_clip_epoch = 4;
    int batch_size = 4;
    float lr = 1e-3f;
    float disc_lr = 5e-4f;
    int disc_warmup_steps = 300;
    uint64_t seed = 1;
    bool verbose = true;
    int grid_every = 5;                 // sample-grid cadence in epochs; 0 disables
    std::filesystem::path sample_dir;   // where grids go (empty disables)
};

struct AppearanceTrainResult {
    std::vector<float> epoch_l1, epoch_kl, epoch_adv, epoch_disc;
};

AppearanceTrainResult train_appearance(AppearanceModel& model, Discriminator& disc,
                                       const synth::Dataset& dataset, const AppearanceTrainConfig& cfg);

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

// Reconstructs a clip with ground-truth landmarks (references fixed per clip,
// excluding the z_id reference frame 0).
VideoClip reconstruct_clip(const AppearanceModel& model, const VideoClip& clip,
                           const LandmarkSequence& landmarks, uint64_t ref_seed);

struct AppearanceEvalResult {
    double psnr = 0;
    double nonlip_l1 = 0;
    int n_clips = 0;
};
AppearanceEvalResult eval_appearance(const AppearanceModel& model, const synth::Dataset& dataset,
                                     const std::vector<int>& clip_indices, uint64_t seed,
                                     int max_frames_per_clip = 0);

} // namespace lipsync::appearance
