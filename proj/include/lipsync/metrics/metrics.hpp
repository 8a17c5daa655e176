#pragma once

#include "lipsync/core/types.hpp"
#include "lipsync/core/video.hpp"
#include "lipsync/nn/layers.hpp"
#include "lipsync/synth/synth.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace lipsync::metrics {

// Pearson correlation. Returns NaN for zero-variance inputs.
double pearson(const std::vector<double>& a, const std::vector<double>& b);

// Peak signal-to-noise ratio for [0,1]-ranged images/clips, capped at 99 dB.
double psnr(const NdArray& a, const NdArray& b);

// Structural similarity with a Gaussian window (sigma 1.5), computed over
// the valid region, averaged across channels. Inputs are [H,W,3] frames.
double ssim(const NdArray& a, const NdArray& b, int window = 11);

// ---------------------------------------------------------------------------
// Lip-sync proxy: correlation of lip aperture with the speech-energy track.
// ---------------------------------------------------------------------------

struct SyncResult {
    double r = 0;
    bool defined = true;  // false when the aperture has zero variance
};

SyncResult sync_corr_landmarks(const LandmarkSequence& seq, const NdArray& energy);

// Clip variant: aperture is the vertical extent of dark (mouth-interior)
// pixel rows inside the per-frame lip mask.
SyncResult sync_corr_clip(const VideoClip& clip, const LandmarkSequence& mask_landmarks,
                          const NdArray& energy, float dark_threshold = 0.35f);

// ---------------------------------------------------------------------------
// Image-space identity probe (stand-in for a pretrained face network).
// ---------------------------------------------------------------------------

struct IdentityProbeConfig {
    int widths[3] = {16, 32, 64};
    int n_classes = 30;
    int image_size = 64;
};

class IdentityProbe {
public:
    IdentityProbe(const IdentityProbeConfig& cfg, uint64_t seed);

    const IdentityProbeConfig& config() const { return cfg_; }
    float holdout_accuracy() const { return holdout_accuracy_; }
    std::vector<nn::Param*> params();

    nn::Tensor features(nn::Graph& g, nn::Tensor chw);  // penultimate [widths[2]]
    nn::Tensor logits(nn::Graph& g, nn::Tensor chw);

    NdArray feature_of(const Frame& frame) const;  // eval-mode [widths[2]]
    int classify(const Frame& frame) const;

    void save(const std::filesystem::path& dir);
    static IdentityProbe load(const std::filesystem::path& dir);

    friend IdentityProbe train_identity_probe(const synth::Dataset&, const IdentityProbeConfig&, int,
                                              uint64_t, bool);

private:
    IdentityProbeConfig cfg_;
    nn::Conv2d c1_, c2_, c3_;
    nn::Linear head_;
    float holdout_accuracy_ = 0;
};

IdentityProbe train_identity_probe(const synth::Dataset& dataset, const IdentityProbeConfig& cfg,
                                   int epochs = 4, uint64_t seed = 1, bool verbose = true);

// Mean per-frame cosine similarity of probe features. The probe must carry a
// held-out accuracy >= 0.95 from training.
double id_sim(const VideoClip& generated, const VideoClip& reference, const IdentityProbe& probe);

// ---------------------------------------------------------------------------
// Aggregate evaluation report
// ---------------------------------------------------------------------------

struct ClipEval {
    std::string name;
    double psnr = 0, ssim = 0, id_sim = 0, sync_corr = 0;
    bool sync_defined = true;
};

struct EvalReport {
    double psnr = 0, ssim = 0, id_sim = 0, sync_corr = 0;
    int n_clips = 0;
    std::vector<ClipEval> per_clip;
    std::string header;  // provenance note (metric substitutions)

    std::string to_json() const;
    std::string to_text() const;
    void save(const std::filesystem::path& json_file) const;
};

EvalReport aggregate(std::vector<ClipEval> per_clip, const std::string& header);

} // namespace lipsync::metrics
