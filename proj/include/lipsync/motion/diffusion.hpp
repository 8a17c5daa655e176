#pragma once

#include "lipsync/core/schedule.hpp"
#include "lipsync/core/types.hpp"
#include "lipsync/identity/identity_extractor.hpp"
#include "lipsync/motion/motion_model.hpp"
#include "lipsync/synth/synth.hpp"

#include <functional>

namespace lipsync::motion {

// Closed-form jump to step t: m_t = sqrt(abar_t) m_0 + sqrt(1-abar_t) eps.
// t = -1 means "before any noise" (abar = 1, identity).
NdArray forward_noise(const NdArray& m0_lower, int t, const DiffusionSchedule& schedule,
                      const NdArray& noise);

// One single noising step: m_t = sqrt(alpha_t) m_{t-1} + sqrt(1-alpha_t) eps.
NdArray forward_noise_step(const NdArray& m_prev, int t, const DiffusionSchedule& schedule,
                           const NdArray& noise);

// ---------------------------------------------------------------------------
// Training loss (Eq.-style: reconstruction + identity-embedding cosine term)
// ---------------------------------------------------------------------------

struct DmLossResult {
    float total = 0, mse = 0, id = 0;
    NdArray grad_m0hat;  // d total / d m0_hat coords, same shape as input coords
};

// Host evaluation over full landmark sequences. The identity term embeds
// every frame of m0_hat and compares against the embedding of the reference
// frame of m0 (mean of 1 - cosine). Gradient flows through the frozen
// extractor into m0_hat.
DmLossResult dm_loss(const LandmarkSequence& m0_hat, const LandmarkSequence& m0,
                     const identity::IdentityExtractor& extractor, int reference_frame_idx,
                     float id_weight = 1.0f, float mse_weight = 1.0f);

// Graph-building form used by the trainer: m0hat_lower is [N, lower_dim];
// the remaining coordinates are completed from gt.
struct DmLossTensors {
    nn::Tensor total, mse, id;
};
DmLossTensors dm_loss_graph(nn::Graph& g, nn::Tensor m0hat_lower, const LandmarkSequence& gt, int gt_begin,
                            int n_frames, const identity::IdentityExtractor& extractor,
                            int reference_frame_idx, float id_weight, const LandmarkTopology& topo);

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

// x0-parameterized ancestral sampler. denoise_to_x0(m_t, t) must return the
// predicted clean lower-face compact coordinates. Upper-face and remaining
// coordinates are copied bit-exactly from `source`.
using DenoiseFn = std::function<NdArray(const NdArray& m_t_lower, int t)>;

LandmarkSequence sample_motion_with(const DenoiseFn& denoise_to_x0, const LandmarkSequence& source,
                                    const DiffusionSchedule& schedule, uint64_t seed);

// Full model-backed sampling; cond_vec is the identity embedding (default
// mode) or the flattened key-landmark frame (ablation modes).
LandmarkSequence sample_motion(const MotionModel& model, const SpeechFeature& speech,
                               const LandmarkSequence& source, const NdArray& cond_vec,
                               const DiffusionSchedule& schedule, uint64_t seed);

// Builds the conditioning vector for the model's mode from the source clip.
NdArray make_cond_vec(const MotionModel& model, const identity::IdentityExtractor& extractor,
                      const LandmarkSequence& source, int reference_frame_idx = 0);

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct MotionTrainConfig {
    int epochs = 200;
    int window = 64;       // frames per training window
    int batch_clips = 4;   // clips per optimizer step
    float base_lr = 8e-4f;
    int warmup_steps = 60;
    float id_weight = 1.0f;
    float grad_clip = 1.0f;
    uint64_t seed = 1;
    bool verbose = true;
    int log_every = 20;
};

struct MotionTrainResult {
    std::vector<float> epoch_total, epoch_mse, epoch_id;
};

MotionTrainResult train_motion(MotionModel& model, const synth::Dataset& dataset,
                               const identity::IdentityExtractor& extractor,
                               const DiffusionSchedule& schedule, const MotionTrainConfig& cfg);

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct MotionEvalResult {
    double sync_corr = 0;  // mean Pearson r of sampled aperture vs speech energy
    double id_sim = 0;     // mean cosine of generated-frame embeddings vs reference
    int n_clips = 0;
    std::vector<double> per_clip_sync;
    std::vector<double> per_clip_id;
};

MotionEvalResult eval_motion(const MotionModel& model, const synth::Dataset& dataset,
                             const std::vector<int>& clip_indices,
                             const identity::IdentityExtractor& extractor,
                             const DiffusionSchedule& schedule, uint64_t seed);

} // namespace lipsync::motion
