#pragma once

#include "lipsync/core/types.hpp"
#include "lipsync/nn/layers.hpp"
#include "lipsync/nn/optim.hpp"
#include "lipsync/synth/synth.hpp"

#include <filesystem>

namespace lipsync::identity {

struct IdentityExtractorConfig {
    int mlp_layers = 3;
    int hidden_dim = 128;
    int embed_dim = 64;
    float margin = 0.5f;
    float scale = 30.0f;
    int n_classes = 30;
    int input_points = 48;  // landmarks per frame

    static IdentityExtractorConfig desk(int n_classes);
    static IdentityExtractorConfig paper(int n_classes);  // MLP layers 4, hidden 768

    std::string to_json() const;
    static IdentityExtractorConfig from_json(const std::string& text);
};

// MLP over one flattened landmark frame, ending in L2 normalization. The
// angular-margin class weights live alongside so training is self-contained;
// they are not used by embed().
class IdentityExtractor {
public:
    IdentityExtractor(const IdentityExtractorConfig& cfg, uint64_t seed);

    const IdentityExtractorConfig& config() const { return cfg_; }
    std::vector<nn::Param*> params();        // MLP + class weights
    std::vector<nn::Param*> embed_params();  // MLP only

    // Graph-building forward: [B, 2L] -> unit-norm [B, embed_dim].
    nn::Tensor embed_rows(nn::Graph& g, nn::Tensor flat_frames);

    // Convenience single-frame eval-mode embedding.
    IdentityEmbedding embed(const NdArray& landmarks_frame) const;
    // Batch eval-mode embedding: [B, L, 2] (or [B, 2L]) -> [B, embed_dim].
    NdArray embed_batch(const NdArray& frames) const;

    // L2-normalized class-weight tensor for the margin loss.
    nn::Tensor normalized_class_weights(nn::Graph& g);

    void save(const std::filesystem::path& dir, const std::string& extra_meta = "{}");
    static IdentityExtractor load(const std::filesystem::path& dir);

    void set_trainable(bool trainable);

private:
    IdentityExtractorConfig cfg_;
    std::vector<nn::Linear> layers_;
    nn::Param class_weights_;  // [n_classes, embed_dim]
};

// Additive angular margin loss over unit-norm embeddings and class weights:
// target logit scale*cos(theta_y + margin), others scale*cos(theta_j),
// cross-entropy over logits. Inputs must be unit-norm rows (validated).
nn::Tensor arcface_loss(nn::Graph& g, nn::Tensor embeddings, const std::vector<int>& labels,
                        nn::Tensor class_weights, float margin, float scale);

// Host-side convenience: value plus gradient w.r.t. embeddings (for tests).
struct ArcfaceResult {
    float loss = 0;
    NdArray grad_embeddings;
};
ArcfaceResult arcface_loss_value(const NdArray& embeddings, const std::vector<int>& labels,
                                 const NdArray& class_weights, float margin, float scale);

struct IdentityTrainResult {
    std::vector<float> epoch_loss;
    std::vector<float> epoch_verification;  // held-out same/different accuracy at EER threshold
    float final_verification = 0;
};

struct IdentityTrainConfig {
    int epochs = 30;
    int batch_size = 64;
    float lr = 1e-3f;
    uint64_t seed = 1;
    bool verbose = true;
};

IdentityTrainResult train_identity(IdentityExtractor& model, const synth::Dataset& dataset,
                                   const IdentityTrainConfig& cfg);

// Same/different verification accuracy at the equal-error-rate threshold over
// held-out clips.
float verification_accuracy(const IdentityExtractor& model, const synth::Dataset& dataset,
                            const std::vector<int>& clip_indices, int pairs, uint64_t seed);

} // namespace lipsync::identity
