#pragma once

#include "lipsync/core/ndarray.hpp"
#include "lipsync/core/topology.hpp"

namespace lipsync {

constexpr int kDefaultMaxSeqLen = 250;

// Normalized-coordinate convention: the affine map [0,S] -> [-1,1] with
// y pointing down, invertible by denormalize_coord.
float normalize_coord(float pixel, int image_size);
float denormalize_coord(float normalized, int image_size);
NdArray normalize_coords(const NdArray& pixel_coords, int image_size);
NdArray denormalize_coords(const NdArray& normalized, int image_size);

// Landmark motion sequence: coords [N, L, 2] in [-1,1], plus the topology it
// was sampled under and the pre-padding length.
struct LandmarkSequence {
    NdArray coords;             // [N, L, 2]
    LandmarkTopology topology;
    int valid_len = 0;

    int n_frames() const { return coords.empty() ? 0 : coords.dim(0); }
    int n_points() const { return coords.empty() ? 0 : coords.dim(1); }

    void validate(int max_seq_len = kDefaultMaxSeqLen) const;

    // [L,2] view of one frame (copy).
    NdArray frame(int t) const;

    // Pads to target_len by repeating the last valid frame; valid_len keeps
    // the original length.
    LandmarkSequence padded(int target_len) const;

    // Gathers the given point indices into [N, |idx|, 2].
    NdArray gather_points(const std::vector<int>& idx) const;
    // Writes [N, |idx|, 2] values back into the given point slots.
    void scatter_points(const std::vector<int>& idx, const NdArray& values);
};

// Splits into (compact [N,|compact|,2], remaining [N,|remaining|,2]).
std::pair<NdArray, NdArray> split_landmarks(const LandmarkSequence& seq);
// Exact inverse of split_landmarks.
LandmarkSequence merge_landmarks(const NdArray& compact, const NdArray& remaining,
                                 const LandmarkTopology& topology);

// Per-frame speech conditioning features.
struct SpeechFeature {
    NdArray feats;  // [N_rows, D_s]
    int n_rows() const { return feats.empty() ? 0 : feats.dim(0); }
    int dim() const { return feats.empty() ? 0 : feats.dim(1); }
    void validate() const;
};

// Unit-norm identity embedding.
struct IdentityEmbedding {
    NdArray vec;  // [D_id]
    int dim() const { return vec.empty() ? 0 : vec.dim(0); }
    void validate() const;  // checks ||vec|| == 1 +- 1e-5
};

} // namespace lipsync
