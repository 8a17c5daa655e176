#include "lipsync/core/types.hpp"

#include <cmath>
#include <cstring>

namespace lipsync {

float normalize_coord(float pixel, int image_size) {
    LS_CHECK(image_size > 0, "normalize_coords: image_size must be positive");
    LS_CHECK(pixel >= 0.0f && pixel <= static_cast<float>(image_size),
             "normalize_coords: pixel %g outside [0,%d]", pixel, image_size);
    return 2.0f * pixel / static_cast<float>(image_size) - 1.0f;
}

float denormalize_coord(float normalized, int image_size) {
    return (normalized + 1.0f) * 0.5f * static_cast<float>(image_size);
}

NdArray normalize_coords(const NdArray& pixel_coords, int image_size) {
    NdArray out(pixel_coords.shape());
    for (int64_t i = 0; i < pixel_coords.numel(); i++)
        out[i] = normalize_coord(pixel_coords[i], image_size);
    return out;
}

NdArray denormalize_coords(const NdArray& normalized, int image_size) {
    NdArray out(normalized.shape());
    for (int64_t i = 0; i < normalized.numel(); i++)
        out[i] = denormalize_coord(normalized[i], image_size);
    return out;
}

void LandmarkSequence::validate(int max_seq_len) const {
    LS_CHECK(coords.rank() == 3 && coords.dim(2) == 2, "LandmarkSequence: coords must be [N,L,2], got %s",
             shape_str(coords.shape()).c_str());
    LS_CHECK(coords.dim(1) == topology.total_points, "LandmarkSequence: %d points vs topology %d",
             coords.dim(1), topology.total_points);
    LS_CHECK(coords.dim(0) <= max_seq_len, "LandmarkSequence: %d frames exceeds max_seq_len %d",
             coords.dim(0), max_seq_len);
    LS_CHECK(valid_len >= 1 && valid_len <= coords.dim(0), "LandmarkSequence: bad valid_len %d", valid_len);
    LS_CHECK(coords.all_finite(), "LandmarkSequence: non-finite coordinate");
    // Padding frames are exact copies of the last valid frame.
    const int L2 = coords.dim(1) * 2;
    for (int t = valid_len; t < coords.dim(0); t++)
        LS_CHECK(std::memcmp(coords.data() + static_cast<int64_t>(t) * L2,
                             coords.data() + static_cast<int64_t>(valid_len - 1) * L2,
                             static_cast<size_t>(L2) * sizeof(float)) == 0,
                 "LandmarkSequence: padding frame %d is not a copy of frame %d", t, valid_len - 1);
}

NdArray LandmarkSequence::frame(int t) const {
    LS_CHECK(t >= 0 && t < n_frames(), "frame index %d out of range [0,%d)", t, n_frames());
    const int L = n_points();
    NdArray out({L, 2});
    std::memcpy(out.data(), coords.data() + static_cast<int64_t>(t) * L * 2,
                static_cast<size_t>(L) * 2 * sizeof(float));
    return out;
}

LandmarkSequence LandmarkSequence::padded(int target_len) const {
    LS_CHECK(target_len >= n_frames(), "padded: target %d < current %d frames", target_len, n_frames());
    LandmarkSequence out;
    out.topology = topology;
    out.valid_len = valid_len;
    const int L = n_points();
    out.coords = NdArray({target_len, L, 2});
    std::memcpy(out.coords.data(), coords.data(), static_cast<size_t>(coords.numel()) * sizeof(float));
    for (int t = n_frames(); t < target_len; t++)
        std::memcpy(out.coords.data() + static_cast<int64_t>(t) * L * 2,
                    coords.data() + static_cast<int64_t>(n_frames() - 1) * L * 2,
                    static_cast<size_t>(L) * 2 * sizeof(float));
    return out;
}

NdArray LandmarkSequence::gather_points(const std::vector<int>& idx) const {
    const int N = n_frames(), L = n_points(), M = static_cast<int>(idx.size());
    NdArray out({N, M, 2});
    for (int t = 0; t < N; t++)
        for (int p = 0; p < M; p++) {
            LS_CHECK(idx[static_cast<size_t>(p)] >= 0 && idx[static_cast<size_t>(p)] < L,
                     "gather_points: index %d out of range", idx[static_cast<size_t>(p)]);
            out.at(t, p, 0) = coords.at(t, idx[static_cast<size_t>(p)], 0);
            out.at(t, p, 1) = coords.at(t, idx[static_cast<size_t>(p)], 1);
        }
    return out;
}

void LandmarkSequence::scatter_points(const std::vector<int>& idx, const NdArray& values) {
    LS_CHECK(values.rank() == 3 && values.dim(0) == n_frames() &&
                 values.dim(1) == static_cast<int>(idx.size()) && values.dim(2) == 2,
             "scatter_points: values shape %s", shape_str(values.shape()).c_str());
    for (int t = 0; t < n_frames(); t++)
        for (size_t p = 0; p < idx.size(); p++) {
            coords.at(t, idx[p], 0) = values.at(t, static_cast<int>(p), 0);
            coords.at(t, idx[p], 1) = values.at(t, static_cast<int>(p), 1);
        }
}

std::pair<NdArray, NdArray> split_landmarks(const LandmarkSequence& seq) {
    LS_CHECK(!seq.topology.compact_idx.empty() && !seq.topology.remaining_idx.empty(),
             "split_landmarks: topology lacks compact/remaining partition");
    return {seq.gather_points(seq.topology.compact_idx), seq.gather_points(seq.topology.remaining_idx)};
}

LandmarkSequence merge_landmarks(const NdArray& compact, const NdArray& remaining,
                                 const LandmarkTopology& topology) {
    LS_CHECK(compact.rank() == 3 && remaining.rank() == 3 && compact.dim(0) == remaining.dim(0),
             "merge_landmarks: frame count mismatch");
    LS_CHECK(compact.dim(1) == static_cast<int>(topology.compact_idx.size()),
             "merge_landmarks: compact has %d points, topology expects %zu", compact.dim(1),
             topology.compact_idx.size());
    LS_CHECK(remaining.dim(1) == static_cast<int>(topology.remaining_idx.size()),
             "merge_landmarks: remaining has %d points, topology expects %zu", remaining.dim(1),
             topology.remaining_idx.size());
    LandmarkSequence out;
    out.topology = topology;
    out.valid_len = compact.dim(0);
    out.coords = NdArray({compact.dim(0), topology.total_points, 2});
    out.scatter_points(topology.compact_idx, compact);
    out.scatter_points(topology.remaining_idx, remaining);
    return out;
}

void SpeechFeature::validate() const {
    LS_CHECK(feats.rank() == 2, "SpeechFeature: feats must be [N,D], got %s", shape_str(feats.shape()).c_str());
    LS_CHECK(feats.all_finite(), "SpeechFeature: non-finite value");
}

void IdentityEmbedding::validate() const {
    LS_CHECK(vec.rank() == 1, "IdentityEmbedding: vec must be [D]");
    double s = 0;
    for (int64_t i = 0; i < vec.numel(); i++) s += static_cast<double>(vec[i]) * vec[i];
    double n = std::sqrt(s);
    LS_CHECK(std::abs(n - 1.0) <= 1e-5, "IdentityEmbedding: ||vec|| = %.8f, expected 1 +- 1e-5", n);
}

} // namespace lipsync
