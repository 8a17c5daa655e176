#pragma once

#include "lipsync/core/types.hpp"
#include "lipsync/core/video.hpp"
#include "lipsync/nn/rng.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace lipsync::synth {

constexpr int kSpeechDim = 16;
constexpr int kShapeDim = 8;
constexpr float kDefaultFps = 25.0f;

// Procedural identity. shape_vec components, all in [0,1]:
//   0 face_width, 1 face_length, 2 jaw_drop (aperture gain), 3 lip_thickness,
//   4 eye_spacing, 5 eye_size, 6 mouth_width, 7 interior_brightness
// (7 affects rendering only: the mouth interior shade, visible when open).
struct IdentityParams {
    NdArray shape_vec;     // [kShapeDim]
    float skin[3];
    float lip[3];
    float eye[3];
    int id_label = 0;

    float shape(int i) const { return shape_vec[i]; }
};

// Scalar lip-drive signal plus its feature embedding at 2x video rate.
struct SpeechTrack {
    NdArray energy;        // [N], values in [0,1], video frame rate
    SpeechFeature feats;   // [2N, kSpeechDim]

    int n_frames() const { return energy.empty() ? 0 : energy.dim(0); }
};

IdentityParams sample_identity(uint64_t seed, int id_label);
SpeechTrack synth_speech(int n_frames, uint64_t seed);

// Deterministic embedding of the local energy triple (prev, cur, next) at 2x
// rate; exposed so tests can check the SpeechTrack invariant directly.
void speech_embed_row(float prev, float cur, float next, float* out16);

// Aperture model: vertical lip-hull extent equals a(id) + b(id)*energy[t].
float aperture_offset(const IdentityParams& id);  // a(id) > 0
float aperture_gain(const IdentityParams& id);    // b(id) > 0

LandmarkSequence landmarks_from(const IdentityParams& id, const SpeechTrack& speech,
                                const LandmarkTopology& topology);

Frame render_frame(const NdArray& landmarks_frame, const IdentityParams& id, int size);
VideoClip render_clip(const LandmarkSequence& seq, const IdentityParams& id, int size);

// Vertical extent of the lip hull per frame; the sync oracle signal.
std::vector<double> lip_aperture_series(const LandmarkSequence& seq);

// ---------------------------------------------------------------------------
// Dataset on disk
// ---------------------------------------------------------------------------

struct DatasetParams {
    int n_ids = 30;
    int clips_per_id = 2;
    int frames_per_clip = 100;
    uint64_t seed = 7;
    int image_size = 64;
    std::string topology = "desk-48";
};

struct ClipRecord {
    std::string name;
    int id_label = 0;
    int n_frames = 0;
    std::filesystem::path dir;  // relative to dataset root
};

struct ClipData {
    std::string name;
    int id_label = 0;
    LandmarkSequence landmarks;
    SpeechTrack speech;
    VideoClip clip;  // empty when loaded without frames
};

class Dataset {
public:
    static Dataset open(const std::filesystem::path& root);

    const std::filesystem::path& root() const { return root_; }
    const DatasetParams& params() const { return params_; }
    const LandmarkTopology& topology() const { return topology_; }
    int n_clips() const { return static_cast<int>(clips_.size()); }
    const ClipRecord& record(int i) const { return clips_.at(static_cast<size_t>(i)); }

    ClipData load_clip(int i, bool with_frames = true) const;
    IdentityParams identity_of(int clip_index) const;

    // Last clip of each identity is held out; the rest train. With a single
    // clip per identity everything trains and the holdout list is empty.
    std::vector<int> train_indices() const;
    std::vector<int> holdout_indices() const;

    // Re-hashes every file against the manifest. Returns first mismatch path
    // or empty string.
    std::string verify_checksums() const;

private:
    std::filesystem::path root_;
    DatasetParams params_;
    LandmarkTopology topology_;
    std::vector<ClipRecord> clips_;
};

// Generates the corpus and writes manifest.json; returns the opened dataset.
Dataset make_dataset(const DatasetParams& params, const std::filesystem::path& out_dir);

} // namespace lipsync::synth
