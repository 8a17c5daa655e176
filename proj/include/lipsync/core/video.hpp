#pragma once

#include "lipsync/core/ndarray.hpp"
#include "lipsync/core/topology.hpp"

#include <filesystem>

namespace lipsync {

// A Frame is an NdArray [H, W, 3] with values in [0,1].
using Frame = NdArray;

struct VideoClip {
    NdArray frames;  // [N, H, W, 3]
    float fps = 25.0f;

    int n_frames() const { return frames.empty() ? 0 : frames.dim(0); }
    int height() const { return frames.empty() ? 0 : frames.dim(1); }
    int width() const { return frames.empty() ? 0 : frames.dim(2); }
    void validate() const;

    Frame frame(int t) const;
    void set_frame(int t, const Frame& f);
};

// Binary lip-region mask: the filled, dilated bounding region of the
// lip-hull landmark projections.
struct MaskSpec {
    NdArray mask;          // [H, W], values 0 or 1
    int dilation_px = 0;   // provenance: margin applied around the hull bbox

    int height() const { return mask.empty() ? 0 : mask.dim(0); }
    int width() const { return mask.empty() ? 0 : mask.dim(1); }
    int64_t area() const;
    void validate() const;  // 0 < area < H*W, binary values
};

// Derives the mask from one landmark frame [L,2] (normalized coords).
// margin_frac is the dilation margin as a fraction of image size.
MaskSpec lip_mask_from_landmarks(const NdArray& landmarks_frame, const LandmarkTopology& topology,
                                 int image_size, float margin_frac = 0.10f);

// Binary PPM (P6) image io for frames in [0,1].
void write_ppm(const std::filesystem::path& file, const Frame& frame);
Frame read_ppm(const std::filesystem::path& file);

// Layout conversion between [H,W,3] frames and [3,H,W] tensors.
NdArray chw_from_frame(const Frame& frame);
Frame frame_from_chw(const NdArray& chw);

} // namespace lipsync
