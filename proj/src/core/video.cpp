#include "lipsync/core/video.hpp"
#include "lipsync/core/types.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

namespace lipsync {

void VideoClip::validate() const {
    LS_CHECK(frames.rank() == 4 && frames.dim(3) == 3, "VideoClip: frames must be [N,H,W,3], got %s",
             shape_str(frames.shape()).c_str());
    LS_CHECK(frames.dim(1) == frames.dim(2), "VideoClip: H=%d != W=%d", frames.dim(1), frames.dim(2));
    LS_CHECK(fps > 0, "VideoClip: fps must be positive");
    for (int64_t i = 0; i < frames.numel(); i++)
        LS_CHECK(frames[i] >= 0.0f && frames[i] <= 1.0f, "VideoClip: pixel value %g outside [0,1]", frames[i]);
}

Frame VideoClip::frame(int t) const {
    LS_CHECK(t >= 0 && t < n_frames(), "VideoClip::frame: index %d of %d", t, n_frames());
    const int64_t stride = static_cast<int64_t>(height()) * width() * 3;
    Frame f({height(), width(), 3});
    std::memcpy(f.data(), frames.data() + t * stride, static_cast<size_t>(stride) * sizeof(float));
    return f;
}

void VideoClip::set_frame(int t, const Frame& f) {
    LS_CHECK(t >= 0 && t < n_frames(), "VideoClip::set_frame: index %d of %d", t, n_frames());
    const int64_t stride = static_cast<int64_t>(height()) * width() * 3;
    LS_CHECK(f.numel() == stride, "VideoClip::set_frame: frame size mismatch");
    std::memcpy(frames.data() + t * stride, f.data(), static_cast<size_t>(stride) * sizeof(float));
}

int64_t MaskSpec::area() const {
    int64_t a = 0;
    for (int64_t i = 0; i < mask.numel(); i++) a += mask[i] > 0.5f ? 1 : 0;
    return a;
}

void MaskSpec::validate() const {
    LS_CHECK(mask.rank() == 2, "MaskSpec: mask must be [H,W]");
    for (int64_t i = 0; i < mask.numel(); i++)
        LS_CHECK(mask[i] == 0.0f || mask[i] == 1.0f, "MaskSpec: non-binary value %g", mask[i]);
    const int64_t a = area();
    LS_CHECK(a > 0 && a < mask.numel(), "MaskSpec: degenerate mask area %lld of %lld",
             static_cast<long long>(a), static_cast<long long>(mask.numel()));
}

MaskSpec lip_mask_from_landmarks(const NdArray& landmarks_frame, const LandmarkTopology& topology,
                                 int image_size, float margin_frac) {
    LS_CHECK(landmarks_frame.rank() == 2 && landmarks_frame.dim(1) == 2,
             "lip_mask_from_landmarks: expected [L,2]");
    LS_CHECK(!topology.lip_hull_idx.empty(), "lip_mask_from_landmarks: topology has empty lip hull");
    LS_CHECK(image_size >= 4, "lip_mask_from_landmarks: image_size too small");

    float x0 = 1e9f, x1 = -1e9f, y0 = 1e9f, y1 = -1e9f;
    for (int idx : topology.lip_hull_idx) {
        LS_CHECK(idx >= 0 && idx < landmarks_frame.dim(0), "lip hull index %d out of range", idx);
        const float px = denormalize_coord(landmarks_frame.at(idx, 0), image_size);
        const float py = denormalize_coord(landmarks_frame.at(idx, 1), image_size);
        x0 = std::min(x0, px);
        x1 = std::max(x1, px);
        y0 = std::min(y0, py);
        y1 = std::max(y1, py);
    }
    const int margin = std::max(1, static_cast<int>(std::lround(margin_frac * image_size)));
    int c0 = std::clamp(static_cast<int>(std::floor(x0)) - margin, 0, image_size - 1);
    int c1 = std::clamp(static_cast<int>(std::ceil(x1)) + margin, 0, image_size - 1);
    int r0 = std::clamp(static_cast<int>(std::floor(y0)) - margin, 0, image_size - 1);
    int r1 = std::clamp(static_cast<int>(std::ceil(y1)) + margin, 0, image_size - 1);

    MaskSpec m;
    m.dilation_px = margin;
    m.mask = NdArray({image_size, image_size});
    for (int r = r0; r <= r1; r++)
        for (int c = c0; c <= c1; c++) m.mask.at(r, c) = 1.0f;
    m.validate();
    return m;
}

void write_ppm(const std::filesystem::path& file, const Frame& frame) {
    LS_CHECK(frame.rank() == 3 && frame.dim(2) == 3, "write_ppm: expected [H,W,3]");
    std::ofstream out(file, std::ios::binary);
    if (!out) throw IoError("cannot write image: " + file.string());
    out << "P6\n" << frame.dim(1) << " " << frame.dim(0) << "\n255\n";
    std::vector<unsigned char> row(static_cast<size_t>(frame.dim(1)) * 3);
    for (int r = 0; r < frame.dim(0); r++) {
        for (int c = 0; c < frame.dim(1); c++)
            for (int ch = 0; ch < 3; ch++) {
                const float v = std::clamp(frame.at(r, c, ch), 0.0f, 1.0f);
                row[static_cast<size_t>(c) * 3 + static_cast<size_t>(ch)] =
                    static_cast<unsigned char>(std::lround(v * 255.0f));
            }
        out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
    }
    if (!out) throw IoError("write failed: " + file.string());
}

NdArray chw_from_frame(const Frame& frame) {
    LS_CHECK(frame.rank() == 3 && frame.dim(2) == 3, "chw_from_frame: expected [H,W,3]");
    const int H = frame.dim(0), W = frame.dim(1);
    NdArray chw({3, H, W});
    for (int r = 0; r < H; r++)
        for (int c = 0; c < W; c++)
            for (int ch = 0; ch < 3; ch++) chw.at(ch, r, c) = frame.at(r, c, ch);
    return chw;
}

Frame frame_from_chw(const NdArray& chw) {
    LS_CHECK(chw.rank() == 3 && chw.dim(0) == 3, "frame_from_chw: expected [3,H,W]");
    const int H = chw.dim(1), W = chw.dim(2);
    Frame f({H, W, 3});
    for (int r = 0; r < H; r++)
        for (int c = 0; c < W; c++)
            for (int ch = 0; ch < 3; ch++) f.at(r, c, ch) = chw.at(ch, r, c);
    return f;
}

Frame read_ppm(const std::filesystem::path& file) {
    std::ifstream in(file, std::ios::binary);
    if (!in) throw IoError("cannot read image: " + file.string());
    std::string magic;
    int w = 0, h = 0, maxv = 0;
    in >> magic >> w >> h >> maxv;
    if (magic != "P6" || w <= 0 || h <= 0 || maxv != 255) throw IoError("unsupported PPM: " + file.string());
    in.get();  // single whitespace after header
    std::vector<unsigned char> buf(static_cast<size_t>(w) * h * 3);
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (in.gcount() != static_cast<std::streamsize>(buf.size())) throw IoError("truncated PPM: " + file.string());
    Frame f({h, w, 3});
    for (int64_t i = 0; i < f.numel(); i++) f[i] = static_cast<float>(buf[static_cast<size_t>(i)]) / 255.0f;
    return f;
}

} // namespace lipsync
