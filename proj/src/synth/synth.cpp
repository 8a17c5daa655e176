#include "lipsync/synth/synth.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

namespace lipsync::synth {

using json = nlohmann::json;
namespace fs = std::filesystem;

constexpr double kPi = 3.14159265358979323846;

static uint64_t mix_seed(uint64_t a, uint64_t b) {
    uint64_t buf[2] = {a, b};
    return fnv1a64(buf, sizeof(buf));
}

// ---------------------------------------------------------------------------
// Identity
// ---------------------------------------------------------------------------

IdentityParams sample_identity(uint64_t seed, int id_label) {
    nn::Rng rng(mix_seed(seed, 0x1D5EED ^ static_cast<uint64_t>(id_label) * 0x9E3779B97F4A7C15ull));
    IdentityParams id;
    id.id_label = id_label;
    id.shape_vec = NdArray({kShapeDim});
    for (int i = 0; i < kShapeDim; i++) id.shape_vec[i] = rng.uniformf();

    // Warm skin, clearly-lit lips (luminance >= 0.40 so the mouth interior is
    // always the darkest content inside the lip mask), free eye color.
    const float u = rng.uniformf(), v = rng.uniformf(), w = rng.uniformf();
    id.skin[0] = 0.55f + 0.35f * u;
    id.skin[1] = id.skin[0] * (0.72f + 0.10f * v);
    id.skin[2] = id.skin[1] * (0.70f + 0.12f * w);
    id.lip[0] = 0.55f + 0.30f * rng.uniformf();
    id.lip[1] = 0.35f + 0.15f * rng.uniformf();
    id.lip[2] = 0.30f + 0.10f * rng.uniformf();
    id.eye[0] = 0.10f + 0.30f * rng.uniformf();
    id.eye[1] = 0.15f + 0.35f * rng.uniformf();
    id.eye[2] = 0.30f + 0.50f * rng.uniformf();
    return id;
}

// ---------------------------------------------------------------------------
// Speech
// ---------------------------------------------------------------------------

void speech_embed_row(float prev, float cur, float next, float* out) {
    // First two channels carry the signal directly; the rest are a fixed
    // smooth sinusoidal mixture so the embedding is informative but not
    // trivially linear.
    out[0] = cur - 0.5f;
    out[1] = next - prev;
    static const struct Basis {
        float a[kSpeechDim], b[kSpeechDim], c[kSpeechDim], p[kSpeechDim];
        Basis() {
            nn::Rng rng(0xFEEDFACEull);
            for (int k = 0; k < kSpeechDim; k++) {
                a[k] = rng.uniformf(0.8f, 3.2f);
                b[k] = rng.uniformf(-1.5f, 1.5f);
                c[k] = rng.uniformf(-1.5f, 1.5f);
                p[k] = rng.uniformf(0.0f, static_cast<float>(2.0 * kPi));
            }
        }
    } basis;
    for (int k = 2; k < kSpeechDim; k++)
        out[k] = std::sin(basis.a[k] * cur + basis.b[k] * prev + basis.c[k] * next + basis.p[k]);
}

SpeechTrack synth_speech(int n_frames, uint64_t seed) {
    LS_CHECK(n_frames >= 1, "synth_speech: n_frames must be >= 1");
    nn::Rng rng(mix_seed(seed, 0x5BEEC4));

    // Band-limited drive: gated sinusoid mixture. Slopes are bounded by
    // construction so |energy[t+1]-energy[t]| <= 0.35.
    const double P0 = rng.uniformf(50.0f, 80.0f);
    const double P1 = rng.uniformf(20.0f, 30.0f);
    const double P2 = rng.uniformf(12.0f, 18.0f);
    const double P3 = rng.uniformf(8.0f, 11.0f);
    const double f0 = rng.uniformf(0.0f, static_cast<float>(2.0 * kPi));
    const double f1 = rng.uniformf(0.0f, static_cast<float>(2.0 * kPi));
    const double f2 = rng.uniformf(0.0f, static_cast<float>(2.0 * kPi));
    const double f3 = rng.uniformf(0.0f, static_cast<float>(2.0 * kPi));

    auto energy_at = [&](double t) {
        const double gate = 0.5 + 0.5 * std::sin(2.0 * kPi * t / P0 + f0);
        const double mixture = 0.5 * std::sin(2.0 * kPi * t / P1 + f1) +
                               0.3 * std::sin(2.0 * kPi * t / P2 + f2) +
                               0.2 * std::sin(2.0 * kPi * t / P3 + f3);
        return std::clamp(gate * (0.5 + 0.5 * mixture), 0.0, 1.0);
    };

    SpeechTrack track;
    track.energy = NdArray({n_frames});
    for (int t = 0; t < n_frames; t++) track.energy[t] = static_cast<float>(energy_at(t));

    // Features at 2x video rate over the linearly interpolated drive.
    const int rows = 2 * n_frames;
    std::vector<float> e2(static_cast<size_t>(rows));
    for (int j = 0; j < rows; j++) {
        const int t = j / 2;
        if (j % 2 == 0) {
            e2[static_cast<size_t>(j)] = track.energy[t];
        } else {
            const int tn = std::min(t + 1, n_frames - 1);
            e2[static_cast<size_t>(j)] = 0.5f * (track.energy[t] + track.energy[tn]);
        }
    }
    track.feats.feats = NdArray({rows, kSpeechDim});
    for (int j = 0; j < rows; j++) {
        const float prev = e2[static_cast<size_t>(std::max(0, j - 1))];
        const float next = e2[static_cast<size_t>(std::min(rows - 1, j + 1))];
        speech_embed_row(prev, e2[static_cast<size_t>(j)], next,
                         track.feats.feats.data() + static_cast<int64_t>(j) * kSpeechDim);
    }
    return track;
}

// ---------------------------------------------------------------------------
// Landmarks
// ---------------------------------------------------------------------------

float aperture_offset(const IdentityParams& id) { return 0.02f + 0.03f * id.shape(3); }
float aperture_gain(const IdentityParams& id) { return 0.10f + 0.05f * id.shape(2); }

struct FaceGeom {
    float cx = 0.0f, cy = 0.02f;
    float rx, ry;
    float eye_cx, eye_cy, eye_rx, eye_ry;
    float brow_y;
    float mouth_top, mouth_halfw, lip_th;
};

static FaceGeom face_geom(const IdentityParams& id) {
    FaceGeom g;
    g.rx = 0.50f + 0.16f * id.shape(0);
    g.ry = 0.68f + 0.12f * id.shape(1);
    g.eye_cx = g.rx * (0.35f + 0.15f * id.shape(4));
    g.eye_cy = g.cy - g.ry * 0.35f;
    g.eye_rx = 0.10f + 0.04f * id.shape(5);
    g.eye_ry = 0.05f + 0.02f * id.shape(5);
    g.brow_y = g.eye_cy - 0.13f;
    g.mouth_top = g.cy + g.ry * 0.45f;
    g.mouth_halfw = 0.14f + 0.08f * id.shape(6);
    g.lip_th = 0.05f + 0.05f * id.shape(3);
    return g;
}

// Writes one frame of landmarks for the given aperture and head-bob phase.
static void write_frame_points(float* dst, const FaceGeom& g, float aperture, float bob_dx, float bob_dy) {
    using namespace desk48;
    auto set = [&](int idx, float x, float y) {
        dst[2 * idx] = x;
        dst[2 * idx + 1] = y;
    };
    // Face outline; jaw (k in [4,11]) is identity-fixed, the upper half bobs.
    for (int k = 0; k < kOutlineCount; k++) {
        const double phi = -kPi / 2.0 + 2.0 * kPi * k / kOutlineCount;
        float x = g.cx + g.rx * static_cast<float>(std::cos(phi));
        float y = g.cy + g.ry * static_cast<float>(std::sin(phi));
        const bool jaw = (k >= 4 && k <= 11);
        if (!jaw) {
            x += bob_dx;
            y += bob_dy;
        }
        set(kOutlineStart + k, x, y);
    }
    // Eyes: hexagons, left then right.
    for (int side = 0; side < 2; side++) {
        const float ex = (side == 0 ? -g.eye_cx : g.eye_cx) + bob_dx;
        const float ey = g.eye_cy + bob_dy;
        for (int i = 0; i < 6; i++) {
            const double phi = 2.0 * kPi * i / 6.0;
            set(kEyeStart + side * 6 + i, ex + g.eye_rx * static_cast<float>(std::cos(phi)),
                ey + g.eye_ry * static_cast<float>(std::sin(phi)));
        }
    }
    // Brows: inner and outer point per side.
    set(kBrowStart + 0, -g.eye_cx - 0.10f + bob_dx, g.brow_y + bob_dy);
    set(kBrowStart + 1, -g.eye_cx + 0.10f + bob_dx, g.brow_y - 0.02f + bob_dy);
    set(kBrowStart + 2, g.eye_cx - 0.10f + bob_dx, g.brow_y - 0.02f + bob_dy);
    set(kBrowStart + 3, g.eye_cx + 0.10f + bob_dx, g.brow_y + bob_dy);
    // Outer lip hull: 5-point upper arc left->right, then lower arc
    // right->left. Vertical extent is exactly `aperture`.
    const float w = g.mouth_halfw;
    for (int i = 0; i < 5; i++) {
        const float x = -w + 0.5f * w * static_cast<float>(i);
        const float frac = x / w;
        set(kHullStart + i, x, g.mouth_top + 0.45f * aperture * frac * frac);
    }
    for (int i = 0; i < 5; i++) {
        const float x = w - 0.5f * w * static_cast<float>(i);
        const float frac = x / w;
        set(kHullStart + 5 + i, x, g.mouth_top + aperture - 0.45f * aperture * frac * frac);
    }
    // Inner mouth: collapses to a line when the lips are closed.
    const float open = std::max(aperture - g.lip_th, 0.0f);
    const float wi = 0.55f * w;
    const float y_in = g.mouth_top + 0.5f * g.lip_th;
    const float xs[3] = {-wi, 0.0f, wi};
    for (int i = 0; i < 3; i++) {
        const float frac = xs[i] / wi;
        set(kInnerStart + i, xs[i], y_in + 0.3f * open * frac * frac);
    }
    for (int i = 0; i < 3; i++) {
        const float frac = xs[2 - i] / wi;
        set(kInnerStart + 3 + i, xs[2 - i], y_in + open - 0.3f * open * frac * frac);
    }
}

LandmarkSequence landmarks_from(const IdentityParams& id, const SpeechTrack& speech,
                                const LandmarkTopology& topology) {
    LS_CHECK(topology.total_points == desk48::kTotal,
             "landmarks_from: generator only supports the desk-48 topology (got %d points)",
             topology.total_points);
    const int N = speech.n_frames();
    const FaceGeom g = face_geom(id);
    const float a = aperture_offset(id), b = aperture_gain(id);
    const float phase1 = static_cast<float>(2.0 * kPi * std::fmod(0.618 * (id.id_label + 1), 1.0));
    const float phase2 = static_cast<float>(2.0 * kPi * std::fmod(0.381 * (id.id_label + 1), 1.0));

    LandmarkSequence seq;
    seq.topology = topology;
    seq.valid_len = N;
    seq.coords = NdArray({N, desk48::kTotal, 2});
    for (int t = 0; t < N; t++) {
        const float ap = a + b * speech.energy[t];
        const float bob_dx = 0.010f * std::sin(static_cast<float>(2.0 * kPi * t / 53.0) + phase1);
        const float bob_dy = 0.015f * std::sin(static_cast<float>(2.0 * kPi * t / 37.0) + phase2);
        write_frame_points(seq.coords.data() + static_cast<int64_t>(t) * desk48::kTotal * 2, g, ap, bob_dx,
                           bob_dy);
    }
    return seq;
}

std::vector<double> lip_aperture_series(const LandmarkSequence& seq) {
    std::vector<double> out(static_cast<size_t>(seq.n_frames()));
    for (int t = 0; t < seq.n_frames(); t++) {
        float lo = 1e9f, hi = -1e9f;
        for (int idx : seq.topology.lip_hull_idx) {
            const float y = seq.coords.at(t, idx, 1);
            lo = std::min(lo, y);
            hi = std::max(hi, y);
        }
        out[static_cast<size_t>(t)] = static_cast<double>(hi) - lo;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

struct P2 {
    float x, y;
};

static void fill_polygon(Frame& img, const std::vector<P2>& pts, const float color[3]) {
    if (pts.size() < 3) return;
    const int H = img.dim(0), W = img.dim(1);
    float y_min = 1e9f, y_max = -1e9f;
    for (const P2& p : pts) {
        y_min = std::min(y_min, p.y);
        y_max = std::max(y_max, p.y);
    }
    const int r0 = std::max(0, static_cast<int>(std::floor(y_min - 0.5f)));
    const int r1 = std::min(H - 1, static_cast<int>(std::ceil(y_max)));
    std::vector<float> xs;
    for (int r = r0; r <= r1; r++) {
        const float yc = static_cast<float>(r) + 0.5f;
        xs.clear();
        for (size_t i = 0; i < pts.size(); i++) {
            const P2& p1 = pts[i];
            const P2& p2 = pts[(i + 1) % pts.size()];
            if ((p1.y <= yc && p2.y > yc) || (p2.y <= yc && p1.y > yc))
                xs.push_back(p1.x + (yc - p1.y) * (p2.x - p1.x) / (p2.y - p1.y));
        }
        std::sort(xs.begin(), xs.end());
        for (size_t i = 0; i + 1 < xs.size(); i += 2) {
            const int c0 = std::max(0, static_cast<int>(std::ceil(xs[i] - 0.5f)));
            const int c1 = std::min(W - 1, static_cast<int>(std::floor(xs[i + 1] - 0.5f)));
            for (int c = c0; c <= c1; c++)
                for (int ch = 0; ch < 3; ch++) img.at(r, c, ch) = color[ch];
        }
    }
}

Frame render_frame(const NdArray& landmarks_frame, const IdentityParams& id, int size) {
    LS_CHECK(landmarks_frame.rank() == 2 && landmarks_frame.dim(0) == desk48::kTotal &&
                 landmarks_frame.dim(1) == 2,
             "render_frame: expected [48,2] landmarks, got %s", shape_str(landmarks_frame.shape()).c_str());
    for (int64_t i = 0; i < landmarks_frame.numel(); i++)
        LS_CHECK(landmarks_frame[i] >= -1.0f && landmarks_frame[i] <= 1.0f,
                 "render_frame: coord %g outside [-1,1]", landmarks_frame[i]);
    using namespace desk48;

    Frame img({size, size, 3});
    const float bg[3] = {0.82f, 0.84f, 0.86f};
    for (int64_t i = 0; i < img.numel(); i += 3) {
        img[i] = bg[0];
        img[i + 1] = bg[1];
        img[i + 2] = bg[2];
    }

    auto px = [&](int idx) {
        return P2{denormalize_coord(landmarks_frame.at(idx, 0), size),
                  denormalize_coord(landmarks_frame.at(idx, 1), size)};
    };
    auto poly = [&](int start, int count) {
        std::vector<P2> pts;
        pts.reserve(static_cast<size_t>(count));
        for (int i = 0; i < count; i++) pts.push_back(px(start + i));
        return pts;
    };

    fill_polygon(img, poly(kOutlineStart, kOutlineCount), id.skin);

    const float brow_color[3] = {id.skin[0] * 0.45f, id.skin[1] * 0.42f, id.skin[2] * 0.40f};
    for (int side = 0; side < 2; side++) {
        const P2 a = px(kBrowStart + side * 2), b = px(kBrowStart + side * 2 + 1);
        std::vector<P2> quad = {{a.x, a.y - 1.0f}, {b.x, b.y - 1.0f}, {b.x, b.y + 1.0f}, {a.x, a.y + 1.0f}};
        fill_polygon(img, quad, brow_color);
    }
    fill_polygon(img, poly(kEyeStart, 6), id.eye);
    fill_polygon(img, poly(kEyeStart + 6, 6), id.eye);
    fill_polygon(img, poly(kHullStart, kHullCount), id.lip);

    // Mouth interior: shade from the identity's hidden brightness component,
    // luminance capped below every other surface the lip mask can contain.
    const float lum = 0.05f + 0.25f * id.shape(7);
    const float interior[3] = {lum, lum * 0.92f, lum * 0.90f};
    fill_polygon(img, poly(kInnerStart, kInnerCount), interior);
    return img;
}

VideoClip render_clip(const LandmarkSequence& seq, const IdentityParams& id, int size) {
    VideoClip clip;
    clip.fps = kDefaultFps;
    clip.frames = NdArray({seq.n_frames(), size, size, 3});
    for (int t = 0; t < seq.n_frames(); t++) clip.set_frame(t, render_frame(seq.frame(t), id, size));
    return clip;
}

// ---------------------------------------------------------------------------
// Dataset io
// ---------------------------------------------------------------------------

static uint64_t clip_speech_seed(uint64_t seed, int clip_index) {
    return mix_seed(seed, 0xC11B5EEDull + static_cast<uint64_t>(clip_index));
}

Dataset make_dataset(const DatasetParams& p, const fs::path& out_dir) {
    LS_CHECK(p.n_ids >= 1 && p.clips_per_id >= 1 && p.frames_per_clip >= 1,
             "make_dataset: all counts must be >= 1");
    LandmarkTopology topo = LandmarkTopology::preset(p.topology);

    std::error_code ec;
    fs::create_directories(out_dir / "clips", ec);
    if (ec) throw IoError("make_dataset: cannot create " + (out_dir / "clips").string() + ": " + ec.message());

    json manifest;
    manifest["format"] = "lipsync-dataset-v1";
    manifest["seed"] = p.seed;
    manifest["n_ids"] = p.n_ids;
    manifest["clips_per_id"] = p.clips_per_id;
    manifest["frames_per_clip"] = p.frames_per_clip;
    manifest["image_size"] = p.image_size;
    manifest["speech_dim"] = kSpeechDim;
    manifest["fps"] = kDefaultFps;
    manifest["topology"] = json::parse(topo.to_json());
    json clips = json::array();

    for (int label = 0; label < p.n_ids; label++) {
        const IdentityParams id = sample_identity(p.seed, label);
        for (int c = 0; c < p.clips_per_id; c++) {
            const int index = label * p.clips_per_id + c;
            const std::string name = strf("clip_%04d", index);
            const fs::path rel = fs::path("clips") / name;
            const fs::path dir = out_dir / rel;
            fs::create_directories(dir, ec);
            if (ec) throw IoError("make_dataset: cannot create " + dir.string() + ": " + ec.message());

            const SpeechTrack speech = synth_speech(p.frames_per_clip, clip_speech_seed(p.seed, index));
            const LandmarkSequence lms = landmarks_from(id, speech, topo);
            const VideoClip clip = render_clip(lms, id, p.image_size);

            try {
                lms.coords.save(dir / "landmarks.f32nd", "landmarks");
                speech.energy.save(dir / "energy.f32nd", "speech_energy");
                speech.feats.feats.save(dir / "speech.f32nd", "speech_feats");
                clip.frames.save(dir / "frames.f32nd", "frames");
            } catch (const IoError& e) {
                throw IoError(strf("make_dataset: while writing %s: %s", dir.string().c_str(), e.what()));
            }

            json files = {{"landmarks", (rel / "landmarks.f32nd").generic_string()},
                          {"energy", (rel / "energy.f32nd").generic_string()},
                          {"speech", (rel / "speech.f32nd").generic_string()},
                          {"frames", (rel / "frames.f32nd").generic_string()}};
            json sums = json::object();
            for (const auto& [key, relpath] : files.items())
                sums[key] = strf("%016llx",
                                 static_cast<unsigned long long>(file_checksum(out_dir / relpath.get<std::string>())));
            clips.push_back({{"name", name},
                             {"id_label", label},
                             {"n_frames", p.frames_per_clip},
                             {"dir", rel.generic_string()},
                             {"files", files},
                             {"checksums", sums}});
        }
    }
    manifest["clips"] = clips;
    std::ofstream out(out_dir / "manifest.json");
    if (!out) throw IoError("make_dataset: cannot write manifest at " + (out_dir / "manifest.json").string());
    out << manifest.dump(2) << "\n";
    out.close();

    return Dataset::open(out_dir);
}

Dataset Dataset::open(const fs::path& root) {
    std::ifstream in(root / "manifest.json");
    if (!in) throw IoError("Dataset::open: missing manifest at " + (root / "manifest.json").string());
    json manifest = json::parse(in);
    LS_CHECK_CFG(manifest.value("format", "") == "lipsync-dataset-v1", "Dataset::open: unknown format in %s",
                 root.string().c_str());

    Dataset ds;
    ds.root_ = root;
    ds.params_.seed = manifest.at("seed").get<uint64_t>();
    ds.params_.n_ids = manifest.at("n_ids").get<int>();
    ds.params_.clips_per_id = manifest.at("clips_per_id").get<int>();
    ds.params_.frames_per_clip = manifest.at("frames_per_clip").get<int>();
    ds.params_.image_size = manifest.at("image_size").get<int>();
    ds.topology_ = LandmarkTopology::from_json(manifest.at("topology").dump());
    ds.params_.topology = ds.topology_.name;
    for (const auto& c : manifest.at("clips")) {
        ClipRecord rec;
        rec.name = c.at("name").get<std::string>();
        rec.id_label = c.at("id_label").get<int>();
        rec.n_frames = c.at("n_frames").get<int>();
        rec.dir = fs::path(c.at("dir").get<std::string>());
        ds.clips_.push_back(rec);
    }
    return ds;
}

ClipData Dataset::load_clip(int i, bool with_frames) const {
    const ClipRecord& rec = record(i);
    const fs::path dir = root_ / rec.dir;
    ClipData data;
    data.name = rec.name;
    data.id_label = rec.id_label;
    data.landmarks.topology = topology_;
    data.landmarks.coords = NdArray::load(dir / "landmarks.f32nd");
    data.landmarks.valid_len = data.landmarks.coords.dim(0);
    data.speech.energy = NdArray::load(dir / "energy.f32nd");
    data.speech.feats.feats = NdArray::load(dir / "speech.f32nd");
    if (with_frames) {
        data.clip.frames = NdArray::load(dir / "frames.f32nd");
        data.clip.fps = kDefaultFps;
    }
    return data;
}

IdentityParams Dataset::identity_of(int clip_index) const {
    return sample_identity(params_.seed, record(clip_index).id_label);
}

std::vector<int> Dataset::train_indices() const {
    std::vector<int> out;
    for (int i = 0; i < n_clips(); i++)
        if (params_.clips_per_id == 1 || (i % params_.clips_per_id) != params_.clips_per_id - 1)
            out.push_back(i);
    return out;
}

std::vector<int> Dataset::holdout_indices() const {
    std::vector<int> out;
    if (params_.clips_per_id == 1) return out;
    for (int i = 0; i < n_clips(); i++)
        if ((i % params_.clips_per_id) == params_.clips_per_id - 1) out.push_back(i);
    return out;
}

std::string Dataset::verify_checksums() const {
    std::ifstream in(root_ / "manifest.json");
    if (!in) throw IoError("verify_checksums: missing manifest");
    json manifest = json::parse(in);
    for (const auto& c : manifest.at("clips")) {
        for (const auto& [key, relpath] : c.at("files").items()) {
            const std::string expect = c.at("checksums").at(key).get<std::string>();
            const std::string got =
                strf("%016llx", static_cast<unsigned long long>(file_checksum(root_ / relpath.get<std::string>())));
            if (expect != got) return relpath.get<std::string>();
        }
    }
    return "";
}

} // namespace lipsync::synth
