#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "helpers.hpp"
#include "lipsync/synth/synth.hpp"

#include <cstring>
#include <filesystem>
#include <set>

using namespace lipsync;
using namespace lipsync::synth;
namespace fs = std::filesystem;

TEST_CASE("sample_identity is deterministic and separates labels") {
    IdentityParams a1 = sample_identity(0, 0);
    IdentityParams a2 = sample_identity(0, 0);
    CHECK(a1.shape_vec.vec() == a2.shape_vec.vec());
    CHECK(std::memcmp(a1.skin, a2.skin, sizeof(a1.skin)) == 0);

    IdentityParams b = sample_identity(0, 1);
    double d = 0;
    for (int i = 0; i < kShapeDim; i++)
        d += (a1.shape_vec[i] - b.shape_vec[i]) * (a1.shape_vec[i] - b.shape_vec[i]);
    CHECK(std::sqrt(d) > 0.0);

    std::set<std::array<int, 9>> palettes;
    for (int label = 0; label < 100; label++) {
        IdentityParams id = sample_identity(0, label);
        std::array<int, 9> key{};
        for (int i = 0; i < 3; i++) {
            key[static_cast<size_t>(i)] = static_cast<int>(id.skin[i] * 1e6f);
            key[static_cast<size_t>(3 + i)] = static_cast<int>(id.lip[i] * 1e6f);
            key[static_cast<size_t>(6 + i)] = static_cast<int>(id.eye[i] * 1e6f);
        }
        palettes.insert(key);
    }
    CHECK(palettes.size() == 100);
}

TEST_CASE("synth_speech: range, band limit, determinism, degenerate length") {
    SpeechTrack one = synth_speech(1, 3);
    CHECK(one.energy.shape() == Shape{1});
    CHECK(one.feats.feats.shape() == Shape{2, kSpeechDim});

    SpeechTrack a = synth_speech(250, 42);
    SpeechTrack b = synth_speech(250, 42);
    CHECK(a.energy.vec() == b.energy.vec());
    CHECK(a.feats.feats.vec() == b.feats.feats.vec());

    float max_jump = 0;
    for (int t = 0; t < 250; t++) {
        CHECK(a.energy[t] >= 0.0f);
        CHECK(a.energy[t] <= 1.0f);
        if (t > 0) max_jump = std::max(max_jump, std::fabs(a.energy[t] - a.energy[t - 1]));
    }
    CHECK(max_jump <= 0.35f);

    // feats rows are the documented function of the 2x-rate energy triple
    std::vector<float> e2(500);
    for (int j = 0; j < 500; j++) {
        const int t = j / 2;
        e2[static_cast<size_t>(j)] =
            j % 2 == 0 ? a.energy[t] : 0.5f * (a.energy[t] + a.energy[std::min(t + 1, 249)]);
    }
    float row[kSpeechDim];
    speech_embed_row(e2[9], e2[10], e2[11], row);
    for (int k = 0; k < kSpeechDim; k++) CHECK(a.feats.feats.at(10, k) == row[k]);
}

TEST_CASE("landmarks_from: aperture tracks energy exactly, upper face is speech-independent") {
    LandmarkTopology topo = LandmarkTopology::preset("desk-48");
    IdentityParams id = sample_identity(1, 4);
    SpeechTrack speech = synth_speech(120, 9);
    LandmarkSequence seq = landmarks_from(id, speech, topo);
    CHECK_NOTHROW(seq.validate());

    auto aperture = lip_aperture_series(seq);
    std::vector<double> energy(120);
    for (int t = 0; t < 120; t++) energy[static_cast<size_t>(t)] = speech.energy[t];
    CHECK(testutil::pearson(aperture, energy) == doctest::Approx(1.0).epsilon(1e-6));

    // zero drive -> constant minimal aperture a(id)
    SpeechTrack zero = speech;
    for (int t = 0; t < 120; t++) zero.energy[t] = 0.0f;
    LandmarkSequence seq0 = landmarks_from(id, zero, topo);
    auto ap0 = lip_aperture_series(seq0);
    for (double v : ap0) CHECK(v == doctest::Approx(aperture_offset(id)).epsilon(1e-5));

    // swapping speech leaves upper-face coords bit-exact (disentanglement)
    SpeechTrack other = synth_speech(120, 77);
    LandmarkSequence seq2 = landmarks_from(id, other, topo);
    for (int t = 0; t < 120; t++)
        for (int idx : topo.upper_face_idx) {
            CHECK(seq.coords.at(t, idx, 0) == seq2.coords.at(t, idx, 0));
            CHECK(seq.coords.at(t, idx, 1) == seq2.coords.at(t, idx, 1));
        }

    // head-bob amplitude stays below 0.02
    for (int t = 1; t < 120; t++)
        for (int idx : topo.upper_face_idx) {
            CHECK(std::fabs(seq.coords.at(t, idx, 0) - seq.coords.at(0, idx, 0)) < 0.04f);
            CHECK(std::fabs(seq.coords.at(t, idx, 1) - seq.coords.at(0, idx, 1)) < 0.06f);
        }
}

TEST_CASE("two identities share aperture dynamics up to affine map but differ in contours") {
    LandmarkTopology topo = LandmarkTopology::preset("desk-48");
    SpeechTrack speech = synth_speech(100, 5);
    LandmarkSequence s1 = landmarks_from(sample_identity(0, 2), speech, topo);
    LandmarkSequence s2 = landmarks_from(sample_identity(0, 9), speech, topo);
    CHECK(testutil::pearson(lip_aperture_series(s1), lip_aperture_series(s2)) ==
          doctest::Approx(1.0).epsilon(1e-6));
    double contour_dist = 0;
    for (int idx : topo.upper_face_idx) {
        contour_dist += std::fabs(s1.coords.at(0, idx, 0) - s2.coords.at(0, idx, 0));
        contour_dist += std::fabs(s1.coords.at(0, idx, 1) - s2.coords.at(0, idx, 1));
    }
    CHECK(contour_dist > 0.05);
}

TEST_CASE("render_frame: deterministic, in range, lips iff aperture positive") {
    LandmarkTopology topo = LandmarkTopology::preset("desk-48");
    IdentityParams id = sample_identity(2, 0);
    SpeechTrack speech = synth_speech(10, 21);
    LandmarkSequence seq = landmarks_from(id, speech, topo);

    Frame f1 = render_frame(seq.frame(0), id, 64);
    Frame f2 = render_frame(seq.frame(0), id, 64);
    CHECK(std::memcmp(f1.data(), f2.data(), static_cast<size_t>(f1.numel()) * sizeof(float)) == 0);
    for (int64_t i = 0; i < f1.numel(); i++) {
        CHECK(f1[i] >= 0.0f);
        CHECK(f1[i] <= 1.0f);
    }

    // Zero-aperture hull rasterizes no lip pixels; open hull does.
    // Degenerate the hull+inner points onto the hull's min y (zero aperture).
    NdArray closed = seq.frame(0);
    {
        float min_y = 1e9f;
        for (int i = 0; i < desk48::kHullCount; i++)
            min_y = std::min(min_y, closed.at(desk48::kHullStart + i, 1));
        for (int i = 0; i < desk48::kHullCount; i++) closed.at(desk48::kHullStart + i, 1) = min_y;
        for (int i = 0; i < desk48::kInnerCount; i++) closed.at(desk48::kInnerStart + i, 1) = min_y;
    }
    Frame fc = render_frame(closed, id, 64);
    auto count_lip_pixels = [&](const Frame& f) {
        int n = 0;
        for (int r = 0; r < 64; r++)
            for (int c = 0; c < 64; c++)
                if (std::fabs(f.at(r, c, 0) - id.lip[0]) < 1e-6f && std::fabs(f.at(r, c, 1) - id.lip[1]) < 1e-6f)
                    n++;
        return n;
    };
    CHECK(count_lip_pixels(fc) == 0);
    CHECK(count_lip_pixels(f1) > 0);
}

TEST_CASE("render locality: lower-face changes stay inside the dilated lip mask") {
    LandmarkTopology topo = LandmarkTopology::preset("desk-48");
    IdentityParams id = sample_identity(3, 7);
    SpeechTrack sp1 = synth_speech(40, 11);
    SpeechTrack sp2 = synth_speech(40, 99);
    LandmarkSequence s1 = landmarks_from(id, sp1, topo);
    LandmarkSequence s2 = landmarks_from(id, sp2, topo);

    int out_of_mask_diffs = 0, in_mask_diffs = 0;
    for (int t = 0; t < 40; t += 7) {
        Frame f1 = render_frame(s1.frame(t), id, 64);
        Frame f2 = render_frame(s2.frame(t), id, 64);
        MaskSpec m1 = lip_mask_from_landmarks(s1.frame(t), topo, 64);
        MaskSpec m2 = lip_mask_from_landmarks(s2.frame(t), topo, 64);
        for (int r = 0; r < 64; r++)
            for (int c = 0; c < 64; c++) {
                bool diff = false;
                for (int ch = 0; ch < 3; ch++)
                    if (f1.at(r, c, ch) != f2.at(r, c, ch)) diff = true;
                if (!diff) continue;
                if (m1.mask.at(r, c) > 0.5f || m2.mask.at(r, c) > 0.5f)
                    in_mask_diffs++;
                else
                    out_of_mask_diffs++;
            }
    }
    CHECK(out_of_mask_diffs == 0);
    CHECK(in_mask_diffs > 0);
}

TEST_CASE("make_dataset writes a loadable deterministic corpus") {
    fs::path dir1 = fs::temp_directory_path() / "lipsync_ds_a";
    fs::path dir2 = fs::temp_directory_path() / "lipsync_ds_b";
    fs::remove_all(dir1);
    fs::remove_all(dir2);

    DatasetParams p;
    p.n_ids = 3;
    p.clips_per_id = 2;
    p.frames_per_clip = 12;
    p.seed = 123;
    p.image_size = 64;

    Dataset ds = make_dataset(p, dir1);
    CHECK(ds.n_clips() == 6);
    CHECK(ds.verify_checksums().empty());
    CHECK(ds.train_indices().size() == 3);
    CHECK(ds.holdout_indices().size() == 3);

    ClipData c0 = ds.load_clip(0);
    CHECK(c0.landmarks.coords.shape() == Shape{12, 48, 2});
    CHECK(c0.speech.feats.feats.shape() == Shape{24, kSpeechDim});
    CHECK(c0.clip.frames.shape() == Shape{12, 64, 64, 3});
    CHECK_NOTHROW(c0.clip.validate());

    // Regeneration with the same seed gives identical checksums.
    Dataset ds2 = make_dataset(p, dir2);
    for (int i = 0; i < ds.n_clips(); i++) {
        CHECK(file_checksum(dir1 / ds.record(i).dir / "frames.f32nd") ==
              file_checksum(dir2 / ds2.record(i).dir / "frames.f32nd"));
        CHECK(file_checksum(dir1 / ds.record(i).dir / "landmarks.f32nd") ==
              file_checksum(dir2 / ds2.record(i).dir / "landmarks.f32nd"));
    }
    fs::remove_all(dir1);
    fs::remove_all(dir2);
}

TEST_CASE("degenerate 1x1x1 dataset round-trips") {
    fs::path dir = fs::temp_directory_path() / "lipsync_ds_tiny";
    fs::remove_all(dir);
    DatasetParams p;
    p.n_ids = 1;
    p.clips_per_id = 1;
    p.frames_per_clip = 1;
    p.seed = 5;
    Dataset ds = make_dataset(p, dir);
    CHECK(ds.n_clips() == 1);
    ClipData c = ds.load_clip(0);
    CHECK(c.landmarks.n_frames() == 1);
    CHECK(ds.train_indices().size() == 1);
    CHECK(ds.holdout_indices().empty());
    fs::remove_all(dir);
}

TEST_CASE("mask area fraction over corpus renders stays in (0, 0.4)") {
    LandmarkTopology topo = LandmarkTopology::preset("desk-48");
    for (int label = 0; label < 6; label++) {
        IdentityParams id = sample_identity(0, label);
        SpeechTrack speech = synth_speech(30, static_cast<uint64_t>(label) + 50);
        LandmarkSequence seq = landmarks_from(id, speech, topo);
        for (int t = 0; t < 30; t += 9) {
            MaskSpec m = lip_mask_from_landmarks(seq.frame(t), topo, 64);
            const double frac = static_cast<double>(m.area()) / (64.0 * 64.0);
            CHECK(frac > 0.0);
            CHECK(frac < 0.4);
        }
    }
}
