#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "helpers.hpp"
#include "lipsync/metrics/metrics.hpp"
#include "lipsync/motion/diffusion.hpp"

#include <cmath>
#include <cstring>

using namespace lipsync;
using namespace lipsync::motion;

static MotionModelConfig mini_config() {
    MotionModelConfig c;
    c.conformer_layers = 2;
    c.hidden_dim = 48;
    c.ffn_dim = 96;
    c.heads = 2;
    c.conv_kernel = 5;
    c.dropout = 0.1f;
    c.audio_layers = 1;
    c.audio_dim = 24;
    c.audio_ffn = 48;
    c.audio_heads = 2;
    c.audio_kernel = 5;
    return c;
}

TEST_CASE("forward_noise: identity before noise, range checks, closed form") {
    DiffusionSchedule s = desk_schedule();
    nn::Rng rng(3);
    NdArray m0({5, 8});
    NdArray eps(m0.shape());
    rng.fill_uniform(m0.data(), m0.numel(), -1.0f, 1.0f);
    rng.fill_gauss(eps.data(), eps.numel());

    NdArray before = forward_noise(m0, -1, s, eps);
    CHECK(std::memcmp(before.data(), m0.data(), static_cast<size_t>(m0.numel()) * sizeof(float)) == 0);

    NdArray mt = forward_noise(m0, 10, s, eps);
    const float ab = s.alpha_bar[10];
    for (int64_t i = 0; i < m0.numel(); i++)
        CHECK(mt[i] == doctest::Approx(std::sqrt(ab) * m0[i] + std::sqrt(1 - ab) * eps[i]).epsilon(1e-6));

    CHECK_THROWS_AS(forward_noise(m0, s.T, s, eps), ValidationError);
    CHECK_THROWS_AS(forward_noise(m0, -2, s, eps), ValidationError);
}

TEST_CASE("single Eq.-2 step from zero has variance (1-alpha_t)") {
    // alpha_t = 0.99: samples from sqrt(alpha)*0 + sqrt(1-alpha)*eps should
    // carry variance 0.01 within 5% over many draws.
    DiffusionSchedule s = make_schedule(10, 0.01f, 0.01f);
    nn::Rng rng(7);
    const int n = 200000;
    NdArray zero({n});
    NdArray eps({n});
    rng.fill_gauss(eps.data(), n);
    NdArray stepped = forward_noise_step(zero, 3, s, eps);
    double var = 0;
    for (int i = 0; i < n; i++) var += static_cast<double>(stepped[i]) * stepped[i];
    var /= n;
    CHECK(var == doctest::Approx(0.01).epsilon(0.05));
}

TEST_CASE("k-step composition of Eq. 2 equals the closed-form jump") {
    DiffusionSchedule s = make_schedule(12, 0.05f, 0.3f);
    nn::Rng rng(11);
    const int k = 7;
    NdArray m0({6, 10});
    rng.fill_uniform(m0.data(), m0.numel(), -1.0f, 1.0f);

    std::vector<NdArray> eps;
    for (int t = 0; t <= k; t++) {
        NdArray e(m0.shape());
        rng.fill_gauss(e.data(), e.numel());
        eps.push_back(e);
    }
    // Brute force: iterate single steps t=0..k.
    NdArray m = m0;
    for (int t = 0; t <= k; t++) m = forward_noise_step(m, t, s, eps[static_cast<size_t>(t)]);

    // Closed form with the equivalent accumulated noise.
    NdArray eps_tilde(m0.shape(), 0.0f);
    const float ab_k = s.alpha_bar[static_cast<size_t>(k)];
    for (int t = 0; t <= k; t++) {
        float tail = 1.0f;
        for (int i = t + 1; i <= k; i++) tail *= s.alpha[static_cast<size_t>(i)];
        const float w = std::sqrt(tail) * std::sqrt(1.0f - s.alpha[static_cast<size_t>(t)]);
        for (int64_t i = 0; i < eps_tilde.numel(); i++) eps_tilde[i] += w * eps[static_cast<size_t>(t)][i];
    }
    for (int64_t i = 0; i < eps_tilde.numel(); i++) eps_tilde[i] /= std::sqrt(1.0f - ab_k);
    NdArray closed = forward_noise(m0, k, s, eps_tilde);

    for (int64_t i = 0; i < m.numel(); i++) CHECK(std::fabs(m[i] - closed[i]) < 1e-4f);
}

TEST_CASE("backbone forward: shape contract and zero-initialized output") {
    LandmarkTopology topo = LandmarkTopology::preset("desk-48");
    MotionModel model(mini_config(), topo, 5);
    CHECK(model.lower_dim() == 48);  // 24 lower-compact points
    CHECK(model.upper_dim() == 24);  // 12 eye points

    const int N = 9;
    nn::Rng rng(2);
    NdArray m_t({N, model.lower_dim()});
    NdArray upper({N, model.upper_dim()});
    NdArray speech({2 * N, 16});
    NdArray zid({model.cond_dim()});
    rng.fill_gauss(m_t.data(), m_t.numel());
    rng.fill_uniform(upper.data(), upper.numel(), -1.0f, 1.0f);
    rng.fill_gauss(speech.data(), speech.numel(), 0.3f);
    rng.fill_gauss(zid.data(), zid.numel(), 0.1f);

    NdArray out = model.denoise(m_t, upper, 3, speech, zid);
    CHECK(out.shape() == Shape{N, model.lower_dim()});
    // Final projection is zero-initialized.
    for (int64_t i = 0; i < out.numel(); i++) CHECK(out[i] == 0.0f);

    // Deterministic in eval mode.
    NdArray out2 = model.denoise(m_t, upper, 3, speech, zid);
    CHECK(std::memcmp(out.data(), out2.data(), static_cast<size_t>(out.numel()) * sizeof(float)) == 0);

    // Over-long sequences are rejected.
    MotionModelConfig shortcfg = mini_config();
    shortcfg.max_seq_len = 4;
    MotionModel short_model(shortcfg, topo, 5);
    CHECK_THROWS_AS(short_model.denoise(m_t, upper, 3, speech, zid), ValidationError);
}

TEST_CASE("backbone gradient w.r.t. conditioning vector matches finite differences") {
    LandmarkTopology topo = LandmarkTopology::preset("desk-48");
    MotionModel model(mini_config(), topo, 8);
    // Perturb the zero-initialized output head so gradients are nonzero.
    nn::Rng wiggle(4);
    for (nn::Param* p : model.params())
        if (p->name == "motion.out_proj.w") p->init_gauss(wiggle, 0.05f);

    const int N = 4;
    nn::Rng rng(3);
    NdArray m_t({N, model.lower_dim()});
    NdArray upper({N, model.upper_dim()});
    NdArray speech({2 * N, 16});
    rng.fill_gauss(m_t.data(), m_t.numel());
    rng.fill_uniform(upper.data(), upper.numel(), -1.0f, 1.0f);
    rng.fill_gauss(speech.data(), speech.numel(), 0.3f);

    auto rep = testutil::fd_check(
        [&](nn::Graph& g, nn::Tensor zid) {
            MotionModel::CondTensors cond;
            cond.t = 2;
            cond.speech_feats = g.input(speech.shape(), speech.data());
            cond.cond_vec = zid;
            nn::Tensor out = model.forward(g, g.input(m_t.shape(), m_t.data()),
                                           g.input(upper.shape(), upper.data()), cond);
            return nn::mean_all(nn::mul(out, out));  // L2 of output
        },
        testutil::random_vec(static_cast<size_t>(model.cond_dim()), rng, -0.5f, 0.5f),
        {1, model.cond_dim()});
    CHECK(rep.max_rel_err < 1e-2);
}

static identity::IdentityExtractor tiny_extractor() {
    identity::IdentityExtractorConfig cfg = identity::IdentityExtractorConfig::desk(4);
    cfg.hidden_dim = 32;
    cfg.embed_dim = 16;
    identity::IdentityExtractor ext(cfg, 19);
    ext.set_trainable(false);
    return ext;
}

TEST_CASE("dm_loss: perfect reconstruction gives zero terms; id term is scale-invariant cosine") {
    LandmarkTopology topo = LandmarkTopology::preset("desk-48");
    identity::IdentityExtractor ext = tiny_extractor();
    synth::IdentityParams id = synth::sample_identity(0, 1);
    synth::SpeechTrack speech = synth::synth_speech(6, 3);
    LandmarkSequence gt = synth::landmarks_from(id, speech, topo);

    // Perfect reconstruction of a constant sequence: every frame embeds to
    // the reference embedding, so both terms vanish.
    LandmarkSequence constant;
    constant.topology = topo;
    constant.valid_len = 1;
    constant.coords = gt.frame(0).reshaped({1, 48, 2});
    constant = constant.padded(6);
    DmLossResult perfect = dm_loss(constant, constant, ext, 0, 1.0f);
    CHECK(perfect.mse == doctest::Approx(0.0).epsilon(1e-6));
    CHECK(std::fabs(perfect.id) < 1e-5);
    CHECK(perfect.total == doctest::Approx(perfect.mse + perfect.id));

    // id term equals 1 - mean cosine computed through an independent path.
    LandmarkSequence other = gt;
    nn::Rng rng(5);
    for (int64_t i = 0; i < other.coords.numel(); i++)
        other.coords[i] = std::clamp(other.coords[i] + 0.08f * rng.gauss(), -1.0f, 1.0f);
    DmLossResult r = dm_loss(other, gt, ext, 0, 1.0f);
    const NdArray ref = ext.embed(gt.frame(0)).vec;
    double mean_cos = 0;
    for (int t = 0; t < other.n_frames(); t++) {
        const NdArray e = ext.embed(other.frame(t)).vec;
        double dot = 0;
        for (int64_t i = 0; i < e.numel(); i++) dot += static_cast<double>(e[i]) * ref[i];
        mean_cos += dot;
    }
    mean_cos /= other.n_frames();
    CHECK(r.id == doctest::Approx(1.0 - mean_cos).epsilon(1e-4));
    CHECK(r.id >= 0.0f);
    CHECK(r.id <= 2.0f);
}

TEST_CASE("dm_loss gradients match finite differences for both terms") {
    LandmarkTopology topo = LandmarkTopology::preset("desk-48");
    identity::IdentityExtractor ext = tiny_extractor();
    synth::IdentityParams id = synth::sample_identity(0, 2);
    synth::SpeechTrack speech = synth::synth_speech(3, 9);
    LandmarkSequence gt = synth::landmarks_from(id, speech, topo);

    const int N = gt.n_frames();
    const int full_dim = 48 * 2;
    std::vector<float> gt_flat(static_cast<size_t>(N) * full_dim);
    std::memcpy(gt_flat.data(), gt.coords.data(), gt_flat.size() * sizeof(float));

    auto make_loss = [&](float mse_w, float id_w) {
        return [&, mse_w, id_w](const std::vector<float>& hat_flat) {
            LandmarkSequence hat = gt;
            std::memcpy(hat.coords.data(), hat_flat.data(), hat_flat.size() * sizeof(float));
            DmLossResult r = dm_loss(hat, gt, ext, 0, id_w, mse_w);
            return std::make_pair(static_cast<double>(mse_w * r.mse + id_w * r.id), r.grad_m0hat);
        };
    };

    nn::Rng rng(21);
    std::vector<float> hat0 = gt_flat;
    for (float& v : hat0) v = std::clamp(v + 0.05f * rng.gauss(), -0.99f, 0.99f);

    for (auto [mse_w, id_w] : {std::pair{1.0f, 0.0f}, std::pair{0.0f, 1.0f}}) {
        auto f = make_loss(mse_w, id_w);
        auto [base, grad] = f(hat0);
        double scale = 0;
        std::vector<double> fd(hat0.size());
        const float eps = 5e-3f;
        for (size_t i = 0; i < hat0.size(); i++) {
            std::vector<float> hp = hat0, hm = hat0;
            hp[i] += eps;
            hm[i] -= eps;
            fd[i] = (f(hp).first - f(hm).first) / (2.0 * eps);
            scale = std::max({scale, std::fabs(fd[i]), std::fabs(static_cast<double>(grad[static_cast<int64_t>(i)]))});
        }
        double max_rel = 0;
        for (size_t i = 0; i < hat0.size(); i++)
            max_rel = std::max(max_rel, std::fabs(fd[i] - grad[static_cast<int64_t>(i)]) / std::max(scale, 1e-6));
        INFO("mse_w=" << mse_w << " id_w=" << id_w);
        CHECK(max_rel < 1e-2);
    }
}

TEST_CASE("sampler copy contracts: upper face and remaining landmarks bit-exact") {
    LandmarkTopology topo = LandmarkTopology::preset("desk-48");
    synth::IdentityParams id = synth::sample_identity(0, 3);
    synth::SpeechTrack speech = synth::synth_speech(20, 13);
    LandmarkSequence source = synth::landmarks_from(id, speech, topo);

    DiffusionSchedule s = desk_schedule();
    DenoiseFn zero_denoiser = [&](const NdArray& m_t, int) {
        NdArray x0(m_t.shape(), 0.0f);
        return x0;
    };
    LandmarkSequence out = sample_motion_with(zero_denoiser, source, s, 77);
    CHECK(out.n_frames() == source.n_frames());
    LandmarkTopology ft = topo;
    ft.finalize();
    for (int t = 0; t < out.n_frames(); t++) {
        for (int idx : topo.upper_face_idx) {
            CHECK(out.coords.at(t, idx, 0) == source.coords.at(t, idx, 0));
            CHECK(out.coords.at(t, idx, 1) == source.coords.at(t, idx, 1));
        }
        for (int idx : topo.remaining_idx) {
            CHECK(out.coords.at(t, idx, 0) == source.coords.at(t, idx, 0));
            CHECK(out.coords.at(t, idx, 1) == source.coords.at(t, idx, 1));
        }
        // Generated lower coords actually written (zero denoiser -> 0).
        for (int idx : ft.lower_compact_idx) CHECK(out.coords.at(t, idx, 0) == 0.0f);
    }

    // Same seed twice: bit-identical output even with a stochastic path.
    DenoiseFn noisy_denoiser = [&](const NdArray& m_t, int) { return m_t; };
    LandmarkSequence a = sample_motion_with(noisy_denoiser, source, s, 123);
    LandmarkSequence b = sample_motion_with(noisy_denoiser, source, s, 123);
    CHECK(std::memcmp(a.coords.data(), b.coords.data(),
                      static_cast<size_t>(a.coords.numel()) * sizeof(float)) == 0);
}

TEST_CASE("degenerate T=1 sampler with ground-truth oracle reproduces ground truth") {
    LandmarkTopology topo = LandmarkTopology::preset("desk-48");
    topo.finalize();
    synth::IdentityParams id = synth::sample_identity(0, 4);
    synth::SpeechTrack speech = synth::synth_speech(8, 17);
    LandmarkSequence gt = synth::landmarks_from(id, speech, topo);

    DiffusionSchedule one;
    one.T = 1;
    one.beta = {0.999f};
    one.alpha = {0.001f};
    one.alpha_bar = {0.001f};

    std::vector<float> gt_lower(static_cast<size_t>(gt.n_frames()) * topo.lower_compact_idx.size() * 2);
    for (int t = 0; t < gt.n_frames(); t++)
        for (size_t p = 0; p < topo.lower_compact_idx.size(); p++) {
            gt_lower[(static_cast<size_t>(t) * topo.lower_compact_idx.size() + p) * 2] =
                gt.coords.at(t, topo.lower_compact_idx[p], 0);
            gt_lower[(static_cast<size_t>(t) * topo.lower_compact_idx.size() + p) * 2 + 1] =
                gt.coords.at(t, topo.lower_compact_idx[p], 1);
        }
    DenoiseFn oracle = [&](const NdArray& m_t, int) {
        return NdArray::from(m_t.shape(), gt_lower);
    };
    LandmarkSequence out = sample_motion_with(oracle, gt, one, 5);
    CHECK(std::memcmp(out.coords.data(), gt.coords.data(),
                      static_cast<size_t>(gt.coords.numel()) * sizeof(float)) == 0);
}

TEST_CASE("short mini training run reduces the diffusion loss") {
    namespace fs = std::filesystem;
    fs::path dir = fs::temp_directory_path() / "lipsync_motion_mini";
    fs::remove_all(dir);
    synth::DatasetParams p;
    p.n_ids = 2;
    p.clips_per_id = 2;
    p.frames_per_clip = 24;
    p.seed = 31;
    synth::Dataset ds = synth::make_dataset(p, dir);

    identity::IdentityExtractorConfig icfg = identity::IdentityExtractorConfig::desk(2);
    icfg.hidden_dim = 32;
    icfg.embed_dim = 16;
    identity::IdentityExtractor ext(icfg, 3);
    ext.set_trainable(false);

    MotionModelConfig mcfg = mini_config();
    mcfg.id_dim = 16;
    MotionModel model(mcfg, ds.topology(), 11);
    DiffusionSchedule sched = desk_schedule();

    MotionTrainConfig tc;
    tc.epochs = 12;
    tc.window = 16;
    tc.batch_clips = 2;
    tc.verbose = false;
    tc.seed = 5;
    MotionTrainResult r1 = train_motion(model, ds, ext, sched, tc);
    CHECK(r1.epoch_total.back() < r1.epoch_total.front());

    // Deterministic re-run from a fresh model: identical loss curve.
    MotionModel model2(mcfg, ds.topology(), 11);
    MotionTrainResult r2 = train_motion(model2, ds, ext, sched, tc);
    for (size_t i = 0; i < r1.epoch_total.size(); i++)
        CHECK(std::fabs(r1.epoch_total[i] - r2.epoch_total[i]) < 1e-4f);

    // Checkpoint round-trip preserves the denoiser output.
    model.save(dir / "ckpt");
    MotionModel loaded = MotionModel::load(dir / "ckpt");
    synth::ClipData c = ds.load_clip(0, false);
    NdArray cond = make_cond_vec(model, ext, c.landmarks, 0);
    LandmarkSequence s1 = sample_motion(model, c.speech.feats, c.landmarks, cond, sched, 9);
    LandmarkSequence s2 = sample_motion(loaded, c.speech.feats, c.landmarks, cond, sched, 9);
    CHECK(std::memcmp(s1.coords.data(), s2.coords.data(),
                      static_cast<size_t>(s1.coords.numel()) * sizeof(float)) == 0);
    fs::remove_all(dir);
}

TEST_CASE("metrics: sync proxy on ground truth and shuffled speech") {
    LandmarkTopology topo = LandmarkTopology::preset("desk-48");
    synth::IdentityParams id = synth::sample_identity(0, 5);
    synth::SpeechTrack speech = synth::synth_speech(100, 23);
    LandmarkSequence seq = synth::landmarks_from(id, speech, topo);

    metrics::SyncResult r = metrics::sync_corr_landmarks(seq, speech.energy);
    CHECK(r.defined);
    CHECK(r.r == doctest::Approx(1.0).epsilon(1e-6));

    // Constant aperture -> undefined, flagged.
    SpeechFeature dummy;
    LandmarkSequence flat = seq;
    for (int t = 1; t < flat.n_frames(); t++)
        for (int p = 0; p < flat.n_points(); p++) {
            flat.coords.at(t, p, 0) = flat.coords.at(0, p, 0);
            flat.coords.at(t, p, 1) = flat.coords.at(0, p, 1);
        }
    metrics::SyncResult rc = metrics::sync_corr_clip(synth::render_clip(flat, id, 64), flat, speech.energy);
    // A constant clip has zero aperture variance.
    CHECK_FALSE(rc.defined);

    // Shuffled speech decorrelates in expectation.
    nn::Rng rng(9);
    double mean_abs = 0;
    const int trials = 40;
    for (int k = 0; k < trials; k++) {
        NdArray shuffled = speech.energy;
        for (int i = 99; i > 0; i--)
            std::swap(shuffled[i], shuffled[rng.randint(i + 1)]);
        metrics::SyncResult rs = metrics::sync_corr_landmarks(seq, shuffled);
        mean_abs += std::fabs(rs.r);
    }
    mean_abs /= trials;
    CHECK(mean_abs < 0.3);
}
