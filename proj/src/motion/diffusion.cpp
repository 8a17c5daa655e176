#include "lipsync/motion/diffusion.hpp"

#include "lipsync/metrics/metrics.hpp"
#include "lipsync/nn/optim.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>

namespace lipsync::motion {

using namespace lipsync::nn;

// ---------------------------------------------------------------------------
// Noising
// ---------------------------------------------------------------------------

NdArray forward_noise(const NdArray& m0_lower, int t, const DiffusionSchedule& schedule,
                      const NdArray& noise) {
    schedule.validate();
    LS_CHECK(t >= -1 && t < schedule.T, "forward_noise: t=%d outside [-1,%d)", t, schedule.T);
    LS_CHECK(noise.shape() == m0_lower.shape(), "forward_noise: noise shape mismatch");
    if (t == -1) return m0_lower;  // before any noise: abar = 1
    const float ab = schedule.alpha_bar[static_cast<size_t>(t)];
    const float c0 = std::sqrt(ab), c1 = std::sqrt(1.0f - ab);
    NdArray out(m0_lower.shape());
    for (int64_t i = 0; i < out.numel(); i++) out[i] = c0 * m0_lower[i] + c1 * noise[i];
    return out;
}

NdArray forward_noise_step(const NdArray& m_prev, int t, const DiffusionSchedule& schedule,
                           const NdArray& noise) {
    schedule.validate();
    LS_CHECK(t >= 0 && t < schedule.T, "forward_noise_step: t=%d outside [0,%d)", t, schedule.T);
    LS_CHECK(noise.shape() == m_prev.shape(), "forward_noise_step: noise shape mismatch");
    const float a = schedule.alpha[static_cast<size_t>(t)];
    const float c0 = std::sqrt(a), c1 = std::sqrt(1.0f - a);
    NdArray out(m_prev.shape());
    for (int64_t i = 0; i < out.numel(); i++) out[i] = c0 * m_prev[i] + c1 * noise[i];
    return out;
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

namespace {

// Shared core: full_hat is [N, total*2]; gt_full constant of the same shape;
// reference_frame is the [1, total*2] row whose embedding anchors the
// identity term. The reference is embedded in the same batch as the frames
// so a perfect reconstruction yields an exactly-zero cosine gap.
DmLossTensors dm_core(Graph& g, Tensor full_hat, Tensor gt_full, Tensor reference_frame,
                      const identity::IdentityExtractor& extractor, float id_weight) {
    auto& ext = const_cast<identity::IdentityExtractor&>(extractor);

    DmLossTensors out;
    out.mse = mse_loss(full_hat, gt_full);

    const int N = full_hat.dim(0);
    Tensor batch = concat_axis0({full_hat, reference_frame});
    Tensor emb_all = ext.embed_rows(g, batch);  // [N+1, D]
    Tensor emb = slice_axis0(emb_all, 0, N);
    Tensor ref = slice_axis0(emb_all, N, N + 1);
    Tensor cos_col = matmul_nt(emb, ref);  // [N, 1]
    out.id = add_scalar(nn::scale(mean_all(cos_col), -1.0f), 1.0f);
    out.total = add(out.mse, nn::scale(out.id, id_weight));
    return out;
}

// Column permutation sending [lower_compact coords | remaining coords] to
// the canonical point order.
NdArray assembly_matrix(const LandmarkTopology& topo) {
    const int full = topo.total_points * 2;
    NdArray P({full, full});
    std::vector<int> rest;
    {
        std::vector<bool> in_lower(static_cast<size_t>(topo.total_points), false);
        for (int p : topo.lower_compact_idx) in_lower[static_cast<size_t>(p)] = true;
        for (int p = 0; p < topo.total_points; p++)
            if (!in_lower[static_cast<size_t>(p)]) rest.push_back(p);
    }
    int src = 0;
    for (int p : topo.lower_compact_idx) {
        P.at(src++, 2 * p) = 1.0f;
        P.at(src++, 2 * p + 1) = 1.0f;
    }
    for (int p : rest) {
        P.at(src++, 2 * p) = 1.0f;
        P.at(src++, 2 * p + 1) = 1.0f;
    }
    return P;
}

// Flattens a window of frames into [n, |idx|*2] picking the given points.
std::vector<float> flatten_points(const LandmarkSequence& seq, int begin, int n,
                                  const std::vector<int>& idx) {
    std::vector<float> out(static_cast<size_t>(n) * idx.size() * 2);
    for (int i = 0; i < n; i++)
        for (size_t p = 0; p < idx.size(); p++) {
            out[static_cast<size_t>(i) * idx.size() * 2 + 2 * p] = seq.coords.at(begin + i, idx[p], 0);
            out[static_cast<size_t>(i) * idx.size() * 2 + 2 * p + 1] = seq.coords.at(begin + i, idx[p], 1);
        }
    return out;
}

std::vector<int> all_points(int total) {
    std::vector<int> v(static_cast<size_t>(total));
    for (int i = 0; i < total; i++) v[static_cast<size_t>(i)] = i;
    return v;
}

} // namespace

DmLossTensors dm_loss_graph(Graph& g, Tensor m0hat_lower, const LandmarkSequence& gt, int gt_begin,
                            int n_frames, const identity::IdentityExtractor& extractor,
                            int reference_frame_idx, float id_weight, const LandmarkTopology& topo) {
    const int lower_dim = static_cast<int>(topo.lower_compact_idx.size()) * 2;
    LS_CHECK(m0hat_lower.rank() == 2 && m0hat_lower.dim(0) == n_frames && m0hat_lower.dim(1) == lower_dim,
             "dm_loss_graph: m0hat_lower must be [%d,%d]", n_frames, lower_dim);

    std::vector<int> rest;
    {
        std::vector<bool> in_lower(static_cast<size_t>(topo.total_points), false);
        for (int p : topo.lower_compact_idx) in_lower[static_cast<size_t>(p)] = true;
        for (int p = 0; p < topo.total_points; p++)
            if (!in_lower[static_cast<size_t>(p)]) rest.push_back(p);
    }
    std::vector<float> rest_flat = flatten_points(gt, gt_begin, n_frames, rest);
    Tensor rest_const = g.input({n_frames, static_cast<int>(rest.size()) * 2}, rest_flat.data());
    NdArray P = assembly_matrix(topo);
    Tensor full_hat = matmul(concat_cols({m0hat_lower, rest_const}), g.input(P.shape(), P.data()));

    std::vector<float> gt_flat = flatten_points(gt, gt_begin, n_frames, all_points(topo.total_points));
    Tensor gt_full = g.input({n_frames, topo.total_points * 2}, gt_flat.data());
    std::vector<float> ref_flat = flatten_points(gt, reference_frame_idx, 1, all_points(topo.total_points));
    Tensor ref_row = g.input({1, topo.total_points * 2}, ref_flat.data());
    return dm_core(g, full_hat, gt_full, ref_row, extractor, id_weight);
}

DmLossResult dm_loss(const LandmarkSequence& m0_hat, const LandmarkSequence& m0,
                     const identity::IdentityExtractor& extractor, int reference_frame_idx,
                     float id_weight, float mse_weight) {
    LS_CHECK(m0_hat.coords.shape() == m0.coords.shape(), "dm_loss: sequence shapes differ (%s vs %s)",
             shape_str(m0_hat.coords.shape()).c_str(), shape_str(m0.coords.shape()).c_str());
    LS_CHECK(reference_frame_idx >= 0 && reference_frame_idx < m0.n_frames(),
             "dm_loss: reference frame %d out of range", reference_frame_idx);
    const int N = m0_hat.n_frames();
    const int full_dim = m0_hat.n_points() * 2;

    Graph g;
    std::vector<float> hat_flat = flatten_points(m0_hat, 0, N, all_points(m0_hat.n_points()));
    std::vector<float> gt_flat = flatten_points(m0, 0, N, all_points(m0.n_points()));
    std::vector<float> ref_flat = flatten_points(m0, reference_frame_idx, 1, all_points(m0.n_points()));
    Tensor full_hat = g.input({N, full_dim}, hat_flat.data(), /*needs_grad=*/true);
    Tensor gt_full = g.input({N, full_dim}, gt_flat.data());
    Tensor ref_row = g.input({1, full_dim}, ref_flat.data());
    DmLossTensors t = dm_core(g, full_hat, gt_full, ref_row, extractor, id_weight);
    Tensor objective = add(nn::scale(t.mse, mse_weight), nn::scale(t.id, id_weight));
    g.backward(objective);

    DmLossResult r;
    r.total = t.total.item();
    r.mse = t.mse.item();
    r.id = t.id.item();
    r.grad_m0hat = NdArray::from(m0_hat.coords.shape(), full_hat.node()->grad);
    return r;
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

LandmarkSequence sample_motion_with(const DenoiseFn& denoise_to_x0, const LandmarkSequence& source,
                                    const DiffusionSchedule& schedule, uint64_t seed) {
    // Allow a degenerate single-step schedule (full validate() requires T>=2).
    LS_CHECK(schedule.T >= 1 && static_cast<int>(schedule.alpha.size()) == schedule.T &&
                 static_cast<int>(schedule.alpha_bar.size()) == schedule.T &&
                 static_cast<int>(schedule.beta.size()) == schedule.T,
             "sample_motion: malformed schedule");
    LS_CHECK(schedule.well_mixed() || schedule.T == 1,
             "sample_motion: schedule is not well mixed (alpha_bar[T-1]=%g >= 1e-3)",
             schedule.alpha_bar.back());
    LandmarkTopology topo = source.topology;
    topo.finalize();
    const int N = source.n_frames();
    const int lower_dim = static_cast<int>(topo.lower_compact_idx.size()) * 2;

    Rng rng(seed);
    NdArray m({N, lower_dim});
    rng.fill_gauss(m.data(), m.numel());

    NdArray x0;
    for (int t = schedule.T - 1; t >= 0; t--) {
        x0 = denoise_to_x0(m, t);
        LS_CHECK(x0.shape() == m.shape(), "sample_motion: denoiser returned %s, expected %s",
                 shape_str(x0.shape()).c_str(), shape_str(m.shape()).c_str());
        if (t == 0) break;
        const float ab_t = schedule.alpha_bar[static_cast<size_t>(t)];
        const float ab_prev = schedule.alpha_bar[static_cast<size_t>(t - 1)];
        const float beta_t = schedule.beta[static_cast<size_t>(t)];
        const float alpha_t = schedule.alpha[static_cast<size_t>(t)];
        const float c_x0 = std::sqrt(ab_prev) * beta_t / (1.0f - ab_t);
        const float c_mt = std::sqrt(alpha_t) * (1.0f - ab_prev) / (1.0f - ab_t);
        const float sigma = std::sqrt((1.0f - ab_prev) / (1.0f - ab_t) * beta_t);
        for (int64_t i = 0; i < m.numel(); i++)
            m[i] = c_x0 * x0[i] + c_mt * m[i] + sigma * rng.gauss();
    }

    // Assemble: generated lower-face compact coordinates, everything else
    // copied bit-exactly from the source.
    LandmarkSequence out;
    out.topology = source.topology;
    out.valid_len = source.valid_len;
    out.coords = source.coords;
    out.scatter_points(topo.lower_compact_idx,
                       x0.reshaped({N, static_cast<int>(topo.lower_compact_idx.size()), 2}));
    return out;
}

LandmarkSequence sample_motion(const MotionModel& model, const SpeechFeature& speech,
                               const LandmarkSequence& source, const NdArray& cond_vec,
                               const DiffusionSchedule& schedule, uint64_t seed) {
    LandmarkTopology topo = model.topology();
    const int N = source.n_frames();
    LS_CHECK(speech.n_rows() == 2 * N, "sample_motion: speech has %d rows, expected %d", speech.n_rows(),
             2 * N);
    std::vector<float> upper = flatten_points(source, 0, N, topo.upper_compact_idx);
    NdArray upper_prefix = NdArray::from({N, model.upper_dim()}, upper);
    DenoiseFn fn = [&](const NdArray& m_t, int t) {
        return model.denoise(m_t, upper_prefix, t, speech.feats, cond_vec);
    };
    return sample_motion_with(fn, source, schedule, seed);
}

NdArray make_cond_vec(const MotionModel& model, const identity::IdentityExtractor& extractor,
                      const LandmarkSequence& source, int reference_frame_idx) {
    if (model.config().cond_mode == CondMode::kIdCrossAttention) {
        LS_CHECK_CFG(extractor.config().embed_dim == model.config().id_dim,
                     "identity embedding dim %d does not match model id_dim %d",
                     extractor.config().embed_dim, model.config().id_dim);
        return extractor.embed(source.frame(reference_frame_idx)).vec;
    }
    return source.frame(reference_frame_idx).reshaped({source.n_points() * 2});
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

MotionTrainResult train_motion(MotionModel& model, const synth::Dataset& dataset,
                               const identity::IdentityExtractor& extractor,
                               const DiffusionSchedule& schedule, const MotionTrainConfig& cfg) {
    schedule.validate();
    LS_CHECK(schedule.well_mixed(), "train_motion: schedule is not well mixed");
    const std::vector<int> train_idx = dataset.train_indices();
    LS_CHECK(!train_idx.empty(), "train_motion: no training clips");
    const LandmarkTopology& topo = model.topology();
    LS_CHECK(topo.total_points == dataset.topology().total_points,
             "train_motion: model topology %s does not match dataset %s", topo.name.c_str(),
             dataset.topology().name.c_str());

    // The extractor is pre-trained and stays frozen here.
    const_cast<identity::IdentityExtractor&>(extractor).set_trainable(false);

    struct ClipCache {
        LandmarkSequence landmarks;
        NdArray speech;  // [2N, Ds]
        NdArray cond;    // conditioning vector
    };
    std::vector<ClipCache> cache;
    cache.reserve(train_idx.size());
    for (int ci : train_idx) {
        synth::ClipData data = dataset.load_clip(ci, /*with_frames=*/false);
        ClipCache c;
        c.landmarks = std::move(data.landmarks);
        c.speech = std::move(data.speech.feats.feats);
        c.cond = make_cond_vec(model, extractor, c.landmarks, 0);
        cache.push_back(std::move(c));
    }

    std::vector<Param*> params = model.params();
    Adam opt;
    Rng rng(cfg.seed);
    MotionTrainResult result;
    int64_t step = 0;

    std::vector<int> order(train_idx.size());
    for (size_t i = 0; i < order.size(); i++) order[i] = static_cast<int>(i);

    for (int epoch = 0; epoch < cfg.epochs; epoch++) {
        for (int i = static_cast<int>(order.size()) - 1; i > 0; i--)
            std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(rng.randint(i + 1))]);
        double e_total = 0, e_mse = 0, e_id = 0;
        int e_count = 0;

        for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch_clips)) {
            const size_t end = std::min(order.size(), start + static_cast<size_t>(cfg.batch_clips));
            Adam::zero_grad(params);
            for (size_t bi = start; bi < end; bi++) {
                const ClipCache& clip = cache[static_cast<size_t>(order[bi])];
                const int N = clip.landmarks.n_frames();
                const int W = std::min(cfg.window, N);
                const int s0 = W < N ? static_cast<int>(rng.randint(N - W + 1)) : 0;
                const int t = static_cast<int>(rng.randint(schedule.T));

                std::vector<float> m0 = flatten_points(clip.landmarks, s0, W, topo.lower_compact_idx);
                NdArray m0_arr = NdArray::from({W, model.lower_dim()}, std::move(m0));
                NdArray noise(m0_arr.shape());
                rng.fill_gauss(noise.data(), noise.numel());
                NdArray m_t = forward_noise(m0_arr, t, schedule, noise);

                std::vector<float> upper = flatten_points(clip.landmarks, s0, W, topo.upper_compact_idx);
                std::vector<float> speech_rows(static_cast<size_t>(2 * W) * model.config().speech_dim);
                std::memcpy(speech_rows.data(),
                            clip.speech.data() + static_cast<int64_t>(2 * s0) * model.config().speech_dim,
                            speech_rows.size() * sizeof(float));

                Graph g(true, rng.next_u64());
                MotionModel::CondTensors cond;
                cond.t = t;
                cond.speech_feats = g.input({2 * W, model.config().speech_dim}, speech_rows.data());
                cond.cond_vec = g.input({1, static_cast<int>(clip.cond.numel())}, clip.cond.data());
                Tensor x0hat = model.forward(g, g.input(m_t.shape(), m_t.data()),
                                             g.input({W, model.upper_dim()}, upper.data()), cond);
                DmLossTensors losses = dm_loss_graph(g, x0hat, clip.landmarks, s0, W, extractor,
                                                     /*reference_frame_idx=*/0, cfg.id_weight, topo);
                Tensor scaled = nn::scale(losses.total, 1.0f / static_cast<float>(end - start));
                g.backward(scaled);
                g.accumulate_param_grads();
                e_total += losses.total.item();
                e_mse += losses.mse.item();
                e_id += losses.id.item();
                e_count++;
            }
            if (cfg.grad_clip > 0) clip_grad_norm(params, cfg.grad_clip);
            step++;
            opt.step(params, inverse_sqrt_lr(cfg.base_lr, step, cfg.warmup_steps));
        }
        result.epoch_total.push_back(static_cast<float>(e_total / e_count));
        result.epoch_mse.push_back(static_cast<float>(e_mse / e_count));
        result.epoch_id.push_back(static_cast<float>(e_id / e_count));
        if (cfg.verbose && (epoch % cfg.log_every == 0 || epoch + 1 == cfg.epochs))
            std::printf("[motion] epoch %4d  total %.5f  mse %.5f  id %.5f  lr %.2e\n", epoch,
                        result.epoch_total.back(), result.epoch_mse.back(), result.epoch_id.back(),
                        inverse_sqrt_lr(cfg.base_lr, step, cfg.warmup_steps));
    }
    return result;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

MotionEvalResult eval_motion(const MotionModel& model, const synth::Dataset& dataset,
                             const std::vector<int>& clip_indices,
                             const identity::IdentityExtractor& extractor,
                             const DiffusionSchedule& schedule, uint64_t seed) {
    MotionEvalResult out;
    for (int ci : clip_indices) {
        synth::ClipData data = dataset.load_clip(ci, /*with_frames=*/false);
        NdArray cond = make_cond_vec(model, extractor, data.landmarks, 0);
        LandmarkSequence sampled = sample_motion(model, data.speech.feats, data.landmarks, cond, schedule,
                                                 seed + static_cast<uint64_t>(ci) * 977);
        metrics::SyncResult sync = metrics::sync_corr_landmarks(sampled, data.speech.energy);

        const NdArray ref = extractor.embed(data.landmarks.frame(0)).vec;
        double cos_sum = 0;
        for (int t = 0; t < sampled.n_frames(); t++) {
            const NdArray e = extractor.embed(sampled.frame(t)).vec;
            double dot = 0;
            for (int64_t i = 0; i < e.numel(); i++) dot += static_cast<double>(e[i]) * ref[i];
            cos_sum += dot;
        }
        out.per_clip_sync.push_back(sync.defined ? sync.r : 0.0);
        out.per_clip_id.push_back(cos_sum / sampled.n_frames());
        out.sync_corr += out.per_clip_sync.back();
        out.id_sim += out.per_clip_id.back();
        out.n_clips++;
    }
    if (out.n_clips > 0) {
        out.sync_corr /= out.n_clips;
        out.id_sim /= out.n_clips;
    }
    return out;
}

} // namespace lipsync::motion
