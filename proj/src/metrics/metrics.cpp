#include "lipsync/metrics/metrics.hpp"

#include "lipsync/nn/optim.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

namespace lipsync::metrics {

using json = nlohmann::json;
using namespace lipsync::nn;

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
    LS_CHECK(a.size() == b.size() && a.size() >= 2, "pearson: need two equal-length series");
    const double n = static_cast<double>(a.size());
    double ma = 0, mb = 0;
    for (size_t i = 0; i < a.size(); i++) {
        ma += a[i];
        mb += b[i];
    }
    ma /= n;
    mb /= n;
    double sab = 0, saa = 0, sbb = 0;
    for (size_t i = 0; i < a.size(); i++) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    if (saa <= 0 || sbb <= 0) return std::nan("");
    return sab / std::sqrt(saa * sbb);
}

double psnr(const NdArray& a, const NdArray& b) {
    LS_CHECK(a.shape() == b.shape(), "psnr: shape mismatch %s vs %s", shape_str(a.shape()).c_str(),
             shape_str(b.shape()).c_str());
    double mse = 0;
    for (int64_t i = 0; i < a.numel(); i++) {
        const double d = static_cast<double>(a[i]) - b[i];
        mse += d * d;
    }
    mse /= static_cast<double>(a.numel());
    if (mse <= 0) return 99.0;
    return std::min(99.0, 10.0 * std::log10(1.0 / mse));
}

double ssim(const NdArray& a, const NdArray& b, int window) {
    LS_CHECK(a.shape() == b.shape(), "ssim: shape mismatch");
    LS_CHECK(a.rank() == 3 && a.dim(2) == 3, "ssim: expected [H,W,3] frames");
    const int H = a.dim(0), W = a.dim(1);
    LS_CHECK(window >= 3 && window % 2 == 1, "ssim: window must be odd and >= 3");
    LS_CHECK(H >= window && W >= window, "ssim: image %dx%d smaller than window %d", H, W, window);

    // Gaussian window, sigma 1.5.
    std::vector<double> g(static_cast<size_t>(window));
    const int half = window / 2;
    double gsum = 0;
    for (int i = 0; i < window; i++) {
        const double d = i - half;
        g[static_cast<size_t>(i)] = std::exp(-d * d / (2.0 * 1.5 * 1.5));
        gsum += g[static_cast<size_t>(i)];
    }
    for (double& v : g) v /= gsum;

    constexpr double C1 = 0.01 * 0.01, C2 = 0.03 * 0.03;
    double total = 0;
    int count = 0;
    for (int ch = 0; ch < 3; ch++) {
        for (int r = 0; r + window <= H; r++)
            for (int c = 0; c + window <= W; c++) {
                double mu_a = 0, mu_b = 0;
                for (int i = 0; i < window; i++)
                    for (int j = 0; j < window; j++) {
                        const double wgt = g[static_cast<size_t>(i)] * g[static_cast<size_t>(j)];
                        mu_a += wgt * a.at(r + i, c + j, ch);
                        mu_b += wgt * b.at(r + i, c + j, ch);
                    }
                double va = 0, vb = 0, cov = 0;
                for (int i = 0; i < window; i++)
                    for (int j = 0; j < window; j++) {
                        const double wgt = g[static_cast<size_t>(i)] * g[static_cast<size_t>(j)];
                        const double da = a.at(r + i, c + j, ch) - mu_a;
                        const double db = b.at(r + i, c + j, ch) - mu_b;
                        va += wgt * da * da;
                        vb += wgt * db * db;
                        cov += wgt * da * db;
                    }
                const double num = (2 * mu_a * mu_b + C1) * (2 * cov + C2);
                const double den = (mu_a * mu_a + mu_b * mu_b + C1) * (va + vb + C2);
                total += num / den;
                count++;
            }
    }
    return total / count;
}

// ---------------------------------------------------------------------------
// Sync proxy
// ---------------------------------------------------------------------------

static SyncResult sync_from_series(std::vector<double> aperture, const NdArray& energy) {
    LS_CHECK(static_cast<int>(aperture.size()) == energy.dim(0),
             "sync_corr: %zu aperture frames vs %d energy frames", aperture.size(), energy.dim(0));
    std::vector<double> e(static_cast<size_t>(energy.numel()));
    for (int64_t i = 0; i < energy.numel(); i++) e[static_cast<size_t>(i)] = energy[i];
    const double r = pearson(aperture, e);
    SyncResult out;
    if (std::isnan(r)) {
        std::fprintf(stderr, "[metrics] warning: zero-variance aperture, sync_corr undefined\n");
        out.r = std::nan("");
        out.defined = false;
    } else {
        out.r = r;
    }
    return out;
}

SyncResult sync_corr_landmarks(const LandmarkSequence& seq, const NdArray& energy) {
    return sync_from_series(synth::lip_aperture_series(seq), energy);
}

SyncResult sync_corr_clip(const VideoClip& clip, const LandmarkSequence& mask_landmarks,
                          const NdArray& energy, float dark_threshold) {
    LS_CHECK(clip.n_frames() == mask_landmarks.n_frames(), "sync_corr_clip: frame count mismatch");
    const int S = clip.height();
    std::vector<double> aperture(static_cast<size_t>(clip.n_frames()), 0.0);
    for (int t = 0; t < clip.n_frames(); t++) {
        MaskSpec mask = lip_mask_from_landmarks(mask_landmarks.frame(t), mask_landmarks.topology, S);
        int first = -1, last = -1;
        for (int r = 0; r < S; r++) {
            int dark = 0;
            for (int c = 0; c < S; c++) {
                if (mask.mask.at(r, c) < 0.5f) continue;
                const float lum = 0.299f * clip.frames.at(t, r, c, 0) + 0.587f * clip.frames.at(t, r, c, 1) +
                                  0.114f * clip.frames.at(t, r, c, 2);
                if (lum < dark_threshold) dark++;
            }
            if (dark >= 2) {
                if (first < 0) first = r;
                last = r;
            }
        }
        aperture[static_cast<size_t>(t)] = first < 0 ? 0.0 : static_cast<double>(last - first + 1);
    }
    return sync_from_series(std::move(aperture), energy);
}

// ---------------------------------------------------------------------------
// Identity probe
// ---------------------------------------------------------------------------

IdentityProbe::IdentityProbe(const IdentityProbeConfig& cfg, uint64_t seed) : cfg_(cfg) {
    Rng rng(seed);
    c1_ = Conv2d("probe.c1", 3, cfg.widths[0], 3, 2, 1, rng);
    c2_ = Conv2d("probe.c2", cfg.widths[0], cfg.widths[1], 3, 2, 1, rng);
    c3_ = Conv2d("probe.c3", cfg.widths[1], cfg.widths[2], 3, 2, 1, rng);
    head_ = Linear("probe.head", cfg.widths[2], cfg.n_classes, rng);
}

std::vector<Param*> IdentityProbe::params() {
    std::vector<Param*> out;
    c1_.collect(out);
    c2_.collect(out);
    c3_.collect(out);
    head_.collect(out);
    return out;
}

Tensor IdentityProbe::features(Graph& g, Tensor chw) {
    Tensor h = relu(c1_(g, chw));
    h = relu(c2_(g, h));
    h = relu(c3_(g, h));
    return global_avg_pool(h);
}

Tensor IdentityProbe::logits(Graph& g, Tensor chw) {
    return head_(g, reshape(features(g, chw), {1, cfg_.widths[2]}));
}

NdArray IdentityProbe::feature_of(const Frame& frame) const {
    auto* self = const_cast<IdentityProbe*>(this);
    Graph g;
    NdArray chw = chw_from_frame(frame);
    Tensor f = self->features(g, g.input(chw.shape(), chw.data()));
    return NdArray::from({cfg_.widths[2]}, f.node()->val);
}

int IdentityProbe::classify(const Frame& frame) const {
    auto* self = const_cast<IdentityProbe*>(this);
    Graph g;
    NdArray chw = chw_from_frame(frame);
    Tensor l = self->logits(g, g.input(chw.shape(), chw.data()));
    int best = 0;
    for (int c = 1; c < cfg_.n_classes; c++)
        if (l.data()[c] > l.data()[best]) best = c;
    return best;
}

void IdentityProbe::save(const std::filesystem::path& dir) {
    json meta = {{"kind", "identity_probe"},
                 {"holdout_accuracy", holdout_accuracy_},
                 {"config",
                  {{"widths", {cfg_.widths[0], cfg_.widths[1], cfg_.widths[2]}},
                   {"n_classes", cfg_.n_classes},
                   {"image_size", cfg_.image_size}}}};
    save_params(dir, params(), meta.dump());
}

IdentityProbe IdentityProbe::load(const std::filesystem::path& dir) {
    json meta = json::parse(load_checkpoint_meta(dir));
    LS_CHECK_CFG(meta.value("kind", "") == "identity_probe", "not an identity probe checkpoint: %s",
                 dir.string().c_str());
    IdentityProbeConfig cfg;
    auto widths = meta.at("config").at("widths");
    cfg.widths[0] = widths[0].get<int>();
    cfg.widths[1] = widths[1].get<int>();
    cfg.widths[2] = widths[2].get<int>();
    cfg.n_classes = meta.at("config").at("n_classes").get<int>();
    cfg.image_size = meta.at("config").at("image_size").get<int>();
    IdentityProbe probe(cfg, 0);
    load_params(dir, probe.params());
    probe.holdout_accuracy_ = meta.at("holdout_accuracy").get<float>();
    return probe;
}

IdentityProbe train_identity_probe(const synth::Dataset& dataset, const IdentityProbeConfig& cfg,
                                   int epochs, uint64_t seed, bool verbose) {
    LS_CHECK_CFG(dataset.params().n_ids <= cfg.n_classes, "probe: %d identities exceed n_classes=%d",
                 dataset.params().n_ids, cfg.n_classes);
    IdentityProbe probe(cfg, seed);

    // A few frames per clip are plenty: identities differ in palette/geometry.
    struct Sample {
        int clip, frame, label;
    };
    std::vector<Sample> train, hold;
    auto add_samples = [&](const std::vector<int>& idx, std::vector<Sample>& out, int per_clip) {
        for (int ci : idx) {
            const auto& rec = dataset.record(ci);
            for (int k = 0; k < per_clip; k++) {
                const int t = rec.n_frames <= 1 ? 0 : (k * (rec.n_frames - 1)) / std::max(1, per_clip - 1);
                out.push_back({ci, t, rec.id_label});
            }
        }
    };
    add_samples(dataset.train_indices(), train, 6);
    std::vector<int> hold_idx = dataset.holdout_indices();
    if (hold_idx.empty()) hold_idx = dataset.train_indices();
    add_samples(hold_idx, hold, 4);

    // Cache frames (small corpora at desk scale).
    std::vector<NdArray> clip_cache(static_cast<size_t>(dataset.n_clips()));
    auto chw_of = [&](int clip, int frame) {
        NdArray& cached = clip_cache[static_cast<size_t>(clip)];
        if (cached.empty()) cached = dataset.load_clip(clip, true).clip.frames;
        const int S = cached.dim(1);
        NdArray chw({3, S, S});
        for (int r = 0; r < S; r++)
            for (int c = 0; c < S; c++)
                for (int ch = 0; ch < 3; ch++) chw.at(ch, r, c) = cached.at(frame, r, c, ch);
        return chw;
    };

    std::vector<Param*> params = probe.params();
    Adam opt;
    Rng rng(seed);
    for (int epoch = 0; epoch < epochs; epoch++) {
        for (int i = static_cast<int>(train.size()) - 1; i > 0; i--)
            std::swap(train[static_cast<size_t>(i)], train[static_cast<size_t>(rng.randint(i + 1))]);
        double loss_sum = 0;
        const int B = 8;
        for (size_t start = 0; start < train.size(); start += B) {
            Adam::zero_grad(params);
            double batch_loss = 0;
            const size_t end = std::min(train.size(), start + B);
            for (size_t i = start; i < end; i++) {
                Graph g(true, rng.next_u64());
                NdArray chw = chw_of(train[i].clip, train[i].frame);
                Tensor l = probe.logits(g, g.input(chw.shape(), chw.data()));
                Tensor loss = scale(cross_entropy_rows(l, {train[i].label}),
                                    1.0f / static_cast<float>(end - start));
                g.backward(loss);
                g.accumulate_param_grads();
                batch_loss += loss.item();
            }
            opt.step(params, 2e-3f);
            loss_sum += batch_loss;
        }
        int correct = 0;
        for (const Sample& s : hold)
            if (probe.classify(dataset.load_clip(s.clip, true).clip.frame(s.frame)) == s.label) correct++;
        probe.holdout_accuracy_ = static_cast<float>(correct) / static_cast<float>(hold.size());
        if (verbose)
            std::printf("[probe] epoch %d  loss %.4f  holdout acc %.3f\n", epoch, loss_sum,
                        probe.holdout_accuracy_);
        if (probe.holdout_accuracy_ >= 0.999f && epoch >= 1) break;
    }
    return probe;
}

double id_sim(const VideoClip& generated, const VideoClip& reference, const IdentityProbe& probe) {
    LS_CHECK_CFG(probe.holdout_accuracy() >= 0.95f,
                 "id_sim: probe holdout accuracy %.3f below required 0.95 (train the probe first)",
                 probe.holdout_accuracy());
    LS_CHECK(generated.n_frames() == reference.n_frames(), "id_sim: clip lengths differ");
    double total = 0;
    for (int t = 0; t < generated.n_frames(); t++) {
        NdArray fg = probe.feature_of(generated.frame(t));
        NdArray fr = probe.feature_of(reference.frame(t));
        double dot = 0, na = 0, nb = 0;
        for (int64_t i = 0; i < fg.numel(); i++) {
            dot += static_cast<double>(fg[i]) * fr[i];
            na += static_cast<double>(fg[i]) * fg[i];
            nb += static_cast<double>(fr[i]) * fr[i];
        }
        total += dot / std::max(1e-12, std::sqrt(na * nb));
    }
    return total / generated.n_frames();
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

EvalReport aggregate(std::vector<ClipEval> per_clip, const std::string& header) {
    EvalReport r;
    r.header = header;
    r.per_clip = std::move(per_clip);
    r.n_clips = static_cast<int>(r.per_clip.size());
    int sync_count = 0;
    for (const ClipEval& c : r.per_clip) {
        r.psnr += c.psnr;
        r.ssim += c.ssim;
        r.id_sim += c.id_sim;
        if (c.sync_defined) {
            r.sync_corr += c.sync_corr;
            sync_count++;
        }
    }
    if (r.n_clips > 0) {
        r.psnr /= r.n_clips;
        r.ssim /= r.n_clips;
        r.id_sim /= r.n_clips;
    }
    r.sync_corr = sync_count > 0 ? r.sync_corr / sync_count : std::nan("");
    return r;
}

std::string EvalReport::to_json() const {
    json per = json::array();
    for (const ClipEval& c : per_clip)
        per.push_back({{"name", c.name},
                       {"psnr", c.psnr},
                       {"ssim", c.ssim},
                       {"id_sim", c.id_sim},
                       {"sync_corr", c.sync_defined ? json(c.sync_corr) : json()},
                       {"sync_defined", c.sync_defined}});
    json j = {{"header", header}, {"n_clips", n_clips},       {"psnr", psnr},
              {"ssim", ssim},     {"id_sim", id_sim},         {"sync_corr", sync_corr},
              {"per_clip", per}};
    return j.dump(2);
}

std::string EvalReport::to_text() const {
    std::string out;
    out += "# " + header + "\n";
    out += strf("%-12s %8s %8s %8s %10s\n", "clip", "psnr", "ssim", "id_sim", "sync_corr");
    for (const ClipEval& c : per_clip)
        out += strf("%-12s %8.3f %8.4f %8.4f %10s\n", c.name.c_str(), c.psnr, c.ssim, c.id_sim,
                    c.sync_defined ? strf("%.4f", c.sync_corr).c_str() : "undef");
    out += strf("%-12s %8.3f %8.4f %8.4f %10.4f   (mean over %d clips)\n", "ALL", psnr, ssim, id_sim,
                sync_corr, n_clips);
    return out;
}

void EvalReport::save(const std::filesystem::path& json_file) const {
    std::ofstream out(json_file);
    if (!out) throw IoError("cannot write report: " + json_file.string());
    out << to_json() << "\n";
}

} // namespace lipsync::metrics
