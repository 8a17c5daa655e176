#include "lipsync/identity/identity_extractor.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>

namespace lipsync::identity {

using json = nlohmann::json;
using namespace lipsync::nn;

IdentityExtractorConfig IdentityExtractorConfig::desk(int n_classes) {
    IdentityExtractorConfig c;
    c.n_classes = n_classes;
    return c;
}

IdentityExtractorConfig IdentityExtractorConfig::paper(int n_classes) {
    IdentityExtractorConfig c;
    c.mlp_layers = 4;
    c.hidden_dim = 768;
    c.embed_dim = 256;
    c.n_classes = n_classes;
    c.input_points = 669;
    return c;
}

std::string IdentityExtractorConfig::to_json() const {
    json j = {{"mlp_layers", mlp_layers}, {"hidden_dim", hidden_dim},   {"embed_dim", embed_dim},
              {"margin", margin},         {"scale", scale},             {"n_classes", n_classes},
              {"input_points", input_points}};
    return j.dump();
}

IdentityExtractorConfig IdentityExtractorConfig::from_json(const std::string& text) {
    json j = json::parse(text);
    IdentityExtractorConfig c;
    c.mlp_layers = j.at("mlp_layers").get<int>();
    c.hidden_dim = j.at("hidden_dim").get<int>();
    c.embed_dim = j.at("embed_dim").get<int>();
    c.margin = j.at("margin").get<float>();
    c.scale = j.at("scale").get<float>();
    c.n_classes = j.at("n_classes").get<int>();
    c.input_points = j.at("input_points").get<int>();
    return c;
}

IdentityExtractor::IdentityExtractor(const IdentityExtractorConfig& cfg, uint64_t seed)
    : cfg_(cfg), class_weights_("idext.classw", {cfg.n_classes, cfg.embed_dim}) {
    LS_CHECK(cfg.mlp_layers >= 2, "IdentityExtractor: need at least 2 MLP layers");
    LS_CHECK(cfg.margin > 0.0f && cfg.scale > 1.0f, "IdentityExtractor: need margin>0, scale>1");
    Rng rng(seed);
    const int in_dim = cfg.input_points * 2;
    for (int l = 0; l < cfg.mlp_layers; l++) {
        const int cin = l == 0 ? in_dim : cfg.hidden_dim;
        const int cout = l == cfg.mlp_layers - 1 ? cfg.embed_dim : cfg.hidden_dim;
        layers_.emplace_back(strf("idext.mlp%d", l), cin, cout, rng);
    }
    class_weights_.init_gauss(rng, 0.05f);
}

std::vector<Param*> IdentityExtractor::params() {
    std::vector<Param*> out = embed_params();
    out.push_back(&class_weights_);
    return out;
}

std::vector<Param*> IdentityExtractor::embed_params() {
    std::vector<Param*> out;
    for (auto& l : layers_) l.collect(out);
    return out;
}

Tensor IdentityExtractor::embed_rows(Graph& g, Tensor flat_frames) {
    LS_CHECK(flat_frames.rank() == 2 && flat_frames.dim(1) == cfg_.input_points * 2,
             "embed_rows: expected [B,%d], got %s", cfg_.input_points * 2,
             shape_str(flat_frames.shape()).c_str());
    Tensor h = flat_frames;
    for (size_t l = 0; l < layers_.size(); l++) {
        h = layers_[l](g, h);
        if (l + 1 < layers_.size()) h = relu(h);
    }
    return l2_normalize_rows(h);
}

IdentityEmbedding IdentityExtractor::embed(const NdArray& landmarks_frame) const {
    LS_CHECK(landmarks_frame.numel() == cfg_.input_points * 2, "embed: expected %d coords, got %lld",
             cfg_.input_points * 2, static_cast<long long>(landmarks_frame.numel()));
    LS_CHECK(landmarks_frame.all_finite(), "embed: non-finite landmark input");
    NdArray batch = landmarks_frame.reshaped({1, cfg_.input_points * 2});
    NdArray out = embed_batch(batch);
    IdentityEmbedding e;
    e.vec = out.reshaped({cfg_.embed_dim});
    return e;
}

NdArray IdentityExtractor::embed_batch(const NdArray& frames) const {
    LS_CHECK(frames.all_finite(), "embed_batch: non-finite landmark input");
    const int per = cfg_.input_points * 2;
    LS_CHECK(frames.numel() % per == 0, "embed_batch: size not divisible by %d", per);
    const int B = static_cast<int>(frames.numel() / per);
    auto* self = const_cast<IdentityExtractor*>(this);
    Graph g(false, 0);
    Tensor x = g.input({B, per}, frames.data());
    Tensor e = self->embed_rows(g, x);
    return NdArray::from({B, cfg_.embed_dim}, e.node()->val);
}

Tensor IdentityExtractor::normalized_class_weights(Graph& g) {
    return l2_normalize_rows(g.param(class_weights_));
}

void IdentityExtractor::save(const std::filesystem::path& dir, const std::string& extra_meta) {
    json meta = json::parse(extra_meta);
    meta["kind"] = "identity_extractor";
    meta["config"] = json::parse(cfg_.to_json());
    save_params(dir, params(), meta.dump());
}

IdentityExtractor IdentityExtractor::load(const std::filesystem::path& dir) {
    json meta = json::parse(load_checkpoint_meta(dir));
    LS_CHECK_CFG(meta.value("kind", "") == "identity_extractor", "not an identity extractor checkpoint: %s",
                 dir.string().c_str());
    IdentityExtractor model(IdentityExtractorConfig::from_json(meta.at("config").dump()), 0);
    load_params(dir, model.params());
    return model;
}

void IdentityExtractor::set_trainable(bool trainable) {
    for (Param* p : params()) p->trainable = trainable;
}

static void check_unit_rows(const NdArray& m, const char* what) {
    const int R = m.dim(0), C = m.dim(1);
    for (int r = 0; r < R; r++) {
        double s = 0;
        for (int c = 0; c < C; c++) s += static_cast<double>(m.at(r, c)) * m.at(r, c);
        LS_CHECK(std::fabs(std::sqrt(s) - 1.0) < 1e-3, "%s row %d is not unit-norm (%.6f)", what, r,
                 std::sqrt(s));
    }
}

Tensor arcface_loss(Graph& g, Tensor embeddings, const std::vector<int>& labels, Tensor class_weights,
                    float margin, float scale) {
    LS_CHECK(embeddings.graph() == &g && class_weights.graph() == &g,
             "arcface_loss: tensors belong to a different graph");
    LS_CHECK(embeddings.rank() == 2 && class_weights.rank() == 2 &&
                 embeddings.dim(1) == class_weights.dim(1),
             "arcface_loss: dim mismatch %s vs %s", shape_str(embeddings.shape()).c_str(),
             shape_str(class_weights.shape()).c_str());
    const int n_classes = class_weights.dim(0);
    for (int lab : labels)
        LS_CHECK(lab >= 0 && lab < n_classes, "arcface_loss: label %d out of range [0,%d)", lab, n_classes);
    Tensor cos = matmul_nt(embeddings, class_weights);
    Tensor adjusted = margin > 0.0f ? arcface_adjust(cos, labels, margin) : cos;
    return cross_entropy_rows(nn::scale(std::move(adjusted), scale), labels);
}

ArcfaceResult arcface_loss_value(const NdArray& embeddings, const std::vector<int>& labels,
                                 const NdArray& class_weights, float margin, float scale) {
    check_unit_rows(embeddings, "arcface embeddings");
    check_unit_rows(class_weights, "arcface class weights");
    Graph g;
    Tensor e = g.input(embeddings.shape(), embeddings.data(), /*needs_grad=*/true);
    Tensor w = g.input(class_weights.shape(), class_weights.data());
    Tensor loss = arcface_loss(g, e, labels, w, margin, scale);
    g.backward(loss);
    ArcfaceResult r;
    r.loss = loss.item();
    r.grad_embeddings = NdArray::from(embeddings.shape(), e.node()->grad);
    return r;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

namespace {

struct FrameSamples {
    std::vector<float> flat;  // [n, 2L]
    std::vector<int> labels;
    int per = 0;
    int n() const { return static_cast<int>(labels.size()); }
};

FrameSamples collect_frames(const synth::Dataset& ds, const std::vector<int>& clip_indices, int stride) {
    FrameSamples s;
    s.per = ds.topology().total_points * 2;
    for (int ci : clip_indices) {
        synth::ClipData clip = ds.load_clip(ci, /*with_frames=*/false);
        for (int t = 0; t < clip.landmarks.n_frames(); t += stride) {
            const float* src = clip.landmarks.coords.data() + static_cast<int64_t>(t) * s.per;
            s.flat.insert(s.flat.end(), src, src + s.per);
            s.labels.push_back(clip.id_label);
        }
    }
    return s;
}

} // namespace

float verification_accuracy(const IdentityExtractor& model, const synth::Dataset& dataset,
                            const std::vector<int>& clip_indices, int pairs, uint64_t seed) {
    LS_CHECK(!clip_indices.empty(), "verification_accuracy: no clips");
    FrameSamples s = collect_frames(dataset, clip_indices, /*stride=*/5);
    NdArray flat = NdArray::from({s.n(), s.per}, s.flat);
    NdArray emb = model.embed_batch(flat);
    const int D = emb.dim(1);

    Rng rng(seed);
    auto cosine = [&](int i, int j) {
        double d = 0;
        for (int k = 0; k < D; k++) d += static_cast<double>(emb.at(i, k)) * emb.at(j, k);
        return d;
    };
    std::vector<double> same, diff;
    int guard = 0;
    while ((static_cast<int>(same.size()) < pairs || static_cast<int>(diff.size()) < pairs) &&
           guard++ < pairs * 50) {
        const int i = static_cast<int>(rng.randint(s.n()));
        const int j = static_cast<int>(rng.randint(s.n()));
        if (i == j) continue;
        if (s.labels[static_cast<size_t>(i)] == s.labels[static_cast<size_t>(j)]) {
            if (static_cast<int>(same.size()) < pairs) same.push_back(cosine(i, j));
        } else {
            if (static_cast<int>(diff.size()) < pairs) diff.push_back(cosine(i, j));
        }
    }
    LS_CHECK(!same.empty() && !diff.empty(), "verification_accuracy: could not sample both pair kinds");

    // Threshold at the equal-error-rate point.
    std::vector<double> all = same;
    all.insert(all.end(), diff.begin(), diff.end());
    std::sort(all.begin(), all.end());
    double best_gap = 1e9, best_acc = 0;
    for (double t : all) {
        double frr = 0, far = 0;
        for (double v : same) frr += v < t ? 1 : 0;
        for (double v : diff) far += v >= t ? 1 : 0;
        frr /= static_cast<double>(same.size());
        far /= static_cast<double>(diff.size());
        if (std::fabs(frr - far) < best_gap) {
            best_gap = std::fabs(frr - far);
            best_acc = 1.0 - 0.5 * (frr + far);
        }
    }
    return static_cast<float>(best_acc);
}

IdentityTrainResult train_identity(IdentityExtractor& model, const synth::Dataset& dataset,
                                   const IdentityTrainConfig& cfg) {
    std::vector<int> train_idx = dataset.train_indices();
    std::vector<int> holdout_idx = dataset.holdout_indices();
    if (holdout_idx.empty()) holdout_idx = train_idx;

    // The margin loss needs class structure to be meaningful.
    LS_CHECK(dataset.params().n_ids >= 2, "train_identity: dataset has a single identity");
    LS_CHECK(dataset.params().n_ids <= model.config().n_classes,
             "train_identity: %d identities exceed configured n_classes=%d", dataset.params().n_ids,
             model.config().n_classes);

    FrameSamples samples = collect_frames(dataset, train_idx, /*stride=*/1);
    std::vector<Param*> params = model.params();
    Adam opt;
    Rng rng(cfg.seed);

    IdentityTrainResult result;
    std::vector<int> order(static_cast<size_t>(samples.n()));
    for (int i = 0; i < samples.n(); i++) order[static_cast<size_t>(i)] = i;

    for (int epoch = 0; epoch < cfg.epochs; epoch++) {
        // Fisher-Yates with our deterministic rng.
        for (int i = samples.n() - 1; i > 0; i--)
            std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(rng.randint(i + 1))]);

        double epoch_loss = 0;
        int batches = 0;
        for (int start = 0; start + 1 < samples.n(); start += cfg.batch_size) {
            const int B = std::min(cfg.batch_size, samples.n() - start);
            std::vector<float> xb(static_cast<size_t>(B) * samples.per);
            std::vector<int> yb(static_cast<size_t>(B));
            for (int b = 0; b < B; b++) {
                const int si = order[static_cast<size_t>(start + b)];
                std::memcpy(xb.data() + static_cast<size_t>(b) * samples.per,
                            samples.flat.data() + static_cast<size_t>(si) * samples.per,
                            static_cast<size_t>(samples.per) * sizeof(float));
                yb[static_cast<size_t>(b)] = samples.labels[static_cast<size_t>(si)];
            }
            Adam::zero_grad(params);
            Graph g(true, rng.next_u64());
            Tensor x = g.input({B, samples.per}, xb.data());
            Tensor emb = model.embed_rows(g, x);
            Tensor loss = arcface_loss(g, emb, yb, model.normalized_class_weights(g),
                                       model.config().margin, model.config().scale);
            g.backward(loss);
            g.accumulate_param_grads();
            opt.step(params, cfg.lr);
            epoch_loss += loss.item();
            batches++;
        }
        result.epoch_loss.push_back(static_cast<float>(epoch_loss / std::max(1, batches)));
        result.epoch_verification.push_back(
            verification_accuracy(model, dataset, holdout_idx, /*pairs=*/200, cfg.seed + 17));
        if (cfg.verbose)
            std::printf("[identity] epoch %3d  loss %.4f  verif %.4f\n", epoch,
                        result.epoch_loss.back(), result.epoch_verification.back());
    }
    result.final_verification =
        verification_accuracy(model, dataset, holdout_idx, /*pairs=*/500, cfg.seed + 31);
    return result;
}

} // namespace lipsync::identity
