#include "lipsync/nn/layers.hpp"
#include "lipsync/core/ndarray.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <fstream>

namespace lipsync::nn {

using json = nlohmann::json;

Tensor MultiheadAttention::operator()(Graph& g, Tensor q_in, Tensor kv_in, float dropout_p) {
    LS_CHECK(q_in.rank() == 2 && q_in.dim(1) == dim, "attention: q_in must be [N,%d]", dim);
    LS_CHECK(kv_in.rank() == 2 && kv_in.dim(1) == dim, "attention: kv_in must be [M,%d]", dim);
    Tensor q = wq(g, q_in);
    Tensor k = wk(g, kv_in);
    Tensor v = wv(g, kv_in);
    const int dh = dim / heads;
    const float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(dh));
    std::vector<Tensor> head_outs;
    head_outs.reserve(static_cast<size_t>(heads));
    for (int h = 0; h < heads; h++) {
        Tensor qh = slice_cols(q, h * dh, (h + 1) * dh);
        Tensor kh = slice_cols(k, h * dh, (h + 1) * dh);
        Tensor vh = slice_cols(v, h * dh, (h + 1) * dh);
        Tensor scores = scale(matmul_nt(qh, kh), inv_sqrt);
        Tensor attn = softmax_rows(scores);
        if (dropout_p > 0.0f) attn = dropout(attn, dropout_p);
        head_outs.push_back(matmul(attn, vh));
    }
    return wo(g, concat_cols(head_outs));
}

void save_params(const std::filesystem::path& dir, const std::vector<Param*>& params,
                 const std::string& meta_json) {
    std::filesystem::create_directories(dir / "params");
    json meta = meta_json.empty() ? json::object() : json::parse(meta_json);
    json plist = json::array();
    for (const Param* p : params) {
        LS_CHECK(!p->name.empty(), "save_params: unnamed parameter");
        NdArray::from(p->shape, p->w).save(dir / "params" / (p->name + ".f32nd"), p->name);
        plist.push_back({{"name", p->name}, {"shape", p->shape}});
    }
    meta["params"] = plist;
    std::ofstream out(dir / "meta.json");
    if (!out) throw IoError("cannot write checkpoint meta: " + (dir / "meta.json").string());
    out << meta.dump(2) << "\n";
}

std::string load_checkpoint_meta(const std::filesystem::path& dir) {
    std::ifstream in(dir / "meta.json");
    if (!in) throw IoError("cannot read checkpoint meta: " + (dir / "meta.json").string());
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

std::string load_params(const std::filesystem::path& dir, const std::vector<Param*>& params) {
    const std::string meta = load_checkpoint_meta(dir);
    for (Param* p : params) {
        NdArray a = NdArray::load(dir / "params" / (p->name + ".f32nd"));
        LS_CHECK(a.shape() == p->shape, "checkpoint param %s: shape %s, model expects %s", p->name.c_str(),
                 shape_str(a.shape()).c_str(), shape_str(p->shape).c_str());
        p->w = a.vec();
    }
    return meta;
}

std::vector<float> sinusoidal_embedding(float position, int dim, float max_period) {
    std::vector<float> out(static_cast<size_t>(dim));
    const int half = dim / 2;
    for (int i = 0; i < half; i++) {
        const float freq = std::exp(-std::log(max_period) * static_cast<float>(i) / static_cast<float>(half));
        out[static_cast<size_t>(i)] = std::sin(position * freq);
        out[static_cast<size_t>(half + i)] = std::cos(position * freq);
    }
    if (dim % 2 == 1) out[static_cast<size_t>(dim - 1)] = 0.0f;
    return out;
}

} // namespace lipsync::nn
