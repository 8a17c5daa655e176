#include "lipsync/core/ndarray.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace lipsync {

static_assert(std::endian::native == std::endian::little,
              "container format is little-endian; big-endian hosts unsupported");

NdArray::NdArray(Shape shape, float fill) : shape_(std::move(shape)) {
    for (int d : shape_) LS_CHECK(d > 0, "NdArray: nonpositive dim in %s", shape_str(shape_).c_str());
    data_.assign(static_cast<size_t>(shape_numel(shape_)), fill);
}

NdArray NdArray::from(Shape shape, std::vector<float> values) {
    LS_CHECK(shape_numel(shape) == static_cast<int64_t>(values.size()),
             "NdArray::from: %s needs %lld values, got %zu", shape_str(shape).c_str(),
             static_cast<long long>(shape_numel(shape)), values.size());
    NdArray a;
    a.shape_ = std::move(shape);
    a.data_ = std::move(values);
    return a;
}

int64_t NdArray::offset(std::initializer_list<int> ix) const {
    LS_CHECK(ix.size() == shape_.size(), "NdArray::at: rank mismatch (%zu vs %zu)", ix.size(), shape_.size());
    int64_t off = 0;
    size_t k = 0;
    for (int i : ix) {
        off = off * shape_[k] + i;
        k++;
    }
    return off;
}

bool NdArray::all_finite() const {
    for (float v : data_)
        if (!std::isfinite(v)) return false;
    return true;
}

NdArray NdArray::reshaped(Shape new_shape) const {
    LS_CHECK(shape_numel(new_shape) == numel(), "reshape %s -> %s changes element count",
             shape_str(shape_).c_str(), shape_str(new_shape).c_str());
    NdArray out;
    out.shape_ = std::move(new_shape);
    out.data_ = data_;
    return out;
}

void NdArray::save(const std::filesystem::path& file, const std::string& tag) const {
    std::string safe_tag = tag.empty() ? "untagged" : tag;
    for (char& c : safe_tag)
        if (isspace(static_cast<unsigned char>(c))) c = '_';

    std::ostringstream header;
    header << "f32nd 1 f32 le " << rank() << " ";
    for (int i = 0; i < rank(); i++) header << (i ? "," : "") << shape_[static_cast<size_t>(i)];
    if (rank() == 0) header << "-";
    header << " " << safe_tag << " " << data_.size() * sizeof(float) << "\n";

    std::ofstream out(file, std::ios::binary);
    if (!out) throw IoError("cannot open for write: " + file.string());
    out << header.str();
    out.write(reinterpret_cast<const char*>(data_.data()),
              static_cast<std::streamsize>(data_.size() * sizeof(float)));
    if (!out) throw IoError("write failed: " + file.string());
}

NdArray NdArray::load(const std::filesystem::path& file, std::string* tag_out) {
    std::ifstream in(file, std::ios::binary);
    if (!in) throw IoError("cannot open: " + file.string());

    std::string line;
    if (!std::getline(in, line)) throw IoError("empty container file: " + file.string());
    std::istringstream hs(line);
    std::string magic, version, dtype, endian, shape_field, tag;
    int rank = -1;
    uint64_t payload = 0;
    hs >> magic >> version >> dtype >> endian >> rank >> shape_field >> tag >> payload;
    if (!hs || magic != "f32nd" || version != "1" || dtype != "f32" || endian != "le")
        throw IoError("bad container header in " + file.string() + ": " + line);
    LS_CHECK(rank >= 0 && rank <= 8, "bad rank %d in %s", rank, file.string().c_str());

    Shape shape;
    if (rank > 0) {
        std::istringstream ss(shape_field);
        std::string piece;
        while (std::getline(ss, piece, ',')) shape.push_back(std::stoi(piece));
        LS_CHECK(static_cast<int>(shape.size()) == rank, "shape/rank mismatch in %s", file.string().c_str());
    }
    LS_CHECK(payload == static_cast<uint64_t>(shape_numel(shape)) * sizeof(float),
             "payload size mismatch in %s", file.string().c_str());

    NdArray a;
    a.shape_ = shape;
    a.data_.resize(static_cast<size_t>(shape_numel(shape)));
    in.read(reinterpret_cast<char*>(a.data_.data()), static_cast<std::streamsize>(payload));
    if (in.gcount() != static_cast<std::streamsize>(payload))
        throw IoError("truncated payload in " + file.string());
    if (tag_out) *tag_out = tag;
    return a;
}

uint64_t file_checksum(const std::filesystem::path& file) {
    std::ifstream in(file, std::ios::binary);
    if (!in) throw IoError("cannot open for checksum: " + file.string());
    char buf[1 << 16];
    uint64_t h = 0xcbf29ce484222325ull;
    while (in) {
        in.read(buf, sizeof(buf));
        std::streamsize got = in.gcount();
        if (got > 0) h = fnv1a64(buf, static_cast<size_t>(got), h);
    }
    return h;
}

} // namespace lipsync
