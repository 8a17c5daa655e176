#pragma once

#include "lipsync/common.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace lipsync {

// Dense row-major float32 array with the on-disk container format used by
// every artifact (datasets, checkpoints, reports). The file layout is a
// single 8-field whitespace-separated text header terminated by '\n',
// followed by the raw little-endian float32 payload:
//
//   f32nd 1 f32 le <rank> <d0,d1,..,dk> <tag> <payload_bytes>\n
//
// One array per file. <tag> is a semantic label with no whitespace.
class NdArray {
public:
    NdArray() = default;
    explicit NdArray(Shape shape, float fill = 0.0f);
    static NdArray from(Shape shape, std::vector<float> values);

    const Shape& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_.at(static_cast<size_t>(i)); }
    int64_t numel() const { return static_cast<int64_t>(data_.size()); }
    bool empty() const { return data_.empty(); }

    float* data() { return data_.data(); }
    const float* data() const { return data_.data(); }
    std::vector<float>& vec() { return data_; }
    const std::vector<float>& vec() const { return data_; }

    float& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
    float operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

    template <typename... Ix>
    float& at(Ix... ix) {
        return data_[static_cast<size_t>(offset({static_cast<int>(ix)...}))];
    }
    template <typename... Ix>
    float at(Ix... ix) const {
        return data_[static_cast<size_t>(offset({static_cast<int>(ix)...}))];
    }

    bool same_shape(const NdArray& o) const { return shape_ == o.shape_; }
    bool all_finite() const;

    NdArray reshaped(Shape new_shape) const;

    void save(const std::filesystem::path& file, const std::string& tag) const;
    static NdArray load(const std::filesystem::path& file, std::string* tag_out = nullptr);

private:
    int64_t offset(std::initializer_list<int> ix) const;

    Shape shape_;
    std::vector<float> data_;
};

uint64_t file_checksum(const std::filesystem::path& file);

} // namespace lipsync
