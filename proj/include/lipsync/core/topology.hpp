#pragma once

#include "lipsync/common.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace lipsync {

// Index partition of the landmark set. Two partitions coexist:
//   lower/upper  — which points belong to the mouth/jaw region vs the rest,
//   compact/remaining — which points the motion model sees vs bypasses.
// lip_hull_idx is the ordered outer-lip polygon used for masking.
struct LandmarkTopology {
    std::string name;
    int total_points = 0;
    std::vector<int> lower_face_idx;
    std::vector<int> upper_face_idx;
    std::vector<int> compact_idx;
    std::vector<int> remaining_idx;
    std::vector<int> lip_hull_idx;

    // Sorted intersections, cached by finalize().
    std::vector<int> lower_compact_idx;
    std::vector<int> upper_compact_idx;

    void finalize();        // computes intersections and validates invariants
    void validate() const;  // throws ValidationError on any broken invariant

    std::string to_json() const;
    static LandmarkTopology from_json(const std::string& text);
    void save(const std::filesystem::path& file) const;
    static LandmarkTopology load(const std::filesystem::path& file);

    // Built-in presets: "desk-48" and "paper-669".
    static LandmarkTopology preset(const std::string& name);
};

// Desk-48 index blocks (shared with the synthetic generator/renderer).
namespace desk48 {
constexpr int kOutlineStart = 0;   // 16 face-outline points, index k at angle -pi/2 + 2*pi*k/16
constexpr int kOutlineCount = 16;  // k in [4,11] is the jaw (lower face)
constexpr int kEyeStart = 16;      // 6 points per eye, left then right
constexpr int kEyeCount = 12;
constexpr int kBrowStart = 28;     // 2 points per brow
constexpr int kBrowCount = 4;
constexpr int kHullStart = 32;     // ordered outer-lip decagon
constexpr int kHullCount = 10;
constexpr int kInnerStart = 42;    // inner-mouth hexagon
constexpr int kInnerCount = 6;
constexpr int kTotal = 48;
} // namespace desk48

} // namespace lipsync
