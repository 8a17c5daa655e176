#include "lipsync/core/topology.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <fstream>
#include <set>

namespace lipsync {

using json = nlohmann::json;

static std::vector<int> intersect_sorted(std::vector<int> a, std::vector<int> b) {
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    std::vector<int> out;
    std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(out));
    return out;
}

void LandmarkTopology::finalize() {
    validate();
    lower_compact_idx = intersect_sorted(lower_face_idx, compact_idx);
    upper_compact_idx = intersect_sorted(upper_face_idx, compact_idx);
}

static void check_partition(const std::vector<int>& a, const std::vector<int>& b, int total,
                            const char* a_name, const char* b_name) {
    std::set<int> seen;
    for (int i : a) {
        LS_CHECK(i >= 0 && i < total, "topology: %s index %d out of range [0,%d)", a_name, i, total);
        LS_CHECK(seen.insert(i).second, "topology: duplicate index %d in %s", i, a_name);
    }
    for (int i : b) {
        LS_CHECK(i >= 0 && i < total, "topology: %s index %d out of range [0,%d)", b_name, i, total);
        LS_CHECK(seen.insert(i).second, "topology: index %d in both %s and %s", i, a_name, b_name);
    }
    LS_CHECK(static_cast<int>(seen.size()) == total, "topology: %s+%s cover %zu of %d points",
             a_name, b_name, seen.size(), total);
}

void LandmarkTopology::validate() const {
    LS_CHECK(total_points > 0, "topology: total_points must be positive");
    check_partition(lower_face_idx, upper_face_idx, total_points, "lower_face", "upper_face");
    check_partition(compact_idx, remaining_idx, total_points, "compact", "remaining");
    LS_CHECK(!lip_hull_idx.empty(), "topology: empty lip hull");
    std::set<int> lower(lower_face_idx.begin(), lower_face_idx.end());
    for (int i : lip_hull_idx)
        LS_CHECK(lower.count(i), "topology: lip hull index %d not in lower face", i);
}

std::string LandmarkTopology::to_json() const {
    json j;
    j["name"] = name;
    j["total_points"] = total_points;
    j["lower_face_idx"] = lower_face_idx;
    j["upper_face_idx"] = upper_face_idx;
    j["compact_idx"] = compact_idx;
    j["remaining_idx"] = remaining_idx;
    j["lip_hull_idx"] = lip_hull_idx;
    return j.dump(2);
}

LandmarkTopology LandmarkTopology::from_json(const std::string& text) {
    json j = json::parse(text);
    LandmarkTopology t;
    t.name = j.at("name").get<std::string>();
    t.total_points = j.at("total_points").get<int>();
    t.lower_face_idx = j.at("lower_face_idx").get<std::vector<int>>();
    t.upper_face_idx = j.at("upper_face_idx").get<std::vector<int>>();
    t.compact_idx = j.at("compact_idx").get<std::vector<int>>();
    t.remaining_idx = j.at("remaining_idx").get<std::vector<int>>();
    t.lip_hull_idx = j.at("lip_hull_idx").get<std::vector<int>>();
    t.finalize();
    return t;
}

void LandmarkTopology::save(const std::filesystem::path& file) const {
    std::ofstream out(file);
    if (!out) throw IoError("cannot write topology: " + file.string());
    out << to_json() << "\n";
}

LandmarkTopology LandmarkTopology::load(const std::filesystem::path& file) {
    std::ifstream in(file);
    if (!in) throw IoError("cannot read topology: " + file.string());
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return from_json(text);
}

static LandmarkTopology make_desk48() {
    using namespace desk48;
    LandmarkTopology t;
    t.name = "desk-48";
    t.total_points = kTotal;
    // Face outline: k in [4,11] is the jaw arc (right mid -> chin -> left mid).
    for (int k = 0; k < kOutlineCount; k++) {
        if (k >= 4 && k <= 11)
            t.lower_face_idx.push_back(kOutlineStart + k);
        else
            t.upper_face_idx.push_back(kOutlineStart + k);
    }
    for (int i = 0; i < kEyeCount; i++) t.upper_face_idx.push_back(kEyeStart + i);
    for (int i = 0; i < kBrowCount; i++) t.upper_face_idx.push_back(kBrowStart + i);
    for (int i = 0; i < kHullCount; i++) {
        t.lower_face_idx.push_back(kHullStart + i);
        t.lip_hull_idx.push_back(kHullStart + i);
    }
    for (int i = 0; i < kInnerCount; i++) t.lower_face_idx.push_back(kInnerStart + i);

    // remaining = brows + upper half of the outline; everything else is compact.
    std::set<int> remaining;
    for (int k = 0; k < kOutlineCount; k++)
        if (!(k >= 4 && k <= 11)) remaining.insert(kOutlineStart + k);
    for (int i = 0; i < kBrowCount; i++) remaining.insert(kBrowStart + i);
    for (int i = 0; i < kTotal; i++) {
        if (remaining.count(i))
            t.remaining_idx.push_back(i);
        else
            t.compact_idx.push_back(i);
    }
    t.finalize();
    return t;
}

static LandmarkTopology make_paper669() {
    // Contiguous ranges; the source material never enumerates the real split,
    // so this preset exists for shape checking only.
    LandmarkTopology t;
    t.name = "paper-669";
    t.total_points = 669;
    for (int i = 0; i < 669; i++) {
        (i < 300 ? t.lower_face_idx : t.upper_face_idx).push_back(i);
        (i < 411 ? t.compact_idx : t.remaining_idx).push_back(i);
    }
    for (int i = 0; i < 20; i++) t.lip_hull_idx.push_back(i);
    t.finalize();
    return t;
}

LandmarkTopology LandmarkTopology::preset(const std::string& name) {
    if (name == "desk-48") return make_desk48();
    if (name == "paper-669") return make_paper669();
    throw ConfigError("unknown topology preset: " + name + " (expected desk-48 or paper-669)");
}

} // namespace lipsync
