#pragma once

// Corpus ingestion and subject-disjoint train/test partitioning.
//
// Manifest format: UTF-8 CSV, optional leading `# key=value` comment lines
// (source_tag is read from there), then the exact header
//   image_path,subject_id,eye,label,hours_post_mortem,center_x,center_y,radius_Ri
// with label in {live,post_mortem} and eye in {L,R,U}. Relative image paths
// resolve against the manifest's directory.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pmiris/common.hpp"
#include "pmiris/image.hpp"

namespace pmiris {

enum class Eye { Left, Right, Unknown };
enum class Label { Live, PostMortem };

inline const char* to_string(Label l) { return l == Label::Live ? "live" : "post_mortem"; }
inline const char* to_string(Eye e) { return e == Eye::Left ? "L" : e == Eye::Right ? "R" : "U"; }

struct IrisAnnotation {
    double center_x = 0.0;
    double center_y = 0.0;
    double radius_ri = 0.0;  // outer iris boundary radius, pixels
};

struct SampleRecord {
    std::string image_path;
    std::string subject_id;
    Eye eye = Eye::Unknown;
    Label label = Label::Live;
    double hours_post_mortem = 0.0;  // 0 for live samples
    IrisAnnotation annotation;
};

struct Dataset {
    std::vector<SampleRecord> records;
    std::string source_tag = "unspecified";

    std::set<std::string> subjects(Label l) const {
        std::set<std::string> out;
        for (const auto& r : records)
            if (r.label == l) out.insert(r.subject_id);
        return out;
    }
};

struct SplitSpec {
    int split_index = 1;  // 1-based
    std::uint64_t rng_seed = 0;
    std::set<std::string> test_subjects_live;
    std::set<std::string> test_subjects_pm;
    std::set<std::string> train_subjects_live;
    std::set<std::string> train_subjects_pm;
};

struct ManifestOptions {
    // Opening every image validates readability, the single-channel rule and
    // that the annotated center lies inside the frame. Disable only for
    // metadata-level tooling that never touches pixels.
    bool validate_images = true;
};

namespace detail {

inline std::string trim(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    std::size_t e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_csv_row(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : line) {
        if (ch == ',') {
            out.push_back(trim(cur));
            cur.clear();
        } else {
            cur.push_back(ch);
        }
    }
    out.push_back(trim(cur));
    return out;
}

inline double parse_double(const std::string& s, int row, const char* field) {
    try {
        std::size_t pos = 0;
        double v = std::stod(s, &pos);
        if (pos != s.size()) throw std::invalid_argument("trailing");
        return v;
    } catch (const std::exception&) {
        fail(ErrKind::Validation,
             "manifest row " + std::to_string(row) + ": field '" + field + "' is not a number: '" + s + "'");
    }
}

}  // namespace detail

inline constexpr const char* kManifestHeader =
    "image_path,subject_id,eye,label,hours_post_mortem,center_x,center_y,radius_Ri";

inline Dataset load_manifest(const std::string& path, const ManifestOptions& opts = {}) {
    std::ifstream in(path);
    if (!in) fail(ErrKind::Io, "manifest not found or unreadable: " + path);
    const std::filesystem::path base = std::filesystem::path(path).parent_path();

    Dataset ds;
    std::string line;
    int row = 0;
    bool header_seen = false;
    std::set<std::string> seen_paths;
    std::map<std::string, Label> subject_labels;

    while (std::getline(in, line)) {
        ++row;
        std::string t = detail::trim(line);
        if (t.empty()) continue;
        if (t[0] == '#') {
            // comment header, e.g. "# source_tag=synthetic"
            std::size_t eq = t.find('=');
            if (eq != std::string::npos) {
                std::string key = detail::trim(t.substr(1, eq - 1));
                if (key == "source_tag") ds.source_tag = detail::trim(t.substr(eq + 1));
            }
            continue;
        }
        if (!header_seen) {
            require(t == kManifestHeader, ErrKind::Validation,
                    "manifest row " + std::to_string(row) + ": bad header, expected '" +
                        std::string(kManifestHeader) + "'");
            header_seen = true;
            continue;
        }

        auto cols = detail::split_csv_row(t);
        if (cols.size() != 8)
            fail(ErrKind::Validation, "manifest row " + std::to_string(row) + ": expected 8 fields, got " +
                                          std::to_string(cols.size()));

        SampleRecord r;
        std::filesystem::path ip(cols[0]);
        r.image_path = ip.is_absolute() ? ip.string() : (base / ip).string();
        r.subject_id = cols[1];
        require(!r.subject_id.empty(), ErrKind::Validation,
                "manifest row " + std::to_string(row) + ": field 'subject_id' is empty");

        if (cols[2] == "L") r.eye = Eye::Left;
        else if (cols[2] == "R") r.eye = Eye::Right;
        else if (cols[2] == "U") r.eye = Eye::Unknown;
        else fail(ErrKind::Validation, "manifest row " + std::to_string(row) + ": field 'eye' must be L, R or U");

        if (cols[3] == "live") r.label = Label::Live;
        else if (cols[3] == "post_mortem") r.label = Label::PostMortem;
        else fail(ErrKind::Validation,
                  "manifest row " + std::to_string(row) + ": field 'label' must be live or post_mortem");

        r.hours_post_mortem = detail::parse_double(cols[4], row, "hours_post_mortem");
        r.annotation.center_x = detail::parse_double(cols[5], row, "center_x");
        r.annotation.center_y = detail::parse_double(cols[6], row, "center_y");
        r.annotation.radius_ri = detail::parse_double(cols[7], row, "radius_Ri");

        if (r.label == Label::Live && r.hours_post_mortem != 0.0)
            fail(ErrKind::Validation, "manifest row " + std::to_string(row) +
                                          ": field 'hours_post_mortem' must be 0 for a live sample");
        if (r.label == Label::PostMortem && !(r.hours_post_mortem > 0.0))
            fail(ErrKind::Validation, "manifest row " + std::to_string(row) +
                                          ": field 'hours_post_mortem' must be > 0 for a post_mortem sample");
        if (!(r.annotation.radius_ri > 0.0))
            fail(ErrKind::Validation, "manifest row " + std::to_string(row) + ": field 'radius_Ri' must be > 0");

        if (!seen_paths.insert(r.image_path).second)
            fail(ErrKind::Validation,
                 "manifest row " + std::to_string(row) + ": duplicate image_path '" + r.image_path + "'");

        auto [it, inserted] = subject_labels.emplace(r.subject_id, r.label);
        if (!inserted && it->second != r.label)
            fail(ErrKind::Validation, "manifest row " + std::to_string(row) + ": subject '" + r.subject_id +
                                          "' appears with both labels");

        if (opts.validate_images) {
            Image im = load_image_gray(r.image_path);  // errors if unreadable or multi-channel
            if (r.annotation.center_x < 0 || r.annotation.center_x > im.cols - 1 ||
                r.annotation.center_y < 0 || r.annotation.center_y > im.rows - 1)
                fail(ErrKind::Validation, "manifest row " + std::to_string(row) +
                                              ": annotation center lies outside the image bounds");
        }

        ds.records.push_back(std::move(r));
    }

    require(header_seen, ErrKind::Validation, "manifest has no header row: " + path);
    require(!ds.records.empty(), ErrKind::Validation, "manifest has no data rows: " + path);
    return ds;
}

inline void save_manifest(const Dataset& ds, const std::string& path) {
    std::ofstream out(path);
    if (!out) fail(ErrKind::Io, "cannot write manifest: " + path);
    out << "# source_tag=" << ds.source_tag << "\n" << kManifestHeader << "\n";
    const std::filesystem::path base = std::filesystem::path(path).parent_path();
    for (const auto& r : ds.records) {
        std::filesystem::path ip(r.image_path);
        std::string rel = ip.lexically_proximate(base).generic_string();
        char buf[512];
        std::snprintf(buf, sizeof(buf), "%s,%s,%s,%s,%.10g,%.10g,%.10g,%.10g", rel.c_str(),
                      r.subject_id.c_str(), to_string(r.eye), to_string(r.label), r.hours_post_mortem,
                      r.annotation.center_x, r.annotation.center_y, r.annotation.radius_ri);
        out << buf << "\n";
    }
}

// ---------------------------------------------------------------------------
// Split generation. Each split draws its test subjects per class uniformly at
// random, independently of every other split ("with replacement" across
// splits: a subject may serve as a test subject in several splits but never
// sits on both sides of one).
// ---------------------------------------------------------------------------

inline std::vector<SplitSpec> make_splits(const Dataset& ds, int n_splits, int n_test_subjects_per_class,
                                          std::uint64_t rng_seed) {
    require(n_splits >= 1, ErrKind::Config, "n_splits must be >= 1");
    require(n_test_subjects_per_class >= 1, ErrKind::Config, "n_test_subjects_per_class must be >= 1");

    auto live_set = ds.subjects(Label::Live);
    auto pm_set = ds.subjects(Label::PostMortem);
    std::vector<std::string> live(live_set.begin(), live_set.end());
    std::vector<std::string> pm(pm_set.begin(), pm_set.end());

    for (auto [cls, count] : {std::pair<const char*, std::size_t>{"live", live.size()},
                              {"post_mortem", pm.size()}}) {
        if (count <= std::size_t(n_test_subjects_per_class))
            fail(ErrKind::Config, std::string("class '") + cls + "' has " + std::to_string(count) +
                                      " subjects; need more than " +
                                      std::to_string(n_test_subjects_per_class) +
                                      " to keep a non-empty train set");
    }

    Rng rng(rng_seed);
    auto draw = [&](const std::vector<std::string>& pool, int k) {
        std::vector<std::string> tmp = pool;
        for (int i = 0; i < k; ++i) {
            std::size_t j = i + std::size_t(rng.bounded(tmp.size() - i));
            std::swap(tmp[i], tmp[j]);
        }
        return std::set<std::string>(tmp.begin(), tmp.begin() + k);
    };

    std::vector<SplitSpec> splits;
    splits.reserve(std::size_t(n_splits));
    for (int i = 1; i <= n_splits; ++i) {
        SplitSpec s;
        s.split_index = i;
        s.rng_seed = rng_seed;
        s.test_subjects_live = draw(live, n_test_subjects_per_class);
        s.test_subjects_pm = draw(pm, n_test_subjects_per_class);
        for (const auto& id : live)
            if (!s.test_subjects_live.count(id)) s.train_subjects_live.insert(id);
        for (const auto& id : pm)
            if (!s.test_subjects_pm.count(id)) s.train_subjects_pm.insert(id);
        splits.push_back(std::move(s));
    }
    return splits;
}

inline std::pair<Dataset, Dataset> materialize_split(const Dataset& ds, const SplitSpec& split) {
    std::set<std::string> known_live = ds.subjects(Label::Live);
    std::set<std::string> known_pm = ds.subjects(Label::PostMortem);
    auto check_known = [&](const std::set<std::string>& ids, const std::set<std::string>& known,
                           const char* what) {
        for (const auto& id : ids)
            if (!known.count(id))
                fail(ErrKind::Consistency, std::string("split ") + std::to_string(split.split_index) +
                                               " references unknown " + what + " subject '" + id + "'");
    };
    check_known(split.test_subjects_live, known_live, "live");
    check_known(split.train_subjects_live, known_live, "live");
    check_known(split.test_subjects_pm, known_pm, "post_mortem");
    check_known(split.train_subjects_pm, known_pm, "post_mortem");

    Dataset train, test;
    train.source_tag = test.source_tag = ds.source_tag;
    for (const auto& r : ds.records) {
        const bool is_live = r.label == Label::Live;
        const auto& test_ids = is_live ? split.test_subjects_live : split.test_subjects_pm;
        const auto& train_ids = is_live ? split.train_subjects_live : split.train_subjects_pm;
        if (test_ids.count(r.subject_id)) test.records.push_back(r);
        else if (train_ids.count(r.subject_id)) train.records.push_back(r);
        else
            fail(ErrKind::Consistency, "split " + std::to_string(split.split_index) +
                                           " does not cover subject '" + r.subject_id + "'");
    }
    return {std::move(train), std::move(test)};
}

// ---------------------------------------------------------------------------
// Split list serialization (JSON, one document per split) for auditability.
// ---------------------------------------------------------------------------

inline void save_splits(const std::vector<SplitSpec>& splits, const std::string& path) {
    nlohmann::ordered_json root;
    root["schema"] = "pmiris.splits.v1";
    root["splits"] = nlohmann::ordered_json::array();
    for (const auto& s : splits) {
        nlohmann::ordered_json j;
        j["split_index"] = s.split_index;
        j["rng_seed"] = s.rng_seed;
        j["test_subjects_live"] = s.test_subjects_live;
        j["test_subjects_pm"] = s.test_subjects_pm;
        j["train_subjects_live"] = s.train_subjects_live;
        j["train_subjects_pm"] = s.train_subjects_pm;
        root["splits"].push_back(std::move(j));
    }
    std::ofstream out(path);
    if (!out) fail(ErrKind::Io, "cannot write split list: " + path);
    out << root.dump(2) << "\n";
}

inline std::vector<SplitSpec> load_splits(const std::string& path) {
    std::ifstream in(path);
    if (!in) fail(ErrKind::Io, "split list not found: " + path);
    nlohmann::json root;
    try {
        in >> root;
    } catch (const std::exception& e) {
        fail(ErrKind::Validation, std::string("malformed split list: ") + e.what());
    }
    require(root.value("schema", "") == "pmiris.splits.v1", ErrKind::Validation,
            "split list has unknown schema: " + path);
    std::vector<SplitSpec> out;
    for (const auto& j : root.at("splits")) {
        SplitSpec s;
        s.split_index = j.at("split_index").get<int>();
        s.rng_seed = j.at("rng_seed").get<std::uint64_t>();
        auto read_set = [&](const char* key) {
            std::set<std::string> ids;
            for (const auto& v : j.at(key)) ids.insert(v.get<std::string>());
            return ids;
        };
        s.test_subjects_live = read_set("test_subjects_live");
        s.test_subjects_pm = read_set("test_subjects_pm");
        s.train_subjects_live = read_set("train_subjects_live");
        s.train_subjects_pm = read_set("train_subjects_pm");
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace pmiris
