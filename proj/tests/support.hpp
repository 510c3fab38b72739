// Shared test utilities: finite-difference gradient checking, deterministic
// synthetic corpora, and scratch-directory management.
#pragma once

#include "saew/common.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

namespace saew::test {

// Central finite differences of a scalar function w.r.t. every entry of a
// parameter matrix owned by the caller. Returns the max relative error
// against the provided analytic gradient, using max(1, |analytic|) scaling.
inline double fd_max_rel_error(Mat& param, const Mat& analytic,
                               const std::function<double()>& eval, double step = 1e-5) {
    double worst = 0.0;
    for (Eigen::Index r = 0; r < param.rows(); ++r) {
        for (Eigen::Index c = 0; c < param.cols(); ++c) {
            const double orig = param(r, c);
            param(r, c) = orig + step;
            const double up = eval();
            param(r, c) = orig - step;
            const double down = eval();
            param(r, c) = orig;
            const double numeric = (up - down) / (2.0 * step);
            const double denom = std::max(1.0, std::abs(analytic(r, c)));
            worst = std::max(worst, std::abs(numeric - analytic(r, c)) / denom);
        }
    }
    return worst;
}

// Deterministic English-like filler text. Enough byte-level structure for a
// small LM to learn real next-byte regularities.
inline std::string make_corpus(uint64_t seed, size_t n_bytes) {
    static const std::vector<std::string> subjects = {
        "the engineer", "a student",   "the pilot",   "my neighbor", "the report",
        "this machine", "the river",   "an old map",  "the garden",  "a quiet cat",
        "the library",  "our teacher", "the captain", "a small bird", "the signal"};
    static const std::vector<std::string> verbs = {
        "describes", "follows",  "measures", "ignores",  "repairs",  "watches",
        "compares",  "records",  "improves", "examines", "collects", "reaches"};
    static const std::vector<std::string> objects = {
        "the narrow road",  "a clear answer",  "the open window", "an early result",
        "the long winter",  "a simple pattern", "the final test",  "a bright light",
        "the second draft", "a steady rhythm",  "the old bridge",  "a common error"};
    static const std::vector<std::string> tails = {
        "with great care",   "before the storm", "after midnight",  "without delay",
        "in the morning",    "near the station", "for many years",  "under pressure",
        "against the wind",  "beyond the hills"};
    Rng rng(seed);
    std::string out;
    out.reserve(n_bytes + 128);
    while (out.size() < n_bytes) {
        out += subjects[rng.below(subjects.size())];
        out += ' ';
        out += verbs[rng.below(verbs.size())];
        out += ' ';
        out += objects[rng.below(objects.size())];
        if (rng.uniform() < 0.55) {
            out += ' ';
            out += tails[rng.below(tails.size())];
        }
        if (rng.uniform() < 0.12) {
            out += ", and ";
            out += subjects[rng.below(subjects.size())];
            out += ' ';
            out += verbs[rng.below(verbs.size())];
            out += " it";
        }
        out += rng.uniform() < 0.85 ? ". " : ".\n";
    }
    out.resize(n_bytes);
    return out;
}

inline std::string write_corpus_file(const std::string& path, uint64_t seed, size_t n_bytes) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    const std::string text = make_corpus(seed, n_bytes);
    f.write(text.data(), static_cast<std::streamsize>(text.size()));
    return path;
}

// Per-test scratch directory under the build tree; wiped on construction.
class ScratchDir {
public:
    explicit ScratchDir(const std::string& name)
        : path_(std::filesystem::temp_directory_path() / ("saew_test_" + name)) {
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~ScratchDir() { std::filesystem::remove_all(path_); }
    std::string str() const { return path_.string(); }
    std::string file(const std::string& name) const { return (path_ / name).string(); }

private:
    std::filesystem::path path_;
};

inline std::string read_file_bytes(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

}  // namespace saew::test
