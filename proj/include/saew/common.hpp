// Shared numeric types, deterministic RNG, and error categories.
#pragma once

#include <Eigen/Dense>

#include <bit>
#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace saew {

static_assert(std::endian::native == std::endian::little,
              "on-disk formats assume a little-endian host");

// Row-major everywhere: rows are token positions, columns are feature dims,
// and the checkpoint payload layout matches memory layout directly.
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::VectorXd;
using IntMat = Eigen::Matrix<int32_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Exit-code taxonomy: ValidationError -> 1, everything else thrown -> 2.
struct ValidationError : std::runtime_error {
    explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};
struct NumericalError : std::runtime_error {
    explicit NumericalError(const std::string& msg) : std::runtime_error(msg) {}
};

inline void check_arg(bool ok, const std::string& msg) {
    if (!ok) throw ValidationError(msg);
}
inline void check_runtime(bool ok, const std::string& msg) {
    if (!ok) throw std::runtime_error(msg);
}

// Deterministic RNG. std::mt19937_64 is fully specified by the standard;
// the distribution transforms are hand-rolled here because the stdlib
// distributions are implementation-defined and would break frozen test values.
class Rng {
public:
    explicit Rng(uint64_t seed) : eng_(seed) {}

    uint64_t next_u64() { return eng_(); }

    // Uniform in [0, 1) with 53-bit resolution.
    double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Box-Muller with cached spare.
    double normal(double mu = 0.0, double sigma = 1.0) {
        if (has_spare_) {
            has_spare_ = false;
            return mu + sigma * spare_;
        }
        double u1 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        constexpr double two_pi = 6.283185307179586476925286766559;
        spare_ = r * std::sin(two_pi * u2);
        has_spare_ = true;
        return mu + sigma * r * std::cos(two_pi * u2);
    }

    // Uniform integer in [0, n) without modulo bias.
    uint64_t below(uint64_t n) {
        check_arg(n > 0, "Rng::below requires n > 0");
        const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        uint64_t x = 0;
        do {
            x = eng_();
        } while (x >= limit);
        return x % n;
    }

    Mat normal_mat(Eigen::Index rows, Eigen::Index cols, double mu = 0.0, double sigma = 1.0) {
        Mat m(rows, cols);
        for (Eigen::Index r = 0; r < rows; ++r)
            for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = normal(mu, sigma);
        return m;
    }

private:
    std::mt19937_64 eng_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// FNV-1a over raw bytes; used for token-stream hashing in run manifests.
class StreamHash {
public:
    void update(const void* data, size_t len) {
        const auto* p = static_cast<const unsigned char*>(data);
        for (size_t i = 0; i < len; ++i) {
            h_ ^= p[i];
            h_ *= 1099511628211ULL;
        }
    }
    void update_i32(int32_t v) { update(&v, sizeof(v)); }
    uint64_t digest() const { return h_; }
    std::string hex() const {
        static const char* k = "0123456789abcdef";
        std::string s(16, '0');
        uint64_t h = h_;
        for (int i = 15; i >= 0; --i) {
            s[static_cast<size_t>(i)] = k[h & 0xF];
            h >>= 4;
        }
        return s;
    }

private:
    uint64_t h_ = 1469598103934665603ULL;
};

inline bool all_finite(const Mat& m) { return m.allFinite(); }

}  // namespace saew
