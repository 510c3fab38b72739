// Lightweight adaptation mechanisms: low-rank linear skip, small MLP skip,
// and LoRA wraps for arbitrary weight matrices. Every adapter is an exact
// identity at initialization.
#pragma once

#include "saew/autodiff.hpp"
#include "saew/checkpoint.hpp"
#include "saew/common.hpp"

namespace saew {

// y = x + U V x, V zero-initialized so the adapter starts as the identity.
struct LowRankSkip {
    Mat u;  // d x r
    Mat v;  // r x d
    int rank = 0;

    static LowRankSkip init(Eigen::Index d, int rank, Rng& rng) {
        check_arg(rank >= 1, "LowRankSkip rank must be >= 1");
        check_arg(rank < d, "LowRankSkip rank must be < d");
        LowRankSkip a;
        a.rank = rank;
        a.u = rng.normal_mat(d, rank, 0.0, 1.0 / std::sqrt(static_cast<double>(d)));
        a.v = Mat::Zero(rank, d);
        return a;
    }
};

inline Var lowrank_forward(const Var& x, const Var& u, const Var& v) {
    // x (rows x d) -> x + (x V^T) U^T
    return ad::add(x, ad::matmul_nt(ad::matmul_nt(x, v), u));
}

// y = x + W2 ReLU(W1 x + b1) + b2, with W2 and b2 zero-initialized.
struct MlpSkip {
    Mat w1;  // h x d
    Mat b1;  // 1 x h
    Mat w2;  // d x h
    Mat b2;  // 1 x d
    int hidden = 0;

    static MlpSkip init(Eigen::Index d, int hidden, Rng& rng) {
        check_arg(hidden >= 1, "MlpSkip hidden size must be >= 1");
        check_arg(hidden < d, "MlpSkip hidden size must be < d");
        MlpSkip a;
        a.hidden = hidden;
        a.w1 = rng.normal_mat(hidden, d, 0.0, 1.0 / std::sqrt(static_cast<double>(d)));
        a.b1 = Mat::Zero(1, hidden);
        a.w2 = Mat::Zero(d, hidden);
        a.b2 = Mat::Zero(1, d);
        return a;
    }
};

inline Var mlp_skip_forward(const Var& x, const Var& w1, const Var& b1, const Var& w2,
                            const Var& b2) {
    Var hidden = ad::relu(ad::add_rowvec(ad::matmul_nt(x, w1), b1));
    return ad::add(x, ad::add_rowvec(ad::matmul_nt(hidden, w2), b2));
}

// Low-rank reparameterization of a frozen base matrix: effective = base + B A.
// B starts at zero, so the wrap is the identity at step 0. No alpha/rank
// scaling factor is applied.
struct LoraWrap {
    const Mat* base = nullptr;  // m x n, frozen unless explicitly unfrozen
    Mat a;                      // r x n
    Mat b;                      // m x r
    int rank = 0;

    static LoraWrap init(const Mat& base, int rank, Rng& rng) {
        check_arg(rank >= 1, "LoRA rank must be >= 1");
        check_arg(rank <= std::min(base.rows(), base.cols()),
                  "LoRA rank exceeds min(rows, cols) of the wrapped matrix");
        LoraWrap w;
        w.base = &base;
        w.rank = rank;
        w.a = rng.normal_mat(rank, base.cols(), 0.0,
                             1.0 / std::sqrt(static_cast<double>(base.cols())));
        w.b = Mat::Zero(base.rows(), rank);
        return w;
    }
};

inline Mat lora_effective_weight(const LoraWrap& w) {
    check_runtime(w.base != nullptr, "LoraWrap has no base matrix");
    return *w.base + w.b * w.a;
}

// A weight as seen by a forward pass: the base Var plus an optional LoRA
// pair. Keeping the pair separate lets forwards take the cheap thin-matmul
// route x W^T + (x A^T) B^T instead of forming the dense effective weight.
struct WeightVar {
    Var w;
    Var lora_a, lora_b;
    bool has_lora = false;

    static WeightVar plain(Var w) { return WeightVar{std::move(w), {}, {}, false}; }
    static WeightVar with_lora(Var w, Var a, Var b) {
        return WeightVar{std::move(w), std::move(a), std::move(b), true};
    }
};

inline Var apply_weight(const Var& x, const WeightVar& wv) {
    Var y = ad::matmul_nt(x, wv.w);
    if (wv.has_lora) y = ad::add(y, ad::matmul_nt(ad::matmul_nt(x, wv.lora_a), wv.lora_b));
    return y;
}

inline Var linear(const Var& x, const WeightVar& wv, const Var& bias) {
    return ad::add_rowvec(apply_weight(x, wv), bias);
}

// Dense effective weight on the tape; used by the consistency tests.
inline Var effective_weight_var(const WeightVar& wv) {
    if (!wv.has_lora) return wv.w;
    return ad::add(wv.w, ad::matmul(wv.lora_b, wv.lora_a));
}

// --- skip-adapter checkpoint IO (shared tensor-table format) ---------------

constexpr double kAdapterKindLowRank = 0.0;
constexpr double kAdapterKindMlp = 1.0;
constexpr double kAdapterKindLoraSae = 2.0;
constexpr double kAdapterKindLoraLm = 3.0;

inline void save_lowrank_skip(const LowRankSkip& a, const std::string& path) {
    TensorFile f;
    f.add_scalar("adapter_kind", kAdapterKindLowRank);
    f.add_scalar("rank", static_cast<double>(a.rank));
    f.add_mat("u", a.u);
    f.add_mat("v", a.v);
    f.save(path);
}

inline LowRankSkip load_lowrank_skip(const TensorFile& f) {
    LowRankSkip a;
    a.rank = static_cast<int>(f.get_scalar("rank"));
    a.u = f.get_mat("u");
    a.v = f.get_mat("v");
    return a;
}

inline void save_mlp_skip(const MlpSkip& a, const std::string& path) {
    TensorFile f;
    f.add_scalar("adapter_kind", kAdapterKindMlp);
    f.add_scalar("hidden", static_cast<double>(a.hidden));
    f.add_mat("w1", a.w1);
    f.add_mat("b1", a.b1);
    f.add_mat("w2", a.w2);
    f.add_mat("b2", a.b2);
    f.save(path);
}

inline MlpSkip load_mlp_skip(const TensorFile& f) {
    MlpSkip a;
    a.hidden = static_cast<int>(f.get_scalar("hidden"));
    a.w1 = f.get_mat("w1");
    a.b1 = f.get_mat("b1");
    a.w2 = f.get_mat("w2");
    a.b2 = f.get_mat("b2");
    return a;
}

}  // namespace saew
