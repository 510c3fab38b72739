// ReLU and TopK sparse autoencoders with the plain-L1, decoder-norm-weighted
// L1, TopK MSE, and auxk dead-feature loss terms.
#pragma once

#include "saew/adapters.hpp"
#include "saew/autodiff.hpp"
#include "saew/checkpoint.hpp"
#include "saew/common.hpp"

#include <iostream>
#include <string>
#include <vector>

namespace saew {

enum class SaeArch { Relu, TopK };

struct SaeConfig {
    Eigen::Index dict_size = 1024;
    Eigen::Index d_model = 128;
    SaeArch arch = SaeArch::TopK;
    double lambda = 1e-3;          // ReLU sparsity penalty (controller may adjust)
    int k = 16;                    // TopK active count
    int k_aux = 32;                // aux active count, default 2k
    double aux_coef = 1.0 / 32.0;  // auxk weight
    int64_t dead_threshold = 10000;  // tokens without firing before "dead"
    double input_scale = 1.0;      // fixed scalar normalization; 1 = raw

    void validate() const {
        check_arg(dict_size >= 1 && d_model >= 1, "SAE dims must be positive");
        if (arch == SaeArch::TopK) {
            check_arg(k >= 1 && k <= dict_size, "TopK K must lie in [1, dict_size]");
            check_arg(k_aux >= 0 && k_aux <= dict_size, "k_aux must lie in [0, dict_size]");
        } else {
            check_arg(lambda >= 0.0, "lambda must be >= 0");
        }
        check_arg(input_scale > 0.0, "input_scale must be > 0");
        if (dict_size < d_model)
            std::cerr << "warning: dict_size " << dict_size << " < d_model " << d_model
                      << " (SAE is usually overcomplete)\n";
    }
};

// Per-feature staleness counters driving the auxk dead mask.
struct FeatureActivity {
    std::vector<int64_t> tokens_since_fired;
    int64_t dead_threshold = 10000;

    static FeatureActivity fresh(Eigen::Index dict_size, int64_t threshold) {
        FeatureActivity a;
        a.tokens_since_fired.assign(static_cast<size_t>(dict_size), 0);
        a.dead_threshold = threshold;
        return a;
    }
    bool any_dead() const {
        for (int64_t c : tokens_since_fired)
            if (c >= dead_threshold) return true;
        return false;
    }
    std::vector<uint8_t> dead_mask() const {
        std::vector<uint8_t> m(tokens_since_fired.size());
        for (size_t i = 0; i < m.size(); ++i)
            m[i] = tokens_since_fired[i] >= dead_threshold ? 1 : 0;
        return m;
    }
    int64_t dead_count() const {
        int64_t n = 0;
        for (int64_t c : tokens_since_fired)
            if (c >= dead_threshold) ++n;
        return n;
    }
};

struct SaeParams {
    SaeConfig config;
    Mat w_enc;  // dict_size x d_model
    Mat b_enc;  // 1 x dict_size
    Mat w_dec;  // d_model x dict_size
    Mat b_dec;  // 1 x d_model
    FeatureActivity activity;

    bool finite() const {
        return w_enc.allFinite() && b_enc.allFinite() && w_dec.allFinite() && b_dec.allFinite();
    }

    void save(const std::string& path) const {
        TensorFile f;
        f.add_scalar("arch_code", config.arch == SaeArch::Relu ? 0.0 : 1.0);
        f.add_scalar("dict_size", static_cast<double>(config.dict_size));
        f.add_scalar("d_model", static_cast<double>(config.d_model));
        f.add_scalar("K", config.k);
        f.add_scalar("lambda", config.lambda);
        f.add_scalar("k_aux", config.k_aux);
        f.add_scalar("aux_coef", config.aux_coef);
        f.add_scalar("dead_threshold", static_cast<double>(config.dead_threshold));
        f.add_scalar("input_scale", config.input_scale);
        f.add_mat("w_enc", w_enc);
        f.add_vec("b_enc", b_enc.row(0).transpose());
        f.add_mat("w_dec", w_dec);
        f.add_vec("b_dec", b_dec.row(0).transpose());
        Vec act(static_cast<Eigen::Index>(activity.tokens_since_fired.size()));
        for (Eigen::Index i = 0; i < act.size(); ++i)
            act(i) = static_cast<double>(activity.tokens_since_fired[static_cast<size_t>(i)]);
        f.add_vec("tokens_since_fired", act);
        f.save(path);
    }

    static SaeParams load(const std::string& path) {
        const TensorFile f = TensorFile::load(path);
        SaeParams p;
        p.config.arch = f.get_scalar("arch_code") == 0.0 ? SaeArch::Relu : SaeArch::TopK;
        p.config.dict_size = static_cast<Eigen::Index>(f.get_scalar("dict_size"));
        p.config.d_model = static_cast<Eigen::Index>(f.get_scalar("d_model"));
        p.config.k = static_cast<int>(f.get_scalar("K"));
        p.config.lambda = f.get_scalar("lambda");
        p.config.k_aux = static_cast<int>(f.get_scalar("k_aux"));
        p.config.aux_coef = f.get_scalar("aux_coef");
        p.config.dead_threshold = static_cast<int64_t>(f.get_scalar("dead_threshold"));
        p.config.input_scale = f.get_scalar("input_scale");
        p.w_enc = f.get_mat("w_enc");
        p.b_enc = f.get_vec("b_enc").transpose();
        p.w_dec = f.get_mat("w_dec");
        p.b_dec = f.get_vec("b_dec").transpose();
        const Vec act = f.get_vec("tokens_since_fired");
        p.activity.tokens_since_fired.resize(static_cast<size_t>(act.size()));
        for (Eigen::Index i = 0; i < act.size(); ++i)
            p.activity.tokens_since_fired[static_cast<size_t>(i)] = static_cast<int64_t>(act(i));
        p.activity.dead_threshold = p.config.dead_threshold;
        return p;
    }
};

// Decoder columns sampled at random unit L2 norm, encoder tied to the decoder
// transpose, decoder bias set to the sample mean (of scaled inputs).
inline SaeParams init_sae(const SaeConfig& config, const Mat& data_sample, uint64_t seed) {
    config.validate();
    check_arg(data_sample.rows() > 0, "init_sae requires a nonempty data sample");
    check_arg(data_sample.cols() == config.d_model, "data sample width must equal d_model");
    Rng rng(seed);
    SaeParams p;
    p.config = config;
    p.w_dec.resize(config.d_model, config.dict_size);
    for (Eigen::Index i = 0; i < config.dict_size; ++i) {
        Vec col(config.d_model);
        for (Eigen::Index r = 0; r < config.d_model; ++r) col(r) = rng.normal();
        p.w_dec.col(i) = col / col.norm();
    }
    p.w_enc = p.w_dec.transpose();
    p.b_enc = Mat::Zero(1, config.dict_size);
    p.b_dec = (data_sample.colwise().mean() / config.input_scale).eval();
    p.activity = FeatureActivity::fresh(config.dict_size, config.dead_threshold);
    return p;
}

// --- graph binding ----------------------------------------------------------

struct SaeVars {
    WeightVar w_enc;
    Var b_enc;
    WeightVar w_dec;
    Var b_dec;
    double input_scale = 1.0;
};

inline SaeVars bind_sae(Tape& tape, SaeParams& p, ParamBinder* binder = nullptr) {
    auto b = [&](Mat& m) { return binder ? binder->bind(m) : tape.constant(m); };
    SaeVars v;
    v.w_enc = WeightVar::plain(b(p.w_enc));
    v.b_enc = b(p.b_enc);
    v.w_dec = WeightVar::plain(b(p.w_dec));
    v.b_dec = b(p.b_dec);
    v.input_scale = p.config.input_scale;
    return v;
}

// --- LoRA on SAE weights ----------------------------------------------------

// W_E and W_D wrapped; biases stay directly trainable (LoRA cannot express
// bias shifts and they are cheap).
struct SaeLora {
    int rank = 0;
    LoraWrap enc, dec;
};

inline SaeLora attach_lora_to_sae(const SaeParams& sae, int rank, uint64_t seed) {
    check_arg(rank >= 1, "LoRA rank must be >= 1");
    Rng rng(seed);
    SaeLora l;
    l.rank = rank;
    l.enc = LoraWrap::init(sae.w_enc, rank, rng);
    l.dec = LoraWrap::init(sae.w_dec, rank, rng);
    return l;
}

inline size_t sae_lora_trainable_count(const SaeParams& sae, const SaeLora& l) {
    return static_cast<size_t>(l.enc.a.size() + l.enc.b.size() + l.dec.a.size() +
                               l.dec.b.size() + sae.b_enc.size() + sae.b_dec.size());
}

// Frozen SAE weights with trainable LoRA factors and trainable biases.
inline SaeVars bind_sae_with_lora(Tape& tape, SaeParams& p, SaeLora& lora, ParamBinder& binder) {
    SaeVars v;
    v.w_enc = WeightVar::with_lora(tape.constant(p.w_enc), binder.bind(lora.enc.a),
                                   binder.bind(lora.enc.b));
    v.b_enc = binder.bind(p.b_enc);
    v.w_dec = WeightVar::with_lora(tape.constant(p.w_dec), binder.bind(lora.dec.a),
                                   binder.bind(lora.dec.b));
    v.b_dec = binder.bind(p.b_dec);
    v.input_scale = p.config.input_scale;
    return v;
}

inline void save_sae_lora(const SaeLora& l, const std::string& path) {
    TensorFile f;
    f.add_scalar("adapter_kind", kAdapterKindLoraSae);
    f.add_scalar("rank", l.rank);
    f.add_scalar("wraps.w_enc", l.enc.rank);
    f.add_scalar("wraps.w_dec", l.dec.rank);
    f.add_mat("lora.w_enc.a", l.enc.a);
    f.add_mat("lora.w_enc.b", l.enc.b);
    f.add_mat("lora.w_dec.a", l.dec.a);
    f.add_mat("lora.w_dec.b", l.dec.b);
    f.save(path);
}

inline SaeLora load_sae_lora(const TensorFile& f, const SaeParams& sae) {
    SaeLora l;
    l.rank = static_cast<int>(f.get_scalar("rank"));
    l.enc.base = &sae.w_enc;
    l.enc.rank = static_cast<int>(f.get_scalar("wraps.w_enc"));
    l.enc.a = f.get_mat("lora.w_enc.a");
    l.enc.b = f.get_mat("lora.w_enc.b");
    l.dec.base = &sae.w_dec;
    l.dec.rank = static_cast<int>(f.get_scalar("wraps.w_dec"));
    l.dec.a = f.get_mat("lora.w_dec.a");
    l.dec.b = f.get_mat("lora.w_dec.b");
    return l;
}

// --- forward passes ---------------------------------------------------------

// Encoder pre-activations W_E x + b_E (on scaled input when configured).
inline Var sae_pre_acts(const Var& x, const SaeVars& v) {
    Var xin = v.input_scale == 1.0 ? x : ad::scale(x, 1.0 / v.input_scale);
    // note: w_enc is (dict x d), so this is x W_E^T per row
    return ad::add_rowvec(apply_weight(xin, v.w_enc), v.b_enc);
}

inline Var sae_encode_relu(const Var& x, const SaeVars& v) {
    return ad::relu(sae_pre_acts(x, v));
}

struct TopKEncode {
    Var h;
    Var pre_acts;
};

inline TopKEncode sae_encode_topk(const Var& x, const SaeVars& v, int k) {
    Var pre = sae_pre_acts(x, v);
    return TopKEncode{ad::topk_select(pre, k), pre};
}

inline Var sae_decode(const Var& h, const SaeVars& v) {
    Var xhat = ad::add_rowvec(apply_weight(h, v.w_dec), v.b_dec);
    return v.input_scale == 1.0 ? xhat : ad::scale(xhat, v.input_scale);
}

struct SaeForward {
    Var h;         // sparse latents
    Var x_hat;     // reconstruction in input space
    Var pre_acts;  // encoder pre-activations (kept for auxk)
};

inline SaeForward sae_forward(const Var& x, const SaeVars& v, const SaeConfig& cfg) {
    if (cfg.arch == SaeArch::Relu) {
        Var pre = sae_pre_acts(x, v);
        Var h = ad::relu(pre);
        return SaeForward{h, sae_decode(h, v), pre};
    }
    TopKEncode enc = sae_encode_topk(x, v, cfg.k);
    return SaeForward{enc.h, sae_decode(enc.h, v), enc.pre_acts};
}

// --- losses -----------------------------------------------------------------

// Per-step loss record. The SAE loss builders fill mse/sparsity/auxk/total;
// training loops overwrite kl, alpha_kl, and the live l1_penalty.
struct LossBreakdown {
    double mse = 0.0;
    double kl = 0.0;
    double alpha_kl = 0.0;
    double sparsity = 0.0;
    double auxk = 0.0;
    double total = 0.0;
    double l1_penalty = 0.0;
};

// Eq.-style ReLU loss with decoder-norm-weighted sparsity:
// mean_rows ||x - x_hat||^2 + lambda * mean_rows sum_i h_i ||w_i||_1.
inline Var loss_relu_weighted(const Var& x, const SaeForward& fwd, const SaeVars& v,
                              double lambda, LossBreakdown* out = nullptr) {
    Var mse = ad::mse_rows(fwd.x_hat, x);
    Var sparsity = ad::weighted_l1(fwd.h, effective_weight_var(v.w_dec));
    Var total = ad::add(mse, ad::scale(sparsity, lambda));
    if (out) {
        out->mse = mse.scalar();
        out->sparsity = sparsity.scalar();
        out->l1_penalty = lambda;
        out->total = total.scalar();
    }
    return total;
}

// Plain-L1 variant: sparsity = mean_rows ||h||_1.
inline Var loss_relu_plain(const Var& x, const SaeForward& fwd, double lambda,
                           LossBreakdown* out = nullptr) {
    Var mse = ad::mse_rows(fwd.x_hat, x);
    Var sparsity = ad::l1_mean(fwd.h);
    Var total = ad::add(mse, ad::scale(sparsity, lambda));
    if (out) {
        out->mse = mse.scalar();
        out->sparsity = sparsity.scalar();
        out->l1_penalty = lambda;
        out->total = total.scalar();
    }
    return total;
}

// TopK loss: MSE plus aux_coef * auxk, where auxk reconstructs the residual
// (x - x_hat) from the top k_aux pre-activations among currently dead
// features. The aux decode uses the decoder matrix without the bias (the
// target is a residual, not an activation). auxk is zero when nothing is
// dead.
inline Var loss_topk(const Var& x, const SaeForward& fwd, const SaeVars& v,
                     const FeatureActivity& activity, int k_aux, double aux_coef,
                     LossBreakdown* out = nullptr) {
    Var mse = ad::mse_rows(fwd.x_hat, x);
    Var total = mse;
    double auxk_val = 0.0;
    if (aux_coef != 0.0 && k_aux > 0 && activity.any_dead()) {
        const std::vector<uint8_t> dead = activity.dead_mask();
        Var h_aux = ad::topk_select(fwd.pre_acts, k_aux, &dead);
        Var xhat_aux = apply_weight(h_aux, v.w_dec);
        if (v.input_scale != 1.0) xhat_aux = ad::scale(xhat_aux, v.input_scale);
        Var residual = ad::sub(x, fwd.x_hat);
        Var auxk = ad::mse_rows(xhat_aux, residual);
        auxk_val = auxk.scalar();
        total = ad::add(mse, ad::scale(auxk, aux_coef));
    }
    if (out) {
        out->mse = mse.scalar();
        out->auxk = auxk_val;
        out->total = total.scalar();
    }
    return total;
}

// --- activity tracking ------------------------------------------------------

// Features that fired anywhere in the batch reset to zero; all others age by
// the batch token count.
inline void update_activity(const Mat& h, FeatureActivity& activity) {
    check_runtime(static_cast<size_t>(h.cols()) == activity.tokens_since_fired.size(),
                  "update_activity: latent width mismatch");
    const int64_t tokens = h.rows();
    for (Eigen::Index i = 0; i < h.cols(); ++i) {
        const bool fired = (h.col(i).array() != 0.0).any();
        if (fired)
            activity.tokens_since_fired[static_cast<size_t>(i)] = 0;
        else
            activity.tokens_since_fired[static_cast<size_t>(i)] += tokens;
    }
}

inline double mean_l0(const Mat& h) {
    if (h.rows() == 0) return 0.0;
    double nnz = 0.0;
    for (Eigen::Index r = 0; r < h.rows(); ++r)
        nnz += static_cast<double>((h.row(r).array() != 0.0).count());
    return nnz / static_cast<double>(h.rows());
}

}  // namespace saew
