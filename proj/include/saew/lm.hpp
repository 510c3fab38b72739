// Minimal decoder-only transformer with a designated hook layer.
//
// Pre-norm blocks, learned positional embeddings, GELU MLP, untied
// unembedding, byte-level vocab by default. The residual stream entering
// layer `hook_layer` can be captured (activation harvesting) or replaced by
// an arbitrary differentiable payload (splicing), and reverse-mode gradients
// flow into the payload and into any tracked parameters.
#pragma once

#include "saew/adapters.hpp"
#include "saew/autodiff.hpp"
#include "saew/checkpoint.hpp"
#include "saew/common.hpp"
#include "saew/corpus.hpp"
#include "saew/optimizer.hpp"

#include <functional>
#include <string>
#include <vector>

namespace saew {

struct LmConfig {
    int vocab_size = 256;
    int d_model = 128;
    int n_layers = 4;
    int n_heads = 4;
    int d_ff = 512;
    int seq_len_max = 128;
    int hook_layer = 2;  // splice point: residual stream entering this layer

    void validate() const {
        check_arg(vocab_size >= 2, "vocab_size must be >= 2");
        check_arg(d_model >= 1 && n_heads >= 1 && d_model % n_heads == 0,
                  "d_model must be divisible by n_heads");
        check_arg(n_layers >= 1, "n_layers must be >= 1");
        check_arg(d_ff >= 1, "d_ff must be >= 1");
        check_arg(seq_len_max >= 1, "seq_len_max must be >= 1");
        check_arg(hook_layer >= 0 && hook_layer < n_layers,
                  "hook_layer must lie in [0, n_layers)");
    }
};

struct LmLayerParams {
    Mat ln1_g, ln1_b;        // 1 x d
    Mat wq, wk, wv, wo;      // d x d
    Mat bq, bk, bv, bo;      // 1 x d
    Mat ln2_g, ln2_b;        // 1 x d
    Mat w_in;                // d_ff x d
    Mat b_in;                // 1 x d_ff
    Mat w_out;               // d x d_ff
    Mat b_out;               // 1 x d
};

struct LmParams {
    LmConfig config;
    Mat tok_emb;  // vocab x d
    Mat pos_emb;  // seq_len_max x d
    std::vector<LmLayerParams> layers;
    Mat lnf_g, lnf_b;  // 1 x d
    Mat unembed;       // vocab x d

    static LmParams init(const LmConfig& cfg, uint64_t seed) {
        cfg.validate();
        Rng rng(seed);
        const double std0 = 0.02;
        // residual-output projections scaled down with depth
        const double std_res = std0 / std::sqrt(2.0 * cfg.n_layers);
        LmParams p;
        p.config = cfg;
        p.tok_emb = rng.normal_mat(cfg.vocab_size, cfg.d_model, 0.0, std0);
        p.pos_emb = rng.normal_mat(cfg.seq_len_max, cfg.d_model, 0.0, std0);
        p.layers.resize(static_cast<size_t>(cfg.n_layers));
        for (auto& l : p.layers) {
            l.ln1_g = Mat::Ones(1, cfg.d_model);
            l.ln1_b = Mat::Zero(1, cfg.d_model);
            l.wq = rng.normal_mat(cfg.d_model, cfg.d_model, 0.0, std0);
            l.wk = rng.normal_mat(cfg.d_model, cfg.d_model, 0.0, std0);
            l.wv = rng.normal_mat(cfg.d_model, cfg.d_model, 0.0, std0);
            l.wo = rng.normal_mat(cfg.d_model, cfg.d_model, 0.0, std_res);
            l.bq = Mat::Zero(1, cfg.d_model);
            l.bk = Mat::Zero(1, cfg.d_model);
            l.bv = Mat::Zero(1, cfg.d_model);
            l.bo = Mat::Zero(1, cfg.d_model);
            l.ln2_g = Mat::Ones(1, cfg.d_model);
            l.ln2_b = Mat::Zero(1, cfg.d_model);
            l.w_in = rng.normal_mat(cfg.d_ff, cfg.d_model, 0.0, std0);
            l.b_in = Mat::Zero(1, cfg.d_ff);
            l.w_out = rng.normal_mat(cfg.d_model, cfg.d_ff, 0.0, std_res);
            l.b_out = Mat::Zero(1, cfg.d_model);
        }
        p.lnf_g = Mat::Ones(1, cfg.d_model);
        p.lnf_b = Mat::Zero(1, cfg.d_model);
        p.unembed = rng.normal_mat(cfg.vocab_size, cfg.d_model, 0.0, std0);
        return p;
    }

    bool finite() const {
        if (!tok_emb.allFinite() || !pos_emb.allFinite() || !lnf_g.allFinite() ||
            !lnf_b.allFinite() || !unembed.allFinite())
            return false;
        for (const auto& l : layers) {
            if (!(l.ln1_g.allFinite() && l.ln1_b.allFinite() && l.wq.allFinite() &&
                  l.wk.allFinite() && l.wv.allFinite() && l.wo.allFinite() &&
                  l.bq.allFinite() && l.bk.allFinite() && l.bv.allFinite() &&
                  l.bo.allFinite() && l.ln2_g.allFinite() && l.ln2_b.allFinite() &&
                  l.w_in.allFinite() && l.b_in.allFinite() && l.w_out.allFinite() &&
                  l.b_out.allFinite()))
                return false;
        }
        return true;
    }

    void save(const std::string& path) const {
        TensorFile f;
        f.add_scalar("config.vocab_size", config.vocab_size);
        f.add_scalar("config.d_model", config.d_model);
        f.add_scalar("config.n_layers", config.n_layers);
        f.add_scalar("config.n_heads", config.n_heads);
        f.add_scalar("config.d_ff", config.d_ff);
        f.add_scalar("config.seq_len_max", config.seq_len_max);
        f.add_scalar("config.hook_layer", config.hook_layer);
        f.add_mat("tok_emb", tok_emb);
        f.add_mat("pos_emb", pos_emb);
        for (size_t i = 0; i < layers.size(); ++i) {
            const auto& l = layers[i];
            const std::string p = "layer" + std::to_string(i) + ".";
            f.add_mat(p + "ln1.g", l.ln1_g);
            f.add_mat(p + "ln1.b", l.ln1_b);
            f.add_mat(p + "attn.wq", l.wq);
            f.add_mat(p + "attn.wk", l.wk);
            f.add_mat(p + "attn.wv", l.wv);
            f.add_mat(p + "attn.wo", l.wo);
            f.add_mat(p + "attn.bq", l.bq);
            f.add_mat(p + "attn.bk", l.bk);
            f.add_mat(p + "attn.bv", l.bv);
            f.add_mat(p + "attn.bo", l.bo);
            f.add_mat(p + "ln2.g", l.ln2_g);
            f.add_mat(p + "ln2.b", l.ln2_b);
            f.add_mat(p + "mlp.w_in", l.w_in);
            f.add_mat(p + "mlp.b_in", l.b_in);
            f.add_mat(p + "mlp.w_out", l.w_out);
            f.add_mat(p + "mlp.b_out", l.b_out);
        }
        f.add_mat("ln_f.g", lnf_g);
        f.add_mat("ln_f.b", lnf_b);
        f.add_mat("unembed", unembed);
        f.save(path);
    }

    static LmParams load(const std::string& path) {
        const TensorFile f = TensorFile::load(path);
        LmParams p;
        p.config.vocab_size = static_cast<int>(f.get_scalar("config.vocab_size"));
        p.config.d_model = static_cast<int>(f.get_scalar("config.d_model"));
        p.config.n_layers = static_cast<int>(f.get_scalar("config.n_layers"));
        p.config.n_heads = static_cast<int>(f.get_scalar("config.n_heads"));
        p.config.d_ff = static_cast<int>(f.get_scalar("config.d_ff"));
        p.config.seq_len_max = static_cast<int>(f.get_scalar("config.seq_len_max"));
        p.config.hook_layer = static_cast<int>(f.get_scalar("config.hook_layer"));
        p.config.validate();
        p.tok_emb = f.get_mat("tok_emb");
        p.pos_emb = f.get_mat("pos_emb");
        p.layers.resize(static_cast<size_t>(p.config.n_layers));
        for (size_t i = 0; i < p.layers.size(); ++i) {
            auto& l = p.layers[i];
            const std::string pre = "layer" + std::to_string(i) + ".";
            l.ln1_g = f.get_mat(pre + "ln1.g");
            l.ln1_b = f.get_mat(pre + "ln1.b");
            l.wq = f.get_mat(pre + "attn.wq");
            l.wk = f.get_mat(pre + "attn.wk");
            l.wv = f.get_mat(pre + "attn.wv");
            l.wo = f.get_mat(pre + "attn.wo");
            l.bq = f.get_mat(pre + "attn.bq");
            l.bk = f.get_mat(pre + "attn.bk");
            l.bv = f.get_mat(pre + "attn.bv");
            l.bo = f.get_mat(pre + "attn.bo");
            l.ln2_g = f.get_mat(pre + "ln2.g");
            l.ln2_b = f.get_mat(pre + "ln2.b");
            l.w_in = f.get_mat(pre + "mlp.w_in");
            l.b_in = f.get_mat(pre + "mlp.b_in");
            l.w_out = f.get_mat(pre + "mlp.w_out");
            l.b_out = f.get_mat(pre + "mlp.b_out");
        }
        p.lnf_g = f.get_mat("ln_f.g");
        p.lnf_b = f.get_mat("ln_f.b");
        p.unembed = f.get_mat("unembed");
        return p;
    }
};

// --- LoRA over LM weight matrices ------------------------------------------

enum class LoraScope { AllLayers, AfterHook };

struct LmLayerLora {
    bool active = false;
    LoraWrap wq, wk, wv, wo;
    bool has_mlp = false;
    LoraWrap w_in, w_out;
};

struct LmLora {
    int rank = 0;
    LoraScope scope = LoraScope::AllLayers;
    bool wrap_mlp = true;
    std::vector<LmLayerLora> layers;
};

// Wraps attention projections (and MLP matrices unless disabled) of every
// layer in scope. AfterHook leaves layers <= hook_layer untouched. The LM
// base stays frozen; the wraps are identities at attach time.
inline LmLora attach_lora_to_lm(const LmParams& lm, int rank, LoraScope scope, bool wrap_mlp,
                                uint64_t seed) {
    check_arg(rank >= 1, "LoRA rank must be >= 1");
    Rng rng(seed);
    LmLora lora;
    lora.rank = rank;
    lora.scope = scope;
    lora.wrap_mlp = wrap_mlp;
    lora.layers.resize(lm.layers.size());
    for (size_t i = 0; i < lm.layers.size(); ++i) {
        if (scope == LoraScope::AfterHook &&
            static_cast<int>(i) <= lm.config.hook_layer)
            continue;
        auto& dst = lora.layers[i];
        dst.active = true;
        dst.wq = LoraWrap::init(lm.layers[i].wq, rank, rng);
        dst.wk = LoraWrap::init(lm.layers[i].wk, rank, rng);
        dst.wv = LoraWrap::init(lm.layers[i].wv, rank, rng);
        dst.wo = LoraWrap::init(lm.layers[i].wo, rank, rng);
        if (wrap_mlp) {
            dst.has_mlp = true;
            dst.w_in = LoraWrap::init(lm.layers[i].w_in, rank, rng);
            dst.w_out = LoraWrap::init(lm.layers[i].w_out, rank, rng);
        }
    }
    return lora;
}

inline size_t lora_trainable_count(const LmLora& lora) {
    size_t n = 0;
    for (const auto& l : lora.layers) {
        if (!l.active) continue;
        n += static_cast<size_t>(l.wq.a.size() + l.wq.b.size() + l.wk.a.size() + l.wk.b.size() +
                                 l.wv.a.size() + l.wv.b.size() + l.wo.a.size() + l.wo.b.size());
        if (l.has_mlp)
            n += static_cast<size_t>(l.w_in.a.size() + l.w_in.b.size() + l.w_out.a.size() +
                                     l.w_out.b.size());
    }
    return n;
}

inline void save_lm_lora(const LmLora& lora, const std::string& path) {
    TensorFile f;
    f.add_scalar("adapter_kind", kAdapterKindLoraLm);
    f.add_scalar("rank", lora.rank);
    f.add_scalar("scope", lora.scope == LoraScope::AllLayers ? 0.0 : 1.0);
    f.add_scalar("wrap_mlp", lora.wrap_mlp ? 1.0 : 0.0);
    for (size_t i = 0; i < lora.layers.size(); ++i) {
        const auto& l = lora.layers[i];
        if (!l.active) continue;
        const std::string pre = "layer" + std::to_string(i) + ".";
        auto put = [&](const std::string& name, const LoraWrap& w) {
            f.add_scalar("wraps." + pre + name, w.rank);
            f.add_mat("lora." + pre + name + ".a", w.a);
            f.add_mat("lora." + pre + name + ".b", w.b);
        };
        put("attn.wq", l.wq);
        put("attn.wk", l.wk);
        put("attn.wv", l.wv);
        put("attn.wo", l.wo);
        if (l.has_mlp) {
            put("mlp.w_in", l.w_in);
            put("mlp.w_out", l.w_out);
        }
    }
    f.save(path);
}

inline LmLora load_lm_lora(const TensorFile& f, const LmParams& lm) {
    LmLora lora;
    lora.rank = static_cast<int>(f.get_scalar("rank"));
    lora.scope = f.get_scalar("scope") == 0.0 ? LoraScope::AllLayers : LoraScope::AfterHook;
    lora.wrap_mlp = f.get_scalar("wrap_mlp") != 0.0;
    lora.layers.resize(lm.layers.size());
    for (size_t i = 0; i < lm.layers.size(); ++i) {
        const std::string pre = "layer" + std::to_string(i) + ".";
        if (!f.has("wraps." + pre + "attn.wq")) continue;
        auto& l = lora.layers[i];
        l.active = true;
        auto take = [&](const std::string& name, const Mat& base) {
            LoraWrap w;
            w.base = &base;
            w.rank = static_cast<int>(f.get_scalar("wraps." + pre + name));
            w.a = f.get_mat("lora." + pre + name + ".a");
            w.b = f.get_mat("lora." + pre + name + ".b");
            return w;
        };
        l.wq = take("attn.wq", lm.layers[i].wq);
        l.wk = take("attn.wk", lm.layers[i].wk);
        l.wv = take("attn.wv", lm.layers[i].wv);
        l.wo = take("attn.wo", lm.layers[i].wo);
        if (f.has("wraps." + pre + "mlp.w_in")) {
            l.has_mlp = true;
            l.w_in = take("mlp.w_in", lm.layers[i].w_in);
            l.w_out = take("mlp.w_out", lm.layers[i].w_out);
        }
    }
    return lora;
}

// --- graph binding ----------------------------------------------------------

// Tracks master-matrix <-> leaf pairs so optimizers can collect gradients in
// a stable registration order.
class ParamBinder {
public:
    explicit ParamBinder(Tape& tape) : tape_(&tape) {}

    Var bind(Mat& master) {
        Var v = tape_->leaf(master, true);
        masters_.push_back(&master);
        leaves_.push_back(v);
        return v;
    }
    Var frozen(const Mat& master) { return tape_->constant(master); }

    const std::vector<Mat*>& masters() const { return masters_; }
    std::vector<Mat> grads() const {
        std::vector<Mat> g;
        g.reserve(leaves_.size());
        for (const Var& v : leaves_) g.push_back(v.grad_or_zero());
        return g;
    }
    size_t trainable_count() const {
        size_t n = 0;
        for (const Mat* m : masters_) n += static_cast<size_t>(m->size());
        return n;
    }

private:
    Tape* tape_;
    std::vector<Mat*> masters_;
    std::vector<Var> leaves_;
};

// Registers the binder's parameter set on first use and steps Adam.
inline double adam_step(Adam& adam, const ParamBinder& binder, double lr, double clip = 0.0) {
    if (adam.size() == 0)
        for (Mat* m : const_cast<std::vector<Mat*>&>(binder.masters())) adam.add_param(m);
    return adam.step(binder.grads(), lr, clip);
}

struct LmLayerVars {
    Var ln1_g, ln1_b;
    WeightVar wq, wk, wv, wo;
    Var bq, bk, bv, bo;
    Var ln2_g, ln2_b;
    WeightVar w_in;
    Var b_in;
    WeightVar w_out;
    Var b_out;
};

struct LmVars {
    const LmConfig* config = nullptr;
    Var tok_emb, pos_emb;
    std::vector<LmLayerVars> layers;
    Var lnf_g, lnf_b;
    Var unembed;
};

// Binds the LM as constants (frozen) or trainable leaves.
inline LmVars bind_lm(Tape& tape, LmParams& p, ParamBinder* binder = nullptr) {
    auto b = [&](Mat& m) { return binder ? binder->bind(m) : tape.constant(m); };
    LmVars v;
    v.config = &p.config;
    v.tok_emb = b(p.tok_emb);
    v.pos_emb = b(p.pos_emb);
    v.layers.reserve(p.layers.size());
    for (auto& l : p.layers) {
        LmLayerVars lv;
        lv.ln1_g = b(l.ln1_g);
        lv.ln1_b = b(l.ln1_b);
        lv.wq = WeightVar::plain(b(l.wq));
        lv.wk = WeightVar::plain(b(l.wk));
        lv.wv = WeightVar::plain(b(l.wv));
        lv.wo = WeightVar::plain(b(l.wo));
        lv.bq = b(l.bq);
        lv.bk = b(l.bk);
        lv.bv = b(l.bv);
        lv.bo = b(l.bo);
        lv.ln2_g = b(l.ln2_g);
        lv.ln2_b = b(l.ln2_b);
        lv.w_in = WeightVar::plain(b(l.w_in));
        lv.b_in = b(l.b_in);
        lv.w_out = WeightVar::plain(b(l.w_out));
        lv.b_out = b(l.b_out);
        v.layers.push_back(std::move(lv));
    }
    v.lnf_g = b(p.lnf_g);
    v.lnf_b = b(p.lnf_b);
    v.unembed = b(p.unembed);
    return v;
}

// Frozen LM base plus trainable LoRA wraps.
inline LmVars bind_lm_with_lora(Tape& tape, const LmParams& p, LmLora& lora,
                                ParamBinder& binder) {
    LmVars v = bind_lm(tape, const_cast<LmParams&>(p), nullptr);  // all frozen
    for (size_t i = 0; i < p.layers.size(); ++i) {
        auto& src = lora.layers[i];
        if (!src.active) continue;
        auto& lv = v.layers[i];
        auto wrap = [&](WeightVar& wv, LoraWrap& w) {
            wv = WeightVar::with_lora(wv.w, binder.bind(w.a), binder.bind(w.b));
        };
        wrap(lv.wq, src.wq);
        wrap(lv.wk, src.wk);
        wrap(lv.wv, src.wv);
        wrap(lv.wo, src.wo);
        if (src.has_mlp) {
            wrap(lv.w_in, src.w_in);
            wrap(lv.w_out, src.w_out);
        }
    }
    return v;
}

// --- forward passes ---------------------------------------------------------

struct SpliceMode {
    enum class Kind { Clean, Replace };
    Kind kind = Kind::Clean;
    // Maps the clean hook activations to the replacement payload.
    std::function<Var(Tape&, const Var&)> source;

    static SpliceMode clean() { return SpliceMode{}; }
    static SpliceMode replace(std::function<Var(Tape&, const Var&)> fn) {
        SpliceMode m;
        m.kind = Kind::Replace;
        m.source = std::move(fn);
        return m;
    }
    static SpliceMode replace_fixed(Mat payload) {
        return replace([payload = std::move(payload)](Tape& t, const Var&) {
            return t.constant(payload);
        });
    }
};

inline Var lm_embed(Tape& tape, const LmVars& m, const TokenBatch& tokens) {
    const auto& cfg = *m.config;
    check_arg(tokens.batch() > 0, "zero-length batch");
    check_arg(tokens.seq_len() <= cfg.seq_len_max, "sequence length exceeds seq_len_max");
    check_arg((tokens.ids.array() >= 0).all() &&
                  (tokens.ids.array() < cfg.vocab_size).all(),
              "token id out of range for vocab");
    return ad::add(ad::gather_rows(m.tok_emb, tokens.flat()),
                   ad::gather_rows(m.pos_emb, tokens.position_ids()));
}

inline Var lm_layer_forward(const LmVars& m, size_t layer, const Var& x_in,
                            Eigen::Index seq_len) {
    const auto& l = m.layers[layer];
    Var a = ad::layer_norm(x_in, l.ln1_g, l.ln1_b);
    Var q = linear(a, l.wq, l.bq);
    Var k = linear(a, l.wk, l.bk);
    Var v = linear(a, l.wv, l.bv);
    Var att = ad::causal_attention(q, k, v, m.config->n_heads, seq_len);
    Var x = ad::add(x_in, linear(att, l.wo, l.bo));
    Var h = ad::layer_norm(x, l.ln2_g, l.ln2_b);
    Var mlp = linear(ad::gelu(linear(h, l.w_in, l.b_in)), l.w_out, l.b_out);
    return ad::add(x, mlp);
}

// Applies layers [from, to).
inline Var lm_apply_layers(const LmVars& m, Var x, int from, int to, Eigen::Index seq_len) {
    for (int l = from; l < to; ++l) x = lm_layer_forward(m, static_cast<size_t>(l), x, seq_len);
    return x;
}

inline Var lm_head(const LmVars& m, const Var& x) {
    return ad::matmul_nt(ad::layer_norm(x, m.lnf_g, m.lnf_b), m.unembed);
}

struct LmForwardResult {
    Var logits;     // (batch*seq) x vocab
    Var hook_acts;  // residual stream entering hook_layer, pre-replacement
};

inline LmForwardResult lm_forward(Tape& tape, const LmVars& m, const TokenBatch& tokens,
                                  const SpliceMode& mode = SpliceMode::clean()) {
    const auto& cfg = *m.config;
    const Eigen::Index seq = tokens.seq_len();
    Var x = lm_embed(tape, m, tokens);
    x = lm_apply_layers(m, x, 0, cfg.hook_layer, seq);
    Var hook = x;
    if (mode.kind == SpliceMode::Kind::Replace) {
        check_runtime(static_cast<bool>(mode.source), "Replace mode requires a payload source");
        Var payload = mode.source(tape, hook);
        check_runtime(payload.rows() == hook.rows() && payload.cols() == cfg.d_model,
                      "splice payload shape does not match (positions x d_model)");
        x = payload;
    }
    x = lm_apply_layers(m, x, cfg.hook_layer, cfg.n_layers, seq);
    return LmForwardResult{lm_head(m, x), hook};
}

// One Adam step on next-token cross-entropy. Returns the batch CE in nats.
inline double lm_train_step(const TokenBatch& tokens, LmParams& params, Adam& adam, double lr,
                            double grad_clip = 1.0) {
    check_arg(tokens.batch() > 0 && tokens.seq_len() > 0, "zero-length batch");
    Tape tape;
    ParamBinder binder(tape);
    LmVars vars = bind_lm(tape, params, &binder);
    LmForwardResult fwd = lm_forward(tape, vars, tokens);
    Var ce = ad::softmax_cross_entropy(fwd.logits, tokens.next_token_targets());
    const double loss = ce.scalar();
    if (!std::isfinite(loss))
        throw NumericalError("lm_train_step: non-finite training loss " + std::to_string(loss));
    tape.backward(ce);
    adam_step(adam, binder, lr, grad_clip);
    return loss;
}

}  // namespace saew
