// Reverse-mode automatic differentiation over dense double matrices.
//
// A Tape records operations in execution order; backward() replays them in
// reverse. Values that do not (transitively) depend on a tracked leaf are
// never recorded, so frozen-model forwards and detached references cost no
// graph memory and receive no gradients.
#pragma once

#include "saew/common.hpp"

#include <algorithm>
#include <functional>
#include <memory>
#include <numeric>
#include <utility>
#include <vector>

namespace saew {

class Tape;

namespace detail {
struct Node {
    Mat val;
    Mat grad;
    bool requires_grad = false;
    bool grad_set = false;
    std::function<void(const Mat&)> backward;  // empty for leaves and constants

    void accumulate(const Mat& g) {
        if (!grad_set) {
            grad = g;
            grad_set = true;
        } else {
            grad += g;
        }
    }
};
}  // namespace detail

// Lightweight handle to a tape node. Copies share the node.
class Var {
public:
    Var() = default;
    Var(std::shared_ptr<detail::Node> n, Tape* tape) : node_(std::move(n)), tape_(tape) {}

    const Mat& value() const { return node_->val; }
    double scalar() const {
        check_runtime(node_->val.size() == 1, "Var is not a scalar");
        return node_->val(0, 0);
    }
    bool requires_grad() const { return node_->requires_grad; }
    bool has_grad() const { return node_ && node_->grad_set; }
    const Mat& grad() const {
        check_runtime(has_grad(), "no gradient recorded for this Var");
        return node_->grad;
    }
    Mat grad_or_zero() const {
        return has_grad() ? node_->grad : Mat::Zero(node_->val.rows(), node_->val.cols());
    }
    Eigen::Index rows() const { return node_->val.rows(); }
    Eigen::Index cols() const { return node_->val.cols(); }
    bool valid() const { return node_ != nullptr; }

    std::shared_ptr<detail::Node> node() const { return node_; }
    Tape* tape() const { return tape_; }

private:
    std::shared_ptr<detail::Node> node_;
    Tape* tape_ = nullptr;
};

class Tape {
public:
    Var leaf(Mat v, bool requires_grad = true) {
        auto n = std::make_shared<detail::Node>();
        n->val = std::move(v);
        n->requires_grad = requires_grad && grad_enabled_;
        return Var(n, this);
    }
    Var constant(Mat v) { return leaf(std::move(v), false); }
    Var scalar_constant(double v) { return constant(Mat::Constant(1, 1, v)); }

    bool grad_enabled() const { return grad_enabled_; }

    // Runs backward from a scalar loss. A tape supports exactly one backward.
    void backward(const Var& loss) {
        check_runtime(loss.value().size() == 1, "backward requires a scalar loss");
        check_runtime(!backward_done_, "backward already called on this tape");
        backward_done_ = true;
        if (!loss.requires_grad()) return;  // nothing tracked contributed
        loss.node()->accumulate(Mat::Constant(1, 1, 1.0));
        for (auto it = recorded_.rbegin(); it != recorded_.rend(); ++it) {
            detail::Node* n = it->get();
            if (n->grad_set && n->backward) n->backward(n->grad);
        }
    }

    // Internal: creates an op node. `fn(g)` receives the node's gradient and
    // must accumulate into the parents (which it captures by shared_ptr).
    Var record(Mat val, bool requires_grad, std::function<void(const Mat&)> fn) {
        auto n = std::make_shared<detail::Node>();
        n->val = std::move(val);
        n->requires_grad = requires_grad && grad_enabled_;
        if (n->requires_grad) {
            n->backward = std::move(fn);
            recorded_.push_back(n);
        }
        return Var(n, this);
    }

    size_t recorded_count() const { return recorded_.size(); }

    // Temporarily disables recording (reference forwards, evaluation).
    class NoGrad {
    public:
        explicit NoGrad(Tape& t) : t_(t), prev_(t.grad_enabled_) { t_.grad_enabled_ = false; }
        ~NoGrad() { t_.grad_enabled_ = prev_; }
        NoGrad(const NoGrad&) = delete;
        NoGrad& operator=(const NoGrad&) = delete;

    private:
        Tape& t_;
        bool prev_;
    };

private:
    std::vector<std::shared_ptr<detail::Node>> recorded_;
    bool grad_enabled_ = true;
    bool backward_done_ = false;
};

// ---------------------------------------------------------------------------
// Eager row-wise softmax math, shared by the fused ops and by evaluation.

inline Mat log_softmax_rows(const Mat& z) {
    Mat out(z.rows(), z.cols());
    for (Eigen::Index r = 0; r < z.rows(); ++r) {
        const double m = z.row(r).maxCoeff();
        const double lse = std::log((z.row(r).array() - m).exp().sum()) + m;
        out.row(r) = z.row(r).array() - lse;
    }
    return out;
}

inline Mat softmax_rows(const Mat& z) { return log_softmax_rows(z).array().exp(); }

// Mean next-token cross-entropy in nats. Targets < 0 are excluded.
inline double cross_entropy(const Mat& logits, const std::vector<int32_t>& targets) {
    check_runtime(static_cast<Eigen::Index>(targets.size()) == logits.rows(),
                  "cross_entropy: one target per logit row required");
    const Mat logp = log_softmax_rows(logits);
    double total = 0.0;
    int64_t count = 0;
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
        const int32_t t = targets[static_cast<size_t>(r)];
        if (t < 0) continue;
        check_runtime(t < logits.cols(), "cross_entropy: target id out of range");
        total -= logp(r, t);
        ++count;
    }
    check_runtime(count > 0, "cross_entropy: no valid target positions");
    return total / static_cast<double>(count);
}

// Mean per-row KL in nats. Forward direction: KL(P_ref || Q). The reference
// never receives gradients; it enters as a plain matrix. Log-space only.
inline double kl_divergence(const Mat& ref_logits, const Mat& logits, bool reverse = false) {
    check_runtime(ref_logits.rows() == logits.rows() && ref_logits.cols() == logits.cols(),
                  "kl_divergence: shape mismatch");
    const Mat logp = log_softmax_rows(ref_logits);
    const Mat logq = log_softmax_rows(logits);
    double total = 0.0;
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
        double row = 0.0;
        for (Eigen::Index c = 0; c < logits.cols(); ++c) {
            if (!reverse) {
                row += std::exp(logp(r, c)) * (logp(r, c) - logq(r, c));
            } else {
                row += std::exp(logq(r, c)) * (logq(r, c) - logp(r, c));
            }
        }
        total += row;
    }
    return total / static_cast<double>(logits.rows());
}

// ---------------------------------------------------------------------------
// Differentiable ops.

namespace ad {

inline Tape* tape_of(const Var& a, const Var& b) {
    check_runtime(a.tape() == b.tape(), "Vars belong to different tapes");
    return a.tape();
}

// y = A * B
inline Var matmul(const Var& a, const Var& b) {
    check_runtime(a.cols() == b.rows(), "matmul: inner dimensions differ");
    Tape* t = tape_of(a, b);
    Mat y = a.value() * b.value();
    auto an = a.node(), bn = b.node();
    return t->record(std::move(y), a.requires_grad() || b.requires_grad(), [an, bn](const Mat& g) {
        if (an->requires_grad) an->accumulate(g * bn->val.transpose());
        if (bn->requires_grad) bn->accumulate(an->val.transpose() * g);
    });
}

// y = X * W^T  (X: rows x in, W: out x in). The linear-layer workhorse.
inline Var matmul_nt(const Var& x, const Var& w) {
    check_runtime(x.cols() == w.cols(), "matmul_nt: inner dimensions differ");
    Tape* t = tape_of(x, w);
    Mat y = x.value() * w.value().transpose();
    auto xn = x.node(), wn = w.node();
    return t->record(std::move(y), x.requires_grad() || w.requires_grad(), [xn, wn](const Mat& g) {
        if (xn->requires_grad) xn->accumulate(g * wn->val);
        if (wn->requires_grad) wn->accumulate(g.transpose() * xn->val);
    });
}

inline Var add(const Var& a, const Var& b) {
    check_runtime(a.rows() == b.rows() && a.cols() == b.cols(), "add: shape mismatch");
    Tape* t = tape_of(a, b);
    Mat y = a.value() + b.value();
    auto an = a.node(), bn = b.node();
    return t->record(std::move(y), a.requires_grad() || b.requires_grad(), [an, bn](const Mat& g) {
        if (an->requires_grad) an->accumulate(g);
        if (bn->requires_grad) bn->accumulate(g);
    });
}

inline Var sub(const Var& a, const Var& b) {
    check_runtime(a.rows() == b.rows() && a.cols() == b.cols(), "sub: shape mismatch");
    Tape* t = tape_of(a, b);
    Mat y = a.value() - b.value();
    auto an = a.node(), bn = b.node();
    return t->record(std::move(y), a.requires_grad() || b.requires_grad(), [an, bn](const Mat& g) {
        if (an->requires_grad) an->accumulate(g);
        if (bn->requires_grad) bn->accumulate(-g);
    });
}

// Broadcast-add a 1 x n bias row to every row of a.
inline Var add_rowvec(const Var& a, const Var& bias) {
    check_runtime(bias.rows() == 1 && bias.cols() == a.cols(), "add_rowvec: bias must be 1 x cols");
    Tape* t = tape_of(a, bias);
    Mat y = a.value().rowwise() + bias.value().row(0);
    auto an = a.node(), bn = bias.node();
    return t->record(std::move(y), a.requires_grad() || bias.requires_grad(), [an, bn](const Mat& g) {
        if (an->requires_grad) an->accumulate(g);
        if (bn->requires_grad) bn->accumulate(g.colwise().sum());
    });
}

inline Var scale(const Var& a, double c) {
    Mat y = a.value() * c;
    auto an = a.node();
    return a.tape()->record(std::move(y), a.requires_grad(), [an, c](const Mat& g) {
        if (an->requires_grad) an->accumulate(g * c);
    });
}

inline Var relu(const Var& a) {
    Mat y = a.value().cwiseMax(0.0);
    auto an = a.node();
    return a.tape()->record(std::move(y), a.requires_grad(), [an](const Mat& g) {
        if (an->requires_grad)
            an->accumulate((an->val.array() > 0.0).select(g, Mat::Zero(g.rows(), g.cols())));
    });
}

// Exact (erf-based) GELU; smooth, so finite-difference checks behave.
inline Var gelu(const Var& a) {
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    constexpr double inv_sqrt2pi = 0.39894228040143267794;
    Mat y = a.value().unaryExpr(
        [&](double x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); });
    auto an = a.node();
    return a.tape()->record(std::move(y), a.requires_grad(), [an](const Mat& g) {
        if (!an->requires_grad) return;
        Mat d = an->val.unaryExpr([&](double x) {
            const double phi = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
            const double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
            return phi + x * pdf;
        });
        an->accumulate(g.cwiseProduct(d));
    });
}

// Row-wise layer normalization with learned gain/bias (1 x n each).
inline Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps = 1e-5) {
    const Eigen::Index n = x.cols();
    check_runtime(gain.rows() == 1 && gain.cols() == n && bias.rows() == 1 && bias.cols() == n,
                  "layer_norm: gain/bias must be 1 x cols");
    Tape* t = x.tape();
    Mat xhat(x.rows(), n);
    Vec inv_std(x.rows());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        const double mu = x.value().row(r).mean();
        const double var = (x.value().row(r).array() - mu).square().mean();
        const double inv = 1.0 / std::sqrt(var + eps);
        inv_std(r) = inv;
        xhat.row(r) = (x.value().row(r).array() - mu) * inv;
    }
    Mat y = (xhat.array().rowwise() * gain.value().row(0).array()).rowwise() +
            bias.value().row(0).array();
    auto xn = x.node(), gn = gain.node(), bn = bias.node();
    const bool rg = x.requires_grad() || gain.requires_grad() || bias.requires_grad();
    return t->record(std::move(y), rg,
                     [xn, gn, bn, xhat = std::move(xhat), inv_std = std::move(inv_std),
                      n](const Mat& g) {
        if (bn->requires_grad) bn->accumulate(g.colwise().sum());
        if (gn->requires_grad) gn->accumulate(g.cwiseProduct(xhat).colwise().sum());
        if (xn->requires_grad) {
            Mat dxhat = g.array().rowwise() * gn->val.row(0).array();
            Mat dx(g.rows(), n);
            const double invn = 1.0 / static_cast<double>(n);
            for (Eigen::Index r = 0; r < g.rows(); ++r) {
                const double m1 = dxhat.row(r).sum() * invn;
                const double m2 = dxhat.row(r).cwiseProduct(xhat.row(r)).sum() * invn;
                dx.row(r) =
                    inv_std(r) * (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2);
            }
            xn->accumulate(dx);
        }
    });
}

// out.row(i) = table.row(idx[i]); backward scatter-adds into the table.
inline Var gather_rows(const Var& table, const std::vector<int32_t>& idx) {
    Mat y(static_cast<Eigen::Index>(idx.size()), table.cols());
    for (size_t i = 0; i < idx.size(); ++i) {
        check_runtime(idx[i] >= 0 && idx[i] < table.rows(), "gather_rows: index out of range");
        y.row(static_cast<Eigen::Index>(i)) = table.value().row(idx[i]);
    }
    auto tn = table.node();
    return table.tape()->record(std::move(y), table.requires_grad(), [tn, idx](const Mat& g) {
        if (!tn->requires_grad) return;
        Mat d = Mat::Zero(tn->val.rows(), tn->val.cols());
        for (size_t i = 0; i < idx.size(); ++i)
            d.row(idx[i]) += g.row(static_cast<Eigen::Index>(i));
        tn->accumulate(d);
    });
}

// Fused causal multi-head self-attention core. Inputs are already-projected
// Q, K, V of shape (batch*seq_len) x d_model; heads live in column blocks.
// Softmax probabilities are kept for the backward pass.
inline Var causal_attention(const Var& q, const Var& k, const Var& v, int n_heads,
                            Eigen::Index seq_len) {
    const Eigen::Index rows = q.rows(), d = q.cols();
    check_runtime(rows % seq_len == 0, "causal_attention: rows not a multiple of seq_len");
    check_runtime(d % n_heads == 0, "causal_attention: d_model not divisible by n_heads");
    const Eigen::Index batch = rows / seq_len, dh = d / n_heads;
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
    Tape* t = q.tape();

    Mat out = Mat::Zero(rows, d);
    auto probs = std::make_shared<std::vector<Mat>>();
    probs->reserve(static_cast<size_t>(batch * n_heads));
    for (Eigen::Index b = 0; b < batch; ++b) {
        for (int h = 0; h < n_heads; ++h) {
            const auto qh = q.value().block(b * seq_len, h * dh, seq_len, dh);
            const auto kh = k.value().block(b * seq_len, h * dh, seq_len, dh);
            const auto vh = v.value().block(b * seq_len, h * dh, seq_len, dh);
            Mat p = Mat::Zero(seq_len, seq_len);
            for (Eigen::Index i = 0; i < seq_len; ++i) {
                // row i attends to positions 0..i
                Eigen::RowVectorXd s = (qh.row(i) * kh.topRows(i + 1).transpose()) * inv_sqrt_dh;
                const double m = s.maxCoeff();
                Eigen::RowVectorXd e = (s.array() - m).exp();
                p.row(i).head(i + 1) = e / e.sum();
            }
            out.block(b * seq_len, h * dh, seq_len, dh).noalias() = p * vh;
            probs->push_back(std::move(p));
        }
    }
    auto qn = q.node(), kn = k.node(), vn = v.node();
    const bool rg = q.requires_grad() || k.requires_grad() || v.requires_grad();
    return t->record(std::move(out), rg,
                     [qn, kn, vn, probs, batch, n_heads, seq_len, dh, inv_sqrt_dh](const Mat& g) {
        Mat dq = Mat::Zero(qn->val.rows(), qn->val.cols());
        Mat dk = Mat::Zero(kn->val.rows(), kn->val.cols());
        Mat dv = Mat::Zero(vn->val.rows(), vn->val.cols());
        for (Eigen::Index b = 0; b < batch; ++b) {
            for (int h = 0; h < n_heads; ++h) {
                const Mat& p = (*probs)[static_cast<size_t>(b * n_heads + h)];
                const auto qh = qn->val.block(b * seq_len, h * dh, seq_len, dh);
                const auto kh = kn->val.block(b * seq_len, h * dh, seq_len, dh);
                const auto vh = vn->val.block(b * seq_len, h * dh, seq_len, dh);
                const auto go = g.block(b * seq_len, h * dh, seq_len, dh);
                Mat dp = go * vh.transpose();
                dv.block(b * seq_len, h * dh, seq_len, dh).noalias() = p.transpose() * go;
                // softmax backward; masked entries have p == 0, so ds == 0 there
                Mat ds(seq_len, seq_len);
                for (Eigen::Index i = 0; i < seq_len; ++i) {
                    const double dot = dp.row(i).cwiseProduct(p.row(i)).sum();
                    ds.row(i) = p.row(i).cwiseProduct(dp.row(i).array().matrix() -
                                                      Eigen::RowVectorXd::Constant(seq_len, dot));
                }
                dq.block(b * seq_len, h * dh, seq_len, dh).noalias() = ds * kh * inv_sqrt_dh;
                dk.block(b * seq_len, h * dh, seq_len, dh).noalias() =
                    ds.transpose() * qh * inv_sqrt_dh;
            }
        }
        if (qn->requires_grad) qn->accumulate(dq);
        if (kn->requires_grad) kn->accumulate(dk);
        if (vn->requires_grad) vn->accumulate(dv);
    });
}

// Fused softmax + mean cross-entropy over rows whose target is >= 0.
inline Var softmax_cross_entropy(const Var& logits, const std::vector<int32_t>& targets) {
    check_runtime(static_cast<Eigen::Index>(targets.size()) == logits.rows(),
                  "softmax_cross_entropy: one target per row required");
    Mat logp = log_softmax_rows(logits.value());
    double total = 0.0;
    int64_t count = 0;
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
        const int32_t tid = targets[static_cast<size_t>(r)];
        if (tid < 0) continue;
        check_runtime(tid < logits.cols(), "softmax_cross_entropy: target id out of range");
        total -= logp(r, tid);
        ++count;
    }
    check_runtime(count > 0, "softmax_cross_entropy: no valid target positions");
    const double mean = total / static_cast<double>(count);
    auto ln = logits.node();
    return logits.tape()->record(
        Mat::Constant(1, 1, mean), logits.requires_grad(),
        [ln, targets, logp = std::move(logp), count](const Mat& g) {
            if (!ln->requires_grad) return;
            const double s = g(0, 0) / static_cast<double>(count);
            Mat d = Mat::Zero(ln->val.rows(), ln->val.cols());
            for (Eigen::Index r = 0; r < ln->val.rows(); ++r) {
                const int32_t tid = targets[static_cast<size_t>(r)];
                if (tid < 0) continue;
                d.row(r) = logp.row(r).array().exp() * s;
                d(r, tid) -= s;
            }
            ln->accumulate(d);
        });
}

// Mean per-row KL against a fixed reference logit matrix. The reference is a
// plain matrix by construction, so no gradient can flow into it.
// forward direction: KL(P_ref || Q); reverse: KL(Q || P_ref).
inline Var kl_vs_reference(const Mat& ref_logits, const Var& logits, bool reverse = false) {
    check_runtime(ref_logits.rows() == logits.rows() && ref_logits.cols() == logits.cols(),
                  "kl_vs_reference: shape mismatch");
    const double value = kl_divergence(ref_logits, logits.value(), reverse);
    Mat logp = log_softmax_rows(ref_logits);
    Mat logq = log_softmax_rows(logits.value());
    auto ln = logits.node();
    const auto rows = logits.rows();
    return logits.tape()->record(
        Mat::Constant(1, 1, value), logits.requires_grad(),
        [ln, logp = std::move(logp), logq = std::move(logq), rows, reverse](const Mat& g) {
            if (!ln->requires_grad) return;
            const double s = g(0, 0) / static_cast<double>(rows);
            Mat d(logq.rows(), logq.cols());
            if (!reverse) {
                d = (logq.array().exp() - logp.array().exp()) * s;
            } else {
                for (Eigen::Index r = 0; r < logq.rows(); ++r) {
                    const Eigen::ArrayXd qr = logq.row(r).array().exp();
                    const Eigen::ArrayXd diff = logq.row(r).array() - logp.row(r).array();
                    const double klr = (qr * diff).sum();
                    d.row(r) = (qr * (diff - klr) * s).matrix();
                }
            }
            ln->accumulate(d);
        });
}

// Mean over rows of the squared error summed across columns (no division by
// the column count). Gradients flow into both sides when tracked.
inline Var mse_rows(const Var& pred, const Var& target) {
    check_runtime(pred.rows() == target.rows() && pred.cols() == target.cols(),
                  "mse_rows: shape mismatch");
    Tape* t = tape_of(pred, target);
    const double rows = static_cast<double>(pred.rows());
    const double value = (pred.value() - target.value()).squaredNorm() / rows;
    auto pn = pred.node(), tn = target.node();
    return t->record(Mat::Constant(1, 1, value), pred.requires_grad() || target.requires_grad(),
                     [pn, tn, rows](const Mat& g) {
        const Mat d = (pn->val - tn->val) * (2.0 * g(0, 0) / rows);
        if (pn->requires_grad) pn->accumulate(d);
        if (tn->requires_grad) tn->accumulate(-d);
    });
}

// Keeps the k largest entries per row (ties broken toward the lowest column
// index), zeroes the rest. `allowed` optionally restricts the candidate
// columns; fewer than k allowed columns keeps them all.
inline Var topk_select(const Var& pre, int k, const std::vector<uint8_t>* allowed = nullptr) {
    check_runtime(k >= 1, "topk_select: k must be >= 1");
    const Eigen::Index rows = pre.rows(), cols = pre.cols();
    check_runtime(k <= cols, "topk_select: k exceeds column count");
    if (allowed)
        check_runtime(static_cast<Eigen::Index>(allowed->size()) == cols,
                      "topk_select: allowed mask size mismatch");

    std::vector<int32_t> candidates;
    candidates.reserve(static_cast<size_t>(cols));
    for (int32_t c = 0; c < cols; ++c)
        if (!allowed || (*allowed)[static_cast<size_t>(c)]) candidates.push_back(c);

    Mat y = Mat::Zero(rows, cols);
    auto selected = std::make_shared<std::vector<std::vector<int32_t>>>(
        static_cast<size_t>(rows));
    std::vector<int32_t> work;
    for (Eigen::Index r = 0; r < rows; ++r) {
        work = candidates;
        const auto* row = pre.value().row(r).data();
        const size_t keep = std::min(static_cast<size_t>(k), work.size());
        auto better = [row](int32_t a, int32_t b) {
            return row[a] > row[b] || (row[a] == row[b] && a < b);
        };
        if (keep < work.size())
            std::nth_element(work.begin(), work.begin() + static_cast<std::ptrdiff_t>(keep) - 1,
                             work.end(), better);
        work.resize(keep);
        std::sort(work.begin(), work.end());
        for (int32_t c : work) y(r, c) = pre.value()(r, c);
        (*selected)[static_cast<size_t>(r)] = work;
    }
    auto pn = pre.node();
    return pre.tape()->record(std::move(y), pre.requires_grad(), [pn, selected](const Mat& g) {
        if (!pn->requires_grad) return;
        Mat d = Mat::Zero(g.rows(), g.cols());
        for (Eigen::Index r = 0; r < g.rows(); ++r)
            for (int32_t c : (*selected)[static_cast<size_t>(r)]) d(r, c) = g(r, c);
        pn->accumulate(d);
    });
}

// Mean over rows of sum_i h_i * ||w_dec column i||_1 (decoder-norm-weighted
// sparsity). Gradients reach both the latents and the decoder.
inline Var weighted_l1(const Var& h, const Var& w_dec) {
    check_runtime(h.cols() == w_dec.cols(), "weighted_l1: latent/decoder width mismatch");
    Tape* t = tape_of(h, w_dec);
    const double rows = static_cast<double>(h.rows());
    Eigen::RowVectorXd col_l1 = w_dec.value().cwiseAbs().colwise().sum();
    const double value = (h.value() * col_l1.transpose()).sum() / rows;
    auto hn = h.node(), wn = w_dec.node();
    return t->record(Mat::Constant(1, 1, value), h.requires_grad() || w_dec.requires_grad(),
                     [hn, wn, col_l1 = std::move(col_l1), rows](const Mat& g) {
        const double s = g(0, 0) / rows;
        if (hn->requires_grad) {
            Mat dh(hn->val.rows(), hn->val.cols());
            dh.rowwise() = col_l1 * s;
            hn->accumulate(dh);
        }
        if (wn->requires_grad) {
            const Eigen::RowVectorXd h_colsum = hn->val.colwise().sum();
            Mat dw = wn->val.unaryExpr([](double x) {
                return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0);
            });
            dw.array().rowwise() *= h_colsum.array() * s;
            wn->accumulate(dw);
        }
    });
}

// Mean over rows of the row L1 norm.
inline Var l1_mean(const Var& h) {
    const double rows = static_cast<double>(h.rows());
    const double value = h.value().cwiseAbs().sum() / rows;
    auto hn = h.node();
    return h.tape()->record(Mat::Constant(1, 1, value), h.requires_grad(),
                            [hn, rows](const Mat& g) {
        if (!hn->requires_grad) return;
        const double s = g(0, 0) / rows;
        hn->accumulate(hn->val.unaryExpr([s](double x) {
            return x > 0.0 ? s : (x < 0.0 ? -s : 0.0);
        }));
    });
}

inline Var sum_all(const Var& a) {
    auto an = a.node();
    return a.tape()->record(Mat::Constant(1, 1, a.value().sum()), a.requires_grad(),
                            [an](const Mat& g) {
        if (an->requires_grad)
            an->accumulate(Mat::Constant(an->val.rows(), an->val.cols(), g(0, 0)));
    });
}

// Cuts the graph: the result carries the same value but no history.
inline Var detach(const Var& a) { return a.tape()->constant(a.value()); }

}  // namespace ad
}  // namespace saew
