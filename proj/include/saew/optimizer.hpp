// Adam with bias correction and optional global-norm gradient clipping.
#pragma once

#include "saew/common.hpp"

#include <vector>

namespace saew {

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Parameters are registered once (by pointer to the master matrix) and then
// stepped with gradients supplied in registration order.
class Adam {
public:
    explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

    size_t add_param(Mat* master) {
        slots_.push_back(Slot{master, Mat::Zero(master->rows(), master->cols()),
                              Mat::Zero(master->rows(), master->cols())});
        return slots_.size() - 1;
    }
    size_t size() const { return slots_.size(); }

    int64_t steps_taken() const { return t_; }

    // grads[i] pairs with the i-th registered parameter. Returns the global
    // gradient norm before clipping. clip <= 0 disables clipping.
    double step(const std::vector<Mat>& grads, double lr, double clip = 0.0) {
        check_runtime(grads.size() == slots_.size(), "Adam: gradient count mismatch");
        double sq = 0.0;
        for (const Mat& g : grads) sq += g.squaredNorm();
        const double norm = std::sqrt(sq);
        double scale = 1.0;
        if (clip > 0.0 && norm > clip) scale = clip / norm;
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (size_t i = 0; i < slots_.size(); ++i) {
            Slot& s = slots_[i];
            const Mat g = grads[i] * scale;
            s.m = cfg_.beta1 * s.m + (1.0 - cfg_.beta1) * g;
            s.v = cfg_.beta2 * s.v + (1.0 - cfg_.beta2) * g.cwiseProduct(g);
            const Mat mhat = s.m / bc1;
            const Mat vhat = s.v / bc2;
            *s.master -= lr * mhat.cwiseQuotient(vhat.cwiseSqrt() +
                                                 Mat::Constant(vhat.rows(), vhat.cols(), cfg_.eps));
        }
        return norm;
    }

private:
    struct Slot {
        Mat* master;
        Mat m, v;
    };
    AdamConfig cfg_;
    std::vector<Slot> slots_;
    int64_t t_ = 0;
};

}  // namespace saew
