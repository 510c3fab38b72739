#include "saew/adapters.hpp"

#include "support.hpp"

#include <catch2/catch_amalgamated.hpp>

using namespace saew;

TEST_CASE("low-rank skip adapter", "[adapters]") {
    Rng rng(101);

    SECTION("fresh init is a bitwise identity") {
        LowRankSkip a = LowRankSkip::init(8, 2, rng);
        Mat x = rng.normal_mat(5, 8);
        Tape t;
        Var y = lowrank_forward(t.constant(x), t.constant(a.u), t.constant(a.v));
        REQUIRE(std::memcmp(y.value().data(), x.data(), sizeof(double) * x.size()) == 0);
    }
    SECTION("identity-like U and V with r = d doubles the input") {
        const Eigen::Index d = 4;
        Mat x = rng.normal_mat(3, d);
        Mat eye = Mat::Identity(d, d);
        Tape t;
        Var y = lowrank_forward(t.constant(x), t.constant(eye), t.constant(eye));
        REQUIRE(y.value().isApprox(2.0 * x, 1e-14));
    }
    SECTION("seeded r=2, d=8 matches the dense (I + UV)x oracle") {
        LowRankSkip a = LowRankSkip::init(8, 2, rng);
        a.v = rng.normal_mat(2, 8, 0.0, 0.3);
        Mat x = rng.normal_mat(6, 8);
        Mat dense = Mat::Identity(8, 8) + a.u * a.v;
        Mat expect = x * dense.transpose();
        Tape t;
        Var y = lowrank_forward(t.constant(x), t.constant(a.u), t.constant(a.v));
        REQUIRE((y.value() - expect).cwiseAbs().maxCoeff() < 1e-12);
    }
    SECTION("rank bounds are enforced") {
        REQUIRE_THROWS_AS(LowRankSkip::init(8, 8, rng), ValidationError);
        REQUIRE_THROWS_AS(LowRankSkip::init(8, 0, rng), ValidationError);
    }
    SECTION("gradients match finite differences") {
        LowRankSkip a = LowRankSkip::init(6, 2, rng);
        a.v = rng.normal_mat(2, 6, 0.0, 0.5);
        Mat x = rng.normal_mat(4, 6);
        Mat w = rng.normal_mat(6, 1);
        auto eval = [&]() {
            Tape t;
            Var y = lowrank_forward(t.leaf(x), t.leaf(a.u), t.leaf(a.v));
            return ad::sum_all(ad::matmul(y, t.constant(w))).scalar();
        };
        Tape t;
        Var vx = t.leaf(x), vu = t.leaf(a.u), vv = t.leaf(a.v);
        Var y = lowrank_forward(vx, vu, vv);
        t.backward(ad::sum_all(ad::matmul(y, t.constant(w))));
        REQUIRE(saew::test::fd_max_rel_error(x, vx.grad(), eval) < 1e-4);
        REQUIRE(saew::test::fd_max_rel_error(a.u, vu.grad(), eval) < 1e-4);
        REQUIRE(saew::test::fd_max_rel_error(a.v, vv.grad(), eval) < 1e-4);
    }
}

TEST_CASE("MLP skip adapter", "[adapters]") {
    Rng rng(202);

    SECTION("fresh init is a bitwise identity") {
        MlpSkip a = MlpSkip::init(8, 3, rng);
        Mat x = rng.normal_mat(5, 8);
        Tape t;
        Var y = mlp_skip_forward(t.constant(x), t.constant(a.w1), t.constant(a.b1),
                                 t.constant(a.w2), t.constant(a.b2));
        REQUIRE(std::memcmp(y.value().data(), x.data(), sizeof(double) * x.size()) == 0);
    }
    SECTION("dead hidden layer passes x + b2") {
        MlpSkip a = MlpSkip::init(4, 2, rng);
        a.w1 = Mat::Zero(2, 4);
        a.b1 = Mat::Constant(1, 2, -1.0);
        a.b2 = rng.normal_mat(1, 4);
        Mat x = rng.normal_mat(3, 4);
        Tape t;
        Var y = mlp_skip_forward(t.constant(x), t.constant(a.w1), t.constant(a.b1),
                                 t.constant(a.w2), t.constant(a.b2));
        Mat expect = x.rowwise() + a.b2.row(0);
        REQUIRE(y.value().isApprox(expect, 1e-14));
    }
    SECTION("seeded case matches a scalar-loop oracle") {
        MlpSkip a = MlpSkip::init(5, 2, rng);
        a.b1 = rng.normal_mat(1, 2);
        a.w2 = rng.normal_mat(5, 2, 0.0, 0.4);
        a.b2 = rng.normal_mat(1, 5, 0.0, 0.2);
        Mat x = rng.normal_mat(3, 5);
        Mat expect(3, 5);
        for (int r = 0; r < 3; ++r) {
            double hid[2];
            for (int j = 0; j < 2; ++j) {
                double s = a.b1(0, j);
                for (int c = 0; c < 5; ++c) s += a.w1(j, c) * x(r, c);
                hid[j] = s > 0.0 ? s : 0.0;
            }
            for (int c = 0; c < 5; ++c) {
                double s = x(r, c) + a.b2(0, c);
                for (int j = 0; j < 2; ++j) s += a.w2(c, j) * hid[j];
                expect(r, c) = s;
            }
        }
        Tape t;
        Var y = mlp_skip_forward(t.constant(x), t.constant(a.w1), t.constant(a.b1),
                                 t.constant(a.w2), t.constant(a.b2));
        REQUIRE((y.value() - expect).cwiseAbs().maxCoeff() < 1e-12);
    }
    SECTION("gradients match finite differences") {
        MlpSkip a = MlpSkip::init(5, 2, rng);
        a.b1 = rng.normal_mat(1, 2, 0.3, 0.5);  // keep ReLU away from the kink
        a.w2 = rng.normal_mat(5, 2, 0.0, 0.4);
        a.b2 = rng.normal_mat(1, 5, 0.0, 0.2);
        Mat x = rng.normal_mat(4, 5);
        Mat w = rng.normal_mat(5, 1);
        auto eval = [&]() {
            Tape t;
            Var y = mlp_skip_forward(t.leaf(x), t.leaf(a.w1), t.leaf(a.b1), t.leaf(a.w2),
                                     t.leaf(a.b2));
            return ad::sum_all(ad::matmul(y, t.constant(w))).scalar();
        };
        Tape t;
        Var vx = t.leaf(x), v1 = t.leaf(a.w1), vb1 = t.leaf(a.b1), v2 = t.leaf(a.w2),
            vb2 = t.leaf(a.b2);
        Var y = mlp_skip_forward(vx, v1, vb1, v2, vb2);
        t.backward(ad::sum_all(ad::matmul(y, t.constant(w))));
        REQUIRE(saew::test::fd_max_rel_error(a.w1, v1.grad(), eval) < 1e-4);
        REQUIRE(saew::test::fd_max_rel_error(a.b1, vb1.grad(), eval) < 1e-4);
        REQUIRE(saew::test::fd_max_rel_error(a.w2, v2.grad(), eval) < 1e-4);
        REQUIRE(saew::test::fd_max_rel_error(a.b2, vb2.grad(), eval) < 1e-4);
        REQUIRE(saew::test::fd_max_rel_error(x, vx.grad(), eval) < 1e-4);
    }
}

TEST_CASE("LoRA wrap effective weight", "[adapters]") {
    Rng rng(303);
    Mat base = rng.normal_mat(6, 4);

    SECTION("zero B leaves the base bitwise") {
        LoraWrap w = LoraWrap::init(base, 2, rng);
        Mat eff = lora_effective_weight(w);
        REQUIRE(std::memcmp(eff.data(), base.data(), sizeof(double) * base.size()) == 0);
    }
    SECTION("full-rank cancellation gives zero") {
        LoraWrap w = LoraWrap::init(base, 4, rng);
        w.a = Mat::Identity(4, 4);
        w.b = -base;
        REQUIRE(lora_effective_weight(w).cwiseAbs().maxCoeff() < 1e-15);
    }
    SECTION("seeded rank-2 case matches the dense multiply oracle") {
        LoraWrap w = LoraWrap::init(base, 2, rng);
        w.b = rng.normal_mat(6, 2, 0.0, 0.3);
        Mat expect = base;
        for (int r = 0; r < 6; ++r)
            for (int c = 0; c < 4; ++c)
                for (int i = 0; i < 2; ++i) expect(r, c) += w.b(r, i) * w.a(i, c);
        REQUIRE((lora_effective_weight(w) - expect).cwiseAbs().maxCoeff() < 1e-12);
    }
    SECTION("rank above min(m, n) is rejected") {
        REQUIRE_THROWS_AS(LoraWrap::init(base, 5, rng), ValidationError);
    }
    SECTION("forward through the wrap equals forward through the effective weight") {
        LoraWrap w = LoraWrap::init(base, 2, rng);
        w.b = rng.normal_mat(6, 2, 0.0, 0.5);
        Mat x = rng.normal_mat(7, 4);
        Tape t;
        WeightVar wv = WeightVar::with_lora(t.constant(base), t.constant(w.a), t.constant(w.b));
        Var through_wrap = apply_weight(t.constant(x), wv);
        Var through_eff = ad::matmul_nt(t.constant(x), effective_weight_var(wv));
        REQUIRE((through_wrap.value() - through_eff.value()).cwiseAbs().maxCoeff() < 1e-12);
    }
}

TEST_CASE("skip adapters round-trip through checkpoints", "[adapters]") {
    Rng rng(404);
    saew::test::ScratchDir dir("adapters_io");

    LowRankSkip lr = LowRankSkip::init(8, 2, rng);
    lr.v = rng.normal_mat(2, 8);
    save_lowrank_skip(lr, dir.file("lr.saew"));
    LowRankSkip lr2 = load_lowrank_skip(TensorFile::load(dir.file("lr.saew")));
    REQUIRE(lr2.rank == 2);
    REQUIRE(lr2.u.isApprox(lr.u));
    REQUIRE(lr2.v.isApprox(lr.v));

    MlpSkip mlp = MlpSkip::init(8, 3, rng);
    mlp.w2 = rng.normal_mat(8, 3);
    save_mlp_skip(mlp, dir.file("mlp.saew"));
    MlpSkip mlp2 = load_mlp_skip(TensorFile::load(dir.file("mlp.saew")));
    REQUIRE(mlp2.hidden == 3);
    REQUIRE(mlp2.w1.isApprox(mlp.w1));
    REQUIRE(mlp2.w2.isApprox(mlp.w2));
}
