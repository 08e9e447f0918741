#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "cytrans/gradcheck.hpp"
#include "cytrans/ops.hpp"
#include "cytrans/rng.hpp"

using namespace cytrans;
using TD = Tensor<double>;

namespace {

TD leaf(Rng& rng, const Shape& s, double lo = -1.0, double hi = 1.0) {
    return rng.rand_uniform<double>(s, lo, hi, true);
}

}  // namespace

TEST_CASE("elementwise forward examples") {
    auto a = Tensor<float>::from({2}, {1.f, 2.f});
    auto b = Tensor<float>::from({2}, {3.f, 4.f});
    auto y = add(a, b);
    CHECK(y.value()[0] == 4.f);
    CHECK(y.value()[1] == 6.f);

    auto sm = softmax_rows(Tensor<float>::from({3}, {0.f, 0.f, 0.f}));
    for (int i = 0; i < 3; ++i) CHECK(sm.value()[i] == Catch::Approx(1.0 / 3.0));
}

TEST_CASE("conv2d identity kernel is the identity") {
    Rng rng(7);
    auto x = rng.randn<float>({1, 1, 5, 5});
    auto w = Tensor<float>::from({1, 1, 1, 1}, {1.f});
    auto y = conv2d(x, w, 1, 0);
    REQUIRE(y.shape() == x.shape());
    for (int64_t i = 0; i < x.size(); ++i) CHECK(y.value()[i] == x.value()[i]);
}

TEST_CASE("basic analytic derivatives") {
    SECTION("d(x*x)/dx at 3 is 6") {
        auto x = Tensor<double>::from({1}, {3.0}, true);
        auto y = mul(x, x);
        backward(sum_all(y));
        CHECK(x.grad()[0] == Catch::Approx(6.0));
    }
    SECTION("d sum(A*B)/dA equals B") {
        Rng rng(3);
        auto A = rng.randn<double>({2, 3}, 1.0, true);
        auto B = rng.randn<double>({2, 3});
        backward(sum_all(mul(A, B)));
        for (int64_t i = 0; i < A.size(); ++i) CHECK(A.grad()[i] == Catch::Approx(B.value()[i]));
    }
    SECTION("MSE gradient vanishes at the minimum") {
        Rng rng(4);
        auto p = rng.randn<double>({4, 4}, 1.0, true);
        auto t = p.detach();
        backward(mse(p, t));
        for (auto g : p.grad()) CHECK(g == 0.0);
    }
}

TEST_CASE("gradient accumulates across fan-out") {
    auto x = Tensor<double>::from({1}, {2.0}, true);
    auto y = add(mul(x, x), x);  // x^2 + x -> dy/dx = 2x + 1 = 5
    backward(sum_all(y));
    CHECK(x.grad()[0] == Catch::Approx(5.0));
}

TEST_CASE("backward requires a scalar and consumes the tape") {
    Rng rng(5);
    auto x = rng.randn<double>({2, 2}, 1.0, true);
    auto y = mul(x, x);
    CHECK_THROWS_AS(backward(y), TensorError);
    auto loss = sum_all(y);
    backward(loss);
    CHECK_THROWS_AS(backward(loss), TensorError);
}

TEST_CASE("non-finite forward values are surfaced") {
    auto x = Tensor<double>::from({2}, {1.0, -1.0});
    CHECK_THROWS_AS(log_op(x), TensorError);  // log(-1) = nan
    auto big = Tensor<float>::from({1}, {1e30f});
    CHECK_THROWS_AS(mul(big, big), TensorError);
}

TEST_CASE("forward and backward are bitwise deterministic") {
    auto run = [] {
        Rng rng(11);
        auto x = rng.randn<float>({2, 3, 8, 8}, 1.0f, true);
        auto w = rng.randn<float>({4, 3, 3, 3}, 0.2f, true);
        auto b = rng.randn<float>({4}, 0.1f, true);
        auto y = silu(conv2d(x, w, b, 1, 1));
        auto loss = mean_all(mul(y, y));
        backward(loss);
        std::vector<float> out(loss.value().begin(), loss.value().end());
        out.insert(out.end(), x.grad().begin(), x.grad().end());
        out.insert(out.end(), w.grad().begin(), w.grad().end());
        return out;
    };
    auto r1 = run(), r2 = run();
    REQUIRE(r1.size() == r2.size());
    for (size_t i = 0; i < r1.size(); ++i) REQUIRE(r1[i] == r2[i]);
}

TEST_CASE("grad_check: elementwise primitives") {
    Rng rng(21);
    auto unary_case = [&](auto opfn, double lo = -1.0, double hi = 1.0) {
        std::vector<TD> in{leaf(rng, {3, 5}, lo, hi)};
        auto proj = rng.rand_uniform<double>({3, 5}, -1.0, 1.0);
        return grad_check(
            [&](const std::vector<TD>& t) { return sum_all(mul(opfn(t[0]), proj)); }, in);
    };
    CHECK(unary_case([](const TD& t) { return relu(t); }) < 1e-4);
    CHECK(unary_case([](const TD& t) { return leaky_relu(t, 0.2); }) < 1e-4);
    CHECK(unary_case([](const TD& t) { return silu(t); }) < 1e-6);
    CHECK(unary_case([](const TD& t) { return tanh_act(t); }) < 1e-6);
    CHECK(unary_case([](const TD& t) { return exp_op(t); }) < 1e-6);
    CHECK(unary_case([](const TD& t) { return log_op(t); }, 0.2, 2.0) < 1e-6);
    CHECK(unary_case([](const TD& t) { return abs_val(t); }) < 1e-4);
    CHECK(unary_case([](const TD& t) { return scale(t, 1.7); }) < 1e-6);
    CHECK(unary_case([](const TD& t) { return add_scalar(t, 0.3); }) < 1e-6);
}

TEST_CASE("grad_check: mul meets the 1e-6 bound") {
    Rng rng(22);
    std::vector<TD> in{leaf(rng, {4, 4}), leaf(rng, {4, 4})};
    auto proj = rng.rand_uniform<double>({4, 4}, -1.0, 1.0);
    double err = grad_check(
        [&](const std::vector<TD>& t) { return sum_all(mul(mul(t[0], t[1]), proj)); }, in);
    CHECK(err <= 1e-6);
}

TEST_CASE("grad_check: add/sub/reductions/reshapes") {
    Rng rng(23);
    auto check = [&](auto buildfn, std::vector<TD> in) {
        return grad_check(buildfn, std::move(in));
    };
    CHECK(check([](const std::vector<TD>& t) { return mean_all(add(t[0], t[1])); },
                {leaf(rng, {2, 6}), leaf(rng, {2, 6})}) < 1e-6);
    CHECK(check([](const std::vector<TD>& t) { return mean_all(sub(t[0], t[1])); },
                {leaf(rng, {2, 6}), leaf(rng, {2, 6})}) < 1e-6);
    CHECK(check([](const std::vector<TD>& t) { return sum_all(reshape(t[0], {6, 2})); },
                {leaf(rng, {2, 6})}) < 1e-6);
    Rng prng(29);
    auto proj3 = prng.rand_uniform<double>({2, 4, 3}, -1.0, 1.0);
    CHECK(check(
              [&](const std::vector<TD>& t) {
                  return sum_all(mul(transpose_last2(t[0]), proj3));
              },
              {leaf(rng, {2, 3, 4})}) < 1e-6);
    auto proj4 = prng.rand_uniform<double>({2, 4, 3, 2}, -1.0, 1.0);
    CHECK(check(
              [&](const std::vector<TD>& t) { return sum_all(mul(perm_0213(t[0]), proj4)); },
              {leaf(rng, {2, 3, 4, 2})}) < 1e-6);
    auto projr = prng.rand_uniform<double>({5}, -1.0, 1.0);
    CHECK(check(
              [&](const std::vector<TD>& t) { return sum_all(mul(row_sum(t[0]), projr)); },
              {leaf(rng, {5, 3})}) < 1e-6);
}

TEST_CASE("grad_check: matmul family") {
    Rng rng(24);
    auto proj = rng.rand_uniform<double>({3, 4}, -1.0, 1.0);
    CHECK(grad_check(
              [&](const std::vector<TD>& t) {
                  return sum_all(mul(matmul(t[0], t[1]), proj));
              },
              {leaf(rng, {3, 5}), leaf(rng, {5, 4})}) < 1e-6);
    CHECK(grad_check(
              [&](const std::vector<TD>& t) {
                  return sum_all(mul(matmul_nt(t[0], t[1]), proj));
              },
              {leaf(rng, {3, 5}), leaf(rng, {4, 5})}) < 1e-6);
    auto proj2 = rng.rand_uniform<double>({3, 5}, -1.0, 1.0);
    CHECK(grad_check(
              [&](const std::vector<TD>& t) {
                  return sum_all(mul(add_rowvec(t[0], t[1]), proj2));
              },
              {leaf(rng, {3, 5}), leaf(rng, {5})}) < 1e-6);
}

TEST_CASE("grad_check: conv2d variants") {
    Rng rng(25);
    SECTION("3x3 stride 1 with padding on 1x4x4") {
        auto proj = rng.rand_uniform<double>({1, 2, 4, 4}, -1.0, 1.0);
        double err = grad_check(
            [&](const std::vector<TD>& t) {
                return sum_all(mul(conv2d(t[0], t[1], t[2], 1, 1), proj));
            },
            {leaf(rng, {1, 1, 4, 4}), leaf(rng, {2, 1, 3, 3}), leaf(rng, {2})});
        CHECK(err <= 1e-3);
        CHECK(err < 1e-6);
    }
    SECTION("3x3 stride 2") {
        auto proj = rng.rand_uniform<double>({2, 3, 3, 3}, -1.0, 1.0);
        double err = grad_check(
            [&](const std::vector<TD>& t) {
                return sum_all(mul(conv2d(t[0], t[1], t[2], 2, 1), proj));
            },
            {leaf(rng, {2, 2, 5, 5}), leaf(rng, {3, 2, 3, 3}), leaf(rng, {3})});
        CHECK(err <= 1e-3);
    }
    SECTION("7x7 stride 1 pad 3") {
        auto proj = rng.rand_uniform<double>({1, 2, 8, 8}, -1.0, 1.0);
        double err = grad_check(
            [&](const std::vector<TD>& t) {
                return sum_all(mul(conv2d(t[0], t[1], t[2], 1, 3), proj));
            },
            {leaf(rng, {1, 1, 8, 8}), leaf(rng, {2, 1, 7, 7}), leaf(rng, {2})});
        CHECK(err <= 1e-3);
    }
    SECTION("transposed stride 2") {
        auto proj = rng.rand_uniform<double>({1, 2, 8, 8}, -1.0, 1.0);
        double err = grad_check(
            [&](const std::vector<TD>& t) {
                return sum_all(mul(conv_transpose2d(t[0], t[1], t[2], 2, 1), proj));
            },
            {leaf(rng, {1, 3, 4, 4}), leaf(rng, {3, 2, 4, 4}), leaf(rng, {2})});
        CHECK(err <= 1e-3);
    }
}

TEST_CASE("grad_check: pooling, upsampling, concat") {
    Rng rng(26);
    auto proj = rng.rand_uniform<double>({1, 2, 2, 2}, -1.0, 1.0);
    CHECK(grad_check(
              [&](const std::vector<TD>& t) {
                  return sum_all(mul(avg_pool2d(t[0], 2), proj));
              },
              {leaf(rng, {1, 2, 4, 4})}) < 1e-6);
    auto proj_up = rng.rand_uniform<double>({1, 2, 6, 6}, -1.0, 1.0);
    CHECK(grad_check(
              [&](const std::vector<TD>& t) {
                  return sum_all(mul(upsample_nearest2x(t[0]), proj_up));
              },
              {leaf(rng, {1, 2, 3, 3})}) < 1e-6);
    auto proj_cat = rng.rand_uniform<double>({1, 5, 3, 3}, -1.0, 1.0);
    CHECK(grad_check(
              [&](const std::vector<TD>& t) {
                  return sum_all(mul(concat_channels<double>({t[0], t[1]}), proj_cat));
              },
              {leaf(rng, {1, 2, 3, 3}), leaf(rng, {1, 3, 3, 3})}) < 1e-6);
}

TEST_CASE("grad_check: normalization and modulation") {
    Rng rng(27);
    SECTION("group_norm with 2 groups") {
        auto proj = rng.rand_uniform<double>({2, 4, 3, 3}, -1.0, 1.0);
        double err = grad_check(
            [&](const std::vector<TD>& t) {
                return sum_all(mul(group_norm(t[0], t[1], t[2], 2), proj));
            },
            {leaf(rng, {2, 4, 3, 3}), leaf(rng, {4}, 0.5, 1.5), leaf(rng, {4})});
        CHECK(err <= 1e-3);
        CHECK(err < 1e-5);
    }
    SECTION("instance-norm fallback groups == channels") {
        auto proj = rng.rand_uniform<double>({1, 3, 4, 4}, -1.0, 1.0);
        double err = grad_check(
            [&](const std::vector<TD>& t) {
                return sum_all(mul(group_norm(t[0], t[1], t[2], 3), proj));
            },
            {leaf(rng, {1, 3, 4, 4}), leaf(rng, {3}, 0.5, 1.5), leaf(rng, {3})});
        CHECK(err <= 1e-3);
    }
    SECTION("film") {
        auto proj = rng.rand_uniform<double>({2, 3, 4, 4}, -1.0, 1.0);
        double err = grad_check(
            [&](const std::vector<TD>& t) {
                return sum_all(mul(film(t[0], t[1], t[2]), proj));
            },
            {leaf(rng, {2, 3, 4, 4}), leaf(rng, {3}), leaf(rng, {3})});
        CHECK(err < 1e-6);
    }
}

TEST_CASE("grad_check: softmax, attention, row normalize") {
    Rng rng(28);
    SECTION("softmax rows") {
        auto proj = rng.rand_uniform<double>({3, 5}, -1.0, 1.0);
        CHECK(grad_check(
                  [&](const std::vector<TD>& t) {
                      return sum_all(mul(softmax_rows(t[0]), proj));
                  },
                  {leaf(rng, {3, 5}, -2.0, 2.0)}) < 1e-6);
    }
    SECTION("scaled attention on 2x4 tokens") {
        auto proj = rng.rand_uniform<double>({2, 4, 3}, -1.0, 1.0);
        double err = grad_check(
            [&](const std::vector<TD>& t) {
                return sum_all(mul(scaled_attention(t[0], t[1], t[2]), proj));
            },
            {leaf(rng, {2, 4, 3}), leaf(rng, {2, 4, 3}), leaf(rng, {2, 4, 3})});
        CHECK(err <= 1e-3);
        CHECK(err < 1e-6);
    }
    SECTION("l2 row normalize") {
        auto proj = rng.rand_uniform<double>({4, 3}, -1.0, 1.0);
        CHECK(grad_check(
                  [&](const std::vector<TD>& t) {
                      return sum_all(mul(l2_normalize_rows(t[0]), proj));
                  },
                  {leaf(rng, {4, 3}, 0.3, 1.0)}) < 1e-6);
    }
}

TEST_CASE("chain rule: randomly composed primitives match finite differences") {
    Rng rng(31);
    auto proj = rng.rand_uniform<double>({2, 3, 4, 4}, -1.0, 1.0);
    double err1 = grad_check(
        [&](const std::vector<TD>& t) {
            auto h = silu(conv2d(t[0], t[1], 1, 1));
            auto g = group_norm(h, t[2], t[3], 3);
            return sum_all(mul(tanh_act(g), proj));
        },
        {leaf(rng, {2, 2, 4, 4}), leaf(rng, {3, 2, 3, 3}), leaf(rng, {3}, 0.5, 1.5),
         leaf(rng, {3})});
    CHECK(err1 <= 1e-3);

    double err2 = grad_check(
        [&](const std::vector<TD>& t) {
            auto y = softmax_rows(matmul(t[0], t[1]));
            return mean_all(mul(y, y));
        },
        {leaf(rng, {3, 4}), leaf(rng, {4, 5})});
    CHECK(err2 <= 1e-3);
}

TEST_CASE("shape errors are reported") {
    Rng rng(33);
    auto a = rng.randn<float>({2, 3});
    auto b = rng.randn<float>({3, 2});
    CHECK_THROWS_AS(add(a, b), TensorError);
    CHECK_THROWS_AS(matmul(a, a), TensorError);
    auto x = rng.randn<float>({1, 2, 4, 4});
    auto w = rng.randn<float>({2, 3, 3, 3});  // channel mismatch
    CHECK_THROWS_AS(conv2d(x, w, 1, 1), TensorError);
}
