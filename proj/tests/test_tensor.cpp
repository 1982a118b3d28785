#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "matssl/tensor.hpp"
#include "test_util.hpp"

using namespace matssl;
using testutil::rand_tensor;
using testutil::rand_weights;
using testutil::weighted_sum;

TEST_CASE("conv2d identity kernel passes input through") {
    Tape tape(false);
    Rng rng(7);
    const Tensor input = rand_tensor({2, 3, 5, 5}, rng);
    Tensor kernel = Tensor::zeros({3, 3, 1, 1});
    for (int k = 0; k < 3; ++k) kernel.data()[static_cast<std::size_t>(k * 3 + k)] = 1.0f;
    const Tensor bias = Tensor::zeros({3});
    const Tensor out = conv2d(tape, input, kernel, bias, 1, 0);
    REQUIRE(out.shape() == input.shape());
    for (std::int64_t i = 0; i < out.numel(); ++i) {
        CHECK(out.data()[static_cast<std::size_t>(i)] ==
              doctest::Approx(input.data()[static_cast<std::size_t>(i)]).epsilon(1e-7));
    }
}

TEST_CASE("conv2d 3x3 ones kernel sums a constant input") {
    Tape tape(false);
    const Tensor input = Tensor::full({1, 1, 3, 3}, 2.0f);
    const Tensor kernel = Tensor::full({1, 1, 3, 3}, 1.0f);
    const Tensor bias = Tensor::zeros({1});
    const Tensor out = conv2d(tape, input, kernel, bias, 1, 0);
    REQUIRE(out.shape() == Shape{1, 1, 1, 1});
    CHECK(out.value() == doctest::Approx(18.0f));
}

TEST_CASE("conv2d output shape follows the floor formula") {
    Tape tape(false);
    const Tensor input = Tensor::zeros({1, 3, 8, 8});
    const Tensor kernel = Tensor::zeros({4, 3, 3, 3});
    const Tensor bias = Tensor::zeros({4});
    CHECK(conv2d(tape, input, kernel, bias, 2, 1).shape() == Shape{1, 4, 4, 4});

    Rng rng(3);
    for (int trial = 0; trial < 40; ++trial) {
        const int h = 3 + static_cast<int>(rng.uniform_int(14));
        const int w = 3 + static_cast<int>(rng.uniform_int(14));
        const int kh = 1 + static_cast<int>(rng.uniform_int(3));
        const int kw = 1 + static_cast<int>(rng.uniform_int(3));
        const int stride = 1 + static_cast<int>(rng.uniform_int(3));
        const int pad = static_cast<int>(rng.uniform_int(3));
        const Tensor in = Tensor::zeros({1, 2, h, w});
        const Tensor k = Tensor::zeros({3, 2, kh, kw});
        const Tensor b = Tensor::zeros({3});
        const Tensor out = conv2d(tape, in, k, b, stride, pad);
        CHECK(out.dim(2) == (h + 2 * pad - kh) / stride + 1);
        CHECK(out.dim(3) == (w + 2 * pad - kw) / stride + 1);
    }
}

TEST_CASE("conv2d names the offending axes") {
    Tape tape(false);
    const Tensor input = Tensor::zeros({1, 3, 4, 4});
    const Tensor kernel = Tensor::zeros({2, 4, 3, 3});
    const Tensor bias = Tensor::zeros({2});
    CHECK_THROWS_WITH_AS(conv2d(tape, input, kernel, bias, 1, 0),
                         doctest::Contains("channel axis"), ShapeError);
    const Tensor big_kernel = Tensor::zeros({2, 3, 7, 7});
    CHECK_THROWS_WITH_AS(conv2d(tape, input, big_kernel, bias, 1, 0),
                         doctest::Contains("exceeds padded input"), ShapeError);
}

TEST_CASE("global_average_pool means") {
    Tape tape(false);
    CHECK(global_average_pool(tape, Tensor::full({1, 2, 3, 3}, 4.25f)).data()[0] ==
          doctest::Approx(4.25f));
    const Tensor small = Tensor::from({1, 1, 2, 2}, {1, 2, 3, 4});
    CHECK(global_average_pool(tape, small).value() == doctest::Approx(2.5f));
    CHECK(global_average_pool(tape, Tensor::zeros({2, 16, 4, 4})).shape() == Shape{2, 16});
}

TEST_CASE("activation values") {
    Tape tape(false);
    CHECK(sigmoid(tape, Tensor::scalar(0.0f)).value() == doctest::Approx(0.5f));
    CHECK(relu(tape, Tensor::scalar(-3.0f)).value() == 0.0f);
    CHECK(relu(tape, Tensor::scalar(3.0f)).value() == 3.0f);
    CHECK(std::abs(sigmoid(tape, Tensor::scalar(20.0f)).value() - 1.0f) < 1e-6f);
}

TEST_CASE("cosine_similarity values") {
    Tape tape(false);
    const Tensor a = Tensor::from({2}, {1.0f, 1.0f});
    const Tensor b = Tensor::from({2}, {1.0f, 0.0f});
    CHECK(cosine_similarity(tape, a, a).value() == doctest::Approx(1.0f).epsilon(1e-6));
    const Tensor ex = Tensor::from({2}, {1.0f, 0.0f});
    const Tensor ey = Tensor::from({2}, {0.0f, 1.0f});
    CHECK(cosine_similarity(tape, ex, ey).value() == doctest::Approx(0.0f));
    CHECK(cosine_similarity(tape, a, b).value() == doctest::Approx(0.7071).epsilon(1e-4));

    Rng rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        const Tensor v = rand_tensor({7}, rng, -2.0, 2.0, 0.05);
        CHECK(std::abs(cosine_similarity(tape, v, v).value() - 1.0f) < 1e-6f);
    }
}

TEST_CASE("linear matches hand product") {
    Tape tape(false);
    Tensor eye = Tensor::zeros({3, 3});
    for (int i = 0; i < 3; ++i) eye.data()[static_cast<std::size_t>(i * 3 + i)] = 1.0f;
    Rng rng(5);
    const Tensor x = rand_tensor({4, 3}, rng);
    const Tensor out = linear(tape, x, eye, Tensor::zeros({3}));
    for (std::int64_t i = 0; i < x.numel(); ++i) {
        CHECK(out.data()[static_cast<std::size_t>(i)] ==
              doctest::Approx(x.data()[static_cast<std::size_t>(i)]));
    }

    const Tensor in = Tensor::from({1, 2}, {1.0f, 2.0f});
    const Tensor w = Tensor::from({2, 2}, {1.0f, 0.0f, 0.0f, 1.0f});
    const Tensor b = Tensor::from({2}, {3.0f, 3.0f});
    const Tensor y = linear(tape, in, w, b);
    CHECK(y.data()[0] == doctest::Approx(4.0f));
    CHECK(y.data()[1] == doctest::Approx(5.0f));

    CHECK(linear(tape, Tensor::zeros({8, 64}), Tensor::zeros({64, 128}), Tensor::zeros({128}))
              .shape() == Shape{8, 128});
    CHECK_THROWS_AS(linear(tape, Tensor::zeros({8, 64}), Tensor::zeros({63, 128}),
                           Tensor::zeros({128})),
                    ShapeError);
}

TEST_CASE("concat layout and inverse slice") {
    Tape tape(false);
    Rng rng(13);
    const Tensor single = rand_tensor({3, 4}, rng);
    const Tensor parts1[] = {single};
    const Tensor same = concat(tape, parts1);
    for (std::int64_t i = 0; i < single.numel(); ++i) {
        CHECK(same.data()[static_cast<std::size_t>(i)] == single.data()[static_cast<std::size_t>(i)]);
    }

    const Tensor parts3[] = {Tensor::zeros({5, 4}), Tensor::zeros({5, 8}), Tensor::zeros({5, 16})};
    CHECK(concat(tape, parts3).shape() == Shape{5, 28});
    const Tensor bad[] = {Tensor::zeros({5, 4}), Tensor::zeros({6, 8})};
    CHECK_THROWS_AS(concat(tape, bad), ShapeError);

    // concat then slice reproduces the inputs bit-exactly
    for (int trial = 0; trial < 10; ++trial) {
        const Tensor a = rand_tensor({4, 3}, rng);
        const Tensor b = rand_tensor({4, 6}, rng);
        const Tensor c = rand_tensor({4, 2}, rng);
        const Tensor parts[] = {a, b, c};
        const Tensor joined = concat(tape, parts);
        const Tensor back_a = slice_cols(tape, joined, 0, 3);
        const Tensor back_b = slice_cols(tape, joined, 3, 9);
        const Tensor back_c = slice_cols(tape, joined, 9, 11);
        CHECK(testutil::hash_tensor(back_a) == testutil::hash_tensor(a));
        CHECK(testutil::hash_tensor(back_b) == testutil::hash_tensor(b));
        CHECK(testutil::hash_tensor(back_c) == testutil::hash_tensor(c));
    }
}

TEST_CASE("forward passes are bit-deterministic") {
    Rng rng(17);
    const Tensor input = rand_tensor({2, 3, 8, 8}, rng);
    const Tensor kernel = rand_tensor({4, 3, 3, 3}, rng);
    const Tensor bias = rand_tensor({4}, rng);
    std::uint64_t hashes[2];
    for (int run = 0; run < 2; ++run) {
        Tape tape(false);
        const Tensor out =
            global_average_pool(tape, relu(tape, conv2d(tape, input, kernel, bias, 2, 1)));
        hashes[run] = testutil::hash_tensor(out);
    }
    CHECK(hashes[0] == hashes[1]);
}

TEST_CASE("gradient_check: closed cases") {
    Rng rng(23);
    // sum(sigmoid(x)) has a clean analytic gradient
    Tensor x = rand_tensor({3, 4}, rng, -2.0, 2.0);
    x.set_requires_grad(true);
    Tensor params[] = {x};
    const double err = gradient_check(
        [&](Tape& tape) { return reduce_sum(tape, sigmoid(tape, x)); }, params, 1e-3);
    CHECK(err < 1e-4);

    // constant function: both gradients exactly zero
    Tensor y = rand_tensor({5}, rng);
    y.set_requires_grad(true);
    Tensor params2[] = {y};
    const double err2 = gradient_check(
        [&](Tape& tape) {
            (void)tape;
            return Tensor::scalar(3.25f);
        },
        params2, 1e-3);
    CHECK(err2 == 0.0);

    CHECK_THROWS_AS(gradient_check([&](Tape&) { return Tensor::scalar(NAN); }, params2, 1e-3),
                    ValueError);
    CHECK_THROWS_AS(gradient_check([&](Tape&) { return Tensor::scalar(1.0f); }, params2, 0.5),
                    ValueError);
}

// Every differentiable op, three random seeded shapes each, h = 1e-3.
TEST_CASE("gradient_check: op sweep") {
    const double kTol = 1e-3;
    for (std::uint64_t seed = 1; seed <= 3; ++seed) {
        Rng rng(seed * 1297);
        {  // conv2d
            Tensor input = rand_tensor({2, 2, 5, 5}, rng);
            Tensor kernel = rand_tensor({3, 2, 3, 3}, rng);
            Tensor bias = rand_tensor({3}, rng);
            input.set_requires_grad(true);
            kernel.set_requires_grad(true);
            bias.set_requires_grad(true);
            Tensor params[] = {input, kernel, bias};
            const auto w = rand_weights(2 * 3 * 3 * 3, rng);
            const double err = gradient_check(
                [&](Tape& tape) {
                    return weighted_sum(tape, conv2d(tape, input, kernel, bias, 2, 1), w);
                },
                params, 1e-3);
            CHECK_MESSAGE(err < kTol, "conv2d seed ", seed);
        }
        {  // global_average_pool
            Tensor input = rand_tensor({2, 3, 4, 4}, rng);
            input.set_requires_grad(true);
            Tensor params[] = {input};
            const auto w = rand_weights(2 * 3, rng);
            const double err = gradient_check(
                [&](Tape& tape) { return weighted_sum(tape, global_average_pool(tape, input), w); },
                params, 1e-3);
            CHECK_MESSAGE(err < kTol, "gap seed ", seed);
        }
        {  // relu away from the kink, sigmoid anywhere
            Tensor input = rand_tensor({3, 6}, rng, -1.5, 1.5, 0.05);
            input.set_requires_grad(true);
            Tensor params[] = {input};
            const auto w = rand_weights(3 * 6, rng);
            const double err_relu = gradient_check(
                [&](Tape& tape) { return weighted_sum(tape, relu(tape, input), w); }, params, 1e-3);
            CHECK_MESSAGE(err_relu < kTol, "relu seed ", seed);
            const double err_sig = gradient_check(
                [&](Tape& tape) { return weighted_sum(tape, sigmoid(tape, input), w); }, params,
                1e-3);
            CHECK_MESSAGE(err_sig < kTol, "sigmoid seed ", seed);
        }
        {  // cosine_similarity
            Tensor a = rand_tensor({6}, rng, -1.0, 1.0, 0.05);
            Tensor b = rand_tensor({6}, rng, -1.0, 1.0, 0.05);
            a.set_requires_grad(true);
            b.set_requires_grad(true);
            Tensor params[] = {a, b};
            const double err = gradient_check(
                [&](Tape& tape) { return cosine_similarity(tape, a, b); }, params, 1e-3);
            CHECK_MESSAGE(err < kTol, "cosine seed ", seed);
        }
        {  // linear
            Tensor input = rand_tensor({3, 4}, rng);
            Tensor weight = rand_tensor({4, 5}, rng);
            Tensor bias = rand_tensor({5}, rng);
            input.set_requires_grad(true);
            weight.set_requires_grad(true);
            bias.set_requires_grad(true);
            Tensor params[] = {input, weight, bias};
            const auto w = rand_weights(3 * 5, rng);
            const double err = gradient_check(
                [&](Tape& tape) { return weighted_sum(tape, linear(tape, input, weight, bias), w); },
                params, 1e-3);
            CHECK_MESSAGE(err < kTol, "linear seed ", seed);
        }
        {  // concat + slice + add + upsample
            Tensor a = rand_tensor({2, 3}, rng);
            Tensor b = rand_tensor({2, 4}, rng);
            a.set_requires_grad(true);
            b.set_requires_grad(true);
            Tensor params[] = {a, b};
            const auto w = rand_weights(2 * 4, rng);
            const double err = gradient_check(
                [&](Tape& tape) {
                    const Tensor parts[] = {a, b};
                    const Tensor joined = concat(tape, parts);
                    const Tensor mid = slice_cols(tape, joined, 1, 5);
                    return weighted_sum(tape, add(tape, mid, mid), w);
                },
                params, 1e-3);
            CHECK_MESSAGE(err < kTol, "concat/slice/add seed ", seed);

            Tensor m = rand_tensor({1, 2, 3, 3}, rng);
            m.set_requires_grad(true);
            Tensor params_up[] = {m};
            const auto wu = rand_weights(1 * 2 * 6 * 6, rng);
            const double err_up = gradient_check(
                [&](Tape& tape) { return weighted_sum(tape, upsample_nearest2x(tape, m), wu); },
                params_up, 1e-3);
            CHECK_MESSAGE(err_up < kTol, "upsample seed ", seed);
        }
        {  // softmax over channels (2-D and 4-D)
            Tensor logits = rand_tensor({3, 5}, rng, -2.0, 2.0);
            logits.set_requires_grad(true);
            Tensor params[] = {logits};
            const auto w = rand_weights(3 * 5, rng);
            const double err = gradient_check(
                [&](Tape& tape) { return weighted_sum(tape, softmax_channels(tape, logits), w); },
                params, 1e-3);
            CHECK_MESSAGE(err < kTol, "softmax2d seed ", seed);

            Tensor logits4 = rand_tensor({2, 3, 2, 2}, rng, -2.0, 2.0);
            logits4.set_requires_grad(true);
            Tensor params4[] = {logits4};
            const auto w4 = rand_weights(2 * 3 * 2 * 2, rng);
            const double err4 = gradient_check(
                [&](Tape& tape) { return weighted_sum(tape, softmax_channels(tape, logits4), w4); },
                params4, 1e-3);
            CHECK_MESSAGE(err4 < kTol, "softmax4d seed ", seed);
        }
        {  // cross entropy
            Tensor logits = rand_tensor({4, 3}, rng, -2.0, 2.0);
            logits.set_requires_grad(true);
            std::vector<std::int32_t> labels;
            for (int i = 0; i < 4; ++i) labels.push_back(static_cast<std::int32_t>(rng.uniform_int(3)));
            Tensor params[] = {logits};
            const double err = gradient_check(
                [&](Tape& tape) { return cross_entropy(tape, logits, labels); }, params, 1e-3);
            CHECK_MESSAGE(err < kTol, "cross_entropy seed ", seed);
        }
        {  // reduce_mean
            Tensor xm = rand_tensor({3, 3}, rng);
            xm.set_requires_grad(true);
            Tensor params[] = {xm};
            const double err = gradient_check(
                [&](Tape& tape) { return reduce_mean(tape, sigmoid(tape, xm)); }, params, 1e-3);
            CHECK_MESSAGE(err < kTol, "reduce_mean seed ", seed);
        }
    }
}

TEST_CASE("tensor invariants") {
    CHECK_THROWS_AS(Tensor::from({2, 2}, {1.0f, 2.0f}), ShapeError);
    CHECK_THROWS_AS(Tensor::zeros({0, 3}), ShapeError);
    Tensor t = Tensor::zeros({2, 2});
    CHECK_THROWS_AS(t.value(), ShapeError);
    Tape tape;
    CHECK_THROWS_AS(tape.backward(t), ShapeError);
    Tensor bad = Tensor::from({2}, {1.0f, NAN});
    CHECK_THROWS_AS(bad.check_finite("test"), ValueError);
}
