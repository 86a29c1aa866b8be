#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "marginforge/model.hpp"
#include "marginforge/rng.hpp"

using namespace marginforge;

namespace {

double max_rel_err(std::span<const double> a, std::span<const double> b) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double denom = std::max({std::abs(a[i]), std::abs(b[i]), 1e-8});
        worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
    }
    return worst;
}

SoftLabel random_label(std::size_t C, Rng& rng) {
    SoftLabel l;
    l.probs.resize(C);
    double sum = 0.0;
    for (double& p : l.probs) {
        p = rng.uniform(0.01, 1.0);
        sum += p;
    }
    for (double& p : l.probs) p /= sum;
    return l;
}

}  // namespace

TEST_CASE("mlp_init is deterministic with the documented layout", "[model]") {
    Model a = mlp_init({2, 8, 2}, 42);
    Model b = mlp_init({2, 8, 2}, 42);
    CHECK(a.parameter_count() == 42);  // 2*8+8 + 8*2+2
    for (std::size_t l = 0; l < a.weights().size(); ++l) {
        auto wa = a.weights()[l].data(), wb = b.weights()[l].data();
        for (std::size_t i = 0; i < wa.size(); ++i) CHECK(wa[i] == wb[i]);
        for (double v : a.biases()[l].data()) CHECK(v == 0.0);
    }
    CHECK_THROWS_AS(mlp_init({3}, 1), std::invalid_argument);
    CHECK_THROWS_AS(mlp_init({3, 0, 2}, 1), std::invalid_argument);
}

TEST_CASE("forward computes the affine map and batches independently", "[model]") {
    Model m = mlp_init({2, 3}, 7);
    auto& w = m.weights()[0].values_mut();
    w = {1, 2, 3, 4, 5, 6};
    m.biases()[0].values_mut() = {0.5, -0.5, 0.0};

    Tensor x({1, 2}, {2.0, -1.0});
    Tensor logits = m.forward(x);
    CHECK(logits.at(0) == Catch::Approx(2 * 1 - 1 * 4 + 0.5));
    CHECK(logits.at(1) == Catch::Approx(2 * 2 - 1 * 5 - 0.5));
    CHECK(logits.at(2) == Catch::Approx(2 * 3 - 1 * 6));

    Model zero = mlp_init({2, 4, 3}, 9);
    for (auto& t : zero.parameters()) {
        for (double& v : t.values_mut()) v = 0.0;
    }
    Tensor z = zero.forward(Tensor({2, 2}, {1, 2, 3, 4}));
    for (double v : z.data()) CHECK(v == 0.0);

    // row i of a batch only depends on row i
    Model mlp = mlp_init({2, 5, 3}, 21);
    Tensor both = mlp.forward(Tensor({2, 2}, {0.1, 0.2, -0.4, 0.9}));
    Tensor first = mlp.forward(Tensor({1, 2}, {0.1, 0.2}));
    Tensor second = mlp.forward(Tensor({1, 2}, {-0.4, 0.9}));
    for (std::size_t c = 0; c < 3; ++c) {
        CHECK(both.at(c) == first.at(c));
        CHECK(both.at(3 + c) == second.at(c));
    }

    CHECK_THROWS_AS(mlp.forward(Tensor({1, 3}, {1, 2, 3})), std::invalid_argument);
}

TEST_CASE("score closed forms and smoothing monotonicity", "[model]") {
    SoftLabel uniform = score({0, 0, 0}, 1.7);
    for (double p : uniform.probs) CHECK(p == Catch::Approx(1.0 / 3));

    SoftLabel two = score({std::log(2.0), 0.0}, 1.0);
    CHECK(two.probs[0] == Catch::Approx(2.0 / 3));
    CHECK(two.probs[1] == Catch::Approx(1.0 / 3));

    SoftLabel sharp = score({2, 1, 0}, 1.0);
    SoftLabel smooth = score({2, 1, 0}, 10.0);
    CHECK(entropy(smooth) > entropy(sharp));

    CHECK_THROWS_AS(score({1, 2}, 0.0), std::invalid_argument);
    CHECK_THROWS_AS(score({1, 2}, -1.0), std::invalid_argument);

    // log-sum-exp stabilization keeps huge logits finite
    SoftLabel big = score({1e4, -1e4}, 0.5);
    big.validate();
    CHECK(std::isfinite(big.probs[0]));
}

TEST_CASE("cross entropy closed forms", "[model]") {
    SoftLabel onehot = SoftLabel::one_hot(0, 2);
    CHECK(cross_entropy({std::log(2.0), 0.0}, onehot, 0.0) ==
          Catch::Approx(std::log(1.5)).epsilon(1e-12));

    SoftLabel uniform4;
    uniform4.probs = {0.25, 0.25, 0.25, 0.25};
    CHECK(cross_entropy({0, 0, 0, 0}, uniform4, 0.0) == Catch::Approx(std::log(4.0)));

    // label smoothing 0.1 on a one-hot 2-class target equals the smoothed target
    SoftLabel smoothed;
    smoothed.probs = {0.95, 0.05};
    const std::vector<double> logits{0.7, -0.4};
    CHECK(cross_entropy(logits, onehot, 0.1) ==
          Catch::Approx(cross_entropy(logits, smoothed, 0.0)).epsilon(1e-12));

    SoftLabel bad;
    bad.probs = {0.9, 0.3};
    CHECK_THROWS_AS(cross_entropy(logits, bad, 0.0), std::invalid_argument);
}

TEST_CASE("kl divergence closed forms and positivity", "[model]") {
    SoftLabel half;
    half.probs = {0.5, 0.5};
    SoftLabel sure = SoftLabel::one_hot(0, 2);
    SoftLabel skew;
    skew.probs = {0.75, 0.25};

    CHECK(kl_divergence(half, half) == 0.0);
    CHECK(kl_divergence(sure, half) == Catch::Approx(std::log(2.0)));
    CHECK(kl_divergence(half, skew) ==
          Catch::Approx(0.5 * std::log(2.0 / 3.0) + 0.5 * std::log(2.0)).epsilon(1e-12));

    Rng rng(9);
    for (int i = 0; i < 200; ++i) {
        SoftLabel p = random_label(4, rng);
        SoftLabel q = random_label(4, rng);
        CHECK(kl_divergence(p, q) >= 0.0);
    }
    // zero-probability entries are floored rather than infinite
    CHECK(std::isfinite(kl_divergence(half, sure)));
    CHECK(kl_divergence(sure, sure) == 0.0);
}

TEST_CASE("cross entropy decomposes as KL plus entropy", "[model]") {
    Rng rng(31);
    for (int i = 0; i < 50; ++i) {
        SoftLabel target = random_label(3, rng);
        std::vector<double> logits{rng.uniform(-3, 3), rng.uniform(-3, 3), rng.uniform(-3, 3)};
        const double ce = cross_entropy(logits, target, 0.0);
        const double decomposed = kl_divergence(target, score(logits, 1.0)) + entropy(target);
        CHECK(std::abs(ce - decomposed) < 1e-9);
    }
}

TEST_CASE("score, cross entropy and KL pass finite-difference checks", "[model]") {
    Rng rng(55);
    const std::size_t B = 2, C = 3;
    std::vector<double> tv(B * C);
    for (std::size_t b = 0; b < B; ++b) {
        SoftLabel l = random_label(C, rng);
        std::copy(l.probs.begin(), l.probs.end(), tv.begin() + static_cast<std::ptrdiff_t>(b * C));
    }
    Tensor targets({B, C}, tv);

    auto check = [&](auto make_loss) {
        std::vector<double> lv(B * C);
        for (double& v : lv) v = rng.uniform(-2, 2);
        Tensor logits({B, C}, lv, true);
        GradientMap g = backward(make_loss(logits));
        Tensor fd = finite_difference_grad(
            [&](const Tensor& t) { return make_loss(t).value(); }, logits.detach(), 1e-5);
        CHECK(max_rel_err(g.at(logits).data(), fd.data()) < 1e-4);
    };

    // weight the entries so the score gradient is not identically zero
    // (softmax rows always sum to 1)
    std::vector<double> wv(B * C);
    for (double& v : wv) v = rng.uniform(-1, 1);
    Tensor score_weights({B, C}, wv);
    check([&](const Tensor& t) {
        return sum_all(multiply(score_weights, softmax_rows(t, 2.0)));
    });
    check([&](const Tensor& t) { return cross_entropy_mean(t, targets, 0.0); });
    check([&](const Tensor& t) { return cross_entropy_mean(t, targets, 0.2); });
    check([&](const Tensor& t) { return sum_all(kl_rows_const_ref(targets, t)); });
    check([&](const Tensor& t) {
        return sum_all(kl_rows_between_logits(t, scale(t, 0.5)));
    });
}

TEST_CASE("checkpoints round-trip bit-exactly", "[model]") {
    Model m = mlp_init({3, 7, 4}, 1234);
    auto bytes = save_checkpoint_bytes(m);
    Model back = load_checkpoint_bytes(bytes);
    REQUIRE(back.layer_sizes() == m.layer_sizes());
    for (std::size_t l = 0; l < m.weights().size(); ++l) {
        auto a = m.weights()[l].data(), b = back.weights()[l].data();
        for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
        auto ba = m.biases()[l].data(), bb = back.biases()[l].data();
        for (std::size_t i = 0; i < ba.size(); ++i) CHECK(ba[i] == bb[i]);
    }
    auto again = save_checkpoint_bytes(back);
    REQUIRE(again == bytes);

    auto bad = bytes;
    bad[0] = 'X';
    CHECK_THROWS_WITH(load_checkpoint_bytes(bad),
                      Catch::Matchers::ContainsSubstring("magic"));
    auto truncated = bytes;
    truncated.resize(bytes.size() - 3);
    CHECK_THROWS_WITH(load_checkpoint_bytes(truncated),
                      Catch::Matchers::ContainsSubstring("truncated"));
}
