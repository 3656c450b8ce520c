#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "pgc/nn.hpp"

using namespace pgc;

namespace {

Tensor<double> random_tensor(int c, int h, int w, Rng& rng) {
    Tensor<double> x(c, h, w);
    for (double& v : x.v) v = rng.uniform(-1.0, 1.0);
    return x;
}

double dot(const Tensor<double>& a, const Tensor<double>& b) {
    double acc = 0.0;
    for (std::size_t t = 0; t < a.v.size(); ++t) acc += a.v[t] * b.v[t];
    return acc;
}

// scalar loss <f(x; params), r> for finite-difference checks
template <typename Layer, typename Fwd>
void fd_check_conv(Layer l, Fwd fwd, int h, int w, double tol) {
    Rng rng(11);
    Tensor<double> x = random_tensor(l.in_ch, h, w, rng);
    init_normal(l.w, rng, 0.5);
    init_normal(l.b, rng, 0.5);
    Tensor<double> out = fwd(x, l);
    Tensor<double> r = random_tensor(out.channels, out.height, out.width, rng);

    ConvGrads<double> g;
    if constexpr (std::is_same_v<Layer, ConvLayer<double>>)
        g = conv2d_backward(x, l, r);
    else
        g = conv_transpose2d_backward(x, l, r);

    const double h0 = 1e-6;
    auto loss = [&](const Tensor<double>& xx, const Layer& ll) { return dot(fwd(xx, ll), r); };

    for (std::size_t t = 0; t < x.v.size(); t += std::max<std::size_t>(1, x.v.size() / 23)) {
        Tensor<double> xp = x, xm = x;
        xp.v[t] += h0;
        xm.v[t] -= h0;
        const double fd = (loss(xp, l) - loss(xm, l)) / (2 * h0);
        CHECK(g.x.v[t] == Catch::Approx(fd).margin(tol).epsilon(tol));
    }
    for (std::size_t t = 0; t < l.w.size(); t += std::max<std::size_t>(1, l.w.size() / 23)) {
        Layer lp = l, lm = l;
        lp.w[t] += h0;
        lm.w[t] -= h0;
        const double fd = (loss(x, lp) - loss(x, lm)) / (2 * h0);
        CHECK(g.w[t] == Catch::Approx(fd).margin(tol).epsilon(tol));
    }
    for (std::size_t t = 0; t < l.b.size(); ++t) {
        Layer lp = l, lm = l;
        lp.b[t] += h0;
        lm.b[t] -= h0;
        const double fd = (loss(x, lp) - loss(x, lm)) / (2 * h0);
        CHECK(g.b[t] == Catch::Approx(fd).margin(tol).epsilon(tol));
    }
}

}  // namespace

TEST_CASE("conv2d: shape contract for stride and dilation") {
    ConvLayer<double> s2(3, 5, 3, 2);
    CHECK(s2.out_dim(8) == 4);
    CHECK(s2.out_dim(16) == 8);
    ConvLayer<double> d2(3, 5, 3, 1, 2);
    CHECK(d2.pad == 2);
    CHECK(d2.out_dim(8) == 8);

    Rng rng(1);
    Tensor<double> x = random_tensor(3, 8, 8, rng);
    Tensor<double> y = conv2d(x, s2);
    CHECK(y.channels == 5);
    CHECK(y.height == 4);
    Tensor<double> z = conv2d(x, d2);
    CHECK(z.height == 8);
    CHECK(z.width == 8);
}

TEST_CASE("conv2d: zero weights give the bias everywhere") {
    ConvLayer<double> l(2, 3, 3);
    l.b = {1.5, -0.25, 0.0};
    Rng rng(2);
    Tensor<double> x = random_tensor(2, 6, 6, rng);
    Tensor<double> y = conv2d(x, l);
    for (int oc = 0; oc < 3; ++oc)
        for (int i = 0; i < 6; ++i)
            for (int j = 0; j < 6; ++j) CHECK(y.at(oc, i, j) == l.b[oc]);
}

TEST_CASE("conv2d: center-tap identity kernel passes the input through") {
    ConvLayer<double> l(1, 1, 3);
    l.wat(0, 0, 1, 1) = 1.0;
    Rng rng(3);
    Tensor<double> x = random_tensor(1, 7, 9, rng);
    Tensor<double> y = conv2d(x, l);
    for (std::size_t t = 0; t < x.v.size(); ++t) CHECK(y.v[t] == Catch::Approx(x.v[t]));
}

TEST_CASE("conv2d: hand-computed 2x2 interior site") {
    // single channel, all-ones 3x3 kernel: interior output = 3x3 window sum
    ConvLayer<double> l(1, 1, 3);
    for (double& w : l.w) w = 1.0;
    Tensor<double> x(1, 4, 4);
    double val = 1.0;
    for (double& v : x.v) v = val++;
    Tensor<double> y = conv2d(x, l);
    double expect = 0.0;
    for (int i = 0; i <= 2; ++i)
        for (int j = 0; j <= 2; ++j) expect += x.at(0, i, j);
    CHECK(y.at(0, 1, 1) == Catch::Approx(expect));
}

TEST_CASE("conv2d: gradients match central finite differences") {
    fd_check_conv(ConvLayer<double>(2, 3, 3, 1, 1), [](auto& x, auto& l) { return conv2d(x, l); },
                  6, 6, 1e-6);
    fd_check_conv(ConvLayer<double>(2, 3, 3, 2, 1), [](auto& x, auto& l) { return conv2d(x, l); },
                  8, 8, 1e-6);
    fd_check_conv(ConvLayer<double>(2, 3, 3, 1, 2), [](auto& x, auto& l) { return conv2d(x, l); },
                  8, 8, 1e-6);
}

TEST_CASE("conv2d: channel mismatch throws") {
    ConvLayer<double> l(2, 3, 3);
    Tensor<double> x(4, 6, 6);
    CHECK_THROWS_AS(conv2d(x, l), std::invalid_argument);
}

TEST_CASE("conv_transpose2d: doubles the spatial size") {
    ConvTransposeLayer<double> l(3, 2);
    CHECK(l.out_dim(8) == 16);
    CHECK(l.out_dim(5) == 10);
    Rng rng(4);
    Tensor<double> x = random_tensor(3, 5, 7, rng);
    init_normal(l.w, rng, 0.3);
    Tensor<double> y = conv_transpose2d(x, l);
    CHECK(y.channels == 2);
    CHECK(y.height == 10);
    CHECK(y.width == 14);
}

TEST_CASE("conv_transpose2d is the adjoint of the matching stride-2 conv") {
    // <T(x), y> == <x, C(y)> when C uses the transposed weights and the
    // transpose's geometry
    Rng rng(5);
    ConvTransposeLayer<double> t(2, 3);
    init_normal(t.w, rng, 0.4);
    Tensor<double> x = random_tensor(2, 4, 4, rng);
    Tensor<double> y = random_tensor(3, 8, 8, rng);
    const double lhs = dot(conv_transpose2d(x, t), y);
    // grad_x of <T(x), y> is exactly the adjoint applied to y
    ConvGrads<double> g = conv_transpose2d_backward(x, t, y);
    const double rhs = dot(x, g.x) + [&] {
        double acc = 0.0;
        for (int oc = 0; oc < 3; ++oc)
            for (int i = 0; i < 8; ++i)
                for (int j = 0; j < 8; ++j) acc += t.b[oc] * y.at(oc, i, j);
        return acc;
    }();
    CHECK(lhs == Catch::Approx(rhs).epsilon(1e-12));
}

TEST_CASE("conv_transpose2d: gradients match central finite differences") {
    fd_check_conv(ConvTransposeLayer<double>(2, 3),
                  [](auto& x, auto& l) { return conv_transpose2d(x, l); }, 4, 4, 1e-6);
}

TEST_CASE("relu and leaky_relu values and gradients") {
    Tensor<double> x(1, 1, 4);
    x.v = {-2.0, -0.5, 0.0, 3.0};
    Tensor<double> r = relu(x);
    CHECK(r.v == std::vector<double>{0.0, 0.0, 0.0, 3.0});
    Tensor<double> lr = leaky_relu(x);
    CHECK(lr.v[0] == Catch::Approx(-0.4));
    CHECK(lr.v[1] == Catch::Approx(-0.1));
    CHECK(lr.v[3] == 3.0);

    Tensor<double> g(1, 1, 4, 1.0);
    Tensor<double> gr = relu_backward(x, g);
    CHECK(gr.v == std::vector<double>{0.0, 0.0, 0.0, 1.0});
    Tensor<double> glr = leaky_relu_backward(x, g);
    CHECK(glr.v[0] == Catch::Approx(0.2));
    CHECK(glr.v[3] == 1.0);

    // FD away from the kink
    const double h = 1e-7;
    for (double v : {-1.3, 0.7}) {
        Tensor<double> a(1, 1, 1, v), ap(1, 1, 1, v + h), am(1, 1, 1, v - h);
        const double fd = (leaky_relu(ap).v[0] - leaky_relu(am).v[0]) / (2 * h);
        Tensor<double> one(1, 1, 1, 1.0);
        CHECK(leaky_relu_backward(a, one).v[0] == Catch::Approx(fd).margin(1e-6));
    }
}

TEST_CASE("init helpers are deterministic given the seed") {
    ConvLayer<float> a(3, 8, 3), b(3, 8, 3);
    Rng r1(42), r2(42);
    init_conv_he(a, r1);
    init_conv_he(b, r2);
    CHECK(a.w == b.w);
    CHECK(a.b == b.b);
    // nonzero spread
    double mx = 0.0;
    for (float w : a.w) mx = std::max(mx, std::abs(double(w)));
    CHECK(mx > 0.01);
}
