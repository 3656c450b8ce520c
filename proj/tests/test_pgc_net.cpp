#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "pgc/pgc_net.hpp"

using namespace pgc;

namespace {

DictionaryConfig small_dict_cfg() {
    DictionaryConfig cfg;  // paper defaults: K=7, [0.25,1.75], step 0.05
    return cfg;
}

Tensor<double> random_tensor(int c, int h, int w, Rng& rng) {
    Tensor<double> x(c, h, w);
    for (double& v : x.v) v = rng.uniform(-1.0, 1.0);
    return x;
}

// independent dilated-conv oracle (explicit zero padding, no shared code path)
Tensor<double> dilated_conv_oracle(const Tensor<double>& x, const PGCBlockParams<double>& blk) {
    const ConvLayer<double>& l = blk.conv;
    Tensor<double> y(l.out_ch, x.height, x.width);
    for (int oc = 0; oc < l.out_ch; ++oc)
        for (int i = 0; i < x.height; ++i)
            for (int j = 0; j < x.width; ++j) {
                double acc = l.b[oc];
                for (int ic = 0; ic < l.in_ch; ++ic)
                    for (int ki = -1; ki <= 1; ++ki)
                        for (int kj = -1; kj <= 1; ++kj) {
                            const int ii = i + 2 * ki, jj = j + 2 * kj;
                            if (ii < 0 || ii >= x.height || jj < 0 || jj >= x.width) continue;
                            acc += l.wat(oc, ic, ki + 1, kj + 1) * x.at(ic, ii, jj);
                        }
                y.at(oc, i, j) = acc;
            }
    return y;
}

// perspective params keeping sigma well inside (c, d) and off the hinge
PerspectiveParams<double> interior_params() {
    PerspectiveParams<double> pp;
    pp.alpha = 2.0;
    pp.beta = 0.5;
    pp.a = 0.6;
    pp.p0 = -0.5;
    return pp;
}

Map<double> ramp_map(int h, int w) {
    Map<double> p(h, w);
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) p.at(i, j) = 0.3 + 1.2 * double(i) / std::max(1, h - 1);
    return p;
}

Scene tiny_scene(int hw, int heads, std::uint64_t seed) { return synth_scene(hw, hw, heads, seed); }

}  // namespace

TEST_CASE("pgc_block_forward: zero convolution passes the input channels through") {
    KernelDictionary dict = build_dictionary(small_dict_cfg());
    Rng rng(1);
    Tensor<double> x = random_tensor(3, 8, 8, rng);
    Map<double> p = ramp_map(8, 8);
    PGCBlockParams<double> blk(3, 2);
    blk.persp = interior_params();
    Tensor<double> out = pgc_block_forward(x, p, blk, dict);
    REQUIRE(out.channels == 5);
    for (int c = 0; c < 3; ++c)
        for (int i = 0; i < 8; ++i)
            for (int j = 0; j < 8; ++j) CHECK(out.at(c, i, j) == x.at(c, i, j));
    for (int c = 3; c < 5; ++c)
        for (std::size_t t = 0; t < 64; ++t)
            CHECK(out.v[std::size_t(c) * 64 + t] == 0.0);
}

TEST_CASE("pgc_block_forward: a = 0 makes smoothing the identity") {
    KernelDictionary dict = build_dictionary(small_dict_cfg());
    Rng rng(2);
    Tensor<double> x = random_tensor(2, 8, 8, rng);
    Map<double> p = ramp_map(8, 8);
    PGCBlockParams<double> blk(2, 3);
    init_normal(blk.conv.w, rng, 0.3);
    init_normal(blk.conv.b, rng, 0.1);
    blk.persp.a = 0.0;
    Tensor<double> out = pgc_block_forward(x, p, blk, dict);
    Tensor<double> y = dilated_conv_oracle(x, blk);
    for (int oc = 0; oc < 3; ++oc)
        for (int i = 0; i < 8; ++i)
            for (int j = 0; j < 8; ++j)
                CHECK(out.at(2 + oc, i, j) == Catch::Approx(y.at(oc, i, j)).margin(1e-12));
}

TEST_CASE("pgc_block_forward matches the step-by-step composition") {
    KernelDictionary dict = build_dictionary(small_dict_cfg());
    Rng rng(3);
    Tensor<double> x = random_tensor(2, 10, 12, rng);
    Map<double> p = ramp_map(10, 12);
    PGCBlockParams<double> blk(2, 3);
    blk.persp = interior_params();
    init_normal(blk.conv.w, rng, 0.3);
    init_normal(blk.conv.b, rng, 0.1);

    Tensor<double> out = pgc_block_forward(x, p, blk, dict);

    Map<double> pt = normalize_perspective(p, blk.persp);
    Map<double> sig = blur_from_perspective(pt, blk.persp);
    Tensor<double> xt = filter_approx(x, sig, dict, PaddingMode::Replicate);
    Tensor<double> y = dilated_conv_oracle(xt, blk);
    for (int oc = 0; oc < 3; ++oc)
        for (int i = 0; i < 10; ++i)
            for (int j = 0; j < 12; ++j)
                CHECK(out.at(2 + oc, i, j) == Catch::Approx(y.at(oc, i, j)).margin(1e-5));
}

TEST_CASE("pgc_block_backward: zero upstream gradient gives zero gradients") {
    KernelDictionary dict = build_dictionary(small_dict_cfg());
    Rng rng(4);
    Tensor<double> x = random_tensor(2, 6, 6, rng);
    Map<double> p = ramp_map(6, 6);
    PGCBlockParams<double> blk(2, 2);
    blk.persp = interior_params();
    init_normal(blk.conv.w, rng, 0.3);
    BlockCache<double> cache;
    pgc_block_forward(x, p, blk, dict, &cache);
    Tensor<double> g0(4, 6, 6);
    BlockGrads<double> bg = pgc_block_backward(x, p, blk, dict, g0, cache);
    for (double v : bg.x.v) CHECK(v == 0.0);
    for (double v : bg.conv_w) CHECK(v == 0.0);
    CHECK(bg.persp.alpha == 0.0);
    CHECK(bg.persp.a == 0.0);
}

TEST_CASE("pgc_block_backward matches central finite differences") {
    KernelDictionary dict = build_dictionary(small_dict_cfg());
    Rng rng(5);
    Tensor<double> x = random_tensor(2, 6, 6, rng);
    Map<double> p = ramp_map(6, 6);
    PGCBlockParams<double> blk(2, 2);
    blk.persp = interior_params();
    init_normal(blk.conv.w, rng, 0.3);
    init_normal(blk.conv.b, rng, 0.1);
    Tensor<double> r = random_tensor(4, 6, 6, rng);

    auto loss = [&](const Tensor<double>& xx, const Map<double>& pp,
                    const PGCBlockParams<double>& bb) {
        Tensor<double> out = pgc_block_forward(xx, pp, bb, dict);
        double acc = 0.0;
        for (std::size_t t = 0; t < out.v.size(); ++t) acc += out.v[t] * r.v[t];
        return acc;
    };

    BlockCache<double> cache;
    pgc_block_forward(x, p, blk, dict, &cache);
    BlockGrads<double> bg = pgc_block_backward(x, p, blk, dict, r, cache);

    const double h = 1e-5, tol = 2e-5;
    auto fd_scalar = [&](double* slot, double analytic) {
        const double orig = *slot;
        *slot = orig + h;
        const double lp = loss(x, p, blk);
        *slot = orig - h;
        const double lm = loss(x, p, blk);
        *slot = orig;
        const double fd = (lp - lm) / (2 * h);
        CHECK(analytic == Catch::Approx(fd).margin(tol).epsilon(tol));
    };
    fd_scalar(&blk.persp.alpha, bg.persp.alpha);
    fd_scalar(&blk.persp.beta, bg.persp.beta);
    fd_scalar(&blk.persp.a, bg.persp.a);
    fd_scalar(&blk.persp.p0, bg.persp.p0);
    for (std::size_t t = 0; t < blk.conv.w.size(); t += 7) fd_scalar(&blk.conv.w[t], bg.conv_w[t]);
    for (std::size_t t = 0; t < blk.conv.b.size(); ++t) fd_scalar(&blk.conv.b[t], bg.conv_b[t]);
    for (std::size_t t = 0; t < x.v.size(); t += 5) {
        const double orig = x.v[t];
        x.v[t] = orig + h;
        const double lp = loss(x, p, blk);
        x.v[t] = orig - h;
        const double lm = loss(x, p, blk);
        x.v[t] = orig;
        CHECK(bg.x.v[t] == Catch::Approx((lp - lm) / (2 * h)).margin(tol).epsilon(tol));
    }
    for (std::size_t t = 0; t < p.v.size(); t += 5) {
        const double orig = p.v[t];
        p.v[t] = orig + h;
        const double lp = loss(x, p, blk);
        p.v[t] = orig - h;
        const double lm = loss(x, p, blk);
        p.v[t] = orig;
        CHECK(bg.p.v[t] == Catch::Approx((lp - lm) / (2 * h)).margin(tol).epsilon(tol));
    }
}

TEST_CASE("build_toy_net: structure, determinism, parameter count") {
    NetworkConfig cfg;
    cfg.backbone_channels = {4, 6};
    cfg.num_pgc_blocks = 2;
    cfg.block_out_channels = 3;
    cfg.dictionary = small_dict_cfg();

    Network<float> a = build_toy_net<float>(cfg, 42);
    Network<float> b = build_toy_net<float>(cfg, 42);
    REQUIRE(a.backbone.size() == 2);
    REQUIRE(a.blocks.size() == 2);
    CHECK(a.feature_channels() == 6 + 2 * 3);

    // closed-form parameter count
    const std::size_t expect =
        (3ull * 4 * 9 + 4) + (4ull * 6 * 9 + 6)          // backbone
        + (6ull * 3 * 9 + 3 + 4) + (9ull * 3 * 9 + 3 + 4)  // blocks (+4 perspective scalars)
        + (12ull * 1 + 1);                                // head
    CHECK(a.param_count() == expect);

    std::vector<ParamRef<float>> ra = a.param_refs(), rb = b.param_refs();
    for (std::size_t r = 0; r < ra.size(); ++r)
        for (std::size_t t = 0; t < ra[r].n; ++t) CHECK(ra[r].data[t] == rb[r].data[t]);
}

TEST_CASE("forward: zero blocks, shape, nonnegativity, zero image") {
    NetworkConfig cfg;
    cfg.backbone_channels = {4, 5};
    cfg.num_pgc_blocks = 0;
    cfg.block_out_channels = 3;
    Network<float> net = build_toy_net<float>(cfg, 7);
    Scene scene = tiny_scene(32, 10, 3);
    Tensor<float> image = scene.image;
    Map<float> p = scene.gt_perspective;
    Map<float> d = forward(net, image, p);
    CHECK(d.height == 16);
    CHECK(d.width == 16);
    for (float v : d.v) CHECK(v >= 0.0f);

    Tensor<float> zero(3, 32, 32);
    Map<float> dz = forward(net, zero, p);
    for (float v : dz.v) CHECK(v == 0.0f);
}

TEST_CASE("forward of a 1-block net equals the manual composition") {
    NetworkConfig cfg;
    cfg.backbone_channels = {4, 5};
    cfg.num_pgc_blocks = 1;
    cfg.block_out_channels = 3;
    Network<double> net = build_toy_net<double>(cfg, 9);
    for (PGCBlockParams<double>& blk : net.blocks) blk.persp = interior_params();

    Scene scene = tiny_scene(32, 12, 5);
    Tensor<double> image = tensor_cast<double>(scene.image);
    Map<double> p = map_cast<double>(scene.gt_perspective);
    Map<double> d = forward(net, image, p);

    Tensor<double> x = image;
    for (ConvLayer<double>& l : net.backbone) x = relu(conv2d(x, l));
    Map<double> p_feat = downsample_area(p, 2);
    x = pgc_block_forward(x, p_feat, net.blocks[0], net.dict);
    Tensor<double> head = relu(conv2d(x, net.head));
    for (std::size_t t = 0; t < d.v.size(); ++t)
        CHECK(d.v[t] == Catch::Approx(head.v[t]).margin(1e-12));
}

TEST_CASE("a = 0 in every block reduces the net to a plain dilated stack") {
    NetworkConfig cfg;
    cfg.backbone_channels = {4, 5};
    cfg.num_pgc_blocks = 2;
    cfg.block_out_channels = 3;
    Network<double> net = build_toy_net<double>(cfg, 11);
    for (PGCBlockParams<double>& blk : net.blocks) blk.persp.a = 0.0;

    Scene scene = tiny_scene(32, 8, 6);
    Tensor<double> image = tensor_cast<double>(scene.image);
    Map<double> p = map_cast<double>(scene.gt_perspective);
    Map<double> d = forward(net, image, p);

    // reference: identical weights, no smoothing anywhere
    Tensor<double> x = image;
    for (ConvLayer<double>& l : net.backbone) x = relu(conv2d(x, l));
    for (PGCBlockParams<double>& blk : net.blocks)
        x = concat_channels(x, dilated_conv_oracle(x, blk));
    Tensor<double> head = relu(conv2d(x, net.head));
    for (std::size_t t = 0; t < d.v.size(); ++t)
        CHECK(d.v[t] == Catch::Approx(head.v[t]).margin(1e-12));
}

TEST_CASE("train: lr = 0 leaves the network unchanged") {
    NetworkConfig cfg;
    cfg.backbone_channels = {3, 4};
    cfg.num_pgc_blocks = 1;
    cfg.block_out_channels = 2;
    Network<float> net = build_toy_net<float>(cfg, 13);
    Network<float> before = net;
    std::vector<Scene> data = {tiny_scene(32, 6, 1), tiny_scene(32, 9, 2)};
    TrainerConfig tcfg;
    tcfg.learning_rate = 0.0;
    tcfg.epochs = 3;
    std::vector<double> curve = train(net, data, tcfg);
    REQUIRE(curve.size() == 3);
    CHECK(curve[0] == curve[1]);
    CHECK(curve[1] == curve[2]);
    std::vector<ParamRef<float>> ra = net.param_refs(), rb = before.param_refs();
    for (std::size_t r = 0; r < ra.size(); ++r)
        for (std::size_t t = 0; t < ra[r].n; ++t) CHECK(ra[r].data[t] == rb[r].data[t]);
}

TEST_CASE("train: pure weight decay shrinks weights by the closed-form factor") {
    NetworkConfig cfg;
    cfg.backbone_channels = {3, 4};
    cfg.num_pgc_blocks = 0;
    Network<float> net = build_toy_net<float>(cfg, 17);
    // zero image and zero target: all loss gradients vanish
    Scene blank = synth_scene(32, 32, 0, 0);
    TrainerConfig tcfg;
    tcfg.learning_rate = 0.1;
    tcfg.weight_decay = 0.01;
    tcfg.momentum = 0.0;
    tcfg.epochs = 1;
    std::vector<float> w_before = net.backbone[0].w;
    train(net, {blank}, tcfg);
    const float factor = 1.0f - float(tcfg.learning_rate * tcfg.weight_decay);
    for (std::size_t t = 0; t < w_before.size(); ++t)
        CHECK(net.backbone[0].w[t] == Catch::Approx(w_before[t] * factor).margin(1e-7));
}

TEST_CASE("train: deterministic loss curve and single-scene convergence") {
    NetworkConfig cfg;
    cfg.backbone_channels = {4, 6};
    cfg.num_pgc_blocks = 1;
    cfg.block_out_channels = 3;

    Scene scene = tiny_scene(32, 15, 21);
    TrainerConfig tcfg;
    tcfg.epochs = 40;
    tcfg.seed = 5;

    Network<float> n1 = build_toy_net<float>(cfg, 19);
    calibrate_perspective(n1, scene.gt_perspective);
    Network<float> n2 = build_toy_net<float>(cfg, 19);
    calibrate_perspective(n2, scene.gt_perspective);
    std::vector<double> c1 = train(n1, {scene}, tcfg);
    std::vector<double> c2 = train(n2, {scene}, tcfg);
    CHECK(c1 == c2);  // bit-identical curves
    CHECK(c1.back() < c1.front());
}

TEST_CASE("gradcheck: 1-block net passes at 1e-4; zero-loss config has zero grads") {
    NetworkConfig cfg;
    cfg.backbone_channels = {3, 4};
    cfg.num_pgc_blocks = 1;
    cfg.block_out_channels = 2;
    Network<double> net = build_toy_net<double>(cfg, 23);
    for (PGCBlockParams<double>& blk : net.blocks) blk.persp = interior_params();
    // randomize biases: zero biases park whole background regions exactly on
    // the rectifier kinks, where finite differences are one-sided
    Rng brng(77);
    for (ConvLayer<double>& l : net.backbone) init_normal(l.b, brng, 0.1);
    init_normal(net.head.b, brng, 0.1);
    for (PGCBlockParams<double>& blk : net.blocks) init_normal(blk.conv.b, brng, 0.1);

    Scene scene = tiny_scene(32, 10, 31);
    // rescale the perspective into the interior regime of interior_params
    for (float& v : scene.gt_perspective.v) v = 0.3f + 0.4f * (v - 0.5f);
    // lift the image off zero so no rectifier sits exactly on its kink
    for (float& v : scene.image.v) v += 0.3f;
    GradReport rep = gradcheck(net, scene);
    INFO("max rel err " << rep.max_rel_error << " checked " << rep.checked << " skipped "
                        << rep.skipped_hinge);
    CHECK(rep.pass);
    CHECK(rep.skipped_hinge == 0);

    // prediction == target == 0: every gradient vanishes (zero-bias net)
    net = build_toy_net<double>(cfg, 23);
    Scene blank = synth_scene(32, 32, 0, 0);
    ForwardCache<double> cache;
    Tensor<double> image = tensor_cast<double>(blank.image);
    Map<double> p = map_cast<double>(blank.gt_perspective);
    Map<double> pred = forward(net, image, p, &cache);
    Map<double> gpred;
    const double loss = sample_loss(pred, scene_target<double>(blank), &gpred);
    CHECK(loss == 0.0);
    Network<double> grads = backward(net, image, gpred, cache);
    for (ParamRef<double> r : grads.param_refs())
        for (std::size_t t = 0; t < r.n; ++t) CHECK(std::abs(r.data[t]) <= 1e-6);
}
