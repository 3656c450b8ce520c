#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "pgc/common.hpp"
#include "pgc/density.hpp"
#include "pgc/dictionary.hpp"
#include "pgc/nn.hpp"
#include "pgc/perspective.hpp"
#include "pgc/tensor.hpp"
#include "pgc/variant_filter.hpp"

namespace pgc {

/// One PGC block: perspective-driven smoothing followed by a dilation-2
/// convolution whose output is concatenated onto the block input.
template <typename T>
struct PGCBlockParams {
    PerspectiveParams<T> persp;
    ConvLayer<T> conv;  // 3x3, dilation 2, zero padding

    PGCBlockParams() = default;
    PGCBlockParams(int in_ch, int out_ch) : conv(in_ch, out_ch, 3, 1, 2) {}
};

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
    require(a.height == b.height && a.width == b.width, "concat_channels: spatial mismatch");
    Tensor<T> out(a.channels + b.channels, a.height, a.width);
    std::copy(a.v.begin(), a.v.end(), out.v.begin());
    std::copy(b.v.begin(), b.v.end(), out.v.begin() + a.v.size());
    return out;
}

template <typename T>
struct BlockCache {
    Map<T> ptilde;
    Map<T> sigma;
    FilterApproxCache<T> fac;
    Tensor<T> xt;  // smoothed features
};

template <typename T>
Tensor<T> pgc_block_forward(const Tensor<T>& x, const Map<T>& p, const PGCBlockParams<T>& blk,
                            const KernelDictionary& dict, BlockCache<T>* cache = nullptr) {
    require(p.height == x.height && p.width == x.width,
            "pgc_block_forward: perspective map shape mismatch");
    require(blk.conv.in_ch == x.channels, "pgc_block_forward: channel mismatch with conv_weights");
    Map<T> ptilde = normalize_perspective(p, blk.persp);
    Map<T> sigma = blur_from_perspective(ptilde, blk.persp);
    Tensor<T> xt = filter_approx_cached(x, sigma, dict, PaddingMode::Replicate,
                                        cache ? &cache->fac : nullptr);
    Tensor<T> y = conv2d(xt, blk.conv);
    Tensor<T> out = concat_channels(x, y);
    if (cache) {
        cache->ptilde = std::move(ptilde);
        cache->sigma = std::move(sigma);
        cache->xt = std::move(xt);
    }
    return out;
}

template <typename T>
struct BlockGrads {
    Tensor<T> x;
    Map<T> p;
    std::vector<T> conv_w;
    std::vector<T> conv_b;
    PerspectiveParams<T> persp{T(0), T(0), T(0), T(0)};
};

/// Analytic block backward. The sigma chain runs through the projection
/// coefficients (and the deficit route in UnitSum mode); the hinge and the
/// grid clamp contribute zero derivative on their flat sides.
template <typename T>
BlockGrads<T> pgc_block_backward(const Tensor<T>& x, const Map<T>& p,
                                 const PGCBlockParams<T>& blk, const KernelDictionary& dict,
                                 const Tensor<T>& grad_out, const BlockCache<T>& cache) {
    const int in_ch = blk.conv.in_ch, out_ch = blk.conv.out_ch;
    require(grad_out.channels == in_ch + out_ch, "pgc_block_backward: grad channel mismatch");
    const int h = x.height, w = x.width;

    Tensor<T> gx_direct(in_ch, h, w), gy(out_ch, h, w);
    std::copy(grad_out.v.begin(), grad_out.v.begin() + gx_direct.v.size(), gx_direct.v.begin());
    std::copy(grad_out.v.begin() + gx_direct.v.size(), grad_out.v.end(), gy.v.begin());

    ConvGrads<T> cg = conv2d_backward(cache.xt, blk.conv, gy);
    const Tensor<T>& gxt = cg.x;

    const CoefficientMaps<T>& cm = cache.fac.coeff;
    const int C = cm.count;
    const bool unit_sum = !cm.deficit.empty();
    const std::vector<double> row_sums = eigen_row_sums(dict);

    // input gradient through the smoothing
    Tensor<double> gx_acc(in_ch, h, w);
    {
        Tensor<T> masked(in_ch, h, w);
        for (int q = 0; q < C; ++q) {
            for (int c = 0; c < in_ch; ++c)
                for (int i = 0; i < h; ++i)
                    for (int j = 0; j < w; ++j)
                        masked.at(c, i, j) =
                            cm.dirac[std::size_t(i) * w + j]
                                ? T(0)
                                : gxt.at(c, i, j) * cm.at(q, i, j);
            Tensor<T> adj =
                conv2d_invariant_adjoint(masked, eigen_kernel_of<T>(dict, q),
                                         PaddingMode::Replicate);
            for (std::size_t t = 0; t < adj.v.size(); ++t) gx_acc.v[t] += double(adj.v[t]);
        }
        if (unit_sum) {
            for (int c = 0; c < in_ch; ++c)
                for (int i = 0; i < h; ++i)
                    for (int j = 0; j < w; ++j)
                        masked.at(c, i, j) =
                            cm.dirac[std::size_t(i) * w + j]
                                ? T(0)
                                : gxt.at(c, i, j) * cm.deficit_at(i, j);
            Tensor<T> adj = conv2d_invariant_adjoint(masked, box_kernel(dict.config.kernel_size),
                                                     PaddingMode::Replicate);
            for (std::size_t t = 0; t < adj.v.size(); ++t) gx_acc.v[t] += double(adj.v[t]);
        }
        for (int c = 0; c < in_ch; ++c)
            for (int i = 0; i < h; ++i)
                for (int j = 0; j < w; ++j)
                    if (cm.dirac[std::size_t(i) * w + j]) gx_acc.at(c, i, j) += gxt.at(c, i, j);
    }

    // sigma gradient through the coefficient (and deficit) maps
    Map<double> gsigma(h, w);
    {
        std::vector<double> du;
        double memo_sigma = -1.0;
        for (int i = 0; i < h; ++i) {
            for (int j = 0; j < w; ++j) {
                if (cm.dirac[std::size_t(i) * w + j]) continue;
                const double s = double(cache.sigma.at(i, j));
                if (s != memo_sigma) {
                    du = projection_coefficients_dsigma(dict, s);
                    memo_sigma = s;
                }
                double g = 0.0, dsum = 0.0;
                for (int q = 0; q < C; ++q) {
                    if (du[q] == 0.0) continue;
                    double dotc = 0.0;
                    for (int c = 0; c < in_ch; ++c)
                        dotc += double(gxt.at(c, i, j)) *
                                double(cache.fac.eigen_convs[q].at(c, i, j));
                    g += dotc * du[q];
                    dsum += du[q] * row_sums[q];
                }
                if (unit_sum && dsum != 0.0) {
                    double dotb = 0.0;
                    for (int c = 0; c < in_ch; ++c)
                        dotb += double(gxt.at(c, i, j)) * double(cache.fac.box_conv.at(c, i, j));
                    g += dotb * (-dsum);
                }
                gsigma.at(i, j) = g;
            }
        }
    }

    // sigma -> (a, p0, ptilde) through the hinge, ptilde -> (alpha, beta, p)
    BlockGrads<T> out;
    out.p = Map<T>(h, w);
    double ga = 0.0, gp0 = 0.0, galpha = 0.0, gbeta = 0.0;
    for (int i = 0; i < h; ++i) {
        for (int j = 0; j < w; ++j) {
            const double gs = gsigma.at(i, j);
            if (gs == 0.0) continue;
            const double pt = double(cache.ptilde.at(i, j));
            const double z = double(blk.persp.a) * (pt - double(blk.persp.p0));
            if (z <= 0.0) continue;  // hinge flat side (subgradient 0 at the kink)
            ga += gs * (pt - double(blk.persp.p0));
            gp0 -= gs * double(blk.persp.a);
            const double gpt = gs * double(blk.persp.a);
            const double sp = pt * (1.0 - pt);
            galpha += gpt * sp * (double(p.at(i, j)) - double(blk.persp.beta));
            gbeta -= gpt * sp * double(blk.persp.alpha);
            out.p.at(i, j) = static_cast<T>(gpt * sp * double(blk.persp.alpha));
        }
    }
    out.persp.a = static_cast<T>(ga);
    out.persp.p0 = static_cast<T>(gp0);
    out.persp.alpha = static_cast<T>(galpha);
    out.persp.beta = static_cast<T>(gbeta);

    for (std::size_t t = 0; t < gx_acc.v.size(); ++t) gx_acc.v[t] += double(gx_direct.v[t]);
    out.x = tensor_cast<T>(gx_acc);
    out.conv_w = std::move(cg.w);
    out.conv_b = std::move(cg.b);
    return out;
}

struct NetworkConfig {
    std::vector<int> backbone_channels = {8, 12};
    int num_pgc_blocks = 5;
    int block_out_channels = 8;
    DictionaryConfig dictionary;

    void validate() const {
        require(backbone_channels.size() >= 2, "NetworkConfig: need >= 2 backbone channel counts");
        for (int c : backbone_channels)
            require(c >= 1, "NetworkConfig: backbone channels must be >= 1");
        require(num_pgc_blocks >= 0, "NetworkConfig: num_pgc_blocks must be >= 0");
        require(block_out_channels >= 1, "NetworkConfig: block_out_channels must be >= 1");
        dictionary.validate();
    }
};

template <typename T>
struct ParamRef {
    T* data = nullptr;
    std::size_t n = 0;
};

/// Backbone (one x2 downsampling) -> stacked PGC blocks sharing one
/// dictionary -> rectified 1x1 head.
template <typename T>
struct Network {
    NetworkConfig config;
    KernelDictionary dict;
    std::vector<ConvLayer<T>> backbone;
    std::vector<PGCBlockParams<T>> blocks;
    ConvLayer<T> head;

    int feature_channels() const {
        return config.backbone_channels.back() +
               config.num_pgc_blocks * config.block_out_channels;
    }

    std::vector<ParamRef<T>> param_refs() {
        std::vector<ParamRef<T>> refs;
        auto push_conv = [&](ConvLayer<T>& l) {
            refs.push_back({l.w.data(), l.w.size()});
            refs.push_back({l.b.data(), l.b.size()});
        };
        for (ConvLayer<T>& l : backbone) push_conv(l);
        for (PGCBlockParams<T>& blk : blocks) {
            push_conv(blk.conv);
            refs.push_back({&blk.persp.alpha, 1});
            refs.push_back({&blk.persp.beta, 1});
            refs.push_back({&blk.persp.a, 1});
            refs.push_back({&blk.persp.p0, 1});
        }
        push_conv(head);
        return refs;
    }

    std::size_t param_count() {
        std::size_t n = 0;
        for (const ParamRef<T>& r : param_refs()) n += r.n;
        return n;
    }
};

template <typename T>
Network<T> clone_zero(Network<T> net) {  // by value: copies the structure
    for (ParamRef<T> r : net.param_refs()) std::fill(r.data, r.data + r.n, T(0));
    return net;
}

template <typename T = float>
Network<T> build_toy_net(const NetworkConfig& config, std::uint64_t seed) {
    config.validate();
    Network<T> net;
    net.config = config;
    net.dict = build_dictionary(config.dictionary);
    Rng rng(seed);

    const std::vector<int>& bc = config.backbone_channels;
    net.backbone.emplace_back(3, bc[0], 3, 1);
    net.backbone.emplace_back(bc[0], bc[1], 3, 2);  // the x2 downsampling
    for (std::size_t i = 2; i < bc.size(); ++i)
        net.backbone.emplace_back(bc[i - 1], bc[i], 3, 1);
    for (ConvLayer<T>& l : net.backbone) init_conv_he(l, rng);

    int ch = bc.back();
    for (int b = 0; b < config.num_pgc_blocks; ++b) {
        PGCBlockParams<T> blk(ch, config.block_out_channels);
        init_normal(blk.conv.w, rng, 0.01);
        net.blocks.push_back(std::move(blk));
        ch += config.block_out_channels;
    }

    net.head = ConvLayer<T>(ch, 1, 1, 1, 1, 0);
    init_conv_he(net.head, rng);
    return net;
}

/// Shape the per-block sigmoids to the sample perspective range.
template <typename T>
void calibrate_perspective(Network<T>& net, const Map<T>& p_image) {
    for (PGCBlockParams<T>& blk : net.blocks) init_perspective_params(blk.persp, p_image);
}

template <typename T>
struct ForwardCache {
    std::vector<Tensor<T>> backbone_in;   // input of each backbone conv
    std::vector<Tensor<T>> backbone_pre;  // pre-activation of each backbone conv
    Map<T> p_feat;
    std::vector<Tensor<T>> block_in;
    std::vector<BlockCache<T>> block_caches;
    Tensor<T> features;  // input of the head
    Tensor<T> head_pre;
};

template <typename T>
Map<T> forward(Network<T>& net, const Tensor<T>& image, const Map<T>& p,
               ForwardCache<T>* cache = nullptr) {
    require(image.channels == 3, "forward: image must have 3 channels");
    require(p.height == image.height && p.width == image.width,
            "forward: perspective map must match image resolution");
    require(image.height % 2 == 0 && image.width % 2 == 0,
            "forward: image dims must be even");

    Tensor<T> x = image;
    for (ConvLayer<T>& l : net.backbone) {
        if (cache) cache->backbone_in.push_back(x);
        Tensor<T> pre = conv2d(x, l);
        if (cache) cache->backbone_pre.push_back(pre);
        x = relu(pre);
    }
    Map<T> p_feat = downsample_area(p, 2);
    require(p_feat.height == x.height && p_feat.width == x.width,
            "forward: feature resolution mismatch");
    for (std::size_t b = 0; b < net.blocks.size(); ++b) {
        if (cache) {
            cache->block_in.push_back(x);
            cache->block_caches.emplace_back();
            x = pgc_block_forward(x, p_feat, net.blocks[b], net.dict,
                                  &cache->block_caches.back());
        } else {
            x = pgc_block_forward(x, p_feat, net.blocks[b], net.dict);
        }
    }
    Tensor<T> pre = conv2d(x, net.head);
    Tensor<T> density = relu(pre);
    if (cache) {
        cache->p_feat = std::move(p_feat);
        cache->features = std::move(x);
        cache->head_pre = std::move(pre);
    }
    Map<T> out(density.height, density.width);
    std::copy(density.v.begin(), density.v.end(), out.v.begin());
    return out;
}

/// Backward through the whole network. Returns the parameter gradients in a
/// structurally identical network plus the gradient w.r.t. the image-resolution
/// perspective input (used by the jointly trained estimator mode).
template <typename T>
Network<T> backward(Network<T>& net, const Tensor<T>& image, const Map<T>& grad_density,
                    const ForwardCache<T>& cache, Map<T>* grad_p_image = nullptr) {
    Network<T> grads = clone_zero(net);

    Tensor<T> g(1, grad_density.height, grad_density.width);
    std::copy(grad_density.v.begin(), grad_density.v.end(), g.v.begin());
    g = relu_backward(cache.head_pre, g);
    {
        ConvGrads<T> cg = conv2d_backward(cache.features, net.head, g);
        grads.head.w = std::move(cg.w);
        grads.head.b = std::move(cg.b);
        g = std::move(cg.x);
    }

    Map<double> gp_feat(cache.p_feat.height, cache.p_feat.width);
    for (int b = int(net.blocks.size()) - 1; b >= 0; --b) {
        BlockGrads<T> bg = pgc_block_backward(cache.block_in[b], cache.p_feat, net.blocks[b],
                                              net.dict, g, cache.block_caches[b]);
        grads.blocks[b].conv.w = std::move(bg.conv_w);
        grads.blocks[b].conv.b = std::move(bg.conv_b);
        grads.blocks[b].persp = bg.persp;
        for (std::size_t t = 0; t < gp_feat.v.size(); ++t) gp_feat.v[t] += double(bg.p.v[t]);
        g = std::move(bg.x);
    }

    for (int l = int(net.backbone.size()) - 1; l >= 0; --l) {
        g = relu_backward(cache.backbone_pre[l], g);
        ConvGrads<T> cg = conv2d_backward(cache.backbone_in[l], net.backbone[l], g);
        grads.backbone[l].w = std::move(cg.w);
        grads.backbone[l].b = std::move(cg.b);
        g = std::move(cg.x);
    }

    if (grad_p_image) {
        Map<T> gp = map_cast<T>(gp_feat);
        *grad_p_image = downsample_area_backward(gp, 2, image.height, image.width);
    }
    return grads;
}

/// Half squared-L2 density loss for one sample; gradient is pred - target.
template <typename T>
double sample_loss(const Map<T>& pred, const Map<T>& target, Map<T>* grad = nullptr) {
    require(pred.same_shape(target), "sample_loss: shape mismatch");
    double acc = 0.0;
    if (grad) *grad = Map<T>(pred.height, pred.width);
    for (std::size_t t = 0; t < pred.v.size(); ++t) {
        const double d = double(pred.v[t]) - double(target.v[t]);
        acc += d * d;
        if (grad) grad->v[t] = static_cast<T>(d);
    }
    return 0.5 * acc;
}

struct TrainerConfig {
    double learning_rate = 1e-4;  // desk-scale default; paper-scale 1e-7 available
    double momentum = 0.95;
    double weight_decay = 5e-4;
    int epochs = 10;
    std::uint64_t seed = 0;

    void validate() const {
        require(learning_rate >= 0.0, "TrainerConfig: learning_rate must be >= 0");
        require(momentum >= 0.0 && momentum < 1.0, "TrainerConfig: momentum must be in [0,1)");
        require(weight_decay >= 0.0, "TrainerConfig: weight_decay must be >= 0");
        require(epochs >= 0, "TrainerConfig: epochs must be >= 0");
    }
};

template <typename T>
Map<T> scene_target(const Scene& scene) {
    Map<T> gt = map_cast<T>(scene.gt_density);
    return block_sum_downsample(gt, 2);
}

/// SGD with momentum and weight decay, batch size 1, seeded epoch permutation.
template <typename T>
std::vector<double> train(Network<T>& net, const std::vector<Scene>& dataset,
                          const TrainerConfig& tcfg) {
    tcfg.validate();
    require(!dataset.empty(), "train: empty dataset");
    Network<T> velocity = clone_zero(net);
    std::vector<ParamRef<T>> prefs = net.param_refs();
    std::vector<ParamRef<T>> vrefs = velocity.param_refs();

    Rng rng(tcfg.seed);
    std::vector<std::size_t> order(dataset.size());
    std::iota(order.begin(), order.end(), std::size_t(0));
    std::vector<double> curve;
    curve.reserve(tcfg.epochs);

    for (int epoch = 0; epoch < tcfg.epochs; ++epoch) {
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[rng.uniform_index(i)]);
        double epoch_loss = 0.0;
        for (std::size_t idx : order) {
            const Scene& scene = dataset[idx];
            Tensor<T> image = tensor_cast<T>(scene.image);
            Map<T> p = map_cast<T>(scene.gt_perspective);
            Map<T> target = scene_target<T>(scene);

            ForwardCache<T> cache;
            Map<T> pred = forward(net, image, p, &cache);
            Map<T> gpred;
            epoch_loss += sample_loss(pred, target, &gpred);
            Network<T> grads = backward(net, image, gpred, cache);

            std::vector<ParamRef<T>> grefs = grads.param_refs();
            for (std::size_t r = 0; r < prefs.size(); ++r) {
                for (std::size_t t = 0; t < prefs[r].n; ++t) {
                    const double gterm = double(grefs[r].data[t]) +
                                         tcfg.weight_decay * double(prefs[r].data[t]);
                    const double vel =
                        tcfg.momentum * double(vrefs[r].data[t]) - tcfg.learning_rate * gterm;
                    vrefs[r].data[t] = static_cast<T>(vel);
                    prefs[r].data[t] = static_cast<T>(double(prefs[r].data[t]) + vel);
                }
            }
        }
        curve.push_back(epoch_loss / double(dataset.size()));
    }
    return curve;
}

/// Count-level MAE / (root) MSE over a scene list.
template <typename T>
std::pair<double, double> evaluate_counts(Network<T>& net, const std::vector<Scene>& dataset) {
    require(!dataset.empty(), "evaluate_counts: empty dataset");
    std::vector<double> pred, gt;
    for (const Scene& scene : dataset) {
        Tensor<T> image = tensor_cast<T>(scene.image);
        Map<T> p = map_cast<T>(scene.gt_perspective);
        Map<T> d = forward(net, image, p);
        pred.push_back(count(d));
        gt.push_back(double(scene.dots.size()));
    }
    return mae_mse(pred, gt);
}

struct GradReport {
    double max_rel_error = 0.0;
    double mean_rel_error = 0.0;
    std::size_t checked = 0;
    std::size_t skipped_hinge = 0;  // perspective params within 1e-3 of a kink
    bool pass = false;
};

/// Full-network parameter gradient check against central finite differences.
/// Run with T = double; h defaults to 1e-4.
template <typename T>
GradReport gradcheck(Network<T>& net, const Scene& scene, double h = 1e-4,
                     double tolerance = 1e-4) {
    Tensor<T> image = tensor_cast<T>(scene.image);
    Map<T> p = map_cast<T>(scene.gt_perspective);
    Map<T> target = scene_target<T>(scene);

    auto loss_at = [&]() {
        Map<T> pred = forward(net, image, p);
        return sample_loss<T>(pred, target);
    };

    ForwardCache<T> cache;
    Map<T> pred = forward(net, image, p, &cache);
    Map<T> gpred;
    sample_loss(pred, target, &gpred);
    Network<T> grads = backward(net, image, gpred, cache);

    // a perspective parameter is hinge-adjacent if any pixel of its block sits
    // within 1e-3 of the hinge, the Dirac threshold, or the grid clamp
    std::vector<bool> block_hinge(net.blocks.size(), false);
    for (std::size_t b = 0; b < net.blocks.size(); ++b) {
        const Map<T>& sig = cache.block_caches[b].sigma;
        const PerspectiveParams<T>& pp = net.blocks[b].persp;
        for (std::size_t t = 0; t < sig.v.size(); ++t) {
            const double pt = double(cache.block_caches[b].ptilde.v[t]);
            const double z = double(pp.a) * (pt - double(pp.p0));
            const double s = double(sig.v[t]);
            if (std::abs(z) < 1e-3 || (s > 0.0 && s < 1e-3) ||
                std::abs(s - net.dict.config.sigma_min) < 1e-3 ||
                std::abs(s - net.dict.config.sigma_max) < 1e-3) {
                block_hinge[b] = true;
                break;
            }
        }
    }

    std::vector<ParamRef<T>> prefs = net.param_refs();
    std::vector<ParamRef<T>> grefs = grads.param_refs();
    // ref index ranges owned by each block's perspective scalars
    std::vector<bool> ref_is_hinge(prefs.size(), false);
    {
        std::size_t r = 2 * net.backbone.size();
        for (std::size_t b = 0; b < net.blocks.size(); ++b) {
            r += 2;  // block conv w, b
            for (int s = 0; s < 4; ++s) ref_is_hinge[r++] = block_hinge[b];
        }
    }

    GradReport rep;
    double err_sum = 0.0;
    for (std::size_t r = 0; r < prefs.size(); ++r) {
        for (std::size_t t = 0; t < prefs[r].n; ++t) {
            if (ref_is_hinge[r]) {
                ++rep.skipped_hinge;
                continue;
            }
            const T orig = prefs[r].data[t];
            prefs[r].data[t] = static_cast<T>(double(orig) + h);
            const double lp = loss_at();
            prefs[r].data[t] = static_cast<T>(double(orig) - h);
            const double lm = loss_at();
            prefs[r].data[t] = orig;
            const double fd = (lp - lm) / (2.0 * h);
            const double an = double(grefs[r].data[t]);
            const double rel = std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-6});
            rep.max_rel_error = std::max(rep.max_rel_error, rel);
            err_sum += rel;
            ++rep.checked;
        }
    }
    rep.mean_rel_error = rep.checked ? err_sum / double(rep.checked) : 0.0;
    rep.pass = rep.max_rel_error <= tolerance;
    return rep;
}

}  // namespace pgc
