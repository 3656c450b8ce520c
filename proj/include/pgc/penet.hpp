#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "pgc/common.hpp"
#include "pgc/nn.hpp"
#include "pgc/pgc_net.hpp"
#include "pgc/perspective.hpp"
#include "pgc/tensor.hpp"

namespace pgc {

/// Encoder-decoder widths, one entry per stride-2 stage. Full-scale widths are
/// 64/128/256/512; the default quarter widths keep desk runs in seconds.
struct PENetConfig {
    std::vector<int> widths = {16, 32, 64, 128};

    void validate() const {
        require(widths.size() == 4, "PENetConfig: exactly 4 stage widths required");
        for (int w : widths) require(w >= 1, "PENetConfig: widths must be >= 1");
    }
};

enum class EncoderPath { P, I };

template <typename T>
struct PENetParams {
    PENetConfig config;
    std::vector<ConvLayer<T>> encoder_p;           // 1-channel input, stride-2 convs
    std::vector<ConvLayer<T>> encoder_i;           // 3-channel input, same shape
    std::vector<ConvTransposeLayer<T>> decoder;    // back to one channel

    std::vector<ParamRef<T>> encoder_refs(EncoderPath path) {
        std::vector<ParamRef<T>> refs;
        for (ConvLayer<T>& l : (path == EncoderPath::P ? encoder_p : encoder_i)) {
            refs.push_back({l.w.data(), l.w.size()});
            refs.push_back({l.b.data(), l.b.size()});
        }
        return refs;
    }
    std::vector<ParamRef<T>> decoder_refs() {
        std::vector<ParamRef<T>> refs;
        for (ConvTransposeLayer<T>& l : decoder) {
            refs.push_back({l.w.data(), l.w.size()});
            refs.push_back({l.b.data(), l.b.size()});
        }
        return refs;
    }
    std::vector<ParamRef<T>> all_refs() {
        std::vector<ParamRef<T>> refs = encoder_refs(EncoderPath::P);
        for (ParamRef<T> r : encoder_refs(EncoderPath::I)) refs.push_back(r);
        for (ParamRef<T> r : decoder_refs()) refs.push_back(r);
        return refs;
    }
};

template <typename T>
PENetParams<T> clone_zero_penet(PENetParams<T> p) {
    for (ParamRef<T> r : p.all_refs()) std::fill(r.data, r.data + r.n, T(0));
    return p;
}

template <typename T = float>
PENetParams<T> build_penet(const PENetConfig& config, std::uint64_t seed) {
    config.validate();
    PENetParams<T> net;
    net.config = config;
    Rng rng(seed);
    const std::vector<int>& w = config.widths;
    int in = 1;
    for (int s = 0; s < 4; ++s) {
        net.encoder_p.emplace_back(in, w[s], 3, 2);
        in = w[s];
    }
    in = 3;
    for (int s = 0; s < 4; ++s) {
        net.encoder_i.emplace_back(in, w[s], 3, 2);
        in = w[s];
    }
    net.decoder.emplace_back(w[3], w[2]);
    net.decoder.emplace_back(w[2], w[1]);
    net.decoder.emplace_back(w[1], w[0]);
    net.decoder.emplace_back(w[0], 1);
    for (ConvLayer<T>& l : net.encoder_p) init_conv_he(l, rng);
    for (ConvLayer<T>& l : net.encoder_i) init_conv_he(l, rng);
    for (ConvTransposeLayer<T>& l : net.decoder) init_conv_transpose_he(l, rng);
    return net;
}

template <typename T>
struct PENetCache {
    std::vector<Tensor<T>> enc_in, enc_pre;
    std::vector<Tensor<T>> dec_in, dec_pre;
};

/// Encoder (leaky rectifier, slope 0.2) -> latent -> decoder (rectifier);
/// output is a nonnegative single-channel map at input resolution.
template <typename T>
Map<T> penet_forward(PENetParams<T>& net, const Tensor<T>& input, EncoderPath path,
                     PENetCache<T>* cache = nullptr) {
    require(input.height % 16 == 0 && input.width % 16 == 0,
            "penet_forward: spatial dims must be divisible by 16");
    std::vector<ConvLayer<T>>& enc = path == EncoderPath::P ? net.encoder_p : net.encoder_i;
    require(input.channels == enc[0].in_ch, "penet_forward: input channel mismatch");

    Tensor<T> x = input;
    for (ConvLayer<T>& l : enc) {
        if (cache) cache->enc_in.push_back(x);
        Tensor<T> pre = conv2d(x, l);
        if (cache) cache->enc_pre.push_back(pre);
        x = leaky_relu(pre);
    }
    for (ConvTransposeLayer<T>& l : net.decoder) {
        if (cache) cache->dec_in.push_back(x);
        Tensor<T> pre = conv_transpose2d(x, l);
        if (cache) cache->dec_pre.push_back(pre);
        x = relu(pre);
    }
    require(x.channels == 1 && x.height == input.height && x.width == input.width,
            "penet_forward: output shape contract violated");
    Map<T> out(x.height, x.width);
    std::copy(x.v.begin(), x.v.end(), out.v.begin());
    return out;
}

template <typename T>
struct PENetGrads {
    PENetParams<T> params;
    Tensor<T> input;
};

template <typename T>
PENetGrads<T> penet_backward(PENetParams<T>& net, const Map<T>& grad_out, EncoderPath path,
                             const PENetCache<T>& cache) {
    PENetGrads<T> out{clone_zero_penet(net), {}};
    std::vector<ConvLayer<T>>& enc = path == EncoderPath::P ? net.encoder_p : net.encoder_i;
    std::vector<ConvLayer<T>>& genc =
        path == EncoderPath::P ? out.params.encoder_p : out.params.encoder_i;

    Tensor<T> g(1, grad_out.height, grad_out.width);
    std::copy(grad_out.v.begin(), grad_out.v.end(), g.v.begin());
    for (int l = int(net.decoder.size()) - 1; l >= 0; --l) {
        g = relu_backward(cache.dec_pre[l], g);
        ConvGrads<T> cg = conv_transpose2d_backward(cache.dec_in[l], net.decoder[l], g);
        out.params.decoder[l].w = std::move(cg.w);
        out.params.decoder[l].b = std::move(cg.b);
        g = std::move(cg.x);
    }
    for (int l = int(enc.size()) - 1; l >= 0; --l) {
        g = leaky_relu_backward(cache.enc_pre[l], g);
        ConvGrads<T> cg = conv2d_backward(cache.enc_in[l], enc[l], g);
        genc[l].w = std::move(cg.w);
        genc[l].b = std::move(cg.b);
        g = std::move(cg.x);
    }
    out.input = std::move(g);
    return out;
}

struct PhaseReport {
    int phase = 0;
    int epochs = 0;
    double final_mae = 0.0;
    double final_mse = 0.0;
    std::vector<double> loss_curve;
};

/// Min-max scaling of a perspective map into [0,1] (recorded so predictions
/// can be mapped back to scene units).
template <typename T>
struct UnitScale {
    double lo = 0.0, hi = 1.0;
};

template <typename T>
Map<T> scale_to_unit(const Map<T>& m, UnitScale<T>* scale = nullptr) {
    double lo = m.v[0], hi = m.v[0];
    for (T v : m.v) {
        lo = std::min(lo, double(v));
        hi = std::max(hi, double(v));
    }
    if (hi <= lo) hi = lo + 1.0;
    if (scale) {
        scale->lo = lo;
        scale->hi = hi;
    }
    Map<T> out(m.height, m.width);
    for (std::size_t t = 0; t < m.v.size(); ++t)
        out.v[t] = static_cast<T>((double(m.v[t]) - lo) / (hi - lo));
    return out;
}

template <typename T>
Map<T> scale_from_unit(const Map<T>& m, const UnitScale<T>& scale) {
    Map<T> out(m.height, m.width);
    for (std::size_t t = 0; t < m.v.size(); ++t)
        out.v[t] = static_cast<T>(scale.lo + double(m.v[t]) * (scale.hi - scale.lo));
    return out;
}

namespace detail {

template <typename T>
void sgd_step(std::vector<ParamRef<T>>& prefs, std::vector<ParamRef<T>>& grefs,
              std::vector<ParamRef<T>>& vrefs, const TrainerConfig& tcfg) {
    for (std::size_t r = 0; r < prefs.size(); ++r) {
        for (std::size_t t = 0; t < prefs[r].n; ++t) {
            const double gterm =
                double(grefs[r].data[t]) + tcfg.weight_decay * double(prefs[r].data[t]);
            const double vel =
                tcfg.momentum * double(vrefs[r].data[t]) - tcfg.learning_rate * gterm;
            vrefs[r].data[t] = static_cast<T>(vel);
            prefs[r].data[t] = static_cast<T>(double(prefs[r].data[t]) + vel);
        }
    }
}

inline void shuffle_order(std::vector<std::size_t>& order, Rng& rng) {
    for (std::size_t i = order.size(); i > 1; --i)
        std::swap(order[i - 1], order[rng.uniform_index(i)]);
}

template <typename T>
std::pair<double, double> pixel_mae_mse(const Map<T>& pred, const Map<T>& target) {
    double abs_acc = 0.0, sq_acc = 0.0;
    for (std::size_t t = 0; t < pred.v.size(); ++t) {
        const double d = double(pred.v[t]) - double(target.v[t]);
        abs_acc += std::abs(d);
        sq_acc += d * d;
    }
    const double n = double(pred.v.size());
    return {abs_acc / n, std::sqrt(sq_acc / n)};
}

}  // namespace detail

/// Phase 1: map-to-map reconstruction (encoder_p + decoder trained).
/// Maps must already be normalized to [0,1].
template <typename T>
PhaseReport train_phase1(PENetParams<T>& net, const std::vector<Map<T>>& maps,
                         const TrainerConfig& tcfg) {
    tcfg.validate();
    require(!maps.empty(), "train_phase1: empty map set");
    PENetParams<T> velocity = clone_zero_penet(net);

    auto collect = [](PENetParams<T>& p) {
        std::vector<ParamRef<T>> refs = p.encoder_refs(EncoderPath::P);
        for (ParamRef<T> r : p.decoder_refs()) refs.push_back(r);
        return refs;
    };
    std::vector<ParamRef<T>> prefs = collect(net), vrefs = collect(velocity);

    Rng rng(tcfg.seed);
    std::vector<std::size_t> order(maps.size());
    std::iota(order.begin(), order.end(), std::size_t(0));

    PhaseReport rep;
    rep.phase = 1;
    rep.epochs = tcfg.epochs;
    for (int epoch = 0; epoch < tcfg.epochs; ++epoch) {
        detail::shuffle_order(order, rng);
        double epoch_loss = 0.0;
        for (std::size_t idx : order) {
            const Map<T>& target = maps[idx];
            Tensor<T> input(1, target.height, target.width);
            std::copy(target.v.begin(), target.v.end(), input.v.begin());

            PENetCache<T> cache;
            Map<T> pred = penet_forward(net, input, EncoderPath::P, &cache);
            Map<T> gpred;
            epoch_loss += sample_loss(pred, target, &gpred) / double(pred.v.size());
            for (T& v : gpred.v) v /= T(pred.v.size());
            PENetGrads<T> grads = penet_backward(net, gpred, EncoderPath::P, cache);
            std::vector<ParamRef<T>> grefs = collect(grads.params);
            detail::sgd_step(prefs, grefs, vrefs, tcfg);
        }
        rep.loss_curve.push_back(epoch_loss / double(maps.size()));
    }
    double mae_acc = 0.0, mse_acc = 0.0;
    for (const Map<T>& target : maps) {
        Tensor<T> input(1, target.height, target.width);
        std::copy(target.v.begin(), target.v.end(), input.v.begin());
        Map<T> pred = penet_forward(net, input, EncoderPath::P);
        auto [mae, mse] = detail::pixel_mae_mse(pred, target);
        mae_acc += mae;
        mse_acc += mse * mse;
    }
    rep.final_mae = mae_acc / double(maps.size());
    rep.final_mse = std::sqrt(mse_acc / double(maps.size()));
    return rep;
}

/// Phase 2: image-to-map regression; only encoder_i learns, the decoder is
/// frozen (bit-identical before and after).
template <typename T>
PhaseReport train_phase2(PENetParams<T>& net,
                         const std::vector<std::pair<Tensor<T>, Map<T>>>& pairs,
                         const TrainerConfig& tcfg) {
    tcfg.validate();
    require(!pairs.empty(), "train_phase2: empty pair set");
    require(!net.decoder.empty() && !net.decoder[0].w.empty(),
            "train_phase2: decoder missing (run phase 1 first)");
    PENetParams<T> velocity = clone_zero_penet(net);
    std::vector<ParamRef<T>> prefs = net.encoder_refs(EncoderPath::I);
    std::vector<ParamRef<T>> vrefs = velocity.encoder_refs(EncoderPath::I);

    Rng rng(tcfg.seed);
    std::vector<std::size_t> order(pairs.size());
    std::iota(order.begin(), order.end(), std::size_t(0));

    PhaseReport rep;
    rep.phase = 2;
    rep.epochs = tcfg.epochs;
    for (int epoch = 0; epoch < tcfg.epochs; ++epoch) {
        detail::shuffle_order(order, rng);
        double epoch_loss = 0.0;
        for (std::size_t idx : order) {
            const auto& [image, target] = pairs[idx];
            PENetCache<T> cache;
            Map<T> pred = penet_forward(net, image, EncoderPath::I, &cache);
            Map<T> gpred;
            epoch_loss += sample_loss(pred, target, &gpred) / double(pred.v.size());
            for (T& v : gpred.v) v /= T(pred.v.size());
            PENetGrads<T> grads = penet_backward(net, gpred, EncoderPath::I, cache);
            std::vector<ParamRef<T>> grefs = grads.params.encoder_refs(EncoderPath::I);
            detail::sgd_step(prefs, grefs, vrefs, tcfg);
        }
        rep.loss_curve.push_back(epoch_loss / double(pairs.size()));
    }
    double mae_acc = 0.0, mse_acc = 0.0;
    for (const auto& [image, target] : pairs) {
        Map<T> pred = penet_forward(net, image, EncoderPath::I);
        auto [mae, mse] = detail::pixel_mae_mse(pred, target);
        mae_acc += mae;
        mse_acc += mse * mse;
    }
    rep.final_mae = mae_acc / double(pairs.size());
    rep.final_mse = std::sqrt(mse_acc / double(pairs.size()));
    return rep;
}

enum class FinetuneMode { OursA, OursB };

/// Estimated perspective fed to the density net: image-path forward, then the
/// whole-line (row mean) collapse.
template <typename T>
Map<T> estimate_perspective(PENetParams<T>& penet, const Tensor<T>& image,
                            PENetCache<T>* cache = nullptr) {
    return row_mean_collapse(penet_forward(penet, image, EncoderPath::I, cache));
}

template <typename T>
std::pair<double, double> evaluate_counts_with_penet(Network<T>& net, PENetParams<T>& penet,
                                                     const std::vector<Scene>& dataset) {
    require(!dataset.empty(), "evaluate_counts_with_penet: empty dataset");
    std::vector<double> pred, gt;
    for (const Scene& scene : dataset) {
        Tensor<T> image = tensor_cast<T>(scene.image);
        Map<T> p_hat = estimate_perspective(penet, image);
        Map<T> d = forward(net, image, p_hat);
        pred.push_back(count(d));
        gt.push_back(double(scene.dots.size()));
    }
    return mae_mse(pred, gt);
}

/// Phase 3: density fine-tuning. OursA freezes the whole estimator and treats
/// its collapsed output as fixed perspective ground truth; OursB additionally
/// trains encoder_i through the density loss (decoder still frozen).
template <typename T>
PhaseReport finetune_phase3(Network<T>& net, PENetParams<T>& penet,
                            const std::vector<Scene>& dataset, FinetuneMode mode,
                            const TrainerConfig& tcfg) {
    tcfg.validate();
    require(!dataset.empty(), "finetune_phase3: empty dataset");

    Network<T> velocity = clone_zero(net);
    std::vector<ParamRef<T>> net_prefs = net.param_refs();
    std::vector<ParamRef<T>> net_vrefs = velocity.param_refs();

    PENetParams<T> pvel = clone_zero_penet(penet);
    std::vector<ParamRef<T>> enc_prefs = penet.encoder_refs(EncoderPath::I);
    std::vector<ParamRef<T>> enc_vrefs = pvel.encoder_refs(EncoderPath::I);

    Rng rng(tcfg.seed);
    std::vector<std::size_t> order(dataset.size());
    std::iota(order.begin(), order.end(), std::size_t(0));

    PhaseReport rep;
    rep.phase = 3;
    rep.epochs = tcfg.epochs;
    for (int epoch = 0; epoch < tcfg.epochs; ++epoch) {
        detail::shuffle_order(order, rng);
        double epoch_loss = 0.0;
        for (std::size_t idx : order) {
            const Scene& scene = dataset[idx];
            Tensor<T> image = tensor_cast<T>(scene.image);
            Map<T> target = scene_target<T>(scene);

            PENetCache<T> pcache;
            Map<T> p_hat = mode == FinetuneMode::OursB
                               ? estimate_perspective(penet, image, &pcache)
                               : estimate_perspective(penet, image);

            ForwardCache<T> cache;
            Map<T> pred = forward(net, image, p_hat, &cache);
            Map<T> gpred;
            epoch_loss += sample_loss(pred, target, &gpred);

            Map<T> grad_p;
            Network<T> grads = backward(net, image, gpred, cache,
                                        mode == FinetuneMode::OursB ? &grad_p : nullptr);
            std::vector<ParamRef<T>> grefs = grads.param_refs();
            detail::sgd_step(net_prefs, grefs, net_vrefs, tcfg);

            if (mode == FinetuneMode::OursB) {
                Map<T> g_penet_out = row_mean_collapse_backward(grad_p);
                PENetGrads<T> pgrads = penet_backward(penet, g_penet_out, EncoderPath::I, pcache);
                std::vector<ParamRef<T>> pgrefs = pgrads.params.encoder_refs(EncoderPath::I);
                detail::sgd_step(enc_prefs, pgrefs, enc_vrefs, tcfg);
            }
        }
        rep.loss_curve.push_back(epoch_loss / double(dataset.size()));
    }
    auto [mae, mse] = evaluate_counts_with_penet(net, penet, dataset);
    rep.final_mae = mae;
    rep.final_mse = mse;
    return rep;
}

}  // namespace pgc
