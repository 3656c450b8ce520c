#pragma once

#include <cmath>
#include <vector>

#include "pgc/common.hpp"
#include "pgc/tensor.hpp"

namespace pgc {

/// Learned 2D convolution layer (zero padding). Weights are row-major
/// out_ch x in_ch x k x k.
template <typename T>
struct ConvLayer {
    int in_ch = 0, out_ch = 0;
    int ksize = 3;
    int stride = 1;
    int dilation = 1;
    int pad = 1;
    std::vector<T> w;
    std::vector<T> b;

    ConvLayer() = default;
    ConvLayer(int in, int out, int k, int s = 1, int d = 1, int p = -1)
        : in_ch(in), out_ch(out), ksize(k), stride(s), dilation(d),
          pad(p >= 0 ? p : d * (k / 2)),
          w(static_cast<std::size_t>(out) * in * k * k, T(0)), b(out, T(0)) {}

    T wat(int oc, int ic, int ki, int kj) const {
        return w[((static_cast<std::size_t>(oc) * in_ch + ic) * ksize + ki) * ksize + kj];
    }
    T& wat(int oc, int ic, int ki, int kj) {
        return w[((static_cast<std::size_t>(oc) * in_ch + ic) * ksize + ki) * ksize + kj];
    }
    int out_dim(int in_dim) const {
        return (in_dim + 2 * pad - dilation * (ksize - 1) - 1) / stride + 1;
    }
    std::size_t param_count() const { return w.size() + b.size(); }
};

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const ConvLayer<T>& l) {
    require(x.channels == l.in_ch, "conv2d: channel mismatch");
    const int oh = l.out_dim(x.height), ow = l.out_dim(x.width);
    require(oh >= 1 && ow >= 1, "conv2d: input too small");
    Tensor<T> out(l.out_ch, oh, ow);
    for (int oc = 0; oc < l.out_ch; ++oc) {
        for (int i = 0; i < oh; ++i) {
            for (int j = 0; j < ow; ++j) {
                double acc = double(l.b[oc]);
                for (int ic = 0; ic < l.in_ch; ++ic) {
                    for (int ki = 0; ki < l.ksize; ++ki) {
                        const int ii = i * l.stride - l.pad + ki * l.dilation;
                        if (ii < 0 || ii >= x.height) continue;
                        for (int kj = 0; kj < l.ksize; ++kj) {
                            const int jj = j * l.stride - l.pad + kj * l.dilation;
                            if (jj < 0 || jj >= x.width) continue;
                            acc += double(l.wat(oc, ic, ki, kj)) * double(x.at(ic, ii, jj));
                        }
                    }
                }
                out.at(oc, i, j) = static_cast<T>(acc);
            }
        }
    }
    return out;
}

template <typename T>
struct ConvGrads {
    Tensor<T> x;
    std::vector<T> w;
    std::vector<T> b;
};

template <typename T>
ConvGrads<T> conv2d_backward(const Tensor<T>& x, const ConvLayer<T>& l,
                             const Tensor<T>& grad_out) {
    require(grad_out.channels == l.out_ch, "conv2d_backward: grad channel mismatch");
    Tensor<double> gx(x.channels, x.height, x.width);
    std::vector<double> gw(l.w.size(), 0.0), gb(l.b.size(), 0.0);
    for (int oc = 0; oc < l.out_ch; ++oc) {
        for (int i = 0; i < grad_out.height; ++i) {
            for (int j = 0; j < grad_out.width; ++j) {
                const double g = grad_out.at(oc, i, j);
                gb[oc] += g;
                for (int ic = 0; ic < l.in_ch; ++ic) {
                    for (int ki = 0; ki < l.ksize; ++ki) {
                        const int ii = i * l.stride - l.pad + ki * l.dilation;
                        if (ii < 0 || ii >= x.height) continue;
                        for (int kj = 0; kj < l.ksize; ++kj) {
                            const int jj = j * l.stride - l.pad + kj * l.dilation;
                            if (jj < 0 || jj >= x.width) continue;
                            const std::size_t widx =
                                ((static_cast<std::size_t>(oc) * l.in_ch + ic) * l.ksize + ki) *
                                    l.ksize + kj;
                            gw[widx] += g * double(x.at(ic, ii, jj));
                            gx.at(ic, ii, jj) += g * double(l.w[widx]);
                        }
                    }
                }
            }
        }
    }
    ConvGrads<T> out;
    out.x = tensor_cast<T>(gx);
    out.w.resize(gw.size());
    for (std::size_t t = 0; t < gw.size(); ++t) out.w[t] = static_cast<T>(gw[t]);
    out.b.resize(gb.size());
    for (std::size_t t = 0; t < gb.size(); ++t) out.b[t] = static_cast<T>(gb[t]);
    return out;
}

/// Transposed convolution (fractionally strided). Weights are row-major
/// in_ch x out_ch x k x k; output size = (in-1)*stride - 2*pad + k + output_pad.
template <typename T>
struct ConvTransposeLayer {
    int in_ch = 0, out_ch = 0;
    int ksize = 3;
    int stride = 2;
    int pad = 1;
    int output_pad = 1;
    std::vector<T> w;
    std::vector<T> b;

    ConvTransposeLayer() = default;
    ConvTransposeLayer(int in, int out, int k = 3, int s = 2, int p = 1, int op = 1)
        : in_ch(in), out_ch(out), ksize(k), stride(s), pad(p), output_pad(op),
          w(static_cast<std::size_t>(in) * out * k * k, T(0)), b(out, T(0)) {}

    T wat(int ic, int oc, int ki, int kj) const {
        return w[((static_cast<std::size_t>(ic) * out_ch + oc) * ksize + ki) * ksize + kj];
    }
    T& wat(int ic, int oc, int ki, int kj) {
        return w[((static_cast<std::size_t>(ic) * out_ch + oc) * ksize + ki) * ksize + kj];
    }
    int out_dim(int in_dim) const {
        return (in_dim - 1) * stride - 2 * pad + ksize + output_pad;
    }
    std::size_t param_count() const { return w.size() + b.size(); }
};

template <typename T>
Tensor<T> conv_transpose2d(const Tensor<T>& x, const ConvTransposeLayer<T>& l) {
    require(x.channels == l.in_ch, "conv_transpose2d: channel mismatch");
    const int oh = l.out_dim(x.height), ow = l.out_dim(x.width);
    require(oh >= 1 && ow >= 1, "conv_transpose2d: degenerate output");
    Tensor<double> acc(l.out_ch, oh, ow);
    for (int oc = 0; oc < l.out_ch; ++oc)
        for (int i = 0; i < oh; ++i)
            for (int j = 0; j < ow; ++j) acc.at(oc, i, j) = double(l.b[oc]);
    for (int ic = 0; ic < l.in_ch; ++ic) {
        for (int i = 0; i < x.height; ++i) {
            for (int j = 0; j < x.width; ++j) {
                const double v = double(x.at(ic, i, j));
                for (int oc = 0; oc < l.out_ch; ++oc) {
                    for (int ki = 0; ki < l.ksize; ++ki) {
                        const int ii = i * l.stride - l.pad + ki;
                        if (ii < 0 || ii >= oh) continue;
                        for (int kj = 0; kj < l.ksize; ++kj) {
                            const int jj = j * l.stride - l.pad + kj;
                            if (jj < 0 || jj >= ow) continue;
                            acc.at(oc, ii, jj) += v * double(l.wat(ic, oc, ki, kj));
                        }
                    }
                }
            }
        }
    }
    return tensor_cast<T>(acc);
}

template <typename T>
ConvGrads<T> conv_transpose2d_backward(const Tensor<T>& x, const ConvTransposeLayer<T>& l,
                                       const Tensor<T>& grad_out) {
    require(grad_out.channels == l.out_ch, "conv_transpose2d_backward: grad channel mismatch");
    const int oh = grad_out.height, ow = grad_out.width;
    Tensor<double> gx(x.channels, x.height, x.width);
    std::vector<double> gw(l.w.size(), 0.0), gb(l.b.size(), 0.0);
    for (int oc = 0; oc < l.out_ch; ++oc)
        for (int i = 0; i < oh; ++i)
            for (int j = 0; j < ow; ++j) gb[oc] += double(grad_out.at(oc, i, j));
    for (int ic = 0; ic < l.in_ch; ++ic) {
        for (int i = 0; i < x.height; ++i) {
            for (int j = 0; j < x.width; ++j) {
                double gxi = 0.0;
                const double v = double(x.at(ic, i, j));
                for (int oc = 0; oc < l.out_ch; ++oc) {
                    for (int ki = 0; ki < l.ksize; ++ki) {
                        const int ii = i * l.stride - l.pad + ki;
                        if (ii < 0 || ii >= oh) continue;
                        for (int kj = 0; kj < l.ksize; ++kj) {
                            const int jj = j * l.stride - l.pad + kj;
                            if (jj < 0 || jj >= ow) continue;
                            const double g = double(grad_out.at(oc, ii, jj));
                            const std::size_t widx =
                                ((static_cast<std::size_t>(ic) * l.out_ch + oc) * l.ksize + ki) *
                                    l.ksize + kj;
                            gxi += g * double(l.w[widx]);
                            gw[widx] += g * v;
                        }
                    }
                }
                gx.at(ic, i, j) = gxi;
            }
        }
    }
    ConvGrads<T> out;
    out.x = tensor_cast<T>(gx);
    out.w.resize(gw.size());
    for (std::size_t t = 0; t < gw.size(); ++t) out.w[t] = static_cast<T>(gw[t]);
    out.b.resize(gb.size());
    for (std::size_t t = 0; t < gb.size(); ++t) out.b[t] = static_cast<T>(gb[t]);
    return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
    Tensor<T> out = x;
    for (T& v : out.v) v = v > T(0) ? v : T(0);
    return out;
}

/// Gradient flows where the pre-activation is > 0 (subgradient 0 at the kink).
template <typename T>
Tensor<T> relu_backward(const Tensor<T>& pre, const Tensor<T>& grad_out) {
    require(pre.same_shape(grad_out), "relu_backward: shape mismatch");
    Tensor<T> gx = grad_out;
    for (std::size_t t = 0; t < gx.v.size(); ++t)
        if (pre.v[t] <= T(0)) gx.v[t] = T(0);
    return gx;
}

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& x, T slope = T(0.2)) {
    Tensor<T> out = x;
    for (T& v : out.v) v = v > T(0) ? v : slope * v;
    return out;
}

template <typename T>
Tensor<T> leaky_relu_backward(const Tensor<T>& pre, const Tensor<T>& grad_out, T slope = T(0.2)) {
    require(pre.same_shape(grad_out), "leaky_relu_backward: shape mismatch");
    Tensor<T> gx = grad_out;
    for (std::size_t t = 0; t < gx.v.size(); ++t)
        if (pre.v[t] <= T(0)) gx.v[t] *= slope;
    return gx;
}

template <typename T>
void init_normal(std::vector<T>& w, Rng& rng, double stddev) {
    for (T& v : w) v = static_cast<T>(rng.normal() * stddev);
}

/// He-style fan-in scaling for rectifier stacks.
template <typename T>
void init_conv_he(ConvLayer<T>& l, Rng& rng) {
    const double fan_in = double(l.in_ch) * l.ksize * l.ksize;
    init_normal(l.w, rng, std::sqrt(2.0 / fan_in));
    std::fill(l.b.begin(), l.b.end(), T(0));
}

template <typename T>
void init_conv_transpose_he(ConvTransposeLayer<T>& l, Rng& rng) {
    const double fan_in = double(l.in_ch) * l.ksize * l.ksize;
    init_normal(l.w, rng, std::sqrt(2.0 / fan_in));
    std::fill(l.b.begin(), l.b.end(), T(0));
}

}  // namespace pgc
