#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "pbbn/tensor.hpp"

namespace pbbn {

enum class Mode { Train, Infer };

// ---------------------------------------------------------------------------
// Layer specs. Data layout everywhere is [N, H, W, T, C] with C innermost;
// conv weights are [kh, kw, kt, c_in, c_out].
// ---------------------------------------------------------------------------

struct Conv3DSpec {
    int kh = 1, kw = 1, kt = 1;
    int c_in = 1, c_out = 1;
    int sh = 1, sw = 1, st = 1;
    bool bias = true;
};

struct PoolSpec {
    int kh = 1, kw = 1, kt = 1;
    int sh = 1, sw = 1, st = 1;
};

struct BatchNormSpec {
    int channels = 1;
    double epsilon = 1e-5;
    double momentum = 0.1;
};

struct DenseSpec {
    int in_features = 1;
    int out_features = 1;
    bool bias = true;
};

// SAME padding with ceil-mode output sizes; when the total padding along an
// axis is odd the extra pad goes on the trailing side.
inline int same_out_extent(int in, int stride) { return (in + stride - 1) / stride; }

inline int same_pad_leading(int in, int k, int stride) {
    const int out = same_out_extent(in, stride);
    const int total = std::max((out - 1) * stride + k - in, 0);
    return total / 2;
}

// ---------------------------------------------------------------------------
// Parameter and multiply-accumulate accounting
// ---------------------------------------------------------------------------

inline long long conv_param_count(const Conv3DSpec& s, bool include_bias) {
    long long n = static_cast<long long>(s.kh) * s.kw * s.kt * s.c_in * s.c_out;
    if (include_bias && s.bias) n += s.c_out;
    return n;
}
inline long long conv_param_count(const Conv3DSpec& s) { return conv_param_count(s, true); }

inline long long depthwise_param_count(const Conv3DSpec& s, bool include_bias) {
    long long n = static_cast<long long>(s.kh) * s.kw * s.kt * s.c_in;
    if (include_bias && s.bias) n += s.c_in;
    return n;
}

inline long long pointwise_param_count(const Conv3DSpec& s, bool include_bias) {
    long long n = static_cast<long long>(s.c_in) * s.c_out;
    if (include_bias && s.bias) n += s.c_out;
    return n;
}

inline long long batchnorm_param_count(int channels) { return 2LL * channels; }

inline long long dense_param_count(const DenseSpec& s) {
    long long n = static_cast<long long>(s.in_features) * s.out_features;
    if (s.bias) n += s.out_features;
    return n;
}

/// Total parameters of the depthwise-separable composite replacing a
/// standard conv of the given geometry: depthwise stage, intermediate batch
/// norm over c_in, pointwise stage.
inline long long dws_param_count(const Conv3DSpec& s, bool include_bias = true, bool include_mid_bn = true) {
    long long n = depthwise_param_count(s, include_bias) + pointwise_param_count(s, include_bias);
    if (include_mid_bn) n += batchnorm_param_count(s.c_in);
    return n;
}

/// Bias-free DWS/standard parameter ratio: 1/c_out + 1/(kh*kw*kt).
inline double dws_saving_ratio(const Conv3DSpec& s) {
    return 1.0 / s.c_out + 1.0 / (static_cast<double>(s.kh) * s.kw * s.kt);
}

struct OutExtents {
    int h = 0, w = 0, t = 0;
};

inline OutExtents conv_out_extents(int h, int w, int t, const Conv3DSpec& s) {
    return {same_out_extent(h, s.sh), same_out_extent(w, s.sw), same_out_extent(t, s.st)};
}

inline long long conv_mac_count(const Conv3DSpec& s, int in_h, int in_w, int in_t) {
    const OutExtents o = conv_out_extents(in_h, in_w, in_t, s);
    return static_cast<long long>(o.h) * o.w * o.t * s.c_out * s.kh * s.kw * s.kt * s.c_in;
}

inline long long depthwise_mac_count(const Conv3DSpec& s, int in_h, int in_w, int in_t) {
    const OutExtents o = conv_out_extents(in_h, in_w, in_t, s);
    return static_cast<long long>(o.h) * o.w * o.t * s.c_in * s.kh * s.kw * s.kt;
}

inline long long pointwise_mac_count(const Conv3DSpec& s, int in_h, int in_w, int in_t) {
    const OutExtents o = conv_out_extents(in_h, in_w, in_t, s);
    return static_cast<long long>(o.h) * o.w * o.t * s.c_out * s.c_in;
}

inline long long dense_mac_count(const DenseSpec& s) {
    return static_cast<long long>(s.in_features) * s.out_features;
}

// ---------------------------------------------------------------------------
// Shape helpers
// ---------------------------------------------------------------------------

namespace detail {

struct Dims5 {
    int n, h, w, t, c;
    std::size_t sh, sw, st, sc;  // element strides per axis (sc == 1)
};

template <typename T>
Dims5 dims5(const Tensor<T>& x, const char* who) {
    if (x.rank() != 5) throw std::invalid_argument(std::string(who) + ": expected rank-5 [N,H,W,T,C] input");
    Dims5 d;
    d.n = static_cast<int>(x.extent(0));
    d.h = static_cast<int>(x.extent(1));
    d.w = static_cast<int>(x.extent(2));
    d.t = static_cast<int>(x.extent(3));
    d.c = static_cast<int>(x.extent(4));
    d.sc = 1;
    d.st = static_cast<std::size_t>(d.c);
    d.sw = d.st * d.t;
    d.sh = d.sw * d.w;
    return d;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Standard 3D convolution (also used with a 1x1x1 spec as the pointwise stage)
// ---------------------------------------------------------------------------

template <typename T>
struct Conv3D {
    Conv3DSpec spec;
    Tensor<T> weight;  // [kh,kw,kt,c_in,c_out]
    Tensor<T> bias;    // [c_out], empty when spec.bias is false

    explicit Conv3D(const Conv3DSpec& s = {})
        : spec(s),
          weight(Shape{static_cast<std::size_t>(s.kh), static_cast<std::size_t>(s.kw),
                       static_cast<std::size_t>(s.kt), static_cast<std::size_t>(s.c_in),
                       static_cast<std::size_t>(s.c_out)}),
          bias(s.bias ? Tensor<T>(Shape{static_cast<std::size_t>(s.c_out)}) : Tensor<T>()) {}

    Tensor<T> forward(const Tensor<T>& x) const {
        const auto d = detail::dims5(x, "conv3d");
        if (d.c != spec.c_in)
            throw std::invalid_argument("conv3d: input has " + std::to_string(d.c) + " channels, spec wants " +
                                        std::to_string(spec.c_in));
        const int OH = same_out_extent(d.h, spec.sh);
        const int OW = same_out_extent(d.w, spec.sw);
        const int OT = same_out_extent(d.t, spec.st);
        const int ph = same_pad_leading(d.h, spec.kh, spec.sh);
        const int pw = same_pad_leading(d.w, spec.kw, spec.sw);
        const int pt = same_pad_leading(d.t, spec.kt, spec.st);
        const int cin = spec.c_in, cout = spec.c_out;

        Tensor<T> out(Shape{static_cast<std::size_t>(d.n), static_cast<std::size_t>(OH),
                            static_cast<std::size_t>(OW), static_cast<std::size_t>(OT),
                            static_cast<std::size_t>(cout)});
        const T* xp = x.data();
        const T* wp = weight.data();
        const T* bp = spec.bias ? bias.data() : nullptr;
        T* op = out.data();
        const std::size_t o_st = static_cast<std::size_t>(cout);
        const std::size_t o_sw = o_st * OT;
        const std::size_t o_sh = o_sw * OW;
        const std::size_t o_sn = o_sh * OH;
        const std::size_t w_sci = static_cast<std::size_t>(cout);
        const std::size_t w_skt = w_sci * cin;
        const std::size_t w_skw = w_skt * spec.kt;
        const std::size_t w_skh = w_skw * spec.kw;
        const std::size_t x_sn = d.sh * d.h;

#pragma omp parallel for collapse(2) schedule(static)
        for (int n = 0; n < d.n; ++n) {
            for (int oh = 0; oh < OH; ++oh) {
                std::vector<T> acc(static_cast<std::size_t>(cout));
                const int ih0 = oh * spec.sh - ph;
                const int i_lo = std::max(0, -ih0);
                const int i_hi = std::min(spec.kh, d.h - ih0);
                for (int ow = 0; ow < OW; ++ow) {
                    const int iw0 = ow * spec.sw - pw;
                    const int j_lo = std::max(0, -iw0);
                    const int j_hi = std::min(spec.kw, d.w - iw0);
                    for (int ot = 0; ot < OT; ++ot) {
                        const int it0 = ot * spec.st - pt;
                        const int k_lo = std::max(0, -it0);
                        const int k_hi = std::min(spec.kt, d.t - it0);
                        if (bp) std::copy(bp, bp + cout, acc.begin());
                        else std::fill(acc.begin(), acc.end(), T{});
                        for (int i = i_lo; i < i_hi; ++i) {
                            for (int j = j_lo; j < j_hi; ++j) {
                                for (int k = k_lo; k < k_hi; ++k) {
                                    const T* xrow = xp + n * x_sn + (ih0 + i) * d.sh + (iw0 + j) * d.sw +
                                                    (it0 + k) * d.st;
                                    const T* wtap = wp + i * w_skh + j * w_skw + k * w_skt;
                                    for (int ci = 0; ci < cin; ++ci) {
                                        const T xv = xrow[ci];
                                        const T* wrow = wtap + ci * w_sci;
                                        for (int co = 0; co < cout; ++co) acc[co] += xv * wrow[co];
                                    }
                                }
                            }
                        }
                        T* orow = op + n * o_sn + oh * o_sh + ow * o_sw + ot * o_st;
                        std::copy(acc.begin(), acc.end(), orow);
                    }
                }
            }
        }
        return out;
    }

    struct Grads {
        Tensor<T> dx, dweight, dbias;
    };

    Grads backward(const Tensor<T>& x, const Tensor<T>& dy) const {
        const auto d = detail::dims5(x, "conv3d");
        const auto o = detail::dims5(dy, "conv3d upstream");
        if (d.c != spec.c_in || o.c != spec.c_out)
            throw std::invalid_argument("conv3d backward: channel mismatch");
        const OutExtents exp_out = conv_out_extents(d.h, d.w, d.t, spec);
        if (o.h != exp_out.h || o.w != exp_out.w || o.t != exp_out.t || o.n != d.n)
            throw std::invalid_argument("conv3d backward: upstream shape does not match cached forward");
        const int ph = same_pad_leading(d.h, spec.kh, spec.sh);
        const int pw = same_pad_leading(d.w, spec.kw, spec.sw);
        const int pt = same_pad_leading(d.t, spec.kt, spec.st);
        const int cin = spec.c_in, cout = spec.c_out;

        Grads g{Tensor<T>(x.shape()), Tensor<T>(weight.shape()),
                spec.bias ? Tensor<T>(bias.shape()) : Tensor<T>()};
        const T* xp = x.data();
        const T* wp = weight.data();
        const T* dyp = dy.data();
        const std::size_t x_sn = d.sh * d.h;
        const std::size_t o_sn = o.sh * o.h;
        const std::size_t w_sci = static_cast<std::size_t>(cout);
        const std::size_t w_skt = w_sci * cin;
        const std::size_t w_skw = w_skt * spec.kt;
        const std::size_t w_skh = w_skw * spec.kw;

        // dx: gather over the taps that map each input position to an output
        T* dxp = g.dx.data();
#pragma omp parallel for collapse(2) schedule(static)
        for (int n = 0; n < d.n; ++n) {
            for (int ih = 0; ih < d.h; ++ih) {
                std::vector<T> acc(static_cast<std::size_t>(cin));
                for (int iw = 0; iw < d.w; ++iw) {
                    for (int it = 0; it < d.t; ++it) {
                        std::fill(acc.begin(), acc.end(), T{});
                        for (int i = 0; i < spec.kh; ++i) {
                            const int oh_num = ih + ph - i;
                            if (oh_num < 0 || oh_num % spec.sh) continue;
                            const int oh = oh_num / spec.sh;
                            if (oh >= o.h) continue;
                            for (int j = 0; j < spec.kw; ++j) {
                                const int ow_num = iw + pw - j;
                                if (ow_num < 0 || ow_num % spec.sw) continue;
                                const int ow = ow_num / spec.sw;
                                if (ow >= o.w) continue;
                                for (int k = 0; k < spec.kt; ++k) {
                                    const int ot_num = it + pt - k;
                                    if (ot_num < 0 || ot_num % spec.st) continue;
                                    const int ot = ot_num / spec.st;
                                    if (ot >= o.t) continue;
                                    const T* dyrow = dyp + n * o_sn + oh * o.sh + ow * o.sw + ot * o.st;
                                    const T* wtap = wp + i * w_skh + j * w_skw + k * w_skt;
                                    for (int ci = 0; ci < cin; ++ci) {
                                        const T* wrow = wtap + ci * w_sci;
                                        T s{};
                                        for (int co = 0; co < cout; ++co) s += dyrow[co] * wrow[co];
                                        acc[ci] += s;
                                    }
                                }
                            }
                        }
                        T* dxrow = dxp + n * x_sn + ih * d.sh + iw * d.sw + it * d.st;
                        std::copy(acc.begin(), acc.end(), dxrow);
                    }
                }
            }
        }

        // dweight: one (i,j,k,ci) slice per task, each summed in fixed order
        T* dwp = g.dweight.data();
        const int tap_tasks = spec.kh * spec.kw * spec.kt * cin;
#pragma omp parallel for schedule(static)
        for (int task = 0; task < tap_tasks; ++task) {
            const int ci = task % cin;
            const int k = (task / cin) % spec.kt;
            const int j = (task / (cin * spec.kt)) % spec.kw;
            const int i = task / (cin * spec.kt * spec.kw);
            T* dwrow = dwp + i * w_skh + j * w_skw + k * w_skt + ci * w_sci;
            for (int n = 0; n < d.n; ++n) {
                for (int oh = 0; oh < o.h; ++oh) {
                    const int ih = oh * spec.sh - ph + i;
                    if (ih < 0 || ih >= d.h) continue;
                    for (int ow = 0; ow < o.w; ++ow) {
                        const int iw = ow * spec.sw - pw + j;
                        if (iw < 0 || iw >= d.w) continue;
                        for (int ot = 0; ot < o.t; ++ot) {
                            const int it = ot * spec.st - pt + k;
                            if (it < 0 || it >= d.t) continue;
                            const T xv = xp[n * x_sn + ih * d.sh + iw * d.sw + it * d.st + ci];
                            const T* dyrow = dyp + n * o_sn + oh * o.sh + ow * o.sw + ot * o.st;
                            for (int co = 0; co < cout; ++co) dwrow[co] += xv * dyrow[co];
                        }
                    }
                }
            }
        }

        if (spec.bias) {
            T* dbp = g.dbias.data();
            const std::size_t positions = dy.size() / cout;
            for (std::size_t p = 0; p < positions; ++p) {
                const T* dyrow = dyp + p * cout;
                for (int co = 0; co < cout; ++co) dbp[co] += dyrow[co];
            }
        }
        return g;
    }
};

// ---------------------------------------------------------------------------
// Depthwise 3D convolution: one kh x kw x kt filter per input channel
// ---------------------------------------------------------------------------

template <typename T>
struct DepthwiseConv3D {
    Conv3DSpec spec;   // c_out is ignored; output channels == c_in
    Tensor<T> weight;  // [kh,kw,kt,c]
    Tensor<T> bias;    // [c]

    explicit DepthwiseConv3D(const Conv3DSpec& s = {})
        : spec(s),
          weight(Shape{static_cast<std::size_t>(s.kh), static_cast<std::size_t>(s.kw),
                       static_cast<std::size_t>(s.kt), static_cast<std::size_t>(s.c_in)}),
          bias(s.bias ? Tensor<T>(Shape{static_cast<std::size_t>(s.c_in)}) : Tensor<T>()) {}

    Tensor<T> forward(const Tensor<T>& x) const {
        const auto d = detail::dims5(x, "depthwise_conv3d");
        if (d.c != spec.c_in)
            throw std::invalid_argument("depthwise_conv3d: channel mismatch");
        const int OH = same_out_extent(d.h, spec.sh);
        const int OW = same_out_extent(d.w, spec.sw);
        const int OT = same_out_extent(d.t, spec.st);
        const int ph = same_pad_leading(d.h, spec.kh, spec.sh);
        const int pw = same_pad_leading(d.w, spec.kw, spec.sw);
        const int pt = same_pad_leading(d.t, spec.kt, spec.st);
        const int c = spec.c_in;

        Tensor<T> out(Shape{static_cast<std::size_t>(d.n), static_cast<std::size_t>(OH),
                            static_cast<std::size_t>(OW), static_cast<std::size_t>(OT),
                            static_cast<std::size_t>(c)});
        const T* xp = x.data();
        const T* wp = weight.data();
        const T* bp = spec.bias ? bias.data() : nullptr;
        T* op = out.data();
        const std::size_t o_st = static_cast<std::size_t>(c);
        const std::size_t o_sw = o_st * OT;
        const std::size_t o_sh = o_sw * OW;
        const std::size_t o_sn = o_sh * OH;
        const std::size_t x_sn = d.sh * d.h;

#pragma omp parallel for collapse(2) schedule(static)
        for (int n = 0; n < d.n; ++n) {
            for (int oh = 0; oh < OH; ++oh) {
                std::vector<T> acc(static_cast<std::size_t>(c));
                const int ih0 = oh * spec.sh - ph;
                const int i_lo = std::max(0, -ih0);
                const int i_hi = std::min(spec.kh, d.h - ih0);
                for (int ow = 0; ow < OW; ++ow) {
                    const int iw0 = ow * spec.sw - pw;
                    const int j_lo = std::max(0, -iw0);
                    const int j_hi = std::min(spec.kw, d.w - iw0);
                    for (int ot = 0; ot < OT; ++ot) {
                        const int it0 = ot * spec.st - pt;
                        const int k_lo = std::max(0, -it0);
                        const int k_hi = std::min(spec.kt, d.t - it0);
                        if (bp) std::copy(bp, bp + c, acc.begin());
                        else std::fill(acc.begin(), acc.end(), T{});
                        for (int i = i_lo; i < i_hi; ++i) {
                            for (int j = j_lo; j < j_hi; ++j) {
                                for (int k = k_lo; k < k_hi; ++k) {
                                    const T* xrow = xp + n * x_sn + (ih0 + i) * d.sh + (iw0 + j) * d.sw +
                                                    (it0 + k) * d.st;
                                    const T* wrow = wp + ((i * spec.kw + j) * spec.kt + k) * c;
                                    for (int cc = 0; cc < c; ++cc) acc[cc] += xrow[cc] * wrow[cc];
                                }
                            }
                        }
                        std::copy(acc.begin(), acc.end(), op + n * o_sn + oh * o_sh + ow * o_sw + ot * o_st);
                    }
                }
            }
        }
        return out;
    }

    struct Grads {
        Tensor<T> dx, dweight, dbias;
    };

    Grads backward(const Tensor<T>& x, const Tensor<T>& dy) const {
        const auto d = detail::dims5(x, "depthwise_conv3d");
        const auto o = detail::dims5(dy, "depthwise_conv3d upstream");
        if (d.c != spec.c_in || o.c != spec.c_in)
            throw std::invalid_argument("depthwise_conv3d backward: channel mismatch");
        const int ph = same_pad_leading(d.h, spec.kh, spec.sh);
        const int pw = same_pad_leading(d.w, spec.kw, spec.sw);
        const int pt = same_pad_leading(d.t, spec.kt, spec.st);
        const int c = spec.c_in;
        Grads g{Tensor<T>(x.shape()), Tensor<T>(weight.shape()),
                spec.bias ? Tensor<T>(bias.shape()) : Tensor<T>()};
        const T* xp = x.data();
        const T* wp = weight.data();
        const T* dyp = dy.data();
        T* dxp = g.dx.data();
        const std::size_t x_sn = d.sh * d.h;
        const std::size_t o_sn = o.sh * o.h;

#pragma omp parallel for collapse(2) schedule(static)
        for (int n = 0; n < d.n; ++n) {
            for (int ih = 0; ih < d.h; ++ih) {
                std::vector<T> acc(static_cast<std::size_t>(c));
                for (int iw = 0; iw < d.w; ++iw) {
                    for (int it = 0; it < d.t; ++it) {
                        std::fill(acc.begin(), acc.end(), T{});
                        for (int i = 0; i < spec.kh; ++i) {
                            const int oh_num = ih + ph - i;
                            if (oh_num < 0 || oh_num % spec.sh) continue;
                            const int oh = oh_num / spec.sh;
                            if (oh >= o.h) continue;
                            for (int j = 0; j < spec.kw; ++j) {
                                const int ow_num = iw + pw - j;
                                if (ow_num < 0 || ow_num % spec.sw) continue;
                                const int ow = ow_num / spec.sw;
                                if (ow >= o.w) continue;
                                for (int k = 0; k < spec.kt; ++k) {
                                    const int ot_num = it + pt - k;
                                    if (ot_num < 0 || ot_num % spec.st) continue;
                                    const int ot = ot_num / spec.st;
                                    if (ot >= o.t) continue;
                                    const T* dyrow = dyp + n * o_sn + oh * o.sh + ow * o.sw + ot * o.st;
                                    const T* wrow = wp + ((i * spec.kw + j) * spec.kt + k) * c;
                                    for (int cc = 0; cc < c; ++cc) acc[cc] += dyrow[cc] * wrow[cc];
                                }
                            }
                        }
                        std::copy(acc.begin(), acc.end(), dxp + n * x_sn + ih * d.sh + iw * d.sw + it * d.st);
                    }
                }
            }
        }

        T* dwp = g.dweight.data();
        const int taps = spec.kh * spec.kw * spec.kt;
#pragma omp parallel for schedule(static)
        for (int tap = 0; tap < taps; ++tap) {
            const int k = tap % spec.kt;
            const int j = (tap / spec.kt) % spec.kw;
            const int i = tap / (spec.kt * spec.kw);
            T* dwrow = dwp + tap * c;
            for (int n = 0; n < d.n; ++n) {
                for (int oh = 0; oh < o.h; ++oh) {
                    const int ih = oh * spec.sh - ph + i;
                    if (ih < 0 || ih >= d.h) continue;
                    for (int ow = 0; ow < o.w; ++ow) {
                        const int iw = ow * spec.sw - pw + j;
                        if (iw < 0 || iw >= d.w) continue;
                        for (int ot = 0; ot < o.t; ++ot) {
                            const int it = ot * spec.st - pt + k;
                            if (it < 0 || it >= d.t) continue;
                            const T* xrow = xp + n * x_sn + ih * d.sh + iw * d.sw + it * d.st;
                            const T* dyrow = dyp + n * o_sn + oh * o.sh + ow * o.sw + ot * o.st;
                            for (int cc = 0; cc < c; ++cc) dwrow[cc] += xrow[cc] * dyrow[cc];
                        }
                    }
                }
            }
        }

        if (spec.bias) {
            T* dbp = g.dbias.data();
            const std::size_t positions = dy.size() / c;
            for (std::size_t p = 0; p < positions; ++p) {
                const T* dyrow = dyp + p * c;
                for (int cc = 0; cc < c; ++cc) dbp[cc] += dyrow[cc];
            }
        }
        return g;
    }
};

// ---------------------------------------------------------------------------
// Batch normalization over the innermost (channel) axis
// ---------------------------------------------------------------------------

template <typename T>
struct BatchNorm3D {
    BatchNormSpec spec;
    Tensor<T> gamma, beta;                  // learned parameters
    Tensor<T> running_mean, running_var;    // buffers, not parameters

    explicit BatchNorm3D(const BatchNormSpec& s = {})
        : spec(s),
          gamma(Shape{static_cast<std::size_t>(s.channels)}, T{1}),
          beta(Shape{static_cast<std::size_t>(s.channels)}, T{0}),
          running_mean(Shape{static_cast<std::size_t>(s.channels)}, T{0}),
          running_var(Shape{static_cast<std::size_t>(s.channels)}, T{1}) {}

    // Train mode normalizes with batch statistics (population variance) over
    // all non-channel axes and updates the running stats; infer mode uses the
    // running stats.
    Tensor<T> forward(const Tensor<T>& x, Mode mode) {
        const int c = channels_of(x);
        const std::size_t positions = x.size() / c;
        std::vector<double> mean(c), inv_std(c);
        if (mode == Mode::Train) {
            std::vector<double> var(c);
            batch_stats(x, mean, var);
            for (int cc = 0; cc < c; ++cc) {
                inv_std[cc] = 1.0 / std::sqrt(var[cc] + spec.epsilon);
                running_mean[cc] = static_cast<T>((1.0 - spec.momentum) * running_mean[cc] +
                                                  spec.momentum * mean[cc]);
                running_var[cc] = static_cast<T>((1.0 - spec.momentum) * running_var[cc] +
                                                 spec.momentum * var[cc]);
            }
        } else {
            for (int cc = 0; cc < c; ++cc) {
                mean[cc] = static_cast<double>(running_mean[cc]);
                inv_std[cc] = 1.0 / std::sqrt(static_cast<double>(running_var[cc]) + spec.epsilon);
            }
        }
        Tensor<T> out(x.shape());
        const T* xp = x.data();
        T* op = out.data();
        std::vector<double> scale(c), shift(c);
        for (int cc = 0; cc < c; ++cc) {
            scale[cc] = static_cast<double>(gamma[cc]) * inv_std[cc];
            shift[cc] = static_cast<double>(beta[cc]) - mean[cc] * scale[cc];
        }
#pragma omp parallel for schedule(static)
        for (long long p = 0; p < static_cast<long long>(positions); ++p) {
            const T* xrow = xp + p * c;
            T* orow = op + p * c;
            for (int cc = 0; cc < c; ++cc)
                orow[cc] = static_cast<T>(xrow[cc] * scale[cc] + shift[cc]);
        }
        return out;
    }

    struct Grads {
        Tensor<T> dx, dgamma, dbeta;
    };

    Grads backward(const Tensor<T>& x, const Tensor<T>& dy, Mode mode) const {
        if (!x.same_shape(dy))
            throw std::invalid_argument("batchnorm backward: upstream shape mismatch");
        const int c = channels_of(x);
        const std::size_t positions = x.size() / c;
        const double m = static_cast<double>(positions);
        std::vector<double> mean(c), inv_std(c);
        if (mode == Mode::Train) {
            std::vector<double> var(c);
            batch_stats(x, mean, var);
            for (int cc = 0; cc < c; ++cc) inv_std[cc] = 1.0 / std::sqrt(var[cc] + spec.epsilon);
        } else {
            for (int cc = 0; cc < c; ++cc) {
                mean[cc] = static_cast<double>(running_mean[cc]);
                inv_std[cc] = 1.0 / std::sqrt(static_cast<double>(running_var[cc]) + spec.epsilon);
            }
        }

        std::vector<double> sum_dy(c, 0.0), sum_dy_xhat(c, 0.0);
        const T* xp = x.data();
        const T* dyp = dy.data();
        for (std::size_t p = 0; p < positions; ++p) {
            const T* xrow = xp + p * c;
            const T* dyrow = dyp + p * c;
            for (int cc = 0; cc < c; ++cc) {
                const double xhat = (xrow[cc] - mean[cc]) * inv_std[cc];
                sum_dy[cc] += dyrow[cc];
                sum_dy_xhat[cc] += dyrow[cc] * xhat;
            }
        }

        Grads g{Tensor<T>(x.shape()), Tensor<T>(gamma.shape()), Tensor<T>(beta.shape())};
        for (int cc = 0; cc < c; ++cc) {
            g.dgamma[cc] = static_cast<T>(sum_dy_xhat[cc]);
            g.dbeta[cc] = static_cast<T>(sum_dy[cc]);
        }
        T* dxp = g.dx.data();
        if (mode == Mode::Train) {
#pragma omp parallel for schedule(static)
            for (long long p = 0; p < static_cast<long long>(positions); ++p) {
                const T* xrow = xp + p * c;
                const T* dyrow = dyp + p * c;
                T* dxrow = dxp + p * c;
                for (int cc = 0; cc < c; ++cc) {
                    const double xhat = (xrow[cc] - mean[cc]) * inv_std[cc];
                    const double v = dyrow[cc] - sum_dy[cc] / m - xhat * sum_dy_xhat[cc] / m;
                    dxrow[cc] = static_cast<T>(static_cast<double>(gamma[cc]) * inv_std[cc] * v);
                }
            }
        } else {
#pragma omp parallel for schedule(static)
            for (long long p = 0; p < static_cast<long long>(positions); ++p) {
                const T* dyrow = dyp + p * c;
                T* dxrow = dxp + p * c;
                for (int cc = 0; cc < c; ++cc)
                    dxrow[cc] = static_cast<T>(dyrow[cc] * static_cast<double>(gamma[cc]) * inv_std[cc]);
            }
        }
        return g;
    }

private:
    int channels_of(const Tensor<T>& x) const {
        if (x.rank() < 2) throw std::invalid_argument("batchnorm: rank must be >= 2");
        const int c = static_cast<int>(x.extent(x.rank() - 1));
        if (c != spec.channels)
            throw std::invalid_argument("batchnorm: input has " + std::to_string(c) + " channels, spec wants " +
                                        std::to_string(spec.channels));
        return c;
    }

    void batch_stats(const Tensor<T>& x, std::vector<double>& mean, std::vector<double>& var) const {
        const int c = spec.channels;
        const std::size_t positions = x.size() / c;
        std::vector<double> sum(c, 0.0), sumsq(c, 0.0);
        const T* xp = x.data();
        for (std::size_t p = 0; p < positions; ++p) {
            const T* row = xp + p * c;
            for (int cc = 0; cc < c; ++cc) {
                const double v = row[cc];
                sum[cc] += v;
                sumsq[cc] += v * v;
            }
        }
        const double m = static_cast<double>(positions);
        for (int cc = 0; cc < c; ++cc) {
            mean[cc] = sum[cc] / m;
            var[cc] = std::max(sumsq[cc] / m - mean[cc] * mean[cc], 0.0);
        }
    }
};

// ---------------------------------------------------------------------------
// Max pooling, SAME ceil-mode, padding value -inf
// ---------------------------------------------------------------------------

template <typename T>
struct MaxPool3D {
    PoolSpec spec;

    Tensor<T> forward(const Tensor<T>& x) const {
        const auto d = detail::dims5(x, "maxpool3d");
        const int OH = same_out_extent(d.h, spec.sh);
        const int OW = same_out_extent(d.w, spec.sw);
        const int OT = same_out_extent(d.t, spec.st);
        const int ph = same_pad_leading(d.h, spec.kh, spec.sh);
        const int pw = same_pad_leading(d.w, spec.kw, spec.sw);
        const int pt = same_pad_leading(d.t, spec.kt, spec.st);
        const int c = d.c;
        Tensor<T> out(Shape{static_cast<std::size_t>(d.n), static_cast<std::size_t>(OH),
                            static_cast<std::size_t>(OW), static_cast<std::size_t>(OT),
                            static_cast<std::size_t>(c)});
        const T* xp = x.data();
        T* op = out.data();
        const std::size_t x_sn = d.sh * d.h;
        const std::size_t o_st = static_cast<std::size_t>(c);
        const std::size_t o_sw = o_st * OT;
        const std::size_t o_sh = o_sw * OW;
        const std::size_t o_sn = o_sh * OH;

#pragma omp parallel for collapse(2) schedule(static)
        for (int n = 0; n < d.n; ++n) {
            for (int oh = 0; oh < OH; ++oh) {
                std::vector<T> acc(static_cast<std::size_t>(c));
                const int ih0 = oh * spec.sh - ph;
                const int i_lo = std::max(0, -ih0);
                const int i_hi = std::min(spec.kh, d.h - ih0);
                for (int ow = 0; ow < OW; ++ow) {
                    const int iw0 = ow * spec.sw - pw;
                    const int j_lo = std::max(0, -iw0);
                    const int j_hi = std::min(spec.kw, d.w - iw0);
                    for (int ot = 0; ot < OT; ++ot) {
                        const int it0 = ot * spec.st - pt;
                        const int k_lo = std::max(0, -it0);
                        const int k_hi = std::min(spec.kt, d.t - it0);
                        std::fill(acc.begin(), acc.end(), -std::numeric_limits<T>::infinity());
                        for (int i = i_lo; i < i_hi; ++i)
                            for (int j = j_lo; j < j_hi; ++j)
                                for (int k = k_lo; k < k_hi; ++k) {
                                    const T* xrow = xp + n * x_sn + (ih0 + i) * d.sh + (iw0 + j) * d.sw +
                                                    (it0 + k) * d.st;
                                    for (int cc = 0; cc < c; ++cc) acc[cc] = std::max(acc[cc], xrow[cc]);
                                }
                        std::copy(acc.begin(), acc.end(), op + n * o_sn + oh * o_sh + ow * o_sw + ot * o_st);
                    }
                }
            }
        }
        return out;
    }

    // Routes each window's gradient to the first maximum in scan order.
    Tensor<T> backward(const Tensor<T>& x, const Tensor<T>& dy) const {
        const auto d = detail::dims5(x, "maxpool3d");
        const auto o = detail::dims5(dy, "maxpool3d upstream");
        const int ph = same_pad_leading(d.h, spec.kh, spec.sh);
        const int pw = same_pad_leading(d.w, spec.kw, spec.sw);
        const int pt = same_pad_leading(d.t, spec.kt, spec.st);
        const int c = d.c;
        if (o.c != c) throw std::invalid_argument("maxpool3d backward: channel mismatch");
        Tensor<T> dx(x.shape());
        const T* xp = x.data();
        const T* dyp = dy.data();
        T* dxp = dx.data();
        const std::size_t x_sn = d.sh * d.h;
        const std::size_t o_sn = o.sh * o.h;

#pragma omp parallel for schedule(static)
        for (int n = 0; n < d.n; ++n) {
            for (int oh = 0; oh < o.h; ++oh) {
                const int ih0 = oh * spec.sh - ph;
                const int i_lo = std::max(0, -ih0);
                const int i_hi = std::min(spec.kh, d.h - ih0);
                for (int ow = 0; ow < o.w; ++ow) {
                    const int iw0 = ow * spec.sw - pw;
                    const int j_lo = std::max(0, -iw0);
                    const int j_hi = std::min(spec.kw, d.w - iw0);
                    for (int ot = 0; ot < o.t; ++ot) {
                        const int it0 = ot * spec.st - pt;
                        const int k_lo = std::max(0, -it0);
                        const int k_hi = std::min(spec.kt, d.t - it0);
                        const T* dyrow = dyp + n * o_sn + oh * o.sh + ow * o.sw + ot * o.st;
                        for (int cc = 0; cc < c; ++cc) {
                            T best = -std::numeric_limits<T>::infinity();
                            std::size_t best_off = 0;
                            for (int i = i_lo; i < i_hi; ++i)
                                for (int j = j_lo; j < j_hi; ++j)
                                    for (int k = k_lo; k < k_hi; ++k) {
                                        const std::size_t off = n * x_sn + (ih0 + i) * d.sh +
                                                                (iw0 + j) * d.sw + (it0 + k) * d.st + cc;
                                        if (xp[off] > best) {
                                            best = xp[off];
                                            best_off = off;
                                        }
                                    }
                            dxp[best_off] += dyrow[cc];
                        }
                    }
                }
            }
        }
        return dx;
    }
};

// ---------------------------------------------------------------------------
// Global average pooling, dense, softmax, relu
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
    const auto d = detail::dims5(x, "global_avg_pool");
    Tensor<T> out(Shape{static_cast<std::size_t>(d.n), static_cast<std::size_t>(d.c)});
    const std::size_t per_n = static_cast<std::size_t>(d.h) * d.w * d.t;
    const T* xp = x.data();
    for (int n = 0; n < d.n; ++n) {
        std::vector<double> acc(static_cast<std::size_t>(d.c), 0.0);
        const T* base = xp + n * per_n * d.c;
        for (std::size_t p = 0; p < per_n; ++p)
            for (int cc = 0; cc < d.c; ++cc) acc[cc] += base[p * d.c + cc];
        for (int cc = 0; cc < d.c; ++cc)
            out[static_cast<std::size_t>(n) * d.c + cc] = static_cast<T>(acc[cc] / static_cast<double>(per_n));
    }
    return out;
}

template <typename T>
Tensor<T> global_avg_pool_backward(const Shape& in_shape, const Tensor<T>& dy) {
    Tensor<T> dx(in_shape);
    const auto d = detail::dims5(dx, "global_avg_pool backward");
    const std::size_t per_n = static_cast<std::size_t>(d.h) * d.w * d.t;
    const T inv = static_cast<T>(1.0 / static_cast<double>(per_n));
    T* dxp = dx.data();
    for (int n = 0; n < d.n; ++n) {
        const T* dyrow = dy.data() + static_cast<std::size_t>(n) * d.c;
        T* base = dxp + n * per_n * d.c;
        for (std::size_t p = 0; p < per_n; ++p)
            for (int cc = 0; cc < d.c; ++cc) base[p * d.c + cc] = dyrow[cc] * inv;
    }
    return dx;
}

template <typename T>
struct Dense {
    DenseSpec spec;
    Tensor<T> weight;  // [in,out]
    Tensor<T> bias;    // [out]

    explicit Dense(const DenseSpec& s = {})
        : spec(s),
          weight(Shape{static_cast<std::size_t>(s.in_features), static_cast<std::size_t>(s.out_features)}),
          bias(s.bias ? Tensor<T>(Shape{static_cast<std::size_t>(s.out_features)}) : Tensor<T>()) {}

    Tensor<T> forward(const Tensor<T>& x) const {
        if (x.rank() != 2 || static_cast<int>(x.extent(1)) != spec.in_features)
            throw std::invalid_argument("dense: expected [N," + std::to_string(spec.in_features) + "] input");
        Tensor<T> out = matmul(x, weight);
        if (spec.bias) {
            const std::size_t n = out.extent(0), f = out.extent(1);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < f; ++j) out[i * f + j] += bias[j];
        }
        return out;
    }

    struct Grads {
        Tensor<T> dx, dweight, dbias;
    };

    Grads backward(const Tensor<T>& x, const Tensor<T>& dy) const {
        const std::size_t n = x.extent(0);
        const std::size_t fi = static_cast<std::size_t>(spec.in_features);
        const std::size_t fo = static_cast<std::size_t>(spec.out_features);
        if (dy.rank() != 2 || dy.extent(0) != n || dy.extent(1) != fo)
            throw std::invalid_argument("dense backward: upstream shape mismatch");
        Grads g{Tensor<T>(x.shape()), Tensor<T>(weight.shape()),
                spec.bias ? Tensor<T>(bias.shape()) : Tensor<T>()};
        // dW = x^T dy, accumulated over rows in ascending order
        for (std::size_t r = 0; r < n; ++r) {
            const T* xrow = x.data() + r * fi;
            const T* dyrow = dy.data() + r * fo;
            for (std::size_t i = 0; i < fi; ++i) {
                T* dwrow = g.dweight.data() + i * fo;
                const T xv = xrow[i];
                for (std::size_t j = 0; j < fo; ++j) dwrow[j] += xv * dyrow[j];
            }
            if (spec.bias)
                for (std::size_t j = 0; j < fo; ++j) g.dbias[j] += dyrow[j];
            T* dxrow = g.dx.data() + r * fi;
            for (std::size_t i = 0; i < fi; ++i) {
                const T* wrow = weight.data() + i * fo;
                T s{};
                for (std::size_t j = 0; j < fo; ++j) s += dyrow[j] * wrow[j];
                dxrow[i] = s;
            }
        }
        return g;
    }
};

/// Row softmax with max subtraction.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& logits) {
    if (logits.rank() != 2) throw std::invalid_argument("softmax: expected rank-2 logits");
    const std::size_t n = logits.extent(0), f = logits.extent(1);
    Tensor<T> out(logits.shape());
    for (std::size_t i = 0; i < n; ++i) {
        const T* row = logits.data() + i * f;
        T* orow = out.data() + i * f;
        T mx = row[0];
        for (std::size_t j = 1; j < f; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (std::size_t j = 0; j < f; ++j) {
            const double e = std::exp(static_cast<double>(row[j] - mx));
            orow[j] = static_cast<T>(e);
            sum += e;
        }
        for (std::size_t j = 0; j < f; ++j) orow[j] = static_cast<T>(orow[j] / sum);
    }
    return out;
}

/// d(logits) given softmax output and upstream d(probs).
template <typename T>
Tensor<T> softmax_backward(const Tensor<T>& probs, const Tensor<T>& dprobs) {
    if (!probs.same_shape(dprobs)) throw std::invalid_argument("softmax backward: shape mismatch");
    const std::size_t n = probs.extent(0), f = probs.extent(1);
    Tensor<T> dz(probs.shape());
    for (std::size_t i = 0; i < n; ++i) {
        const T* p = probs.data() + i * f;
        const T* dp = dprobs.data() + i * f;
        T* o = dz.data() + i * f;
        T dot{};
        for (std::size_t j = 0; j < f; ++j) dot += p[j] * dp[j];
        for (std::size_t j = 0; j < f; ++j) o[j] = p[j] * (dp[j] - dot);
    }
    return dz;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
    Tensor<T> out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > T{} ? x[i] : T{};
    return out;
}

/// ReLU gradient using the activation output as the mask.
template <typename T>
Tensor<T> relu_backward(const Tensor<T>& y, const Tensor<T>& dy) {
    if (!y.same_shape(dy)) throw std::invalid_argument("relu backward: shape mismatch");
    Tensor<T> dx(y.shape());
    for (std::size_t i = 0; i < y.size(); ++i) dx[i] = y[i] > T{} ? dy[i] : T{};
    return dx;
}

// ---------------------------------------------------------------------------
// Depthwise-separable composite: depthwise(+bias) -> BN -> ReLU ->
// pointwise 1x1x1(+bias). Stride lives on the depthwise stage; output extents
// match the equivalent standard conv.
// ---------------------------------------------------------------------------

template <typename T>
struct DwsConv3D {
    Conv3DSpec spec;  // geometry of the standard conv being replaced
    DepthwiseConv3D<T> dw;
    BatchNorm3D<T> mid_bn;
    Conv3D<T> pw;

    explicit DwsConv3D(const Conv3DSpec& s = {})
        : spec(s),
          dw(s),
          mid_bn(BatchNormSpec{s.c_in}),
          pw(Conv3DSpec{1, 1, 1, s.c_in, s.c_out, 1, 1, 1, s.bias}) {}

    struct Cache {
        Tensor<T> dw_out;  // depthwise output, batch norm input
        Tensor<T> act;     // post-ReLU, pointwise input
    };

    Tensor<T> forward(const Tensor<T>& x, Mode mode, Cache* cache = nullptr) {
        Tensor<T> dw_out = dw.forward(x);
        Tensor<T> act = relu(mid_bn.forward(dw_out, mode));
        Tensor<T> out = pw.forward(act);
        if (cache) {
            cache->dw_out = std::move(dw_out);
            cache->act = std::move(act);
        }
        return out;
    }

    struct Grads {
        Tensor<T> dx;
        Tensor<T> dw_weight, dw_bias;
        Tensor<T> mid_gamma, mid_beta;
        Tensor<T> pw_weight, pw_bias;
    };

    Grads backward(const Tensor<T>& x, const Cache& cache, const Tensor<T>& dy, Mode mode) const {
        auto pw_g = pw.backward(cache.act, dy);
        Tensor<T> d_bn_out = relu_backward(cache.act, pw_g.dx);
        auto bn_g = mid_bn.backward(cache.dw_out, d_bn_out, mode);
        auto dw_g = dw.backward(x, bn_g.dx);
        return Grads{std::move(dw_g.dx),     std::move(dw_g.dweight), std::move(dw_g.dbias),
                     std::move(bn_g.dgamma), std::move(bn_g.dbeta),   std::move(pw_g.dweight),
                     std::move(pw_g.dbias)};
    }
};

}  // namespace pbbn
