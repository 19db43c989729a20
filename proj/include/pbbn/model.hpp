#pragma once

#include <cstdint>
#include <functional>
#include <iomanip>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "pbbn/layers.hpp"
#include "pbbn/tensor.hpp"

namespace pbbn {

// ---------------------------------------------------------------------------
// Network recipe
// ---------------------------------------------------------------------------

struct PbbnConfig {
    int pyramids = 2;
    int branches = 2;
    int base_channels = 64;
    int input_h = 96;
    int input_w = 96;
    int frames = 13;
    int channels = 3;
    bool dws = false;
    static constexpr int num_classes = 2;

    void validate() const {
        if (pyramids < 1 || branches < 1 || base_channels < 1 || frames < 1 || channels < 1)
            throw std::invalid_argument("config: pyramids, branches, base_channels, frames, channels must be >= 1");
        const int floor_px = 3 << pyramids;  // 2^P * 3
        if (input_h < floor_px || input_w < floor_px)
            throw std::invalid_argument("config: input " + std::to_string(input_h) + "x" + std::to_string(input_w) +
                                        " below the spatial floor " + std::to_string(floor_px) + " for " +
                                        std::to_string(pyramids) + " pyramids");
    }

    // Channel schedule: pyramid p maps K*2^(p-2) -> K*2^(p-1) channels
    // (pyramid 1 maps K -> K).
    int pyramid_c_in(int p) const { return p == 1 ? base_channels : base_channels << (p - 2); }
    int pyramid_c_out(int p) const { return base_channels << (p - 1); }

    bool operator==(const PbbnConfig&) const = default;
};

/// Flat key-value text form, one `key=value` per line; embedded verbatim in
/// checkpoints.
inline std::string config_to_kv(const PbbnConfig& c) {
    std::ostringstream os;
    os << "pyramids=" << c.pyramids << "\nbranches=" << c.branches << "\ndws=" << (c.dws ? 1 : 0)
       << "\nbase_channels=" << c.base_channels << "\ninput_h=" << c.input_h << "\ninput_w=" << c.input_w
       << "\nframes=" << c.frames << "\nchannels=" << c.channels << "\n";
    return os.str();
}

inline PbbnConfig config_from_kv(const std::string& text) {
    PbbnConfig c;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw std::invalid_argument("config: bad line '" + line + "'");
        const std::string key = line.substr(0, eq);
        const int value = std::stoi(line.substr(eq + 1));
        if (key == "pyramids") c.pyramids = value;
        else if (key == "branches") c.branches = value;
        else if (key == "dws") c.dws = value != 0;
        else if (key == "base_channels") c.base_channels = value;
        else if (key == "input_h") c.input_h = value;
        else if (key == "input_w") c.input_w = value;
        else if (key == "frames") c.frames = value;
        else if (key == "channels") c.channels = value;
        else throw std::invalid_argument("config: unknown key '" + key + "'");
    }
    c.validate();
    return c;
}

// ---------------------------------------------------------------------------
// Structural enumeration shared by the builder and the closed-form plan
// ---------------------------------------------------------------------------

struct BranchConvPlan {
    Conv3DSpec conv;
    bool relu_after;  // ReLU after the conv's BN (all but the branch's last)
};

/// Branch l of a pyramid holds l convs with spatial kernels
/// (2l-1), (2l-3), ..., 1 and temporal kernel 3; the first maps c_in->c_out,
/// the rest c_out->c_out; only the last conv strides 2x2x1.
inline std::vector<BranchConvPlan> branch_plan(const PbbnConfig& cfg, int pyramid, int branch) {
    const int c_in = cfg.pyramid_c_in(pyramid);
    const int c_out = cfg.pyramid_c_out(pyramid);
    std::vector<BranchConvPlan> plan;
    for (int i = 0; i < branch; ++i) {
        const int k = 2 * (branch - i) - 1;
        const bool last = i == branch - 1;
        Conv3DSpec s;
        s.kh = s.kw = k;
        s.kt = 3;
        s.c_in = i == 0 ? c_in : c_out;
        s.c_out = c_out;
        s.sh = s.sw = last ? 2 : 1;
        s.st = 1;
        s.bias = true;
        plan.push_back({s, !last});
    }
    return plan;
}

inline Conv3DSpec input_conv_spec(const PbbnConfig& cfg) {
    Conv3DSpec s;
    s.kh = s.kw = s.kt = 3;
    s.c_in = cfg.channels;
    s.c_out = cfg.base_channels;
    s.sh = s.sw = 1;
    s.st = 2;
    s.bias = true;
    return s;
}

inline PoolSpec input_pool_spec() { return PoolSpec{3, 3, 3, 1, 1, 2}; }

// ---------------------------------------------------------------------------
// Per-layer report
// ---------------------------------------------------------------------------

struct LayerRow {
    std::string block;
    std::string layer;
    std::string filters;
    std::string stride;
    std::string output;
    long long params = 0;
    long long macs = 0;
};

struct ModelReport {
    std::vector<LayerRow> rows;
    long long total_params = 0;
    long long total_macs = 0;
};

namespace detail {

inline std::string dims_string(std::initializer_list<long long> dims) {
    std::ostringstream os;
    bool first = true;
    for (long long d : dims) {
        if (!first) os << 'x';
        os << d;
        first = false;
    }
    return os.str();
}

inline std::string conv_filter_string(const Conv3DSpec& s) {
    return dims_string({s.kh, s.kw, s.kt, s.c_in, s.c_out});
}

inline std::string stride_string(int sh, int sw, int st) { return dims_string({sh, sw, st}); }

struct ShapeCursor {
    int h, w, t, c;
    std::string str() const { return dims_string({h, w, t, c}); }
    void apply_conv(const Conv3DSpec& s) {
        const OutExtents o = conv_out_extents(h, w, t, s);
        h = o.h;
        w = o.w;
        t = o.t;
        c = s.c_out;
    }
    void apply_pool(const PoolSpec& s) {
        h = same_out_extent(h, s.sh);
        w = same_out_extent(w, s.sw);
        t = same_out_extent(t, s.st);
    }
};

}  // namespace detail

/// Expands the recipe into a Table-style layer listing with exact parameter
/// and MAC counts, computed in closed form without building any tensors.
inline ModelReport make_plan(const PbbnConfig& cfg) {
    cfg.validate();
    using detail::ShapeCursor;
    ModelReport rep;
    auto add = [&rep](LayerRow row) {
        rep.total_params += row.params;
        rep.total_macs += row.macs;
        rep.rows.push_back(std::move(row));
    };

    ShapeCursor cur{cfg.input_h, cfg.input_w, cfg.frames, cfg.channels};

    const Conv3DSpec in_spec = input_conv_spec(cfg);
    {
        const long long macs = conv_mac_count(in_spec, cur.h, cur.w, cur.t);
        cur.apply_conv(in_spec);
        add({"Input", "3DConv", detail::conv_filter_string(in_spec),
             detail::stride_string(in_spec.sh, in_spec.sw, in_spec.st), cur.str(), conv_param_count(in_spec),
             macs});
        add({"Input", "BN", "-", "-", cur.str(), batchnorm_param_count(in_spec.c_out), 0});
        add({"Input", "ReLU", "-", "-", cur.str(), 0, 0});
        const PoolSpec pool = input_pool_spec();
        cur.apply_pool(pool);
        add({"Input", "MaxPool", detail::dims_string({pool.kh, pool.kw, pool.kt}),
             detail::stride_string(pool.sh, pool.sw, pool.st), cur.str(), 0, 0});
    }

    for (int p = 1; p <= cfg.pyramids; ++p) {
        ShapeCursor merged{};
        for (int b = 1; b <= cfg.branches; ++b) {
            const std::string block = "P" + std::to_string(p) + "-B" + std::to_string(b);
            ShapeCursor bc = cur;
            for (const BranchConvPlan& u : branch_plan(cfg, p, b)) {
                const Conv3DSpec& s = u.conv;
                const std::string stride = detail::stride_string(s.sh, s.sw, s.st);
                if (cfg.dws) {
                    long long macs = depthwise_mac_count(s, bc.h, bc.w, bc.t);
                    ShapeCursor mid = bc;
                    mid.apply_conv(s);
                    mid.c = s.c_in;  // depthwise keeps the channel count
                    add({block, "DWConv", detail::dims_string({s.kh, s.kw, s.kt, s.c_in}), stride, mid.str(),
                         depthwise_param_count(s, true), macs});
                    add({block, "BN", "-", "-", mid.str(), batchnorm_param_count(s.c_in), 0});
                    add({block, "ReLU", "-", "-", mid.str(), 0, 0});
                    macs = pointwise_mac_count(s, bc.h, bc.w, bc.t);
                    bc.apply_conv(s);
                    add({block, "PWConv", detail::dims_string({1, 1, 1, s.c_in, s.c_out}), "1x1x1", bc.str(),
                         pointwise_param_count(s, true), macs});
                } else {
                    const long long macs = conv_mac_count(s, bc.h, bc.w, bc.t);
                    bc.apply_conv(s);
                    add({block, "3DConv", detail::conv_filter_string(s), stride, bc.str(),
                         conv_param_count(s), macs});
                }
                add({block, "BN", "-", "-", bc.str(), batchnorm_param_count(s.c_out), 0});
                if (u.relu_after) add({block, "ReLU", "-", "-", bc.str(), 0, 0});
            }
            if (b > 1 && (bc.h != merged.h || bc.w != merged.w || bc.t != merged.t || bc.c != merged.c))
                throw std::logic_error("plan: branch output shapes disagree in pyramid " + std::to_string(p));
            merged = bc;
        }
        add({"Add", "ADD", "-", "-", merged.str(), 0, 0});
        add({"Add", "ReLU", "-", "-", merged.str(), 0, 0});
        cur = merged;
    }

    add({"Output", "AvgPool", detail::dims_string({cur.h, cur.w, cur.t}), "-",
         detail::dims_string({1, 1, 1, cur.c}), 0, 0});
    const DenseSpec fc{cur.c, PbbnConfig::num_classes, true};
    add({"Output", "FC", detail::dims_string({1, cur.c}), "-", std::to_string(PbbnConfig::num_classes),
         dense_param_count(fc), dense_mac_count(fc)});
    return rep;
}

inline std::string render_report(const ModelReport& rep) {
    std::size_t wb = 5, wl = 7, wf = 7, ws = 6, wo = 6;
    for (const LayerRow& r : rep.rows) {
        wb = std::max(wb, r.block.size());
        wl = std::max(wl, r.layer.size());
        wf = std::max(wf, r.filters.size());
        ws = std::max(ws, r.stride.size());
        wo = std::max(wo, r.output.size());
    }
    std::ostringstream os;
    os << std::left << std::setw(static_cast<int>(wb + 2)) << "Block" << std::setw(static_cast<int>(wl + 2))
       << "Layer" << std::setw(static_cast<int>(wf + 2)) << "Filters" << std::setw(static_cast<int>(ws + 2))
       << "Stride" << std::setw(static_cast<int>(wo + 2)) << "Output" << std::right << std::setw(12) << "Params"
       << std::setw(16) << "MACs" << "\n";
    for (const LayerRow& r : rep.rows) {
        os << std::left << std::setw(static_cast<int>(wb + 2)) << r.block << std::setw(static_cast<int>(wl + 2))
           << r.layer << std::setw(static_cast<int>(wf + 2)) << r.filters << std::setw(static_cast<int>(ws + 2))
           << r.stride << std::setw(static_cast<int>(wo + 2)) << r.output << std::right << std::setw(12)
           << r.params << std::setw(16) << r.macs << "\n";
    }
    os << "Total params: " << rep.total_params << "\nTotal MACs:   " << rep.total_macs << "\n";
    return os.str();
}

// ---------------------------------------------------------------------------
// Built model
// ---------------------------------------------------------------------------

/// One conv step of a branch (or the input block): standard or DWS conv,
/// followed by batch norm and an optional ReLU.
template <typename T>
struct ConvUnit {
    bool dws = false;
    bool relu_after = false;
    Conv3DSpec spec;
    Conv3D<T> conv;
    DwsConv3D<T> dws_conv;
    BatchNorm3D<T> bn;
};

template <typename T>
struct UnitCache {
    Tensor<T> x;
    typename DwsConv3D<T>::Cache dws;
    Tensor<T> conv_out;
    Tensor<T> out;
};

template <typename T>
struct UnitGrads {
    Tensor<T> conv_weight, conv_bias;                                  // standard path
    Tensor<T> dw_weight, dw_bias, mid_gamma, mid_beta, pw_weight, pw_bias;  // dws path
    Tensor<T> bn_gamma, bn_beta;
};

template <typename T>
struct Tape {
    UnitCache<T> input_unit;
    Tensor<T> pool_out;
    struct PyramidTape {
        std::vector<std::vector<UnitCache<T>>> units;  // [branch][step]
        Tensor<T> merged;                              // post-Add, post-ReLU
    };
    std::vector<PyramidTape> pyramids;
    Tensor<T> gap_out;
    Tensor<T> logits;
};

template <typename T>
struct ModelGrads {
    UnitGrads<T> input_unit;
    std::vector<std::vector<std::vector<UnitGrads<T>>>> pyramids;  // [p][b][step]
    Tensor<T> fc_weight, fc_bias;
};

using ShapeTrace = std::vector<std::pair<std::string, Shape>>;

namespace detail {

inline double unit_scale(std::uint64_t bits) { return static_cast<double>(bits >> 11) * 0x1.0p-53; }

template <typename T>
void he_uniform_fill(Tensor<T>& t, int fan_in, std::mt19937_64& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
    for (std::size_t i = 0; i < t.size(); ++i)
        t[i] = static_cast<T>((2.0 * unit_scale(rng()) - 1.0) * limit);
}

}  // namespace detail

template <typename T>
class Model {
public:
    PbbnConfig config;
    ConvUnit<T> input_unit;
    MaxPool3D<T> input_pool;
    std::vector<std::vector<std::vector<ConvUnit<T>>>> pyramids;  // [p][b][step]
    Dense<T> fc;

    /// He-uniform (fan-in) initialized model; deterministic given the seed.
    static Model build(const PbbnConfig& cfg, std::uint64_t seed = 0) {
        cfg.validate();
        Model m;
        m.config = cfg;
        std::mt19937_64 rng(seed);

        const Conv3DSpec in_spec = input_conv_spec(cfg);
        m.input_unit = make_unit(in_spec, /*dws=*/false, /*relu_after=*/true, rng);
        m.input_pool.spec = input_pool_spec();

        m.pyramids.resize(cfg.pyramids);
        Shape branch_out_shape;
        for (int p = 1; p <= cfg.pyramids; ++p) {
            auto& pyramid = m.pyramids[p - 1];
            pyramid.resize(cfg.branches);
            for (int b = 1; b <= cfg.branches; ++b) {
                for (const BranchConvPlan& u : branch_plan(cfg, p, b))
                    pyramid[b - 1].push_back(make_unit(u.conv, cfg.dws, u.relu_after, rng));
            }
        }
        // branch shape agreement is structural; verify via the plan, which
        // throws on any disagreement
        (void)make_plan(cfg);

        const DenseSpec fc_spec{cfg.pyramid_c_out(cfg.pyramids), PbbnConfig::num_classes, true};
        m.fc = Dense<T>(fc_spec);
        detail::he_uniform_fill(m.fc.weight, fc_spec.in_features, rng);

        (void)branch_out_shape;
        return m;
    }

    /// Forward pass; returns class probabilities [N,2]. A tape is required
    /// for backward; a trace records every layer's realized output shape.
    Tensor<T> forward(const Tensor<T>& x, Mode mode, Tape<T>* tape = nullptr, ShapeTrace* trace = nullptr) {
        check_input(x);
        auto record = [trace](const std::string& name, const Tensor<T>& t) {
            if (trace) trace->emplace_back(name, t.shape());
        };

        UnitCache<T> local;
        UnitCache<T>* ic = tape ? &tape->input_unit : &local;
        Tensor<T> h = unit_forward(input_unit, x, mode, ic, trace ? "input" : "", trace);
        h = input_pool.forward(h);
        record("input.pool", h);
        if (tape) tape->pool_out = h;
        if (tape) tape->pyramids.resize(pyramids.size());

        for (std::size_t pi = 0; pi < pyramids.size(); ++pi) {
            auto& pyramid = pyramids[pi];
            typename Tape<T>::PyramidTape* pt = tape ? &tape->pyramids[pi] : nullptr;
            if (pt) pt->units.resize(pyramid.size());
            Tensor<T> sum;
            for (std::size_t bi = 0; bi < pyramid.size(); ++bi) {
                Tensor<T> bh = h;
                for (std::size_t ui = 0; ui < pyramid[bi].size(); ++ui) {
                    UnitCache<T>* uc = nullptr;
                    if (pt) {
                        pt->units[bi].resize(pyramid[bi].size());
                        uc = &pt->units[bi][ui];
                    }
                    UnitCache<T> scratch;
                    const std::string name = "p" + std::to_string(pi + 1) + ".b" + std::to_string(bi + 1) +
                                             ".u" + std::to_string(ui + 1);
                    bh = unit_forward(pyramid[bi][ui], bh, mode, uc ? uc : &scratch, name, trace);
                }
                if (bi == 0) {
                    sum = std::move(bh);
                } else {
                    if (!sum.same_shape(bh))
                        throw std::logic_error("forward: branch output shapes disagree");
                    for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += bh[i];
                }
            }
            h = relu(sum);
            record("p" + std::to_string(pi + 1) + ".add_relu", h);
            if (pt) pt->merged = h;
        }

        Tensor<T> gap = global_avg_pool(h);
        record("gap", gap);
        if (tape) tape->gap_out = gap;
        Tensor<T> logits = fc.forward(gap);
        record("fc", logits);
        if (tape) tape->logits = logits;
        return softmax_rows(logits);
    }

    /// Gradients of everything from d(loss)/d(logits), consuming a tape from
    /// a train-mode forward.
    ModelGrads<T> backward(const Tensor<T>& x, const Tape<T>& tape, const Tensor<T>& dlogits,
                           Mode mode = Mode::Train) {
        ModelGrads<T> g;
        g.pyramids.resize(pyramids.size());

        auto fc_g = fc.backward(tape.gap_out, dlogits);
        g.fc_weight = std::move(fc_g.dweight);
        g.fc_bias = std::move(fc_g.dbias);

        const Tensor<T>& last_merged = tape.pyramids.back().merged;
        Tensor<T> dh = global_avg_pool_backward(last_merged.shape(), fc_g.dx);

        for (std::size_t pi = pyramids.size(); pi-- > 0;) {
            auto& pyramid = pyramids[pi];
            const auto& pt = tape.pyramids[pi];
            g.pyramids[pi].resize(pyramid.size());
            Tensor<T> d_sum = relu_backward(pt.merged, dh);
            Tensor<T> d_in;
            for (std::size_t bi = 0; bi < pyramid.size(); ++bi) {
                g.pyramids[pi][bi].resize(pyramid[bi].size());
                Tensor<T> d = d_sum;
                for (std::size_t ui = pyramid[bi].size(); ui-- > 0;) {
                    d = unit_backward(pyramid[bi][ui], pt.units[bi][ui], d, mode,
                                      g.pyramids[pi][bi][ui]);
                }
                if (bi == 0) d_in = std::move(d);
                else
                    for (std::size_t i = 0; i < d_in.size(); ++i) d_in[i] += d[i];
            }
            dh = std::move(d_in);
        }

        Tensor<T> d_pool_in = input_pool.backward(tape.input_unit.out, dh);
        unit_backward(input_unit, tape.input_unit, d_pool_in, mode, g.input_unit);
        (void)x;
        return g;
    }

    /// Deterministic traversal of learned parameters; `grads` may be null.
    /// The visitor gets (name, param, grad-or-null).
    template <typename F>
    void visit_params(ModelGrads<T>* grads, F&& f) {
        visit_unit_params(input_unit, grads ? &grads->input_unit : nullptr, "input", f);
        for (std::size_t pi = 0; pi < pyramids.size(); ++pi)
            for (std::size_t bi = 0; bi < pyramids[pi].size(); ++bi)
                for (std::size_t ui = 0; ui < pyramids[pi][bi].size(); ++ui) {
                    const std::string base = "p" + std::to_string(pi + 1) + ".b" + std::to_string(bi + 1) +
                                             ".u" + std::to_string(ui + 1);
                    UnitGrads<T>* ug = grads ? &grads->pyramids[pi][bi][ui] : nullptr;
                    visit_unit_params(pyramids[pi][bi][ui], ug, base, f);
                }
        f("fc.weight", fc.weight, grads ? &grads->fc_weight : nullptr);
        f("fc.bias", fc.bias, grads ? &grads->fc_bias : nullptr);
    }

    /// Running batch-norm statistics, in the same traversal order.
    template <typename F>
    void visit_buffers(F&& f) {
        visit_unit_buffers(input_unit, "input", f);
        for (std::size_t pi = 0; pi < pyramids.size(); ++pi)
            for (std::size_t bi = 0; bi < pyramids[pi].size(); ++bi)
                for (std::size_t ui = 0; ui < pyramids[pi][bi].size(); ++ui) {
                    const std::string base = "p" + std::to_string(pi + 1) + ".b" + std::to_string(bi + 1) +
                                             ".u" + std::to_string(ui + 1);
                    visit_unit_buffers(pyramids[pi][bi][ui], base, f);
                }
    }

    long long param_count() {
        long long n = 0;
        visit_params(nullptr, [&n](const std::string&, Tensor<T>& p, Tensor<T>*) {
            n += static_cast<long long>(p.size());
        });
        return n;
    }

private:
    static ConvUnit<T> make_unit(const Conv3DSpec& spec, bool dws, bool relu_after, std::mt19937_64& rng) {
        ConvUnit<T> u;
        u.dws = dws;
        u.relu_after = relu_after;
        u.spec = spec;
        if (dws) {
            u.dws_conv = DwsConv3D<T>(spec);
            detail::he_uniform_fill(u.dws_conv.dw.weight, spec.kh * spec.kw * spec.kt, rng);
            detail::he_uniform_fill(u.dws_conv.pw.weight, spec.c_in, rng);
        } else {
            u.conv = Conv3D<T>(spec);
            detail::he_uniform_fill(u.conv.weight, spec.kh * spec.kw * spec.kt * spec.c_in, rng);
        }
        u.bn = BatchNorm3D<T>(BatchNormSpec{spec.c_out});
        return u;
    }

    static Tensor<T> unit_forward(ConvUnit<T>& u, const Tensor<T>& x, Mode mode, UnitCache<T>* cache,
                                  const std::string& name, ShapeTrace* trace) {
        cache->x = x;
        Tensor<T> conv_out = u.dws ? u.dws_conv.forward(x, mode, &cache->dws) : u.conv.forward(x);
        if (trace && !name.empty()) trace->emplace_back(name + (u.dws ? ".dwsconv" : ".conv"), conv_out.shape());
        Tensor<T> bn_out = u.bn.forward(conv_out, mode);
        cache->conv_out = std::move(conv_out);
        Tensor<T> out = u.relu_after ? relu(bn_out) : std::move(bn_out);
        if (trace && !name.empty()) trace->emplace_back(name + ".bn_out", out.shape());
        cache->out = out;
        return out;
    }

    static Tensor<T> unit_backward(ConvUnit<T>& u, const UnitCache<T>& cache, const Tensor<T>& dy, Mode mode,
                                   UnitGrads<T>& g) {
        Tensor<T> d_bn_out = u.relu_after ? relu_backward(cache.out, dy) : dy;
        auto bn_g = u.bn.backward(cache.conv_out, d_bn_out, mode);
        g.bn_gamma = std::move(bn_g.dgamma);
        g.bn_beta = std::move(bn_g.dbeta);
        if (u.dws) {
            auto cg = u.dws_conv.backward(cache.x, cache.dws, bn_g.dx, mode);
            g.dw_weight = std::move(cg.dw_weight);
            g.dw_bias = std::move(cg.dw_bias);
            g.mid_gamma = std::move(cg.mid_gamma);
            g.mid_beta = std::move(cg.mid_beta);
            g.pw_weight = std::move(cg.pw_weight);
            g.pw_bias = std::move(cg.pw_bias);
            return std::move(cg.dx);
        }
        auto cg = u.conv.backward(cache.x, bn_g.dx);
        g.conv_weight = std::move(cg.dweight);
        g.conv_bias = std::move(cg.dbias);
        return std::move(cg.dx);
    }

    template <typename F>
    static void visit_unit_params(ConvUnit<T>& u, UnitGrads<T>* g, const std::string& base, F& f) {
        if (u.dws) {
            f(base + ".dw.weight", u.dws_conv.dw.weight, g ? &g->dw_weight : nullptr);
            f(base + ".dw.bias", u.dws_conv.dw.bias, g ? &g->dw_bias : nullptr);
            f(base + ".dwbn.gamma", u.dws_conv.mid_bn.gamma, g ? &g->mid_gamma : nullptr);
            f(base + ".dwbn.beta", u.dws_conv.mid_bn.beta, g ? &g->mid_beta : nullptr);
            f(base + ".pw.weight", u.dws_conv.pw.weight, g ? &g->pw_weight : nullptr);
            f(base + ".pw.bias", u.dws_conv.pw.bias, g ? &g->pw_bias : nullptr);
        } else {
            f(base + ".conv.weight", u.conv.weight, g ? &g->conv_weight : nullptr);
            f(base + ".conv.bias", u.conv.bias, g ? &g->conv_bias : nullptr);
        }
        f(base + ".bn.gamma", u.bn.gamma, g ? &g->bn_gamma : nullptr);
        f(base + ".bn.beta", u.bn.beta, g ? &g->bn_beta : nullptr);
    }

    template <typename F>
    static void visit_unit_buffers(ConvUnit<T>& u, const std::string& base, F& f) {
        if (u.dws) {
            f(base + ".dwbn.running_mean", u.dws_conv.mid_bn.running_mean);
            f(base + ".dwbn.running_var", u.dws_conv.mid_bn.running_var);
        }
        f(base + ".bn.running_mean", u.bn.running_mean);
        f(base + ".bn.running_var", u.bn.running_var);
    }

    void check_input(const Tensor<T>& x) const {
        if (x.rank() != 5)
            throw std::invalid_argument("forward: expected [N,H,W,T,C] input");
        if (static_cast<int>(x.extent(1)) != config.input_h || static_cast<int>(x.extent(2)) != config.input_w ||
            static_cast<int>(x.extent(3)) != config.frames || static_cast<int>(x.extent(4)) != config.channels)
            throw std::invalid_argument("forward: batch shape " + shape_string(x.shape()) +
                                        " does not match config " + std::to_string(config.input_h) + "x" +
                                        std::to_string(config.input_w) + "x" + std::to_string(config.frames) +
                                        "x" + std::to_string(config.channels));
    }
};

/// Per-layer report from a built model; params are summed from the actual
/// tensors rather than recomputed from formulas.
template <typename T>
ModelReport count_params(Model<T>& m) {
    ModelReport rep = make_plan(m.config);
    // replace each row's formula count with the realized tensor sizes
    std::vector<long long> realized;
    realized.reserve(rep.rows.size());

    using detail::ShapeCursor;
    long long total = 0;
    auto unit_rows = [&](ConvUnit<T>& u) {
        std::vector<long long> rows;
        if (u.dws) {
            rows.push_back(static_cast<long long>(u.dws_conv.dw.weight.size() + u.dws_conv.dw.bias.size()));
            rows.push_back(static_cast<long long>(u.dws_conv.mid_bn.gamma.size() + u.dws_conv.mid_bn.beta.size()));
            rows.push_back(0);  // ReLU
            rows.push_back(static_cast<long long>(u.dws_conv.pw.weight.size() + u.dws_conv.pw.bias.size()));
        } else {
            rows.push_back(static_cast<long long>(u.conv.weight.size() + u.conv.bias.size()));
        }
        rows.push_back(static_cast<long long>(u.bn.gamma.size() + u.bn.beta.size()));
        if (u.relu_after) rows.push_back(0);
        return rows;
    };

    for (long long v : unit_rows(m.input_unit)) realized.push_back(v);
    realized.push_back(0);  // input MaxPool
    for (auto& pyramid : m.pyramids) {
        for (auto& branch : pyramid)
            for (auto& u : branch)
                for (long long v : unit_rows(u)) realized.push_back(v);
        realized.push_back(0);  // ADD
        realized.push_back(0);  // ReLU
    }
    realized.push_back(0);  // AvgPool
    realized.push_back(static_cast<long long>(m.fc.weight.size() + m.fc.bias.size()));

    if (realized.size() != rep.rows.size())
        throw std::logic_error("count_params: row mismatch between model and plan");
    for (std::size_t i = 0; i < realized.size(); ++i) {
        rep.rows[i].params = realized[i];
        total += realized[i];
    }
    rep.total_params = total;
    return rep;
}

template <typename T>
std::string summarize(Model<T>& m) {
    return render_report(count_params(m));
}

}  // namespace pbbn
