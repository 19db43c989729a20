#include "pbbn/resample.hpp"

#include <cmath>
#include <numbers>

namespace pbbn {

std::string to_string(InterpMethod m) {
    switch (m) {
        case InterpMethod::NearestNeighbor: return "nearest";
        case InterpMethod::Bilinear: return "bilinear";
        case InterpMethod::Area: return "area";
        case InterpMethod::Bicubic: return "bicubic";
        case InterpMethod::Lanczos4: return "lanczos4";
    }
    throw std::invalid_argument("unknown InterpMethod");
}

InterpMethod parse_interp_method(const std::string& name) {
    if (name == "nearest" || name == "nn") return InterpMethod::NearestNeighbor;
    if (name == "bilinear" || name == "bl") return InterpMethod::Bilinear;
    if (name == "area") return InterpMethod::Area;
    if (name == "bicubic" || name == "bc") return InterpMethod::Bicubic;
    if (name == "lanczos4" || name == "lanczos") return InterpMethod::Lanczos4;
    throw std::invalid_argument("unknown interpolation method '" + name + "'");
}

namespace {

std::uint8_t round_clamp_u8(double v) {
    double r = std::floor(v + 0.5);
    if (r < 0.0) r = 0.0;
    if (r > 255.0) r = 255.0;
    return static_cast<std::uint8_t>(r);
}

double cubic_weight(double t) {
    // a = -0.75 Keys-family cubic
    constexpr double a = -0.75;
    t = std::fabs(t);
    if (t <= 1.0) return ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0;
    if (t < 2.0) return a * (((t - 5.0) * t + 8.0) * t - 4.0);
    return 0.0;
}

double lanczos4_weight(double t) {
    constexpr double radius = 4.0;
    t = std::fabs(t);
    if (t >= radius) return 0.0;
    if (t < 1e-12) return 1.0;
    const double pt = std::numbers::pi * t;
    return radius * std::sin(pt) * std::sin(pt / radius) / (pt * pt);
}

struct TapTable {
    int taps = 0;                // taps per destination coordinate
    std::vector<int> index;      // dst * taps entries, clamped source indices
    std::vector<double> weight;  // parallel, normalized to sum 1 per dst
};

TapTable make_taps(int in, int out, InterpMethod m) {
    int radius = 0;
    double (*kernel)(double) = nullptr;
    switch (m) {
        case InterpMethod::Bilinear: radius = 1; break;
        case InterpMethod::Bicubic: radius = 2; kernel = cubic_weight; break;
        case InterpMethod::Lanczos4: radius = 4; kernel = lanczos4_weight; break;
        default: throw std::logic_error("make_taps: not a filtered method");
    }
    const double scale = static_cast<double>(in) / out;
    TapTable t;
    t.taps = 2 * radius;
    t.index.resize(static_cast<std::size_t>(out) * t.taps);
    t.weight.resize(static_cast<std::size_t>(out) * t.taps);
    for (int d = 0; d < out; ++d) {
        const double src = (d + 0.5) * scale - 0.5;
        const int i0 = static_cast<int>(std::floor(src)) - radius + 1;
        double sum = 0.0;
        for (int k = 0; k < t.taps; ++k) {
            const int i = i0 + k;
            const double dist = src - i;
            double w;
            if (m == InterpMethod::Bilinear) {
                const double a = std::fabs(dist);
                w = a < 1.0 ? 1.0 - a : 0.0;
            } else {
                w = kernel(dist);
            }
            t.index[static_cast<std::size_t>(d) * t.taps + k] = std::clamp(i, 0, in - 1);
            t.weight[static_cast<std::size_t>(d) * t.taps + k] = w;
            sum += w;
        }
        for (int k = 0; k < t.taps; ++k) t.weight[static_cast<std::size_t>(d) * t.taps + k] /= sum;
    }
    return t;
}

Image resize_nearest(const Image& img, int th, int tw) {
    Image out(th, tw, img.channels);
    const double sy = static_cast<double>(img.height) / th;
    const double sx = static_cast<double>(img.width) / tw;
    for (int y = 0; y < th; ++y) {
        const int iy = std::clamp(static_cast<int>(std::floor((y + 0.5) * sy)), 0, img.height - 1);
        for (int x = 0; x < tw; ++x) {
            const int ix = std::clamp(static_cast<int>(std::floor((x + 0.5) * sx)), 0, img.width - 1);
            for (int c = 0; c < img.channels; ++c) out.at(y, x, c) = img.at(iy, ix, c);
        }
    }
    return out;
}

// Exact box integration: destination pixel (y,x) averages the source
// rectangle [y*sy,(y+1)*sy) x [x*sx,(x+1)*sx) with fractional edge coverage.
Image resize_area(const Image& img, int th, int tw) {
    Image out(th, tw, img.channels);
    const double sy = static_cast<double>(img.height) / th;
    const double sx = static_cast<double>(img.width) / tw;
    std::vector<double> acc(static_cast<std::size_t>(img.channels));
    for (int y = 0; y < th; ++y) {
        const double y0 = y * sy, y1 = (y + 1) * sy;
        const int r0 = std::clamp(static_cast<int>(std::floor(y0)), 0, img.height - 1);
        const int r1 = std::clamp(static_cast<int>(std::ceil(y1)), 1, img.height);
        for (int x = 0; x < tw; ++x) {
            const double x0 = x * sx, x1 = (x + 1) * sx;
            const int c0 = std::clamp(static_cast<int>(std::floor(x0)), 0, img.width - 1);
            const int c1 = std::clamp(static_cast<int>(std::ceil(x1)), 1, img.width);
            std::fill(acc.begin(), acc.end(), 0.0);
            double wtotal = 0.0;
            for (int r = r0; r < r1; ++r) {
                const double wy = std::min<double>(r + 1, y1) - std::max<double>(r, y0);
                if (wy <= 0.0) continue;
                for (int cc = c0; cc < c1; ++cc) {
                    const double wx = std::min<double>(cc + 1, x1) - std::max<double>(cc, x0);
                    if (wx <= 0.0) continue;
                    const double w = wy * wx;
                    wtotal += w;
                    for (int ch = 0; ch < img.channels; ++ch) acc[ch] += w * img.at(r, cc, ch);
                }
            }
            for (int ch = 0; ch < img.channels; ++ch) out.at(y, x, ch) = round_clamp_u8(acc[ch] / wtotal);
        }
    }
    return out;
}

// Separable filtered resampling: vertical pass into a double buffer, then
// horizontal pass, single rounding at the end.
Image resize_filtered(const Image& img, int th, int tw, InterpMethod m) {
    const TapTable ty = make_taps(img.height, th, m);
    const TapTable tx = make_taps(img.width, tw, m);
    const int ch = img.channels;

    std::vector<double> mid(static_cast<std::size_t>(th) * img.width * ch);
    for (int y = 0; y < th; ++y) {
        const int* idx = &ty.index[static_cast<std::size_t>(y) * ty.taps];
        const double* w = &ty.weight[static_cast<std::size_t>(y) * ty.taps];
        for (int x = 0; x < img.width; ++x) {
            for (int c = 0; c < ch; ++c) {
                double acc = 0.0;
                for (int k = 0; k < ty.taps; ++k) acc += w[k] * img.at(idx[k], x, c);
                mid[(static_cast<std::size_t>(y) * img.width + x) * ch + c] = acc;
            }
        }
    }

    Image out(th, tw, ch);
    for (int y = 0; y < th; ++y) {
        const double* row = &mid[static_cast<std::size_t>(y) * img.width * ch];
        for (int x = 0; x < tw; ++x) {
            const int* idx = &tx.index[static_cast<std::size_t>(x) * tx.taps];
            const double* w = &tx.weight[static_cast<std::size_t>(x) * tx.taps];
            for (int c = 0; c < ch; ++c) {
                double acc = 0.0;
                for (int k = 0; k < tx.taps; ++k) acc += w[k] * row[idx[k] * ch + c];
                out.at(y, x, c) = round_clamp_u8(acc);
            }
        }
    }
    return out;
}

}  // namespace

Image resize(const Image& img, int target_h, int target_w, InterpMethod m) {
    if (target_h <= 0 || target_w <= 0)
        throw std::invalid_argument("resize: target size must be positive");
    if (img.height <= 0 || img.width <= 0 ||
        img.pixels.size() != static_cast<std::size_t>(img.height) * img.width * img.channels)
        throw std::invalid_argument("resize: malformed input image");
    switch (m) {
        case InterpMethod::NearestNeighbor: return resize_nearest(img, target_h, target_w);
        case InterpMethod::Area: return resize_area(img, target_h, target_w);
        default: return resize_filtered(img, target_h, target_w, m);
    }
}

std::pair<int, int> choose_target_size(std::span<const std::pair<int, int>> sizes) {
    if (sizes.empty()) throw std::invalid_argument("choose_target_size: empty size list");
    double sum_h = 0.0, sum_w = 0.0;
    for (const auto& [h, w] : sizes) {
        sum_h += h;
        sum_w += w;
    }
    const auto round_up8 = [n = sizes.size()](double sum) {
        const int v = static_cast<int>(std::floor(sum / static_cast<double>(n) + 0.5));
        return std::max(v, 8);
    };
    return {round_up8(sum_h), round_up8(sum_w)};
}

Image resize_with_policy(const Image& img, const ResizePolicy& p) {
    if (p.target_h < 8 || p.target_w < 8)
        throw std::invalid_argument("resize_with_policy: target below the 8-pixel floor");
    if (img.height == p.target_h && img.width == p.target_w) return img;
    const long long in_area = static_cast<long long>(img.height) * img.width;
    const long long target_area = static_cast<long long>(p.target_h) * p.target_w;
    const InterpMethod m = in_area < target_area ? p.up : p.down;
    return resize(img, p.target_h, p.target_w, m);
}

}  // namespace pbbn
