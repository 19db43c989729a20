#pragma once

#include <span>
#include <string>
#include <utility>

#include "pbbn/image.hpp"
#include "pbbn/tensor.hpp"

namespace pbbn {

enum class InterpMethod { NearestNeighbor, Bilinear, Area, Bicubic, Lanczos4 };

std::string to_string(InterpMethod m);
InterpMethod parse_interp_method(const std::string& name);

/// Target size plus the interpolation method used on each resampling path.
struct ResizePolicy {
    int target_h = 96;
    int target_w = 96;
    InterpMethod up = InterpMethod::Bicubic;
    InterpMethod down = InterpMethod::Bilinear;
};

/// Resamples per channel with the half-pixel-center convention
/// (source coordinate = (dst + 0.5) * scale - 0.5). Bicubic is the a = -0.75
/// cubic, Lanczos4 a radius-4 windowed sinc, Area exact box integration over
/// the source rectangle each destination pixel covers. Output samples are
/// rounded to nearest and clamped to [0,255].
Image resize(const Image& img, int target_h, int target_w, InterpMethod m);

/// Mean height and mean width over the given sizes, each rounded to nearest
/// (ties up) and clamped to >= 8.
std::pair<int, int> choose_target_size(std::span<const std::pair<int, int>> sizes);

/// Applies the policy: smaller-than-target area resizes with `up`, larger or
/// equal with `down`; an input already at the target size passes through.
Image resize_with_policy(const Image& img, const ResizePolicy& p);

/// resize_with_policy followed by normalization to [0,1]: a (target_h,
/// target_w, channels) tensor with samples divided by 255.
template <typename T = float>
Tensor<T> preprocess(const Image& img, const ResizePolicy& p) {
    const Image resized = resize_with_policy(img, p);
    Tensor<T> out(Shape{static_cast<std::size_t>(resized.height), static_cast<std::size_t>(resized.width),
                        static_cast<std::size_t>(resized.channels)});
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = static_cast<T>(resized.pixels[i]) / static_cast<T>(255);
    return out;
}

}  // namespace pbbn
