#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "bevit/rng.hpp"
#include "bevit/tensor.hpp"

namespace bevit::img {

// Row-major HWC, real values in [0, 1].
struct Image {
    int height = 0;
    int width = 0;
    int channels = 0;
    std::vector<float> pixels;

    static Image filled(int h, int w, int c, float v = 0.0f) {
        Image im;
        im.height = h;
        im.width = w;
        im.channels = c;
        im.pixels.assign(static_cast<std::size_t>(h) * w * c, v);
        return im;
    }
    float at(int y, int x, int c) const {
        return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
    }
    float& at(int y, int x, int c) {
        return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
    }
    bool empty() const { return pixels.empty(); }
};

// Pixel-center convention: src = (dst + 0.5) * in/out - 0.5, edge clamped.
// An exact 2x downscale therefore averages each 2x2 block.
Image resize_bilinear(const Image& im, int out_h, int out_w);
Image crop(const Image& im, int y, int x, int h, int w);
Image hflip(const Image& im);
Image vflip(const Image& im);
// Rotation about the image center, bilinear sampling, zero fill outside.
Image rotate(const Image& im, double degrees);
// PIL-style: 0 = box-blurred, 1 = unchanged, 2 = sharpened.
Image adjust_sharpness(const Image& im, double factor);
Image color_jitter(const Image& im, RandomStream& rng, double strength);
Image random_resized_crop(const Image& im, RandomStream& rng, double scale_min, double scale_max,
                          int out_size);

double mean_luminance(const Image& im);
double luminance_stddev(const Image& im);

struct Box {
    int y = 0, x = 0, h = 0, w = 0;
};
// Bounding box of pixels whose luminance exceeds `thresh`; falls back to the
// full frame when nothing does (constant images).
Box foreground_bbox(const Image& im, float thresh);

template <class T>
num::Tensor<T> to_batch(std::span<const Image> images);

template <class T>
num::Tensor<T> to_batch_indexed(std::span<const Image> images, std::span<const int> indices);

}  // namespace bevit::img
