#include "bevit/image.hpp"

#include <algorithm>
#include <cmath>

#include "bevit/error.hpp"

namespace bevit::img {

namespace {

float clamp01(float v) { return std::min(1.0f, std::max(0.0f, v)); }

float sample_clamped(const Image& im, int y, int x, int c) {
    y = std::clamp(y, 0, im.height - 1);
    x = std::clamp(x, 0, im.width - 1);
    return im.at(y, x, c);
}

}  // namespace

Image resize_bilinear(const Image& im, int out_h, int out_w) {
    if (im.empty()) throw DataError("resize of an empty image");
    Image out = Image::filled(out_h, out_w, im.channels);
    const double sy = static_cast<double>(im.height) / out_h;
    const double sx = static_cast<double>(im.width) / out_w;
    for (int y = 0; y < out_h; ++y) {
        const double fy = (y + 0.5) * sy - 0.5;
        const int y0 = static_cast<int>(std::floor(fy));
        const double wy = fy - y0;
        for (int x = 0; x < out_w; ++x) {
            const double fx = (x + 0.5) * sx - 0.5;
            const int x0 = static_cast<int>(std::floor(fx));
            const double wx = fx - x0;
            for (int c = 0; c < im.channels; ++c) {
                const double v00 = sample_clamped(im, y0, x0, c);
                const double v01 = sample_clamped(im, y0, x0 + 1, c);
                const double v10 = sample_clamped(im, y0 + 1, x0, c);
                const double v11 = sample_clamped(im, y0 + 1, x0 + 1, c);
                const double top = v00 * (1.0 - wx) + v01 * wx;
                const double bot = v10 * (1.0 - wx) + v11 * wx;
                out.at(y, x, c) = static_cast<float>(top * (1.0 - wy) + bot * wy);
            }
        }
    }
    return out;
}

Image crop(const Image& im, int y, int x, int h, int w) {
    if (y < 0 || x < 0 || h < 1 || w < 1 || y + h > im.height || x + w > im.width)
        throw DimensionError("crop window outside image bounds");
    Image out = Image::filled(h, w, im.channels);
    for (int r = 0; r < h; ++r)
        for (int cx = 0; cx < w; ++cx)
            for (int c = 0; c < im.channels; ++c) out.at(r, cx, c) = im.at(y + r, x + cx, c);
    return out;
}

Image hflip(const Image& im) {
    Image out = im;
    for (int y = 0; y < im.height; ++y)
        for (int x = 0; x < im.width; ++x)
            for (int c = 0; c < im.channels; ++c) out.at(y, x, c) = im.at(y, im.width - 1 - x, c);
    return out;
}

Image vflip(const Image& im) {
    Image out = im;
    for (int y = 0; y < im.height; ++y)
        for (int x = 0; x < im.width; ++x)
            for (int c = 0; c < im.channels; ++c) out.at(y, x, c) = im.at(im.height - 1 - y, x, c);
    return out;
}

Image rotate(const Image& im, double degrees) {
    const double rad = degrees * 3.14159265358979323846 / 180.0;
    const double cs = std::cos(rad), sn = std::sin(rad);
    const double cy = 0.5 * (im.height - 1), cx = 0.5 * (im.width - 1);
    Image out = Image::filled(im.height, im.width, im.channels);
    for (int y = 0; y < im.height; ++y)
        for (int x = 0; x < im.width; ++x) {
            // inverse map into the source
            const double dy = y - cy, dx = x - cx;
            const double sy = cs * dy + sn * dx + cy;
            const double sx = -sn * dy + cs * dx + cx;
            const int y0 = static_cast<int>(std::floor(sy));
            const int x0 = static_cast<int>(std::floor(sx));
            if (sy < -1 || sx < -1 || sy > im.height || sx > im.width) continue;
            const double wy = sy - y0, wx = sx - x0;
            for (int c = 0; c < im.channels; ++c) {
                auto px = [&](int yy, int xx) -> double {
                    if (yy < 0 || xx < 0 || yy >= im.height || xx >= im.width) return 0.0;
                    return im.at(yy, xx, c);
                };
                const double top = px(y0, x0) * (1 - wx) + px(y0, x0 + 1) * wx;
                const double bot = px(y0 + 1, x0) * (1 - wx) + px(y0 + 1, x0 + 1) * wx;
                out.at(y, x, c) = static_cast<float>(top * (1 - wy) + bot * wy);
            }
        }
    return out;
}

Image adjust_sharpness(const Image& im, double factor) {
    Image out = im;
    for (int y = 0; y < im.height; ++y)
        for (int x = 0; x < im.width; ++x)
            for (int c = 0; c < im.channels; ++c) {
                double acc = 0.0;
                for (int dy = -1; dy <= 1; ++dy)
                    for (int dx = -1; dx <= 1; ++dx) acc += sample_clamped(im, y + dy, x + dx, c);
                const double blur = acc / 9.0;
                out.at(y, x, c) =
                    clamp01(static_cast<float>(blur + factor * (im.at(y, x, c) - blur)));
            }
    return out;
}

Image color_jitter(const Image& im, RandomStream& rng, double strength) {
    // per-channel gain plus a global brightness shift
    std::vector<double> gain(static_cast<std::size_t>(im.channels));
    for (auto& g : gain) g = 1.0 + rng.uniform(-strength, strength);
    const double shift = rng.uniform(-strength, strength) * 0.5;
    Image out = im;
    for (auto i = 0u; i < im.pixels.size(); ++i) {
        const int c = static_cast<int>(i % static_cast<std::size_t>(im.channels));
        out.pixels[i] =
            clamp01(static_cast<float>(im.pixels[i] * gain[static_cast<std::size_t>(c)] + shift));
    }
    return out;
}

Image random_resized_crop(const Image& im, RandomStream& rng, double scale_min, double scale_max,
                          int out_size) {
    const double area_frac = rng.uniform(scale_min, scale_max);
    const double aspect = rng.uniform(0.75, 4.0 / 3.0);
    const double target = area_frac * im.height * im.width;
    int ch = static_cast<int>(std::lround(std::sqrt(target / aspect)));
    int cw = static_cast<int>(std::lround(std::sqrt(target * aspect)));
    ch = std::clamp(ch, 1, im.height);
    cw = std::clamp(cw, 1, im.width);
    const int y = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(im.height - ch + 1)));
    const int x = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(im.width - cw + 1)));
    return resize_bilinear(crop(im, y, x, ch, cw), out_size, out_size);
}

double mean_luminance(const Image& im) {
    double acc = 0.0;
    for (int y = 0; y < im.height; ++y)
        for (int x = 0; x < im.width; ++x) {
            double l = 0.0;
            for (int c = 0; c < im.channels; ++c) l += im.at(y, x, c);
            acc += l / im.channels;
        }
    return acc / (static_cast<double>(im.height) * im.width);
}

double luminance_stddev(const Image& im) {
    const double mu = mean_luminance(im);
    double acc = 0.0;
    for (int y = 0; y < im.height; ++y)
        for (int x = 0; x < im.width; ++x) {
            double l = 0.0;
            for (int c = 0; c < im.channels; ++c) l += im.at(y, x, c);
            l /= im.channels;
            acc += (l - mu) * (l - mu);
        }
    return std::sqrt(acc / (static_cast<double>(im.height) * im.width));
}

Box foreground_bbox(const Image& im, float thresh) {
    int ymin = im.height, ymax = -1, xmin = im.width, xmax = -1;
    for (int y = 0; y < im.height; ++y)
        for (int x = 0; x < im.width; ++x) {
            float l = 0.0f;
            for (int c = 0; c < im.channels; ++c) l += im.at(y, x, c);
            l /= static_cast<float>(im.channels);
            if (l > thresh) {
                ymin = std::min(ymin, y);
                ymax = std::max(ymax, y);
                xmin = std::min(xmin, x);
                xmax = std::max(xmax, x);
            }
        }
    if (ymax < 0) return Box{0, 0, im.height, im.width};  // nothing above threshold
    return Box{ymin, xmin, ymax - ymin + 1, xmax - xmin + 1};
}

template <class T>
num::Tensor<T> to_batch(std::span<const Image> images) {
    if (images.empty()) throw DataError("empty image batch");
    const int h = images[0].height, w = images[0].width, c = images[0].channels;
    std::vector<T> vals;
    vals.reserve(images.size() * static_cast<std::size_t>(h) * w * c);
    for (const auto& im : images) {
        if (im.height != h || im.width != w || im.channels != c)
            throw DimensionError("image batch has mixed dimensions");
        for (float v : im.pixels) vals.push_back(static_cast<T>(v));
    }
    return num::Tensor<T>::from({static_cast<std::int64_t>(images.size()), h, w, c},
                                std::move(vals));
}

template <class T>
num::Tensor<T> to_batch_indexed(std::span<const Image> images, std::span<const int> indices) {
    std::vector<Image> sel;
    sel.reserve(indices.size());
    for (int i : indices) sel.push_back(images[static_cast<std::size_t>(i)]);
    return to_batch<T>(sel);
}

template num::Tensor<float> to_batch(std::span<const Image>);
template num::Tensor<double> to_batch(std::span<const Image>);
template num::Tensor<float> to_batch_indexed(std::span<const Image>, std::span<const int>);
template num::Tensor<double> to_batch_indexed(std::span<const Image>, std::span<const int>);

}  // namespace bevit::img
