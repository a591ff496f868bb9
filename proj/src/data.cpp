#include "bevit/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "bevit/error.hpp"
#include "bevit/png_io.hpp"
#include "bevit/rng.hpp"

namespace bevit::data {

namespace fs = std::filesystem;

std::string to_string(Split s) {
    switch (s) {
        case Split::Train: return "train";
        case Split::Val: return "val";
        case Split::Test: return "test";
        case Split::Unlabeled: return "unlabeled";
    }
    return "train";
}

Split split_from(const std::string& s) {
    if (s == "train") return Split::Train;
    if (s == "val") return Split::Val;
    if (s == "test") return Split::Test;
    if (s == "unlabeled") return Split::Unlabeled;
    throw ParseError("unknown split tag: '" + s + "'");
}

Manifest load_manifest(const std::string& path, int class_count_hint) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open manifest: " + path);
    std::string line;
    if (!std::getline(in, line)) throw ParseError(path + ":1: empty manifest");
    if (line == "path,label,split\r") line.pop_back();
    if (line != "path,label,split")
        throw ParseError(path + ":1: expected header 'path,label,split', got '" + line + "'");

    Manifest m;
    m.name = fs::path(path).stem().string();
    std::set<std::string> seen;
    int line_no = 1;
    int max_label = -1;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::istringstream row(line);
        std::string p, lab, sp;
        if (!std::getline(row, p, ',') || !std::getline(row, lab, ',') || !std::getline(row, sp))
            throw ParseError(path + ":" + std::to_string(line_no) + ": expected 3 fields");
        ManifestRecord rec;
        rec.path = p;
        try {
            rec.label = std::stoi(lab);
        } catch (...) {
            throw ParseError(path + ":" + std::to_string(line_no) + ": bad label '" + lab + "'");
        }
        rec.split = split_from(sp);
        if (!seen.insert(rec.path).second)
            throw ParseError(path + ":" + std::to_string(line_no) + ": duplicate path '" + p + "'");
        if (rec.split != Split::Unlabeled && rec.label < 0)
            throw ParseError(path + ":" + std::to_string(line_no) +
                             ": labeled row needs a non-negative label");
        max_label = std::max(max_label, rec.label);
        m.records.push_back(std::move(rec));
    }
    m.class_count = class_count_hint > 0 ? class_count_hint : max_label + 1;
    for (std::size_t i = 0; i < m.records.size(); ++i) {
        const auto& r = m.records[i];
        if (r.split != Split::Unlabeled && r.label >= m.class_count)
            throw ParseError(path + ": record " + std::to_string(i + 1) + " ('" + r.path +
                             "') has label " + std::to_string(r.label) + " >= class count " +
                             std::to_string(m.class_count));
    }
    return m;
}

void save_manifest(const Manifest& manifest, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write manifest: " + path);
    out << "path,label,split\n";
    for (const auto& r : manifest.records)
        out << r.path << "," << r.label << "," << to_string(r.split) << "\n";
}

std::vector<Split> stratified_split(std::span<const int> labels,
                                    const std::array<double, 3>& ratios, std::uint64_t seed) {
    double total_ratio = ratios[0] + ratios[1] + ratios[2];
    if (ratios[0] < 0 || ratios[1] < 0 || ratios[2] < 0 || std::fabs(total_ratio - 1.0) > 1e-9)
        throw ConfigError("split ratios must be non-negative and sum to 1");
    int n_classes = 0;
    for (int l : labels) n_classes = std::max(n_classes, l + 1);

    std::vector<Split> out(labels.size(), Split::Train);
    for (int c = 0; c < n_classes; ++c) {
        std::vector<std::size_t> members;
        for (std::size_t i = 0; i < labels.size(); ++i)
            if (labels[i] == c) members.push_back(i);
        if (members.empty()) continue;
        RandomStream rng(derive_seed(seed, "stratified_split", static_cast<std::uint64_t>(c)));
        for (std::size_t i = members.size(); i > 1; --i)
            std::swap(members[i - 1], members[rng.uniform_int(i)]);

        const auto n = members.size();
        std::array<std::size_t, 3> quota{};
        std::array<double, 3> rem{};
        std::size_t assigned = 0;
        for (int s = 0; s < 3; ++s) {
            const double exact = ratios[static_cast<std::size_t>(s)] * static_cast<double>(n);
            quota[static_cast<std::size_t>(s)] = static_cast<std::size_t>(std::floor(exact + 1e-9));
            rem[static_cast<std::size_t>(s)] = exact - std::floor(exact + 1e-9);
            assigned += quota[static_cast<std::size_t>(s)];
        }
        // largest remainder; ties resolved train > val > test
        std::array<int, 3> order{0, 1, 2};
        std::sort(order.begin(), order.end(), [&](int a, int b) {
            if (rem[static_cast<std::size_t>(a)] != rem[static_cast<std::size_t>(b)])
                return rem[static_cast<std::size_t>(a)] > rem[static_cast<std::size_t>(b)];
            return a < b;
        });
        for (std::size_t leftover = n - assigned, i = 0; leftover > 0; --leftover, ++i)
            ++quota[static_cast<std::size_t>(order[i % 3])];

        std::size_t cursor = 0;
        const Split split_of[3] = {Split::Train, Split::Val, Split::Test};
        for (int s = 0; s < 3; ++s)
            for (std::size_t i = 0; i < quota[static_cast<std::size_t>(s)]; ++i)
                out[members[cursor++]] = split_of[s];
    }
    return out;
}

void assign_splits(Manifest& manifest, const std::array<double, 3>& ratios, std::uint64_t seed,
                   bool respect_existing_test) {
    std::vector<std::size_t> pool;
    std::vector<int> pool_labels;
    for (std::size_t i = 0; i < manifest.records.size(); ++i) {
        auto& r = manifest.records[i];
        if (r.split == Split::Unlabeled) continue;
        if (respect_existing_test && r.split == Split::Test) continue;
        pool.push_back(i);
        pool_labels.push_back(r.label);
    }
    const auto splits = stratified_split(pool_labels, ratios, seed);
    for (std::size_t i = 0; i < pool.size(); ++i) manifest.records[pool[i]].split = splits[i];
}

FewShotResult few_shot_sample(std::span<const int> labels, int n_per_class, std::uint64_t seed) {
    if (n_per_class < 1) throw ConfigError("few-shot n must be at least 1");
    int n_classes = 0;
    for (int l : labels) n_classes = std::max(n_classes, l + 1);
    FewShotResult res;
    for (int c = 0; c < n_classes; ++c) {
        std::vector<std::size_t> members;
        for (std::size_t i = 0; i < labels.size(); ++i)
            if (labels[i] == c) members.push_back(i);
        if (members.empty())
            throw DataError("few-shot sampling found no samples for class " + std::to_string(c));
        RandomStream rng(derive_seed(seed, "few_shot", static_cast<std::uint64_t>(c)));
        for (std::size_t i = members.size(); i > 1; --i)
            std::swap(members[i - 1], members[rng.uniform_int(i)]);
        if (members.size() < static_cast<std::size_t>(n_per_class)) res.saturated = true;
        const std::size_t take = std::min<std::size_t>(members.size(),
                                                       static_cast<std::size_t>(n_per_class));
        for (std::size_t i = 0; i < take; ++i) res.indices.push_back(members[i]);
    }
    std::sort(res.indices.begin(), res.indices.end());
    return res;
}

// --- synthetic generator -------------------------------------------------------

namespace {

int poisson(RandomStream& rng, double lambda) {
    // Knuth's method; fine for the small rates used here
    const double limit = std::exp(-lambda);
    int k = 0;
    double p = 1.0;
    do {
        ++k;
        p *= rng.uniform();
    } while (p > limit);
    return k - 1;
}

struct Palette {
    float disc_r, disc_g, disc_b;
    float noise;
    float blob_noise;
    // lesion colors sit symmetrically around the disc base so the global mean
    // carries almost no stage signal; the signal is local texture
    float offset_r, offset_g, offset_b;
};

Palette domain_palette(int domain_id) {
    if (domain_id % 2 == 0) return {0.78f, 0.42f, 0.18f, 0.030f, 0.05f, 0.20f, 0.18f, 0.15f};
    return {0.30f, 0.52f, 0.58f, 0.060f, 0.10f, 0.20f, 0.18f, 0.15f};
}

void splat_disc(img::Image& im, double cy, double cx, double radius, float r, float g, float b,
                double softness) {
    const int y0 = std::max(0, static_cast<int>(std::floor(cy - radius - 2)));
    const int y1 = std::min(im.height - 1, static_cast<int>(std::ceil(cy + radius + 2)));
    const int x0 = std::max(0, static_cast<int>(std::floor(cx - radius - 2)));
    const int x1 = std::min(im.width - 1, static_cast<int>(std::ceil(cx + radius + 2)));
    for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) {
            const double d = std::sqrt((y - cy) * (y - cy) + (x - cx) * (x - cx));
            const double a = 1.0 / (1.0 + std::exp((d - radius) / softness));
            if (a < 1e-3) continue;
            const float af = static_cast<float>(a);
            im.at(y, x, 0) = im.at(y, x, 0) * (1 - af) + r * af;
            im.at(y, x, 1) = im.at(y, x, 1) * (1 - af) + g * af;
            im.at(y, x, 2) = im.at(y, x, 2) * (1 - af) + b * af;
        }
}

img::Image synth_image(const SyntheticSpec& spec, int stage, RandomStream& rng, int& lesions_out) {
    const int s = spec.image_size;
    const auto pal = domain_palette(spec.domain_id);
    img::Image im = img::Image::filled(s, s, 3, 0.02f);

    const double cy = 0.5 * s + rng.uniform(-1.5, 1.5);
    const double cx = 0.5 * s + rng.uniform(-1.5, 1.5);
    const double disc_r = 0.40 * s + rng.uniform(-1.0, 1.0);

    // fundus-like disc with radial falloff
    for (int y = 0; y < s; ++y)
        for (int x = 0; x < s; ++x) {
            const double d = std::sqrt((y - cy) * (y - cy) + (x - cx) * (x - cx)) / disc_r;
            if (d > 1.15) continue;
            const double fall = std::max(0.0, 1.0 - 0.45 * d * d);
            const double rim = 1.0 / (1.0 + std::exp((d - 1.0) * 18.0));
            im.at(y, x, 0) = static_cast<float>(pal.disc_r * fall * rim + 0.02);
            im.at(y, x, 1) = static_cast<float>(pal.disc_g * fall * rim + 0.02);
            im.at(y, x, 2) = static_cast<float>(pal.disc_b * fall * rim + 0.02);
        }

    // large soft texture blobs (domain-dependent contrast)
    const int blobs = 3 + static_cast<int>(rng.uniform_int(3));
    for (int i = 0; i < blobs; ++i) {
        const double by = cy + rng.uniform(-0.7, 0.7) * disc_r;
        const double bx = cx + rng.uniform(-0.7, 0.7) * disc_r;
        const double br = rng.uniform(0.15, 0.35) * disc_r;
        const float tint = static_cast<float>(rng.uniform(-1.0, 1.0)) * pal.blob_noise;
        splat_disc(im, by, bx, br, pal.disc_r + tint, pal.disc_g + tint, pal.disc_b + tint, br * 0.5);
    }

    // bright optic-disc-like spot
    {
        const double a = rng.uniform(0.0, 6.283185307179586);
        const double rr = rng.uniform(0.3, 0.6) * disc_r;
        splat_disc(im, cy + std::sin(a) * rr, cx + std::cos(a) * rr, 0.16 * disc_r, 0.95f, 0.85f,
                   0.55f, 1.0);
    }

    // stage-dependent lesions
    int lesions = 0;
    if (stage > 0) lesions = stage + poisson(rng, spec.lesion_rate * stage);
    for (int i = 0; i < lesions; ++i) {
        double ly, lx;
        do {
            ly = cy + rng.uniform(-0.85, 0.85) * disc_r;
            lx = cx + rng.uniform(-0.85, 0.85) * disc_r;
        } while ((ly - cy) * (ly - cy) + (lx - cx) * (lx - cx) > 0.72 * disc_r * disc_r);
        const double lr = rng.uniform(0.8, 1.8);
        if (rng.bernoulli(0.5))
            splat_disc(im, ly, lx, lr, pal.disc_r - pal.offset_r, pal.disc_g - pal.offset_g,
                       pal.disc_b - pal.offset_b, 0.6);  // hemorrhage-like
        else
            splat_disc(im, ly, lx, lr, pal.disc_r + pal.offset_r, pal.disc_g + pal.offset_g,
                       pal.disc_b + pal.offset_b, 0.6);  // exudate-like
    }
    lesions_out = lesions;

    // per-image illumination: global gain plus a small channel tilt
    const double gain = 1.0 + rng.uniform(-spec.illumination, spec.illumination);
    double tilt[3];
    for (auto& t : tilt) t = 1.0 + rng.uniform(-0.4, 0.4) * spec.illumination;
    for (std::size_t i = 0; i < im.pixels.size(); ++i)
        im.pixels[i] = static_cast<float>(im.pixels[i] * gain * tilt[i % 3]);

    // pixel noise
    for (auto& v : im.pixels)
        v = std::min(1.0f, std::max(0.0f, v + static_cast<float>(rng.uniform(-1.0, 1.0)) * pal.noise));
    return im;
}

}  // namespace

SyntheticDataset synth_generate(const SyntheticSpec& spec) {
    if (spec.n_per_class < 1 || spec.class_count < 1 || spec.image_size < 8)
        throw ConfigError("synthetic spec needs n_per_class >= 1, classes >= 1, size >= 8");
    SyntheticDataset ds;
    std::uint64_t index = 0;
    for (int stage = 0; stage < spec.class_count; ++stage)
        for (int i = 0; i < spec.n_per_class; ++i, ++index) {
            RandomStream rng(derive_seed(spec.seed, "synth_image",
                                         (static_cast<std::uint64_t>(spec.domain_id) << 32) | index));
            int lesions = 0;
            ds.images.push_back(synth_image(spec, stage, rng, lesions));
            ds.labels.push_back(stage);
            ds.lesion_counts.push_back(lesions);
        }
    return ds;
}

QualityPartition quality_filter(std::span<const img::Image> images, const QualityPredicate& pred) {
    QualityPartition part;
    for (std::size_t i = 0; i < images.size(); ++i)
        (pred(images[i]) ? part.kept : part.removed).push_back(i);
    return part;
}

QualityPredicate default_quality_predicate(double min_foreground_fraction, double min_contrast) {
    return [min_foreground_fraction, min_contrast](const img::Image& im) {
        std::int64_t fg = 0;
        for (int y = 0; y < im.height; ++y)
            for (int x = 0; x < im.width; ++x) {
                float l = 0;
                for (int c = 0; c < im.channels; ++c) l += im.at(y, x, c);
                if (l / im.channels > 0.05f) ++fg;
            }
        const double frac = static_cast<double>(fg) / (static_cast<double>(im.height) * im.width);
        return frac >= min_foreground_fraction && luminance_stddev(im) >= min_contrast;
    };
}

img::Image preprocess(const img::Image& image, int target_size) {
    auto box = img::foreground_bbox(image, 0.05f);
    // expand the box to a square, centered, clamped to the frame
    const int side = std::min(std::max(box.h, box.w), std::min(image.height, image.width));
    int y = box.y + box.h / 2 - side / 2;
    int x = box.x + box.w / 2 - side / 2;
    y = std::clamp(y, 0, image.height - side);
    x = std::clamp(x, 0, image.width - side);
    return img::resize_bilinear(img::crop(image, y, x, side, side), target_size, target_size);
}

DatasetSplits split_synthetic(const SyntheticDataset& ds, int class_count,
                              const std::array<double, 3>& ratios, std::uint64_t seed,
                              const std::string& name) {
    DatasetSplits out;
    out.name = name;
    out.class_count = class_count;
    const auto splits = stratified_split(ds.labels, ratios, seed);
    for (std::size_t i = 0; i < ds.images.size(); ++i) {
        switch (splits[i]) {
            case Split::Train:
                out.train.images.push_back(ds.images[i]);
                out.train.labels.push_back(ds.labels[i]);
                break;
            case Split::Val:
                out.val.images.push_back(ds.images[i]);
                out.val.labels.push_back(ds.labels[i]);
                break;
            case Split::Test:
                out.test.images.push_back(ds.images[i]);
                out.test.labels.push_back(ds.labels[i]);
                break;
            case Split::Unlabeled: out.unlabeled.push_back(ds.images[i]); break;
        }
    }
    return out;
}

DatasetSplits load_dataset(const Manifest& manifest, const std::string& root, int target_size,
                           bool crop_to_disc) {
    DatasetSplits out;
    out.name = manifest.name;
    out.class_count = manifest.class_count;
    for (const auto& rec : manifest.records) {
        const auto full = (fs::path(root) / rec.path).string();
        auto raw = img::read_png(full);
        auto image = crop_to_disc ? preprocess(raw, target_size)
                                  : (raw.height == target_size && raw.width == target_size
                                         ? raw
                                         : img::resize_bilinear(raw, target_size, target_size));
        switch (rec.split) {
            case Split::Train:
                out.train.images.push_back(std::move(image));
                out.train.labels.push_back(rec.label);
                break;
            case Split::Val:
                out.val.images.push_back(std::move(image));
                out.val.labels.push_back(rec.label);
                break;
            case Split::Test:
                out.test.images.push_back(std::move(image));
                out.test.labels.push_back(rec.label);
                break;
            case Split::Unlabeled: out.unlabeled.push_back(std::move(image)); break;
        }
    }
    return out;
}

Manifest export_synthetic(const SyntheticDataset& ds, int class_count,
                          const std::array<double, 3>& ratios, std::uint64_t seed,
                          const std::string& out_dir, const std::string& name) {
    fs::create_directories(fs::path(out_dir) / "images");
    Manifest m;
    m.name = name;
    m.class_count = class_count;
    const auto splits = stratified_split(ds.labels, ratios, seed);
    for (std::size_t i = 0; i < ds.images.size(); ++i) {
        char buf[64];
        std::snprintf(buf, sizeof buf, "images/%s_%05zu.png", name.c_str(), i);
        img::write_png((fs::path(out_dir) / buf).string(), ds.images[i]);
        m.records.push_back({buf, ds.labels[i], splits[i]});
    }
    save_manifest(m, (fs::path(out_dir) / (name + ".csv")).string());
    return m;
}

}  // namespace bevit::data
