#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "bevit/image.hpp"

namespace bevit::data {

enum class Split { Train, Val, Test, Unlabeled };

std::string to_string(Split s);
Split split_from(const std::string& s);

struct ManifestRecord {
    std::string path;
    int label = -1;  // -1 allowed only for unlabeled rows
    Split split = Split::Train;
};

struct Manifest {
    std::string name;
    int class_count = 0;
    std::vector<ManifestRecord> records;
};

// CSV with header `path,label,split`. Duplicate paths are rejected; labeled
// rows must satisfy 0 <= label < class_count (taken as max label + 1 unless
// `class_count_hint` is given).
Manifest load_manifest(const std::string& path, int class_count_hint = 0);
void save_manifest(const Manifest& manifest, const std::string& path);

// Largest-remainder per-class assignment into train/val/test, shuffled by
// seed. Deterministic; classes smaller than the split count get best-effort
// assignment.
std::vector<Split> stratified_split(std::span<const int> labels,
                                    const std::array<double, 3>& ratios, std::uint64_t seed);

// Applies stratified_split to a manifest. Rows already tagged Test keep their
// tag when `respect_existing_test` is set; ratios then apply to the rest.
void assign_splits(Manifest& manifest, const std::array<double, 3>& ratios, std::uint64_t seed,
                   bool respect_existing_test = true);

struct FewShotResult {
    std::vector<std::size_t> indices;  // into the supplied label vector
    bool saturated = false;            // some class had fewer than n samples
};
FewShotResult few_shot_sample(std::span<const int> labels, int n_per_class, std::uint64_t seed);

// --- synthetic ordinal-stage imagery -----------------------------------------

struct SyntheticSpec {
    int n_per_class = 40;
    int class_count = 5;
    int image_size = 32;
    int domain_id = 0;  // changes palette and texture statistics
    std::uint64_t seed = 0;
    // stage k > 0 draws k + Poisson(lesion_rate * k) lesions; stage 0 draws none
    double lesion_rate = 2.0;
    // per-image global gain drawn from [1-x, 1+x] plus a small per-channel
    // tilt; mimics camera/illumination variation so raw color statistics do
    // not give stage away
    double illumination = 0.25;
};

struct SyntheticDataset {
    std::vector<img::Image> images;
    std::vector<int> labels;
    std::vector<int> lesion_counts;  // generator ground truth
};

SyntheticDataset synth_generate(const SyntheticSpec& spec);

// --- quality filter & preprocessing -------------------------------------------

using QualityPredicate = std::function<bool(const img::Image&)>;

struct QualityPartition {
    std::vector<std::size_t> kept;
    std::vector<std::size_t> removed;
};
QualityPartition quality_filter(std::span<const img::Image> images, const QualityPredicate& pred);

// Foreground-disc area fraction and contrast thresholds; a stand-in for a real
// gradability model.
QualityPredicate default_quality_predicate(double min_foreground_fraction = 0.10,
                                           double min_contrast = 0.02);

// Square crop to the foreground disc bounding box, then bilinear resize.
img::Image preprocess(const img::Image& image, int target_size);

// --- in-memory datasets --------------------------------------------------------

struct LabeledSet {
    std::vector<img::Image> images;
    std::vector<int> labels;
    std::size_t size() const { return labels.size(); }
};

struct DatasetSplits {
    std::string name;
    int class_count = 0;
    LabeledSet train, val, test;
    std::vector<img::Image> unlabeled;
};

DatasetSplits split_synthetic(const SyntheticDataset& ds, int class_count,
                              const std::array<double, 3>& ratios, std::uint64_t seed,
                              const std::string& name);

// Reads every record's PNG relative to `root` and resizes to `target_size`;
// `crop_to_disc` additionally applies the foreground square crop first.
DatasetSplits load_dataset(const Manifest& manifest, const std::string& root, int target_size,
                           bool crop_to_disc = false);

// Writes PNGs plus the manifest CSV so synthetic data is indistinguishable
// from an on-disk dataset downstream.
Manifest export_synthetic(const SyntheticDataset& ds, int class_count,
                          const std::array<double, 3>& ratios, std::uint64_t seed,
                          const std::string& out_dir, const std::string& name);

}  // namespace bevit::data
