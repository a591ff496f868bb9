#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "bevit/blockexp.hpp"
#include "bevit/data.hpp"
#include "bevit/metrics.hpp"
#include "bevit/vit.hpp"

namespace bevit::finetune {

enum class LossKind { VanillaCe, ScaledCe, DistanceScaledCe };

std::string to_string(LossKind k);
LossKind loss_kind_from(const std::string& s);

// f_i = N_total / (N_i * n_classes); renormalizes so sum_i N_i * f_i = N_total.
struct ClassWeights {
    std::vector<double> factors;
    std::vector<std::int64_t> counts;
    std::int64_t total = 0;
    int n_classes = 0;
};
ClassWeights class_weights(std::span<const int> train_labels, int n_classes);

// f_y * [ -log p_y + lambda * sum_j p_j (j-y)^2 / (C-1)^2 ], batch mean.
// lambda = 0 recovers the scaled CE; weights = nullptr recovers all-ones.
template <class T>
num::Tensor<T> distance_scaled_ce(const num::Tensor<T>& logits, const std::vector<int>& targets,
                                  const ClassWeights* weights, double lambda);

// Linear 0 -> peak over [0, warmup], cosine peak -> floor over [warmup, total].
double lr_at_step(std::int64_t step, std::int64_t warmup, std::int64_t total, double peak,
                  double floor);

struct AdamWOptions {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.05;
};

// Decoupled weight decay with bias correction. Parameters whose requires_grad
// is off are never touched; a missing gradient counts as zero.
template <class T>
class AdamW {
public:
    explicit AdamW(std::vector<num::Tensor<T>> params, AdamWOptions opt = {});
    void step(double lr);
    void zero_grad();
    std::int64_t steps_taken() const { return t_; }

private:
    struct Slot {
        std::vector<T> m, v;
    };
    std::vector<num::Tensor<T>> params_;
    std::vector<Slot> slots_;
    AdamWOptions opt_;
    std::int64_t t_ = 0;
};

struct AugmentPolicy {
    bool random_resized_crop = false;
    double crop_scale_min = 0.7;
    double crop_scale_max = 1.0;
    bool horizontal_flip = false;
    bool vertical_flip = false;
    bool rotation = false;
    double max_rotation_deg = 15.0;
    bool color_jitter = false;
    double jitter_strength = 0.15;
    bool sharpness = false;
    int out_size = 0;  // random_resized_crop target; 0 keeps the input size

    bool any() const {
        return random_resized_crop || horizontal_flip || vertical_flip || rotation ||
               color_jitter || sharpness;
    }
    static AugmentPolicy all_on(int out_size) {
        AugmentPolicy p;
        p.random_resized_crop = p.horizontal_flip = p.vertical_flip = p.rotation =
            p.color_jitter = p.sharpness = true;
        p.out_size = out_size;
        return p;
    }
};

// Composition of the enabled transforms; identity when every flag is off.
img::Image augment(const img::Image& image, const AugmentPolicy& policy, RandomStream& rng);

struct FinetuneConfig {
    blockexp::FreezePolicy mode = blockexp::FreezePolicy::FrozenBackbone;
    vit::EmbeddingStrategy strategy = vit::EmbeddingStrategy::Cls;
    LossKind loss = LossKind::ScaledCe;
    double lambda = 1.0;  // ordinal penalty weight for DistanceScaledCe
    int epochs = 30;
    int batch_size = 16;
    double peak_lr = 1e-3;
    double floor_lr_fraction = 0.01;
    std::int64_t warmup_steps = 10;
    double weight_decay = 0.05;
    bool use_augment = true;
    AugmentPolicy augment;
    std::uint64_t seed = 0;
};

struct CheckpointRecord {
    int epoch = 0;
    metrics::MetricsReport report;
};

struct EpochLogRow {
    int epoch = 0;
    double train_loss = 0.0;
    double val_acc = 0.0;
    double val_qkappa = 0.0;
    double val_auc = 0.0;
    double lr = 0.0;
};

template <class T>
struct FinetuneResult {
    vit::ViTModel<T> best;
    int best_epoch = 0;
    std::vector<CheckpointRecord> records;  // epoch 0 is the pre-training baseline
    std::vector<EpochLogRow> log;
    bool weights_fallback = false;  // scaled loss requested but a class was empty
};

template <class T>
metrics::MetricsReport evaluate(const vit::ViTModel<T>& model, const data::LabeledSet& set,
                                int batch_size, const metrics::RunMeta& meta);

template <class T>
FinetuneResult<T> finetune_run(const vit::ViTModel<T>& model, const data::LabeledSet& train,
                               const data::LabeledSet& val, const FinetuneConfig& cfg);

std::string log_csv_header();
std::string log_csv_row(const EpochLogRow& row);

}  // namespace bevit::finetune
