#include "bevit/finetune.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

namespace bevit::finetune {

using num::Tensor;

std::string to_string(LossKind k) {
    switch (k) {
        case LossKind::VanillaCe: return "vanilla_ce";
        case LossKind::ScaledCe: return "scaled_ce";
        case LossKind::DistanceScaledCe: return "distance_scaled_ce";
    }
    return "vanilla_ce";
}

LossKind loss_kind_from(const std::string& s) {
    if (s == "vanilla_ce") return LossKind::VanillaCe;
    if (s == "scaled_ce") return LossKind::ScaledCe;
    if (s == "distance_scaled_ce") return LossKind::DistanceScaledCe;
    throw ConfigError("unknown loss kind: " + s);
}

ClassWeights class_weights(std::span<const int> train_labels, int n_classes) {
    if (n_classes < 1) throw ConfigError("class_weights needs at least one class");
    ClassWeights w;
    w.n_classes = n_classes;
    w.counts.assign(static_cast<std::size_t>(n_classes), 0);
    for (int l : train_labels) {
        if (l < 0 || l >= n_classes)
            throw LabelError("class_weights: label " + std::to_string(l) + " outside [0, " +
                             std::to_string(n_classes) + ")");
        ++w.counts[static_cast<std::size_t>(l)];
    }
    w.total = static_cast<std::int64_t>(train_labels.size());
    w.factors.resize(static_cast<std::size_t>(n_classes));
    for (int c = 0; c < n_classes; ++c) {
        if (w.counts[static_cast<std::size_t>(c)] == 0)
            throw DataError("class_weights: class " + std::to_string(c) +
                            " has no training samples");
        w.factors[static_cast<std::size_t>(c)] =
            static_cast<double>(w.total) /
            (static_cast<double>(w.counts[static_cast<std::size_t>(c)]) * n_classes);
    }
    return w;
}

template <class T>
Tensor<T> distance_scaled_ce(const Tensor<T>& logits, const std::vector<int>& targets,
                             const ClassWeights* weights, double lambda) {
    if (lambda < 0) throw ConfigError("distance_scaled_ce lambda must be non-negative");
    if (logits.ndim() != 2 || logits.dim(1) < 2)
        throw DimensionError("distance_scaled_ce expects [batch x classes>=2] logits");
    const std::int64_t b = logits.dim(0), c = logits.dim(1);
    if (static_cast<std::int64_t>(targets.size()) != b)
        throw LabelError("distance_scaled_ce target count mismatch");

    std::vector<T> onehot(static_cast<std::size_t>(b * c), T(0));
    std::vector<T> dist(static_cast<std::size_t>(b * c), T(0));
    std::vector<T> factor(static_cast<std::size_t>(b), T(1));
    const double denom = static_cast<double>((c - 1) * (c - 1));
    for (std::int64_t r = 0; r < b; ++r) {
        const int y = targets[static_cast<std::size_t>(r)];
        if (y < 0 || y >= c)
            throw LabelError("distance_scaled_ce: target " + std::to_string(y) + " outside [0, " +
                             std::to_string(c) + ")");
        onehot[static_cast<std::size_t>(r * c + y)] = T(1);
        for (std::int64_t j = 0; j < c; ++j)
            dist[static_cast<std::size_t>(r * c + j)] =
                static_cast<T>(static_cast<double>((j - y) * (j - y)) / denom);
        if (weights) factor[static_cast<std::size_t>(r)] =
            static_cast<T>(weights->factors[static_cast<std::size_t>(y)]);
    }
    auto oh = Tensor<T>::from({b, c}, std::move(onehot));
    auto fw = Tensor<T>::from({b}, std::move(factor));

    auto rows = num::scale(num::sum_axis(num::mul(num::log_softmax(logits, 1), oh), 1), T(-1));
    if (lambda > 0) {
        auto dk = Tensor<T>::from({b, c}, std::move(dist));
        auto pen = num::scale(num::sum_axis(num::mul(num::softmax(logits, 1, T(1)), dk), 1),
                              static_cast<T>(lambda));
        rows = num::add(rows, pen);
    }
    return num::mean(num::mul(fw, rows));
}

double lr_at_step(std::int64_t step, std::int64_t warmup, std::int64_t total, double peak,
                  double floor) {
    if (warmup < 0 || total < 1 || warmup > total)
        throw ScheduleError("schedule needs 0 <= warmup <= total");
    if (step < 0 || step > total)
        throw ScheduleError("step " + std::to_string(step) + " outside [0, " +
                            std::to_string(total) + "]");
    if (step < warmup) return peak * static_cast<double>(step) / static_cast<double>(warmup);
    if (total == warmup) return peak;
    const double progress =
        static_cast<double>(step - warmup) / static_cast<double>(total - warmup);
    return floor + 0.5 * (peak - floor) * (1.0 + std::cos(3.14159265358979323846 * progress));
}

template <class T>
AdamW<T>::AdamW(std::vector<Tensor<T>> params, AdamWOptions opt)
    : params_(std::move(params)), opt_(opt) {
    slots_.resize(params_.size());
    for (std::size_t i = 0; i < params_.size(); ++i) {
        const auto n = static_cast<std::size_t>(params_[i].numel());
        slots_[i].m.assign(n, T(0));
        slots_[i].v.assign(n, T(0));
    }
}

template <class T>
void AdamW<T>::step(double lr) {
    ++t_;
    const T b1 = static_cast<T>(opt_.beta1);
    const T b2 = static_cast<T>(opt_.beta2);
    const T eps = static_cast<T>(opt_.eps);
    const T wd = static_cast<T>(opt_.weight_decay);
    const T lrT = static_cast<T>(lr);
    const T bc1 = T(1) - static_cast<T>(std::pow(opt_.beta1, static_cast<double>(t_)));
    const T bc2 = T(1) - static_cast<T>(std::pow(opt_.beta2, static_cast<double>(t_)));
    for (std::size_t p = 0; p < params_.size(); ++p) {
        auto& param = params_[p];
        if (!param.requires_grad()) continue;  // frozen stays untouched
        auto vals = param.values_mut();
        auto& slot = slots_[p];
        const bool has_grad = param.has_grad();
        std::span<const T> grad;
        if (has_grad) {
            grad = param.grad();
            if (grad.size() != vals.size())
                throw OptimError("adamw: gradient shape does not match parameter");
        }
        for (std::size_t i = 0; i < vals.size(); ++i) {
            const T g = has_grad ? grad[i] : T(0);
            slot.m[i] = b1 * slot.m[i] + (T(1) - b1) * g;
            slot.v[i] = b2 * slot.v[i] + (T(1) - b2) * g * g;
            const T mhat = slot.m[i] / bc1;
            const T vhat = slot.v[i] / bc2;
            vals[i] -= lrT * (mhat / (std::sqrt(vhat) + eps) + wd * vals[i]);
        }
    }
}

template <class T>
void AdamW<T>::zero_grad() {
    for (auto& p : params_) p.zero_grad();
}

img::Image augment(const img::Image& image, const AugmentPolicy& policy, RandomStream& rng) {
    if (!policy.any()) return image;
    img::Image out = image;
    if (policy.random_resized_crop) {
        const int target = policy.out_size > 0 ? policy.out_size : image.height;
        out = img::random_resized_crop(out, rng, policy.crop_scale_min, policy.crop_scale_max,
                                       target);
    }
    if (policy.horizontal_flip && rng.bernoulli(0.5)) out = img::hflip(out);
    if (policy.vertical_flip && rng.bernoulli(0.5)) out = img::vflip(out);
    if (policy.rotation)
        out = img::rotate(out, rng.uniform(-policy.max_rotation_deg, policy.max_rotation_deg));
    if (policy.color_jitter) out = img::color_jitter(out, rng, policy.jitter_strength);
    if (policy.sharpness) out = img::adjust_sharpness(out, rng.uniform(0.5, 1.8));
    return out;
}

namespace {

template <class T>
std::vector<std::vector<T>> snapshot_params(const vit::ViTModel<T>& model) {
    std::vector<std::vector<T>> snap;
    for (const auto& p : vit::named_params(model)) {
        auto v = p.tensor.values();
        snap.emplace_back(v.begin(), v.end());
    }
    return snap;
}

template <class T>
void restore_params(vit::ViTModel<T>& model, const std::vector<std::vector<T>>& snap) {
    auto params = vit::named_params(model);
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto dst = params[i].tensor.values_mut();
        std::copy(snap[i].begin(), snap[i].end(), dst.begin());
    }
}

template <class T>
metrics::MetricsReport report_from_embeddings(const vit::Linear<T>& head, const num::Tensor<T>& emb,
                                              const std::vector<int>& labels, int n_classes,
                                              const metrics::RunMeta& meta) {
    num::NoGradGuard ng;
    auto logits = num::add(num::matmul(emb, head.weight), head.bias);
    auto p = num::softmax(logits, 1, T(1));
    std::vector<double> probs(p.values().begin(), p.values().end());
    return metrics::compute_report(probs, labels, n_classes, meta);
}

}  // namespace

template <class T>
metrics::MetricsReport evaluate(const vit::ViTModel<T>& model, const data::LabeledSet& set,
                                int batch_size, const metrics::RunMeta& meta) {
    if (set.size() == 0) throw DataError("evaluate: empty set");
    if (!model.head) throw ModelError("evaluate: model has no classifier head");
    num::NoGradGuard ng;
    const int c = model.head->num_classes;
    std::vector<double> probs;
    probs.reserve(set.size() * static_cast<std::size_t>(c));
    for (std::size_t start = 0; start < set.size(); start += static_cast<std::size_t>(batch_size)) {
        const std::size_t stop = std::min(set.size(), start + static_cast<std::size_t>(batch_size));
        std::vector<img::Image> chunk(set.images.begin() + static_cast<std::ptrdiff_t>(start),
                                      set.images.begin() + static_cast<std::ptrdiff_t>(stop));
        auto res = vit::forward(model, img::to_batch<T>(chunk));
        auto p = num::softmax(res.logits, 1, T(1));
        for (T v : p.values()) probs.push_back(static_cast<double>(v));
    }
    return metrics::compute_report(probs, set.labels, c, meta);
}

namespace {

// Frozen backbone without augmentation: the encoder output per image never
// changes, so embed once and train the head on the cached features. Same
// optimization problem, orders of magnitude fewer encoder passes.
template <class T>
Tensor<T> cache_embeddings(const vit::ViTModel<T>& model, const data::LabeledSet& set,
                           int batch_size) {
    num::NoGradGuard ng;
    std::vector<T> rows;
    std::int64_t width = 0;
    for (std::size_t start = 0; start < set.size(); start += static_cast<std::size_t>(batch_size)) {
        const std::size_t stop = std::min(set.size(), start + static_cast<std::size_t>(batch_size));
        std::vector<img::Image> chunk(set.images.begin() + static_cast<std::ptrdiff_t>(start),
                                      set.images.begin() + static_cast<std::ptrdiff_t>(stop));
        auto emb = vit::extract_embedding(model, img::to_batch<T>(chunk), model.head->strategy);
        width = emb.dim(1);
        rows.insert(rows.end(), emb.values().begin(), emb.values().end());
    }
    return Tensor<T>::from({static_cast<std::int64_t>(set.size()), width}, std::move(rows));
}

}  // namespace

template <class T>
FinetuneResult<T> finetune_run(const vit::ViTModel<T>& model, const data::LabeledSet& train,
                               const data::LabeledSet& val, const FinetuneConfig& cfg) {
    if (train.size() == 0 || val.size() == 0)
        throw DataError("finetune_run: train and val must be non-empty");
    if (!model.head) throw ModelError("finetune_run: model has no classifier head");
    if (cfg.mode == blockexp::FreezePolicy::BeSsl)
        throw ConfigError("finetune_run takes frozen_bb or unfrozen, not be_ssl");

    FinetuneResult<T> result;
    auto work = vit::clone_model(model);
    blockexp::apply_freeze_policy(work, cfg.mode);
    const int n_classes = work.head->num_classes;
    const bool cached = cfg.mode == blockexp::FreezePolicy::FrozenBackbone &&
                        !(cfg.use_augment && cfg.augment.any());
    Tensor<T> train_emb, val_emb;
    if (cached) {
        train_emb = cache_embeddings(work, train, cfg.batch_size);
        val_emb = cache_embeddings(work, val, cfg.batch_size);
    }

    const ClassWeights* weights_ptr = nullptr;
    ClassWeights weights;
    LossKind loss = cfg.loss;
    if (loss != LossKind::VanillaCe) {
        try {
            weights = class_weights(train.labels, n_classes);
            weights_ptr = &weights;
        } catch (const DataError&) {
            loss = LossKind::VanillaCe;  // documented fallback when a class is empty
            result.weights_fallback = true;
        }
    }
    Tensor<T> weight_tensor;
    if (weights_ptr) {
        std::vector<T> f(weights.factors.size());
        for (std::size_t i = 0; i < f.size(); ++i) f[i] = static_cast<T>(weights.factors[i]);
        weight_tensor = Tensor<T>::from({n_classes}, std::move(f));
    }

    metrics::RunMeta meta;
    meta.mode = blockexp::to_string(cfg.mode);
    meta.seed = cfg.seed;

    result.records.push_back(
        {0, cached ? report_from_embeddings(work.head->linear, val_emb, val.labels, n_classes, meta)
                   : evaluate(work, val, cfg.batch_size, meta)});
    auto best_snapshot = snapshot_params(work);
    double best_q = result.records[0].report.qkappa;
    result.best_epoch = 0;

    std::vector<Tensor<T>> trainables;
    for (const auto& p : vit::named_params(work))
        if (p.tensor.requires_grad()) trainables.push_back(p.tensor);
    AdamWOptions opt;
    opt.weight_decay = cfg.weight_decay;
    AdamW<T> optimizer(trainables, opt);

    const std::int64_t steps_per_epoch =
        static_cast<std::int64_t>((train.size() + static_cast<std::size_t>(cfg.batch_size) - 1) /
                                  static_cast<std::size_t>(cfg.batch_size));
    const std::int64_t total_steps = std::max<std::int64_t>(1, cfg.epochs * steps_per_epoch);
    const std::int64_t warmup = std::min<std::int64_t>(cfg.warmup_steps, total_steps - 1);
    const double floor_lr = cfg.peak_lr * cfg.floor_lr_fraction;

    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::int64_t global_step = 0;

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        RandomStream shuffle_rng(derive_seed(cfg.seed, "finetune.shuffle",
                                             static_cast<std::uint64_t>(epoch)));
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[shuffle_rng.uniform_int(i)]);

        double loss_sum = 0.0;
        std::int64_t seen = 0;
        double lr = 0.0;
        for (std::size_t start = 0; start < order.size();
             start += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t stop =
                std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
            std::vector<int> targets;
            for (std::size_t i = start; i < stop; ++i) targets.push_back(train.labels[order[i]]);

            num::Tape<T>::active().clear();
            Tensor<T> logits;
            if (cached) {
                const auto src = train_emb.values();
                const auto width = train_emb.dim(1);
                std::vector<T> rows;
                rows.reserve((stop - start) * static_cast<std::size_t>(width));
                for (std::size_t i = start; i < stop; ++i)
                    rows.insert(rows.end(),
                                src.begin() + static_cast<std::ptrdiff_t>(order[i] * width),
                                src.begin() + static_cast<std::ptrdiff_t>((order[i] + 1) * width));
                auto emb = Tensor<T>::from({static_cast<std::int64_t>(stop - start), width},
                                           std::move(rows));
                logits = num::add(num::matmul(emb, work.head->linear.weight),
                                  work.head->linear.bias);
            } else {
                std::vector<img::Image> images;
                images.reserve(stop - start);
                for (std::size_t i = start; i < stop; ++i) {
                    const auto idx = order[i];
                    if (cfg.use_augment && cfg.augment.any()) {
                        RandomStream arng(derive_seed(cfg.seed, "finetune.augment",
                                                      (static_cast<std::uint64_t>(epoch) << 32) |
                                                          static_cast<std::uint64_t>(idx)));
                        images.push_back(augment(train.images[idx], cfg.augment, arng));
                    } else {
                        images.push_back(train.images[idx]);
                    }
                }
                logits = vit::forward(work, img::to_batch<T>(images)).logits;
            }
            Tensor<T> batch_loss;
            switch (loss) {
                case LossKind::VanillaCe:
                    batch_loss = num::cross_entropy(logits, targets);
                    break;
                case LossKind::ScaledCe:
                    batch_loss = num::cross_entropy(logits, targets, weight_tensor);
                    break;
                case LossKind::DistanceScaledCe:
                    batch_loss = distance_scaled_ce(logits, targets, weights_ptr, cfg.lambda);
                    break;
            }
            num::backward(batch_loss);
            lr = lr_at_step(global_step, warmup, total_steps, cfg.peak_lr, floor_lr);
            optimizer.step(lr);
            optimizer.zero_grad();
            num::Tape<T>::active().clear();
            loss_sum += static_cast<double>(batch_loss.item()) * static_cast<double>(stop - start);
            seen += static_cast<std::int64_t>(stop - start);
            ++global_step;
        }

        auto report = cached ? report_from_embeddings(work.head->linear, val_emb, val.labels,
                                                      n_classes, meta)
                             : evaluate(work, val, cfg.batch_size, meta);
        result.records.push_back({epoch, report});
        if (report.qkappa > best_q) {  // ties keep the earliest epoch
            best_q = report.qkappa;
            best_snapshot = snapshot_params(work);
            result.best_epoch = epoch;
        }
        result.log.push_back({epoch, loss_sum / static_cast<double>(seen), report.accuracy,
                              report.qkappa, report.auc, lr});
    }

    restore_params(work, best_snapshot);
    result.best = std::move(work);
    return result;
}

std::string log_csv_header() { return "epoch,train_loss,val_acc,val_qkappa,val_auc,lr"; }

std::string log_csv_row(const EpochLogRow& row) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%d,%.6f,%.6f,%.6f,%.6f,%.8f", row.epoch, row.train_loss,
                  row.val_acc, row.val_qkappa, row.val_auc, row.lr);
    return std::string(buf);
}

#define BEVIT_FT_INSTANTIATE(T)                                                               \
    template Tensor<T> distance_scaled_ce(const Tensor<T>&, const std::vector<int>&,          \
                                          const ClassWeights*, double);                       \
    template class AdamW<T>;                                                                  \
    template metrics::MetricsReport evaluate(const vit::ViTModel<T>&, const data::LabeledSet&, \
                                             int, const metrics::RunMeta&);                   \
    template FinetuneResult<T> finetune_run(const vit::ViTModel<T>&, const data::LabeledSet&, \
                                            const data::LabeledSet&, const FinetuneConfig&);

BEVIT_FT_INSTANTIATE(float)
BEVIT_FT_INSTANTIATE(double)

#undef BEVIT_FT_INSTANTIATE

}  // namespace bevit::finetune
