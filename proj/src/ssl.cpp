#include "bevit/ssl.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "bevit/finetune.hpp"
#include "bevit/rng.hpp"

namespace bevit::ssl {

using num::Tensor;

void SSLConfig::validate() const {
    if (!(student_temp > teacher_temp && teacher_temp > 0))
        throw ConfigError("ssl temperatures need student_temp > teacher_temp > 0");
    if (center_momentum < 0 || center_momentum >= 1)
        throw ConfigError("center momentum must lie in [0, 1)");
    if (grid_split < 1 || grid_split > 5) throw ConfigError("grid split g must lie in 1..5");
    if (prototypes < 2) throw ConfigError("need at least 2 prototypes");
    if (local_crops < 0) throw ConfigError("local crop count cannot be negative");
    if (ema_base < 0 || ema_base > 1) throw ConfigError("ema base must lie in [0, 1]");
}

template <class T>
SslHead<T> init_ssl_head(int input_dim, const SSLConfig& cfg, std::uint64_t seed) {
    RandomStream rng(derive_seed(seed, "ssl.head"));
    // sigma = 1/sqrt(fan_in) keeps the bottleneck near unit norm at any width;
    // a fixed small sigma would make the L2 normalization ill-conditioned here
    auto init_linear = [&rng](std::int64_t in, std::int64_t out) {
        const double sigma = 1.0 / std::sqrt(static_cast<double>(in));
        std::vector<T> w(static_cast<std::size_t>(in * out));
        for (auto& v : w) v = static_cast<T>(rng.truncated_normal(sigma));
        vit::Linear<T> l;
        l.weight = Tensor<T>::from({in, out}, std::move(w), true);
        l.bias = Tensor<T>::zeros({out}, true);
        return l;
    };
    SslHead<T> head;
    head.fc1 = init_linear(input_dim, cfg.hidden_dim);
    head.fc2 = init_linear(cfg.hidden_dim, cfg.hidden_dim);
    head.fc3 = init_linear(cfg.hidden_dim, cfg.bottleneck_dim);
    std::vector<T> protos(static_cast<std::size_t>(cfg.prototypes) * cfg.bottleneck_dim);
    for (auto& v : protos) v = static_cast<T>(rng.truncated_normal(0.02));
    head.prototypes = Tensor<T>::from({cfg.prototypes, cfg.bottleneck_dim}, std::move(protos), true);
    SslHead<T> out = std::move(head);
    renormalize_prototypes(out);
    return out;
}

template <class T>
num::Tensor<T> head_forward(const SslHead<T>& head, const num::Tensor<T>& embeddings) {
    auto h1 = num::gelu(num::add(num::matmul(embeddings, head.fc1.weight), head.fc1.bias));
    auto h2 = num::gelu(num::add(num::matmul(h1, head.fc2.weight), head.fc2.bias));
    auto z = num::add(num::matmul(h2, head.fc3.weight), head.fc3.bias);
    auto zn = num::l2_normalize(z, 1, static_cast<T>(1e-12));
    return num::matmul(zn, num::transpose(head.prototypes, {1, 0}));
}

template <class T>
void renormalize_prototypes(SslHead<T>& head) {
    auto vals = head.prototypes.values_mut();
    const auto k = head.prototypes.dim(0);
    const auto d = head.prototypes.dim(1);
    for (std::int64_t r = 0; r < k; ++r) {
        T* row = vals.data() + r * d;
        T s = T(0);
        for (std::int64_t i = 0; i < d; ++i) s += row[i] * row[i];
        const T n = std::sqrt(s);
        if (n > T(0))
            for (std::int64_t i = 0; i < d; ++i) row[i] /= n;
    }
}

template <class T>
std::vector<vit::NamedParam<T>> head_params(const SslHead<T>& head) {
    return {
        {"ssl_head.fc1.weight", head.fc1.weight}, {"ssl_head.fc1.bias", head.fc1.bias},
        {"ssl_head.fc2.weight", head.fc2.weight}, {"ssl_head.fc2.bias", head.fc2.bias},
        {"ssl_head.fc3.weight", head.fc3.weight}, {"ssl_head.fc3.bias", head.fc3.bias},
        {"ssl_head.prototypes", head.prototypes},
    };
}

template <class T>
SslHead<T> clone_head(const SslHead<T>& head) {
    SslHead<T> out;
    out.fc1 = {head.fc1.weight.copy(), head.fc1.bias.copy()};
    out.fc2 = {head.fc2.weight.copy(), head.fc2.bias.copy()};
    out.fc3 = {head.fc3.weight.copy(), head.fc3.bias.copy()};
    out.prototypes = head.prototypes.copy();
    return out;
}

std::vector<img::Image> split_grid(const img::Image& image, int g, int out_size) {
    if (g < 1 || g > 5) throw ConfigError("grid split g must lie in 1..5");
    std::vector<img::Image> tiles;
    tiles.reserve(static_cast<std::size_t>(g) * g);
    for (int gy = 0; gy < g; ++gy)
        for (int gx = 0; gx < g; ++gx) {
            const int y0 = gy * image.height / g;
            const int y1 = (gy + 1) * image.height / g;
            const int x0 = gx * image.width / g;
            const int x1 = (gx + 1) * image.width / g;
            auto tile = img::crop(image, y0, x0, y1 - y0, x1 - x0);
            tiles.push_back(tile.height == out_size && tile.width == out_size
                                ? std::move(tile)
                                : img::resize_bilinear(tile, out_size, out_size));
        }
    return tiles;
}

ViewSet make_views(const img::Image& image, const SSLConfig& cfg, RandomStream& rng,
                   int out_size) {
    ViewSet views;
    auto jitter_flip = [&](img::Image v, bool strong) {
        if (rng.bernoulli(0.5)) v = img::hflip(v);
        if (rng.bernoulli(0.5)) v = img::vflip(v);
        if (strong) {
            if (cfg.view_rotation_deg > 0)
                v = img::rotate(v, rng.uniform(-cfg.view_rotation_deg, cfg.view_rotation_deg));
            if (cfg.view_jitter > 0) v = img::color_jitter(v, rng, cfg.view_jitter);
            if (cfg.view_sharpness) v = img::adjust_sharpness(v, rng.uniform(0.5, 1.8));
        }
        return v;
    };
    for (int i = 0; i < 2; ++i)
        views.global_views.push_back(jitter_flip(
            img::random_resized_crop(image, rng, cfg.global_scale_min, cfg.global_scale_max,
                                     out_size),
            true));
    for (int i = 0; i < cfg.local_crops; ++i)
        views.local_views.push_back(jitter_flip(
            img::random_resized_crop(image, rng, cfg.local_scale_min, cfg.local_scale_max,
                                     out_size),
            false));
    return views;
}

namespace {

// softmax((row - center)/temp) computed on plain values
template <class T>
std::vector<T> teacher_probs(const Tensor<T>& logits, const Tensor<T>& center, double temp) {
    const auto b = logits.dim(0), k = logits.dim(1);
    const auto lv = logits.values();
    const auto cv = center.values();
    std::vector<T> probs(static_cast<std::size_t>(b * k));
    for (std::int64_t r = 0; r < b; ++r) {
        T mx = -std::numeric_limits<T>::infinity();
        for (std::int64_t j = 0; j < k; ++j)
            mx = std::max(mx, static_cast<T>((lv[static_cast<std::size_t>(r * k + j)] -
                                              cv[static_cast<std::size_t>(j)]) /
                                             static_cast<T>(temp)));
        T denom = T(0);
        for (std::int64_t j = 0; j < k; ++j) {
            const T e = std::exp(static_cast<T>((lv[static_cast<std::size_t>(r * k + j)] -
                                                 cv[static_cast<std::size_t>(j)]) /
                                                static_cast<T>(temp)) -
                                 mx);
            probs[static_cast<std::size_t>(r * k + j)] = e;
            denom += e;
        }
        for (std::int64_t j = 0; j < k; ++j) probs[static_cast<std::size_t>(r * k + j)] /= denom;
    }
    return probs;
}

}  // namespace

template <class T>
num::Tensor<T> dino_loss(const std::vector<Tensor<T>>& student_logits,
                         const std::vector<Tensor<T>>& teacher_logits, const Tensor<T>& center,
                         double student_temp, double teacher_temp) {
    if (teacher_logits.empty() || student_logits.size() < 2)
        throw DomainError("dino_loss needs at least 1 teacher view and 2 student views");
    if (!(student_temp > 0) || !(teacher_temp > 0))
        throw DomainError("dino_loss temperatures must be positive");
    const auto k = teacher_logits[0].dim(1);
    for (const auto& t : teacher_logits)
        if (t.dim(1) != k) throw DimensionError("teacher prototype counts disagree");
    for (const auto& s : student_logits)
        if (s.dim(1) != k) throw DimensionError("student prototype counts disagree");

    Tensor<T> total;
    int pairs = 0;
    for (std::size_t t = 0; t < teacher_logits.size(); ++t) {
        const auto b = teacher_logits[t].dim(0);
        auto pt = Tensor<T>::from({b, k}, teacher_probs(teacher_logits[t], center, teacher_temp));
        for (std::size_t s = 0; s < student_logits.size(); ++s) {
            if (s == t) continue;  // same crop
            auto ls = num::log_softmax(
                num::scale(student_logits[s], static_cast<T>(1.0 / student_temp)), 1);
            auto ce = num::scale(num::mean(num::sum_axis(num::mul(pt, ls), 1)), T(-1));
            total = total.defined() ? num::add(total, ce) : ce;
            ++pairs;
        }
    }
    if (pairs == 0)
        throw DomainError("dino_loss pairing undefined: the only student view is the teacher crop");
    return num::scale(total, static_cast<T>(1.0 / pairs));
}

template <class T>
void ema_update(vit::ViTModel<T>& teacher, const vit::ViTModel<T>& student, double momentum) {
    if (momentum < 0 || momentum > 1) throw ConfigError("ema momentum must lie in [0, 1]");
    auto tp = vit::named_params(teacher);
    auto sp = vit::named_params(student);
    if (tp.size() != sp.size()) throw ModelError("ema_update: parameter structure mismatch");
    const T m = static_cast<T>(momentum);
    for (std::size_t i = 0; i < tp.size(); ++i) {
        if (tp[i].name != sp[i].name || tp[i].tensor.numel() != sp[i].tensor.numel())
            throw ModelError("ema_update: parameter " + tp[i].name + " does not match " +
                             sp[i].name);
        if (!sp[i].tensor.requires_grad()) continue;  // frozen on both sides, keep bitwise
        auto dst = tp[i].tensor.values_mut();
        const auto src = sp[i].tensor.values();
        for (std::size_t j = 0; j < dst.size(); ++j)
            dst[j] = m * dst[j] + (T(1) - m) * src[j];
    }
}

template <class T>
void ema_update_head(SslHead<T>& teacher, const SslHead<T>& student, double momentum) {
    if (momentum < 0 || momentum > 1) throw ConfigError("ema momentum must lie in [0, 1]");
    auto tp = head_params(teacher);
    auto sp = head_params(student);
    const T m = static_cast<T>(momentum);
    for (std::size_t i = 0; i < tp.size(); ++i) {
        if (tp[i].tensor.numel() != sp[i].tensor.numel())
            throw ModelError("ema_update_head: structure mismatch");
        auto dst = tp[i].tensor.values_mut();
        const auto src = sp[i].tensor.values();
        for (std::size_t j = 0; j < dst.size(); ++j)
            dst[j] = m * dst[j] + (T(1) - m) * src[j];
    }
}

template <class T>
void update_center(Tensor<T>& center, const Tensor<T>& teacher_logits_rows,
                   double center_momentum) {
    if (center_momentum < 0 || center_momentum >= 1)
        throw ConfigError("center momentum must lie in [0, 1)");
    const auto rows = teacher_logits_rows.dim(0);
    const auto k = teacher_logits_rows.dim(1);
    if (center.numel() != k) throw DimensionError("center width mismatch");
    const auto lv = teacher_logits_rows.values();
    auto cv = center.values_mut();
    const T m = static_cast<T>(center_momentum);
    for (std::int64_t j = 0; j < k; ++j) {
        T mean = T(0);
        for (std::int64_t r = 0; r < rows; ++r) mean += lv[static_cast<std::size_t>(r * k + j)];
        mean /= static_cast<T>(rows);
        cv[static_cast<std::size_t>(j)] = m * cv[static_cast<std::size_t>(j)] + (T(1) - m) * mean;
    }
}

template <class T>
double teacher_entropy(const Tensor<T>& teacher_logits_rows, const Tensor<T>& center,
                       double teacher_temp) {
    const auto rows = teacher_logits_rows.dim(0);
    const auto k = teacher_logits_rows.dim(1);
    const auto probs = teacher_probs(teacher_logits_rows, center, teacher_temp);
    double total = 0.0;
    for (std::int64_t r = 0; r < rows; ++r) {
        double h = 0.0;
        for (std::int64_t j = 0; j < k; ++j) {
            const double p = static_cast<double>(probs[static_cast<std::size_t>(r * k + j)]);
            if (p > 0) h -= p * std::log(p);
        }
        total += h;
    }
    return total / static_cast<double>(rows);
}

std::string ssl_log_csv_header() { return "step,loss,teacher_entropy,lr,ema_momentum"; }

std::string ssl_log_csv_row(const StepLog& row) {
    char buf[192];
    std::snprintf(buf, sizeof buf, "%lld,%.6f,%.6f,%.8f,%.8f", static_cast<long long>(row.step),
                  row.loss, row.teacher_entropy, row.lr, row.ema_momentum);
    return std::string(buf);
}

template <class T>
SslResult<T> post_pretrain(const vit::ViTModel<T>& model, const std::vector<img::Image>& dataset,
                           const SSLConfig& cfg, blockexp::FreezePolicy policy) {
    cfg.validate();
    if (dataset.empty()) throw DataError("post_pretrain: empty dataset");
    if (policy == blockexp::FreezePolicy::FrozenBackbone)
        throw ConfigError("post_pretrain trains the encoder; use unfrozen or be_ssl");

    auto student = vit::clone_model(model);
    blockexp::apply_freeze_policy(student, policy);
    auto teacher = vit::clone_model(student);
    const int head_in = cfg.head_input == vit::EmbeddingStrategy::Concat ? 2 * student.cfg.dim
                                                                          : student.cfg.dim;
    auto student_head = init_ssl_head<T>(head_in, cfg, cfg.seed);
    auto teacher_head = clone_head(student_head);
    auto center = Tensor<T>::zeros({cfg.prototypes});

    SslResult<T> result;
    if (cfg.epochs == 0) {
        result.encoder = std::move(teacher);
        return result;
    }

    // grid tiles multiply the working set
    const int input = student.cfg.image_size;
    std::vector<img::Image> tiles;
    for (const auto& im : dataset)
        for (auto& t : split_grid(im, cfg.grid_split, input)) tiles.push_back(std::move(t));

    std::vector<Tensor<T>> trainables;
    for (const auto& p : vit::named_params(student))
        if (p.tensor.requires_grad()) trainables.push_back(p.tensor);
    for (const auto& p : head_params(student_head)) trainables.push_back(p.tensor);
    finetune::AdamWOptions opt;
    opt.weight_decay = cfg.weight_decay;
    finetune::AdamW<T> optimizer(trainables, opt);

    const std::int64_t steps_per_epoch =
        static_cast<std::int64_t>((tiles.size() + static_cast<std::size_t>(cfg.batch_size) - 1) /
                                  static_cast<std::size_t>(cfg.batch_size));
    const std::int64_t total_steps = std::max<std::int64_t>(1, cfg.epochs * steps_per_epoch);
    const std::int64_t warmup = std::min<std::int64_t>(total_steps / 10, total_steps - 1);

    std::vector<std::size_t> order(tiles.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::int64_t step = 0;

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        RandomStream shuffle_rng(derive_seed(cfg.seed, "ssl.shuffle",
                                             static_cast<std::uint64_t>(epoch)));
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[shuffle_rng.uniform_int(i)]);

        for (std::size_t start = 0; start < order.size();
             start += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t stop =
                std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
            const int n_views = 2 + cfg.local_crops;
            std::vector<std::vector<img::Image>> view_batches(
                static_cast<std::size_t>(n_views));
            for (std::size_t i = start; i < stop; ++i) {
                RandomStream vrng(derive_seed(cfg.seed, "ssl.views",
                                              (static_cast<std::uint64_t>(epoch) << 40) |
                                                  static_cast<std::uint64_t>(order[i])));
                auto views = make_views(tiles[order[i]], cfg, vrng, input);
                view_batches[0].push_back(views.global_views[0]);
                view_batches[1].push_back(views.global_views[1]);
                for (int l = 0; l < cfg.local_crops; ++l)
                    view_batches[static_cast<std::size_t>(2 + l)].push_back(views.local_views[
                        static_cast<std::size_t>(l)]);
            }

            num::Tape<T>::active().clear();
            std::vector<Tensor<T>> student_logits;
            for (const auto& vb : view_batches) {
                auto emb = vit::extract_embedding(student, img::to_batch<T>(vb), cfg.head_input);
                student_logits.push_back(head_forward(student_head, emb));
            }
            std::vector<Tensor<T>> teacher_logits;
            {
                num::NoGradGuard ng;
                for (int g = 0; g < 2; ++g) {
                    auto emb = vit::extract_embedding(
                        teacher, img::to_batch<T>(view_batches[static_cast<std::size_t>(g)]),
                        cfg.head_input);
                    teacher_logits.push_back(head_forward(teacher_head, emb));
                }
            }

            auto loss = dino_loss(student_logits, teacher_logits, center, cfg.student_temp,
                                  cfg.teacher_temp);
            num::backward(loss);
            const double lr =
                finetune::lr_at_step(step, warmup, total_steps, cfg.lr, cfg.lr / 100.0);
            optimizer.step(lr);
            optimizer.zero_grad();
            renormalize_prototypes(student_head);
            num::Tape<T>::active().clear();

            const double progress = static_cast<double>(step) / static_cast<double>(total_steps);
            const double momentum =
                1.0 - (1.0 - cfg.ema_base) * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
            ema_update(teacher, student, momentum);
            ema_update_head(teacher_head, student_head, momentum);

            auto all_teacher = num::concat(teacher_logits, 0);
            const double entropy = teacher_entropy(all_teacher, center, cfg.teacher_temp);
            // first step seeds the center with the batch mean instead of zero
            update_center(center, all_teacher, step == 0 ? 0.0 : cfg.center_momentum);

            result.log.push_back({step, static_cast<double>(loss.item()), entropy, lr, momentum});
            ++step;
        }
    }

    result.encoder = cfg.return_teacher ? std::move(teacher) : std::move(student);
    return result;
}

#define BEVIT_SSL_INSTANTIATE(T)                                                               \
    template SslHead<T> init_ssl_head(int, const SSLConfig&, std::uint64_t);                   \
    template Tensor<T> head_forward(const SslHead<T>&, const Tensor<T>&);                      \
    template void renormalize_prototypes(SslHead<T>&);                                         \
    template std::vector<vit::NamedParam<T>> head_params(const SslHead<T>&);                   \
    template SslHead<T> clone_head(const SslHead<T>&);                                         \
    template Tensor<T> dino_loss(const std::vector<Tensor<T>>&, const std::vector<Tensor<T>>&, \
                                 const Tensor<T>&, double, double);                            \
    template void ema_update(vit::ViTModel<T>&, const vit::ViTModel<T>&, double);              \
    template void ema_update_head(SslHead<T>&, const SslHead<T>&, double);                     \
    template void update_center(Tensor<T>&, const Tensor<T>&, double);                         \
    template double teacher_entropy(const Tensor<T>&, const Tensor<T>&, double);               \
    template SslResult<T> post_pretrain(const vit::ViTModel<T>&, const std::vector<img::Image>&, \
                                        const SSLConfig&, blockexp::FreezePolicy);

BEVIT_SSL_INSTANTIATE(float)
BEVIT_SSL_INSTANTIATE(double)

#undef BEVIT_SSL_INSTANTIATE

}  // namespace bevit::ssl
