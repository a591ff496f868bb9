// Acceptance suite: one pass/fail line per criterion, exit code = failures.
//
// Gradient comparisons use relative error with an absolute fallback for
// near-zero coordinates: err = min(|a-n|, |a-n| / max(|a|, |n|)).

#include <chrono>
#include <numeric>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "bevit/blockexp.hpp"
#include "bevit/checkpoint.hpp"
#include "bevit/config.hpp"
#include "bevit/data.hpp"
#include "bevit/experiments.hpp"
#include "bevit/finetune.hpp"
#include "bevit/metrics.hpp"
#include "bevit/rng.hpp"
#include "bevit/ssl.hpp"
#include "bevit/vit.hpp"
#include "oracles.hpp"

namespace fs = std::filesystem;
using namespace bevit;

namespace {

struct Criterion {
    int id;
    const char* name;
    std::function<bool(std::string&)> run;
};

template <class T>
num::Tensor<T> random_batch(const vit::ViTConfig& cfg, int b, RandomStream& rng) {
    std::vector<T> v(static_cast<std::size_t>(b) * cfg.image_size * cfg.image_size * cfg.channels);
    for (auto& x : v) x = static_cast<T>(rng.uniform());
    return num::Tensor<T>::from({b, cfg.image_size, cfg.image_size, cfg.channels}, std::move(v));
}

// ---------------------------------------------------------------- criterion 1

bool identity_invariance(std::string& detail) {
    num::NoGradGuard ng;
    int batches = 0;
    float worst32 = 0.0f;
    for (int depth : {4, 8, 12}) {
        vit::ViTConfig cfg;
        cfg.image_size = 16;
        cfg.patch_size = 8;
        cfg.dim = 16;
        cfg.depth = depth;
        cfg.heads = 4;
        auto model = vit::init_model<float>(cfg, 100 + static_cast<std::uint64_t>(depth));
        RandomStream rng(500 + static_cast<std::uint64_t>(depth));
        for (int k = 1; k <= depth; ++k) {
            auto expanded = blockexp::expand_blocks(model, k);
            for (int b = 0; b < 4; ++b) {
                auto batch = random_batch<float>(cfg, 2, rng);
                auto base = vit::forward(model, batch);
                auto out = vit::forward(expanded, batch);
                for (std::size_t i = 0; i < base.cls.values().size(); ++i)
                    worst32 = std::max(worst32, std::fabs(out.cls.values()[i] -
                                                          base.cls.values()[i]));
                for (std::size_t i = 0; i < base.patch_mean.values().size(); ++i)
                    worst32 = std::max(worst32, std::fabs(out.patch_mean.values()[i] -
                                                          base.patch_mean.values()[i]));
                ++batches;
            }
        }
    }
    double worst64 = 0.0;
    {
        vit::ViTConfig cfg;
        cfg.image_size = 16;
        cfg.patch_size = 8;
        cfg.dim = 16;
        cfg.depth = 6;
        cfg.heads = 4;
        auto model = vit::init_model<double>(cfg, 321);
        RandomStream rng(654);
        for (int k = 1; k <= 6; ++k) {
            auto expanded = blockexp::expand_blocks(model, k);
            auto batch = random_batch<double>(cfg, 2, rng);
            auto base = vit::forward(model, batch);
            auto out = vit::forward(expanded, batch);
            for (std::size_t i = 0; i < base.cls.values().size(); ++i)
                worst64 = std::max(worst64,
                                   std::fabs(out.cls.values()[i] - base.cls.values()[i]));
            ++batches;
        }
    }
    char buf[160];
    std::snprintf(buf, sizeof buf, "%d batches, max|diff| 32-bit %.3g, 64-bit %.3g", batches,
                  static_cast<double>(worst32), worst64);
    detail = buf;
    return batches >= 100 && worst32 < 1e-5f && worst64 == 0.0;
}

// ---------------------------------------------------------------- criterion 2

bool parameter_accounting(std::string& detail) {
    vit::ViTConfig vitb;
    vitb.image_size = 224;
    vitb.patch_size = 16;
    vitb.dim = 768;
    vitb.depth = 1;
    vitb.heads = 12;
    const auto closed_form = vit::params_per_block(vitb);

    auto model768 = vit::init_model<float>(vitb, 1);
    std::int64_t measured = 0;
    for (const auto& p : vit::named_params(model768))
        if (p.name.rfind("block.0.", 0) == 0) measured += p.tensor.numel();

    vit::attach_head(model768, 5, vit::EmbeddingStrategy::Cls, 2);
    blockexp::apply_freeze_policy(model768, blockexp::FreezePolicy::FrozenBackbone);
    const auto head768 = vit::count_params(model768, true);

    vit::ViTConfig big = vitb;
    big.dim = 1024;
    big.heads = 16;
    big.depth = 0;
    auto model1024 = vit::init_model<float>(big, 1);
    vit::attach_head(model1024, 5, vit::EmbeddingStrategy::Cls, 2);
    blockexp::apply_freeze_policy(model1024, blockexp::FreezePolicy::FrozenBackbone);
    const auto head1024 = vit::count_params(model1024, true);

    char buf[160];
    std::snprintf(buf, sizeof buf,
                  "head768=%lld head1024=%lld per_block=%lld (measured %lld)",
                  static_cast<long long>(head768), static_cast<long long>(head1024),
                  static_cast<long long>(closed_form), static_cast<long long>(measured));
    detail = buf;
    return head768 == 3845 && head1024 == 5125 && closed_form == 7'087'872 &&
           measured == 7'087'872;
}

// ---------------------------------------------------------------- criterion 3

bool freeze_audits(std::string& detail) {
    vit::ViTConfig cfg;
    cfg.image_size = 16;
    cfg.patch_size = 8;
    cfg.dim = 16;
    cfg.depth = 2;
    cfg.heads = 2;

    bool ok = true;
    std::string parts;

    {  // frozen-backbone arm: 100 supervised steps
        auto model = vit::init_model<float>(cfg, 11);
        vit::attach_head(model, 3, vit::EmbeddingStrategy::Cls, 12);
        auto work = vit::clone_model(model);
        blockexp::apply_freeze_policy(work, blockexp::FreezePolicy::FrozenBackbone);
        std::vector<num::Tensor<float>> trainables;
        for (const auto& p : vit::named_params(work))
            if (p.tensor.requires_grad()) trainables.push_back(p.tensor);
        finetune::AdamW<float> adam(trainables, {});
        RandomStream rng(13);
        auto batch = random_batch<float>(cfg, 4, rng);
        std::vector<int> targets = {0, 1, 2, 1};
        for (int step = 0; step < 100; ++step) {
            num::Tape<float>::active().clear();
            auto res = vit::forward(work, batch);
            num::backward(num::cross_entropy(res.logits, targets));
            adam.step(1e-3);
            adam.zero_grad();
        }
        num::Tape<float>::active().clear();
        auto before = vit::named_params(model);
        auto after = vit::named_params(work);
        bool frozen_ok = true, trainable_moved = false;
        for (std::size_t i = 0; i < before.size(); ++i) {
            const bool is_head = before[i].name.rfind("head", 0) == 0;
            for (std::size_t j = 0; j < before[i].tensor.values().size(); ++j) {
                const bool same = before[i].tensor.values()[j] == after[i].tensor.values()[j];
                if (is_head) trainable_moved = trainable_moved || !same;
                else frozen_ok = frozen_ok && same;
            }
        }
        ok = ok && frozen_ok && trainable_moved;
        parts += "frozen_bb ";
        parts += (frozen_ok && trainable_moved) ? "ok" : "VIOLATED";
    }

    {  // block-expansion SSL arm: 100 self-distillation steps
        auto base = vit::init_model<float>(cfg, 21);
        auto model = blockexp::expand_blocks(base, 1);
        auto work = vit::clone_model(model);
        blockexp::apply_freeze_policy(work, blockexp::FreezePolicy::BeSsl);
        ssl::SSLConfig scfg;
        scfg.prototypes = 16;
        scfg.hidden_dim = 16;
        scfg.bottleneck_dim = 8;
        auto head = ssl::init_ssl_head<float>(cfg.dim, scfg, 22);
        std::vector<num::Tensor<float>> trainables;
        for (const auto& p : vit::named_params(work))
            if (p.tensor.requires_grad()) trainables.push_back(p.tensor);
        for (const auto& p : ssl::head_params(head)) trainables.push_back(p.tensor);
        finetune::AdamW<float> adam(trainables, {});
        auto center = num::Tensor<float>::zeros({scfg.prototypes});
        RandomStream rng(23);
        for (int step = 0; step < 100; ++step) {
            num::Tape<float>::active().clear();
            std::vector<num::Tensor<float>> student;
            std::vector<num::Tensor<float>> teacher;
            for (int v = 0; v < 3; ++v) {
                auto batch = random_batch<float>(cfg, 2, rng);
                student.push_back(ssl::head_forward(head, vit::forward(work, batch).cls));
                if (v < 2) {
                    num::NoGradGuard ng;
                    teacher.push_back(
                        ssl::head_forward(head, vit::forward(work, batch).cls).detach());
                }
            }
            auto loss = ssl::dino_loss(student, teacher, center, 0.1, 0.04);
            num::backward(loss);
            adam.step(1e-3);
            adam.zero_grad();
        }
        num::Tape<float>::active().clear();
        auto before = vit::named_params(model);
        auto after = vit::named_params(work);
        bool frozen_ok = true, trainable_moved = false;
        for (std::size_t i = 0; i < before.size(); ++i) {
            const bool expanded = before[i].name.rfind("block.2.", 0) == 0;  // copy of block 1
            for (std::size_t j = 0; j < before[i].tensor.values().size(); ++j) {
                const bool same = before[i].tensor.values()[j] == after[i].tensor.values()[j];
                if (expanded) trainable_moved = trainable_moved || !same;
                else frozen_ok = frozen_ok && same;
            }
        }
        ok = ok && frozen_ok && trainable_moved;
        parts += ", be_ssl ";
        parts += (frozen_ok && trainable_moved) ? "ok" : "VIOLATED";
    }
    detail = parts + " (100 steps each, bitwise)";
    return ok;
}

// ---------------------------------------------------------------- criterion 4

bool gradient_correctness(std::string& detail) {
    vit::ViTConfig cfg;
    cfg.image_size = 8;
    cfg.patch_size = 4;
    cfg.dim = 16;
    cfg.depth = 2;
    cfg.heads = 2;

    double worst_overall = 0.0;
    int total_probes = 0;

    auto probe_model = [&](const std::function<double()>& fwd,
                           std::vector<vit::NamedParam<double>> params, std::uint64_t pick_seed,
                           int probes) {
        RandomStream pick(pick_seed);
        double worst = 0.0;
        int done = 0;
        while (done < probes) {
            auto& p = params[pick.uniform_int(params.size())];
            if (!p.tensor.has_grad()) continue;
            const auto idx = static_cast<std::size_t>(
                pick.uniform_int(static_cast<std::uint64_t>(p.tensor.numel())));
            num::NoGradGuard ng;
            auto vals = p.tensor.values_mut();
            const double orig = vals[idx];
            const double h = 1e-6;
            vals[idx] = orig + h;
            const double fp = fwd();
            vals[idx] = orig - h;
            const double fm = fwd();
            vals[idx] = orig;
            const double fd = (fp - fm) / (2 * h);
            const double an = p.tensor.grad()[idx];
            const double abs_err = std::fabs(an - fd);
            const double err =
                std::min(abs_err, abs_err / std::max(std::fabs(an), std::fabs(fd)));
            worst = std::max(worst, err);
            ++done;
            ++total_probes;
        }
        return worst;
    };

    RandomStream rng(41);
    auto batch = random_batch<double>(cfg, 2, rng);
    std::vector<int> targets = {0, 2};
    std::vector<int> wl = {0, 0, 1, 2, 2, 2};
    auto weights = finetune::class_weights(wl, 3);
    std::vector<double> wv(weights.factors.begin(), weights.factors.end());
    auto weight_tensor = num::Tensor<double>::from({3}, wv);

    for (int variant = 0; variant < 3; ++variant) {
        auto model = vit::init_model<double>(cfg, 42 + static_cast<std::uint64_t>(variant));
        vit::attach_head(model, 3, vit::EmbeddingStrategy::Cls, 43);
        auto loss_of = [&]() -> num::Tensor<double> {
            auto res = vit::forward(model, batch);
            if (variant == 0) return num::cross_entropy(res.logits, targets);
            if (variant == 1) return num::cross_entropy(res.logits, targets, weight_tensor);
            return finetune::distance_scaled_ce(res.logits, targets, &weights, 1.0);
        };
        auto fwd = [&]() {
            num::NoGradGuard ng;
            return loss_of().item();
        };
        num::Tape<double>::active().clear();
        num::backward(loss_of());
        worst_overall = std::max(
            worst_overall, probe_model(fwd, vit::named_params(model),
                                       91 + static_cast<std::uint64_t>(variant), 55));
        num::Tape<double>::active().clear();
    }

    {  // self-distillation loss through the encoder and projection head
        auto model = vit::init_model<double>(cfg, 77);
        ssl::SSLConfig scfg;
        scfg.prototypes = 12;
        scfg.hidden_dim = 12;
        scfg.bottleneck_dim = 6;
        auto head = ssl::init_ssl_head<double>(cfg.dim, scfg, 78);
        auto center = num::Tensor<double>::zeros({scfg.prototypes});
        RandomStream vr(79);
        auto v0 = random_batch<double>(cfg, 2, vr);
        auto v1 = random_batch<double>(cfg, 2, vr);
        std::vector<num::Tensor<double>> teacher;
        {
            num::NoGradGuard ng;
            teacher.push_back(ssl::head_forward(head, vit::forward(model, v0).cls).detach());
        }
        auto loss_of = [&]() {
            std::vector<num::Tensor<double>> student = {
                ssl::head_forward(head, vit::forward(model, v0).cls),
                ssl::head_forward(head, vit::forward(model, v1).cls)};
            return ssl::dino_loss(student, teacher, center, 0.1, 0.04);
        };
        auto fwd = [&]() {
            num::NoGradGuard ng;
            return loss_of().item();
        };
        num::Tape<double>::active().clear();
        num::backward(loss_of());
        auto params = vit::named_params(model);
        for (const auto& p : ssl::head_params(head)) params.push_back(p);
        worst_overall = std::max(worst_overall, probe_model(fwd, params, 95, 55));
        num::Tape<double>::active().clear();
    }

    char buf[128];
    std::snprintf(buf, sizeof buf, "%d probes over 4 loss variants, worst rel err %.3g",
                  total_probes, worst_overall);
    detail = buf;
    return total_probes >= 200 && worst_overall < 1e-6;
}

// ---------------------------------------------------------------- criterion 5

bool metric_oracles(std::string& detail) {
    RandomStream rng(1009);
    double worst = 0.0;
    const int instances = 1000;

    for (int t = 0; t < instances; ++t) {
        const int n_classes = 2 + static_cast<int>(rng.uniform_int(4));
        const int n = 8 + static_cast<int>(rng.uniform_int(56));
        std::vector<int> labels(static_cast<std::size_t>(n)), preds(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) {
            labels[static_cast<std::size_t>(i)] = static_cast<int>(rng.uniform_int(n_classes));
            preds[static_cast<std::size_t>(i)] = static_cast<int>(rng.uniform_int(n_classes));
        }
        labels[0] = 0;
        labels[1] = 1;
        const auto cm = metrics::confusion(preds, labels, n_classes);
        worst = std::max(worst, std::fabs(metrics::accuracy(cm) -
                                          oracles::accuracy_pairs(preds, labels)));
        worst = std::max(worst, std::fabs(metrics::macro_f1(cm) -
                                          oracles::macro_f1_pairs(preds, labels, n_classes)));
        worst = std::max(worst, std::fabs(metrics::qkappa(cm) -
                                          oracles::qkappa_pairs(preds, labels, n_classes)));
    }

    for (int t = 0; t < instances; ++t) {
        const int n = 6 + static_cast<int>(rng.uniform_int(195));
        std::vector<double> scores(static_cast<std::size_t>(n));
        std::vector<int> labels(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) {
            scores[static_cast<std::size_t>(i)] =
                static_cast<double>(rng.uniform_int(17)) / 16.0;  // heavy ties
            labels[static_cast<std::size_t>(i)] = static_cast<int>(rng.uniform_int(2));
        }
        labels[0] = 1;
        labels[1] = 0;
        worst = std::max(worst, std::fabs(metrics::auc_binary(scores, labels) -
                                          oracles::auc_pairs(scores, labels)));
    }

    for (int t = 0; t < instances; ++t) {
        const int n_classes = 3 + static_cast<int>(rng.uniform_int(3));
        const int n = 12 + static_cast<int>(rng.uniform_int(40));
        std::vector<double> probs;
        std::vector<int> labels;
        for (int i = 0; i < n; ++i) {
            labels.push_back(static_cast<int>(rng.uniform_int(n_classes)));
            double total = 0;
            std::vector<double> row;
            for (int c2 = 0; c2 < n_classes; ++c2) {
                row.push_back(rng.uniform(0.01, 1.0));
                total += row.back();
            }
            for (double v : row) probs.push_back(v / total);
        }
        for (int c2 = 0; c2 < n_classes && c2 < n; ++c2) labels[static_cast<std::size_t>(c2)] = c2;
        const auto got = metrics::auc_macro_ovr(probs, n_classes, labels);
        double want = 0.0;
        int used = 0;
        for (int c2 = 0; c2 < n_classes; ++c2) {
            std::vector<double> col;
            std::vector<int> bin;
            std::int64_t pos = 0;
            for (int i = 0; i < n; ++i) {
                col.push_back(probs[static_cast<std::size_t>(i * n_classes + c2)]);
                bin.push_back(labels[static_cast<std::size_t>(i)] == c2 ? 1 : 0);
                pos += bin.back();
            }
            if (pos == 0 || pos == n) continue;
            want += oracles::auc_pairs(col, bin);
            ++used;
        }
        want /= used;
        worst = std::max(worst, std::fabs(got.auc - want));
    }

    std::int64_t knn_checked = 0;
    for (int t = 0; t < instances; ++t) {
        const int dim = 3 + static_cast<int>(rng.uniform_int(5));
        const int nref = (t % 50 == 0) ? 500 : 16 + static_cast<int>(rng.uniform_int(80));
        const int nq = 4 + static_cast<int>(rng.uniform_int(8));
        const int ncls = 2 + static_cast<int>(rng.uniform_int(4));
        const int k = 1 + static_cast<int>(rng.uniform_int(std::min(20, nref)));
        std::vector<double> ref(static_cast<std::size_t>(nref * dim));
        std::vector<double> q(static_cast<std::size_t>(nq * dim));
        std::vector<int> rl(static_cast<std::size_t>(nref)), ql(static_cast<std::size_t>(nq));
        for (auto& v : ref) v = rng.uniform(-1, 1);
        for (auto& v : q) v = rng.uniform(-1, 1);
        for (auto& l : rl) l = static_cast<int>(rng.uniform_int(ncls));
        for (auto& l : ql) l = static_cast<int>(rng.uniform_int(ncls));
        auto got = metrics::knn_eval(ref, rl, q, ql, dim, metrics::KnnConfig{k});
        std::int64_t hits = 0;
        for (int qi = 0; qi < nq; ++qi) {
            std::span<const double> row(q.data() + qi * dim, static_cast<std::size_t>(dim));
            if (oracles::knn_top1_vote(ref, rl, row, dim, k) == ql[static_cast<std::size_t>(qi)])
                ++hits;
        }
        worst = std::max(worst, std::fabs(got.top1 - static_cast<double>(hits) / nq));
        knn_checked += nref;
    }

    // exact special values and the worked example
    metrics::ConfusionMatrix diag;
    diag.n_classes = 3;
    diag.counts = {4, 0, 0, 0, 6, 0, 0, 0, 2};
    const bool diag_one = metrics::qkappa(diag) == 1.0;
    metrics::ConfusionMatrix indep;
    indep.n_classes = 2;
    indep.counts = {1, 1, 1, 1};
    const bool indep_zero = metrics::qkappa(indep) == 0.0;
    metrics::ConfusionMatrix worked;
    worked.n_classes = 3;
    worked.counts = {2, 1, 0, 0, 2, 0, 0, 0, 1};
    const bool worked_ok = std::fabs(metrics::qkappa(worked) - 0.8421) < 1e-4;

    char buf[160];
    std::snprintf(buf, sizeof buf,
                  "max |delta| %.3g over 4000 instances; diag=1 %s, indep=0 %s, 0.8421 %s", worst,
                  diag_one ? "ok" : "BAD", indep_zero ? "ok" : "BAD", worked_ok ? "ok" : "BAD");
    detail = buf;
    return worst < 1e-12 && diag_one && indep_zero && worked_ok;
}

// ------------------------------------------------------- criteria 6-8 helpers

struct ToySetup {
    vit::ViTConfig encoder_cfg;
    ssl::SSLConfig ssl_cfg;
    data::SyntheticSpec data_spec;
};

ToySetup toy_setup() {
    ToySetup s;
    s.encoder_cfg.image_size = 24;
    s.encoder_cfg.patch_size = 8;
    s.encoder_cfg.dim = 48;
    s.encoder_cfg.depth = 4;
    s.encoder_cfg.heads = 4;

    s.ssl_cfg.prototypes = 48;
    s.ssl_cfg.hidden_dim = 64;
    s.ssl_cfg.bottleneck_dim = 24;
    s.ssl_cfg.local_crops = 2;
    s.ssl_cfg.epochs = 8;
    s.ssl_cfg.batch_size = 8;
    s.ssl_cfg.lr = 2e-3;

    s.data_spec.n_per_class = 40;
    s.data_spec.class_count = 5;
    s.data_spec.image_size = 24;
    return s;
}

data::DatasetSplits split_spec(const data::SyntheticSpec& spec, std::uint64_t split_seed,
                               const std::string& name) {
    auto ds = data::synth_generate(spec);
    return data::split_synthetic(ds, spec.class_count, {0.6, 0.15, 0.25}, split_seed, name);
}

template <class T>
double frozen_probe_qkappa(const vit::ViTModel<T>& encoder, const data::DatasetSplits& splits,
                           std::uint64_t seed) {
    auto model = vit::clone_model(encoder);
    vit::attach_head(model, splits.class_count, vit::EmbeddingStrategy::Cls,
                     derive_seed(seed, "probe.head"));
    finetune::FinetuneConfig fc;
    fc.mode = blockexp::FreezePolicy::FrozenBackbone;
    fc.epochs = 30;
    fc.batch_size = 16;
    fc.peak_lr = 1e-2;
    fc.warmup_steps = 5;
    fc.use_augment = false;
    fc.seed = derive_seed(seed, "probe");
    auto run = finetune::finetune_run(model, splits.train, splits.val, fc);
    auto rep = finetune::evaluate(run.best, splits.test, 16, metrics::RunMeta{});
    return rep.qkappa;
}

// ---------------------------------------------------------------- criterion 6

bool forgetting_direction(std::string& detail) {
    const auto setup = toy_setup();
    std::vector<double> delta_be, delta_retrain;
    for (int seed = 0; seed < 5; ++seed) {
        const auto root = derive_seed(9000, "forgetting", static_cast<std::uint64_t>(seed));
        auto spec_a = setup.data_spec;
        spec_a.domain_id = 0;
        spec_a.seed = derive_seed(root, "dataA");
        auto spec_b = setup.data_spec;
        spec_b.domain_id = 1;
        spec_b.seed = derive_seed(root, "dataB");
        auto splits_a = split_spec(spec_a, derive_seed(root, "splitA"), "A");
        auto images_b = data::synth_generate(spec_b).images;

        auto model = vit::init_model<float>(setup.encoder_cfg, derive_seed(root, "init"));
        auto pre_cfg = setup.ssl_cfg;
        pre_cfg.seed = derive_seed(root, "pretrain");
        std::vector<img::Image> images_a = splits_a.train.images;
        auto base = ssl::post_pretrain(model, images_a, pre_cfg,
                                       blockexp::FreezePolicy::Unfrozen);

        auto knn_a = [&](const vit::ViTModel<float>& enc) {
            num::NoGradGuard ng;
            std::vector<double> ref, query;
            for (const auto& im : splits_a.train.images) {
                auto emb = vit::extract_embedding(enc, img::to_batch<float>({&im, 1}),
                                                  vit::EmbeddingStrategy::Cls);
                for (float v : emb.values()) ref.push_back(v);
            }
            for (const auto& im : splits_a.test.images) {
                auto emb = vit::extract_embedding(enc, img::to_batch<float>({&im, 1}),
                                                  vit::EmbeddingStrategy::Cls);
                for (float v : emb.values()) query.push_back(v);
            }
            return metrics::knn_eval(ref, splits_a.train.labels, query, splits_a.test.labels,
                                     enc.cfg.dim, metrics::KnnConfig{20});
        };
        const auto baseline = knn_a(base.encoder);

        auto adapt_cfg = setup.ssl_cfg;
        adapt_cfg.epochs = 6;
        adapt_cfg.seed = derive_seed(root, "adapt");
        auto retrain = ssl::post_pretrain(base.encoder, images_b, adapt_cfg,
                                          blockexp::FreezePolicy::Unfrozen);
        auto expanded = blockexp::expand_blocks(base.encoder, 2);
        auto be = ssl::post_pretrain(expanded, images_b, adapt_cfg,
                                     blockexp::FreezePolicy::BeSsl);

        delta_retrain.push_back(
            metrics::forgetting_delta(baseline, knn_a(retrain.encoder)).top1_points);
        delta_be.push_back(metrics::forgetting_delta(baseline, knn_a(be.encoder)).top1_points);
    }
    const double mean_be =
        std::accumulate(delta_be.begin(), delta_be.end(), 0.0) / delta_be.size();
    const double mean_retrain =
        std::accumulate(delta_retrain.begin(), delta_retrain.end(), 0.0) / delta_retrain.size();
    char buf[160];
    std::snprintf(buf, sizeof buf, "mean dTop1: be %+0.3f pts, retrain %+0.3f pts (5 seeds)",
                  mean_be, mean_retrain);
    detail = buf;
    return mean_be > mean_retrain && mean_be >= -2.0 && mean_retrain < mean_be - 1.0;
}

// ---------------------------------------------------------------- criterion 7

bool fewshot_behavior(std::string& detail) {
    auto setup = toy_setup();
    auto spec = setup.data_spec;
    spec.n_per_class = 60;
    spec.seed = derive_seed(9100, "data");
    auto splits = split_spec(spec, derive_seed(9100, "split"), "dr_proxy");

    auto model = vit::init_model<float>(setup.encoder_cfg, derive_seed(9100, "init"));
    auto pre_cfg = setup.ssl_cfg;
    pre_cfg.seed = derive_seed(9100, "pretrain");
    auto encoder =
        ssl::post_pretrain(model, splits.train.images, pre_cfg, blockexp::FreezePolicy::Unfrozen)
            .encoder;

    const std::vector<int> grid = {2, 4, 8, 16};
    std::vector<double> means, sems;
    std::string curve;
    for (std::size_t gi = 0; gi < grid.size(); ++gi) {
        std::vector<metrics::MetricsReport> cell;
        for (int rep = 0; rep < 5; ++rep) {
            const auto seed = derive_seed(9100, "fewshot",
                                          (static_cast<std::uint64_t>(gi) << 16) |
                                              static_cast<std::uint64_t>(rep));
            auto sample = data::few_shot_sample(splits.train.labels, grid[gi], seed);
            data::LabeledSet train;
            for (auto idx : sample.indices) {
                train.images.push_back(splits.train.images[idx]);
                train.labels.push_back(splits.train.labels[idx]);
            }
            auto probe = vit::clone_model(encoder);
            vit::attach_head(probe, splits.class_count, vit::EmbeddingStrategy::Cls,
                             derive_seed(seed, "head"));
            finetune::FinetuneConfig fc;
            fc.mode = blockexp::FreezePolicy::FrozenBackbone;
            fc.epochs = 30;
            fc.batch_size = 16;
            fc.peak_lr = 1e-2;
            fc.warmup_steps = 5;
            fc.use_augment = false;
            fc.seed = seed;
            auto run = finetune::finetune_run(probe, train, splits.val, fc);
            cell.push_back(finetune::evaluate(run.best, splits.test, 16, metrics::RunMeta{}));
        }
        const auto agg = metrics::aggregate_runs(cell);
        means.push_back(agg.qkappa.mean);
        sems.push_back(agg.qkappa.sem ? *agg.qkappa.sem : 0.0);
        char buf[48];
        std::snprintf(buf, sizeof buf, " n=%d:%.3f(%.3f)", grid[gi], means.back(), sems.back());
        curve += buf;
    }
    bool monotone = true;
    for (std::size_t i = 1; i < means.size(); ++i)
        monotone = monotone && means[i] >= means[i - 1] - 0.02;
    const bool tighter = sems.back() < sems.front();
    detail = "qkappa mean(sem):" + curve;
    return monotone && tighter;
}

// ---------------------------------------------------------------- criterion 8

bool probe_improves_with_adaptation(std::string& detail) {
    const auto setup = toy_setup();
    std::vector<double> gains;
    std::string per_seed;
    for (int seed = 0; seed < 5; ++seed) {
        const auto root = derive_seed(9200, "adapt", static_cast<std::uint64_t>(seed));
        auto spec = setup.data_spec;
        spec.seed = derive_seed(root, "data");
        auto splits = split_spec(spec, derive_seed(root, "split"), "dr_proxy");

        auto random_encoder = vit::init_model<float>(setup.encoder_cfg, derive_seed(root, "init"));
        auto pre_cfg = setup.ssl_cfg;
        pre_cfg.seed = derive_seed(root, "pretrain");
        auto adapted = ssl::post_pretrain(random_encoder, splits.train.images, pre_cfg,
                                          blockexp::FreezePolicy::Unfrozen)
                           .encoder;

        const double q_random = frozen_probe_qkappa(random_encoder, splits, root);
        const double q_adapted = frozen_probe_qkappa(adapted, splits, derive_seed(root, "x"));
        gains.push_back(q_adapted - q_random);
        char buf[40];
        std::snprintf(buf, sizeof buf, " %+.3f", gains.back());
        per_seed += buf;
    }
    const double mean_gain = std::accumulate(gains.begin(), gains.end(), 0.0) / gains.size();
    char buf[160];
    std::snprintf(buf, sizeof buf, "probe qkappa gain per seed:%s, mean %+.3f",
                  per_seed.c_str(), mean_gain);
    detail = buf;
    return mean_gain >= 0.1;
}

// ---------------------------------------------------------------- criterion 9

bool determinism_persistence(std::string& detail) {
    const auto base = fs::temp_directory_path() / "bevit_acceptance";
    fs::remove_all(base);
    fs::create_directories(base);

    auto config = cfg::KvConfig::from_string(
        "model.image_size = 16\n"
        "model.patch_size = 8\n"
        "model.dim = 16\n"
        "model.depth = 2\n"
        "model.heads = 2\n"
        "data.0.classes = 3\n"
        "data.0.n_per_class = 8\n"
        "finetune.epochs = 2\n"
        "finetune.batch_size = 8\n"
        "finetune.warmup = 2\n"
        "ssl.epochs = 1\n"
        "ssl.batch_size = 4\n"
        "ssl.prototypes = 16\n"
        "ssl.hidden_dim = 16\n"
        "ssl.bottleneck_dim = 8\n"
        "ssl.local_crops = 1\n");

    auto run_pair = [&](const std::string& cmd) {
        for (const char* tag : {"x", "y"}) {
            cli::RunContext ctx;
            ctx.out_dir = (base / (cmd + "_" + tag)).string();
            ctx.seed = 77;
            if (cmd == "finetune") cli::cmd_finetune(config, ctx);
            if (cmd == "pretrain") cli::cmd_pretrain(config, ctx);
        }
        // byte-compare every emitted file
        std::vector<fs::path> files;
        for (const auto& entry : fs::recursive_directory_iterator(base / (cmd + "_x")))
            if (entry.is_regular_file()) files.push_back(entry.path());
        if (files.empty()) return false;
        for (const auto& f : files) {
            const auto rel = fs::relative(f, base / (cmd + "_x"));
            std::ifstream a(f, std::ios::binary), b(base / (cmd + "_y") / rel, std::ios::binary);
            std::stringstream sa, sb;
            sa << a.rdbuf();
            sb << b.rdbuf();
            if (sa.str() != sb.str() || sa.str().empty()) return false;
        }
        return true;
    };

    const bool finetune_ok = run_pair("finetune");
    const bool pretrain_ok = run_pair("pretrain");

    // checkpoint round trip, bitwise
    vit::ViTConfig rt_cfg;
    rt_cfg.image_size = 16;
    rt_cfg.patch_size = 8;
    rt_cfg.dim = 16;
    rt_cfg.depth = 2;
    rt_cfg.heads = 2;
    auto model = vit::init_model<float>(rt_cfg, 5);
    vit::attach_head(model, 3, vit::EmbeddingStrategy::Cls, 6);
    const auto path = (base / "rt.bvck").string();
    ckpt::save_checkpoint(model, path);
    auto loaded = ckpt::load_checkpoint<float>(path);
    bool rt_ok = true;
    auto a = vit::named_params(model);
    auto b = vit::named_params(loaded);
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t j = 0; j < a[i].tensor.values().size(); ++j)
            rt_ok = rt_ok && a[i].tensor.values()[j] == b[i].tensor.values()[j];

    fs::remove_all(base);
    std::string parts = std::string("finetune rerun ") + (finetune_ok ? "ok" : "DIFFERS") +
                        ", pretrain rerun " + (pretrain_ok ? "ok" : "DIFFERS") +
                        ", checkpoint round trip " + (rt_ok ? "bitwise" : "BAD");
    detail = parts;
    return finetune_ok && pretrain_ok && rt_ok;
}

}  // namespace

int main(int argc, char** argv) {
    std::vector<Criterion> criteria = {
        {1, "identity invariance of block expansion", identity_invariance},
        {2, "parameter accounting (3,845 / 5,125 / 7,087,872)", parameter_accounting},
        {3, "freeze audits over 100 optimizer steps", freeze_audits},
        {4, "finite-difference gradient checks (64-bit, rel err < 1e-6)", gradient_correctness},
        {5, "metric oracles vs brute force (|delta| < 1e-12)", metric_oracles},
        {6, "catastrophic-forgetting direction (block expansion retains)", forgetting_direction},
        {7, "few-shot qkappa rises with n and tightens", fewshot_behavior},
        {8, "ssl adaptation lifts the frozen probe by >= 0.1 qkappa", probe_improves_with_adaptation},
        {9, "determinism and checkpoint persistence", determinism_persistence},
    };

    int failures = 0;
    for (auto& c : criteria) {
        if (argc > 1) {
            bool wanted = false;
            for (int i = 1; i < argc; ++i) wanted = wanted || std::stoi(argv[i]) == c.id;
            if (!wanted) continue;
        }
        const auto start = std::chrono::steady_clock::now();
        std::string note;
        bool ok = false;
        try {
            ok = c.run(note);
        } catch (const std::exception& e) {
            note = std::string("exception: ") + e.what();
        }
        const auto secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start);
        std::printf("%s Criterion %d: %s [%.1fs] %s\n", ok ? "PASS" : "FAIL", c.id, c.name,
                    secs.count(), note.c_str());
        std::fflush(stdout);
        if (!ok) ++failures;
    }
    return failures;
}
