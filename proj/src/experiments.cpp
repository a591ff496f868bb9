#include "bevit/experiments.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include "bevit/checkpoint.hpp"
#include "bevit/data.hpp"
#include "bevit/finetune.hpp"
#include "bevit/metrics.hpp"
#include "bevit/png_io.hpp"
#include "bevit/report.hpp"
#include "bevit/rng.hpp"
#include "bevit/ssl.hpp"

namespace bevit::cli {

namespace fs = std::filesystem;
using cfg::KvConfig;

Precision precision_from(const std::string& s) {
    if (s == "32" || s == "f32" || s == "float") return Precision::F32;
    if (s == "64" || s == "f64" || s == "double") return Precision::F64;
    throw ConfigError("unknown precision: " + s + " (use 32 or 64)");
}

namespace {

void defi(KvConfig& c, const std::string& k, std::int64_t v) {
    if (!c.has(k)) c.set_int(k, v);
}
void defd(KvConfig& c, const std::string& k, double v) {
    if (!c.has(k)) c.set_double(k, v);
}
void defs(KvConfig& c, const std::string& k, const std::string& v) {
    if (!c.has(k)) c.set(k, v);
}
void defb(KvConfig& c, const std::string& k, bool v) {
    if (!c.has(k)) c.set_bool(k, v);
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::istringstream in(s);
    std::string item;
    while (std::getline(in, item, ',')) {
        const auto a = item.find_first_not_of(" \t");
        if (a == std::string::npos) continue;
        const auto b = item.find_last_not_of(" \t");
        out.push_back(item.substr(a, b - a + 1));
    }
    return out;
}

void resolve_model_defaults(KvConfig& c) {
    defs(c, "model.name", "vit");
    defi(c, "model.image_size", 32);
    defi(c, "model.patch_size", 8);
    defi(c, "model.dim", 64);
    defi(c, "model.depth", 6);
    defi(c, "model.heads", 4);
    defi(c, "model.mlp_ratio", 4);
    defi(c, "model.expand_k", 0);
    defs(c, "model.checkpoint", "");
}

vit::ViTConfig model_cfg(const KvConfig& c) {
    vit::ViTConfig m;
    m.image_size = static_cast<int>(c.get_int("model.image_size", 32));
    m.patch_size = static_cast<int>(c.get_int("model.patch_size", 8));
    m.dim = static_cast<int>(c.get_int("model.dim", 64));
    m.depth = static_cast<int>(c.get_int("model.depth", 6));
    m.heads = static_cast<int>(c.get_int("model.heads", 4));
    m.mlp_ratio = static_cast<int>(c.get_int("model.mlp_ratio", 4));
    m.validate();
    return m;
}

void resolve_data_defaults(KvConfig& c, int count_default) {
    defi(c, "data.count", count_default);
    defs(c, "data.ratios", "0.7,0.15,0.15");
    const auto n = c.get_int("data.count", count_default);
    for (std::int64_t i = 0; i < n; ++i) {
        const auto p = "data." + std::to_string(i) + ".";
        defs(c, p + "name", "synth" + std::string(1, static_cast<char>('A' + i)));
        defi(c, p + "classes", 5);
        defi(c, p + "n_per_class", 40);
        defi(c, p + "domain", static_cast<std::int64_t>(i));
        defi(c, p + "base_size", 0);
        defs(c, p + "manifest", "");
        defb(c, p + "quality_filter", false);
        defd(c, p + "lesion_rate", 2.0);
    }
}

std::array<double, 3> ratios_from(const KvConfig& c) {
    const auto parts = split_list(c.get_str("data.ratios", "0.7,0.15,0.15"));
    if (parts.size() != 3) throw ConfigError("data.ratios needs three comma-separated values");
    return {std::stod(parts[0]), std::stod(parts[1]), std::stod(parts[2])};
}

struct NamedSplits {
    data::DatasetSplits splits;
    std::vector<img::Image> all_images;  // every record, for unlabeled SSL use
};

NamedSplits dataset_splits(const KvConfig& c, int index, const RunContext& ctx, int target_size,
                           int base_size_override = 0) {
    const auto p = "data." + std::to_string(index) + ".";
    NamedSplits out;
    const auto manifest_path = c.get_str(p + "manifest", "");
    if (!manifest_path.empty()) {
        auto manifest = data::load_manifest(manifest_path,
                                            static_cast<int>(c.get_int(p + "classes", 0)));
        const auto root = fs::path(manifest_path).parent_path().string();
        out.splits = data::load_dataset(manifest, root, target_size);
        for (const auto& s : {&out.splits.train.images, &out.splits.val.images,
                              &out.splits.test.images})
            for (const auto& im : *s) out.all_images.push_back(im);
        for (const auto& im : out.splits.unlabeled) out.all_images.push_back(im);
        return out;
    }
    data::SyntheticSpec spec;
    spec.n_per_class = static_cast<int>(c.get_int(p + "n_per_class", 40));
    spec.class_count = static_cast<int>(c.get_int(p + "classes", 5));
    spec.domain_id = static_cast<int>(c.get_int(p + "domain", index));
    spec.lesion_rate = c.get_double(p + "lesion_rate", 2.0);
    int base = static_cast<int>(c.get_int(p + "base_size", 0));
    if (base_size_override > 0) base = base_size_override;
    spec.image_size = base > 0 ? base : target_size;
    spec.seed = derive_seed(ctx.seed, "data", static_cast<std::uint64_t>(index));
    auto ds = data::synth_generate(spec);
    if (c.get_bool(p + "quality_filter", false)) {
        const auto verdict = data::quality_filter(ds.images, data::default_quality_predicate());
        data::SyntheticDataset kept;
        for (auto i : verdict.kept) {
            kept.images.push_back(ds.images[i]);
            kept.labels.push_back(ds.labels[i]);
            kept.lesion_counts.push_back(ds.lesion_counts[i]);
        }
        ds = std::move(kept);
    }
    out.all_images = ds.images;
    if (spec.image_size != target_size)
        for (auto& im : out.all_images) im = img::resize_bilinear(im, target_size, target_size);
    auto resized = ds;
    if (spec.image_size != target_size)
        for (auto& im : resized.images) im = img::resize_bilinear(im, target_size, target_size);
    out.splits = data::split_synthetic(resized, spec.class_count, ratios_from(c),
                                       derive_seed(ctx.seed, "split",
                                                   static_cast<std::uint64_t>(index)),
                                       c.get_str(p + "name", "synth"));
    return out;
}

// full-resolution images for SSL (grid splitting happens inside post_pretrain)
std::vector<img::Image> dataset_raw_images(const KvConfig& c, int index, const RunContext& ctx,
                                           int base_size) {
    const auto p = "data." + std::to_string(index) + ".";
    const auto manifest_path = c.get_str(p + "manifest", "");
    if (!manifest_path.empty()) {
        auto manifest = data::load_manifest(manifest_path,
                                            static_cast<int>(c.get_int(p + "classes", 0)));
        const auto root = fs::path(manifest_path).parent_path().string();
        auto splits = data::load_dataset(manifest, root, base_size);
        std::vector<img::Image> all;
        for (auto* s : {&splits.train.images, &splits.val.images, &splits.test.images})
            for (auto& im : *s) all.push_back(std::move(im));
        for (auto& im : splits.unlabeled) all.push_back(std::move(im));
        return all;
    }
    data::SyntheticSpec spec;
    spec.n_per_class = static_cast<int>(c.get_int(p + "n_per_class", 40));
    spec.class_count = static_cast<int>(c.get_int(p + "classes", 5));
    spec.domain_id = static_cast<int>(c.get_int(p + "domain", index));
    spec.lesion_rate = c.get_double(p + "lesion_rate", 2.0);
    spec.image_size = base_size;
    spec.seed = derive_seed(ctx.seed, "data", static_cast<std::uint64_t>(index));
    auto ds = data::synth_generate(spec);
    if (c.get_bool(p + "quality_filter", false)) {
        const auto verdict = data::quality_filter(ds.images, data::default_quality_predicate());
        std::vector<img::Image> kept;
        for (auto i : verdict.kept) kept.push_back(std::move(ds.images[i]));
        return kept;
    }
    return ds.images;
}

void resolve_ssl_defaults(KvConfig& c) {
    defs(c, "ssl.policy", "unfrozen");
    defi(c, "ssl.epochs", 3);
    defi(c, "ssl.batch_size", 8);
    defd(c, "ssl.lr", 1e-3);
    defd(c, "ssl.weight_decay", 0.04);
    defi(c, "ssl.prototypes", 64);
    defi(c, "ssl.hidden_dim", 64);
    defi(c, "ssl.bottleneck_dim", 32);
    defd(c, "ssl.student_temp", 0.1);
    defd(c, "ssl.teacher_temp", 0.04);
    defd(c, "ssl.center_momentum", 0.9);
    defd(c, "ssl.ema_base", 0.996);
    defi(c, "ssl.local_crops", 2);
    defi(c, "ssl.grid_split", 1);
    defd(c, "ssl.global_scale_min", 0.5);
    defd(c, "ssl.global_scale_max", 1.0);
    defd(c, "ssl.local_scale_min", 0.2);
    defd(c, "ssl.local_scale_max", 0.5);
}

ssl::SSLConfig ssl_cfg_from(const KvConfig& c, const RunContext& ctx, const char* salt = "ssl") {
    ssl::SSLConfig s;
    s.prototypes = static_cast<int>(c.get_int("ssl.prototypes", 64));
    s.student_temp = c.get_double("ssl.student_temp", 0.1);
    s.teacher_temp = c.get_double("ssl.teacher_temp", 0.04);
    s.center_momentum = c.get_double("ssl.center_momentum", 0.9);
    s.ema_base = c.get_double("ssl.ema_base", 0.996);
    s.local_crops = static_cast<int>(c.get_int("ssl.local_crops", 2));
    s.global_scale_min = c.get_double("ssl.global_scale_min", 0.5);
    s.global_scale_max = c.get_double("ssl.global_scale_max", 1.0);
    s.local_scale_min = c.get_double("ssl.local_scale_min", 0.2);
    s.local_scale_max = c.get_double("ssl.local_scale_max", 0.5);
    s.grid_split = static_cast<int>(c.get_int("ssl.grid_split", 1));
    s.epochs = static_cast<int>(c.get_int("ssl.epochs", 3));
    s.batch_size = static_cast<int>(c.get_int("ssl.batch_size", 8));
    s.lr = c.get_double("ssl.lr", 1e-3);
    s.weight_decay = c.get_double("ssl.weight_decay", 0.04);
    s.hidden_dim = static_cast<int>(c.get_int("ssl.hidden_dim", 64));
    s.bottleneck_dim = static_cast<int>(c.get_int("ssl.bottleneck_dim", 32));
    s.seed = derive_seed(ctx.seed, salt);
    return s;
}

void resolve_finetune_defaults(KvConfig& c) {
    defs(c, "finetune.mode", "frozen_bb");
    defs(c, "finetune.strategy", "cls");
    defs(c, "finetune.loss", "scaled_ce");
    defd(c, "finetune.lambda", 1.0);
    defi(c, "finetune.epochs", 20);
    defi(c, "finetune.batch_size", 16);
    defd(c, "finetune.lr", 5e-3);
    defi(c, "finetune.warmup", 10);
    defd(c, "finetune.weight_decay", 0.05);
    defb(c, "finetune.augment", true);
    defs(c, "finetune.encoder", "");
}

finetune::FinetuneConfig ft_cfg_from(const KvConfig& c, std::uint64_t seed, int image_size) {
    finetune::FinetuneConfig f;
    f.mode = blockexp::freeze_policy_from(c.get_str("finetune.mode", "frozen_bb"));
    f.strategy = vit::embedding_strategy_from(c.get_str("finetune.strategy", "cls"));
    f.loss = finetune::loss_kind_from(c.get_str("finetune.loss", "scaled_ce"));
    f.lambda = c.get_double("finetune.lambda", 1.0);
    f.epochs = static_cast<int>(c.get_int("finetune.epochs", 20));
    f.batch_size = static_cast<int>(c.get_int("finetune.batch_size", 16));
    f.peak_lr = c.get_double("finetune.lr", 5e-3);
    f.warmup_steps = c.get_int("finetune.warmup", 10);
    f.weight_decay = c.get_double("finetune.weight_decay", 0.05);
    f.use_augment = c.get_bool("finetune.augment", true);
    if (f.use_augment) f.augment = finetune::AugmentPolicy::all_on(image_size);
    f.seed = seed;
    return f;
}

void prepare_out(KvConfig& c, const RunContext& ctx) {
    c.set("run.seed", std::to_string(ctx.seed));
    c.set("run.precision", ctx.precision == Precision::F32 ? "32" : "64");
    fs::create_directories(ctx.out_dir);
    c.dump((fs::path(ctx.out_dir) / "config_resolved.txt").string());
}

template <class T>
vit::ViTModel<T> base_model(const KvConfig& c, const RunContext& ctx) {
    const auto checkpoint = c.get_str("model.checkpoint", "");
    vit::ViTModel<T> model;
    if (!checkpoint.empty()) {
        model = ckpt::load_checkpoint<T>(checkpoint);
    } else {
        model = vit::init_model<T>(model_cfg(c), derive_seed(ctx.seed, "model.init"));
    }
    const auto k = static_cast<int>(c.get_int("model.expand_k", 0));
    if (k > 0) model = blockexp::expand_blocks(model, k);
    return model;
}

template <class T>
std::vector<double> cls_embeddings(const vit::ViTModel<T>& enc,
                                   const std::vector<img::Image>& images, int batch_size,
                                   std::int64_t& dim_out) {
    num::NoGradGuard ng;
    std::vector<double> out;
    dim_out = enc.cfg.dim;
    out.reserve(images.size() * static_cast<std::size_t>(enc.cfg.dim));
    for (std::size_t start = 0; start < images.size();
         start += static_cast<std::size_t>(batch_size)) {
        const std::size_t stop =
            std::min(images.size(), start + static_cast<std::size_t>(batch_size));
        std::vector<img::Image> chunk(images.begin() + static_cast<std::ptrdiff_t>(start),
                                      images.begin() + static_cast<std::ptrdiff_t>(stop));
        auto emb = vit::extract_embedding(enc, img::to_batch<T>(chunk),
                                          vit::EmbeddingStrategy::Cls);
        for (T v : emb.values()) out.push_back(static_cast<double>(v));
    }
    return out;
}

void write_ssl_log(const std::string& path, const std::vector<ssl::StepLog>& log) {
    std::ostringstream out;
    out << ssl::ssl_log_csv_header() << "\n";
    for (const auto& row : log) out << ssl::ssl_log_csv_row(row) << "\n";
    report::write_text(path, out.str());
}

void write_finetune_log(const std::string& path, const std::vector<finetune::EpochLogRow>& log) {
    std::ostringstream out;
    out << finetune::log_csv_header() << "\n";
    for (const auto& row : log) out << finetune::log_csv_row(row) << "\n";
    report::write_text(path, out.str());
}

metrics::RunMeta meta_for(const KvConfig& c, const RunContext& ctx, const std::string& dataset,
                          const std::string& mode, std::uint64_t seed) {
    metrics::RunMeta meta;
    meta.model = c.get_str("model.name", "vit");
    meta.dataset = dataset;
    meta.mode = mode;
    meta.seed = seed;
    meta.config_hash = c.hash();
    return meta;
}

// shared heatmap emission: rows x 5 metric columns
void metric_heatmap(const std::string& path, const std::string& title,
                    const std::vector<std::string>& row_labels,
                    const std::vector<metrics::MetricsReport>& rows) {
    report::HeatmapData hm;
    hm.title = title;
    hm.row_labels = row_labels;
    hm.col_labels = {"acc", "f1", "auc", "qkappa", "rdr_acc"};
    for (const auto& r : rows) {
        hm.values.push_back(r.accuracy);
        hm.values.push_back(r.macro_f1);
        hm.values.push_back(r.auc);
        hm.values.push_back(r.qkappa);
        hm.values.push_back(r.rdr_accuracy ? *r.rdr_accuracy
                                           : std::numeric_limits<double>::quiet_NaN());
    }
    report::write_text(path, report::svg_heatmap(hm));
}

// --- pretrain -----------------------------------------------------------------

template <class T>
void run_pretrain(const KvConfig& c, const RunContext& ctx) {
    auto model = base_model<T>(c, ctx);
    const auto ssl_cfg = ssl_cfg_from(c, ctx);
    const auto policy = blockexp::freeze_policy_from(c.get_str("ssl.policy", "unfrozen"));
    const int base_size = model.cfg.image_size * ssl_cfg.grid_split;
    auto images = dataset_raw_images(c, 0, ctx, base_size);
    auto result = ssl::post_pretrain(model, images, ssl_cfg, policy);
    ckpt::save_checkpoint(result.encoder, (fs::path(ctx.out_dir) / "encoder.bvck").string());
    write_ssl_log((fs::path(ctx.out_dir) / "ssl_log.csv").string(), result.log);
}

// --- finetune -----------------------------------------------------------------

template <class T>
struct FinetuneOutcome {
    vit::ViTModel<T> best;
    metrics::MetricsReport test_report;
    std::vector<finetune::EpochLogRow> log;
};

template <class T>
FinetuneOutcome<T> finetune_once(const KvConfig& c, const RunContext& ctx,
                                 const vit::ViTModel<T>& encoder, const data::LabeledSet& train,
                                 const data::LabeledSet& val, const data::LabeledSet& test,
                                 int classes, const std::string& dataset_name,
                                 std::uint64_t seed) {
    auto model = vit::clone_model(encoder);
    vit::attach_head(model, classes, vit::embedding_strategy_from(
                                          c.get_str("finetune.strategy", "cls")),
                     derive_seed(seed, "head"));
    auto ft_cfg = ft_cfg_from(c, seed, model.cfg.image_size);
    auto run = finetune::finetune_run(model, train, val, ft_cfg);
    FinetuneOutcome<T> out;
    auto meta = meta_for(c, ctx, dataset_name, blockexp::to_string(ft_cfg.mode), seed);
    out.test_report = finetune::evaluate(run.best, test, ft_cfg.batch_size, meta);
    out.best = std::move(run.best);
    out.log = std::move(run.log);
    return out;
}

template <class T>
void run_finetune(const KvConfig& c, const RunContext& ctx) {
    vit::ViTModel<T> encoder;
    const auto enc_path = c.get_str("finetune.encoder", "");
    encoder = enc_path.empty() ? base_model<T>(c, ctx) : ckpt::load_checkpoint<T>(enc_path);
    auto ds = dataset_splits(c, 0, ctx, encoder.cfg.image_size);
    auto outcome = finetune_once(c, ctx, encoder, ds.splits.train, ds.splits.val, ds.splits.test,
                                 ds.splits.class_count, ds.splits.name,
                                 derive_seed(ctx.seed, "finetune"));
    ckpt::save_checkpoint(outcome.best, (fs::path(ctx.out_dir) / "best.bvck").string());
    write_finetune_log((fs::path(ctx.out_dir) / "finetune_log.csv").string(), outcome.log);
    report::write_report_json((fs::path(ctx.out_dir) / "report_test.json").string(),
                              outcome.test_report);
    std::vector<metrics::MetricsReport> rows = {outcome.test_report};
    report::write_reports_csv((fs::path(ctx.out_dir) / "reports.csv").string(), rows);
}

// --- msdft ----------------------------------------------------------------------

template <class T>
void run_msdft(const KvConfig& c, const RunContext& ctx) {
    const int count = static_cast<int>(c.get_int("data.count", 2));
    if (count < 2) throw ConfigError("msdft needs at least 2 datasets");
    vit::ViTModel<T> encoder;
    const auto enc_path = c.get_str("finetune.encoder", "");
    encoder = enc_path.empty() ? base_model<T>(c, ctx) : ckpt::load_checkpoint<T>(enc_path);

    std::vector<NamedSplits> sets;
    int classes = -1;
    for (int i = 0; i < count; ++i) {
        sets.push_back(dataset_splits(c, i, ctx, encoder.cfg.image_size));
        if (classes < 0) classes = sets.back().splits.class_count;
        if (classes != sets.back().splits.class_count)
            throw ConfigError("msdft datasets disagree on class count");
    }
    data::LabeledSet train, val, pooled_test;
    for (const auto& s : sets) {
        for (std::size_t i = 0; i < s.splits.train.size(); ++i) {
            train.images.push_back(s.splits.train.images[i]);
            train.labels.push_back(s.splits.train.labels[i]);
        }
        for (std::size_t i = 0; i < s.splits.val.size(); ++i) {
            val.images.push_back(s.splits.val.images[i]);
            val.labels.push_back(s.splits.val.labels[i]);
        }
        for (std::size_t i = 0; i < s.splits.test.size(); ++i) {
            pooled_test.images.push_back(s.splits.test.images[i]);
            pooled_test.labels.push_back(s.splits.test.labels[i]);
        }
    }
    auto outcome = finetune_once(c, ctx, encoder, train, val, sets[0].splits.test, classes,
                                 sets[0].splits.name, derive_seed(ctx.seed, "msdft"));

    const auto mode = c.get_str("finetune.mode", "frozen_bb");
    std::vector<metrics::MetricsReport> rows;
    std::vector<std::string> labels;
    for (const auto& s : sets) {
        rows.push_back(finetune::evaluate(outcome.best, s.splits.test, 16,
                                          meta_for(c, ctx, s.splits.name, mode, ctx.seed)));
        labels.push_back(s.splits.name);
    }
    rows.push_back(finetune::evaluate(outcome.best, pooled_test, 16,
                                      meta_for(c, ctx, "All", mode, ctx.seed)));
    labels.push_back("All");

    report::write_reports_csv((fs::path(ctx.out_dir) / "reports.csv").string(), rows);
    metric_heatmap((fs::path(ctx.out_dir) / "msdft_heatmap.svg").string(),
                   "multi-source fine-tuning", labels, rows);
    write_finetune_log((fs::path(ctx.out_dir) / "finetune_log.csv").string(), outcome.log);
    ckpt::save_checkpoint(outcome.best, (fs::path(ctx.out_dir) / "best.bvck").string());
}

// --- crosseval --------------------------------------------------------------------

template <class T>
void run_crosseval(const KvConfig& c, const RunContext& ctx) {
    const int count = static_cast<int>(c.get_int("data.count", 2));
    if (count < 2) throw ConfigError("crosseval needs at least 2 datasets");
    vit::ViTModel<T> encoder;
    const auto enc_path = c.get_str("finetune.encoder", "");
    encoder = enc_path.empty() ? base_model<T>(c, ctx) : ckpt::load_checkpoint<T>(enc_path);

    std::vector<NamedSplits> sets;
    for (int i = 0; i < count; ++i)
        sets.push_back(dataset_splits(c, i, ctx, encoder.cfg.image_size));
    const int classes = sets[0].splits.class_count;
    for (const auto& s : sets)
        if (s.splits.class_count != classes)
            throw ConfigError("crosseval datasets disagree on class count");

    const auto mode = c.get_str("finetune.mode", "frozen_bb");
    std::vector<metrics::MetricsReport> rows;
    std::map<std::string, std::vector<const metrics::MetricsReport*>> per_test;
    std::vector<double> qk_grid, auc_grid;
    std::vector<std::string> names;
    for (const auto& s : sets) names.push_back(s.splits.name);

    for (int i = 0; i < count; ++i) {
        auto outcome = finetune_once(c, ctx, encoder, sets[static_cast<std::size_t>(i)].splits.train,
                                     sets[static_cast<std::size_t>(i)].splits.val,
                                     sets[static_cast<std::size_t>(i)].splits.test, classes,
                                     names[static_cast<std::size_t>(i)],
                                     derive_seed(ctx.seed, "crosseval",
                                                 static_cast<std::uint64_t>(i)));
        for (int j = 0; j < count; ++j) {
            if (j == i) {
                qk_grid.push_back(std::numeric_limits<double>::quiet_NaN());
                auc_grid.push_back(std::numeric_limits<double>::quiet_NaN());
                continue;
            }
            auto rep = finetune::evaluate(
                outcome.best, sets[static_cast<std::size_t>(j)].splits.test, 16,
                meta_for(c, ctx,
                         names[static_cast<std::size_t>(i)] + "->" +
                             names[static_cast<std::size_t>(j)],
                         mode, ctx.seed));
            qk_grid.push_back(rep.qkappa);
            auc_grid.push_back(rep.auc);
            rows.push_back(std::move(rep));
        }
    }
    for (const auto& r : rows) {
        const auto arrow = r.meta.dataset.find("->");
        per_test[r.meta.dataset.substr(arrow + 2)].push_back(&r);
    }

    report::write_reports_csv((fs::path(ctx.out_dir) / "reports.csv").string(), rows);

    std::ostringstream avg;
    avg << "test_dataset,n_evals,avg_accuracy,avg_macro_f1,avg_auc,avg_qkappa\n";
    for (const auto& name : names) {
        const auto it = per_test.find(name);
        if (it == per_test.end()) continue;
        double acc = 0, f1 = 0, auc = 0, qk = 0;
        for (const auto* r : it->second) {
            acc += r->accuracy;
            f1 += r->macro_f1;
            auc += r->auc;
            qk += r->qkappa;
        }
        const double n = static_cast<double>(it->second.size());
        char buf[256];
        std::snprintf(buf, sizeof buf, "%s,%zu,%.6f,%.6f,%.6f,%.6f\n", name.c_str(),
                      it->second.size(), acc / n, f1 / n, auc / n, qk / n);
        avg << buf;
    }
    report::write_text((fs::path(ctx.out_dir) / "avg_reports.csv").string(), avg.str());

    report::HeatmapData hm;
    hm.title = "cross-evaluation qkappa (train row, test column)";
    hm.row_labels = names;
    hm.col_labels = names;
    hm.values = qk_grid;
    report::write_text((fs::path(ctx.out_dir) / "crosseval_qkappa.svg").string(),
                       report::svg_heatmap(hm));
    hm.title = "cross-evaluation auc (train row, test column)";
    hm.values = auc_grid;
    report::write_text((fs::path(ctx.out_dir) / "crosseval_auc.svg").string(),
                       report::svg_heatmap(hm));
}

// --- fewshot ---------------------------------------------------------------------

template <class T>
void run_fewshot(const KvConfig& c, const RunContext& ctx) {
    vit::ViTModel<T> encoder;
    const auto enc_path = c.get_str("finetune.encoder", "");
    encoder = enc_path.empty() ? base_model<T>(c, ctx) : ckpt::load_checkpoint<T>(enc_path);
    auto ds = dataset_splits(c, 0, ctx, encoder.cfg.image_size);

    std::vector<int> grid;
    for (const auto& s : split_list(c.get_str("fewshot.grid", "1,2,4,8,16")))
        grid.push_back(std::stoi(s));
    if (grid.empty()) throw ConfigError("fewshot grid is empty");
    const int replicates = static_cast<int>(c.get_int("fewshot.replicates", 5));
    const auto modes = split_list(c.get_str("fewshot.modes", "frozen_bb"));

    std::vector<metrics::MetricsReport> rows;
    std::ostringstream summary;
    summary << "mode,n_per_class,metric,mean,sd,sem\n";
    std::ostringstream rank;
    rank << "n_per_class,metric,best_mode,best_mean\n";
    std::map<std::pair<std::string, int>, std::map<std::string, double>> cell_means;

    for (const auto& mode : modes) {
        KvConfig arm = c;
        arm.set("finetune.mode", mode);
        for (std::size_t gi = 0; gi < grid.size(); ++gi) {
            const int n = grid[gi];
            std::vector<metrics::MetricsReport> cell;
            for (int rep = 0; rep < replicates; ++rep) {
                const auto seed = derive_seed(ctx.seed, "fewshot",
                                              (static_cast<std::uint64_t>(gi) << 32) |
                                                  static_cast<std::uint64_t>(rep));
                auto sample = data::few_shot_sample(ds.splits.train.labels, n, seed);
                data::LabeledSet train;
                for (auto idx : sample.indices) {
                    train.images.push_back(ds.splits.train.images[idx]);
                    train.labels.push_back(ds.splits.train.labels[idx]);
                }
                auto outcome = finetune_once(arm, ctx, encoder, train, ds.splits.val,
                                             ds.splits.test, ds.splits.class_count,
                                             ds.splits.name + "@n=" + std::to_string(n), seed);
                cell.push_back(std::move(outcome.test_report));
                rows.push_back(cell.back());
            }
            const auto agg = metrics::aggregate_runs(cell);
            auto emit = [&](const char* metric, const metrics::Aggregate& a) {
                char buf[192];
                std::snprintf(buf, sizeof buf, "%s,%d,%s,%.6f,%.6f,", mode.c_str(), n, metric,
                              a.mean, a.sd);
                summary << buf;
                if (a.sem) {
                    char b2[32];
                    std::snprintf(b2, sizeof b2, "%.6f", *a.sem);
                    summary << b2;
                }
                summary << "\n";
                cell_means[{mode, n}][metric] = a.mean;
            };
            emit("accuracy", agg.accuracy);
            emit("macro_f1", agg.macro_f1);
            emit("auc", agg.auc);
            emit("qkappa", agg.qkappa);
            if (agg.rdr_accuracy) emit("rdr_accuracy", *agg.rdr_accuracy);
        }
    }
    for (int n : grid)
        for (const char* metric : {"accuracy", "macro_f1", "auc", "qkappa"}) {
            std::string best_mode;
            double best = -2;
            for (const auto& mode : modes) {
                const auto it = cell_means.find({mode, n});
                if (it == cell_means.end()) continue;
                const auto mit = it->second.find(metric);
                if (mit != it->second.end() && mit->second > best) {
                    best = mit->second;
                    best_mode = mode;
                }
            }
            char buf[160];
            std::snprintf(buf, sizeof buf, "%d,%s,%s,%.6f\n", n, metric, best_mode.c_str(), best);
            rank << buf;
        }

    report::write_reports_csv((fs::path(ctx.out_dir) / "reports.csv").string(), rows);
    report::write_text((fs::path(ctx.out_dir) / "fewshot_summary.csv").string(), summary.str());
    report::write_text((fs::path(ctx.out_dir) / "fewshot_rank.csv").string(), rank.str());
}

// --- forgetting -------------------------------------------------------------------

template <class T>
void run_forgetting(const KvConfig& c, const RunContext& ctx) {
    const int expand_k = static_cast<int>(c.get_int("forgetting.expand_k", 2));
    const int knn_k = static_cast<int>(c.get_int("knn.k", 20));
    const int adapt_epochs =
        static_cast<int>(c.get_int("forgetting.adapt_epochs", c.get_int("ssl.epochs", 3)));

    auto model = base_model<T>(c, ctx);
    auto pre_cfg = ssl_cfg_from(c, ctx, "forgetting.pretrain");
    const int base_size = model.cfg.image_size * pre_cfg.grid_split;

    auto splits_a = dataset_splits(c, 0, ctx, model.cfg.image_size);
    auto images_a = dataset_raw_images(c, 0, ctx, base_size);
    auto images_b = dataset_raw_images(c, 1, ctx, base_size);
    auto splits_b = dataset_splits(c, 1, ctx, model.cfg.image_size);

    // (1) source-domain pretraining
    auto base = ssl::post_pretrain(model, images_a, pre_cfg, blockexp::FreezePolicy::Unfrozen);
    const auto& encoder_a = base.encoder;

    auto knn_on_a = [&](const vit::ViTModel<T>& enc) {
        std::int64_t dim = 0;
        auto ref = cls_embeddings(enc, splits_a.splits.train.images, 16, dim);
        auto query = cls_embeddings(enc, splits_a.splits.test.images, 16, dim);
        return metrics::knn_eval(ref, splits_a.splits.train.labels, query,
                                 splits_a.splits.test.labels, dim, metrics::KnnConfig{knn_k});
    };

    // (2) baseline on held-out A
    const auto baseline = knn_on_a(encoder_a);

    // (3) target-domain adaptation, two arms
    auto adapt_cfg = ssl_cfg_from(c, ctx, "forgetting.adapt");
    adapt_cfg.epochs = adapt_epochs;
    auto retrain =
        ssl::post_pretrain(encoder_a, images_b, adapt_cfg, blockexp::FreezePolicy::Unfrozen);
    auto expanded = blockexp::expand_blocks(encoder_a, expand_k);
    auto be = ssl::post_pretrain(expanded, images_b, adapt_cfg, blockexp::FreezePolicy::BeSsl);

    // (4) re-evaluate the source domain
    const auto after_retrain = knn_on_a(retrain.encoder);
    const auto after_be = knn_on_a(be.encoder);
    const auto d_retrain = metrics::forgetting_delta(baseline, after_retrain);
    const auto d_be = metrics::forgetting_delta(baseline, after_be);

    // (5) Table-style rows
    std::ostringstream table;
    table << "model,top1,top5,delta_top1,delta_top5\n";
    char buf[256];
    std::snprintf(buf, sizeof buf, "base,%.4f,%.4f,,\n", 100 * baseline.top1, 100 * baseline.top5);
    table << buf;
    std::snprintf(buf, sizeof buf, "retrain_all,%.4f,%.4f,%+.4f,%+.4f\n",
                  100 * after_retrain.top1, 100 * after_retrain.top5, d_retrain.top1_points,
                  d_retrain.top5_points);
    table << buf;
    std::snprintf(buf, sizeof buf, "block_expanded,%.4f,%.4f,%+.4f,%+.4f\n", 100 * after_be.top1,
                  100 * after_be.top5, d_be.top1_points, d_be.top5_points);
    table << buf;
    report::write_text((fs::path(ctx.out_dir) / "forgetting.csv").string(), table.str());

    // (6) embedding structure on the target test set
    std::int64_t dim = 0;
    auto emb_base = cls_embeddings(encoder_a, splits_b.splits.test.images, 16, dim);
    auto emb_retrain = cls_embeddings(retrain.encoder, splits_b.splits.test.images, 16, dim);
    auto emb_be = cls_embeddings(be.encoder, splits_b.splits.test.images, 16, dim);
    const auto& labels_b = splits_b.splits.test.labels;
    const auto n = static_cast<std::int64_t>(labels_b.size());
    auto lda_base = metrics::lda_project(emb_base, n, dim, labels_b, 2);
    auto lda_retrain = metrics::lda_project(emb_retrain, n, dim, labels_b, 2);
    auto lda_be = metrics::lda_project(emb_be, n, dim, labels_b, 2);
    std::vector<report::ScatterSeries> series = {
        {"base", &lda_base, labels_b},
        {"retrain_all", &lda_retrain, labels_b},
        {"block_expanded", &lda_be, labels_b},
    };
    report::write_text((fs::path(ctx.out_dir) / "lda_scatter.svg").string(),
                       report::svg_scatter("target-domain embeddings (2-SD ellipses)", series));

    ckpt::save_checkpoint(encoder_a, (fs::path(ctx.out_dir) / "encoder_base.bvck").string());
    ckpt::save_checkpoint(retrain.encoder,
                          (fs::path(ctx.out_dir) / "encoder_retrain.bvck").string());
    ckpt::save_checkpoint(be.encoder, (fs::path(ctx.out_dir) / "encoder_be.bvck").string());
    write_ssl_log((fs::path(ctx.out_dir) / "ssl_log_pretrain.csv").string(), base.log);
    write_ssl_log((fs::path(ctx.out_dir) / "ssl_log_retrain.csv").string(), retrain.log);
    write_ssl_log((fs::path(ctx.out_dir) / "ssl_log_be.csv").string(), be.log);
}

// --- ablate ----------------------------------------------------------------------

template <class T>
void run_ablate(const KvConfig& c, const RunContext& ctx) {
    const auto axis = c.get_str("ablate.axis", "expansion_k");
    std::vector<std::string> values = split_list(c.get_str("ablate.values", ""));
    if (values.empty()) {
        if (axis == "expansion_k") values = {"0", "1", "3", "6", "12"};
        else if (axis == "grid_g") values = {"2", "3", "4", "5"};
        else if (axis == "embedding") values = {"cls", "patch_mean", "concat"};
        else if (axis == "loss") values = {"vanilla_ce", "scaled_ce", "distance_scaled_ce"};
        else throw ConfigError("unknown ablation axis: " + axis);
    }
    if (axis != "expansion_k" && axis != "grid_g" && axis != "embedding" && axis != "loss")
        throw ConfigError("unknown ablation axis: " + axis);

    std::vector<metrics::MetricsReport> rows;
    std::vector<std::string> labels;
    for (const auto& value : values) {
        KvConfig point = c;
        vit::ViTModel<T> encoder;
        if (axis == "expansion_k") {
            const int k = std::stoi(value);
            const int depth = static_cast<int>(c.get_int("model.depth", 6));
            if (k > depth) continue;  // sweep value not applicable to this depth
            point.set_int("model.expand_k", k);
            point.set("ssl.policy", k > 0 ? "be_ssl" : "unfrozen");
            auto model = base_model<T>(point, ctx);
            auto scfg = ssl_cfg_from(point, ctx);
            auto images = dataset_raw_images(point, 0, ctx,
                                             model.cfg.image_size * scfg.grid_split);
            encoder = ssl::post_pretrain(model, images, scfg,
                                         blockexp::freeze_policy_from(
                                             point.get_str("ssl.policy", "unfrozen")))
                          .encoder;
        } else if (axis == "grid_g") {
            point.set("ssl.grid_split", value);
            auto model = base_model<T>(point, ctx);
            auto scfg = ssl_cfg_from(point, ctx);
            auto images = dataset_raw_images(point, 0, ctx,
                                             model.cfg.image_size * scfg.grid_split);
            encoder = ssl::post_pretrain(model, images, scfg,
                                         blockexp::freeze_policy_from(
                                             point.get_str("ssl.policy", "unfrozen")))
                          .encoder;
        } else {
            if (axis == "embedding") point.set("finetune.strategy", value);
            if (axis == "loss") point.set("finetune.loss", value);
            const auto enc_path = c.get_str("finetune.encoder", "");
            encoder = enc_path.empty() ? base_model<T>(point, ctx)
                                       : ckpt::load_checkpoint<T>(enc_path);
        }
        auto ds = dataset_splits(point, 0, ctx, encoder.cfg.image_size);
        auto outcome = finetune_once(point, ctx, encoder, ds.splits.train, ds.splits.val,
                                     ds.splits.test, ds.splits.class_count, ds.splits.name,
                                     derive_seed(ctx.seed, "ablate"));
        outcome.test_report.meta.mode = axis + "=" + value;
        rows.push_back(std::move(outcome.test_report));
        labels.push_back(axis + "=" + value);
    }
    if (rows.empty()) throw ConfigError("ablation sweep produced no runs");
    report::write_reports_csv((fs::path(ctx.out_dir) / "ablate.csv").string(), rows);
    metric_heatmap((fs::path(ctx.out_dir) / "ablate_heatmap.svg").string(), "ablation: " + axis,
                   labels, rows);
}

// --- metrics (recompute from a predictions file) ------------------------------------

void run_metrics(const KvConfig& c, const RunContext& ctx) {
    const auto path = c.get_str("metrics.predictions", "");
    if (path.empty()) throw ConfigError("metrics.predictions path is required");
    std::ifstream in(path);
    if (!in) throw IoError("cannot open predictions: " + path);
    std::string line;
    if (!std::getline(in, line)) throw ParseError(path + ": empty file");
    const auto header = split_list(line);
    if (header.size() < 3 || header[0] != "label")
        throw ParseError(path + ": expected header 'label,p0,p1,...'");
    const int classes = static_cast<int>(header.size()) - 1;
    std::vector<int> labels;
    std::vector<double> probs;
    int line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const auto parts = split_list(line);
        if (parts.size() != header.size())
            throw ParseError(path + ":" + std::to_string(line_no) + ": wrong field count");
        labels.push_back(std::stoi(parts[0]));
        for (int k = 0; k < classes; ++k)
            probs.push_back(std::stod(parts[static_cast<std::size_t>(k) + 1]));
    }
    auto rep = metrics::compute_report(probs, labels, classes,
                                       meta_for(c, ctx, fs::path(path).stem().string(),
                                                "recompute", ctx.seed));
    report::write_report_json((fs::path(ctx.out_dir) / "report.json").string(), rep);
    std::vector<metrics::MetricsReport> rows = {rep};
    report::write_reports_csv((fs::path(ctx.out_dir) / "reports.csv").string(), rows);
}

void run_synth(const KvConfig& c, const RunContext& ctx) {
    const auto p = std::string("data.0.");
    data::SyntheticSpec spec;
    spec.n_per_class = static_cast<int>(c.get_int(p + "n_per_class", 40));
    spec.class_count = static_cast<int>(c.get_int(p + "classes", 5));
    spec.domain_id = static_cast<int>(c.get_int(p + "domain", 0));
    spec.lesion_rate = c.get_double(p + "lesion_rate", 2.0);
    const int base = static_cast<int>(c.get_int(p + "base_size", 0));
    spec.image_size = base > 0 ? base : static_cast<int>(c.get_int("model.image_size", 32));
    spec.seed = derive_seed(ctx.seed, "data", 0);
    auto ds = data::synth_generate(spec);
    data::export_synthetic(ds, spec.class_count, {0.7, 0.15, 0.15},
                           derive_seed(ctx.seed, "split", 0), ctx.out_dir,
                           c.get_str(p + "name", "synthA"));
}

template <class F32Fn, class F64Fn>
void dispatch(const RunContext& ctx, F32Fn f32, F64Fn f64) {
    if (ctx.precision == Precision::F32)
        f32();
    else
        f64();
}

}  // namespace

void cmd_pretrain(KvConfig c, const RunContext& ctx) {
    resolve_model_defaults(c);
    resolve_ssl_defaults(c);
    resolve_data_defaults(c, 1);
    prepare_out(c, ctx);
    dispatch(ctx, [&] { run_pretrain<float>(c, ctx); }, [&] { run_pretrain<double>(c, ctx); });
}

void cmd_finetune(KvConfig c, const RunContext& ctx) {
    resolve_model_defaults(c);
    resolve_finetune_defaults(c);
    resolve_data_defaults(c, 1);
    prepare_out(c, ctx);
    dispatch(ctx, [&] { run_finetune<float>(c, ctx); }, [&] { run_finetune<double>(c, ctx); });
}

void cmd_msdft(KvConfig c, const RunContext& ctx) {
    resolve_model_defaults(c);
    resolve_finetune_defaults(c);
    resolve_data_defaults(c, 2);
    prepare_out(c, ctx);
    dispatch(ctx, [&] { run_msdft<float>(c, ctx); }, [&] { run_msdft<double>(c, ctx); });
}

void cmd_crosseval(KvConfig c, const RunContext& ctx) {
    resolve_model_defaults(c);
    resolve_finetune_defaults(c);
    resolve_data_defaults(c, 2);
    prepare_out(c, ctx);
    dispatch(ctx, [&] { run_crosseval<float>(c, ctx); }, [&] { run_crosseval<double>(c, ctx); });
}

void cmd_fewshot(KvConfig c, const RunContext& ctx) {
    resolve_model_defaults(c);
    resolve_finetune_defaults(c);
    resolve_data_defaults(c, 1);
    defs(c, "fewshot.grid", "1,2,4,8,16");
    defi(c, "fewshot.replicates", 5);
    defs(c, "fewshot.modes", "frozen_bb");
    prepare_out(c, ctx);
    dispatch(ctx, [&] { run_fewshot<float>(c, ctx); }, [&] { run_fewshot<double>(c, ctx); });
}

void cmd_forgetting(KvConfig c, const RunContext& ctx) {
    resolve_model_defaults(c);
    resolve_ssl_defaults(c);
    resolve_data_defaults(c, 2);
    defi(c, "forgetting.expand_k", 2);
    defi(c, "forgetting.adapt_epochs", c.get_int("ssl.epochs", 3));
    defi(c, "knn.k", 20);
    prepare_out(c, ctx);
    dispatch(ctx, [&] { run_forgetting<float>(c, ctx); },
             [&] { run_forgetting<double>(c, ctx); });
}

void cmd_ablate(KvConfig c, const RunContext& ctx) {
    resolve_model_defaults(c);
    resolve_ssl_defaults(c);
    resolve_finetune_defaults(c);
    resolve_data_defaults(c, 1);
    defs(c, "ablate.axis", "expansion_k");
    defs(c, "ablate.values", "");
    prepare_out(c, ctx);
    dispatch(ctx, [&] { run_ablate<float>(c, ctx); }, [&] { run_ablate<double>(c, ctx); });
}

void cmd_metrics(KvConfig c, const RunContext& ctx) {
    defs(c, "metrics.predictions", "");
    defs(c, "model.name", "recompute");
    prepare_out(c, ctx);
    run_metrics(c, ctx);
}

void cmd_synth(KvConfig c, const RunContext& ctx) {
    resolve_model_defaults(c);
    resolve_data_defaults(c, 1);
    prepare_out(c, ctx);
    run_synth(c, ctx);
}

}  // namespace bevit::cli
