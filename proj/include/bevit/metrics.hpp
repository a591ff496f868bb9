#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "bevit/error.hpp"

namespace bevit::metrics {

// Row i = ground truth (rater A), column j = prediction (rater B).
struct ConfusionMatrix {
    int n_classes = 0;
    std::vector<std::int64_t> counts;  // row-major, n_classes^2

    std::int64_t at(int i, int j) const {
        return counts[static_cast<std::size_t>(i) * n_classes + j];
    }
    std::int64_t& at(int i, int j) {
        return counts[static_cast<std::size_t>(i) * n_classes + j];
    }
    std::vector<std::int64_t> row_sums() const;
    std::vector<std::int64_t> col_sums() const;
    std::int64_t total() const;
};

ConfusionMatrix confusion(std::span<const int> preds, std::span<const int> labels, int n_classes);

double accuracy(const ConfusionMatrix& cm);
// One-vs-rest per class, unweighted mean; a class with zero TP+FP or TP+FN
// contributes F1 = 0.
double macro_f1(const ConfusionMatrix& cm);
// 1 - O_w / E_w with w_ij = (i-j)^2 / (N-1)^2 and E_ij = A_i * B_j / T.
double qkappa(const ConfusionMatrix& cm);

// Mann-Whitney rank statistic; ties earn 0.5 credit. Labels are 0/1.
double auc_binary(std::span<const double> scores, std::span<const int> labels);

struct MacroAucResult {
    double auc = 0.0;
    std::vector<int> skipped_classes;  // absent or negative-free classes
};
// probs: row-major [n x n_classes] probability rows.
MacroAucResult auc_macro_ovr(std::span<const double> probs, int n_classes,
                             std::span<const int> labels);

enum class Referability { NonReferable, Referable };
Referability rdr_map(int stage);
double rdr_accuracy(std::span<const int> preds, std::span<const int> labels);

struct KnnConfig {
    int k = 20;
};

struct KnnScore {
    double top1 = 0.0;  // fraction in [0, 1]
    double top5 = 0.0;
};

// Cosine-similarity majority vote; class ties broken by summed similarity,
// then by class index. top5 counts a hit within the 5 best-ranked voted classes.
KnnScore knn_eval(std::span<const double> ref_embs, std::span<const int> ref_labels,
                  std::span<const double> query_embs, std::span<const int> query_labels,
                  std::int64_t dim, const KnnConfig& cfg);

struct ForgettingDelta {
    double top1_points = 0.0;  // (after - before) * 100
    double top5_points = 0.0;
};
ForgettingDelta forgetting_delta(const KnnScore& before, const KnnScore& after);

struct LdaResult {
    int out_dims = 2;
    std::vector<double> projected;   // [n x out_dims]
    std::vector<int> class_ids;
    std::vector<double> class_mean;  // [classes x out_dims]
    std::vector<double> class_sd;    // [classes x out_dims], sample SD
};
// Fisher LDA with ridge eps = ridge_scale * trace(S_W) / dim on the
// within-class scatter. Needs >= 2 classes with >= 2 samples each.
LdaResult lda_project(std::span<const double> embs, std::int64_t n, std::int64_t dim,
                      std::span<const int> labels, int out_dims = 2, double ridge_scale = 1e-6);

struct RunMeta {
    std::string model;
    std::string dataset;
    std::string mode;
    std::uint64_t seed = 0;
    std::string config_hash;
};

struct MetricsReport {
    double accuracy = 0.0;
    double macro_f1 = 0.0;
    double auc = 0.0;  // macro one-vs-rest
    double qkappa = 0.0;
    std::optional<double> rdr_accuracy;  // present for 5-stage tasks
    ConfusionMatrix cm;
    std::int64_t n_samples = 0;
    RunMeta meta;
};

// probs: row-major [n x n_classes]; predictions are row argmaxes. rDR accuracy
// is filled in for 5-class tasks.
MetricsReport compute_report(std::span<const double> probs, std::span<const int> labels,
                             int n_classes, const RunMeta& meta);

struct Aggregate {
    double mean = 0.0;
    double sd = 0.0;          // sample SD (n-1); 0 and flagged for single runs
    std::optional<double> sem;  // SD / sqrt(n); absent for single runs
    bool single_run = false;
};
Aggregate aggregate(std::span<const double> values);

struct ReportAggregate {
    Aggregate accuracy, macro_f1, auc, qkappa;
    std::optional<Aggregate> rdr_accuracy;
    std::size_t runs = 0;
};
ReportAggregate aggregate_runs(std::span<const MetricsReport> reports);

std::string to_json(const MetricsReport& report);
std::string report_csv_header();
std::string report_csv_row(const MetricsReport& report);

}  // namespace bevit::metrics
