#include "bevit/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "json.hpp"

namespace bevit::metrics {

std::vector<std::int64_t> ConfusionMatrix::row_sums() const {
    std::vector<std::int64_t> out(static_cast<std::size_t>(n_classes), 0);
    for (int i = 0; i < n_classes; ++i)
        for (int j = 0; j < n_classes; ++j) out[static_cast<std::size_t>(i)] += at(i, j);
    return out;
}

std::vector<std::int64_t> ConfusionMatrix::col_sums() const {
    std::vector<std::int64_t> out(static_cast<std::size_t>(n_classes), 0);
    for (int i = 0; i < n_classes; ++i)
        for (int j = 0; j < n_classes; ++j) out[static_cast<std::size_t>(j)] += at(i, j);
    return out;
}

std::int64_t ConfusionMatrix::total() const {
    return std::accumulate(counts.begin(), counts.end(), std::int64_t{0});
}

ConfusionMatrix confusion(std::span<const int> preds, std::span<const int> labels, int n_classes) {
    if (preds.size() != labels.size())
        throw LabelError("confusion: " + std::to_string(preds.size()) + " predictions vs " +
                         std::to_string(labels.size()) + " labels");
    if (preds.empty()) throw DataError("confusion matrix of zero samples is undefined");
    if (n_classes < 1) throw LabelError("confusion needs at least one class");
    ConfusionMatrix cm;
    cm.n_classes = n_classes;
    cm.counts.assign(static_cast<std::size_t>(n_classes) * n_classes, 0);
    for (std::size_t i = 0; i < preds.size(); ++i) {
        if (labels[i] < 0 || labels[i] >= n_classes || preds[i] < 0 || preds[i] >= n_classes)
            throw LabelError("confusion: sample " + std::to_string(i) + " has (truth=" +
                             std::to_string(labels[i]) + ", pred=" + std::to_string(preds[i]) +
                             ") outside [0, " + std::to_string(n_classes) + ")");
        ++cm.at(labels[i], preds[i]);
    }
    return cm;
}

double accuracy(const ConfusionMatrix& cm) {
    const auto t = cm.total();
    if (t == 0) throw DataError("accuracy of an empty confusion matrix");
    std::int64_t diag = 0;
    for (int i = 0; i < cm.n_classes; ++i) diag += cm.at(i, i);
    return static_cast<double>(diag) / static_cast<double>(t);
}

double macro_f1(const ConfusionMatrix& cm) {
    if (cm.total() == 0) throw DataError("macro F1 of an empty confusion matrix");
    const auto rows = cm.row_sums();
    const auto cols = cm.col_sums();
    double total = 0.0;
    for (int c = 0; c < cm.n_classes; ++c) {
        const double tp = static_cast<double>(cm.at(c, c));
        const double fp = static_cast<double>(cols[static_cast<std::size_t>(c)]) - tp;
        const double fn = static_cast<double>(rows[static_cast<std::size_t>(c)]) - tp;
        double f1 = 0.0;
        if (tp + fp > 0 && tp + fn > 0) {
            const double precision = tp / (tp + fp);
            const double recall = tp / (tp + fn);
            if (precision + recall > 0) f1 = 2.0 * precision * recall / (precision + recall);
        }
        total += f1;
    }
    return total / cm.n_classes;
}

double qkappa(const ConfusionMatrix& cm) {
    if (cm.n_classes < 2) throw MetricError("quadratic kappa needs at least 2 classes");
    const auto t = cm.total();
    if (t == 0) throw DataError("quadratic kappa of an empty confusion matrix");
    const auto a = cm.row_sums();
    const auto b = cm.col_sums();
    const double denom_w = static_cast<double>(cm.n_classes - 1) * (cm.n_classes - 1);
    double ow = 0.0, ew = 0.0;
    for (int i = 0; i < cm.n_classes; ++i)
        for (int j = 0; j < cm.n_classes; ++j) {
            const double w = static_cast<double>(i - j) * (i - j) / denom_w;
            ow += w * static_cast<double>(cm.at(i, j));
            ew += w * static_cast<double>(a[static_cast<std::size_t>(i)]) *
                  static_cast<double>(b[static_cast<std::size_t>(j)]) / static_cast<double>(t);
        }
    if (ew == 0.0)
        throw MetricError("quadratic kappa undefined: expected weighted agreement is zero");
    return 1.0 - ow / ew;
}

double auc_binary(std::span<const double> scores, std::span<const int> labels) {
    if (scores.size() != labels.size()) throw LabelError("auc: score/label length mismatch");
    std::int64_t pos = 0, neg = 0;
    for (int l : labels) (l != 0 ? pos : neg) += 1;
    if (pos == 0 || neg == 0)
        throw MetricError("auc undefined: needs at least one positive and one negative");

    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(),
              [&](std::size_t x, std::size_t y) { return scores[x] < scores[y]; });

    // average ranks across tied scores, then sum positive ranks
    double rank_sum_pos = 0.0;
    std::size_t i = 0;
    while (i < order.size()) {
        std::size_t j = i;
        while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
        const double avg_rank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j + 1));
        for (std::size_t t = i; t <= j; ++t)
            if (labels[order[t]] != 0) rank_sum_pos += avg_rank;
        i = j + 1;
    }
    const double p = static_cast<double>(pos), q = static_cast<double>(neg);
    return (rank_sum_pos - p * (p + 1.0) / 2.0) / (p * q);
}

MacroAucResult auc_macro_ovr(std::span<const double> probs, int n_classes,
                             std::span<const int> labels) {
    const std::size_t n = labels.size();
    if (probs.size() != n * static_cast<std::size_t>(n_classes))
        throw DimensionError("auc_macro_ovr: probability block does not match n x classes");
    MacroAucResult res;
    double total = 0.0;
    int used = 0;
    std::vector<double> col(n);
    std::vector<int> bin(n);
    for (int c = 0; c < n_classes; ++c) {
        std::int64_t pos = 0;
        for (std::size_t i = 0; i < n; ++i) {
            col[i] = probs[i * static_cast<std::size_t>(n_classes) + static_cast<std::size_t>(c)];
            bin[i] = labels[i] == c ? 1 : 0;
            pos += bin[i];
        }
        if (pos == 0 || pos == static_cast<std::int64_t>(n)) {
            res.skipped_classes.push_back(c);
            continue;
        }
        total += auc_binary(col, bin);
        ++used;
    }
    if (used == 0) throw MetricError("auc undefined for every class (single-class input)");
    res.auc = total / used;
    return res;
}

Referability rdr_map(int stage) {
    if (stage < 0 || stage > 4)
        throw LabelError("rDR stage " + std::to_string(stage) + " outside [0, 4]");
    return stage <= 1 ? Referability::NonReferable : Referability::Referable;
}

double rdr_accuracy(std::span<const int> preds, std::span<const int> labels) {
    if (preds.size() != labels.size() || preds.empty())
        throw LabelError("rdr_accuracy: empty or mismatched inputs");
    std::int64_t hits = 0;
    for (std::size_t i = 0; i < preds.size(); ++i)
        if (rdr_map(preds[i]) == rdr_map(labels[i])) ++hits;
    return static_cast<double>(hits) / static_cast<double>(preds.size());
}

namespace {

double cosine(const double* a, const double* b, std::int64_t dim) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::int64_t i = 0; i < dim; ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    return dot / (std::sqrt(na) * std::sqrt(nb) + 1e-30);
}

}  // namespace

KnnScore knn_eval(std::span<const double> ref_embs, std::span<const int> ref_labels,
                  std::span<const double> query_embs, std::span<const int> query_labels,
                  std::int64_t dim, const KnnConfig& cfg) {
    const std::size_t nref = ref_labels.size();
    const std::size_t nq = query_labels.size();
    if (nref == 0 || nq == 0) throw DataError("knn_eval: empty reference or query set");
    if (ref_embs.size() != nref * static_cast<std::size_t>(dim) ||
        query_embs.size() != nq * static_cast<std::size_t>(dim))
        throw DimensionError("knn_eval: embedding widths do not match dim");
    if (cfg.k < 1 || cfg.k > static_cast<int>(nref))
        throw ConfigError("knn k=" + std::to_string(cfg.k) + " outside [1, " +
                          std::to_string(nref) + "]");

    int n_classes = 0;
    for (int l : ref_labels) n_classes = std::max(n_classes, l + 1);
    for (int l : query_labels) n_classes = std::max(n_classes, l + 1);

    std::int64_t top1 = 0, top5 = 0;
    std::vector<std::pair<double, std::size_t>> sims(nref);
    std::vector<double> votes(static_cast<std::size_t>(n_classes));
    std::vector<double> simsum(static_cast<std::size_t>(n_classes));
    for (std::size_t qi = 0; qi < nq; ++qi) {
        const double* q = query_embs.data() + qi * static_cast<std::size_t>(dim);
        for (std::size_t ri = 0; ri < nref; ++ri)
            sims[ri] = {cosine(q, ref_embs.data() + ri * static_cast<std::size_t>(dim), dim), ri};
        std::partial_sort(sims.begin(), sims.begin() + cfg.k, sims.end(),
                          [](const auto& a, const auto& b) {
                              if (a.first != b.first) return a.first > b.first;
                              return a.second < b.second;
                          });
        std::fill(votes.begin(), votes.end(), 0.0);
        std::fill(simsum.begin(), simsum.end(), 0.0);
        for (int t = 0; t < cfg.k; ++t) {
            const int cls = ref_labels[sims[static_cast<std::size_t>(t)].second];
            votes[static_cast<std::size_t>(cls)] += 1.0;
            simsum[static_cast<std::size_t>(cls)] += sims[static_cast<std::size_t>(t)].first;
        }
        std::vector<int> ranked;
        for (int c = 0; c < n_classes; ++c)
            if (votes[static_cast<std::size_t>(c)] > 0) ranked.push_back(c);
        std::sort(ranked.begin(), ranked.end(), [&](int a, int b) {
            if (votes[static_cast<std::size_t>(a)] != votes[static_cast<std::size_t>(b)])
                return votes[static_cast<std::size_t>(a)] > votes[static_cast<std::size_t>(b)];
            if (simsum[static_cast<std::size_t>(a)] != simsum[static_cast<std::size_t>(b)])
                return simsum[static_cast<std::size_t>(a)] > simsum[static_cast<std::size_t>(b)];
            return a < b;
        });
        const int want = query_labels[qi];
        if (!ranked.empty() && ranked[0] == want) ++top1;
        const std::size_t depth = std::min<std::size_t>(5, ranked.size());
        for (std::size_t r = 0; r < depth; ++r)
            if (ranked[r] == want) {
                ++top5;
                break;
            }
    }
    KnnScore score;
    score.top1 = static_cast<double>(top1) / static_cast<double>(nq);
    score.top5 = static_cast<double>(top5) / static_cast<double>(nq);
    return score;
}

ForgettingDelta forgetting_delta(const KnnScore& before, const KnnScore& after) {
    return {100.0 * (after.top1 - before.top1), 100.0 * (after.top5 - before.top5)};
}

// --- LDA ---------------------------------------------------------------------

namespace {

// Cholesky factorization in place; `a` is dim x dim row-major, lower triangle out.
void cholesky(std::vector<double>& a, std::int64_t dim) {
    for (std::int64_t i = 0; i < dim; ++i) {
        for (std::int64_t j = 0; j <= i; ++j) {
            double s = a[static_cast<std::size_t>(i * dim + j)];
            for (std::int64_t k = 0; k < j; ++k)
                s -= a[static_cast<std::size_t>(i * dim + k)] * a[static_cast<std::size_t>(j * dim + k)];
            if (i == j) {
                if (s <= 0.0) throw MetricError("lda: scatter matrix not positive definite");
                a[static_cast<std::size_t>(i * dim + j)] = std::sqrt(s);
            } else {
                a[static_cast<std::size_t>(i * dim + j)] = s / a[static_cast<std::size_t>(j * dim + j)];
            }
        }
        for (std::int64_t j = i + 1; j < dim; ++j) a[static_cast<std::size_t>(i * dim + j)] = 0.0;
    }
}

// Solve L x = b (forward) for column vectors stored in `b` (in place).
void solve_lower(const std::vector<double>& l, std::vector<double>& b, std::int64_t dim) {
    for (std::int64_t i = 0; i < dim; ++i) {
        double s = b[static_cast<std::size_t>(i)];
        for (std::int64_t k = 0; k < i; ++k)
            s -= l[static_cast<std::size_t>(i * dim + k)] * b[static_cast<std::size_t>(k)];
        b[static_cast<std::size_t>(i)] = s / l[static_cast<std::size_t>(i * dim + i)];
    }
}

// Solve L^T x = b (backward) in place.
void solve_upper_t(const std::vector<double>& l, std::vector<double>& b, std::int64_t dim) {
    for (std::int64_t i = dim - 1; i >= 0; --i) {
        double s = b[static_cast<std::size_t>(i)];
        for (std::int64_t k = i + 1; k < dim; ++k)
            s -= l[static_cast<std::size_t>(k * dim + i)] * b[static_cast<std::size_t>(k)];
        b[static_cast<std::size_t>(i)] = s / l[static_cast<std::size_t>(i * dim + i)];
    }
}

// Cyclic Jacobi eigensolver for a symmetric matrix; returns eigenvalues and
// fills `vecs` column-major with eigenvectors.
std::vector<double> jacobi_eig(std::vector<double> m, std::int64_t dim, std::vector<double>& vecs) {
    vecs.assign(static_cast<std::size_t>(dim * dim), 0.0);
    for (std::int64_t i = 0; i < dim; ++i) vecs[static_cast<std::size_t>(i * dim + i)] = 1.0;
    auto at = [&](std::vector<double>& a, std::int64_t r, std::int64_t c) -> double& {
        return a[static_cast<std::size_t>(r * dim + c)];
    };
    for (int sweep = 0; sweep < 60; ++sweep) {
        double off = 0.0;
        for (std::int64_t p = 0; p < dim; ++p)
            for (std::int64_t q = p + 1; q < dim; ++q) off += at(m, p, q) * at(m, p, q);
        if (off < 1e-24) break;
        for (std::int64_t p = 0; p < dim; ++p)
            for (std::int64_t q = p + 1; q < dim; ++q) {
                const double apq = at(m, p, q);
                if (std::fabs(apq) < 1e-300) continue;
                const double theta = (at(m, q, q) - at(m, p, p)) / (2.0 * apq);
                const double t = (theta >= 0 ? 1.0 : -1.0) /
                                 (std::fabs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (std::int64_t i = 0; i < dim; ++i) {
                    const double mip = at(m, i, p), miq = at(m, i, q);
                    at(m, i, p) = c * mip - s * miq;
                    at(m, i, q) = s * mip + c * miq;
                }
                for (std::int64_t i = 0; i < dim; ++i) {
                    const double mpi = at(m, p, i), mqi = at(m, q, i);
                    at(m, p, i) = c * mpi - s * mqi;
                    at(m, q, i) = s * mpi + c * mqi;
                }
                for (std::int64_t i = 0; i < dim; ++i) {
                    const double vip = at(vecs, i, p), viq = at(vecs, i, q);
                    at(vecs, i, p) = c * vip - s * viq;
                    at(vecs, i, q) = s * vip + c * viq;
                }
            }
    }
    std::vector<double> eig(static_cast<std::size_t>(dim));
    for (std::int64_t i = 0; i < dim; ++i) eig[static_cast<std::size_t>(i)] = at(m, i, i);
    return eig;
}

}  // namespace

LdaResult lda_project(std::span<const double> embs, std::int64_t n, std::int64_t dim,
                      std::span<const int> labels, int out_dims, double ridge_scale) {
    if (static_cast<std::size_t>(n) != labels.size() ||
        embs.size() != static_cast<std::size_t>(n * dim))
        throw DimensionError("lda_project: embedding block does not match n x dim");
    std::vector<int> class_ids;
    for (int l : labels)
        if (std::find(class_ids.begin(), class_ids.end(), l) == class_ids.end())
            class_ids.push_back(l);
    std::sort(class_ids.begin(), class_ids.end());
    if (class_ids.size() < 2) throw MetricError("lda needs at least 2 classes");
    for (int c : class_ids) {
        const auto count = std::count(labels.begin(), labels.end(), c);
        if (count < 2)
            throw MetricError("lda class " + std::to_string(c) + " has fewer than 2 samples");
    }

    const std::size_t nc = class_ids.size();
    const auto idx_of = [&](int label) {
        return static_cast<std::size_t>(
            std::find(class_ids.begin(), class_ids.end(), label) - class_ids.begin());
    };

    std::vector<double> mean_c(nc * static_cast<std::size_t>(dim), 0.0);
    std::vector<std::int64_t> count_c(nc, 0);
    std::vector<double> mean_all(static_cast<std::size_t>(dim), 0.0);
    for (std::int64_t i = 0; i < n; ++i) {
        const std::size_t c = idx_of(labels[static_cast<std::size_t>(i)]);
        ++count_c[c];
        for (std::int64_t d = 0; d < dim; ++d) {
            const double v = embs[static_cast<std::size_t>(i * dim + d)];
            mean_c[c * static_cast<std::size_t>(dim) + static_cast<std::size_t>(d)] += v;
            mean_all[static_cast<std::size_t>(d)] += v;
        }
    }
    for (std::size_t c = 0; c < nc; ++c)
        for (std::int64_t d = 0; d < dim; ++d)
            mean_c[c * static_cast<std::size_t>(dim) + static_cast<std::size_t>(d)] /=
                static_cast<double>(count_c[c]);
    for (std::int64_t d = 0; d < dim; ++d) mean_all[static_cast<std::size_t>(d)] /= static_cast<double>(n);

    std::vector<double> sw(static_cast<std::size_t>(dim * dim), 0.0);
    std::vector<double> sb(static_cast<std::size_t>(dim * dim), 0.0);
    std::vector<double> diff(static_cast<std::size_t>(dim));
    for (std::int64_t i = 0; i < n; ++i) {
        const std::size_t c = idx_of(labels[static_cast<std::size_t>(i)]);
        for (std::int64_t d = 0; d < dim; ++d)
            diff[static_cast<std::size_t>(d)] =
                embs[static_cast<std::size_t>(i * dim + d)] -
                mean_c[c * static_cast<std::size_t>(dim) + static_cast<std::size_t>(d)];
        for (std::int64_t r = 0; r < dim; ++r)
            for (std::int64_t s = 0; s < dim; ++s)
                sw[static_cast<std::size_t>(r * dim + s)] +=
                    diff[static_cast<std::size_t>(r)] * diff[static_cast<std::size_t>(s)];
    }
    for (std::size_t c = 0; c < nc; ++c) {
        for (std::int64_t d = 0; d < dim; ++d)
            diff[static_cast<std::size_t>(d)] =
                mean_c[c * static_cast<std::size_t>(dim) + static_cast<std::size_t>(d)] -
                mean_all[static_cast<std::size_t>(d)];
        for (std::int64_t r = 0; r < dim; ++r)
            for (std::int64_t s = 0; s < dim; ++s)
                sb[static_cast<std::size_t>(r * dim + s)] += static_cast<double>(count_c[c]) *
                                                             diff[static_cast<std::size_t>(r)] *
                                                             diff[static_cast<std::size_t>(s)];
    }

    double trace = 0.0;
    for (std::int64_t d = 0; d < dim; ++d) trace += sw[static_cast<std::size_t>(d * dim + d)];
    const double eps = std::max(ridge_scale * trace / static_cast<double>(dim), 1e-12);
    for (std::int64_t d = 0; d < dim; ++d) sw[static_cast<std::size_t>(d * dim + d)] += eps;

    // generalized problem via Cholesky: M = L^-1 Sb L^-T
    cholesky(sw, dim);
    std::vector<double> m(static_cast<std::size_t>(dim * dim));
    std::vector<double> colbuf(static_cast<std::size_t>(dim));
    // first: X = L^-1 Sb  (solve per column of Sb)
    for (std::int64_t col = 0; col < dim; ++col) {
        for (std::int64_t r = 0; r < dim; ++r)
            colbuf[static_cast<std::size_t>(r)] = sb[static_cast<std::size_t>(r * dim + col)];
        solve_lower(sw, colbuf, dim);
        for (std::int64_t r = 0; r < dim; ++r)
            m[static_cast<std::size_t>(r * dim + col)] = colbuf[static_cast<std::size_t>(r)];
    }
    // then: M = X L^-T, i.e. solve rows against L
    for (std::int64_t row = 0; row < dim; ++row) {
        for (std::int64_t c2 = 0; c2 < dim; ++c2)
            colbuf[static_cast<std::size_t>(c2)] = m[static_cast<std::size_t>(row * dim + c2)];
        solve_lower(sw, colbuf, dim);
        for (std::int64_t c2 = 0; c2 < dim; ++c2)
            m[static_cast<std::size_t>(row * dim + c2)] = colbuf[static_cast<std::size_t>(c2)];
    }

    std::vector<double> vecs;
    auto eig = jacobi_eig(std::move(m), dim, vecs);
    std::vector<std::int64_t> order(static_cast<std::size_t>(dim));
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::int64_t a, std::int64_t b) {
        if (eig[static_cast<std::size_t>(a)] != eig[static_cast<std::size_t>(b)])
            return eig[static_cast<std::size_t>(a)] > eig[static_cast<std::size_t>(b)];
        return a < b;
    });

    // rank(S_B) <= classes-1, so components beyond that are arbitrary null-space
    // directions; cap like standard LDA implementations do
    const int k = std::min<int>({out_dims, static_cast<int>(dim), static_cast<int>(nc) - 1});
    std::vector<double> w(static_cast<std::size_t>(dim) * static_cast<std::size_t>(k));
    for (int j = 0; j < k; ++j) {
        for (std::int64_t r = 0; r < dim; ++r)
            colbuf[static_cast<std::size_t>(r)] =
                vecs[static_cast<std::size_t>(r * dim + order[static_cast<std::size_t>(j)])];
        solve_upper_t(sw, colbuf, dim);  // back to the original coordinates
        // deterministic sign: largest-magnitude component positive
        std::int64_t big = 0;
        for (std::int64_t r = 1; r < dim; ++r)
            if (std::fabs(colbuf[static_cast<std::size_t>(r)]) >
                std::fabs(colbuf[static_cast<std::size_t>(big)]))
                big = r;
        const double sign = colbuf[static_cast<std::size_t>(big)] < 0 ? -1.0 : 1.0;
        for (std::int64_t r = 0; r < dim; ++r)
            w[static_cast<std::size_t>(r) * static_cast<std::size_t>(k) + static_cast<std::size_t>(j)] =
                sign * colbuf[static_cast<std::size_t>(r)];
    }

    LdaResult res;
    res.out_dims = k;
    res.class_ids = class_ids;
    res.projected.assign(static_cast<std::size_t>(n) * static_cast<std::size_t>(k), 0.0);
    for (std::int64_t i = 0; i < n; ++i)
        for (int j = 0; j < k; ++j) {
            double acc = 0.0;
            for (std::int64_t d = 0; d < dim; ++d)
                acc += embs[static_cast<std::size_t>(i * dim + d)] *
                       w[static_cast<std::size_t>(d) * static_cast<std::size_t>(k) +
                         static_cast<std::size_t>(j)];
            res.projected[static_cast<std::size_t>(i) * static_cast<std::size_t>(k) +
                          static_cast<std::size_t>(j)] = acc;
        }

    res.class_mean.assign(nc * static_cast<std::size_t>(k), 0.0);
    res.class_sd.assign(nc * static_cast<std::size_t>(k), 0.0);
    for (std::int64_t i = 0; i < n; ++i) {
        const std::size_t c = idx_of(labels[static_cast<std::size_t>(i)]);
        for (int j = 0; j < k; ++j)
            res.class_mean[c * static_cast<std::size_t>(k) + static_cast<std::size_t>(j)] +=
                res.projected[static_cast<std::size_t>(i) * static_cast<std::size_t>(k) +
                              static_cast<std::size_t>(j)];
    }
    for (std::size_t c = 0; c < nc; ++c)
        for (int j = 0; j < k; ++j)
            res.class_mean[c * static_cast<std::size_t>(k) + static_cast<std::size_t>(j)] /=
                static_cast<double>(count_c[c]);
    for (std::int64_t i = 0; i < n; ++i) {
        const std::size_t c = idx_of(labels[static_cast<std::size_t>(i)]);
        for (int j = 0; j < k; ++j) {
            const double d =
                res.projected[static_cast<std::size_t>(i) * static_cast<std::size_t>(k) +
                              static_cast<std::size_t>(j)] -
                res.class_mean[c * static_cast<std::size_t>(k) + static_cast<std::size_t>(j)];
            res.class_sd[c * static_cast<std::size_t>(k) + static_cast<std::size_t>(j)] += d * d;
        }
    }
    for (std::size_t c = 0; c < nc; ++c)
        for (int j = 0; j < k; ++j)
            res.class_sd[c * static_cast<std::size_t>(k) + static_cast<std::size_t>(j)] = std::sqrt(
                res.class_sd[c * static_cast<std::size_t>(k) + static_cast<std::size_t>(j)] /
                static_cast<double>(count_c[c] - 1));
    return res;
}

// --- reports ------------------------------------------------------------------

MetricsReport compute_report(std::span<const double> probs, std::span<const int> labels,
                             int n_classes, const RunMeta& meta) {
    const std::size_t n = labels.size();
    if (probs.size() != n * static_cast<std::size_t>(n_classes))
        throw DimensionError("compute_report: probability block does not match n x classes");
    if (n == 0) throw DataError("compute_report: no samples");
    std::vector<int> preds(n);
    for (std::size_t i = 0; i < n; ++i) {
        int best = 0;
        for (int c = 1; c < n_classes; ++c)
            if (probs[i * static_cast<std::size_t>(n_classes) + static_cast<std::size_t>(c)] >
                probs[i * static_cast<std::size_t>(n_classes) + static_cast<std::size_t>(best)])
                best = c;
        preds[i] = best;
    }
    MetricsReport rep;
    rep.cm = confusion(preds, labels, n_classes);
    rep.accuracy = accuracy(rep.cm);
    rep.macro_f1 = macro_f1(rep.cm);
    rep.qkappa = qkappa(rep.cm);
    rep.auc = auc_macro_ovr(probs, n_classes, labels).auc;
    if (n_classes == 5) rep.rdr_accuracy = rdr_accuracy(preds, labels);
    rep.n_samples = static_cast<std::int64_t>(n);
    rep.meta = meta;
    return rep;
}

Aggregate aggregate(std::span<const double> values) {
    if (values.empty()) throw DataError("aggregate of zero runs");
    Aggregate a;
    a.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
    if (values.size() == 1) {
        a.single_run = true;
        a.sd = 0.0;
        return a;
    }
    double ss = 0.0;
    for (double v : values) ss += (v - a.mean) * (v - a.mean);
    a.sd = std::sqrt(ss / static_cast<double>(values.size() - 1));
    a.sem = a.sd / std::sqrt(static_cast<double>(values.size()));
    return a;
}

ReportAggregate aggregate_runs(std::span<const MetricsReport> reports) {
    if (reports.empty()) throw DataError("aggregate_runs of zero reports");
    ReportAggregate out;
    out.runs = reports.size();
    auto pull = [&](auto getter) {
        std::vector<double> v;
        v.reserve(reports.size());
        for (const auto& r : reports) v.push_back(getter(r));
        return aggregate(v);
    };
    out.accuracy = pull([](const MetricsReport& r) { return r.accuracy; });
    out.macro_f1 = pull([](const MetricsReport& r) { return r.macro_f1; });
    out.auc = pull([](const MetricsReport& r) { return r.auc; });
    out.qkappa = pull([](const MetricsReport& r) { return r.qkappa; });
    bool all_rdr = true;
    for (const auto& r : reports) all_rdr = all_rdr && r.rdr_accuracy.has_value();
    if (all_rdr)
        out.rdr_accuracy = pull([](const MetricsReport& r) { return *r.rdr_accuracy; });
    return out;
}

std::string to_json(const MetricsReport& report) {
    nlohmann::ordered_json j;
    j["model"] = report.meta.model;
    j["dataset"] = report.meta.dataset;
    j["mode"] = report.meta.mode;
    j["seed"] = report.meta.seed;
    j["config_hash"] = report.meta.config_hash;
    j["n_samples"] = report.n_samples;
    j["accuracy"] = report.accuracy;
    j["macro_f1"] = report.macro_f1;
    j["auc"] = report.auc;
    j["qkappa"] = report.qkappa;
    if (report.rdr_accuracy)
        j["rdr_accuracy"] = *report.rdr_accuracy;
    else
        j["rdr_accuracy"] = nullptr;
    j["n_classes"] = report.cm.n_classes;
    j["confusion"] = report.cm.counts;
    return j.dump(2);
}

std::string report_csv_header() {
    return "model,dataset,mode,seed,n_samples,accuracy,macro_f1,auc,qkappa,rdr_accuracy,"
           "config_hash";
}

std::string report_csv_row(const MetricsReport& r) {
    char buf[512];
    std::string rdr = r.rdr_accuracy ? [&] {
        char b[32];
        std::snprintf(b, sizeof b, "%.6f", *r.rdr_accuracy);
        return std::string(b);
    }() : std::string();
    std::snprintf(buf, sizeof buf, "%s,%s,%s,%llu,%lld,%.6f,%.6f,%.6f,%.6f,%s,%s",
                  r.meta.model.c_str(), r.meta.dataset.c_str(), r.meta.mode.c_str(),
                  static_cast<unsigned long long>(r.meta.seed),
                  static_cast<long long>(r.n_samples), r.accuracy, r.macro_f1, r.auc, r.qkappa,
                  rdr.c_str(), r.meta.config_hash.c_str());
    return std::string(buf);
}

}  // namespace bevit::metrics
