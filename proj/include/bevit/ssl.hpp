#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bevit/blockexp.hpp"
#include "bevit/image.hpp"
#include "bevit/vit.hpp"

namespace bevit::ssl {

struct SSLConfig {
    int prototypes = 256;  // K
    double student_temp = 0.1;
    double teacher_temp = 0.04;
    double center_momentum = 0.9;
    double ema_base = 0.996;  // cosine-ramps to 1.0 over the run
    int local_crops = 2;      // global crops are always 2
    double global_scale_min = 0.5;
    double global_scale_max = 1.0;
    double local_scale_min = 0.2;
    double local_scale_max = 0.5;
    double view_rotation_deg = 15.0;  // 0 disables rotation
    double view_jitter = 0.2;         // 0 disables color jitter
    bool view_sharpness = true;
    int grid_split = 1;  // g, 1..5; multiplies the dataset by g^2 tiles
    int epochs = 5;
    int batch_size = 8;
    double lr = 1e-3;
    double weight_decay = 0.04;
    int hidden_dim = 128;
    int bottleneck_dim = 64;
    // What the projection head reads from the encoder. The class token is the
    // lineage default but is nearly constant for a small randomly initialized
    // encoder, which starves the bootstrap; the patch mean varies with image
    // content from step one.
    vit::EmbeddingStrategy head_input = vit::EmbeddingStrategy::PatchMean;
    std::uint64_t seed = 0;
    bool return_teacher = true;

    void validate() const;
};

// 3-layer MLP to an L2-normalized bottleneck, then a prototype layer whose
// rows are renormalized to unit length after every optimizer step.
template <class T>
struct SslHead {
    vit::Linear<T> fc1, fc2, fc3;
    num::Tensor<T> prototypes;  // [K x bottleneck]
};

template <class T>
SslHead<T> init_ssl_head(int input_dim, const SSLConfig& cfg, std::uint64_t seed);

template <class T>
num::Tensor<T> head_forward(const SslHead<T>& head, const num::Tensor<T>& embeddings);

template <class T>
void renormalize_prototypes(SslHead<T>& head);

template <class T>
std::vector<vit::NamedParam<T>> head_params(const SslHead<T>& head);

template <class T>
SslHead<T> clone_head(const SslHead<T>& head);

// Non-overlapping g x g tiling, row-major, each tile resized to out_size.
std::vector<img::Image> split_grid(const img::Image& image, int g, int out_size);

struct ViewSet {
    std::vector<img::Image> global_views;  // always 2
    std::vector<img::Image> local_views;   // cfg.local_crops
};
ViewSet make_views(const img::Image& image, const SSLConfig& cfg, RandomStream& rng, int out_size);

// Mean over (teacher view t, student view s), s not the same crop as t, of
// H(softmax((t - center)/tt), softmax(s/ts)). The first
// teacher_logits.size() student views are the matching global crops. Gradients
// flow to the student only.
template <class T>
num::Tensor<T> dino_loss(const std::vector<num::Tensor<T>>& student_logits,
                         const std::vector<num::Tensor<T>>& teacher_logits,
                         const num::Tensor<T>& center, double student_temp, double teacher_temp);

// theta_t <- m * theta_t + (1 - m) * theta_s, elementwise. Parameters frozen in
// the student are skipped: they are identical on both sides by construction and
// skipping keeps them bitwise equal.
template <class T>
void ema_update(vit::ViTModel<T>& teacher, const vit::ViTModel<T>& student, double momentum);
template <class T>
void ema_update_head(SslHead<T>& teacher, const SslHead<T>& student, double momentum);

template <class T>
void update_center(num::Tensor<T>& center, const num::Tensor<T>& teacher_logits_rows,
                   double center_momentum);

// Mean entropy of the centered, sharpened teacher distribution; the collapse
// guard watches this.
template <class T>
double teacher_entropy(const num::Tensor<T>& teacher_logits_rows, const num::Tensor<T>& center,
                       double teacher_temp);

struct StepLog {
    std::int64_t step = 0;
    double loss = 0.0;
    double teacher_entropy = 0.0;
    double lr = 0.0;
    double ema_momentum = 0.0;
};

std::string ssl_log_csv_header();
std::string ssl_log_csv_row(const StepLog& row);

template <class T>
struct SslResult {
    vit::ViTModel<T> encoder;  // teacher weights unless cfg.return_teacher is off
    std::vector<StepLog> log;
};

template <class T>
SslResult<T> post_pretrain(const vit::ViTModel<T>& model, const std::vector<img::Image>& dataset,
                           const SSLConfig& cfg, blockexp::FreezePolicy policy);

}  // namespace bevit::ssl
