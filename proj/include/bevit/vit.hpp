#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "bevit/tensor.hpp"

namespace bevit::vit {

enum class BlockOrigin { Original, Expanded };
enum class EmbeddingStrategy { Cls, PatchMean, Concat };

std::string to_string(EmbeddingStrategy s);
EmbeddingStrategy embedding_strategy_from(const std::string& s);

struct ViTConfig {
    int image_size = 32;
    int patch_size = 8;
    int dim = 64;
    int depth = 6;
    int heads = 4;
    int mlp_ratio = 4;
    int channels = 3;

    void validate() const;
    int grid() const { return image_size / patch_size; }
    int patches() const { return grid() * grid(); }
    int tokens() const { return 1 + patches(); }
    int patch_dim() const { return patch_size * patch_size * channels; }
};

template <class T>
struct Linear {
    num::Tensor<T> weight;  // [in x out]
    num::Tensor<T> bias;    // [out]
};

template <class T>
struct LayerNormParams {
    num::Tensor<T> gamma;
    num::Tensor<T> beta;
};

// Pre-norm residual block: x += Attn(LN1(x)); x += MLP(LN2(x)).
template <class T>
struct TransformerBlock {
    LayerNormParams<T> ln1;
    Linear<T> qkv;   // dim -> 3*dim
    Linear<T> proj;  // dim -> dim
    LayerNormParams<T> ln2;
    Linear<T> fc1;   // dim -> mlp_ratio*dim
    Linear<T> fc2;   // mlp_ratio*dim -> dim
    BlockOrigin origin = BlockOrigin::Original;
    bool trainable = true;
};

template <class T>
struct ClassifierHead {
    Linear<T> linear;  // [D' x C] where D' is dim or 2*dim for Concat
    EmbeddingStrategy strategy = EmbeddingStrategy::Cls;
    int num_classes = 0;
};

template <class T>
struct ViTModel {
    ViTConfig cfg;
    Linear<T> patch_embed;     // patch_dim -> dim
    num::Tensor<T> cls_token;  // [1 x dim]
    num::Tensor<T> pos_embed;  // [tokens x dim]
    std::vector<TransformerBlock<T>> blocks;
    LayerNormParams<T> final_norm;
    // patch/pos embeddings, class token and final norm share one freeze group
    bool embeddings_trainable = true;
    std::optional<ClassifierHead<T>> head;

    int depth() const { return static_cast<int>(blocks.size()); }
};

template <class T>
struct ForwardResult {
    num::Tensor<T> cls;         // [B x D]
    num::Tensor<T> patch_mean;  // [B x D]
    num::Tensor<T> logits;      // [B x C]; undefined when headless
};

template <class T>
struct NamedParam {
    std::string name;
    num::Tensor<T> tensor;
};

template <class T> ViTModel<T> init_model(const ViTConfig& cfg, std::uint64_t seed);

// Row-major non-overlapping patch flattening. Accepts [H x W x C] or
// [B x H x W x C]; output is a plain value tensor (no gradient to pixels).
template <class T> num::Tensor<T> patchify(const num::Tensor<T>& image, int patch_size);
template <class T> num::Tensor<T> unpatchify(const num::Tensor<T>& patches, int image_size,
                                             int patch_size, int channels);

template <class T> ForwardResult<T> forward(const ViTModel<T>& model, const num::Tensor<T>& batch);
template <class T> num::Tensor<T> extract_embedding(const ViTModel<T>& model,
                                                    const num::Tensor<T>& batch,
                                                    EmbeddingStrategy strategy);

template <class T>
void attach_head(ViTModel<T>& model, int num_classes, EmbeddingStrategy strategy,
                 std::uint64_t seed);

template <class T> std::int64_t count_params(const ViTModel<T>& model, bool trainable_only);
std::int64_t params_per_block(const ViTConfig& cfg);

// Stable order: embeddings, blocks in forward order, final norm, head.
template <class T> std::vector<NamedParam<T>> named_params(const ViTModel<T>& model);

template <class T> ViTModel<T> clone_model(const ViTModel<T>& model);

template <class T> void set_block_trainable(TransformerBlock<T>& block, bool trainable);
template <class T> void set_embeddings_trainable(ViTModel<T>& model, bool trainable);

}  // namespace bevit::vit
