#include "bevit/vit.hpp"

#include <cmath>

#include "bevit/rng.hpp"

namespace bevit::vit {

using num::Shape;
using num::Tensor;

std::string to_string(EmbeddingStrategy s) {
    switch (s) {
        case EmbeddingStrategy::Cls: return "cls";
        case EmbeddingStrategy::PatchMean: return "patch_mean";
        case EmbeddingStrategy::Concat: return "concat";
    }
    return "cls";
}

EmbeddingStrategy embedding_strategy_from(const std::string& s) {
    if (s == "cls") return EmbeddingStrategy::Cls;
    if (s == "patch_mean") return EmbeddingStrategy::PatchMean;
    if (s == "concat") return EmbeddingStrategy::Concat;
    throw ConfigError("unknown embedding strategy: " + s);
}

void ViTConfig::validate() const {
    if (image_size <= 0 || patch_size <= 0 || dim <= 0 || depth < 0 || heads <= 0 ||
        mlp_ratio <= 0 || channels <= 0)
        throw ConfigError("ViT config fields must be positive (depth may be 0)");
    if (image_size % patch_size != 0)
        throw ConfigError("image_size " + std::to_string(image_size) +
                          " not divisible by patch_size " + std::to_string(patch_size));
    if (dim % heads != 0)
        throw ConfigError("dim " + std::to_string(dim) + " not divisible by heads " +
                          std::to_string(heads));
}

namespace {

template <class T>
Tensor<T> trunc_normal(Shape shape, RandomStream& rng, double sigma) {
    std::vector<T> vals(static_cast<std::size_t>(num::shape_numel(shape)));
    for (auto& v : vals) v = static_cast<T>(rng.truncated_normal(sigma));
    return Tensor<T>::from(std::move(shape), std::move(vals), true);
}

template <class T>
Linear<T> init_linear(std::int64_t in, std::int64_t out, RandomStream& rng) {
    Linear<T> l;
    l.weight = trunc_normal<T>({in, out}, rng, 0.02);
    l.bias = Tensor<T>::zeros({out}, true);
    return l;
}

template <class T>
LayerNormParams<T> init_ln(std::int64_t len) {
    LayerNormParams<T> ln;
    ln.gamma = Tensor<T>::full({len}, T(1), true);
    ln.beta = Tensor<T>::zeros({len}, true);
    return ln;
}

template <class T>
TransformerBlock<T> init_block(const ViTConfig& cfg, RandomStream& rng) {
    TransformerBlock<T> b;
    const std::int64_t d = cfg.dim;
    b.ln1 = init_ln<T>(d);
    b.qkv = init_linear<T>(d, 3 * d, rng);
    b.proj = init_linear<T>(d, d, rng);
    b.ln2 = init_ln<T>(d);
    b.fc1 = init_linear<T>(d, cfg.mlp_ratio * d, rng);
    b.fc2 = init_linear<T>(cfg.mlp_ratio * d, d, rng);
    return b;
}

template <class T>
Tensor<T> linear2d(const Tensor<T>& x, const Linear<T>& l) {
    return num::add(num::matmul(x, l.weight), l.bias);
}

// x: [B x T x D] -> [B x T x out]
template <class T>
Tensor<T> linear_tokens(const Tensor<T>& x, const Linear<T>& l) {
    const auto B = x.dim(0), t = x.dim(1), d = x.dim(2);
    auto flat = num::reshape(x, {B * t, d});
    auto y = linear2d(flat, l);
    return num::reshape(y, {B, t, l.weight.dim(1)});
}

template <class T>
Tensor<T> block_forward(const TransformerBlock<T>& blk, const Tensor<T>& x, int heads) {
    const auto B = x.dim(0), tk = x.dim(1), d = x.dim(2);
    const std::int64_t dh = d / heads;
    const T eps = static_cast<T>(1e-6);

    auto h = num::layer_norm(x, blk.ln1.gamma, blk.ln1.beta, eps);
    auto qkv = linear_tokens(h, blk.qkv);  // [B x T x 3D]
    auto to_heads = [&](const Tensor<T>& part) {
        auto r = num::reshape(part, {B, tk, heads, dh});
        auto p = num::transpose(r, {0, 2, 1, 3});  // [B x H x T x dh]
        return num::reshape(p, {B * heads, tk, dh});
    };
    auto q = to_heads(num::slice(qkv, 2, 0, d));
    auto k = to_heads(num::slice(qkv, 2, d, d));
    auto v = to_heads(num::slice(qkv, 2, 2 * d, d));

    auto scores = num::scale(num::bmm(q, num::transpose(k, {0, 2, 1})),
                             static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh))));
    auto att = num::softmax(scores, 2, T(1));
    auto ctx = num::bmm(att, v);  // [B*H x T x dh]
    auto merged = num::reshape(
        num::transpose(num::reshape(ctx, {B, heads, tk, dh}), {0, 2, 1, 3}), {B, tk, d});
    auto attn_out = linear_tokens(merged, blk.proj);
    auto x1 = num::add(x, attn_out);

    auto h2 = num::layer_norm(x1, blk.ln2.gamma, blk.ln2.beta, eps);
    auto mlp = linear_tokens(num::gelu(linear_tokens(h2, blk.fc1)), blk.fc2);
    return num::add(x1, mlp);
}

template <class T>
void collect_linear(std::vector<NamedParam<T>>& out, const std::string& prefix,
                    const Linear<T>& l) {
    out.push_back({prefix + ".weight", l.weight});
    out.push_back({prefix + ".bias", l.bias});
}

template <class T>
void collect_ln(std::vector<NamedParam<T>>& out, const std::string& prefix,
                const LayerNormParams<T>& l) {
    out.push_back({prefix + ".gamma", l.gamma});
    out.push_back({prefix + ".beta", l.beta});
}

}  // namespace

template <class T>
ViTModel<T> init_model(const ViTConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    RandomStream rng(derive_seed(seed, "vit.init"));
    ViTModel<T> m;
    m.cfg = cfg;
    m.patch_embed = init_linear<T>(cfg.patch_dim(), cfg.dim, rng);
    m.cls_token = trunc_normal<T>({1, cfg.dim}, rng, 0.02);
    m.pos_embed = trunc_normal<T>({cfg.tokens(), cfg.dim}, rng, 0.02);
    m.blocks.reserve(static_cast<std::size_t>(cfg.depth));
    for (int i = 0; i < cfg.depth; ++i) m.blocks.push_back(init_block<T>(cfg, rng));
    m.final_norm = init_ln<T>(cfg.dim);
    return m;
}

template <class T>
Tensor<T> patchify(const Tensor<T>& image, int patch_size) {
    const bool batched = image.ndim() == 4;
    if (!batched && image.ndim() != 3)
        throw DimensionError("patchify expects [HxWxC] or [BxHxWxC], got " +
                             num::shape_str(image.shape()));
    const std::int64_t B = batched ? image.dim(0) : 1;
    const std::int64_t H = image.dim(batched ? 1 : 0);
    const std::int64_t W = image.dim(batched ? 2 : 1);
    const std::int64_t C = image.dim(batched ? 3 : 2);
    if (H != W || H % patch_size != 0)
        throw DimensionError("patchify needs square images divisible by patch size, got " +
                             num::shape_str(image.shape()) + " with patch " +
                             std::to_string(patch_size));
    const std::int64_t g = H / patch_size;
    const std::int64_t n = g * g;
    const std::int64_t p = patch_size;
    const std::int64_t pd = p * p * C;
    std::vector<T> out(static_cast<std::size_t>(B * n * pd));
    const auto v = image.values();
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t gy = 0; gy < g; ++gy)
            for (std::int64_t gx = 0; gx < g; ++gx) {
                T* dst = out.data() + ((b * n + gy * g + gx) * pd);
                for (std::int64_t py = 0; py < p; ++py)
                    for (std::int64_t px = 0; px < p; ++px)
                        for (std::int64_t c = 0; c < C; ++c)
                            *dst++ = v[static_cast<std::size_t>(
                                ((b * H + gy * p + py) * W + gx * p + px) * C + c)];
            }
    Shape shape = batched ? Shape{B, n, pd} : Shape{n, pd};
    return Tensor<T>::from(std::move(shape), std::move(out));
}

template <class T>
Tensor<T> unpatchify(const Tensor<T>& patches, int image_size, int patch_size, int channels) {
    const bool batched = patches.ndim() == 3;
    if (!batched && patches.ndim() != 2)
        throw DimensionError("unpatchify expects [NxP] or [BxNxP]");
    const std::int64_t B = batched ? patches.dim(0) : 1;
    const std::int64_t g = image_size / patch_size;
    const std::int64_t n = g * g;
    const std::int64_t p = patch_size;
    const std::int64_t C = channels;
    const std::int64_t pd = p * p * C;
    if (patches.dim(batched ? 1 : 0) != n || patches.dim(batched ? 2 : 1) != pd)
        throw DimensionError("unpatchify shape mismatch");
    std::vector<T> out(static_cast<std::size_t>(B * image_size * image_size * C));
    const auto v = patches.values();
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t gy = 0; gy < g; ++gy)
            for (std::int64_t gx = 0; gx < g; ++gx) {
                const T* src = v.data() + ((b * n + gy * g + gx) * pd);
                for (std::int64_t py = 0; py < p; ++py)
                    for (std::int64_t px = 0; px < p; ++px)
                        for (std::int64_t c = 0; c < C; ++c)
                            out[static_cast<std::size_t>(
                                ((b * image_size + gy * p + py) * image_size + gx * p + px) * C +
                                c)] = *src++;
            }
    Shape shape = batched ? Shape{B, image_size, image_size, C} : Shape{image_size, image_size, C};
    return Tensor<T>::from(std::move(shape), std::move(out));
}

template <class T>
ForwardResult<T> forward(const ViTModel<T>& model, const num::Tensor<T>& batch) {
    if (batch.ndim() != 4)
        throw DimensionError("forward expects [BxHxWxC], got " + num::shape_str(batch.shape()));
    const auto& cfg = model.cfg;
    if (batch.dim(1) != cfg.image_size || batch.dim(2) != cfg.image_size ||
        batch.dim(3) != cfg.channels)
        throw DimensionError("batch " + num::shape_str(batch.shape()) +
                             " does not match configured input " +
                             std::to_string(cfg.image_size) + "x" + std::to_string(cfg.image_size) +
                             "x" + std::to_string(cfg.channels));
    const std::int64_t B = batch.dim(0);
    const std::int64_t n = cfg.patches();
    const std::int64_t d = cfg.dim;

    auto patches = patchify(batch, cfg.patch_size);  // [B x N x P]
    auto tok2d = linear2d(num::reshape(patches, {B * n, cfg.patch_dim()}), model.patch_embed);
    auto tokens = num::reshape(tok2d, {B, n, d});
    auto cls = num::broadcast_to(num::reshape(model.cls_token, {1, 1, d}), {B, 1, d});
    auto x = num::concat(std::vector<Tensor<T>>{cls, tokens}, 1);  // [B x T x D]
    x = num::add(x, model.pos_embed);

    for (const auto& blk : model.blocks) x = block_forward(blk, x, cfg.heads);
    x = num::layer_norm(x, model.final_norm.gamma, model.final_norm.beta, static_cast<T>(1e-6));

    ForwardResult<T> out;
    out.cls = num::reshape(num::slice(x, 1, 0, 1), {B, d});
    out.patch_mean = num::mean_axis(num::slice(x, 1, 1, n), 1);
    if (model.head) {
        Tensor<T> emb;
        switch (model.head->strategy) {
            case EmbeddingStrategy::Cls: emb = out.cls; break;
            case EmbeddingStrategy::PatchMean: emb = out.patch_mean; break;
            case EmbeddingStrategy::Concat:
                emb = num::concat(std::vector<Tensor<T>>{out.cls, out.patch_mean}, 1);
                break;
        }
        out.logits = linear2d(emb, model.head->linear);
    }
    return out;
}

template <class T>
Tensor<T> extract_embedding(const ViTModel<T>& model, const num::Tensor<T>& batch,
                            EmbeddingStrategy strategy) {
    auto res = forward(model, batch);
    switch (strategy) {
        case EmbeddingStrategy::Cls: return res.cls;
        case EmbeddingStrategy::PatchMean: return res.patch_mean;
        case EmbeddingStrategy::Concat:
            return num::concat(std::vector<Tensor<T>>{res.cls, res.patch_mean}, 1);
    }
    return res.cls;
}

template <class T>
void attach_head(ViTModel<T>& model, int num_classes, EmbeddingStrategy strategy,
                 std::uint64_t seed) {
    if (num_classes < 2) throw ConfigError("classifier head needs at least 2 classes");
    RandomStream rng(derive_seed(seed, "vit.head"));
    const std::int64_t width =
        strategy == EmbeddingStrategy::Concat ? 2 * model.cfg.dim : model.cfg.dim;
    ClassifierHead<T> head;
    head.linear = init_linear<T>(width, num_classes, rng);
    head.strategy = strategy;
    head.num_classes = num_classes;
    model.head = std::move(head);
}

std::int64_t params_per_block(const ViTConfig& cfg) {
    const std::int64_t d = cfg.dim, r = cfg.mlp_ratio;
    return 2 * (2 * d)                 // ln1, ln2
           + d * 3 * d + 3 * d         // qkv
           + d * d + d                 // proj
           + d * r * d + r * d         // fc1
           + r * d * d + d;            // fc2
}

template <class T>
std::vector<NamedParam<T>> named_params(const ViTModel<T>& model) {
    std::vector<NamedParam<T>> out;
    collect_linear(out, "patch_embed", model.patch_embed);
    out.push_back({"cls_token", model.cls_token});
    out.push_back({"pos_embed", model.pos_embed});
    for (std::size_t i = 0; i < model.blocks.size(); ++i) {
        const auto& b = model.blocks[i];
        const std::string p = "block." + std::to_string(i);
        collect_ln(out, p + ".ln1", b.ln1);
        collect_linear(out, p + ".qkv", b.qkv);
        collect_linear(out, p + ".proj", b.proj);
        collect_ln(out, p + ".ln2", b.ln2);
        collect_linear(out, p + ".fc1", b.fc1);
        collect_linear(out, p + ".fc2", b.fc2);
    }
    collect_ln(out, "final_norm", model.final_norm);
    if (model.head) collect_linear(out, "head", model.head->linear);
    return out;
}

template <class T>
std::int64_t count_params(const ViTModel<T>& model, bool trainable_only) {
    std::int64_t total = 0;
    for (const auto& p : named_params(model))
        if (!trainable_only || p.tensor.requires_grad()) total += p.tensor.numel();
    return total;
}

template <class T>
ViTModel<T> clone_model(const ViTModel<T>& model) {
    ViTModel<T> m;
    m.cfg = model.cfg;
    m.patch_embed = {model.patch_embed.weight.copy(), model.patch_embed.bias.copy()};
    m.cls_token = model.cls_token.copy();
    m.pos_embed = model.pos_embed.copy();
    m.blocks.reserve(model.blocks.size());
    for (const auto& b : model.blocks) {
        TransformerBlock<T> nb;
        nb.ln1 = {b.ln1.gamma.copy(), b.ln1.beta.copy()};
        nb.qkv = {b.qkv.weight.copy(), b.qkv.bias.copy()};
        nb.proj = {b.proj.weight.copy(), b.proj.bias.copy()};
        nb.ln2 = {b.ln2.gamma.copy(), b.ln2.beta.copy()};
        nb.fc1 = {b.fc1.weight.copy(), b.fc1.bias.copy()};
        nb.fc2 = {b.fc2.weight.copy(), b.fc2.bias.copy()};
        nb.origin = b.origin;
        nb.trainable = b.trainable;
        m.blocks.push_back(std::move(nb));
    }
    m.final_norm = {model.final_norm.gamma.copy(), model.final_norm.beta.copy()};
    m.embeddings_trainable = model.embeddings_trainable;
    if (model.head) {
        ClassifierHead<T> h;
        h.linear = {model.head->linear.weight.copy(), model.head->linear.bias.copy()};
        h.strategy = model.head->strategy;
        h.num_classes = model.head->num_classes;
        m.head = std::move(h);
    }
    return m;
}

template <class T>
void set_block_trainable(TransformerBlock<T>& block, bool trainable) {
    block.trainable = trainable;
    block.ln1.gamma.set_requires_grad(trainable);
    block.ln1.beta.set_requires_grad(trainable);
    block.qkv.weight.set_requires_grad(trainable);
    block.qkv.bias.set_requires_grad(trainable);
    block.proj.weight.set_requires_grad(trainable);
    block.proj.bias.set_requires_grad(trainable);
    block.ln2.gamma.set_requires_grad(trainable);
    block.ln2.beta.set_requires_grad(trainable);
    block.fc1.weight.set_requires_grad(trainable);
    block.fc1.bias.set_requires_grad(trainable);
    block.fc2.weight.set_requires_grad(trainable);
    block.fc2.bias.set_requires_grad(trainable);
}

template <class T>
void set_embeddings_trainable(ViTModel<T>& model, bool trainable) {
    model.embeddings_trainable = trainable;
    model.patch_embed.weight.set_requires_grad(trainable);
    model.patch_embed.bias.set_requires_grad(trainable);
    model.cls_token.set_requires_grad(trainable);
    model.pos_embed.set_requires_grad(trainable);
    model.final_norm.gamma.set_requires_grad(trainable);
    model.final_norm.beta.set_requires_grad(trainable);
}

#define BEVIT_VIT_INSTANTIATE(T)                                                                \
    template ViTModel<T> init_model<T>(const ViTConfig&, std::uint64_t);                        \
    template Tensor<T> patchify(const Tensor<T>&, int);                                         \
    template Tensor<T> unpatchify(const Tensor<T>&, int, int, int);                             \
    template ForwardResult<T> forward(const ViTModel<T>&, const Tensor<T>&);                    \
    template Tensor<T> extract_embedding(const ViTModel<T>&, const Tensor<T>&,                  \
                                         EmbeddingStrategy);                                    \
    template void attach_head(ViTModel<T>&, int, EmbeddingStrategy, std::uint64_t);             \
    template std::vector<NamedParam<T>> named_params(const ViTModel<T>&);                       \
    template std::int64_t count_params(const ViTModel<T>&, bool);                               \
    template ViTModel<T> clone_model(const ViTModel<T>&);                                       \
    template void set_block_trainable(TransformerBlock<T>&, bool);                              \
    template void set_embeddings_trainable(ViTModel<T>&, bool);

BEVIT_VIT_INSTANTIATE(float)
BEVIT_VIT_INSTANTIATE(double)

#undef BEVIT_VIT_INSTANTIATE

}  // namespace bevit::vit
