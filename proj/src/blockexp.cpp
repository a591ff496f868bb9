#include "bevit/blockexp.hpp"

#include <algorithm>

namespace bevit::blockexp {

std::string to_string(FreezePolicy p) {
    switch (p) {
        case FreezePolicy::FrozenBackbone: return "frozen_bb";
        case FreezePolicy::Unfrozen: return "unfrozen";
        case FreezePolicy::BeSsl: return "be_ssl";
    }
    return "unfrozen";
}

FreezePolicy freeze_policy_from(const std::string& s) {
    if (s == "frozen_bb") return FreezePolicy::FrozenBackbone;
    if (s == "unfrozen") return FreezePolicy::Unfrozen;
    if (s == "be_ssl") return FreezePolicy::BeSsl;
    throw ConfigError("unknown freeze policy: " + s);
}

ExpansionPlan insertion_positions(int depth, int k) {
    if (k < 1 || k > depth)
        throw ConfigError("expansion count " + std::to_string(k) + " outside [1, depth=" +
                          std::to_string(depth) + "]");
    ExpansionPlan plan;
    plan.k = k;
    const int base = depth / k;
    const int rem = depth % k;
    int cursor = 0;
    for (int g = 0; g < k; ++g) {
        cursor += base + (g < rem ? 1 : 0);
        plan.source_blocks.push_back(cursor - 1);
    }
    return plan;
}

namespace {

template <class T>
void zero_tensor(num::Tensor<T>& t) {
    auto v = t.values_mut();
    std::fill(v.begin(), v.end(), T(0));
}

template <class T>
vit::TransformerBlock<T> identity_copy(const vit::TransformerBlock<T>& src) {
    vit::TransformerBlock<T> b;
    b.ln1 = {src.ln1.gamma.copy(), src.ln1.beta.copy()};
    b.qkv = {src.qkv.weight.copy(), src.qkv.bias.copy()};
    b.proj = {src.proj.weight.copy(), src.proj.bias.copy()};
    b.ln2 = {src.ln2.gamma.copy(), src.ln2.beta.copy()};
    b.fc1 = {src.fc1.weight.copy(), src.fc1.bias.copy()};
    b.fc2 = {src.fc2.weight.copy(), src.fc2.bias.copy()};
    zero_tensor(b.proj.weight);
    zero_tensor(b.proj.bias);
    zero_tensor(b.fc2.weight);
    zero_tensor(b.fc2.bias);
    b.origin = vit::BlockOrigin::Expanded;
    vit::set_block_trainable(b, true);
    return b;
}

}  // namespace

template <class T>
vit::ViTModel<T> expand_blocks(const vit::ViTModel<T>& model, int k) {
    const auto plan = insertion_positions(model.depth(), k);
    auto out = vit::clone_model(model);
    std::vector<vit::TransformerBlock<T>> blocks;
    blocks.reserve(out.blocks.size() + static_cast<std::size_t>(k));
    std::size_t next_insert = 0;
    for (std::size_t i = 0; i < out.blocks.size(); ++i) {
        blocks.push_back(std::move(out.blocks[i]));
        if (next_insert < plan.source_blocks.size() &&
            static_cast<int>(i) == plan.source_blocks[next_insert]) {
            blocks.push_back(identity_copy<T>(blocks.back()));
            ++next_insert;
        }
    }
    out.blocks = std::move(blocks);
    return out;
}

template <class T>
void apply_freeze_policy(vit::ViTModel<T>& model, FreezePolicy policy) {
    switch (policy) {
        case FreezePolicy::FrozenBackbone:
            for (auto& b : model.blocks) vit::set_block_trainable(b, false);
            vit::set_embeddings_trainable(model, false);
            if (model.head) {
                model.head->linear.weight.set_requires_grad(true);
                model.head->linear.bias.set_requires_grad(true);
            }
            break;
        case FreezePolicy::Unfrozen:
            for (auto& b : model.blocks) vit::set_block_trainable(b, true);
            vit::set_embeddings_trainable(model, true);
            if (model.head) {
                model.head->linear.weight.set_requires_grad(true);
                model.head->linear.bias.set_requires_grad(true);
            }
            break;
        case FreezePolicy::BeSsl: {
            bool any_expanded = false;
            for (auto& b : model.blocks) {
                const bool expanded = b.origin == vit::BlockOrigin::Expanded;
                any_expanded = any_expanded || expanded;
                vit::set_block_trainable(b, expanded);
            }
            if (!any_expanded)
                throw PolicyError("be_ssl freeze policy requires at least one expanded block");
            vit::set_embeddings_trainable(model, false);
            if (model.head) {
                model.head->linear.weight.set_requires_grad(false);
                model.head->linear.bias.set_requires_grad(false);
            }
            break;
        }
    }
}

template vit::ViTModel<float> expand_blocks(const vit::ViTModel<float>&, int);
template vit::ViTModel<double> expand_blocks(const vit::ViTModel<double>&, int);
template void apply_freeze_policy(vit::ViTModel<float>&, FreezePolicy);
template void apply_freeze_policy(vit::ViTModel<double>&, FreezePolicy);

}  // namespace bevit::blockexp
