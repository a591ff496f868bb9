#pragma once

#include <string>
#include <vector>

#include "bevit/vit.hpp"

namespace bevit::blockexp {

enum class FreezePolicy {
    FrozenBackbone,  // only the classifier head trains
    Unfrozen,        // everything trains
    BeSsl,           // only expanded blocks train (plus the SSL head, owned elsewhere)
};

std::string to_string(FreezePolicy p);
FreezePolicy freeze_policy_from(const std::string& s);

struct ExpansionPlan {
    int k = 0;
    // 0-based index of the block each copy duplicates; the copy is inserted
    // immediately after its source.
    std::vector<int> source_blocks;
};

// Partition `depth` blocks into k contiguous groups, as equal as possible with
// the remainder going to the earliest groups; one copy goes after the last
// block of each group.
ExpansionPlan insertion_positions(int depth, int k);

// Value-copy of the source block with the attention output projection and the
// MLP second layer zeroed (weights and biases), so both residual branches
// contribute exactly zero and the network's function is unchanged.
template <class T>
vit::ViTModel<T> expand_blocks(const vit::ViTModel<T>& model, int k);

template <class T>
void apply_freeze_policy(vit::ViTModel<T>& model, FreezePolicy policy);

}  // namespace bevit::blockexp
