#pragma once

#include <cstdint>
#include <string>

#include "bevit/config.hpp"

namespace bevit::cli {

enum class Precision { F32, F64 };
Precision precision_from(const std::string& s);

struct RunContext {
    std::string out_dir;
    std::uint64_t seed = 0;
    Precision precision = Precision::F32;
};

// Each command resolves its defaults into a copy of the config, writes
// config_resolved.txt into the output directory, runs, and emits its report
// files. Reruns with the same config and seed are byte-identical.
void cmd_pretrain(cfg::KvConfig config, const RunContext& ctx);
void cmd_finetune(cfg::KvConfig config, const RunContext& ctx);
void cmd_msdft(cfg::KvConfig config, const RunContext& ctx);
void cmd_crosseval(cfg::KvConfig config, const RunContext& ctx);
void cmd_fewshot(cfg::KvConfig config, const RunContext& ctx);
void cmd_forgetting(cfg::KvConfig config, const RunContext& ctx);
void cmd_ablate(cfg::KvConfig config, const RunContext& ctx);
void cmd_metrics(cfg::KvConfig config, const RunContext& ctx);
void cmd_synth(cfg::KvConfig config, const RunContext& ctx);

}  // namespace bevit::cli
