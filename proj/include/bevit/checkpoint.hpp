#pragma once

#include <string>

#include "bevit/vit.hpp"

namespace bevit::ckpt {

// Binary container: magic + version, a JSON metadata block (config, block
// origin/trainable tags, head), ordered little-endian tensor records, and an
// FNV-1a checksum over everything after the magic. Round-trips bitwise.
inline constexpr char kMagic[8] = {'B', 'E', 'V', 'I', 'T', 'C', 'K', '1'};
inline constexpr std::uint32_t kVersion = 1;

template <class T>
void save_checkpoint(const vit::ViTModel<T>& model, const std::string& path);

template <class T>
vit::ViTModel<T> load_checkpoint(const std::string& path);

}  // namespace bevit::ckpt
