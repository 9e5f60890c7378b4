#pragma once

#include <filesystem>
#include <string>
#include <string_view>

#include <torch/torch.h>

namespace penet {

/// Lower-case hex SHA-256.
std::string sha256_hex(std::string_view data);
std::string sha256_file(const std::filesystem::path& path);
/// Digest over parameter and buffer names, shapes and raw bytes.
std::string module_digest(const torch::nn::Module& m);

}  // namespace penet
