#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "posediff/denoiser.hpp"

namespace posediff {

/// Binary layout, little-endian:
///   "PGDM" | u32 version | u32 n + n bytes JSON header | u32 tensor count |
///   per tensor: u32 n + name | u8 dtype (0 f32, 1 f64) | u32 rank | u64 dims | raw data
/// Adam moments are stored as "adam.m/<param>" and "adam.v/<param>".
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointHeader {
  DenoiserConfig model;
  std::size_t diffusion_steps = 1000;
  bool variance_preserving = false;
  AdamHyper adam;
  std::int64_t step = 0;
  std::string rng_state;
  nlohmann::json extra = nlohmann::json::object();
};

template <typename S>
struct Checkpoint {
  CheckpointHeader header;
  std::vector<std::pair<std::string, Tensor<S>>> tensors;
};

/// Writes parameters and, when `optimizer` is given, its moments and step count.
template <typename S>
void save_checkpoint(const std::filesystem::path& path, const Denoiser<S>& model, const Adam<S>* optimizer,
                     CheckpointHeader header);

/// Throws IoFailure when unreadable, FormatError when malformed.
template <typename S>
Checkpoint<S> read_checkpoint(const std::filesystem::path& path);

/// Builds the stored model and loads its parameters.
template <typename S>
Denoiser<S> load_model(const Checkpoint<S>& ckpt);

/// Restores Adam moments and step counter; throws FormatError when missing.
template <typename S>
void load_optimizer(const Checkpoint<S>& ckpt, const Denoiser<S>& model, Adam<S>& optimizer);

}  // namespace posediff
