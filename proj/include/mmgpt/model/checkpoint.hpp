#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "mmgpt/model/model.hpp"

namespace mmgpt::model {

enum class CheckpointKind { Full, Lora };

struct CheckpointEntry {
  std::string name;
  nn::Shape shape;
  bool trainable = false;
  std::vector<float> values;
};

struct Checkpoint {
  ModelConfig config;
  CheckpointKind kind = CheckpointKind::Full;
  std::vector<CheckpointEntry> entries;
};

// Layout (little-endian):
//   "MMGPTCKP" u32 version  u64 header_len  header (canonical JSON: config, kind)
//   u64 entry_count, then per entry:
//   u32 name_len name  u8 trainable  u32 ndim  u64 dims[ndim]  f32 values[]
std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes, const std::string& origin = "<memory>");
/// Written through a temporary file and renamed, so a previous file at the
/// same path survives a failed write.
void write_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint read_checkpoint(const std::filesystem::path& path);

/// Lora keeps only adapter matrices and gates.
template <typename T>
Checkpoint make_checkpoint(const Model<T>& model, CheckpointKind kind);

template <typename T>
void save_checkpoint(const Model<T>& model, const std::filesystem::path& path,
                     CheckpointKind kind = CheckpointKind::Full);

/// Rebuilds a model from a full checkpoint, re-attaching adapters when the
/// checkpoint carries them.
template <typename T>
std::unique_ptr<Model<T>> load_model(const std::filesystem::path& path);
template <typename T>
std::unique_ptr<Model<T>> model_from_checkpoint(const Checkpoint& ckpt);

/// Attaches adapters from a LoRA checkpoint onto a base model by name.
template <typename T>
void attach_lora(Model<T>& model, const std::filesystem::path& lora_path);
template <typename T>
void attach_lora(Model<T>& model, const Checkpoint& lora);

}  // namespace mmgpt::model
