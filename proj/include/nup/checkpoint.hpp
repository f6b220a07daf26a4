#pragma once

// Flat tensor archive used for checkpoints and exported weights.
//
//   "NUPCKPT\0" | u32 major | u32 minor | u64 header_len | header JSON
//   | raw little-endian tensor bytes | u32 crc32 of everything before it
//
// The header lists {name, dtype, shape, offset, nbytes} per tensor plus a
// free-form "meta" object.

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

namespace nup::seg {
class SegmentationGeneratorImpl;
}

namespace nup::ckpt {

inline constexpr std::uint32_t kFormatMajor = 1;
inline constexpr std::uint32_t kFormatMinor = 0;

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class VersionError : public FormatError {
 public:
  using FormatError::FormatError;
};
class ChecksumError : public FormatError {
 public:
  using FormatError::FormatError;
};
class ScopeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct Archive {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<std::pair<std::string, torch::Tensor>> tensors;

  const torch::Tensor* find(const std::string& name) const;
  std::vector<std::string> names() const;
  void add(const std::string& name, const torch::Tensor& t);  // stores a contiguous CPU copy
};

/// Writes atomically (temp file + rename). `major` is exposed for tests.
void write_archive(const std::filesystem::path& path, const Archive& archive, std::uint32_t major = kFormatMajor);
Archive read_archive(const std::filesystem::path& path);

/// Parameters and buffers of `module` under "<prefix>.<name>".
void add_module(Archive& archive, const std::string& prefix, const torch::nn::Module& module);
/// Copies "<prefix>.<name>" entries into the module; every parameter and
/// buffer must be present with a matching shape.
void load_module(const Archive& archive, const std::string& prefix, torch::nn::Module& module);

bool bitwise_equal(const torch::Tensor& a, const torch::Tensor& b);

// -- export -------------------------------------------------------------------

enum class Scope { Encoder, Fpn, All };

Scope parse_scope(const std::string& s);  // encoder | fpn | all (| all_available)
std::string scope_name(Scope s);
/// Submodule names of S covered by the scope, in inclusion order.
std::vector<std::string> scope_groups(Scope s);

/// Projects the "S.<group>.*" tensors of a checkpoint onto the scope, keeping
/// names relative to S ("backbone.stem..."). Throws ScopeError when a group is absent.
Archive export_scope(const Archive& checkpoint, Scope scope);
void export_weights(const std::filesystem::path& checkpoint, Scope scope, const std::filesystem::path& out);

/// Loads an export into `model`; throws ScopeError unless the export's scope
/// covers `required`. Only the groups of `required` are written; returns their names.
std::vector<std::string> load_export(const Archive& exported, seg::SegmentationGeneratorImpl& model, Scope required);

}  // namespace nup::ckpt
