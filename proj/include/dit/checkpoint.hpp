#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "dit/optim.hpp"
#include "dit/tensor.hpp"

namespace dit {

/// Missing, unreadable or inconsistent checkpoint.
class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct NamedTensor {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

/// DITC container: "DITC", u32 version (1), u32 count, then per tensor
/// u32 name length, name bytes, u8 dtype (0 = f32), u8 ndim, ndim x u64 dims,
/// little-endian f32 payload. All integers little-endian.
std::vector<unsigned char> encode_checkpoint(const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> decode_checkpoint(const std::vector<unsigned char>& bytes);

/// Writes to a temporary sibling and renames it over `path`.
void write_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> read_checkpoint(const std::filesystem::path& path);

std::vector<NamedTensor> snapshot(const ParamStore& store, const std::string& prefix = "");
/// Copies every tensor named prefix+param.name into the store. Missing names
/// or shape mismatches throw unless allow_missing is set (then they are skipped).
void restore(ParamStore& store, const std::vector<NamedTensor>& tensors, const std::string& prefix = "",
             bool allow_missing = false);

}  // namespace dit
