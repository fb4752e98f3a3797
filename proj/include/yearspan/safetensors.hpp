#pragma once

#include "yearspan/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace yearspan::safetensors {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TensorInfo {
  std::string dtype;
  Shape shape;
  std::uint64_t begin = 0;
  std::uint64_t end = 0;
};

// Lazily reads tensors from a .safetensors archive.
class Archive {
 public:
  explicit Archive(std::filesystem::path path);

  const std::filesystem::path& path() const { return path_; }
  const std::map<std::string, TensorInfo>& entries() const { return entries_; }
  const std::map<std::string, std::string>& metadata() const { return metadata_; }
  bool contains(const std::string& name) const { return entries_.count(name) != 0; }

  // F32/F16/BF16 are widened to fp32.
  Tensor read_float(const std::string& name) const;
  // I32/I64 integer tensors.
  std::vector<std::int64_t> read_int(const std::string& name) const;

 private:
  std::vector<char> read_bytes(const TensorInfo& info) const;

  std::filesystem::path path_;
  std::uint64_t data_start_ = 0;
  std::uint64_t data_size_ = 0;
  std::map<std::string, TensorInfo> entries_;
  std::map<std::string, std::string> metadata_;
};

struct IntTensor {
  Shape shape;
  std::vector<std::int64_t> values;
};

// Writes F32 tensors (and optional I64 tensors) in name order.
void write(const std::filesystem::path& path, const std::map<std::string, Tensor>& tensors,
           const std::map<std::string, IntTensor>& int_tensors = {},
           const std::map<std::string, std::string>& metadata = {});

}  // namespace yearspan::safetensors
