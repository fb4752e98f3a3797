#include "yearspan/safetensors.hpp"

#include <json.hpp>

#include <bit>
#include <cstring>
#include <fstream>

namespace yearspan::safetensors {

namespace {

std::uint64_t read_u64_le(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

float half_to_float(std::uint16_t h) {
  const std::uint32_t sign = static_cast<std::uint32_t>(h & 0x8000u) << 16;
  std::uint32_t exp = (h >> 10) & 0x1Fu;
  std::uint32_t mant = h & 0x3FFu;
  std::uint32_t bits;
  if (exp == 0) {
    if (mant == 0) {
      bits = sign;
    } else {
      exp = 127 - 15 + 1;
      while ((mant & 0x400u) == 0) {
        mant <<= 1;
        --exp;
      }
      mant &= 0x3FFu;
      bits = sign | (exp << 23) | (mant << 13);
    }
  } else if (exp == 0x1F) {
    bits = sign | 0x7F800000u | (mant << 13);
  } else {
    bits = sign | ((exp + 127 - 15) << 23) | (mant << 13);
  }
  return std::bit_cast<float>(bits);
}

std::size_t dtype_size(const std::string& dtype) {
  if (dtype == "F32" || dtype == "I32") return 4;
  if (dtype == "F16" || dtype == "BF16") return 2;
  if (dtype == "I64" || dtype == "F64") return 8;
  if (dtype == "U8" || dtype == "I8" || dtype == "BOOL") return 1;
  throw FormatError("unsupported dtype " + dtype);
}

}  // namespace

Archive::Archive(std::filesystem::path path) : path_(std::move(path)) {
  std::ifstream in(path_, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint " + path_.string());
  const auto file_size = std::filesystem::file_size(path_);
  unsigned char len_bytes[8];
  if (!in.read(reinterpret_cast<char*>(len_bytes), 8)) throw FormatError("truncated header in " + path_.string());
  const std::uint64_t header_len = read_u64_le(len_bytes);
  if (header_len > file_size - 8) throw FormatError("header length exceeds file size in " + path_.string());
  std::string header(header_len, '\0');
  if (!in.read(header.data(), static_cast<std::streamsize>(header_len))) {
    throw FormatError("truncated header in " + path_.string());
  }
  data_start_ = 8 + header_len;
  data_size_ = file_size - data_start_;

  nlohmann::json j;
  try {
    j = nlohmann::json::parse(header);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("malformed header in " + path_.string() + ": " + e.what());
  }
  for (const auto& [name, value] : j.items()) {
    if (name == "__metadata__") {
      for (const auto& [k, v] : value.items()) metadata_[k] = v.is_string() ? v.get<std::string>() : v.dump();
      continue;
    }
    TensorInfo info;
    info.dtype = value.at("dtype").get<std::string>();
    info.shape = value.at("shape").get<Shape>();
    const auto offsets = value.at("data_offsets").get<std::vector<std::uint64_t>>();
    if (offsets.size() != 2 || offsets[0] > offsets[1]) throw FormatError("bad data_offsets for " + name);
    info.begin = offsets[0];
    info.end = offsets[1];
    if (info.end - info.begin != element_count(info.shape) * dtype_size(info.dtype)) {
      throw FormatError("tensor " + name + " byte length does not match its shape");
    }
    if (info.end > data_size_) throw FormatError("tensor " + name + " runs past end of file " + path_.string());
    entries_.emplace(name, std::move(info));
  }
}

std::vector<char> Archive::read_bytes(const TensorInfo& info) const {
  if (info.end > data_size_) throw FormatError("tensor data runs past end of file " + path_.string());
  std::ifstream in(path_, std::ios::binary);
  in.seekg(static_cast<std::streamoff>(data_start_ + info.begin));
  std::vector<char> bytes(info.end - info.begin);
  if (!in.read(bytes.data(), static_cast<std::streamsize>(bytes.size()))) {
    throw FormatError("short read from " + path_.string());
  }
  return bytes;
}

Tensor Archive::read_float(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw FormatError("missing tensor " + name + " in " + path_.string());
  const auto& info = it->second;
  const auto bytes = read_bytes(info);
  const std::size_t n = element_count(info.shape);
  std::vector<float> out(n);
  if (info.dtype == "F32") {
    std::memcpy(out.data(), bytes.data(), n * 4);
  } else if (info.dtype == "F16" || info.dtype == "BF16") {
    for (std::size_t i = 0; i < n; ++i) {
      std::uint16_t h;
      std::memcpy(&h, bytes.data() + 2 * i, 2);
      out[i] = info.dtype == "F16" ? half_to_float(h) : std::bit_cast<float>(static_cast<std::uint32_t>(h) << 16);
    }
  } else {
    throw FormatError("tensor " + name + " has non-float dtype " + info.dtype);
  }
  Tensor t(info.shape.empty() ? Shape{1} : info.shape, std::move(out));
  t.require_finite(("load " + name).c_str());
  return t;
}

std::vector<std::int64_t> Archive::read_int(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw FormatError("missing tensor " + name + " in " + path_.string());
  const auto& info = it->second;
  const auto bytes = read_bytes(info);
  const std::size_t n = element_count(info.shape);
  std::vector<std::int64_t> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (info.dtype == "I64") {
      std::memcpy(&out[i], bytes.data() + 8 * i, 8);
    } else if (info.dtype == "I32") {
      std::int32_t v;
      std::memcpy(&v, bytes.data() + 4 * i, 4);
      out[i] = v;
    } else {
      throw FormatError("tensor " + name + " has non-integer dtype " + info.dtype);
    }
  }
  return out;
}

void write(const std::filesystem::path& path, const std::map<std::string, Tensor>& tensors,
           const std::map<std::string, IntTensor>& int_tensors, const std::map<std::string, std::string>& metadata) {
  nlohmann::ordered_json header;
  if (!metadata.empty()) header["__metadata__"] = metadata;
  std::uint64_t offset = 0;
  for (const auto& [name, t] : tensors) {
    header[name] = {{"dtype", "F32"}, {"shape", t.shape()}, {"data_offsets", {offset, offset + t.size() * 4}}};
    offset += t.size() * 4;
  }
  for (const auto& [name, t] : int_tensors) {
    header[name] = {{"dtype", "I64"}, {"shape", t.shape}, {"data_offsets", {offset, offset + t.values.size() * 8}}};
    offset += t.values.size() * 8;
  }
  std::string text = header.dump();
  while ((text.size() + 8) % 8 != 0) text.push_back(' ');

  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path.string());
  std::uint64_t len = text.size();
  unsigned char len_bytes[8];
  for (int i = 0; i < 8; ++i) len_bytes[i] = static_cast<unsigned char>((len >> (8 * i)) & 0xFF);
  out.write(reinterpret_cast<const char*>(len_bytes), 8);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [name, t] : tensors) {
    out.write(reinterpret_cast<const char*>(t.raw()), static_cast<std::streamsize>(t.size() * 4));
  }
  for (const auto& [name, t] : int_tensors) {
    out.write(reinterpret_cast<const char*>(t.values.data()), static_cast<std::streamsize>(t.values.size() * 8));
  }
  if (!out) throw FormatError("short write to " + path.string());
}

}  // namespace yearspan::safetensors
