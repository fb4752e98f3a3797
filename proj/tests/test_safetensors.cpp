#include "yearspan/safetensors.hpp"

#include <gtest/gtest.h>

#include <fstream>

using namespace yearspan;

namespace {

std::filesystem::path temp_file(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "yearspan_tests";
  std::filesystem::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST(Safetensors, RoundTrip) {
  const auto path = temp_file("roundtrip.safetensors");
  const Tensor a = Tensor::matrix({{1, 2, 3}, {4, 5, 6}});
  const Tensor b = Tensor::vector({-1.5f, 0.25f});
  safetensors::write(path, {{"a", a}, {"b", b}}, {{"ids", {{3}, {7, -8, 9}}}}, {{"format", "pt"}});
  const safetensors::Archive archive(path);
  EXPECT_TRUE(archive.contains("a"));
  EXPECT_FALSE(archive.contains("c"));
  EXPECT_EQ(archive.read_float("a"), a);
  EXPECT_EQ(archive.read_float("b"), b);
  EXPECT_EQ(archive.read_int("ids"), (std::vector<std::int64_t>{7, -8, 9}));
  EXPECT_EQ(archive.metadata().at("format"), "pt");
  EXPECT_THROW(archive.read_float("missing"), std::exception);
}

TEST(Safetensors, RejectsCorruptHeaders) {
  const auto path = temp_file("corrupt.safetensors");
  {
    std::ofstream out(path, std::ios::binary);
    const std::uint64_t n = 1000;
    out.write(reinterpret_cast<const char*>(&n), sizeof n);
    out << "{}";
  }
  EXPECT_THROW(safetensors::Archive{path}, safetensors::FormatError);
  {
    std::ofstream out(path, std::ios::binary);
    const std::string header = R"({"x":{"dtype":"F32","shape":[4],"data_offsets":[0,16]}})";
    const std::uint64_t n = header.size();
    out.write(reinterpret_cast<const char*>(&n), sizeof n);
    out << header << "abcd";
  }
  EXPECT_THROW(safetensors::Archive{path}, safetensors::FormatError);
  EXPECT_ANY_THROW(safetensors::Archive{temp_file("does_not_exist.safetensors")});
}
