#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "sdir/common.hpp"

namespace sdir::io {

static_assert(std::endian::native == std::endian::little,
              "binary formats are little-endian and written with host byte order");

class BinaryWriter {
 public:
  explicit BinaryWriter(const std::filesystem::path& path);

  void bytes(const void* data, std::size_t size);
  void u32(std::uint32_t v) { bytes(&v, sizeof v); }
  void u64(std::uint64_t v) { bytes(&v, sizeof v); }
  void f64(double v) { bytes(&v, sizeof v); }
  void string(std::string_view s);
  void pad_to(std::size_t alignment);
  std::size_t offset() const { return offset_; }
  void close();

 private:
  std::filesystem::path path_;
  std::ofstream out_;
  std::size_t offset_ = 0;
};

class BinaryReader {
 public:
  explicit BinaryReader(const std::filesystem::path& path);

  void bytes(void* data, std::size_t size);
  std::uint32_t u32();
  std::uint64_t u64();
  double f64();
  std::string string(std::size_t max_len = 1 << 20);
  void skip_to(std::size_t alignment);
  void expect_magic(std::string_view magic);

 private:
  std::filesystem::path path_;
  std::ifstream in_;
  std::size_t offset_ = 0;
};

struct NamedTensor {
  std::string name;
  std::vector<std::uint64_t> shape;
  std::vector<float> data;

  std::size_t rows() const { return shape.empty() ? 1 : shape[0]; }
  std::size_t cols() const { return shape.size() < 2 ? 1 : shape[1]; }
};

// Tensor record: u32 name length, name bytes, u32 rank, u64 dims, f32 row-major data.
void write_tensor(BinaryWriter& w, std::string_view name, std::span<const std::uint64_t> shape,
                  std::span<const double> values);
NamedTensor read_tensor(BinaryReader& r);

// Generic container shared by SAE and Gaussian checkpoints:
// magic[8], u32 attribute count, (key, value) strings, u32 tensor count, tensors.
struct TensorFile {
  std::string magic;
  std::map<std::string, std::string> attributes;
  std::vector<NamedTensor> tensors;

  const NamedTensor& tensor(std::string_view name) const;
  const std::string& attribute(std::string_view key) const;
};

void write_tensor_file(const std::filesystem::path& path, const TensorFile& file);
TensorFile read_tensor_file(const std::filesystem::path& path, std::string_view expected_magic);

// Conversions used by every checkpoint reader.
Mat to_mat(const NamedTensor& t);
Vec to_vec(const NamedTensor& t);
NamedTensor from_mat(std::string name, const Mat& m);
NamedTensor from_vec(std::string name, const Vec& v);

}  // namespace sdir::io
