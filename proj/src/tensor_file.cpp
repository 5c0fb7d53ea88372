#include "sdir/tensor_file.hpp"

#include <algorithm>

namespace sdir::io {

BinaryWriter::BinaryWriter(const std::filesystem::path& path)
    : path_(path), out_(path, std::ios::binary | std::ios::trunc) {
  if (!out_) throw std::runtime_error("cannot open for writing: " + path.string());
}

void BinaryWriter::bytes(const void* data, std::size_t size) {
  out_.write(static_cast<const char*>(data), static_cast<std::streamsize>(size));
  if (!out_) throw std::runtime_error("write failed: " + path_.string());
  offset_ += size;
}

void BinaryWriter::string(std::string_view s) {
  u32(static_cast<std::uint32_t>(s.size()));
  bytes(s.data(), s.size());
}

void BinaryWriter::pad_to(std::size_t alignment) {
  static constexpr char zeros[64] = {};
  while (offset_ % alignment != 0) {
    bytes(zeros, std::min(alignment - offset_ % alignment, sizeof zeros));
  }
}

void BinaryWriter::close() {
  out_.flush();
  if (!out_) throw std::runtime_error("flush failed: " + path_.string());
  out_.close();
}

BinaryReader::BinaryReader(const std::filesystem::path& path)
    : path_(path), in_(path, std::ios::binary) {
  if (!in_) throw InputError("cannot open: " + path.string());
}

void BinaryReader::bytes(void* data, std::size_t size) {
  in_.read(static_cast<char*>(data), static_cast<std::streamsize>(size));
  if (!in_) throw InputError("truncated file: " + path_.string());
  offset_ += size;
}

std::uint32_t BinaryReader::u32() {
  std::uint32_t v;
  bytes(&v, sizeof v);
  return v;
}

std::uint64_t BinaryReader::u64() {
  std::uint64_t v;
  bytes(&v, sizeof v);
  return v;
}

double BinaryReader::f64() {
  double v;
  bytes(&v, sizeof v);
  return v;
}

std::string BinaryReader::string(std::size_t max_len) {
  const std::uint32_t n = u32();
  if (n > max_len) throw InputError("corrupt string length in " + path_.string());
  std::string s(n, '\0');
  bytes(s.data(), n);
  return s;
}

void BinaryReader::skip_to(std::size_t alignment) {
  char c;
  while (offset_ % alignment != 0) bytes(&c, 1);
}

void BinaryReader::expect_magic(std::string_view magic) {
  std::string got(magic.size(), '\0');
  bytes(got.data(), got.size());
  if (got != magic) {
    throw InputError(path_.string() + ": bad magic (expected " + std::string(magic) + ")");
  }
}

void write_tensor(BinaryWriter& w, std::string_view name, std::span<const std::uint64_t> shape,
                  std::span<const double> values) {
  std::uint64_t count = 1;
  for (auto d : shape) count *= d;
  if (count != values.size()) throw std::logic_error("tensor shape/data mismatch: " + std::string(name));
  w.string(name);
  w.u32(static_cast<std::uint32_t>(shape.size()));
  for (auto d : shape) w.u64(d);
  std::vector<float> buf(values.begin(), values.end());
  w.bytes(buf.data(), buf.size() * sizeof(float));
}

NamedTensor read_tensor(BinaryReader& r) {
  NamedTensor t;
  t.name = r.string(4096);
  const std::uint32_t rank = r.u32();
  if (rank > 4) throw InputError("corrupt tensor rank for " + t.name);
  std::uint64_t count = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    t.shape.push_back(r.u64());
    count *= t.shape.back();
  }
  if (count > (1ULL << 32)) throw InputError("tensor too large: " + t.name);
  t.data.resize(count);
  r.bytes(t.data.data(), count * sizeof(float));
  return t;
}

const NamedTensor& TensorFile::tensor(std::string_view name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return t;
  }
  throw InputError("missing tensor: " + std::string(name));
}

const std::string& TensorFile::attribute(std::string_view key) const {
  auto it = attributes.find(std::string(key));
  if (it == attributes.end()) throw InputError("missing attribute: " + std::string(key));
  return it->second;
}

void write_tensor_file(const std::filesystem::path& path, const TensorFile& file) {
  if (file.magic.size() != 8) throw std::logic_error("magic must be 8 bytes");
  BinaryWriter w(path);
  w.bytes(file.magic.data(), 8);
  w.u32(static_cast<std::uint32_t>(file.attributes.size()));
  for (const auto& [k, v] : file.attributes) {
    w.string(k);
    w.string(v);
  }
  w.u32(static_cast<std::uint32_t>(file.tensors.size()));
  for (const auto& t : file.tensors) {
    std::vector<double> values(t.data.begin(), t.data.end());
    write_tensor(w, t.name, t.shape, values);
  }
  w.close();
}

TensorFile read_tensor_file(const std::filesystem::path& path, std::string_view expected_magic) {
  BinaryReader r(path);
  r.expect_magic(expected_magic);
  TensorFile file;
  file.magic = std::string(expected_magic);
  const std::uint32_t n_attr = r.u32();
  for (std::uint32_t i = 0; i < n_attr; ++i) {
    std::string k = r.string();
    file.attributes[k] = r.string();
  }
  const std::uint32_t n_tensors = r.u32();
  for (std::uint32_t i = 0; i < n_tensors; ++i) file.tensors.push_back(read_tensor(r));
  return file;
}

Mat to_mat(const NamedTensor& t) {
  Mat m(static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
  std::copy(t.data.begin(), t.data.end(), m.data());
  return m;
}

Vec to_vec(const NamedTensor& t) {
  Vec v(static_cast<Eigen::Index>(t.data.size()));
  std::copy(t.data.begin(), t.data.end(), v.data());
  return v;
}

NamedTensor from_mat(std::string name, const Mat& m) {
  NamedTensor t{std::move(name),
                {static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())},
                std::vector<float>(m.data(), m.data() + m.size())};
  return t;
}

NamedTensor from_vec(std::string name, const Vec& v) {
  NamedTensor t{std::move(name), {static_cast<std::uint64_t>(v.size())},
                std::vector<float>(v.data(), v.data() + v.size())};
  return t;
}

}  // namespace sdir::io
