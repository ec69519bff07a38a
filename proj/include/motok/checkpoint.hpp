#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "motok/tape.hpp"

namespace motok::ckpt {

struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Little-endian byte sink.
class ByteWriter {
 public:
  void u32(std::uint32_t v) { raw(&v, sizeof v); }
  void u64(std::uint64_t v) { raw(&v, sizeof v); }
  void f64(double v) { raw(&v, sizeof v); }
  void str(std::string_view s);
  void tensor(const Tensor& t);
  void raw(const void* p, std::size_t n);
  const std::string& bytes() const { return buf_; }
  std::string take() { return std::move(buf_); }

 private:
  std::string buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string_view data, std::string what = "section")
      : data_(data), what_(std::move(what)) {}
  std::uint32_t u32();
  std::uint64_t u64();
  double f64();
  std::string str();
  Tensor tensor();
  void raw(void* p, std::size_t n);
  bool done() const { return pos_ == data_.size(); }

 private:
  std::string_view data_;
  std::string what_;
  std::size_t pos_ = 0;
};

// Ordered named sections. File layout: magic "MOTKCKPT", u32 version,
// u32 section count, then per section: name (u32 length + bytes), u64 payload
// length, payload.
class Checkpoint {
 public:
  static constexpr std::uint32_t kVersion = 1;

  void put(const std::string& name, std::string payload);
  bool has(std::string_view name) const;
  const std::string& get(std::string_view name) const;
  const std::vector<std::pair<std::string, std::string>>& sections() const { return sections_; }

  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);
  std::string serialize() const;
  static Checkpoint deserialize(std::string_view bytes);

 private:
  std::vector<std::pair<std::string, std::string>> sections_;
};

// Named tensors in store order.
std::string encode_params(const std::vector<const nk::Param*>& params);
// Loads every tensor of the section into the store, matching by name; shapes
// must agree and every listed name must exist.
void decode_params_into(std::string_view payload, nk::ParamStore& ps);

std::vector<const nk::Param*> params_with_prefix(const nk::ParamStore& ps, std::string_view prefix);

}  // namespace motok::ckpt
