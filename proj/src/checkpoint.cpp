#include "motok/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace motok::ckpt {

static_assert(std::endian::native == std::endian::little, "little-endian host expected");

namespace {
constexpr char kMagic[8] = {'M', 'O', 'T', 'K', 'C', 'K', 'P', 'T'};
}

void ByteWriter::raw(const void* p, std::size_t n) {
  buf_.append(static_cast<const char*>(p), n);
}

void ByteWriter::str(std::string_view s) {
  u32(static_cast<std::uint32_t>(s.size()));
  raw(s.data(), s.size());
}

void ByteWriter::tensor(const Tensor& t) {
  u32(static_cast<std::uint32_t>(t.rank()));
  for (auto e : t.shape()) u64(e);
  raw(t.data(), t.size() * sizeof(double));
}

void ByteReader::raw(void* p, std::size_t n) {
  if (n > data_.size() - pos_) throw CheckpointError(what_ + ": unexpected end of data");
  std::memcpy(p, data_.data() + pos_, n);
  pos_ += n;
}

std::uint32_t ByteReader::u32() {
  std::uint32_t v;
  raw(&v, sizeof v);
  return v;
}

std::uint64_t ByteReader::u64() {
  std::uint64_t v;
  raw(&v, sizeof v);
  return v;
}

double ByteReader::f64() {
  double v;
  raw(&v, sizeof v);
  return v;
}

std::string ByteReader::str() {
  const std::uint32_t n = u32();
  if (n > data_.size() - pos_) throw CheckpointError(what_ + ": string runs past the end");
  std::string s(data_.substr(pos_, n));
  pos_ += n;
  return s;
}

Tensor ByteReader::tensor() {
  const std::uint32_t rank = u32();
  if (rank > 8) throw CheckpointError(what_ + ": implausible tensor rank");
  std::vector<std::size_t> shape(rank);
  std::size_t count = 1;
  for (auto& e : shape) {
    e = u64();
    if (e != 0 && count > (data_.size() / sizeof(double)) / e)
      throw CheckpointError(what_ + ": tensor larger than its section");
    count *= e;
  }
  std::vector<double> data(count);
  raw(data.data(), count * sizeof(double));
  return Tensor(std::move(shape), std::move(data));
}

void Checkpoint::put(const std::string& name, std::string payload) {
  for (auto& [n, p] : sections_)
    if (n == name) {
      p = std::move(payload);
      return;
    }
  sections_.emplace_back(name, std::move(payload));
}

bool Checkpoint::has(std::string_view name) const {
  for (const auto& [n, p] : sections_)
    if (n == name) return true;
  return false;
}

const std::string& Checkpoint::get(std::string_view name) const {
  for (const auto& [n, p] : sections_)
    if (n == name) return p;
  throw CheckpointError("checkpoint has no section '" + std::string(name) + "'");
}

std::string Checkpoint::serialize() const {
  ByteWriter w;
  w.raw(kMagic, sizeof kMagic);
  w.u32(kVersion);
  w.u32(static_cast<std::uint32_t>(sections_.size()));
  for (const auto& [n, p] : sections_) {
    w.str(n);
    w.u64(p.size());
    w.raw(p.data(), p.size());
  }
  return w.take();
}

Checkpoint Checkpoint::deserialize(std::string_view bytes) {
  ByteReader r(bytes, "checkpoint");
  char magic[8];
  r.raw(magic, sizeof magic);
  if (std::memcmp(magic, kMagic, sizeof kMagic) != 0) throw CheckpointError("not a checkpoint file");
  const std::uint32_t version = r.u32();
  if (version != kVersion)
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  Checkpoint c;
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.str();
    const std::uint64_t len = r.u64();
    if (len > bytes.size()) throw CheckpointError("checkpoint section '" + name + "' is truncated");
    std::string payload(len, '\0');
    r.raw(payload.data(), len);
    c.sections_.emplace_back(std::move(name), std::move(payload));
  }
  return c;
}

void Checkpoint::save(const std::filesystem::path& path) const {
  // Write then rename so a crash never leaves a half-written checkpoint.
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw CheckpointError("cannot write " + tmp);
    const std::string bytes = serialize();
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw CheckpointError("failed writing " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return deserialize(ss.str());
}

std::string encode_params(const std::vector<const nk::Param*>& params) {
  ByteWriter w;
  w.u32(static_cast<std::uint32_t>(params.size()));
  for (const auto* p : params) {
    w.str(p->name);
    w.tensor(p->value);
  }
  return w.take();
}

void decode_params_into(std::string_view payload, nk::ParamStore& ps) {
  ByteReader r(payload, "parameter section");
  const std::uint32_t n = r.u32();
  for (std::uint32_t i = 0; i < n; ++i) {
    const std::string name = r.str();
    Tensor t = r.tensor();
    if (!ps.contains(name)) throw CheckpointError("checkpoint parameter '" + name + "' has no slot in the model");
    auto& p = ps.get(name);
    if (p.value.shape() != t.shape())
      throw CheckpointError("checkpoint parameter '" + name + "' has shape " + t.shape_str() +
                            ", model expects " + p.value.shape_str());
    p.value = std::move(t);
  }
  if (!r.done()) throw CheckpointError("trailing bytes in parameter section");
}

std::vector<const nk::Param*> params_with_prefix(const nk::ParamStore& ps, std::string_view prefix) {
  std::vector<const nk::Param*> out;
  for (const auto* p : ps.all())
    if (p->name.starts_with(prefix)) out.push_back(p);
  return out;
}

}  // namespace motok::ckpt
