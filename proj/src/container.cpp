#include "exgn/container.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "exgn/errors.hpp"

namespace exgn {

static_assert(std::endian::native == std::endian::little,
              "EXGN payloads are written as raw little-endian memory");

namespace {

constexpr char kMagic[4] = {'E', 'X', 'G', 'N'};

template <class T>
void put_raw(std::vector<uint8_t>& out, T value) {
  const auto* p = reinterpret_cast<const uint8_t*>(&value);
  out.insert(out.end(), p, p + sizeof(T));
}

class Reader {
 public:
  explicit Reader(std::span<const uint8_t> bytes) : bytes_(bytes) {}

  template <class T>
  T take() {
    T value;
    std::memcpy(&value, need(sizeof(T)), sizeof(T));
    return value;
  }

  const uint8_t* need(size_t n) {
    if (bytes_.size() - pos_ < n) throw FormatError("EXGN container truncated");
    const uint8_t* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::span<const uint8_t> bytes_;
  size_t pos_ = 0;
};

uint64_t dims_numel(const std::vector<uint64_t>& dims) {
  uint64_t n = 1;
  for (uint64_t d : dims) n *= d;
  return n;
}

}  // namespace

uint64_t Container::Entry::numel() const { return dims_numel(dims); }

Container::Entry& Container::insert(const std::string& name, DType dtype,
                                    std::vector<uint64_t> dims) {
  if (name.empty() || name.size() > 0xFFFF) throw FormatError("invalid entry name length");
  if (dims.size() > 0xFF) throw FormatError("entry rank too large: " + name);
  if (index_.count(name)) throw FormatError("duplicate entry name: " + name);
  index_[name] = entries_.size();
  Entry& e = entries_.emplace_back();
  e.name = name;
  e.dtype = dtype;
  e.dims = std::move(dims);
  return e;
}

void Container::put_f32(const std::string& name, std::vector<uint64_t> dims,
                        std::span<const float> values) {
  if (dims_numel(dims) != values.size()) throw FormatError("entry size mismatch: " + name);
  Entry& e = insert(name, DType::f32, std::move(dims));
  e.f32.assign(values.begin(), values.end());
}

void Container::put_u8(const std::string& name, std::vector<uint64_t> dims,
                       std::span<const uint8_t> values) {
  if (dims_numel(dims) != values.size()) throw FormatError("entry size mismatch: " + name);
  Entry& e = insert(name, DType::u8, std::move(dims));
  e.u8.assign(values.begin(), values.end());
}

const Container::Entry& Container::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw FormatError("missing entry: " + name);
  return entries_[it->second];
}

const Container::Entry& Container::get_f32(const std::string& name) const {
  const Entry& e = get(name);
  if (e.dtype != DType::f32) throw FormatError("entry is not f32: " + name);
  return e;
}

const Container::Entry& Container::get_u8(const std::string& name) const {
  const Entry& e = get(name);
  if (e.dtype != DType::u8) throw FormatError("entry is not u8: " + name);
  return e;
}

std::vector<uint8_t> Container::serialize() const {
  std::vector<uint8_t> out(kMagic, kMagic + 4);
  put_raw<uint32_t>(out, kVersion);
  put_raw<uint32_t>(out, static_cast<uint32_t>(entries_.size()));
  for (const Entry& e : entries_) {
    put_raw<uint16_t>(out, static_cast<uint16_t>(e.name.size()));
    out.insert(out.end(), e.name.begin(), e.name.end());
    put_raw<uint8_t>(out, static_cast<uint8_t>(e.dtype));
    put_raw<uint8_t>(out, static_cast<uint8_t>(e.dims.size()));
    for (uint64_t d : e.dims) put_raw<uint64_t>(out, d);
    if (e.dtype == DType::f32) {
      const auto* p = reinterpret_cast<const uint8_t*>(e.f32.data());
      out.insert(out.end(), p, p + e.f32.size() * sizeof(float));
    } else {
      out.insert(out.end(), e.u8.begin(), e.u8.end());
    }
  }
  return out;
}

Container Container::deserialize(std::span<const uint8_t> bytes) {
  Reader in(bytes);
  if (std::memcmp(in.need(4), kMagic, 4) != 0) throw FormatError("bad magic: not an EXGN file");
  const auto version = in.take<uint32_t>();
  if (version != kVersion) {
    throw FormatError("unsupported EXGN version " + std::to_string(version) + " (expected " +
                      std::to_string(kVersion) + ")");
  }
  const auto count = in.take<uint32_t>();
  Container c;
  for (uint32_t i = 0; i < count; ++i) {
    const auto name_len = in.take<uint16_t>();
    const auto* name_bytes = in.need(name_len);
    std::string name(reinterpret_cast<const char*>(name_bytes), name_len);
    const auto dtype = in.take<uint8_t>();
    const auto rank = in.take<uint8_t>();
    std::vector<uint64_t> dims(rank);
    for (auto& d : dims) d = in.take<uint64_t>();
    const uint64_t n = dims_numel(dims);
    if (dtype == static_cast<uint8_t>(DType::f32)) {
      if (n > bytes.size() / sizeof(float)) throw FormatError("EXGN container truncated");
      const auto* p = in.need(n * sizeof(float));
      std::vector<float> values(n);
      std::memcpy(values.data(), p, n * sizeof(float));
      c.put_f32(name, std::move(dims), values);
    } else if (dtype == static_cast<uint8_t>(DType::u8)) {
      if (n > bytes.size()) throw FormatError("EXGN container truncated");
      const auto* p = in.need(n);
      c.put_u8(name, std::move(dims), std::span<const uint8_t>(p, n));
    } else {
      throw FormatError("unknown dtype code " + std::to_string(dtype) + " in entry " + name);
    }
  }
  if (!in.done()) throw FormatError("trailing bytes after last EXGN entry");
  return c;
}

void Container::save(const std::filesystem::path& path) const {
  const auto bytes = serialize();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open for writing: " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("write failed: " + path.string());
}

Container Container::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open for reading: " + path.string());
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize(bytes);
}

}  // namespace exgn
