#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace exgn {

/// On-disk tensor container shared by datasets and checkpoints.
///
/// Layout (all integers little-endian):
///   "EXGN" | version u32 | entry count u32
///   per entry: name length u16 | UTF-8 name | dtype u8 (0 = f32, 1 = u8)
///              | rank u8 | dims u64 x rank | raw payload
class Container {
 public:
  static constexpr uint32_t kVersion = 1;

  enum class DType : uint8_t { f32 = 0, u8 = 1 };

  struct Entry {
    std::string name;
    DType dtype = DType::f32;
    std::vector<uint64_t> dims;
    std::vector<float> f32;
    std::vector<uint8_t> u8;

    uint64_t numel() const;
  };

  void put_f32(const std::string& name, std::vector<uint64_t> dims, std::span<const float> values);
  void put_u8(const std::string& name, std::vector<uint64_t> dims, std::span<const uint8_t> values);

  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  /// Throws FormatError naming the entry when it is absent.
  const Entry& get(const std::string& name) const;
  const Entry& get_f32(const std::string& name) const;
  const Entry& get_u8(const std::string& name) const;
  const std::vector<Entry>& entries() const { return entries_; }
  size_t size() const { return entries_.size(); }

  std::vector<uint8_t> serialize() const;
  static Container deserialize(std::span<const uint8_t> bytes);

  void save(const std::filesystem::path& path) const;
  static Container load(const std::filesystem::path& path);

 private:
  Entry& insert(const std::string& name, DType dtype, std::vector<uint64_t> dims);

  std::vector<Entry> entries_;
  std::map<std::string, size_t> index_;
};

}  // namespace exgn
