#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "lamatch/geometry.hpp"

namespace lamatch {

// KPDS: "KPDS", u32 version=1, u32 N, u32 D, u32 W, u32 H, N*2 f32 keypoints,
// N*D f32 descriptors. Little-endian throughout.
std::vector<std::uint8_t> encode_kpds(const KeypointSet& set);
KeypointSet decode_kpds(std::span<const std::uint8_t> bytes);

void save_kpds(const std::filesystem::path& path, const KeypointSet& set);
KeypointSet load_kpds(const std::filesystem::path& path);

// Ground truth as CSV lines "i,j".
void save_ground_truth(const std::filesystem::path& path, const GroundTruth& gt);
// Unmatchable sets are rebuilt from the pair list and the two set sizes.
GroundTruth load_ground_truth(const std::filesystem::path& path, std::size_t n_source,
                              std::size_t n_target);

// Nine whitespace-separated ASCII floats, row-major.
void save_homography(const std::filesystem::path& path, const Homography& h);
Homography load_homography(const std::filesystem::path& path);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

// Little-endian byte stream helpers shared by the binary formats.
class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u16(std::uint16_t v);
  void u32(std::uint32_t v);
  void f32(float v);
  void bytes(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }
  std::vector<std::uint8_t> take() { return std::move(buf_); }

 private:
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> data) : data_(data) {}
  std::uint8_t u8();
  std::uint16_t u16();
  std::uint32_t u32();
  float f32();
  std::string bytes(std::size_t n);
  std::size_t remaining() const { return data_.size() - pos_; }

 private:
  void need(std::size_t n) const;
  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
};

}  // namespace lamatch
