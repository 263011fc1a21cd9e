#include "lamatch/formats.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace lamatch {

namespace {
constexpr std::uint32_t kKpdsVersion = 1;
}

void ByteWriter::u16(std::uint16_t v) {
  buf_.push_back(static_cast<std::uint8_t>(v & 0xff));
  buf_.push_back(static_cast<std::uint8_t>(v >> 8));
}

void ByteWriter::u32(std::uint32_t v) {
  for (int s = 0; s < 32; s += 8) buf_.push_back(static_cast<std::uint8_t>((v >> s) & 0xff));
}

void ByteWriter::f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }

void ByteReader::need(std::size_t n) const {
  if (remaining() < n) {
    throw DataError("unexpected end of data at byte " + std::to_string(pos_) + " (need " +
                    std::to_string(n) + ", have " + std::to_string(remaining()) + ")");
  }
}

std::uint8_t ByteReader::u8() {
  need(1);
  return data_[pos_++];
}

std::uint16_t ByteReader::u16() {
  need(2);
  const auto v = static_cast<std::uint16_t>(data_[pos_] | (data_[pos_ + 1] << 8));
  pos_ += 2;
  return v;
}

std::uint32_t ByteReader::u32() {
  need(4);
  std::uint32_t v = 0;
  for (int k = 0; k < 4; ++k) v |= static_cast<std::uint32_t>(data_[pos_ + k]) << (8 * k);
  pos_ += 4;
  return v;
}

float ByteReader::f32() { return std::bit_cast<float>(u32()); }

std::string ByteReader::bytes(std::size_t n) {
  need(n);
  std::string s(reinterpret_cast<const char*>(data_.data() + pos_), n);
  pos_ += n;
  return s;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("write failed for " + path.string());
}

std::vector<std::uint8_t> encode_kpds(const KeypointSet& set) {
  set.validate();
  ByteWriter w;
  w.bytes("KPDS");
  w.u32(kKpdsVersion);
  w.u32(static_cast<std::uint32_t>(set.size()));
  w.u32(static_cast<std::uint32_t>(set.dim()));
  w.u32(set.width);
  w.u32(set.height);
  for (const auto& p : set.keypoints) {
    w.f32(static_cast<float>(p.x()));
    w.f32(static_cast<float>(p.y()));
  }
  for (Eigen::Index i = 0; i < set.descriptors.rows(); ++i) {
    for (Eigen::Index k = 0; k < set.descriptors.cols(); ++k) {
      w.f32(static_cast<float>(set.descriptors(i, k)));
    }
  }
  return w.take();
}

KeypointSet decode_kpds(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  if (r.bytes(4) != "KPDS") throw DataError("bad KPDS magic");
  const std::uint32_t version = r.u32();
  if (version != kKpdsVersion) throw DataError("unsupported KPDS version " + std::to_string(version));
  const std::uint32_t n = r.u32(), d = r.u32();
  KeypointSet set;
  set.width = r.u32();
  set.height = r.u32();
  const std::uint64_t expected = 4ull * n * (2ull + d);
  if (r.remaining() != expected) {
    throw DataError("KPDS payload is " + std::to_string(r.remaining()) + " bytes, expected " +
                    std::to_string(expected));
  }
  set.keypoints.resize(n);
  for (auto& p : set.keypoints) {
    const double x = r.f32();
    const double y = r.f32();
    p = Point2(x, y);
  }
  set.descriptors.resize(n, d);
  for (std::uint32_t i = 0; i < n; ++i) {
    for (std::uint32_t k = 0; k < d; ++k) set.descriptors(i, k) = r.f32();
  }
  set.validate();
  return set;
}

void save_kpds(const std::filesystem::path& path, const KeypointSet& set) {
  write_file(path, encode_kpds(set));
}

KeypointSet load_kpds(const std::filesystem::path& path) {
  try {
    return decode_kpds(read_file(path));
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

void save_ground_truth(const std::filesystem::path& path, const GroundTruth& gt) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  for (const auto& [i, j] : gt.pairs) out << i << ',' << j << '\n';
}

GroundTruth load_ground_truth(const std::filesystem::path& path, std::size_t n_source,
                              std::size_t n_target) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  GroundTruth gt;
  std::vector<bool> used_s(n_source, false), used_t(n_target, false);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ss(line);
    long long i = -1, j = -1;
    char comma = 0;
    if (!(ss >> i >> comma >> j) || comma != ',' || i < 0 || j < 0 ||
        static_cast<std::size_t>(i) >= n_source || static_cast<std::size_t>(j) >= n_target) {
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": bad pair '" + line + "'");
    }
    if (used_s[i] || used_t[j]) {
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": index reused");
    }
    used_s[i] = used_t[j] = true;
    gt.pairs.emplace_back(static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(j));
  }
  std::sort(gt.pairs.begin(), gt.pairs.end());
  for (std::uint32_t i = 0; i < n_source; ++i) {
    if (!used_s[i]) gt.unmatchable_source.push_back(i);
  }
  for (std::uint32_t j = 0; j < n_target; ++j) {
    if (!used_t[j]) gt.unmatchable_target.push_back(j);
  }
  return gt;
}

void save_homography(const std::filesystem::path& path, const Homography& h) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << std::setprecision(17);
  const auto& m = h.matrix();
  for (int r = 0; r < 3; ++r) {
    out << m(r, 0) << ' ' << m(r, 1) << ' ' << m(r, 2) << '\n';
  }
}

Homography load_homography(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  Eigen::Matrix3d m;
  for (int k = 0; k < 9; ++k) {
    if (!(in >> m(k / 3, k % 3))) throw DataError(path.string() + ": expected 9 floats");
  }
  return Homography(m);
}

}  // namespace lamatch
