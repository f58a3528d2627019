#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "stage/denoiser.hpp"
#include "stage/grid.hpp"
#include "stage/schedule.hpp"

namespace stage {

// Grid container: "STGE", u16 version, u32 height, u32 width (all
// little-endian), then height*width IEEE-754 doubles, row-major.
inline constexpr char kGridMagic[4] = {'S', 'T', 'G', 'E'};
inline constexpr std::uint16_t kGridVersion = 1;

// Checkpoint container for the linear denoiser: "STGC", u16 version, u32
// steps, u32 buckets, u32 height, u32 width, then per bucket: gain,
// mask_gain, height*width bias doubles.
inline constexpr char kCheckpointMagic[4] = {'S', 'T', 'G', 'C'};
inline constexpr std::uint16_t kCheckpointVersion = 1;

class GridFileError : public std::runtime_error {
 public:
  enum class Kind { io, magic, version, size };

  GridFileError(Kind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

namespace detail {

inline void put_bytes(std::string& out, std::uint64_t v, int n) {
  for (int i = 0; i < n; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline std::uint64_t get_bytes(const std::string& in, std::size_t pos, int n) {
  std::uint64_t v = 0;
  for (int i = 0; i < n; ++i)
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  return v;
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw GridFileError(GridFileError::Kind::io, "cannot open " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (!in && !in.eof()) throw GridFileError(GridFileError::Kind::io, "read failure on " + path);
  return bytes;
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw GridFileError(GridFileError::Kind::io, "cannot open " + path + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw GridFileError(GridFileError::Kind::io, "write failure on " + path);
}

}  // namespace detail

inline void write_grid(const GridTensor& grid, const std::string& path) {
  std::string bytes;
  bytes.reserve(14 + grid.size() * 8);
  bytes.append(kGridMagic, 4);
  detail::put_bytes(bytes, kGridVersion, 2);
  detail::put_bytes(bytes, static_cast<std::uint32_t>(grid.height()), 4);
  detail::put_bytes(bytes, static_cast<std::uint32_t>(grid.width()), 4);
  for (double v : grid) detail::put_bytes(bytes, std::bit_cast<std::uint64_t>(v), 8);
  detail::write_file(path, bytes);
}

inline GridTensor read_grid(const std::string& path) {
  const std::string bytes = detail::read_file(path);
  if (bytes.size() < 4 || bytes.compare(0, 4, kGridMagic, 4) != 0)
    throw GridFileError(GridFileError::Kind::magic, path + ": bad magic");
  if (bytes.size() < 14)
    throw GridFileError(GridFileError::Kind::size, path + ": truncated header");
  const auto version = static_cast<std::uint16_t>(detail::get_bytes(bytes, 4, 2));
  if (version != kGridVersion)
    throw GridFileError(GridFileError::Kind::version,
                        path + ": unsupported version " + std::to_string(version));
  const auto h = static_cast<std::uint32_t>(detail::get_bytes(bytes, 6, 4));
  const auto w = static_cast<std::uint32_t>(detail::get_bytes(bytes, 10, 4));
  if (h == 0 || w == 0 || static_cast<std::uint64_t>(h) * w > (1ULL << 31))
    throw GridFileError(GridFileError::Kind::size, path + ": implausible dimensions");
  const std::uint64_t count = static_cast<std::uint64_t>(h) * w;
  if (bytes.size() != 14 + count * 8)
    throw GridFileError(GridFileError::Kind::size,
                        path + ": payload size mismatch (" + std::to_string(bytes.size() - 14) +
                            " bytes for " + std::to_string(count) + " values)");
  std::vector<double> values(count);
  for (std::uint64_t i = 0; i < count; ++i)
    values[i] = std::bit_cast<double>(detail::get_bytes(bytes, 14 + i * 8, 8));
  return GridTensor(static_cast<int>(h), static_cast<int>(w), std::move(values));
}

inline void write_mask(const BinaryMask& mask, const std::string& path) {
  write_grid(mask.as_grid(), path);
}

inline BinaryMask read_mask(const std::string& path) {
  GridTensor g = read_grid(path);
  return BinaryMask(g.height(), g.width(), std::move(g.values()));
}

// Binary PGM (P5), maxval 255. Values are clamped to [lo, hi] and scaled
// linearly; ties round half to even.
inline void export_pgm(const GridTensor& grid, const std::string& path, double lo, double hi) {
  if (!(lo < hi) || !std::isfinite(lo) || !std::isfinite(hi))
    throw std::invalid_argument("export_pgm: need finite lo < hi");
  std::string bytes = "P5\n" + std::to_string(grid.width()) + " " +
                      std::to_string(grid.height()) + "\n255\n";
  const double scale = 255.0 / (hi - lo);
  for (double v : grid) {
    const double clamped = std::min(std::max(v, lo), hi);
    const double level = std::nearbyint((clamped - lo) * scale);
    bytes.push_back(static_cast<char>(static_cast<unsigned char>(level)));
  }
  detail::write_file(path, bytes);
}

inline void save_checkpoint(const LinearDenoiser& model, const std::string& path) {
  std::string bytes;
  bytes.append(kCheckpointMagic, 4);
  detail::put_bytes(bytes, kCheckpointVersion, 2);
  detail::put_bytes(bytes, static_cast<std::uint32_t>(model.schedule().steps()), 4);
  detail::put_bytes(bytes, static_cast<std::uint32_t>(model.bucket_count()), 4);
  detail::put_bytes(bytes, static_cast<std::uint32_t>(model.height()), 4);
  detail::put_bytes(bytes, static_cast<std::uint32_t>(model.width()), 4);
  for (int k = 0; k < model.bucket_count(); ++k) {
    detail::put_bytes(bytes, std::bit_cast<std::uint64_t>(model.gain(k)), 8);
    detail::put_bytes(bytes, std::bit_cast<std::uint64_t>(model.mask_gain(k)), 8);
    for (double v : model.bias(k)) detail::put_bytes(bytes, std::bit_cast<std::uint64_t>(v), 8);
  }
  detail::write_file(path, bytes);
}

inline LinearDenoiser load_checkpoint(const DiffusionSchedule& sched, const std::string& path) {
  const std::string bytes = detail::read_file(path);
  if (bytes.size() < 4 || bytes.compare(0, 4, kCheckpointMagic, 4) != 0)
    throw GridFileError(GridFileError::Kind::magic, path + ": bad checkpoint magic");
  if (bytes.size() < 22)
    throw GridFileError(GridFileError::Kind::size, path + ": truncated checkpoint header");
  const auto version = static_cast<std::uint16_t>(detail::get_bytes(bytes, 4, 2));
  if (version != kCheckpointVersion)
    throw GridFileError(GridFileError::Kind::version,
                        path + ": unsupported checkpoint version " + std::to_string(version));
  const auto steps = static_cast<std::uint32_t>(detail::get_bytes(bytes, 6, 4));
  const auto buckets = static_cast<std::uint32_t>(detail::get_bytes(bytes, 10, 4));
  const auto h = static_cast<std::uint32_t>(detail::get_bytes(bytes, 14, 4));
  const auto w = static_cast<std::uint32_t>(detail::get_bytes(bytes, 18, 4));
  if (steps != static_cast<std::uint32_t>(sched.steps()))
    throw GridFileError(GridFileError::Kind::size,
                        path + ": checkpoint was trained with a different step count");
  if (buckets == 0 || h == 0 || w == 0 || static_cast<std::uint64_t>(h) * w > (1ULL << 31))
    throw GridFileError(GridFileError::Kind::size, path + ": implausible checkpoint dimensions");
  const std::uint64_t per_bucket = 2 + static_cast<std::uint64_t>(h) * w;
  if (bytes.size() != 22 + buckets * per_bucket * 8)
    throw GridFileError(GridFileError::Kind::size, path + ": checkpoint payload size mismatch");
  LinearDenoiser model(sched, static_cast<int>(buckets), static_cast<int>(h),
                       static_cast<int>(w));
  std::size_t pos = 22;
  for (std::uint32_t k = 0; k < buckets; ++k) {
    model.gain(static_cast<int>(k)) = std::bit_cast<double>(detail::get_bytes(bytes, pos, 8));
    pos += 8;
    model.mask_gain(static_cast<int>(k)) =
        std::bit_cast<double>(detail::get_bytes(bytes, pos, 8));
    pos += 8;
    GridTensor& b = model.bias(static_cast<int>(k));
    for (std::size_t i = 0; i < b.size(); ++i) {
      b[i] = std::bit_cast<double>(detail::get_bytes(bytes, pos, 8));
      pos += 8;
    }
  }
  return model;
}

}  // namespace stage
