// Versioned binary checkpoint: model config, named parameter grids with
// their momentum buffers (little-endian float32), and the iteration counter.
// Save and load round-trip bit-exactly.
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "orfnet/errors.hpp"
#include "orfnet/model.hpp"

namespace orfnet {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

namespace detail {

inline constexpr uint32_t kCheckpointMagic = 0x4e46524f;  // "ORFN"
inline constexpr uint32_t kCheckpointVersion = 1;

template <class T>
void write_pod(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw DataError("checkpoint: truncated file");
  return v;
}

inline void write_string(std::ostream& os, const std::string& s) {
  write_pod(os, uint32_t(s.size()));
  os.write(s.data(), std::streamsize(s.size()));
}

inline std::string read_string(std::istream& is) {
  uint32_t n = read_pod<uint32_t>(is);
  std::string s(n, '\0');
  is.read(s.data(), std::streamsize(n));
  if (!is) throw DataError("checkpoint: truncated string");
  return s;
}

inline void write_floats(std::ostream& os, const std::vector<float>& v) {
  os.write(reinterpret_cast<const char*>(v.data()), std::streamsize(v.size() * sizeof(float)));
}

inline void read_floats(std::istream& is, std::vector<float>& v) {
  is.read(reinterpret_cast<char*>(v.data()), std::streamsize(v.size() * sizeof(float)));
  if (!is) throw DataError("checkpoint: truncated parameter data");
}

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& path, const Detector& det,
                            long iteration) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("checkpoint: cannot write " + path.string());
  using namespace detail;
  write_pod(os, kCheckpointMagic);
  write_pod(os, kCheckpointVersion);
  write_pod(os, int64_t(iteration));

  const auto& cfg = det.config();
  write_pod(os, int32_t(cfg.image_channels));
  for (int c : cfg.stem_channels) write_pod(os, int32_t(c));
  write_pod(os, int32_t(cfg.head_channels));
  write_pod(os, int32_t(cfg.tower_depth));
  write_pod(os, double(cfg.prior));
  write_pod(os, uint32_t(cfg.strides.size()));
  for (int s : cfg.strides) write_pod(os, int32_t(s));

  write_pod(os, uint32_t(det.params().size()));
  for (const auto& p : det.params()) {
    write_string(os, p.name);
    write_pod(os, int32_t(p.dims.c));
    write_pod(os, int32_t(p.dims.h));
    write_pod(os, int32_t(p.dims.w));
    write_floats(os, p.value);
    write_floats(os, p.velocity);
  }
  if (!os) throw DataError("checkpoint: write failed for " + path.string());
}

struct LoadedCheckpoint {
  Detector detector;
  long iteration = 0;
};

inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("checkpoint: cannot open " + path.string());
  using namespace detail;
  if (read_pod<uint32_t>(is) != kCheckpointMagic)
    throw DataError("checkpoint: bad magic in " + path.string());
  uint32_t version = read_pod<uint32_t>(is);
  if (version != kCheckpointVersion)
    throw DataError("checkpoint: unsupported version " + std::to_string(version));
  long iteration = long(read_pod<int64_t>(is));

  ModelConfig cfg;
  cfg.image_channels = read_pod<int32_t>(is);
  cfg.stem_channels.resize(3);
  for (auto& c : cfg.stem_channels) c = read_pod<int32_t>(is);
  cfg.head_channels = read_pod<int32_t>(is);
  cfg.tower_depth = read_pod<int32_t>(is);
  cfg.prior = read_pod<double>(is);
  cfg.strides.resize(read_pod<uint32_t>(is));
  for (auto& s : cfg.strides) s = read_pod<int32_t>(is);

  LoadedCheckpoint out{Detector::uninitialized(std::move(cfg)), iteration};
  uint32_t n_params = read_pod<uint32_t>(is);
  if (n_params != out.detector.params().size())
    throw DataError("checkpoint: parameter count mismatch");
  for (auto& p : out.detector.params()) {
    std::string name = read_string(is);
    if (name != p.name) throw DataError("checkpoint: expected parameter " + p.name + ", got " + name);
    ad::GridDims d{read_pod<int32_t>(is), read_pod<int32_t>(is), read_pod<int32_t>(is)};
    if (!(d == p.dims)) throw DataError("checkpoint: shape mismatch for " + name);
    read_floats(is, p.value);
    read_floats(is, p.velocity);
  }
  return out;
}

}  // namespace orfnet
