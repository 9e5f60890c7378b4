#include "penet/scene_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "penet/errors.hpp"

namespace penet {
namespace {

static_assert(std::endian::native == std::endian::little, "PCS1 I/O assumes a little-endian host");

constexpr char kMagic[4] = {'P', 'C', 'S', '1'};

template <typename T>
void put(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
bool get(std::istream& in, T& v) {
  return static_cast<bool>(in.read(reinterpret_cast<char*>(&v), sizeof(T)));
}

}  // namespace

void write_scene(const PointCloud& pc, std::ostream& out) {
  out.write(kMagic, 4);
  put(out, static_cast<uint32_t>(pc.size()));
  put(out, static_cast<uint32_t>(kPointFeatureDim));
  const auto feats = pc.features();
  out.write(reinterpret_cast<const char*>(feats.data()),
            static_cast<std::streamsize>(feats.size() * sizeof(float)));
  out.write(reinterpret_cast<const char*>(pc.labels.data()),
            static_cast<std::streamsize>(pc.labels.size() * sizeof(int32_t)));
  if (!out) throw FormatError("stream", "write failed");
}

void write_scene(const PointCloud& pc, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("path", "cannot open " + path.string() + " for writing");
  write_scene(pc, out);
}

PointCloud read_scene(std::istream& in) {
  char magic[4];
  if (!in.read(magic, 4)) throw FormatError("magic", "truncated header");
  if (std::memcmp(magic, kMagic, 4) != 0) {
    throw FormatError("magic", "expected PCS1, found '" + std::string(magic, 4) + "'");
  }
  uint32_t n = 0, d = 0;
  if (!get(in, n)) throw FormatError("n", "truncated header");
  if (!get(in, d)) throw FormatError("d", "truncated header");
  if (d != kPointFeatureDim) {
    throw FormatError("d", "dimension mismatch: expected 9, found " + std::to_string(d));
  }
  std::vector<float> feats(static_cast<std::size_t>(n) * d);
  if (!in.read(reinterpret_cast<char*>(feats.data()),
               static_cast<std::streamsize>(feats.size() * sizeof(float)))) {
    throw FormatError("features", "truncated payload: header declares n=" + std::to_string(n));
  }
  PointCloud pc;
  pc.labels.resize(n);
  if (!in.read(reinterpret_cast<char*>(pc.labels.data()),
               static_cast<std::streamsize>(n * sizeof(int32_t)))) {
    throw FormatError("labels", "truncated payload: header declares n=" + std::to_string(n));
  }
  pc.points.resize(n);
  pc.colors.resize(n);
  pc.norm_coords.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const float* row = feats.data() + i * d;
    std::memcpy(pc.points[i].data(), row, 3 * sizeof(float));
    std::memcpy(pc.colors[i].data(), row + 3, 3 * sizeof(float));
    std::memcpy(pc.norm_coords[i].data(), row + 6, 3 * sizeof(float));
  }
  return pc;
}

PointCloud read_scene(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("path", "cannot open " + path.string());
  return read_scene(in);
}

}  // namespace penet
