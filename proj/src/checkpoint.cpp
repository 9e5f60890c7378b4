#include "penet/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "penet/errors.hpp"

namespace penet {
namespace {

constexpr char kMagic[4] = {'P', 'N', 'C', 'K'};

template <typename T>
void put(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in, const char* field) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(T))) throw FormatError(field, "truncated");
  return v;
}

uint8_t dtype_code(const torch::Tensor& t) {
  switch (t.scalar_type()) {
    case torch::kFloat32: return 0;
    case torch::kFloat64: return 1;
    case torch::kInt64: return 2;
    default: throw InvalidArgument("checkpoint: unsupported dtype");
  }
}

torch::ScalarType dtype_of(uint8_t code) {
  switch (code) {
    case 0: return torch::kFloat32;
    case 1: return torch::kFloat64;
    case 2: return torch::kInt64;
    default: throw FormatError("dtype", "unknown dtype code " + std::to_string(code));
  }
}

}  // namespace

void Checkpoint::add(std::string name, const torch::Tensor& t) {
  arrays.emplace_back(std::move(name), t.detach().contiguous().clone());
}

bool Checkpoint::has(const std::string& name) const {
  for (const auto& [n, t] : arrays)
    if (n == name) return true;
  return false;
}

const torch::Tensor& Checkpoint::get(const std::string& name) const {
  for (const auto& [n, t] : arrays)
    if (n == name) return t;
  throw FormatError(name, "array missing from checkpoint");
}

void Checkpoint::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("path", "cannot open " + path.string() + " for writing");
  out.write(kMagic, 4);
  put(out, kVersion);
  const std::string m = manifest.dump();
  put(out, static_cast<uint32_t>(m.size()));
  out.write(m.data(), static_cast<std::streamsize>(m.size()));
  put(out, static_cast<uint32_t>(arrays.size()));
  for (const auto& [name, t] : arrays) {
    put(out, static_cast<uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put(out, dtype_code(t));
    put(out, static_cast<uint32_t>(t.dim()));
    for (auto d : t.sizes()) put(out, static_cast<int64_t>(d));
    out.write(static_cast<const char*>(t.data_ptr()),
              static_cast<std::streamsize>(t.numel() * t.element_size()));
  }
  if (!out) throw FormatError("path", "write failed for " + path.string());
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("path", "cannot open " + path.string());
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) {
    throw FormatError("magic", "not a checkpoint: " + path.string());
  }
  const auto version = read_pod<uint32_t>(in, "version");
  if (version != kVersion) throw FormatError("version", "unsupported version " + std::to_string(version));
  Checkpoint ck;
  const auto mlen = read_pod<uint32_t>(in, "manifest");
  std::string m(mlen, '\0');
  if (!in.read(m.data(), mlen)) throw FormatError("manifest", "truncated");
  try {
    ck.manifest = nlohmann::json::parse(m);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("manifest", e.what());
  }
  const auto count = read_pod<uint32_t>(in, "count");
  for (uint32_t i = 0; i < count; ++i) {
    const auto nlen = read_pod<uint32_t>(in, "name");
    std::string name(nlen, '\0');
    if (!in.read(name.data(), nlen)) throw FormatError("name", "truncated");
    const auto dtype = dtype_of(read_pod<uint8_t>(in, "dtype"));
    const auto ndim = read_pod<uint32_t>(in, "ndim");
    std::vector<int64_t> dims(ndim);
    for (auto& d : dims) d = read_pod<int64_t>(in, "dims");
    auto t = torch::empty(dims, dtype);
    if (!in.read(static_cast<char*>(t.data_ptr()),
                 static_cast<std::streamsize>(t.numel() * t.element_size()))) {
      throw FormatError(name, "truncated array payload");
    }
    ck.arrays.emplace_back(std::move(name), std::move(t));
  }
  return ck;
}

void Checkpoint::add_module(const torch::nn::Module& m, const std::string& prefix) {
  for (const auto& p : m.named_parameters(true)) add(prefix + p.key(), p.value());
  for (const auto& b : m.named_buffers(true)) add(prefix + b.key(), b.value());
}

void Checkpoint::load_module(torch::nn::Module& m, const std::string& prefix) const {
  torch::NoGradGuard guard;
  for (auto& p : m.named_parameters(true)) {
    const auto& src = get(prefix + p.key());
    if (src.sizes() != p.value().sizes()) {
      throw FormatError(prefix + p.key(), "shape mismatch");
    }
    p.value().copy_(src);
  }
  for (auto& b : m.named_buffers(true)) {
    const auto& src = get(prefix + b.key());
    if (src.sizes() != b.value().sizes()) {
      throw FormatError(prefix + b.key(), "shape mismatch");
    }
    b.value().copy_(src);
  }
}

}  // namespace penet
