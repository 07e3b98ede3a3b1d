#include "dalir/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <vector>

static_assert(std::endian::native == std::endian::little,
              "checkpoint serialization assumes a little-endian host");

namespace dalir {

namespace {

template <typename T>
void put(std::ofstream& f, T v) {
  f.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::ifstream& f, const std::string& path) {
  T v{};
  f.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!f) throw std::runtime_error("truncated checkpoint: " + path);
  return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const ParamMap& params) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open for write: " + path);
  f.write(kCheckpointMagic, 4);
  put<uint32_t>(f, kCheckpointVersion);
  put<uint32_t>(f, uint32_t(params.items.size()));
  for (const auto& [name, t] : params.items) {
    if (name.size() > 0xFFFF) throw std::invalid_argument("parameter name too long: " + name);
    put<uint16_t>(f, uint16_t(name.size()));
    f.write(name.data(), std::streamsize(name.size()));
    const auto& shape = t.shape();
    if (shape.size() > 0xFF) throw std::invalid_argument("parameter rank too large: " + name);
    put<uint8_t>(f, uint8_t(shape.size()));
    for (int d : shape) put<uint32_t>(f, uint32_t(d));
    auto d = t.data();
    f.write(reinterpret_cast<const char*>(d.data()), std::streamsize(d.size() * sizeof(float)));
  }
  if (!f) throw std::runtime_error("write failed: " + path);
}

ParamMap load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open checkpoint: " + path);
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, kCheckpointMagic, 4) != 0) {
    throw std::runtime_error("bad checkpoint magic: " + path);
  }
  uint32_t version = get<uint32_t>(f, path);
  if (version != kCheckpointVersion) {
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(version) + ": " +
                             path);
  }
  uint32_t count = get<uint32_t>(f, path);
  ParamMap out;
  for (uint32_t i = 0; i < count; ++i) {
    uint16_t name_len = get<uint16_t>(f, path);
    std::string name(name_len, '\0');
    f.read(name.data(), name_len);
    if (!f) throw std::runtime_error("truncated checkpoint: " + path);
    uint8_t rank = get<uint8_t>(f, path);
    Shape shape(rank);
    size_t numel = 1;
    for (auto& d : shape) {
      uint32_t v = get<uint32_t>(f, path);
      if (v == 0 || v > (1u << 28)) throw std::runtime_error("corrupt shape in: " + path);
      d = int(v);
      numel *= v;
    }
    std::vector<float> data(numel);
    f.read(reinterpret_cast<char*>(data.data()), std::streamsize(numel * sizeof(float)));
    if (!f) throw std::runtime_error("truncated checkpoint: " + path);
    out.add(name, Tensor::from(std::move(shape), std::move(data)));
  }
  f.peek();
  if (!f.eof()) throw std::runtime_error("trailing bytes in checkpoint: " + path);
  return out;
}

void load_checkpoint_into(const std::string& path, ParamMap& params) {
  ParamMap loaded = load_checkpoint(path);
  for (auto& [name, t] : params.items) {
    const Tensor* src = loaded.find(name);
    if (!src) throw std::runtime_error("checkpoint missing parameter '" + name + "': " + path);
    if (src->shape() != t.shape()) {
      throw std::runtime_error("checkpoint shape mismatch for '" + name + "': file " +
                               shape_str(src->shape()) + " vs model " + shape_str(t.shape()));
    }
    auto dst = t.mutable_data();
    auto sd = src->data();
    std::copy(sd.begin(), sd.end(), dst.begin());
  }
}

uint64_t hash_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for hashing: " + path);
  uint64_t h = 0xCBF29CE484222325ull;
  char buf[65536];
  while (f) {
    f.read(buf, sizeof(buf));
    std::streamsize got = f.gcount();
    h = fnv1a64(buf, size_t(got), h);
  }
  return h;
}

}  // namespace dalir
