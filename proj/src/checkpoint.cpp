#include "pini/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

static_assert(std::endian::native == std::endian::little,
              "checkpoint container assumes a little-endian host");

namespace pini {

namespace {

constexpr char kMagic[8] = {'P', 'I', 'N', 'I', 'C', 'K', 'P', 'T'};

template <class T>
void write_pod(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
void read_pod(std::istream& is, T& v) {
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw std::runtime_error("checkpoint: truncated file");
}

}  // namespace

std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

std::uint64_t digest_tensors(const std::vector<Tensor>& weights) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& w : weights) {
    h = fnv1a(w.values().data(), w.values().size() * sizeof(double), h);
  }
  return h;
}

void Checkpoint::add(const std::string& name, const Tensor& t) {
  blocks.push_back({name, t.shape(), t.values()});
}

const WeightBlock& Checkpoint::find(const std::string& name) const {
  for (const auto& b : blocks) {
    if (b.name == name) return b;
  }
  throw std::runtime_error("checkpoint: missing block '" + name + "'");
}

void Checkpoint::load_into(const std::string& name, Tensor& t) const {
  const WeightBlock& b = find(name);
  if (b.shape != t.shape()) {
    throw std::runtime_error("checkpoint: shape mismatch for block '" + name + "'");
  }
  t.assign(b.values);
}

void Checkpoint::save(const std::string& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("checkpoint: cannot open '" + path + "' for writing");

  os.write(kMagic, sizeof(kMagic));
  write_pod(os, kVersion);
  const std::uint32_t meta_len = static_cast<std::uint32_t>(meta_json.size());
  write_pod(os, meta_len);
  os.write(meta_json.data(), meta_len);

  std::uint64_t digest = 0xcbf29ce484222325ull;
  const std::uint32_t n_blocks = static_cast<std::uint32_t>(blocks.size());
  write_pod(os, n_blocks);
  for (const auto& b : blocks) {
    const std::uint32_t name_len = static_cast<std::uint32_t>(b.name.size());
    write_pod(os, name_len);
    os.write(b.name.data(), name_len);
    const std::uint32_t ndim = static_cast<std::uint32_t>(b.shape.size());
    write_pod(os, ndim);
    for (std::size_t d : b.shape) write_pod(os, static_cast<std::uint64_t>(d));
    os.write(reinterpret_cast<const char*>(b.values.data()),
             static_cast<std::streamsize>(b.values.size() * sizeof(double)));
    digest = fnv1a(b.name.data(), b.name.size(), digest);
    digest = fnv1a(b.values.data(), b.values.size() * sizeof(double), digest);
  }
  write_pod(os, digest);
  if (!os) throw std::runtime_error("checkpoint: write failed for '" + path + "'");
}

Checkpoint Checkpoint::load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open '" + path + "'");

  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw std::runtime_error("checkpoint: bad magic in '" + path + "'");
  }
  std::uint32_t version = 0;
  read_pod(is, version);
  if (version != kVersion) {
    throw std::runtime_error("checkpoint: unsupported format version");
  }

  Checkpoint out;
  std::uint32_t meta_len = 0;
  read_pod(is, meta_len);
  out.meta_json.resize(meta_len);
  if (meta_len > 0) {
    is.read(out.meta_json.data(), meta_len);
    if (!is) throw std::runtime_error("checkpoint: truncated metadata");
  }

  std::uint32_t n_blocks = 0;
  read_pod(is, n_blocks);
  std::uint64_t digest = 0xcbf29ce484222325ull;
  for (std::uint32_t i = 0; i < n_blocks; ++i) {
    WeightBlock b;
    std::uint32_t name_len = 0;
    read_pod(is, name_len);
    b.name.resize(name_len);
    is.read(b.name.data(), name_len);
    std::uint32_t ndim = 0;
    read_pod(is, ndim);
    std::size_t count = 1;
    for (std::uint32_t d = 0; d < ndim; ++d) {
      std::uint64_t dim = 0;
      read_pod(is, dim);
      b.shape.push_back(static_cast<std::size_t>(dim));
      count *= static_cast<std::size_t>(dim);
    }
    b.values.resize(count);
    is.read(reinterpret_cast<char*>(b.values.data()),
            static_cast<std::streamsize>(count * sizeof(double)));
    if (!is) throw std::runtime_error("checkpoint: truncated block data");
    digest = fnv1a(b.name.data(), b.name.size(), digest);
    digest = fnv1a(b.values.data(), b.values.size() * sizeof(double), digest);
    out.blocks.push_back(std::move(b));
  }
  std::uint64_t stored = 0;
  read_pod(is, stored);
  if (stored != digest) throw std::runtime_error("checkpoint: digest mismatch in '" + path + "'");
  return out;
}

}  // namespace pini
