#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pini/tensor.hpp"

namespace pini {

// FNV-1a over raw little-endian bytes.
std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ull);
std::uint64_t digest_tensors(const std::vector<Tensor>& weights);

struct WeightBlock {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<double> values;
};

// Versioned binary container shared by model and generator checkpoints:
// magic, format version, optional JSON metadata, named little-endian f64
// blocks with shape headers, trailing integrity digest.
struct Checkpoint {
  std::string meta_json;  // empty when absent
  std::vector<WeightBlock> blocks;

  void add(const std::string& name, const Tensor& t);
  const WeightBlock& find(const std::string& name) const;
  void load_into(const std::string& name, Tensor& t) const;

  void save(const std::string& path) const;
  static Checkpoint load(const std::string& path);

  static constexpr std::uint32_t kVersion = 1;
};

}  // namespace pini
