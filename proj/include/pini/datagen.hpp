#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pini/rng.hpp"
#include "pini/tensor.hpp"

namespace pini {

// World seed shared across pretraining and downstream runs so every stage sees
// the same class prototypes; per-run --seed only drives sampling.
constexpr std::uint64_t kWorldSeed = 7;

struct ClassPrototype {
  int class_id = 0;
  std::string name;
  Tensor image;  // {16,16}, values in [0,1]
};

// Deterministic per-corpus prototypes; pairwise L2 distance >= 0.3.
std::vector<ClassPrototype> make_prototypes(std::uint64_t corpus_seed);

struct BiasTransform {
  double scale = 1.0;
  double offset = 0.0;
  int patch_row = 0;
  int patch_col = 0;
  int patch_size = 0;  // 0 disables the nuisance patch
  double patch_value = 0.0;
  double pixel_noise = 0.05;

  static BiasTransform identity();
  static BiasTransform default_downstream();
};

struct Example {
  Tensor image;
  int label = 0;
};

struct Dataset {
  std::vector<Example> items;
  BiasTransform bias;
  std::uint64_t seed = 0;
  std::string split;
  std::vector<int> per_class_counts;

  std::size_t size() const { return items.size(); }
};

struct FewShotTask {
  Dataset train;
  Dataset test;
  std::string prompt_template;
  int shots = 0;
};

constexpr int kNumClasses = 10;
constexpr const char* kDefaultTemplate = "a photo of a [class]";

// clip(scale * (prototype + patch + N(0, noise^2)) + offset), quantized to f32
Tensor apply_bias(const Tensor& prototype, const BiasTransform& bias, RandomStream& rng);

Dataset make_pretrain_corpus(int n_per_class, std::uint64_t seed,
                             std::uint64_t world_seed = kWorldSeed);
FewShotTask make_downstream(const BiasTransform& bias, int shots, int test_per_class,
                            std::uint64_t seed, std::uint64_t world_seed = kWorldSeed);
std::vector<FewShotTask> make_shift_suite(std::uint64_t seed,
                                          std::uint64_t world_seed = kWorldSeed);

// JSON-lines manifest at <prefix>.jsonl plus flat little-endian f32 pixels at
// <prefix>.f32; load(save(ds)) reproduces the file byte for byte.
void save_dataset(const Dataset& ds, const std::string& path_prefix);
Dataset load_dataset(const std::string& path_prefix);

}  // namespace pini
