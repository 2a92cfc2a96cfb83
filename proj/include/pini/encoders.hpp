#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pini/rng.hpp"
#include "pini/tensor.hpp"
#include "pini/vocab.hpp"

namespace pini {

// 16x16 single-channel images, split into a 4x4 grid of 4x4 patches.
constexpr std::size_t kImageSide = 16;
constexpr std::size_t kPatchSide = 4;
constexpr std::size_t kPatchCount = 16;   // (16/4)^2
constexpr std::size_t kPatchPixels = 16;  // 4*4

struct ModelDims {
  std::size_t embed = 16;    // word embedding width E
  std::size_t feature = 32;  // shared embedding width D
  std::size_t hidden = 32;   // text-encoder hidden width
  std::size_t prompt_len = 8;
};

// Two dense layers over mean-pooled word embeddings, output L2-normalized.
struct TextEncoder {
  Tensor embedding;  // {64, E}
  Tensor w1, b1;     // {E, H}, {H}
  Tensor w2, b2;     // {H, D}, {D}

  static TextEncoder init(const ModelDims& dims, RandomStream& rng);
  std::vector<Tensor> parameters() const;

  Tensor embed(const std::vector<int>& token_ids) const;  // {L, E}
  Tensor encode_embedded(const Tensor& embedded) const;   // {D}, unit norm
  Tensor encode(const std::vector<int>& token_ids) const;
};

// Shared dense patch embedder producing the 16xD spatial map, plus a pooling
// head for the global unit-norm feature.
struct VisualEncoder {
  Tensor patch_w, patch_b;  // {16, D}, {D}
  Tensor pool_w, pool_b;    // {D, D}, {D}

  static VisualEncoder init(const ModelDims& dims, RandomStream& rng);
  std::vector<Tensor> parameters() const;

  struct Features {
    Tensor spatial;  // {16, D}
    Tensor global;   // {D}, unit norm
  };

  Tensor spatial(const Tensor& image) const;
  Tensor global_from_spatial(const Tensor& spatial_map) const;
  Features encode(const Tensor& image) const;
};

// index map taking a {16,16} image to {16,16} patch-major layout and back
const std::vector<std::size_t>& patch_index_map();
const std::vector<std::size_t>& patch_inverse_index_map();

struct ClipModel {
  ModelDims dims;
  VisualEncoder visual;
  TextEncoder text;
  double tau = 0.07;
  bool frozen = false;
  std::uint64_t frozen_digest = 0;

  static ClipModel init(const ModelDims& dims, std::uint64_t seed);
  std::vector<Tensor> parameters() const;
  std::uint64_t digest() const;
  void freeze();
  void check_frozen_integrity() const;  // throws if weights drifted after freeze

  void save(const std::string& path) const;
  static ClipModel load(const std::string& path);
};

// Row i is T(rho_i); rows are unit norm.
Tensor encode_prompts(const ClipModel& model, const PromptSet& prompts);

// Validates the [0,1] pixel range, then returns spatial and global features.
VisualEncoder::Features encode_image(const ClipModel& model, const Tensor& image);

// p(y | x, P) = softmax_i cos(V(x), T(rho_i)) / tau
Tensor classify(const ClipModel& model, const Tensor& image, const PromptSet& prompts);
Tensor classify_from_features(const Tensor& global_feature, const Tensor& text_features,
                              double tau);

}  // namespace pini
