#pragma once

#include <memory>
#include <string>
#include <vector>

#include "pini/encoders.hpp"
#include "pini/rng.hpp"
#include "pini/tensor.hpp"

namespace pini {

enum class Site { kRawImage, kVisualFeature, kPromptEmbedding, kTextFeature };
enum class Fusion { kAdditive, kMultiplicative };
enum class Arch { kLearnableEmbedding, kMlp, kCnn, kCrossAttention };
enum class InferenceMode { kSampled, kMean };

std::string to_string(Site s);
std::string to_string(Fusion f);
std::string to_string(Arch a);
std::string to_string(InferenceMode m);
Site site_from_string(const std::string& s);
Fusion fusion_from_string(const std::string& s);
Arch arch_from_string(const std::string& s);
InferenceMode mode_from_string(const std::string& s);

struct NoiseSpec {
  Site site = Site::kVisualFeature;
  Fusion fusion = Fusion::kAdditive;
  Arch arch = Arch::kCrossAttention;
  int m = 1;                 // training draws per image
  int k = 16;                // evaluation draws
  InferenceMode mode = InferenceMode::kSampled;
  int cnn_blocks = 4;        // residual blocks for the cnn generator
  int cnn_channels = 8;
  int mlp_hidden = 64;
  bool mask_class_position = false;  // prompt-embedding site only

  void validate() const;  // rejects unsupported (site, arch) pairs
};

// Diagonal Gaussian over the injection site; sigma = softplus(raw) > 0.
struct GaussianParams {
  Tensor mu;
  Tensor sigma;
};

// Clean frozen-encoder views of one image plus the prompt set. Generators only
// ever see these (never labels), which keeps the noise label-blind.
struct NoiseContext {
  const Tensor* image = nullptr;           // {16,16}
  const Tensor* spatial = nullptr;         // {16,D}
  const Tensor* global_feature = nullptr;  // {D}
  const Tensor* text_features = nullptr;   // {N,D}
};

class NoiseGenerator {
 public:
  virtual ~NoiseGenerator() = default;
  const NoiseSpec& spec() const { return spec_; }
  virtual GaussianParams estimate(const NoiseContext& ctx) const = 0;
  virtual std::vector<std::pair<std::string, Tensor>> named_parameters() const = 0;
  std::vector<Tensor> parameters() const;

 protected:
  explicit NoiseGenerator(NoiseSpec spec) : spec_(std::move(spec)) {}
  NoiseSpec spec_;
};

// n_classes fixes the text-feature site shape {N,D}.
std::unique_ptr<NoiseGenerator> make_generator(const NoiseSpec& spec, const ModelDims& dims,
                                               std::size_t n_classes, std::uint64_t seed);

void save_generator(const NoiseGenerator& gen, const ModelDims& dims, std::size_t n_classes,
                    const std::string& path);
std::unique_ptr<NoiseGenerator> load_generator(const std::string& path);

struct NoiseSample {
  Tensor aux;    // epsilon ~ N(0, I), constant w.r.t. the graph
  Tensor value;  // sigma ⊙ epsilon + mu, differentiable in mu and sigma
};

NoiseSample sample_noise(const GaussianParams& params, RandomStream& rng);
Tensor inject(const Tensor& site_value, const Tensor& noise, Fusion fusion);

// Clean per-image encoder outputs, reusable across noise draws.
struct ForwardCache {
  Tensor spatial;        // {16,D}
  Tensor global;         // {D}
  Tensor text_features;  // {N,D}
  std::vector<Tensor> embedded_prompts;  // N x {L,E}
};

ForwardCache build_forward_cache(const ClipModel& model, const Tensor& image,
                                 const PromptSet& prompts);

// Runs Eq.-2-style inference with noise injected at each active site.
// Probabilities of q(y | x, eps, P); at most one generator per site.
Tensor forward_with_noise(const ClipModel& model, const std::vector<NoiseGenerator*>& generators,
                          const Tensor& image, const PromptSet& prompts, RandomStream& rng,
                          InferenceMode mode, const ForwardCache* cache = nullptr);

}  // namespace pini
