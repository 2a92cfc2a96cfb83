#include "pini/noise.hpp"

#include <cmath>
#include <set>
#include <stdexcept>

#include "pini/checkpoint.hpp"

#include "json.hpp"

namespace pini {

namespace {

// softplus(-4.6) ~= 0.01: training starts at near-identity injection
constexpr double kSigmaRawInit = -4.6;

Tensor small_random(std::vector<std::size_t> shape, RandomStream& rng, double scale = 0.1) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(-scale, scale);
  return Tensor(std::move(shape), std::move(v), true);
}

const Tensor& require_ctx(const Tensor* t, const char* what) {
  if (t == nullptr || !t->defined()) {
    throw std::invalid_argument(std::string("estimate: context is missing ") + what);
  }
  return *t;
}

// column split of {r, 2c} into ({r,c}, {r,c})
std::pair<Tensor, Tensor> split_columns(const Tensor& m) {
  const std::size_t r = m.dim(0), c2 = m.dim(1), c = c2 / 2;
  std::vector<std::size_t> left(r * c), right(r * c);
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) {
      left[i * c + j] = i * c2 + j;
      right[i * c + j] = i * c2 + c + j;
    }
  }
  return {gather_flat(m, left, {r, c}), gather_flat(m, right, {r, c})};
}

}  // namespace

// ---- enum names ------------------------------------------------------------

std::string to_string(Site s) {
  switch (s) {
    case Site::kRawImage: return "raw-image";
    case Site::kVisualFeature: return "visual-feature";
    case Site::kPromptEmbedding: return "prompt-embedding";
    case Site::kTextFeature: return "text-feature";
  }
  return "?";
}

std::string to_string(Fusion f) {
  return f == Fusion::kAdditive ? "additive" : "multiplicative";
}

std::string to_string(Arch a) {
  switch (a) {
    case Arch::kLearnableEmbedding: return "learnable-embedding";
    case Arch::kMlp: return "mlp";
    case Arch::kCnn: return "cnn";
    case Arch::kCrossAttention: return "cross-attention";
  }
  return "?";
}

std::string to_string(InferenceMode m) { return m == InferenceMode::kSampled ? "sampled" : "mean"; }

Site site_from_string(const std::string& s) {
  if (s == "raw-image") return Site::kRawImage;
  if (s == "visual-feature") return Site::kVisualFeature;
  if (s == "prompt-embedding") return Site::kPromptEmbedding;
  if (s == "text-feature") return Site::kTextFeature;
  throw std::invalid_argument("unknown site '" + s + "'");
}

Fusion fusion_from_string(const std::string& s) {
  if (s == "additive") return Fusion::kAdditive;
  if (s == "multiplicative") return Fusion::kMultiplicative;
  throw std::invalid_argument("unknown fusion '" + s + "'");
}

Arch arch_from_string(const std::string& s) {
  if (s == "learnable-embedding") return Arch::kLearnableEmbedding;
  if (s == "mlp") return Arch::kMlp;
  if (s == "cnn") return Arch::kCnn;
  if (s == "cross-attention") return Arch::kCrossAttention;
  throw std::invalid_argument("unknown architecture '" + s + "'");
}

InferenceMode mode_from_string(const std::string& s) {
  if (s == "sampled") return InferenceMode::kSampled;
  if (s == "mean") return InferenceMode::kMean;
  throw std::invalid_argument("unknown inference mode '" + s + "'");
}

void NoiseSpec::validate() const {
  if (m < 1 || k < 1) throw std::invalid_argument("NoiseSpec: m and k must be >= 1");
  bool ok = false;
  switch (site) {
    case Site::kRawImage:
      ok = arch == Arch::kMlp || arch == Arch::kCnn || arch == Arch::kCrossAttention;
      break;
    case Site::kVisualFeature:
      ok = arch == Arch::kMlp || arch == Arch::kCrossAttention;
      break;
    case Site::kPromptEmbedding:
      ok = arch == Arch::kLearnableEmbedding;
      break;
    case Site::kTextFeature:
      ok = arch == Arch::kLearnableEmbedding || arch == Arch::kMlp;
      break;
  }
  if (!ok) {
    throw std::invalid_argument("NoiseSpec: unsupported combination " + to_string(site) + " + " +
                                to_string(arch));
  }
  if (cnn_blocks < 1 || cnn_channels < 1 || mlp_hidden < 1) {
    throw std::invalid_argument("NoiseSpec: generator sizes must be positive");
  }
}

std::vector<Tensor> NoiseGenerator::parameters() const {
  std::vector<Tensor> out;
  for (auto& [name, t] : named_parameters()) out.push_back(t);
  return out;
}

// ---- generators --------------------------------------------------------------

namespace {

class LearnableEmbeddingGenerator final : public NoiseGenerator {
 public:
  LearnableEmbeddingGenerator(NoiseSpec spec, const ModelDims& dims, std::size_t n_classes)
      : NoiseGenerator(std::move(spec)) {
    std::vector<std::size_t> shape;
    if (spec_.site == Site::kPromptEmbedding) {
      shape = {dims.prompt_len, dims.embed};
    } else {
      shape = {n_classes, dims.feature};  // per-class text-feature noise
    }
    mu_ = Tensor::zeros(shape, true);
    sigma_raw_ = Tensor::full(shape, kSigmaRawInit, true);
  }

  GaussianParams estimate(const NoiseContext& ctx) const override {
    if (spec_.site == Site::kTextFeature) {
      const Tensor& t = require_ctx(ctx.text_features, "text features");
      if (t.shape() != mu_.shape()) {
        throw std::invalid_argument("estimate: text-feature shape mismatch");
      }
    }
    return {mu_, softplus(sigma_raw_)};
  }

  std::vector<std::pair<std::string, Tensor>> named_parameters() const override {
    return {{"mu", mu_}, {"sigma_raw", sigma_raw_}};
  }

 private:
  Tensor mu_;
  Tensor sigma_raw_;
};

class MlpGenerator final : public NoiseGenerator {
 public:
  MlpGenerator(NoiseSpec spec, const ModelDims& dims, std::uint64_t seed)
      : NoiseGenerator(std::move(spec)), dims_(dims) {
    RandomStream rng(seed);
    const std::size_t site_size = spec_.site == Site::kRawImage ? kImageSide * kImageSide
                                  : dims.feature;
    const std::size_t in_size = spec_.site == Site::kTextFeature
                                    ? dims.feature
                                    : site_size + dims.feature;  // site vector ++ mean text feature
    const auto h = static_cast<std::size_t>(spec_.mlp_hidden);
    w1_ = small_random({in_size, h}, rng);
    b1_ = Tensor::zeros({h}, true);
    // zero-initialized output heads: mu = 0 and sigma ~= 0.01 at the start
    w2_ = Tensor::zeros({h, 2 * site_size}, true);
    b2_ = Tensor::zeros({2 * site_size}, true);
    for (std::size_t i = site_size; i < 2 * site_size; ++i) b2_.set_at(i, kSigmaRawInit);
  }

  GaussianParams estimate(const NoiseContext& ctx) const override {
    if (spec_.site == Site::kTextFeature) {
      const Tensor& text = require_ctx(ctx.text_features, "text features");
      Tensor hidden = tanh(affine_rows(text, w1_, b1_));
      Tensor out = affine_rows(hidden, w2_, b2_);  // {N, 2D}
      auto [mu, sigma_raw] = split_columns(out);
      return {mu, softplus(sigma_raw)};
    }
    const Tensor& text = require_ctx(ctx.text_features, "text features");
    Tensor site_vec;
    if (spec_.site == Site::kRawImage) {
      const Tensor& image = require_ctx(ctx.image, "raw image");
      site_vec = reshape(image, {kImageSide * kImageSide});
    } else {
      site_vec = require_ctx(ctx.global_feature, "global feature");
    }
    Tensor input = concat(site_vec, mean_rows(text));
    Tensor hidden = tanh(affine_vec(input, w1_, b1_));
    Tensor out = affine_vec(hidden, w2_, b2_);
    const std::size_t site_size = out.size() / 2;
    std::vector<std::size_t> lo(site_size), hi(site_size);
    for (std::size_t i = 0; i < site_size; ++i) {
      lo[i] = i;
      hi[i] = site_size + i;
    }
    auto site_shape = spec_.site == Site::kRawImage
                          ? std::vector<std::size_t>{kImageSide, kImageSide}
                          : std::vector<std::size_t>{dims_.feature};
    return {gather_flat(out, lo, site_shape), softplus(gather_flat(out, hi, site_shape))};
  }

  std::vector<std::pair<std::string, Tensor>> named_parameters() const override {
    return {{"w1", w1_}, {"b1", b1_}, {"w2", w2_}, {"b2", b2_}};
  }

 private:
  ModelDims dims_;
  Tensor w1_, b1_, w2_, b2_;
};

class CnnGenerator final : public NoiseGenerator {
 public:
  CnnGenerator(NoiseSpec spec, std::uint64_t seed) : NoiseGenerator(std::move(spec)) {
    RandomStream rng(seed);
    const auto ch = static_cast<std::size_t>(spec_.cnn_channels);
    stem_w_ = small_random({ch, 1, 3, 3}, rng);
    stem_b_ = Tensor::zeros({ch}, true);
    for (int b = 0; b < spec_.cnn_blocks; ++b) {
      block_w_.push_back(small_random({ch, ch, 3, 3}, rng));
      block_b_.push_back(Tensor::zeros({ch}, true));
    }
    head_w_ = Tensor::zeros({2, ch, 3, 3}, true);
    head_b_ = Tensor({2}, {0.0, kSigmaRawInit}, true);
  }

  GaussianParams estimate(const NoiseContext& ctx) const override {
    const Tensor& image = require_ctx(ctx.image, "raw image");
    Tensor x = tanh(conv2d(reshape(image, {1, kImageSide, kImageSide}), stem_w_, stem_b_));
    for (std::size_t b = 0; b < block_w_.size(); ++b) {
      x = add(x, tanh(conv2d(x, block_w_[b], block_b_[b])));
    }
    Tensor out = conv2d(x, head_w_, head_b_);  // {2,16,16}
    const std::size_t hw = kImageSide * kImageSide;
    std::vector<std::size_t> lo(hw), hi(hw);
    for (std::size_t i = 0; i < hw; ++i) {
      lo[i] = i;
      hi[i] = hw + i;
    }
    return {gather_flat(out, lo, {kImageSide, kImageSide}),
            softplus(gather_flat(out, hi, {kImageSide, kImageSide}))};
  }

  std::vector<std::pair<std::string, Tensor>> named_parameters() const override {
    std::vector<std::pair<std::string, Tensor>> out = {{"stem_w", stem_w_}, {"stem_b", stem_b_}};
    for (std::size_t b = 0; b < block_w_.size(); ++b) {
      out.emplace_back("block" + std::to_string(b) + "_w", block_w_[b]);
      out.emplace_back("block" + std::to_string(b) + "_b", block_b_[b]);
    }
    out.emplace_back("head_w", head_w_);
    out.emplace_back("head_b", head_b_);
    return out;
  }

 private:
  Tensor stem_w_, stem_b_;
  std::vector<Tensor> block_w_, block_b_;
  Tensor head_w_, head_b_;
};

class CrossAttentionGenerator final : public NoiseGenerator {
 public:
  CrossAttentionGenerator(NoiseSpec spec, const ModelDims& dims, std::uint64_t seed)
      : NoiseGenerator(std::move(spec)), dims_(dims) {
    RandomStream rng(seed);
    const std::size_t d = dims.feature;
    wq_ = small_random({d, d}, rng);
    wk_ = small_random({d, d}, rng);
    wv_ = small_random({d, d}, rng);
    const std::size_t head_out = spec_.site == Site::kRawImage ? kPatchPixels : d;
    mu_w_ = Tensor::zeros({d, head_out}, true);
    mu_b_ = Tensor::zeros({head_out}, true);
    sigma_w_ = Tensor::zeros({d, head_out}, true);
    sigma_b_ = Tensor::full({head_out}, kSigmaRawInit, true);
  }

  GaussianParams estimate(const NoiseContext& ctx) const override {
    const Tensor& text = require_ctx(ctx.text_features, "text features");
    Tensor query;
    if (spec_.site == Site::kRawImage) {
      query = require_ctx(ctx.spatial, "spatial features");  // {16,D}
    } else {
      query = reshape(require_ctx(ctx.global_feature, "global feature"), {1, dims_.feature});
    }
    // single head, width D: text features act as key and value
    Tensor attn = attention(matmul(query, wq_), matmul(text, wk_), matmul(text, wv_));
    Tensor mu = affine_rows(attn, mu_w_, mu_b_);
    Tensor sigma_raw = affine_rows(attn, sigma_w_, sigma_b_);
    if (spec_.site == Site::kRawImage) {
      // rows are per-patch pixel blocks; reassemble into image layout
      mu = gather_flat(mu, patch_inverse_index_map(), {kImageSide, kImageSide});
      sigma_raw = gather_flat(sigma_raw, patch_inverse_index_map(), {kImageSide, kImageSide});
    } else {
      mu = reshape(mu, {dims_.feature});
      sigma_raw = reshape(sigma_raw, {dims_.feature});
    }
    return {mu, softplus(sigma_raw)};
  }

  std::vector<std::pair<std::string, Tensor>> named_parameters() const override {
    return {{"wq", wq_}, {"wk", wk_}, {"wv", wv_},     {"mu_w", mu_w_},
            {"mu_b", mu_b_}, {"sigma_w", sigma_w_}, {"sigma_b", sigma_b_}};
  }

 private:
  ModelDims dims_;
  Tensor wq_, wk_, wv_;
  Tensor mu_w_, mu_b_, sigma_w_, sigma_b_;
};

}  // namespace

std::unique_ptr<NoiseGenerator> make_generator(const NoiseSpec& spec, const ModelDims& dims,
                                               std::size_t n_classes, std::uint64_t seed) {
  spec.validate();
  switch (spec.arch) {
    case Arch::kLearnableEmbedding:
      return std::make_unique<LearnableEmbeddingGenerator>(spec, dims, n_classes);
    case Arch::kMlp:
      return std::make_unique<MlpGenerator>(spec, dims, seed);
    case Arch::kCnn:
      return std::make_unique<CnnGenerator>(spec, seed);
    case Arch::kCrossAttention:
      return std::make_unique<CrossAttentionGenerator>(spec, dims, seed);
  }
  throw std::logic_error("make_generator: unreachable");
}

// ---- persistence -----------------------------------------------------------

void save_generator(const NoiseGenerator& gen, const ModelDims& dims, std::size_t n_classes,
                    const std::string& path) {
  const NoiseSpec& spec = gen.spec();
  Checkpoint ckpt;
  nlohmann::json meta;
  meta["kind"] = "generator";
  meta["site"] = to_string(spec.site);
  meta["fusion"] = to_string(spec.fusion);
  meta["arch"] = to_string(spec.arch);
  meta["m"] = spec.m;
  meta["k"] = spec.k;
  meta["mode"] = to_string(spec.mode);
  meta["cnn_blocks"] = spec.cnn_blocks;
  meta["cnn_channels"] = spec.cnn_channels;
  meta["mlp_hidden"] = spec.mlp_hidden;
  meta["mask_class_position"] = spec.mask_class_position;
  meta["embed"] = dims.embed;
  meta["feature"] = dims.feature;
  meta["hidden"] = dims.hidden;
  meta["prompt_len"] = dims.prompt_len;
  meta["n_classes"] = n_classes;
  ckpt.meta_json = meta.dump();
  for (const auto& [name, t] : gen.named_parameters()) ckpt.add(name, t);
  ckpt.save(path);
}

std::unique_ptr<NoiseGenerator> load_generator(const std::string& path) {
  Checkpoint ckpt = Checkpoint::load(path);
  nlohmann::json meta = nlohmann::json::parse(ckpt.meta_json);
  if (meta.value("kind", "") != "generator") {
    throw std::runtime_error("load_generator: not a generator checkpoint");
  }
  NoiseSpec spec;
  spec.site = site_from_string(meta.at("site").get<std::string>());
  spec.fusion = fusion_from_string(meta.at("fusion").get<std::string>());
  spec.arch = arch_from_string(meta.at("arch").get<std::string>());
  spec.m = meta.at("m").get<int>();
  spec.k = meta.at("k").get<int>();
  spec.mode = mode_from_string(meta.at("mode").get<std::string>());
  spec.cnn_blocks = meta.at("cnn_blocks").get<int>();
  spec.cnn_channels = meta.at("cnn_channels").get<int>();
  spec.mlp_hidden = meta.at("mlp_hidden").get<int>();
  spec.mask_class_position = meta.at("mask_class_position").get<bool>();
  ModelDims dims;
  dims.embed = meta.at("embed").get<std::size_t>();
  dims.feature = meta.at("feature").get<std::size_t>();
  dims.hidden = meta.at("hidden").get<std::size_t>();
  dims.prompt_len = meta.at("prompt_len").get<std::size_t>();
  const auto n_classes = meta.at("n_classes").get<std::size_t>();

  auto gen = make_generator(spec, dims, n_classes, 0);
  for (auto& [name, t] : gen->named_parameters()) {
    Tensor target = t;
    ckpt.load_into(name, target);
  }
  return gen;
}

// ---- sampling and injection ---------------------------------------------------

NoiseSample sample_noise(const GaussianParams& params, RandomStream& rng) {
  Tensor aux(params.mu.shape(), rng.normal_vec(params.mu.size()));
  return {aux, add(mul(params.sigma, aux), params.mu)};
}

Tensor inject(const Tensor& site_value, const Tensor& noise, Fusion fusion) {
  if (site_value.shape() != noise.shape()) {
    throw std::invalid_argument("inject: noise shape must equal site shape");
  }
  return fusion == Fusion::kAdditive ? add(site_value, noise) : mul(site_value, noise);
}

// ---- noisy forward pass --------------------------------------------------------

ForwardCache build_forward_cache(const ClipModel& model, const Tensor& image,
                                 const PromptSet& prompts) {
  ForwardCache cache;
  auto feats = model.visual.encode(image);
  cache.spatial = feats.spatial;
  cache.global = feats.global;
  std::vector<Tensor> rows;
  rows.reserve(prompts.num_classes());
  for (const auto& ids : prompts.tokens) {
    cache.embedded_prompts.push_back(model.text.embed(ids));
    rows.push_back(model.text.encode_embedded(cache.embedded_prompts.back()));
  }
  cache.text_features = stack_rows(rows);
  return cache;
}

namespace {

Tensor draw(const GaussianParams& params, RandomStream& stream, InferenceMode mode) {
  if (mode == InferenceMode::kMean) return params.mu;
  return sample_noise(params, stream).value;
}

constexpr std::uint64_t site_tag(Site s) {
  switch (s) {
    case Site::kRawImage: return 0x7261u;
    case Site::kVisualFeature: return 0x7669u;
    case Site::kPromptEmbedding: return 0x7065u;
    case Site::kTextFeature: return 0x7466u;
  }
  return 0;
}

}  // namespace

Tensor forward_with_noise(const ClipModel& model, const std::vector<NoiseGenerator*>& generators,
                          const Tensor& image, const PromptSet& prompts, RandomStream& rng,
                          InferenceMode mode, const ForwardCache* cache) {
  std::set<Site> sites;
  for (const auto* gen : generators) {
    if (!sites.insert(gen->spec().site).second) {
      throw std::invalid_argument("forward_with_noise: two generators on site " +
                                  to_string(gen->spec().site));
    }
  }

  ForwardCache local;
  if (cache == nullptr) {
    local = build_forward_cache(model, image, prompts);
    cache = &local;
  }

  // one substream per site, all derived from a single per-call draw
  const RandomStream base(rng.next_u64());

  NoiseContext ctx;
  ctx.image = &image;
  ctx.spatial = &cache->spatial;
  ctx.global_feature = &cache->global;
  ctx.text_features = &cache->text_features;

  auto find = [&](Site s) -> NoiseGenerator* {
    for (auto* gen : generators) {
      if (gen->spec().site == s) return gen;
    }
    return nullptr;
  };

  // visual path
  Tensor global = cache->global;
  if (auto* gen = find(Site::kRawImage)) {
    RandomStream stream = base.derive(site_tag(Site::kRawImage));
    Tensor eps = draw(gen->estimate(ctx), stream, mode);
    // pixels are deliberately left unclamped; the frozen encoder tolerates
    // excursions and clamping would bias the mu gradients
    Tensor noisy_image = inject(image, eps, gen->spec().fusion);
    global = model.visual.global_from_spatial(model.visual.spatial(noisy_image));
  }
  if (auto* gen = find(Site::kVisualFeature)) {
    RandomStream stream = base.derive(site_tag(Site::kVisualFeature));
    Tensor eps = draw(gen->estimate(ctx), stream, mode);
    global = l2_normalize(inject(global, eps, gen->spec().fusion));
  }

  // text path
  Tensor text = cache->text_features;
  if (auto* gen = find(Site::kPromptEmbedding)) {
    RandomStream stream = base.derive(site_tag(Site::kPromptEmbedding));
    Tensor eps = draw(gen->estimate(ctx), stream, mode);
    std::vector<Tensor> rows;
    rows.reserve(prompts.num_classes());
    for (std::size_t i = 0; i < prompts.num_classes(); ++i) {
      Tensor noise = eps;
      if (gen->spec().mask_class_position) {
        Tensor mask = Tensor::full(eps.shape(), 1.0);
        const std::size_t e = eps.dim(1);
        for (std::size_t j = 0; j < e; ++j) mask.set_at(prompts.class_positions[i] * e + j, 0.0);
        noise = mul(eps, mask);
      }
      Tensor noisy = inject(cache->embedded_prompts[i], noise, gen->spec().fusion);
      rows.push_back(model.text.encode_embedded(noisy));
    }
    text = stack_rows(rows);
  }
  if (auto* gen = find(Site::kTextFeature)) {
    RandomStream stream = base.derive(site_tag(Site::kTextFeature));
    Tensor eps = draw(gen->estimate(ctx), stream, mode);
    text = normalize_rows(inject(text, eps, gen->spec().fusion));
  }

  return classify_from_features(global, text, model.tau);
}

}  // namespace pini
