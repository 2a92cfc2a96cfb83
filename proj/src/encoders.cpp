#include "pini/encoders.hpp"

#include <cmath>
#include <stdexcept>

#include "pini/checkpoint.hpp"

#include "json.hpp"

namespace pini {

namespace {

Tensor glorot(std::vector<std::size_t> shape, RandomStream& rng) {
  std::size_t fan_in = shape[0], fan_out = shape.size() > 1 ? shape[1] : shape[0];
  const double scale = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(-scale, scale);
  return Tensor(std::move(shape), std::move(v), true);
}

}  // namespace

// ---- TextEncoder -------------------------------------------------------------

TextEncoder TextEncoder::init(const ModelDims& dims, RandomStream& rng) {
  TextEncoder enc;
  enc.embedding = glorot({Vocabulary::kSize, dims.embed}, rng);
  enc.w1 = glorot({dims.embed, dims.hidden}, rng);
  enc.b1 = Tensor::zeros({dims.hidden}, true);
  enc.w2 = glorot({dims.hidden, dims.feature}, rng);
  enc.b2 = Tensor::zeros({dims.feature}, true);
  return enc;
}

std::vector<Tensor> TextEncoder::parameters() const { return {embedding, w1, b1, w2, b2}; }

Tensor TextEncoder::embed(const std::vector<int>& token_ids) const {
  const std::size_t e = embedding.dim(1);
  std::vector<std::size_t> idx;
  idx.reserve(token_ids.size() * e);
  for (int id : token_ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= embedding.dim(0)) {
      throw std::invalid_argument("TextEncoder::embed: token id out of range");
    }
    for (std::size_t j = 0; j < e; ++j) idx.push_back(static_cast<std::size_t>(id) * e + j);
  }
  return gather_flat(embedding, idx, {token_ids.size(), e});
}

Tensor TextEncoder::encode_embedded(const Tensor& embedded) const {
  Tensor pooled = mean_rows(embedded);
  Tensor h = tanh(affine_vec(pooled, w1, b1));
  return l2_normalize(affine_vec(h, w2, b2));
}

Tensor TextEncoder::encode(const std::vector<int>& token_ids) const {
  return encode_embedded(embed(token_ids));
}

// ---- VisualEncoder -----------------------------------------------------------

const std::vector<std::size_t>& patch_index_map() {
  static const std::vector<std::size_t> map = [] {
    std::vector<std::size_t> m(kImageSide * kImageSide);
    std::size_t out = 0;
    for (std::size_t pr = 0; pr < kImageSide / kPatchSide; ++pr) {
      for (std::size_t pc = 0; pc < kImageSide / kPatchSide; ++pc) {
        for (std::size_t r = 0; r < kPatchSide; ++r) {
          for (std::size_t c = 0; c < kPatchSide; ++c) {
            m[out++] = (pr * kPatchSide + r) * kImageSide + (pc * kPatchSide + c);
          }
        }
      }
    }
    return m;
  }();
  return map;
}

const std::vector<std::size_t>& patch_inverse_index_map() {
  static const std::vector<std::size_t> inv = [] {
    const auto& fwd = patch_index_map();
    std::vector<std::size_t> m(fwd.size());
    for (std::size_t i = 0; i < fwd.size(); ++i) m[fwd[i]] = i;
    return m;
  }();
  return inv;
}

VisualEncoder VisualEncoder::init(const ModelDims& dims, RandomStream& rng) {
  VisualEncoder enc;
  enc.patch_w = glorot({kPatchPixels, dims.feature}, rng);
  enc.patch_b = Tensor::zeros({dims.feature}, true);
  enc.pool_w = glorot({dims.feature, dims.feature}, rng);
  enc.pool_b = Tensor::zeros({dims.feature}, true);
  return enc;
}

std::vector<Tensor> VisualEncoder::parameters() const {
  return {patch_w, patch_b, pool_w, pool_b};
}

Tensor VisualEncoder::spatial(const Tensor& image) const {
  if (image.shape() != std::vector<std::size_t>{kImageSide, kImageSide}) {
    throw std::invalid_argument("VisualEncoder: image must be 16x16");
  }
  Tensor patches = gather_flat(image, patch_index_map(), {kPatchCount, kPatchPixels});
  return tanh(affine_rows(patches, patch_w, patch_b));
}

Tensor VisualEncoder::global_from_spatial(const Tensor& spatial_map) const {
  Tensor pooled = mean_rows(spatial_map);
  return l2_normalize(tanh(affine_vec(pooled, pool_w, pool_b)));
}

VisualEncoder::Features VisualEncoder::encode(const Tensor& image) const {
  Features f;
  f.spatial = spatial(image);
  f.global = global_from_spatial(f.spatial);
  return f;
}

// ---- ClipModel -----------------------------------------------------------------

ClipModel ClipModel::init(const ModelDims& dims, std::uint64_t seed) {
  ClipModel model;
  model.dims = dims;
  RandomStream rng(seed);
  RandomStream vis_rng = rng.derive(0x76697375ull);
  RandomStream txt_rng = rng.derive(0x74657874ull);
  model.visual = VisualEncoder::init(dims, vis_rng);
  model.text = TextEncoder::init(dims, txt_rng);
  return model;
}

std::vector<Tensor> ClipModel::parameters() const {
  std::vector<Tensor> params = visual.parameters();
  for (const auto& p : text.parameters()) params.push_back(p);
  return params;
}

std::uint64_t ClipModel::digest() const { return digest_tensors(parameters()); }

void ClipModel::freeze() {
  for (auto& p : parameters()) p.set_requires_grad(false);
  frozen = true;
  frozen_digest = digest();
}

void ClipModel::check_frozen_integrity() const {
  if (!frozen) return;
  if (digest() != frozen_digest) {
    throw std::logic_error("ClipModel: frozen weights were mutated");
  }
}

void ClipModel::save(const std::string& path) const {
  Checkpoint ckpt;
  nlohmann::json meta;
  meta["kind"] = "clip";
  meta["embed"] = dims.embed;
  meta["feature"] = dims.feature;
  meta["hidden"] = dims.hidden;
  meta["prompt_len"] = dims.prompt_len;
  meta["tau"] = tau;
  meta["frozen"] = frozen;
  meta["digest"] = frozen_digest;
  ckpt.meta_json = meta.dump();
  ckpt.add("visual.patch_w", visual.patch_w);
  ckpt.add("visual.patch_b", visual.patch_b);
  ckpt.add("visual.pool_w", visual.pool_w);
  ckpt.add("visual.pool_b", visual.pool_b);
  ckpt.add("text.embedding", text.embedding);
  ckpt.add("text.w1", text.w1);
  ckpt.add("text.b1", text.b1);
  ckpt.add("text.w2", text.w2);
  ckpt.add("text.b2", text.b2);
  ckpt.save(path);
}

ClipModel ClipModel::load(const std::string& path) {
  Checkpoint ckpt = Checkpoint::load(path);
  nlohmann::json meta = nlohmann::json::parse(ckpt.meta_json);
  if (meta.value("kind", "") != "clip") {
    throw std::runtime_error("ClipModel::load: not a clip checkpoint");
  }
  ModelDims dims;
  dims.embed = meta.at("embed").get<std::size_t>();
  dims.feature = meta.at("feature").get<std::size_t>();
  dims.hidden = meta.at("hidden").get<std::size_t>();
  dims.prompt_len = meta.at("prompt_len").get<std::size_t>();

  ClipModel model = ClipModel::init(dims, 0);
  model.tau = meta.at("tau").get<double>();
  ckpt.load_into("visual.patch_w", model.visual.patch_w);
  ckpt.load_into("visual.patch_b", model.visual.patch_b);
  ckpt.load_into("visual.pool_w", model.visual.pool_w);
  ckpt.load_into("visual.pool_b", model.visual.pool_b);
  ckpt.load_into("text.embedding", model.text.embedding);
  ckpt.load_into("text.w1", model.text.w1);
  ckpt.load_into("text.b1", model.text.b1);
  ckpt.load_into("text.w2", model.text.w2);
  ckpt.load_into("text.b2", model.text.b2);
  if (meta.at("frozen").get<bool>()) {
    model.freeze();
    if (model.frozen_digest != meta.at("digest").get<std::uint64_t>()) {
      throw std::runtime_error("ClipModel::load: weight digest mismatch");
    }
  }
  return model;
}

// ---- inference -------------------------------------------------------------------

Tensor encode_prompts(const ClipModel& model, const PromptSet& prompts) {
  std::vector<Tensor> rows;
  rows.reserve(prompts.num_classes());
  for (const auto& ids : prompts.tokens) rows.push_back(model.text.encode(ids));
  return stack_rows(rows);
}

VisualEncoder::Features encode_image(const ClipModel& model, const Tensor& image) {
  for (std::size_t i = 0; i < image.size(); ++i) {
    if (image.at(i) < 0.0 || image.at(i) > 1.0) {
      throw std::invalid_argument("encode_image: pixel outside [0,1]");
    }
  }
  return model.visual.encode(image);
}

Tensor classify_from_features(const Tensor& global_feature, const Tensor& text_features,
                              double tau) {
  const std::size_t n = text_features.dim(0);
  const std::size_t d = text_features.dim(1);
  Tensor sims = matmul(text_features, reshape(global_feature, {d, 1}));
  return softmax(reshape(sims, {n}), tau);
}

Tensor classify(const ClipModel& model, const Tensor& image, const PromptSet& prompts) {
  Tensor text_features = encode_prompts(model, prompts);
  Tensor v = encode_image(model, image).global;
  return classify_from_features(v, text_features, model.tau);
}

}  // namespace pini
