#include "pini/datagen.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

#include "pini/encoders.hpp"
#include "pini/vocab.hpp"

#include "json.hpp"

namespace pini {

namespace {

double quantize_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

double l2_distance(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a.at(i) - b.at(i);
    s += d * d;
  }
  return std::sqrt(s);
}

Tensor render_prototype(int class_id, RandomStream& rng) {
  const double angle = 3.14159265358979 * static_cast<double>(class_id) / 10.0;
  const double freq = 2.0 + static_cast<double>(class_id % 3);
  const double phase = rng.uniform(0.0, 6.28318530717959);
  const double cx = rng.uniform(3.0, 12.0);
  const double cy = rng.uniform(3.0, 12.0);
  const double ca = std::cos(angle), sa = std::sin(angle);

  std::vector<double> v(kImageSide * kImageSide);
  for (std::size_t y = 0; y < kImageSide; ++y) {
    for (std::size_t x = 0; x < kImageSide; ++x) {
      const double u = ca * static_cast<double>(x) + sa * static_cast<double>(y);
      const double grating = std::sin(6.28318530717959 * freq * u / 16.0 + phase);
      const double dx = static_cast<double>(x) - cx;
      const double dy = static_cast<double>(y) - cy;
      const double blob = std::exp(-(dx * dx + dy * dy) / (2.0 * 2.5 * 2.5));
      double p = 0.45 + 0.28 * grating + 0.35 * blob;
      p = std::min(1.0, std::max(0.0, p));
      v[y * kImageSide + x] = quantize_f32(p);
    }
  }
  return Tensor({kImageSide, kImageSide}, std::move(v));
}

}  // namespace

std::vector<ClassPrototype> make_prototypes(std::uint64_t corpus_seed) {
  const auto& names = Vocabulary::standard().class_names();
  for (std::uint64_t salt = 0; salt < 64; ++salt) {
    std::vector<ClassPrototype> protos;
    protos.reserve(kNumClasses);
    RandomStream rng = RandomStream(corpus_seed).derive(salt);
    for (int c = 0; c < kNumClasses; ++c) {
      RandomStream class_rng = rng.derive(static_cast<std::uint64_t>(c));
      protos.push_back({c, names[static_cast<std::size_t>(c)], render_prototype(c, class_rng)});
    }
    bool ok = true;
    for (std::size_t i = 0; i < protos.size() && ok; ++i) {
      for (std::size_t j = i + 1; j < protos.size(); ++j) {
        if (l2_distance(protos[i].image, protos[j].image) < 0.3) {
          ok = false;
          break;
        }
      }
    }
    if (ok) return protos;
  }
  throw std::runtime_error("make_prototypes: could not satisfy the margin");
}

BiasTransform BiasTransform::identity() { return BiasTransform{}; }

BiasTransform BiasTransform::default_downstream() {
  BiasTransform b;
  b.scale = 0.6;
  b.offset = 0.05;
  b.patch_row = 0;
  b.patch_col = 0;
  b.patch_size = 3;
  b.patch_value = 0.9;
  b.pixel_noise = 0.05;
  return b;
}

Tensor apply_bias(const Tensor& prototype, const BiasTransform& bias, RandomStream& rng) {
  std::vector<double> v(prototype.values());
  const int side = static_cast<int>(kImageSide);
  for (int r = 0; r < bias.patch_size; ++r) {
    for (int c = 0; c < bias.patch_size; ++c) {
      const int y = bias.patch_row + r;
      const int x = bias.patch_col + c;
      if (y >= 0 && y < side && x >= 0 && x < side) {
        v[static_cast<std::size_t>(y) * kImageSide + static_cast<std::size_t>(x)] +=
            bias.patch_value;
      }
    }
  }
  for (auto& p : v) {
    p = bias.scale * (p + bias.pixel_noise * rng.normal()) + bias.offset;
    p = quantize_f32(std::min(1.0, std::max(0.0, p)));
  }
  return Tensor({kImageSide, kImageSide}, std::move(v));
}

namespace {

Dataset generate(const std::vector<ClassPrototype>& protos, const BiasTransform& bias,
                 int per_class, std::uint64_t seed, const std::string& split) {
  Dataset ds;
  ds.bias = bias;
  ds.seed = seed;
  ds.split = split;
  ds.per_class_counts.assign(kNumClasses, 0);
  RandomStream rng(seed);
  for (int c = 0; c < kNumClasses; ++c) {
    RandomStream class_rng = rng.derive(static_cast<std::uint64_t>(c));
    for (int i = 0; i < per_class; ++i) {
      ds.items.push_back({apply_bias(protos[static_cast<std::size_t>(c)].image, bias, class_rng), c});
      ds.per_class_counts[static_cast<std::size_t>(c)]++;
    }
  }
  return ds;
}

}  // namespace

Dataset make_pretrain_corpus(int n_per_class, std::uint64_t seed, std::uint64_t world_seed) {
  if (n_per_class < 1) throw std::invalid_argument("make_pretrain_corpus: n_per_class must be >= 1");
  const auto protos = make_prototypes(world_seed);
  return generate(protos, BiasTransform::identity(), n_per_class, seed, "pretrain");
}

FewShotTask make_downstream(const BiasTransform& bias, int shots, int test_per_class,
                            std::uint64_t seed, std::uint64_t world_seed) {
  if (shots != 1 && shots != 2 && shots != 4 && shots != 8 && shots != 16) {
    throw std::invalid_argument("make_downstream: shots must be one of {1,2,4,8,16}");
  }
  const auto protos = make_prototypes(world_seed);
  RandomStream rng(seed);
  FewShotTask task;
  task.shots = shots;
  task.prompt_template = kDefaultTemplate;
  // disjoint train/test via seed-derived substreams
  task.train = generate(protos, bias, shots, rng.derive(0x7472ull).next_u64(), "train");
  task.test = generate(protos, bias, test_per_class, rng.derive(0x7465ull).next_u64(), "test");
  return task;
}

std::vector<FewShotTask> make_shift_suite(std::uint64_t seed, std::uint64_t world_seed) {
  RandomStream rng(seed);
  std::vector<FewShotTask> suite;
  suite.push_back(make_downstream(BiasTransform::default_downstream(), 16, 50,
                                  rng.derive(0).next_u64(), world_seed));

  BiasTransform darker = BiasTransform::default_downstream();
  darker.scale = 0.42;
  BiasTransform brighter = BiasTransform::default_downstream();
  brighter.scale = 0.9;
  brighter.offset = 0.42;
  BiasTransform larger_patch = BiasTransform::default_downstream();
  larger_patch.patch_size = 6;
  larger_patch.patch_value = 0.95;
  BiasTransform noisier = BiasTransform::default_downstream();
  noisier.pixel_noise = 0.2;

  const BiasTransform variants[] = {darker, brighter, larger_patch, noisier};
  for (std::size_t i = 0; i < 4; ++i) {
    suite.push_back(make_downstream(variants[i], 16, 50, rng.derive(i + 1).next_u64(), world_seed));
  }
  return suite;
}

// ---- persistence -------------------------------------------------------------

namespace {

nlohmann::json bias_to_json(const BiasTransform& b) {
  return nlohmann::json{{"scale", b.scale},
                        {"offset", b.offset},
                        {"patch_row", b.patch_row},
                        {"patch_col", b.patch_col},
                        {"patch_size", b.patch_size},
                        {"patch_value", b.patch_value},
                        {"pixel_noise", b.pixel_noise}};
}

BiasTransform bias_from_json(const nlohmann::json& j) {
  BiasTransform b;
  b.scale = j.at("scale").get<double>();
  b.offset = j.at("offset").get<double>();
  b.patch_row = j.at("patch_row").get<int>();
  b.patch_col = j.at("patch_col").get<int>();
  b.patch_size = j.at("patch_size").get<int>();
  b.patch_value = j.at("patch_value").get<double>();
  b.pixel_noise = j.at("pixel_noise").get<double>();
  return b;
}

}  // namespace

void save_dataset(const Dataset& ds, const std::string& path_prefix) {
  const auto& names = Vocabulary::standard().class_names();
  std::ofstream manifest(path_prefix + ".jsonl");
  if (!manifest) throw std::runtime_error("save_dataset: cannot write manifest");
  nlohmann::json header{{"version", 1},
                        {"count", ds.items.size()},
                        {"split", ds.split},
                        {"seed", ds.seed},
                        {"bias", bias_to_json(ds.bias)}};
  manifest << header.dump() << "\n";
  for (const auto& item : ds.items) {
    nlohmann::json line{{"label", item.label},
                        {"class", names[static_cast<std::size_t>(item.label)]}};
    manifest << line.dump() << "\n";
  }

  std::ofstream pixels(path_prefix + ".f32", std::ios::binary);
  if (!pixels) throw std::runtime_error("save_dataset: cannot write pixel block");
  for (const auto& item : ds.items) {
    for (std::size_t i = 0; i < item.image.size(); ++i) {
      const float f = static_cast<float>(item.image.at(i));
      pixels.write(reinterpret_cast<const char*>(&f), sizeof(float));
    }
  }
}

Dataset load_dataset(const std::string& path_prefix) {
  std::ifstream manifest(path_prefix + ".jsonl");
  if (!manifest) throw std::runtime_error("load_dataset: cannot open manifest");
  std::string line;
  if (!std::getline(manifest, line)) throw std::runtime_error("load_dataset: empty manifest");
  nlohmann::json header = nlohmann::json::parse(line);
  if (header.at("version").get<int>() != 1) {
    throw std::runtime_error("load_dataset: unsupported manifest version");
  }

  Dataset ds;
  ds.split = header.at("split").get<std::string>();
  ds.seed = header.at("seed").get<std::uint64_t>();
  ds.bias = bias_from_json(header.at("bias"));
  ds.per_class_counts.assign(kNumClasses, 0);

  std::vector<int> labels;
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line);
    labels.push_back(j.at("label").get<int>());
  }
  if (labels.size() != header.at("count").get<std::size_t>()) {
    throw std::runtime_error("load_dataset: manifest count mismatch");
  }

  std::ifstream pixels(path_prefix + ".f32", std::ios::binary);
  if (!pixels) throw std::runtime_error("load_dataset: cannot open pixel block");
  for (int label : labels) {
    std::vector<double> v(kImageSide * kImageSide);
    for (auto& p : v) {
      float f = 0.0f;
      pixels.read(reinterpret_cast<char*>(&f), sizeof(float));
      if (!pixels) throw std::runtime_error("load_dataset: truncated pixel block");
      p = static_cast<double>(f);
    }
    if (label < 0 || label >= kNumClasses) throw std::runtime_error("load_dataset: bad label");
    ds.items.push_back({Tensor({kImageSide, kImageSide}, std::move(v)), label});
    ds.per_class_counts[static_cast<std::size_t>(label)]++;
  }
  return ds;
}

}  // namespace pini
