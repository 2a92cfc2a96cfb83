#include "pini/objective.hpp"

#include <cmath>
#include <stdexcept>

#include "json.hpp"

namespace pini {

namespace {

double plugin_entropy(const Tensor& probs) {
  double h = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const double p = probs.at(i);
    if (p > 0.0) h -= p * std::log(p);
  }
  return h;
}

double sd_of(const std::vector<double>& xs, double mean) {
  if (xs.size() < 2) return 0.0;
  double s = 0.0;
  for (double x : xs) s += (x - mean) * (x - mean);
  return std::sqrt(s / static_cast<double>(xs.size() - 1));
}

}  // namespace

std::string report_to_json(const EntropyReport& report) {
  nlohmann::json j{{"h_t", report.h_t},         {"h_t_given_e", report.h_t_given_e},
                   {"mi", report.mi},           {"k", report.k},
                   {"n", report.n},             {"se_h_t", report.se_h_t},
                   {"se_h_cond", report.se_h_cond}};
  return j.dump(2);
}

Tensor pini_loss(const ClipModel& model, const std::vector<NoiseGenerator*>& generators,
                 const std::vector<Example>& batch, const PromptSet& prompts,
                 const LossConfig& cfg, RandomStream& rng) {
  if (batch.empty()) throw std::invalid_argument("pini_loss: empty batch");
  if (cfg.m < 1) throw std::invalid_argument("pini_loss: m must be >= 1");
  const int n_classes = static_cast<int>(prompts.num_classes());

  Tensor total = Tensor::scalar(0.0);
  for (const auto& example : batch) {
    if (example.label < 0 || example.label >= n_classes) {
      throw std::invalid_argument("pini_loss: label out of range");
    }
    ForwardCache cache = build_forward_cache(model, example.image, prompts);
    for (int j = 0; j < cfg.m; ++j) {
      Tensor q = forward_with_noise(model, generators, example.image, prompts, rng,
                                    InferenceMode::kSampled, &cache);
      Tensor nll = neg(log(pick(q, static_cast<std::size_t>(example.label))));
      if (cfg.label_smoothing > 0.0) {
        Tensor uniform_nll = mean(neg(log(q)));
        nll = add(mul(nll, 1.0 - cfg.label_smoothing), mul(uniform_nll, cfg.label_smoothing));
      }
      total = add(total, nll);
    }
  }
  return mul(total, 1.0 / (static_cast<double>(batch.size()) * static_cast<double>(cfg.m)));
}

double estimate_task_entropy(const ClipModel& model, const Dataset& dataset,
                             const PromptSet& prompts) {
  if (dataset.items.empty()) throw std::invalid_argument("estimate_task_entropy: empty dataset");
  double sum_h = 0.0;
  for (const auto& item : dataset.items) {
    sum_h += plugin_entropy(classify(model, item.image, prompts));
  }
  return sum_h / static_cast<double>(dataset.items.size());
}

double estimate_conditional_entropy(const ClipModel& model,
                                    const std::vector<NoiseGenerator*>& generators,
                                    const Dataset& dataset, const PromptSet& prompts, int k,
                                    RandomStream& rng) {
  if (k < 1) throw std::invalid_argument("estimate_conditional_entropy: k must be >= 1");
  double sum_h = 0.0;
  for (const auto& item : dataset.items) {
    ForwardCache cache = build_forward_cache(model, item.image, prompts);
    for (int s = 0; s < k; ++s) {
      Tensor q = forward_with_noise(model, generators, item.image, prompts, rng,
                                    InferenceMode::kSampled, &cache);
      sum_h += plugin_entropy(q);
    }
  }
  return sum_h / (static_cast<double>(dataset.items.size()) * static_cast<double>(k));
}

EntropyReport mutual_information(const ClipModel& model,
                                 const std::vector<NoiseGenerator*>& generators,
                                 const Dataset& dataset, const PromptSet& prompts, int k,
                                 RandomStream& rng) {
  if (dataset.items.empty()) throw std::invalid_argument("mutual_information: empty dataset");
  if (k < 1) throw std::invalid_argument("mutual_information: k must be >= 1");

  const auto n = dataset.items.size();
  std::vector<double> task_h(n), cond_h(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& item = dataset.items[i];
    ForwardCache cache = build_forward_cache(model, item.image, prompts);
    task_h[i] = plugin_entropy(classify(model, item.image, prompts));
    double acc = 0.0;
    for (int s = 0; s < k; ++s) {
      Tensor q = forward_with_noise(model, generators, item.image, prompts, rng,
                                    InferenceMode::kSampled, &cache);
      acc += plugin_entropy(q);
    }
    cond_h[i] = acc / static_cast<double>(k);
  }

  EntropyReport report;
  report.k = k;
  report.n = static_cast<int>(n);
  for (std::size_t i = 0; i < n; ++i) {
    report.h_t += task_h[i];
    report.h_t_given_e += cond_h[i];
  }
  report.h_t /= static_cast<double>(n);
  report.h_t_given_e /= static_cast<double>(n);
  report.mi = report.h_t - report.h_t_given_e;

  const double sqrt_n = std::sqrt(static_cast<double>(n));
  report.se_h_t = sd_of(task_h, report.h_t) / sqrt_n;
  report.se_h_cond = sd_of(cond_h, report.h_t_given_e) / sqrt_n;
  std::vector<double> diff(n);
  for (std::size_t i = 0; i < n; ++i) diff[i] = task_h[i] - cond_h[i];
  report.se_mi = sd_of(diff, report.mi) / sqrt_n;
  return report;
}

}  // namespace pini
