#pragma once

#include <cstdint>
#include <vector>

#include "pini/datagen.hpp"
#include "pini/encoders.hpp"
#include "pini/noise.hpp"
#include "pini/objective.hpp"

namespace pini {

struct TrainConfig {
  int batch = 32;
  int epochs = 50;
  double lr = 0.002;
  double warmup_lr = 1e-5;
  int warmup_epochs = 1;
  std::uint64_t seed = 0;
};

// warm-up at warmup_lr for the first epoch, then cosine decay from lr
double learning_rate_at(const TrainConfig& cfg, int epoch);

struct TrainHistory {
  std::vector<double> loss;           // per epoch
  std::vector<double> eval_accuracy;  // per epoch, on the train split
  double wall_seconds = 0.0;
};

struct Metrics {
  double accuracy = 0.0;
  std::vector<double> per_class_accuracy;
  double mean_nll = 0.0;
};

// In-batch symmetric contrastive pretraining over distinct-class batches;
// freezes the model and records its weight digest on success.
TrainHistory pretrain(ClipModel& model, const Dataset& corpus, const TrainConfig& cfg);

// Trains only the generator parameters against the noisy cross-entropy
// objective; the encoder digest is checked before returning.
TrainHistory finetune_pini(const ClipModel& model, const std::vector<NoiseGenerator*>& generators,
                           const FewShotTask& task, const TrainConfig& cfg,
                           const LossConfig& loss_cfg);

double baseline_linear_probe(const ClipModel& model, const FewShotTask& task);
double baseline_prompt_tune(const ClipModel& model, const FewShotTask& task,
                            const TrainConfig& cfg);
double baseline_adapter(const ClipModel& model, const FewShotTask& task, const TrainConfig& cfg,
                        double blend_ratio = 0.2);

// Zero-shot when generators is empty; otherwise averages k sampled probability
// vectors (or runs one mean-mode pass). Argmax ties break to the lowest index.
Metrics evaluate(const ClipModel& model, const std::vector<NoiseGenerator*>& generators,
                 const FewShotTask& task, int k, InferenceMode mode, RandomStream& rng);
Metrics evaluate_dataset(const ClipModel& model, const std::vector<NoiseGenerator*>& generators,
                         const Dataset& dataset, const PromptSet& prompts, int k,
                         InferenceMode mode, RandomStream& rng);

std::size_t argmax_lowest(const std::vector<double>& values);

}  // namespace pini
