#pragma once

#include <string>
#include <vector>

#include "pini/datagen.hpp"
#include "pini/encoders.hpp"
#include "pini/noise.hpp"

namespace pini {

struct LossConfig {
  int m = 1;  // noise draws per image per step
  int batch = 32;
  double label_smoothing = 0.0;
};

// Entropies in nats; mi is kept even when negative (diagnostic, not clipped).
struct EntropyReport {
  double h_t = 0.0;
  double h_t_given_e = 0.0;
  double mi = 0.0;
  int k = 0;
  int n = 0;
  double se_h_t = 0.0;
  double se_h_cond = 0.0;
  double se_mi = 0.0;  // paired per-image estimate, not serialized
};

std::string report_to_json(const EntropyReport& report);

// (1/(n*m)) sum_i sum_j -log q(y_i | x_i, G(eps_ij, x_i, P), P), differentiable
// w.r.t. generator parameters only.
Tensor pini_loss(const ClipModel& model, const std::vector<NoiseGenerator*>& generators,
                 const std::vector<Example>& batch, const PromptSet& prompts,
                 const LossConfig& cfg, RandomStream& rng);

// Plug-in estimates using the model's own output distribution.
double estimate_task_entropy(const ClipModel& model, const Dataset& dataset,
                             const PromptSet& prompts);
double estimate_conditional_entropy(const ClipModel& model,
                                    const std::vector<NoiseGenerator*>& generators,
                                    const Dataset& dataset, const PromptSet& prompts, int k,
                                    RandomStream& rng);
EntropyReport mutual_information(const ClipModel& model,
                                 const std::vector<NoiseGenerator*>& generators,
                                 const Dataset& dataset, const PromptSet& prompts, int k,
                                 RandomStream& rng);

}  // namespace pini
