#pragma once

#include <optional>
#include <vector>

#include "cfl/arch.hpp"
#include "cfl/autograd.hpp"
#include "cfl/param_set.hpp"
#include "cfl/rng.hpp"

namespace cfl {

// Parameter ids: "g<g>.l<d>.w" / "g<g>.l<d>.b" for group layers, "head.w" /
// "head.b" for the shared classifier. Extracted submodels keep the same ids
// with sliced shapes, so alignment can map them back by name.

ParamSet init_parent(const SupernetConfig& cfg, std::uint64_t seed);

// Exactly the parameter slices addressed by arch: selected output channels per
// active layer, input channels matched to the previous layer's selection. The
// classifier head is included whole. The parent is untouched.
ParamSet extract_submodel(const SupernetConfig& cfg, const ParamSet& parent, const ArchDescriptor& arch);

// Per-layer skip agents: affine map from the pooled layer input (scattered to
// parent width) to execute/skip logits, plus an EMA reward baseline.
struct GatePolicy {
  ParamSet params;  // "gate.g<g>.l<d>.w" [2,W_g], "gate.g<g>.l<d>.b" [2]
  double baseline = 0.0;
  double baseline_decay = 0.9;
};

GatePolicy init_gates(const SupernetConfig& cfg);

enum class GateMode { AllOn, Greedy, Sample };

struct ForwardResult {
  Tensor logits;               // [N, classes]
  std::vector<bool> executed;  // one entry per conv layer of the submodel; mandatory layers true
};

// Forward through a submodel whose params match `arch`. Skipped layers pass
// their input through the identity shortcut. One gate decision per call,
// taken from the batch-mean pooled feature; per-sample behaviour comes from
// batch-of-one calls. `rng` is only consulted in Sample mode.
ForwardResult gated_forward(const SupernetConfig& cfg, const ParamSet& params, const ArchDescriptor& arch,
                            const GatePolicy& gates, const Tensor& x, GateMode mode, Rng* rng = nullptr);

// Ungated forward; identical to gated_forward in AllOn mode.
Tensor forward(const SupernetConfig& cfg, const ParamSet& params, const ArchDescriptor& arch, const Tensor& x);

enum class GatePhase { Warmup, Reinforce };

struct GateStats {
  double loss = 0.0;         // warmup task loss
  double mean_reward = 0.0;  // reinforce
  double mean_p_exec = 0.0;
  double comp = 0.0;  // executed-layer fraction over the batch
  double baseline = 0.0;
};

// Hybrid gate training. Warmup differentiates the task loss through soft
// (probability-weighted) execution and steps only the gate parameters.
// Reinforce runs one sampled episode per batch row and applies the
// baseline-subtracted score-function estimator with reward
// R = 1[correct] + alpha * skipped/skippable.
GateStats hybrid_gate_update(const SupernetConfig& cfg, const ParamSet& model, const ArchDescriptor& arch,
                             GatePolicy& gates, const Tensor& x, const std::vector<int>& labels,
                             GatePhase phase, double alpha, double gate_lr, Rng& rng);

// Mean over per-sample masks of executed layers / total layers.
double computation_percentage(const std::vector<std::vector<bool>>& executed_masks);

// One supervised SGD step on `params` (cross-entropy over the batch, all
// layers executed). Returns the batch loss. When `gates` is non-null the
// forward is soft-gated and gate parameters receive a step of `gate_lr` too.
double supervised_step(const SupernetConfig& cfg, ParamSet& params, const ArchDescriptor& arch, const Tensor& x,
                       const std::vector<int>& labels, double lr, GatePolicy* gates = nullptr,
                       double gate_lr = 0.0);

std::vector<int> predict_labels(const SupernetConfig& cfg, const ParamSet& params, const ArchDescriptor& arch,
                                const GatePolicy& gates, GateMode mode, const Tensor& x, Rng* rng = nullptr);

}  // namespace cfl
