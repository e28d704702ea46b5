#pragma once

#include <string>
#include <vector>

#include "cfl/arch.hpp"
#include "cfl/param_set.hpp"

namespace cfl {

// A submodel update expanded to parent shape; entries at positions outside
// the source arch are exactly zero.
struct AlignedDelta {
  ParamSet delta;
  ArchDescriptor source_arch;
  long long data_size = 0;  // n_k
  int worker_id = -1;       // canonical summation key; -1 keeps list order
};

// Layer ids of a submodel delta partitioned into the parent's residual
// groups, within-group order preserved. The first conv layer of the network
// sits outside the grouped expansion path and is tracked separately.
struct GroupedLayers {
  std::string stem;                             // "g0.l0"
  std::vector<std::vector<std::string>> groups;  // [g] -> layer ids, sizes == arch.depth
};

GroupedLayers group_layers(const SupernetConfig& cfg, const ParamSet& delta, const ArchDescriptor& arch);

// Scatter each layer's tensors into parent-width zeros: output channel j
// lands at parent index channels[g][d][j], input channels follow the previous
// layer's selection. Values are preserved bit-exactly.
ParamSet expand_width(const SupernetConfig& cfg, const ParamSet& delta, const ArchDescriptor& arch);

// Pad each group's tail with all-zero layers of full parent width until it
// has depth_max layers. Width expansion must already be applied.
ParamSet expand_depth(const SupernetConfig& cfg, const ParamSet& expanded, const ArchDescriptor& arch);

// group + width + depth expansion in one step.
AlignedDelta align_delta(const SupernetConfig& cfg, const ParamSet& delta, const ArchDescriptor& arch,
                         long long data_size);

// Weighted sum with weights n_k / sum(n_k), accumulated in ascending worker
// order so the result is independent of the caller's ordering. The coverage
// normalized variant rescales each coordinate by the summed weight of the
// workers whose arch actually covered it.
ParamSet aggregate(const std::vector<AlignedDelta>& deltas, bool coverage_normalized = false);

// omega_{t+1} = omega_t + delta_t (deltas are new-minus-old local updates).
ParamSet apply_global_update(const ParamSet& parent, const ParamSet& delta);

// Header line "arch=<one-line arch> n=<n_k>" followed by the binary ParamSet.
void save_aligned_delta(const AlignedDelta& delta, const std::string& path);
AlignedDelta load_aligned_delta(const std::string& path);

}  // namespace cfl
