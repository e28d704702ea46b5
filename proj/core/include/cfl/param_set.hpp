#pragma once

#include <iosfwd>
#include <map>
#include <string>

#include "cfl/tensor.hpp"

namespace cfl {

// Named parameter collection. std::map keeps iteration deterministic
// (lexicographic by id), which aggregation and serialization rely on.
using ParamSet = std::map<std::string, Tensor>;

// params - lr * grads. Key sets and shapes must match exactly.
ParamSet sgd_step(const ParamSet& params, const ParamSet& grads, double lr);

// In-place variant used by the training loops.
void sgd_step_inplace(ParamSet& params, const ParamSet& grads, double lr);

std::size_t total_parameters(const ParamSet& params);

// Max |a-b| over all entries; throws StructuralError on key/shape mismatch.
double max_abs_diff(const ParamSet& a, const ParamSet& b);

// Flat binary format: magic "CFLP", u32 version, u64 entry count, then per
// entry: u32 id length, id bytes, u32 rank, u64 dims, little-endian f64 data.
// Round-trips bit-exactly.
void save_param_set(const ParamSet& params, const std::string& path);
ParamSet load_param_set(const std::string& path);
void write_param_set(const ParamSet& params, std::ostream& os, const std::string& context);
ParamSet read_param_set(std::istream& is, const std::string& context);

}  // namespace cfl
