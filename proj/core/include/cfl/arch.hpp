#pragma once

#include <string>
#include <vector>

#include "cfl/rng.hpp"

namespace cfl {

// Elastic parent model layout: G residual groups of up to D_max conv layers.
// The first layer of each group is mandatory and performs the width change
// (and spatial downsampling for groups past the first); the remaining layers
// are width-preserving with identity shortcuts and can be skipped or thinned.
// The classifier head (global average pool + dense) is shared by every
// submodel and never sampled.
struct SupernetConfig {
  int groups = 4;
  int depth_max = 3;
  std::vector<int> widths = {16, 32, 32, 64};  // max channels per group
  int kernel = 3;
  int in_channels = 1;
  int in_h = 28;
  int in_w = 28;
  int num_classes = 10;
  std::vector<double> width_ratios = {0.25, 0.5, 0.75, 1.0};

  void validate() const;
  // Spatial dims of the feature map inside group g (after that group's
  // mandatory stride-2 layer; group 0 keeps the input resolution).
  std::pair<int, int> group_spatial(int g) const;
  int channels_for_ratio(int g, double ratio) const;
};

// A submodel's structure: active depth per group plus the parent channel
// indices each active layer keeps.
struct ArchDescriptor {
  std::vector<int> depth;                              // per group, 1..depth_max
  std::vector<std::vector<std::vector<int>>> channels;  // [g][slot] -> ascending parent indices

  int total_layers() const;
  bool operator==(const ArchDescriptor& o) const = default;
};

void validate_arch(const SupernetConfig& cfg, const ArchDescriptor& arch);

ArchDescriptor full_arch(const SupernetConfig& cfg);

// Random feasible-by-shape arch: depths uniform in 1..D_max, widths drawn
// from the ratio set, channel indices sampled without replacement.
ArchDescriptor random_arch(const SupernetConfig& cfg, Rng& rng);

bool is_full_arch(const SupernetConfig& cfg, const ArchDescriptor& arch);

// One line per group: "g=<idx> d=<depth> ch=<idx lists joined by '|'>".
std::string arch_to_text(const ArchDescriptor& arch);
// Same content on a single line, groups joined by ';' (for per-round logs).
std::string arch_to_line(const ArchDescriptor& arch);
ArchDescriptor arch_from_text(const std::string& text);

}  // namespace cfl
