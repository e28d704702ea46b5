#pragma once

#include <map>
#include <string>
#include <tuple>
#include <vector>

#include "cfl/arch.hpp"

namespace cfl {

// Hardware profile plus latency bound for one simulated worker.
struct DeviceProfile {
  std::string device_model;
  double flops_per_ms = 1.0;
  double per_layer_overhead_ms = 0.0;
  double latency_bound_ms = 0.0;  // l_k
};

// Offline per-layer latency map keyed by (device, group, layer slot, channel
// count). Channel counts are the width buckets the ratio set induces, so
// submodel latency composes additively from the arch's selections. Immutable
// after build.
class LatencyTable {
 public:
  using Key = std::tuple<std::string, int, int, int>;

  void insert(const Key& key, double ratio, double ms);
  double entry(const std::string& device, int group, int slot, int channel_count) const;
  bool covers_device(const std::string& device) const;
  std::size_t size() const { return entries_.size(); }

  // Sum of per-active-layer entries plus per-layer overhead times the active
  // layer count. Throws CoverageError naming the key on any gap.
  double lookup(const ArchDescriptor& arch, const DeviceProfile& profile) const;

  // Text lines: device=<id> g=<g> slot=<d> ratio=<r> ms=<f64>. Loading needs
  // the supernet config to turn ratios back into channel-count buckets.
  void save(const std::string& path) const;
  static LatencyTable load(const std::string& path, const SupernetConfig& cfg);

 private:
  std::map<Key, double> entries_;
  std::map<Key, double> ratios_;  // ratio that produced each bucket, for IO
};

// Conv FLOPs of one layer at the given output width bucket; the input width
// follows the parent layout (previous group's full width for slot 0, the same
// bucket for deeper slots).
double layer_flops(const SupernetConfig& cfg, int group, int slot, int channel_count);

// Cost-model latency of one full arch evaluated directly (no table); the
// table is built from exactly this model.
double cost_model_latency(const SupernetConfig& cfg, const ArchDescriptor& arch, const DeviceProfile& profile);

double full_parent_latency(const SupernetConfig& cfg, const DeviceProfile& profile);

LatencyTable build_latency_table(const SupernetConfig& cfg, const std::vector<DeviceProfile>& profiles);

double lookup_latency(const LatencyTable& table, const ArchDescriptor& arch, const DeviceProfile& profile);

// Device fleet file: device=<id> flops_per_ms=<f64> overhead_ms=<f64> bound_ms=<f64>
void save_fleet(const std::vector<DeviceProfile>& fleet, const std::string& path);
std::vector<DeviceProfile> load_fleet(const std::string& path);

}  // namespace cfl
