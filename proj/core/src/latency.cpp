#include "cfl/latency.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "cfl/errors.hpp"

namespace cfl {

namespace {

std::string key_str(const LatencyTable::Key& key) {
  std::ostringstream os;
  os << "(device=" << std::get<0>(key) << ", g=" << std::get<1>(key) << ", slot=" << std::get<2>(key)
     << ", channels=" << std::get<3>(key) << ")";
  return os.str();
}

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

void LatencyTable::insert(const Key& key, double ratio, double ms) {
  if (ms <= 0.0) throw ConfigError("latency entries must be positive, got " + fmt_double(ms));
  entries_[key] = ms;
  ratios_[key] = ratio;
}

double LatencyTable::entry(const std::string& device, int group, int slot, int channel_count) const {
  const Key key{device, group, slot, channel_count};
  auto it = entries_.find(key);
  if (it == entries_.end()) throw CoverageError("latency table has no entry for " + key_str(key));
  return it->second;
}

bool LatencyTable::covers_device(const std::string& device) const {
  for (const auto& [key, ms] : entries_) {
    if (std::get<0>(key) == device) return true;
  }
  return false;
}

double LatencyTable::lookup(const ArchDescriptor& arch, const DeviceProfile& profile) const {
  double sum = 0.0;
  int active = 0;
  for (std::size_t g = 0; g < arch.depth.size(); ++g) {
    for (int d = 0; d < arch.depth[g]; ++d) {
      const int count = static_cast<int>(arch.channels[g][static_cast<std::size_t>(d)].size());
      sum += entry(profile.device_model, static_cast<int>(g), d, count);
      active += 1;
    }
  }
  return sum + profile.per_layer_overhead_ms * static_cast<double>(active);
}

void LatencyTable::save(const std::string& path) const {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open for writing: " + path);
  for (const auto& [key, ms] : entries_) {
    os << "device=" << std::get<0>(key) << " g=" << std::get<1>(key) << " slot=" << std::get<2>(key)
       << " ratio=" << fmt_double(ratios_.at(key)) << " ms=" << fmt_double(ms) << "\n";
  }
  if (!os) throw IoError("write failed: " + path);
}

LatencyTable LatencyTable::load(const std::string& path, const SupernetConfig& cfg) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open: " + path);
  LatencyTable table;
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::string device;
    int g = -1, slot = -1;
    double ratio = -1.0, ms = -1.0;
    std::istringstream ls(line);
    std::string tok;
    while (ls >> tok) {
      if (tok.rfind("device=", 0) == 0) device = tok.substr(7);
      else if (tok.rfind("g=", 0) == 0) g = std::stoi(tok.substr(2));
      else if (tok.rfind("slot=", 0) == 0) slot = std::stoi(tok.substr(5));
      else if (tok.rfind("ratio=", 0) == 0) ratio = std::stod(tok.substr(6));
      else if (tok.rfind("ms=", 0) == 0) ms = std::stod(tok.substr(3));
      else throw IoError(path + ":" + std::to_string(line_no) + ": unexpected token '" + tok + "'");
    }
    if (device.empty() || g < 0 || slot < 0 || ratio <= 0.0 || ms <= 0.0) {
      throw IoError(path + ":" + std::to_string(line_no) + ": malformed latency line");
    }
    if (g >= cfg.groups || slot >= cfg.depth_max) {
      throw IoError(path + ":" + std::to_string(line_no) + ": entry outside the supernet layout");
    }
    table.insert({device, g, slot, cfg.channels_for_ratio(g, ratio)}, ratio, ms);
  }
  return table;
}

double layer_flops(const SupernetConfig& cfg, int group, int slot, int channel_count) {
  const int cin = slot == 0 ? (group == 0 ? cfg.in_channels : cfg.widths[static_cast<std::size_t>(group - 1)])
                            : channel_count;
  const auto [h, w] = cfg.group_spatial(group);
  return 2.0 * cfg.kernel * cfg.kernel * static_cast<double>(cin) * channel_count * h * w;
}

double cost_model_latency(const SupernetConfig& cfg, const ArchDescriptor& arch, const DeviceProfile& profile) {
  if (profile.flops_per_ms <= 0.0) throw ConfigError("flops_per_ms must be positive");
  double sum = 0.0;
  int active = 0;
  for (std::size_t g = 0; g < arch.depth.size(); ++g) {
    for (int d = 0; d < arch.depth[g]; ++d) {
      const int count = static_cast<int>(arch.channels[g][static_cast<std::size_t>(d)].size());
      sum += layer_flops(cfg, static_cast<int>(g), d, count) / profile.flops_per_ms;
      active += 1;
    }
  }
  return sum + profile.per_layer_overhead_ms * static_cast<double>(active);
}

double full_parent_latency(const SupernetConfig& cfg, const DeviceProfile& profile) {
  return cost_model_latency(cfg, full_arch(cfg), profile);
}

LatencyTable build_latency_table(const SupernetConfig& cfg, const std::vector<DeviceProfile>& profiles) {
  cfg.validate();
  if (profiles.empty()) throw ArgumentError("build_latency_table: no device profiles");
  LatencyTable table;
  for (const auto& profile : profiles) {
    if (profile.flops_per_ms <= 0.0) {
      throw ConfigError("device '" + profile.device_model + "' has nonpositive flops_per_ms");
    }
    for (int g = 0; g < cfg.groups; ++g) {
      for (int d = 0; d < cfg.depth_max; ++d) {
        for (double r : cfg.width_ratios) {
          const int count = cfg.channels_for_ratio(g, r);
          const double ms = layer_flops(cfg, g, d, count) / profile.flops_per_ms;
          table.insert({profile.device_model, g, d, count}, r, ms);
        }
      }
    }
  }
  return table;
}

double lookup_latency(const LatencyTable& table, const ArchDescriptor& arch, const DeviceProfile& profile) {
  return table.lookup(arch, profile);
}

void save_fleet(const std::vector<DeviceProfile>& fleet, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open for writing: " + path);
  for (const auto& d : fleet) {
    os << "device=" << d.device_model << " flops_per_ms=" << fmt_double(d.flops_per_ms)
       << " overhead_ms=" << fmt_double(d.per_layer_overhead_ms)
       << " bound_ms=" << fmt_double(d.latency_bound_ms) << "\n";
  }
  if (!os) throw IoError("write failed: " + path);
}

std::vector<DeviceProfile> load_fleet(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open: " + path);
  std::vector<DeviceProfile> fleet;
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    DeviceProfile d;
    std::istringstream ls(line);
    std::string tok;
    while (ls >> tok) {
      if (tok.rfind("device=", 0) == 0) d.device_model = tok.substr(7);
      else if (tok.rfind("flops_per_ms=", 0) == 0) d.flops_per_ms = std::stod(tok.substr(13));
      else if (tok.rfind("overhead_ms=", 0) == 0) d.per_layer_overhead_ms = std::stod(tok.substr(12));
      else if (tok.rfind("bound_ms=", 0) == 0) d.latency_bound_ms = std::stod(tok.substr(9));
      else throw IoError(path + ":" + std::to_string(line_no) + ": unexpected token '" + tok + "'");
    }
    if (d.device_model.empty() || d.flops_per_ms <= 0.0 || d.latency_bound_ms <= 0.0) {
      throw IoError(path + ":" + std::to_string(line_no) + ": malformed fleet line");
    }
    fleet.push_back(std::move(d));
  }
  return fleet;
}

}  // namespace cfl
