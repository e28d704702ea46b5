#include "cfl/arch.hpp"

#include <cmath>
#include <sstream>

#include "cfl/errors.hpp"

namespace cfl {

void SupernetConfig::validate() const {
  if (groups < 1) throw ConfigError("supernet: groups must be >= 1");
  if (depth_max < 1) throw ConfigError("supernet: depth_max must be >= 1");
  if (static_cast<int>(widths.size()) != groups) {
    throw ConfigError("supernet: widths must list one entry per group");
  }
  for (int w : widths) {
    if (w < 1) throw ConfigError("supernet: widths must be strictly positive");
  }
  if (kernel < 1 || kernel % 2 == 0) throw ConfigError("supernet: kernel size must be odd");
  if (in_channels < 1 || in_h < 1 || in_w < 1) throw ConfigError("supernet: bad input shape");
  if (num_classes < 2) throw ConfigError("supernet: need at least 2 classes");
  if (width_ratios.empty()) throw ConfigError("supernet: width ratio set is empty");
  for (double r : width_ratios) {
    if (r <= 0.0 || r > 1.0) throw ConfigError("supernet: width ratios must be in (0,1]");
  }
}

std::pair<int, int> SupernetConfig::group_spatial(int g) const {
  int h = in_h, w = in_w;
  for (int i = 1; i <= g; ++i) {
    h = (h + 1) / 2;
    w = (w + 1) / 2;
  }
  return {h, w};
}

int SupernetConfig::channels_for_ratio(int g, double ratio) const {
  const int w = widths[static_cast<std::size_t>(g)];
  return std::max(1, static_cast<int>(std::lround(ratio * w)));
}

int ArchDescriptor::total_layers() const {
  int n = 0;
  for (int d : depth) n += d;
  return n;
}

void validate_arch(const SupernetConfig& cfg, const ArchDescriptor& arch) {
  if (static_cast<int>(arch.depth.size()) != cfg.groups ||
      static_cast<int>(arch.channels.size()) != cfg.groups) {
    throw StructuralError("arch: group count mismatch");
  }
  for (int g = 0; g < cfg.groups; ++g) {
    const int d = arch.depth[static_cast<std::size_t>(g)];
    if (d < 1 || d > cfg.depth_max) {
      throw StructuralError("arch: depth " + std::to_string(d) + " of group " + std::to_string(g) +
                            " outside 1.." + std::to_string(cfg.depth_max));
    }
    const auto& slots = arch.channels[static_cast<std::size_t>(g)];
    if (static_cast<int>(slots.size()) != d) {
      throw StructuralError("arch: group " + std::to_string(g) + " lists " +
                            std::to_string(slots.size()) + " channel sets for depth " + std::to_string(d));
    }
    const int wmax = cfg.widths[static_cast<std::size_t>(g)];
    for (const auto& idx : slots) {
      if (idx.empty()) throw StructuralError("arch: empty channel selection in group " + std::to_string(g));
      int prev = -1;
      for (int i : idx) {
        if (i <= prev) {
          throw StructuralError("arch: channel indices not strictly ascending in group " + std::to_string(g));
        }
        if (i < 0 || i >= wmax) {
          throw StructuralError("arch: channel index " + std::to_string(i) + " out of range [0," +
                                std::to_string(wmax) + ") in group " + std::to_string(g));
        }
        prev = i;
      }
    }
  }
}

ArchDescriptor full_arch(const SupernetConfig& cfg) {
  ArchDescriptor a;
  a.depth.assign(static_cast<std::size_t>(cfg.groups), cfg.depth_max);
  a.channels.resize(static_cast<std::size_t>(cfg.groups));
  for (int g = 0; g < cfg.groups; ++g) {
    std::vector<int> all(static_cast<std::size_t>(cfg.widths[static_cast<std::size_t>(g)]));
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<int>(i);
    a.channels[static_cast<std::size_t>(g)].assign(static_cast<std::size_t>(cfg.depth_max), all);
  }
  return a;
}

ArchDescriptor random_arch(const SupernetConfig& cfg, Rng& rng) {
  ArchDescriptor a;
  a.depth.resize(static_cast<std::size_t>(cfg.groups));
  a.channels.resize(static_cast<std::size_t>(cfg.groups));
  for (int g = 0; g < cfg.groups; ++g) {
    const int d = rng.uniform_int(1, cfg.depth_max);
    a.depth[static_cast<std::size_t>(g)] = d;
    auto& slots = a.channels[static_cast<std::size_t>(g)];
    slots.resize(static_cast<std::size_t>(d));
    const int wmax = cfg.widths[static_cast<std::size_t>(g)];
    for (int s = 0; s < d; ++s) {
      const double r = cfg.width_ratios[static_cast<std::size_t>(
          rng.uniform_int(0, static_cast<int>(cfg.width_ratios.size()) - 1))];
      slots[static_cast<std::size_t>(s)] = rng.sample_sorted(wmax, cfg.channels_for_ratio(g, r));
    }
  }
  return a;
}

bool is_full_arch(const SupernetConfig& cfg, const ArchDescriptor& arch) {
  return arch == full_arch(cfg);
}

namespace {

std::string group_to_text(const ArchDescriptor& arch, int g) {
  std::ostringstream os;
  os << "g=" << g << " d=" << arch.depth[static_cast<std::size_t>(g)] << " ch=";
  const auto& slots = arch.channels[static_cast<std::size_t>(g)];
  for (std::size_t s = 0; s < slots.size(); ++s) {
    if (s) os << "|";
    for (std::size_t i = 0; i < slots[s].size(); ++i) {
      if (i) os << ",";
      os << slots[s][i];
    }
  }
  return os.str();
}

}  // namespace

std::string arch_to_text(const ArchDescriptor& arch) {
  std::ostringstream os;
  for (std::size_t g = 0; g < arch.depth.size(); ++g) {
    if (g) os << "\n";
    os << group_to_text(arch, static_cast<int>(g));
  }
  return os.str();
}

std::string arch_to_line(const ArchDescriptor& arch) {
  std::ostringstream os;
  for (std::size_t g = 0; g < arch.depth.size(); ++g) {
    if (g) os << ";";
    os << group_to_text(arch, static_cast<int>(g));
  }
  return os.str();
}

ArchDescriptor arch_from_text(const std::string& text) {
  ArchDescriptor a;
  std::string norm = text;
  for (char& c : norm) {
    if (c == ';') c = '\n';
  }
  std::istringstream is(norm);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    int g = -1, d = -1;
    std::string ch;
    std::istringstream ls(line);
    std::string tok;
    while (ls >> tok) {
      if (tok.rfind("g=", 0) == 0) {
        g = std::stoi(tok.substr(2));
      } else if (tok.rfind("d=", 0) == 0) {
        d = std::stoi(tok.substr(2));
      } else if (tok.rfind("ch=", 0) == 0) {
        ch = tok.substr(3);
      } else {
        throw IoError("arch text: unexpected token '" + tok + "'");
      }
    }
    if (g != static_cast<int>(a.depth.size()) || d < 1) {
      throw IoError("arch text: malformed group line '" + line + "'");
    }
    std::vector<std::vector<int>> slots;
    std::istringstream cs(ch);
    std::string slot;
    while (std::getline(cs, slot, '|')) {
      std::vector<int> idx;
      std::istringstream ss(slot);
      std::string num;
      while (std::getline(ss, num, ',')) {
        if (!num.empty()) idx.push_back(std::stoi(num));
      }
      slots.push_back(std::move(idx));
    }
    if (static_cast<int>(slots.size()) != d) {
      throw IoError("arch text: depth " + std::to_string(d) + " but " + std::to_string(slots.size()) +
                    " channel lists in '" + line + "'");
    }
    a.depth.push_back(d);
    a.channels.push_back(std::move(slots));
  }
  if (a.depth.empty()) throw IoError("arch text: no groups found");
  return a;
}

}  // namespace cfl
