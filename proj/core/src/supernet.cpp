#include "cfl/supernet.hpp"

#include <cmath>

#include "cfl/errors.hpp"

namespace cfl {

namespace {

std::string layer_key(int g, int d, const char* suffix) {
  return "g" + std::to_string(g) + ".l" + std::to_string(d) + "." + suffix;
}

std::string gate_key(int g, int d, const char* suffix) {
  return "gate.g" + std::to_string(g) + ".l" + std::to_string(d) + "." + suffix;
}

int layer_in_dim(const SupernetConfig& cfg, int g, int d) {
  if (d > 0) return cfg.widths[static_cast<std::size_t>(g)];
  return g == 0 ? cfg.in_channels : cfg.widths[static_cast<std::size_t>(g - 1)];
}

const Tensor& require_param(const ParamSet& params, const std::string& id) {
  auto it = params.find(id);
  if (it == params.end()) throw StructuralError("missing parameter '" + id + "'");
  return it->second;
}

Tensor slice_conv_weight(const Tensor& w, const std::vector<int>& out_sel, const std::vector<int>* in_sel) {
  const int cin = w.dim(1), k = w.dim(2);
  const std::size_t plane = static_cast<std::size_t>(k) * k;
  const int cin_out = in_sel ? static_cast<int>(in_sel->size()) : cin;
  Tensor out({static_cast<int>(out_sel.size()), cin_out, k, k});
  double* o = out.data();
  for (std::size_t oi = 0; oi < out_sel.size(); ++oi) {
    const double* src_row = w.data() + static_cast<std::size_t>(out_sel[oi]) * cin * plane;
    for (int ii = 0; ii < cin_out; ++ii) {
      const int ci = in_sel ? (*in_sel)[static_cast<std::size_t>(ii)] : ii;
      const double* src = src_row + static_cast<std::size_t>(ci) * plane;
      std::copy(src, src + plane, o);
      o += plane;
    }
  }
  return out;
}

Tensor slice_bias(const Tensor& b, const std::vector<int>& sel) {
  Tensor out({static_cast<int>(sel.size())});
  for (std::size_t i = 0; i < sel.size(); ++i) out[i] = b[static_cast<std::size_t>(sel[i])];
  return out;
}

std::map<std::string, ag::NodePtr> make_nodes(const ParamSet& params, bool as_leaves) {
  std::map<std::string, ag::NodePtr> nodes;
  for (const auto& [id, t] : params) {
    nodes.emplace(id, as_leaves ? ag::leaf(t) : ag::constant(t));
  }
  return nodes;
}

enum class GraphGating { AllOn, Greedy, Sample, Soft };

struct BuiltGraph {
  ag::NodePtr logits;
  std::vector<bool> executed;            // per conv layer, mandatory layers true
  std::vector<double> p_exec;            // per skippable layer, order of appearance
  std::vector<ag::NodePtr> log_probs;    // per skippable layer, log-prob of the taken action
  int skippable = 0;
  int skipped = 0;
};

// Walks the submodel described by `arch` with parameters already sliced to
// arch shapes. Skippable layers route through the gate; the identity shortcut
// maps the input selection onto the output selection via parent indices.
BuiltGraph build_graph(const SupernetConfig& cfg, const std::map<std::string, ag::NodePtr>& model,
                       const ArchDescriptor& arch, const std::map<std::string, ag::NodePtr>* gates,
                       GraphGating gating, const ag::NodePtr& input, bool want_log_probs, Rng* rng) {
  BuiltGraph out;
  ag::NodePtr x = input;
  const ag::NodePtr one = ag::constant(Tensor::scalar(1.0));

  auto model_node = [&](const std::string& id) {
    auto it = model.find(id);
    if (it == model.end()) throw StructuralError("missing parameter '" + id + "'");
    return it->second;
  };

  for (int g = 0; g < cfg.groups; ++g) {
    const int wmax = cfg.widths[static_cast<std::size_t>(g)];
    const auto& slots = arch.channels[static_cast<std::size_t>(g)];
    for (int d = 0; d < arch.depth[static_cast<std::size_t>(g)]; ++d) {
      const auto& sel_out = slots[static_cast<std::size_t>(d)];
      if (d == 0) {
        const int stride = g == 0 ? 1 : 2;
        x = ag::relu(ag::bias_add(ag::conv2d(x, model_node(layer_key(g, d, "w")), stride),
                                  model_node(layer_key(g, d, "b"))));
        out.executed.push_back(true);
        continue;
      }
      const auto& sel_in = slots[static_cast<std::size_t>(d - 1)];
      auto shortcut = [&]() {
        if (sel_in == sel_out) return x;
        return ag::gather_channels(ag::scatter_channels(x, sel_in, wmax), sel_out);
      };
      auto exec_path = [&]() {
        auto f = ag::relu(ag::bias_add(ag::conv2d(x, model_node(layer_key(g, d, "w")), 1),
                                       model_node(layer_key(g, d, "b"))));
        return ag::add(f, shortcut());
      };

      if (gating == GraphGating::AllOn || gates == nullptr) {
        x = exec_path();
        out.executed.push_back(true);
        continue;
      }

      out.skippable += 1;
      auto git_w = gates->find(gate_key(g, d, "w"));
      auto git_b = gates->find(gate_key(g, d, "b"));
      if (git_w == gates->end() || git_b == gates->end()) {
        throw StructuralError("missing gate parameters for group " + std::to_string(g) + " layer " +
                              std::to_string(d));
      }

      // Gate input: batch-mean pooled feature scattered to parent width. In
      // the hard modes the trunk sees only the decision, so the log-prob node
      // touches gate parameters alone (score-function semantics).
      ag::NodePtr feat = ag::mean_rows(ag::scatter_channels(ag::global_avg_pool(x), sel_in, wmax));
      if (gating != GraphGating::Soft) feat = ag::detach(feat);
      ag::NodePtr z = ag::dense(feat, git_w->second, git_b->second);
      ag::NodePtr p = ag::sigmoid(ag::sub(ag::pick(z, 0), ag::pick(z, 1)));
      const double pv = p->value.value();
      out.p_exec.push_back(pv);

      if (gating == GraphGating::Soft) {
        x = ag::blend(p, exec_path(), shortcut());
        out.executed.push_back(true);
        continue;
      }

      bool execute;
      if (gating == GraphGating::Greedy) {
        execute = pv >= 0.5;  // argmax over the two actions, ties execute
      } else {
        if (rng == nullptr) throw ArgumentError("sample-mode forward needs an rng");
        execute = rng->uniform() < pv;
      }
      if (want_log_probs) {
        out.log_probs.push_back(execute ? ag::log_scalar(p) : ag::log_scalar(ag::sub(one, p)));
      }
      if (execute) {
        x = exec_path();
      } else {
        x = shortcut();
        out.skipped += 1;
      }
      out.executed.push_back(execute);
    }
  }

  // Ascending indices in [0,W) with size W can only be the full selection,
  // where the scatter would be the identity.
  const auto& last_sel = arch.channels.back()[static_cast<std::size_t>(arch.depth.back() - 1)];
  ag::NodePtr pooled = ag::global_avg_pool(x);
  if (static_cast<int>(last_sel.size()) != cfg.widths.back()) {
    pooled = ag::scatter_channels(pooled, last_sel, cfg.widths.back());
  }
  out.logits = ag::dense(pooled, model_node("head.w"), model_node("head.b"));
  return out;
}

GraphGating to_gating(GateMode mode) {
  switch (mode) {
    case GateMode::AllOn: return GraphGating::AllOn;
    case GateMode::Greedy: return GraphGating::Greedy;
    case GateMode::Sample: return GraphGating::Sample;
  }
  throw ArgumentError("unknown gate mode");
}

Tensor batch_row(const Tensor& x, int row) {
  std::vector<int> shape = x.shape();
  const std::size_t inner = x.size() / static_cast<std::size_t>(shape[0]);
  shape[0] = 1;
  std::vector<double> data(x.data() + static_cast<std::size_t>(row) * inner,
                           x.data() + static_cast<std::size_t>(row + 1) * inner);
  return Tensor(shape, std::move(data));
}

}  // namespace

ParamSet init_parent(const SupernetConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(subseed(seed, {0x70617265ULL}));
  ParamSet p;
  for (int g = 0; g < cfg.groups; ++g) {
    const int wg = cfg.widths[static_cast<std::size_t>(g)];
    for (int d = 0; d < cfg.depth_max; ++d) {
      const int cin = layer_in_dim(cfg, g, d);
      const double std_dev = std::sqrt(2.0 / (static_cast<double>(cin) * cfg.kernel * cfg.kernel));
      Tensor w({wg, cin, cfg.kernel, cfg.kernel});
      for (std::size_t i = 0; i < w.size(); ++i) w[i] = rng.normal() * std_dev;
      p.emplace(layer_key(g, d, "w"), std::move(w));
      p.emplace(layer_key(g, d, "b"), Tensor({wg}));
    }
  }
  const int head_in = cfg.widths.back();
  const double head_std = std::sqrt(1.0 / static_cast<double>(head_in));
  Tensor hw({cfg.num_classes, head_in});
  for (std::size_t i = 0; i < hw.size(); ++i) hw[i] = rng.normal() * head_std;
  p.emplace("head.w", std::move(hw));
  p.emplace("head.b", Tensor({cfg.num_classes}));
  return p;
}

ParamSet extract_submodel(const SupernetConfig& cfg, const ParamSet& parent, const ArchDescriptor& arch) {
  validate_arch(cfg, arch);
  ParamSet out;
  std::vector<int> prev_sel;  // empty: raw input channels
  for (int g = 0; g < cfg.groups; ++g) {
    const auto& slots = arch.channels[static_cast<std::size_t>(g)];
    for (int d = 0; d < arch.depth[static_cast<std::size_t>(g)]; ++d) {
      const auto& sel_out = slots[static_cast<std::size_t>(d)];
      const std::vector<int>* in_sel = nullptr;
      if (d > 0) {
        in_sel = &slots[static_cast<std::size_t>(d - 1)];
      } else if (g > 0) {
        in_sel = &prev_sel;
      }
      const Tensor& w = require_param(parent, layer_key(g, d, "w"));
      const Tensor& b = require_param(parent, layer_key(g, d, "b"));
      out.emplace(layer_key(g, d, "w"), slice_conv_weight(w, sel_out, in_sel));
      out.emplace(layer_key(g, d, "b"), slice_bias(b, sel_out));
    }
    prev_sel = slots[static_cast<std::size_t>(arch.depth[static_cast<std::size_t>(g)] - 1)];
  }
  out.emplace("head.w", require_param(parent, "head.w"));
  out.emplace("head.b", require_param(parent, "head.b"));
  return out;
}

GatePolicy init_gates(const SupernetConfig& cfg) {
  cfg.validate();
  GatePolicy gates;
  for (int g = 0; g < cfg.groups; ++g) {
    const int wg = cfg.widths[static_cast<std::size_t>(g)];
    for (int d = 1; d < cfg.depth_max; ++d) {
      gates.params.emplace(gate_key(g, d, "w"), Tensor({2, wg}));
      gates.params.emplace(gate_key(g, d, "b"), Tensor({2}));
    }
  }
  return gates;
}

ForwardResult gated_forward(const SupernetConfig& cfg, const ParamSet& params, const ArchDescriptor& arch,
                            const GatePolicy& gates, const Tensor& x, GateMode mode, Rng* rng) {
  validate_arch(cfg, arch);
  auto model = make_nodes(params, false);
  auto gate_nodes = make_nodes(gates.params, false);
  BuiltGraph g = build_graph(cfg, model, arch, &gate_nodes, to_gating(mode), ag::constant(x), false, rng);
  return ForwardResult{g.logits->value, std::move(g.executed)};
}

Tensor forward(const SupernetConfig& cfg, const ParamSet& params, const ArchDescriptor& arch, const Tensor& x) {
  validate_arch(cfg, arch);
  auto model = make_nodes(params, false);
  BuiltGraph g = build_graph(cfg, model, arch, nullptr, GraphGating::AllOn, ag::constant(x), false, nullptr);
  return g.logits->value;
}

GateStats hybrid_gate_update(const SupernetConfig& cfg, const ParamSet& model, const ArchDescriptor& arch,
                             GatePolicy& gates, const Tensor& x, const std::vector<int>& labels,
                             GatePhase phase, double alpha, double gate_lr, Rng& rng) {
  if (alpha < 0.0) throw ConfigError("gate reward weight alpha must be >= 0, got " + std::to_string(alpha));
  validate_arch(cfg, arch);
  const int n = x.dim(0);
  if (static_cast<int>(labels.size()) != n) {
    throw StructuralError("hybrid_gate_update: label count does not match batch");
  }
  GateStats stats;
  auto model_nodes = make_nodes(model, false);
  auto gate_nodes = make_nodes(gates.params, true);

  if (phase == GatePhase::Warmup) {
    BuiltGraph g = build_graph(cfg, model_nodes, arch, &gate_nodes, GraphGating::Soft, ag::constant(x),
                               false, nullptr);
    ag::NodePtr loss = ag::softmax_xent_mean(g.logits, labels);
    ag::backward(loss);
    ParamSet grads;
    for (const auto& [id, node] : gate_nodes) {
      grads.emplace(id, node->has_grad ? node->grad : Tensor::zeros_like(node->value));
    }
    sgd_step_inplace(gates.params, grads, gate_lr);
    stats.loss = loss->value.value();
    double psum = 0.0;
    for (double p : g.p_exec) psum += p;
    stats.mean_p_exec = g.p_exec.empty() ? 1.0 : psum / static_cast<double>(g.p_exec.size());
    stats.comp = stats.mean_p_exec;
    stats.baseline = gates.baseline;
    return stats;
  }

  // Reinforce: one sampled episode per batch row.
  std::vector<ag::NodePtr> terms;
  double reward_sum = 0.0, comp_sum = 0.0, p_sum = 0.0;
  std::size_t p_count = 0;
  for (int i = 0; i < n; ++i) {
    BuiltGraph g = build_graph(cfg, model_nodes, arch, &gate_nodes, GraphGating::Sample,
                               ag::constant(batch_row(x, i)), true, &rng);
    const int pred = ag::argmax_row(g.logits->value, 0);
    const double correct = pred == labels[static_cast<std::size_t>(i)] ? 1.0 : 0.0;
    const double skip_frac =
        g.skippable > 0 ? static_cast<double>(g.skipped) / static_cast<double>(g.skippable) : 0.0;
    const double reward = correct + alpha * skip_frac;
    reward_sum += reward;
    int executed = 0;
    for (bool e : g.executed) executed += e ? 1 : 0;
    comp_sum += static_cast<double>(executed) / static_cast<double>(g.executed.size());
    for (double p : g.p_exec) p_sum += p;
    p_count += g.p_exec.size();
    const double advantage = reward - gates.baseline;
    if (!g.log_probs.empty() && advantage != 0.0) {
      terms.push_back(ag::scale(ag::add_scalars(g.log_probs), -advantage / static_cast<double>(n)));
    }
  }
  if (!terms.empty()) {
    ag::NodePtr surrogate = ag::add_scalars(terms);
    ag::backward(surrogate);
    ParamSet grads;
    for (const auto& [id, node] : gate_nodes) {
      grads.emplace(id, node->has_grad ? node->grad : Tensor::zeros_like(node->value));
    }
    sgd_step_inplace(gates.params, grads, gate_lr);
  }
  const double mean_reward = reward_sum / static_cast<double>(n);
  gates.baseline = gates.baseline_decay * gates.baseline + (1.0 - gates.baseline_decay) * mean_reward;
  stats.mean_reward = mean_reward;
  stats.comp = comp_sum / static_cast<double>(n);
  stats.mean_p_exec = p_count ? p_sum / static_cast<double>(p_count) : 1.0;
  stats.baseline = gates.baseline;
  return stats;
}

double computation_percentage(const std::vector<std::vector<bool>>& executed_masks) {
  if (executed_masks.empty()) throw ArgumentError("computation_percentage: empty mask list");
  double acc = 0.0;
  for (const auto& mask : executed_masks) {
    if (mask.empty()) throw ArgumentError("computation_percentage: empty mask");
    int executed = 0;
    for (bool e : mask) executed += e ? 1 : 0;
    acc += static_cast<double>(executed) / static_cast<double>(mask.size());
  }
  return acc / static_cast<double>(executed_masks.size());
}

double supervised_step(const SupernetConfig& cfg, ParamSet& params, const ArchDescriptor& arch, const Tensor& x,
                       const std::vector<int>& labels, double lr, GatePolicy* gates, double gate_lr) {
  validate_arch(cfg, arch);
  auto model_nodes = make_nodes(params, true);
  std::map<std::string, ag::NodePtr> gate_nodes;
  BuiltGraph g = [&] {
    if (gates != nullptr) {
      gate_nodes = make_nodes(gates->params, true);
      return build_graph(cfg, model_nodes, arch, &gate_nodes, GraphGating::Soft, ag::constant(x), false,
                         nullptr);
    }
    return build_graph(cfg, model_nodes, arch, nullptr, GraphGating::AllOn, ag::constant(x), false, nullptr);
  }();
  ag::NodePtr loss = ag::softmax_xent_mean(g.logits, labels);
  ag::backward(loss);
  ParamSet grads;
  for (const auto& [id, node] : model_nodes) {
    grads.emplace(id, node->has_grad ? node->grad : Tensor::zeros_like(node->value));
  }
  sgd_step_inplace(params, grads, lr);
  if (gates != nullptr && gate_lr > 0.0) {
    ParamSet ggrads;
    for (const auto& [id, node] : gate_nodes) {
      ggrads.emplace(id, node->has_grad ? node->grad : Tensor::zeros_like(node->value));
    }
    sgd_step_inplace(gates->params, ggrads, gate_lr);
  }
  return loss->value.value();
}

std::vector<int> predict_labels(const SupernetConfig& cfg, const ParamSet& params, const ArchDescriptor& arch,
                                const GatePolicy& gates, GateMode mode, const Tensor& x, Rng* rng) {
  ForwardResult r = gated_forward(cfg, params, arch, gates, x, mode, rng);
  std::vector<int> out(static_cast<std::size_t>(r.logits.dim(0)));
  for (int i = 0; i < r.logits.dim(0); ++i) out[static_cast<std::size_t>(i)] = ag::argmax_row(r.logits, i);
  return out;
}

}  // namespace cfl
