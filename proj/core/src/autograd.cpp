#include "cfl/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

#include "cfl/errors.hpp"

namespace cfl::ag {

namespace {

NodePtr make_node(Tensor value, std::vector<NodePtr> inputs, const char* op) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->inputs = std::move(inputs);
  n->op = op;
  for (const auto& in : n->inputs) {
    if (in->requires_grad) {
      n->requires_grad = true;
      break;
    }
  }
  return n;
}

[[noreturn]] void shape_error(const char* op, const std::string& detail) {
  throw StructuralError(std::string(op) + ": " + detail);
}

struct ConvDims {
  int n, cin, h, w, cout, k, stride, pad, oh, ow;
};

ConvDims conv_dims(const Tensor& in, const Tensor& wt, int stride) {
  if (in.rank() != 4) shape_error("conv2d", "input must be rank 4, got " + in.shape_str());
  if (wt.rank() != 4) shape_error("conv2d", "weight must be rank 4, got " + wt.shape_str());
  if (stride < 1) shape_error("conv2d", "stride must be >= 1, got " + std::to_string(stride));
  ConvDims d;
  d.n = in.dim(0);
  d.cin = in.dim(1);
  d.h = in.dim(2);
  d.w = in.dim(3);
  d.cout = wt.dim(0);
  d.k = wt.dim(2);
  if (wt.dim(3) != d.k) shape_error("conv2d", "kernel must be square, got " + wt.shape_str());
  if (d.k % 2 == 0) shape_error("conv2d", "kernel size must be odd, got " + std::to_string(d.k));
  if (wt.dim(1) != d.cin) {
    shape_error("conv2d", "input channels " + std::to_string(d.cin) + " != weight channels " +
                              std::to_string(wt.dim(1)));
  }
  d.stride = stride;
  d.pad = d.k / 2;
  d.oh = (d.h + 2 * d.pad - d.k) / d.stride + 1;
  d.ow = (d.w + 2 * d.pad - d.k) / d.stride + 1;
  return d;
}

}  // namespace

void Node::accumulate(const Tensor& g) {
  if (!requires_grad) return;
  if (!has_grad) {
    grad = Tensor::zeros_like(value);
    has_grad = true;
  }
  double* dst = grad.data();
  const double* src = g.data();
  for (std::size_t i = 0; i < grad.size(); ++i) dst[i] += src[i];
}

NodePtr constant(Tensor v) {
  auto n = make_node(std::move(v), {}, "const");
  n->requires_grad = false;
  return n;
}

NodePtr leaf(Tensor v) {
  auto n = make_node(std::move(v), {}, "leaf");
  n->requires_grad = true;
  return n;
}

NodePtr detach(const NodePtr& x) {
  auto n = make_node(x->value, {}, "detach");
  n->requires_grad = false;
  return n;
}

NodePtr conv2d(const NodePtr& input, const NodePtr& weight, int stride) {
  const ConvDims d = conv_dims(input->value, weight->value, stride);
  Tensor out({d.n, d.cout, d.oh, d.ow});
  const double* in = input->value.data();
  const double* wt = weight->value.data();
  double* o = out.data();
  const std::size_t in_c = static_cast<std::size_t>(d.h) * d.w;
  const std::size_t in_n = in_c * d.cin;
  const std::size_t out_c = static_cast<std::size_t>(d.oh) * d.ow;
  const std::size_t out_n = out_c * d.cout;
  const std::size_t wt_ci = static_cast<std::size_t>(d.k) * d.k;
  const std::size_t wt_co = wt_ci * d.cin;

  for (int n = 0; n < d.n; ++n) {
    for (int co = 0; co < d.cout; ++co) {
      double* orow = o + n * out_n + co * out_c;
      for (int ci = 0; ci < d.cin; ++ci) {
        const double* irow = in + n * in_n + ci * in_c;
        const double* wrow = wt + co * wt_co + ci * wt_ci;
        for (int dy = 0; dy < d.k; ++dy) {
          for (int dx = 0; dx < d.k; ++dx) {
            const double wv = wrow[dy * d.k + dx];
            if (wv == 0.0) continue;
            for (int y = 0; y < d.oh; ++y) {
              const int iy = y * d.stride + dy - d.pad;
              if (iy < 0 || iy >= d.h) continue;
              const double* iline = irow + static_cast<std::size_t>(iy) * d.w;
              double* oline = orow + static_cast<std::size_t>(y) * d.ow;
              for (int x = 0; x < d.ow; ++x) {
                const int ix = x * d.stride + dx - d.pad;
                if (ix < 0 || ix >= d.w) continue;
                oline[x] += wv * iline[ix];
              }
            }
          }
        }
      }
    }
  }

  auto node = make_node(std::move(out), {input, weight}, "conv2d");
  node->backprop = [d](Node& self) {
    const NodePtr& input = self.inputs[0];
    const NodePtr& weight = self.inputs[1];
    const double* g = self.grad.data();
    const double* in = input->value.data();
    const double* wt = weight->value.data();
    Tensor gin = Tensor::zeros_like(input->value);
    Tensor gwt = Tensor::zeros_like(weight->value);
    double* gi = gin.data();
    double* gw = gwt.data();
    const std::size_t in_c = static_cast<std::size_t>(d.h) * d.w;
    const std::size_t in_n = in_c * d.cin;
    const std::size_t out_c = static_cast<std::size_t>(d.oh) * d.ow;
    const std::size_t out_n = out_c * d.cout;
    const std::size_t wt_ci = static_cast<std::size_t>(d.k) * d.k;
    const std::size_t wt_co = wt_ci * d.cin;

    for (int n = 0; n < d.n; ++n) {
      for (int co = 0; co < d.cout; ++co) {
        const double* grow = g + n * out_n + co * out_c;
        for (int ci = 0; ci < d.cin; ++ci) {
          const double* irow = in + n * in_n + ci * in_c;
          double* girow = gi + n * in_n + ci * in_c;
          const double* wrow = wt + co * wt_co + ci * wt_ci;
          double* gwrow = gw + co * wt_co + ci * wt_ci;
          for (int dy = 0; dy < d.k; ++dy) {
            for (int dx = 0; dx < d.k; ++dx) {
              const double wv = wrow[dy * d.k + dx];
              double wacc = 0.0;
              for (int y = 0; y < d.oh; ++y) {
                const int iy = y * d.stride + dy - d.pad;
                if (iy < 0 || iy >= d.h) continue;
                const double* iline = irow + static_cast<std::size_t>(iy) * d.w;
                double* giline = girow + static_cast<std::size_t>(iy) * d.w;
                const double* gline = grow + static_cast<std::size_t>(y) * d.ow;
                for (int x = 0; x < d.ow; ++x) {
                  const int ix = x * d.stride + dx - d.pad;
                  if (ix < 0 || ix >= d.w) continue;
                  const double gv = gline[x];
                  wacc += gv * iline[ix];
                  giline[ix] += gv * wv;
                }
              }
              gwrow[dy * d.k + dx] += wacc;
            }
          }
        }
      }
    }
    input->accumulate(gin);
    weight->accumulate(gwt);
  };
  return node;
}

NodePtr bias_add(const NodePtr& x, const NodePtr& b) {
  const Tensor& xv = x->value;
  const Tensor& bv = b->value;
  if (bv.rank() != 1) shape_error("bias_add", "bias must be rank 1, got " + bv.shape_str());
  if (xv.rank() != 4 && xv.rank() != 2) {
    shape_error("bias_add", "input must be rank 2 or 4, got " + xv.shape_str());
  }
  if (xv.dim(1) != bv.dim(0)) {
    shape_error("bias_add", "channel count " + std::to_string(xv.dim(1)) + " != bias length " +
                                std::to_string(bv.dim(0)));
  }
  const int nb = xv.dim(0);
  const int c = xv.dim(1);
  const std::size_t inner = xv.size() / (static_cast<std::size_t>(nb) * c);
  Tensor out = xv;
  double* o = out.data();
  const double* bd = bv.data();
  for (int n = 0; n < nb; ++n) {
    for (int ci = 0; ci < c; ++ci) {
      double* row = o + (static_cast<std::size_t>(n) * c + ci) * inner;
      for (std::size_t i = 0; i < inner; ++i) row[i] += bd[ci];
    }
  }
  auto node = make_node(std::move(out), {x, b}, "bias_add");
  node->backprop = [nb, c, inner](Node& self) {
    self.inputs[0]->accumulate(self.grad);
    if (self.inputs[1]->requires_grad) {
      Tensor gb({c});
      const double* g = self.grad.data();
      for (int n = 0; n < nb; ++n) {
        for (int ci = 0; ci < c; ++ci) {
          const double* row = g + (static_cast<std::size_t>(n) * c + ci) * inner;
          double acc = 0.0;
          for (std::size_t i = 0; i < inner; ++i) acc += row[i];
          gb[static_cast<std::size_t>(ci)] += acc;
        }
      }
      self.inputs[1]->accumulate(gb);
    }
  };
  return node;
}

NodePtr relu(const NodePtr& x) {
  Tensor out = x->value;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = out[i] > 0.0 ? out[i] : 0.0;
  auto node = make_node(std::move(out), {x}, "relu");
  node->backprop = [](Node& self) {
    Tensor g = self.grad;
    const Tensor& in = self.inputs[0]->value;
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (in[i] <= 0.0) g[i] = 0.0;
    }
    self.inputs[0]->accumulate(g);
  };
  return node;
}

NodePtr sigmoid(const NodePtr& x) {
  Tensor out = x->value;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-out[i]));
  auto node = make_node(std::move(out), {x}, "sigmoid");
  node->backprop = [](Node& self) {
    Tensor g = self.grad;
    const Tensor& y = self.value;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] *= y[i] * (1.0 - y[i]);
    self.inputs[0]->accumulate(g);
  };
  return node;
}

NodePtr log_scalar(const NodePtr& x) {
  const double v = x->value.value();
  auto node = make_node(Tensor::scalar(std::log(v)), {x}, "log");
  node->backprop = [v](Node& self) {
    self.inputs[0]->accumulate(Tensor::scalar(self.grad.value() / v));
  };
  return node;
}

NodePtr add(const NodePtr& a, const NodePtr& b) {
  if (!a->value.same_shape(b->value)) {
    shape_error("add", a->value.shape_str() + " vs " + b->value.shape_str());
  }
  Tensor out = a->value;
  const double* bd = b->value.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bd[i];
  auto node = make_node(std::move(out), {a, b}, "add");
  node->backprop = [](Node& self) {
    self.inputs[0]->accumulate(self.grad);
    self.inputs[1]->accumulate(self.grad);
  };
  return node;
}

NodePtr sub(const NodePtr& a, const NodePtr& b) {
  if (!a->value.same_shape(b->value)) {
    shape_error("sub", a->value.shape_str() + " vs " + b->value.shape_str());
  }
  Tensor out = a->value;
  const double* bd = b->value.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bd[i];
  auto node = make_node(std::move(out), {a, b}, "sub");
  node->backprop = [](Node& self) {
    self.inputs[0]->accumulate(self.grad);
    Tensor neg = self.grad;
    for (std::size_t i = 0; i < neg.size(); ++i) neg[i] = -neg[i];
    self.inputs[1]->accumulate(neg);
  };
  return node;
}

NodePtr mul(const NodePtr& a, const NodePtr& b) {
  if (!a->value.same_shape(b->value)) {
    shape_error("mul", a->value.shape_str() + " vs " + b->value.shape_str());
  }
  Tensor out = a->value;
  const double* bd = b->value.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bd[i];
  auto node = make_node(std::move(out), {a, b}, "mul");
  node->backprop = [](Node& self) {
    Tensor ga = self.grad;
    const double* bv = self.inputs[1]->value.data();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] *= bv[i];
    self.inputs[0]->accumulate(ga);
    Tensor gb = self.grad;
    const double* av = self.inputs[0]->value.data();
    for (std::size_t i = 0; i < gb.size(); ++i) gb[i] *= av[i];
    self.inputs[1]->accumulate(gb);
  };
  return node;
}

NodePtr scale(const NodePtr& x, double c) {
  Tensor out = x->value;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= c;
  auto node = make_node(std::move(out), {x}, "scale");
  node->backprop = [c](Node& self) {
    Tensor g = self.grad;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] *= c;
    self.inputs[0]->accumulate(g);
  };
  return node;
}

NodePtr add_scalars(const std::vector<NodePtr>& xs) {
  if (xs.empty()) throw ArgumentError("add_scalars: empty input");
  double acc = 0.0;
  for (const auto& x : xs) acc += x->value.value();
  auto node = make_node(Tensor::scalar(acc), xs, "add_scalars");
  node->backprop = [](Node& self) {
    for (auto& in : self.inputs) in->accumulate(self.grad);
  };
  return node;
}

NodePtr blend(const NodePtr& p, const NodePtr& a, const NodePtr& b) {
  if (p->value.size() != 1) shape_error("blend", "gate must be scalar, got " + p->value.shape_str());
  if (!a->value.same_shape(b->value)) {
    shape_error("blend", a->value.shape_str() + " vs " + b->value.shape_str());
  }
  const double pv = p->value.value();
  Tensor out = a->value;
  const double* bd = b->value.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = pv * out[i] + (1.0 - pv) * bd[i];
  auto node = make_node(std::move(out), {p, a, b}, "blend");
  node->backprop = [pv](Node& self) {
    const double* g = self.grad.data();
    const double* av = self.inputs[1]->value.data();
    const double* bv = self.inputs[2]->value.data();
    if (self.inputs[0]->requires_grad) {
      double gp = 0.0;
      for (std::size_t i = 0; i < self.grad.size(); ++i) gp += g[i] * (av[i] - bv[i]);
      self.inputs[0]->accumulate(Tensor::scalar(gp));
    }
    if (self.inputs[1]->requires_grad) {
      Tensor ga = self.grad;
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] *= pv;
      self.inputs[1]->accumulate(ga);
    }
    if (self.inputs[2]->requires_grad) {
      Tensor gb = self.grad;
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] *= (1.0 - pv);
      self.inputs[2]->accumulate(gb);
    }
  };
  return node;
}

NodePtr global_avg_pool(const NodePtr& x) {
  const Tensor& xv = x->value;
  if (xv.rank() != 4) shape_error("global_avg_pool", "input must be rank 4, got " + xv.shape_str());
  const int n = xv.dim(0), c = xv.dim(1);
  const std::size_t hw = static_cast<std::size_t>(xv.dim(2)) * xv.dim(3);
  Tensor out({n, c});
  const double* in = xv.data();
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < c; ++j) {
      const double* row = in + (static_cast<std::size_t>(i) * c + j) * hw;
      double acc = 0.0;
      for (std::size_t t = 0; t < hw; ++t) acc += row[t];
      out[static_cast<std::size_t>(i) * c + j] = acc / static_cast<double>(hw);
    }
  }
  auto node = make_node(std::move(out), {x}, "gap");
  node->backprop = [n, c, hw](Node& self) {
    Tensor gin = Tensor::zeros_like(self.inputs[0]->value);
    const double* g = self.grad.data();
    double* gi = gin.data();
    const double inv = 1.0 / static_cast<double>(hw);
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < c; ++j) {
        const double gv = g[static_cast<std::size_t>(i) * c + j] * inv;
        double* row = gi + (static_cast<std::size_t>(i) * c + j) * hw;
        for (std::size_t t = 0; t < hw; ++t) row[t] = gv;
      }
    }
    self.inputs[0]->accumulate(gin);
  };
  return node;
}

NodePtr dense(const NodePtr& x, const NodePtr& w, const NodePtr& b) {
  const Tensor& xv = x->value;
  const Tensor& wv = w->value;
  const Tensor& bv = b->value;
  if (xv.rank() != 2 || wv.rank() != 2 || bv.rank() != 1) {
    shape_error("dense", "expected [N,F],[O,F],[O], got " + xv.shape_str() + "," + wv.shape_str() +
                             "," + bv.shape_str());
  }
  const int n = xv.dim(0), f = xv.dim(1), o = wv.dim(0);
  if (wv.dim(1) != f || bv.dim(0) != o) {
    shape_error("dense", "inconsistent dims " + xv.shape_str() + "," + wv.shape_str() + "," + bv.shape_str());
  }
  Tensor out({n, o});
  const double* xd = xv.data();
  const double* wd = wv.data();
  const double* bd = bv.data();
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < o; ++j) {
      const double* xr = xd + static_cast<std::size_t>(i) * f;
      const double* wr = wd + static_cast<std::size_t>(j) * f;
      double acc = bd[j];
      for (int t = 0; t < f; ++t) acc += xr[t] * wr[t];
      out[static_cast<std::size_t>(i) * o + j] = acc;
    }
  }
  auto node = make_node(std::move(out), {x, w, b}, "dense");
  node->backprop = [n, f, o](Node& self) {
    const double* g = self.grad.data();
    const double* xd = self.inputs[0]->value.data();
    const double* wd = self.inputs[1]->value.data();
    if (self.inputs[0]->requires_grad) {
      Tensor gx({n, f});
      for (int i = 0; i < n; ++i) {
        for (int j = 0; j < o; ++j) {
          const double gv = g[static_cast<std::size_t>(i) * o + j];
          const double* wr = wd + static_cast<std::size_t>(j) * f;
          double* gr = gx.data() + static_cast<std::size_t>(i) * f;
          for (int t = 0; t < f; ++t) gr[t] += gv * wr[t];
        }
      }
      self.inputs[0]->accumulate(gx);
    }
    if (self.inputs[1]->requires_grad) {
      Tensor gw({o, f});
      for (int i = 0; i < n; ++i) {
        const double* xr = xd + static_cast<std::size_t>(i) * f;
        for (int j = 0; j < o; ++j) {
          const double gv = g[static_cast<std::size_t>(i) * o + j];
          double* wr = gw.data() + static_cast<std::size_t>(j) * f;
          for (int t = 0; t < f; ++t) wr[t] += gv * xr[t];
        }
      }
      self.inputs[1]->accumulate(gw);
    }
    if (self.inputs[2]->requires_grad) {
      Tensor gb({o});
      for (int i = 0; i < n; ++i) {
        for (int j = 0; j < o; ++j) gb[static_cast<std::size_t>(j)] += g[static_cast<std::size_t>(i) * o + j];
      }
      self.inputs[2]->accumulate(gb);
    }
  };
  return node;
}

namespace {

void check_channel_indices(const std::vector<int>& idx, int width, const char* op) {
  int prev = -1;
  for (int i : idx) {
    if (i <= prev) throw StructuralError(std::string(op) + ": channel indices must be strictly ascending");
    if (i < 0 || i >= width) {
      throw StructuralError(std::string(op) + ": channel index " + std::to_string(i) +
                            " out of range [0," + std::to_string(width) + ")");
    }
    prev = i;
  }
}

}  // namespace

NodePtr scatter_channels(const NodePtr& x, const std::vector<int>& idx, int width) {
  const Tensor& xv = x->value;
  if (xv.rank() < 2) shape_error("scatter_channels", "input must have a channel dim, got " + xv.shape_str());
  const int n = xv.dim(0), c = xv.dim(1);
  if (static_cast<int>(idx.size()) != c) {
    shape_error("scatter_channels", "index count " + std::to_string(idx.size()) +
                                        " != channel count " + std::to_string(c));
  }
  check_channel_indices(idx, width, "scatter_channels");
  std::vector<int> oshape = xv.shape();
  oshape[1] = width;
  const std::size_t inner = xv.size() / (static_cast<std::size_t>(n) * c);
  Tensor out(oshape);
  const double* in = xv.data();
  double* o = out.data();
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < c; ++j) {
      const double* src = in + (static_cast<std::size_t>(i) * c + j) * inner;
      double* dst = o + (static_cast<std::size_t>(i) * width + idx[static_cast<std::size_t>(j)]) * inner;
      std::copy(src, src + inner, dst);
    }
  }
  auto node = make_node(std::move(out), {x}, "scatter_channels");
  node->backprop = [idx, n, c, width, inner](Node& self) {
    Tensor gx = Tensor::zeros_like(self.inputs[0]->value);
    const double* g = self.grad.data();
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < c; ++j) {
        const double* src = g + (static_cast<std::size_t>(i) * width + idx[static_cast<std::size_t>(j)]) * inner;
        double* dst = gx.data() + (static_cast<std::size_t>(i) * c + j) * inner;
        std::copy(src, src + inner, dst);
      }
    }
    self.inputs[0]->accumulate(gx);
  };
  return node;
}

NodePtr gather_channels(const NodePtr& x, const std::vector<int>& idx) {
  const Tensor& xv = x->value;
  if (xv.rank() < 2) shape_error("gather_channels", "input must have a channel dim, got " + xv.shape_str());
  const int n = xv.dim(0), c = xv.dim(1);
  check_channel_indices(idx, c, "gather_channels");
  const int cs = static_cast<int>(idx.size());
  std::vector<int> oshape = xv.shape();
  oshape[1] = cs;
  const std::size_t inner = xv.size() / (static_cast<std::size_t>(n) * c);
  Tensor out(oshape);
  const double* in = xv.data();
  double* o = out.data();
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < cs; ++j) {
      const double* src = in + (static_cast<std::size_t>(i) * c + idx[static_cast<std::size_t>(j)]) * inner;
      double* dst = o + (static_cast<std::size_t>(i) * cs + j) * inner;
      std::copy(src, src + inner, dst);
    }
  }
  auto node = make_node(std::move(out), {x}, "gather_channels");
  node->backprop = [idx, n, c, cs, inner](Node& self) {
    Tensor gx = Tensor::zeros_like(self.inputs[0]->value);
    const double* g = self.grad.data();
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < cs; ++j) {
        const double* src = g + (static_cast<std::size_t>(i) * cs + j) * inner;
        double* dst = gx.data() + (static_cast<std::size_t>(i) * c + idx[static_cast<std::size_t>(j)]) * inner;
        for (std::size_t t = 0; t < inner; ++t) dst[t] += src[t];
      }
    }
    self.inputs[0]->accumulate(gx);
  };
  return node;
}

NodePtr pick(const NodePtr& x, std::size_t flat_index) {
  if (flat_index >= x->value.size()) {
    shape_error("pick", "index " + std::to_string(flat_index) + " out of range for " + x->value.shape_str());
  }
  auto node = make_node(Tensor::scalar(x->value[flat_index]), {x}, "pick");
  node->backprop = [flat_index](Node& self) {
    Tensor g = Tensor::zeros_like(self.inputs[0]->value);
    g[flat_index] = self.grad.value();
    self.inputs[0]->accumulate(g);
  };
  return node;
}

NodePtr mean_all(const NodePtr& x) {
  const std::size_t n = x->value.size();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += x->value[i];
  auto node = make_node(Tensor::scalar(acc / static_cast<double>(n)), {x}, "mean");
  node->backprop = [n](Node& self) {
    Tensor g(self.inputs[0]->value.shape());
    const double gv = self.grad.value() / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) g[i] = gv;
    self.inputs[0]->accumulate(g);
  };
  return node;
}

NodePtr mean_rows(const NodePtr& x) {
  const Tensor& xv = x->value;
  if (xv.rank() != 2) shape_error("mean_rows", "input must be rank 2, got " + xv.shape_str());
  const int n = xv.dim(0), c = xv.dim(1);
  Tensor out({1, c});
  const double inv = 1.0 / static_cast<double>(n);
  for (int i = 0; i < n; ++i) {
    const double* row = xv.data() + static_cast<std::size_t>(i) * c;
    for (int j = 0; j < c; ++j) out[static_cast<std::size_t>(j)] += row[j] * inv;
  }
  auto node = make_node(std::move(out), {x}, "mean_rows");
  node->backprop = [n, c, inv](Node& self) {
    Tensor g({n, c});
    const double* gv = self.grad.data();
    for (int i = 0; i < n; ++i) {
      double* row = g.data() + static_cast<std::size_t>(i) * c;
      for (int j = 0; j < c; ++j) row[j] = gv[j] * inv;
    }
    self.inputs[0]->accumulate(g);
  };
  return node;
}

Tensor softmax_rows(const Tensor& logits) {
  if (logits.rank() != 2) throw StructuralError("softmax_rows: expected rank 2, got " + logits.shape_str());
  const int n = logits.dim(0), c = logits.dim(1);
  Tensor out = logits;
  for (int i = 0; i < n; ++i) {
    double* row = out.data() + static_cast<std::size_t>(i) * c;
    double mx = row[0];
    for (int j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (int j = 0; j < c; ++j) {
      row[j] = std::exp(row[j] - mx);
      sum += row[j];
    }
    for (int j = 0; j < c; ++j) row[j] /= sum;
  }
  return out;
}

int argmax_row(const Tensor& t, int row) {
  const int c = t.dim(1);
  const double* r = t.data() + static_cast<std::size_t>(row) * c;
  int best = 0;
  for (int j = 1; j < c; ++j) {
    if (r[j] > r[best]) best = j;
  }
  return best;
}

NodePtr softmax_xent_mean(const NodePtr& logits, const std::vector<int>& labels) {
  const Tensor& lv = logits->value;
  if (lv.rank() != 2) shape_error("softmax_xent", "logits must be rank 2, got " + lv.shape_str());
  const int n = lv.dim(0), c = lv.dim(1);
  if (static_cast<int>(labels.size()) != n) {
    shape_error("softmax_xent", "label count " + std::to_string(labels.size()) + " != batch " + std::to_string(n));
  }
  for (int y : labels) {
    if (y < 0 || y >= c) shape_error("softmax_xent", "label " + std::to_string(y) + " out of range");
  }
  Tensor probs = softmax_rows(lv);
  double loss = 0.0;
  for (int i = 0; i < n; ++i) {
    const double p = probs[static_cast<std::size_t>(i) * c + labels[static_cast<std::size_t>(i)]];
    loss -= std::log(std::max(p, 1e-300));
  }
  loss /= static_cast<double>(n);
  auto node = make_node(Tensor::scalar(loss), {logits}, "softmax_xent");
  node->backprop = [probs, labels, n, c](Node& self) {
    Tensor g = probs;
    const double gv = self.grad.value() / static_cast<double>(n);
    for (int i = 0; i < n; ++i) {
      g[static_cast<std::size_t>(i) * c + labels[static_cast<std::size_t>(i)]] -= 1.0;
    }
    for (std::size_t t = 0; t < g.size(); ++t) g[t] *= gv;
    self.inputs[0]->accumulate(g);
  };
  return node;
}

NodePtr mse_mean(const NodePtr& pred, const Tensor& target) {
  if (!pred->value.same_shape(target)) {
    shape_error("mse", pred->value.shape_str() + " vs " + target.shape_str());
  }
  const std::size_t n = target.size();
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = pred->value[i] - target[i];
    loss += d * d;
  }
  loss /= static_cast<double>(n);
  auto node = make_node(Tensor::scalar(loss), {pred}, "mse");
  node->backprop = [target, n](Node& self) {
    Tensor g = self.inputs[0]->value;
    const double gv = 2.0 * self.grad.value() / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) g[i] = gv * (g[i] - target[i]);
    self.inputs[0]->accumulate(g);
  };
  return node;
}

void backward(const NodePtr& loss) {
  if (loss->value.size() != 1) {
    throw CapabilityError("backward: loss must be scalar, got shape " + loss->value.shape_str());
  }
  // Post-order DFS, iterative to survive deep graphs.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(loss.get(), 0);
  seen.insert(loss.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) {
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  loss->accumulate(Tensor::scalar(1.0));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->has_grad && n->backprop) n->backprop(*n);
  }
}

ParamSet grad_of(const std::function<NodePtr(const std::map<std::string, NodePtr>&)>& loss_fn,
                 const ParamSet& params) {
  std::map<std::string, NodePtr> leaves;
  for (const auto& [id, t] : params) leaves.emplace(id, leaf(t));
  NodePtr loss = loss_fn(leaves);
  if (!loss) throw CapabilityError("grad_of: loss function returned no node");
  if (loss->value.size() != 1) {
    throw CapabilityError("grad_of: loss must be scalar, got shape " + loss->value.shape_str());
  }
  backward(loss);
  ParamSet grads;
  for (const auto& [id, node] : leaves) {
    grads.emplace(id, node->has_grad ? node->grad : Tensor::zeros_like(node->value));
  }
  return grads;
}

}  // namespace cfl::ag
