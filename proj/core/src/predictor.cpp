#include "cfl/predictor.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "cfl/autograd.hpp"
#include "cfl/errors.hpp"

namespace cfl {

namespace {

constexpr int kHidden1 = 64;
constexpr int kHidden2 = 64;
constexpr int kHidden3 = 32;

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

Tensor he_tensor(std::vector<int> shape, int fan_in, Rng& rng) {
  Tensor t(std::move(shape));
  const double std_dev = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.normal() * std_dev;
  return t;
}

}  // namespace

int encoding_length(const SupernetConfig& cfg) { return cfg.groups * cfg.depth_max * 2 + kQualityLevels; }

std::vector<double> encode_arch(const SupernetConfig& cfg, const ArchDescriptor& arch, int quality) {
  validate_arch(cfg, arch);
  if (quality < 0 || quality >= kQualityLevels) {
    throw ArgumentError("quality level " + std::to_string(quality) + " outside 0.." +
                        std::to_string(kQualityLevels - 1));
  }
  std::vector<double> enc(static_cast<std::size_t>(encoding_length(cfg)), 0.0);
  const int gd = cfg.depth_max;
  for (int g = 0; g < cfg.groups; ++g) {
    const int d = arch.depth[static_cast<std::size_t>(g)];
    enc[static_cast<std::size_t>(g * gd + (d - 1))] = 1.0;
    const double wmax = static_cast<double>(cfg.widths[static_cast<std::size_t>(g)]);
    for (int s = 0; s < d; ++s) {
      enc[static_cast<std::size_t>(cfg.groups * gd + g * gd + s)] =
          static_cast<double>(arch.channels[static_cast<std::size_t>(g)][static_cast<std::size_t>(s)].size()) /
          wmax;
    }
  }
  enc[static_cast<std::size_t>(2 * cfg.groups * gd + quality)] = 1.0;
  return enc;
}

void save_profiles(const std::vector<TrainingProfile>& profiles, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open for writing: " + path);
  for (const auto& p : profiles) {
    os << "t=" << p.round << " q=" << p.quality << " enc=";
    for (std::size_t i = 0; i < p.encoding.size(); ++i) {
      if (i) os << ",";
      os << fmt_double(p.encoding[i]);
    }
    os << " acc=" << fmt_double(p.accuracy) << "\n";
  }
  if (!os) throw IoError("write failed: " + path);
}

std::vector<TrainingProfile> load_profiles(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open: " + path);
  std::vector<TrainingProfile> out;
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    TrainingProfile p;
    bool have_acc = false;
    std::istringstream ls(line);
    std::string tok;
    while (ls >> tok) {
      if (tok.rfind("t=", 0) == 0) p.round = std::stoi(tok.substr(2));
      else if (tok.rfind("q=", 0) == 0) p.quality = std::stoi(tok.substr(2));
      else if (tok.rfind("acc=", 0) == 0) { p.accuracy = std::stod(tok.substr(4)); have_acc = true; }
      else if (tok.rfind("enc=", 0) == 0) {
        std::istringstream es(tok.substr(4));
        std::string num;
        while (std::getline(es, num, ',')) p.encoding.push_back(std::stod(num));
      } else {
        throw IoError(path + ":" + std::to_string(line_no) + ": unexpected token '" + tok + "'");
      }
    }
    if (!have_acc || p.encoding.empty()) {
      throw IoError(path + ":" + std::to_string(line_no) + ": malformed profile line");
    }
    out.push_back(std::move(p));
  }
  return out;
}

AccuracyPredictor::AccuracyPredictor(const SupernetConfig& cfg, std::uint64_t seed)
    : cfg_(cfg), input_dim_(encoding_length(cfg)), seed_(seed) {
  Rng rng(subseed(seed, {0x70726564ULL}));
  params_.emplace("fc1.w", he_tensor({kHidden1, input_dim_}, input_dim_, rng));
  params_.emplace("fc1.b", Tensor({kHidden1}));
  params_.emplace("fc2.w", he_tensor({kHidden2, kHidden1}, kHidden1, rng));
  params_.emplace("fc2.b", Tensor({kHidden2}));
  params_.emplace("fc3.w", he_tensor({kHidden3, kHidden2}, kHidden2, rng));
  params_.emplace("fc3.b", Tensor({kHidden3}));
  params_.emplace("out.w", he_tensor({1, kHidden3}, kHidden3, rng));
  params_.emplace("out.b", Tensor({1}));
}

namespace {

ag::NodePtr predictor_graph(const std::map<std::string, ag::NodePtr>& p, const ag::NodePtr& x) {
  auto h1 = ag::relu(ag::dense(x, p.at("fc1.w"), p.at("fc1.b")));
  auto h2 = ag::relu(ag::dense(h1, p.at("fc2.w"), p.at("fc2.b")));
  auto h3 = ag::relu(ag::dense(h2, p.at("fc3.w"), p.at("fc3.b")));
  return ag::sigmoid(ag::dense(h3, p.at("out.w"), p.at("out.b")));
}

Tensor batch_tensor(const std::vector<TrainingProfile>& profiles, const std::vector<std::size_t>& idx,
                    int input_dim) {
  Tensor x({static_cast<int>(idx.size()), input_dim});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const auto& enc = profiles[idx[i]].encoding;
    if (static_cast<int>(enc.size()) != input_dim) {
      throw StructuralError("profile encoding length " + std::to_string(enc.size()) +
                            " does not match predictor input " + std::to_string(input_dim));
    }
    std::copy(enc.begin(), enc.end(), x.data() + i * static_cast<std::size_t>(input_dim));
  }
  return x;
}

}  // namespace

double AccuracyPredictor::predict(const std::vector<double>& encoding) const {
  if (static_cast<int>(encoding.size()) != input_dim_) {
    throw StructuralError("encoding length " + std::to_string(encoding.size()) +
                          " does not match predictor input " + std::to_string(input_dim_));
  }
  for (double v : encoding) {
    if (!std::isfinite(v)) throw ArgumentError("non-finite value in predictor input");
  }
  auto nodes = [this] {
    std::map<std::string, ag::NodePtr> m;
    for (const auto& [id, t] : params_) m.emplace(id, ag::constant(t));
    return m;
  }();
  Tensor x({1, input_dim_}, std::vector<double>(encoding));
  return predictor_graph(nodes, ag::constant(x))->value.value();
}

double AccuracyPredictor::predict(const ArchDescriptor& arch, int quality) const {
  return predict(encode_arch(cfg_, arch, quality));
}

void AccuracyPredictor::train_round(const std::vector<TrainingProfile>& profiles) {
  if (profiles.empty()) throw ArgumentError("train_round: no profiles");
  std::vector<std::size_t> train_idx, val_idx;
  for (std::size_t i = 0; i < profiles.size(); ++i) {
    // Every 5th sample is the held-out 20% used for the convergence check.
    if (profiles.size() >= 5 && i % 5 == 4) val_idx.push_back(i);
    else train_idx.push_back(i);
  }

  Rng rng(subseed(seed_, {0x65706f63ULL, static_cast<std::uint64_t>(epochs_)}));
  std::vector<int> order = rng.permutation(static_cast<int>(train_idx.size()));
  for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(batch_size));
    std::vector<std::size_t> batch;
    batch.reserve(end - start);
    for (std::size_t i = start; i < end; ++i) batch.push_back(train_idx[static_cast<std::size_t>(order[i])]);
    Tensor x = batch_tensor(profiles, batch, input_dim_);
    Tensor y({static_cast<int>(batch.size()), 1});
    for (std::size_t i = 0; i < batch.size(); ++i) y[i] = profiles[batch[i]].accuracy;

    ParamSet grads = ag::grad_of(
        [&](const std::map<std::string, ag::NodePtr>& leaves) {
          return ag::mse_mean(predictor_graph(leaves, ag::constant(x)), y);
        },
        params_);
    sgd_step_inplace(params_, grads, learning_rate);
  }
  epochs_ += 1;

  if (!val_idx.empty()) {
    double mse = 0.0;
    for (std::size_t i : val_idx) {
      const double d = predict(profiles[i].encoding) - profiles[i].accuracy;
      mse += d * d;
    }
    val_mse_ = mse / static_cast<double>(val_idx.size());
    if (val_mse_ < convergence_threshold) converged_ = true;
  }
}

}  // namespace cfl
