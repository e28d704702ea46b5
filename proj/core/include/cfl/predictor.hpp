#pragma once

#include <string>
#include <vector>

#include "cfl/arch.hpp"
#include "cfl/param_set.hpp"

namespace cfl {

constexpr int kQualityLevels = 5;

// Fixed-length arch representation: per-group depth one-hots (G x D_max),
// per-slot width ratios with 0 for inactive slots (G x D_max), and a 5-way
// quality one-hot. Total length G*D_max*2 + 5.
std::vector<double> encode_arch(const SupernetConfig& cfg, const ArchDescriptor& arch, int quality);

int encoding_length(const SupernetConfig& cfg);

// One predictor sample collected after a worker's local training round.
struct TrainingProfile {
  int round = 0;
  int quality = 0;
  std::vector<double> encoding;
  double accuracy = 0.0;  // observed local test accuracy, in [0,1]
};

// Profile log lines: t=<round> q=<level> enc=<csv> acc=<f64>
void save_profiles(const std::vector<TrainingProfile>& profiles, const std::string& path);
std::vector<TrainingProfile> load_profiles(const std::string& path);

// Four-layer feed-forward regressor from (arch encoding ++ quality one-hot)
// to a sigmoid-squashed accuracy estimate. Trained online, one epoch over the
// cumulative profile set per FL round; flips `converged` once the held-out
// MSE falls under the threshold.
class AccuracyPredictor {
 public:
  AccuracyPredictor(const SupernetConfig& cfg, std::uint64_t seed);

  double predict(const std::vector<double>& encoding) const;
  double predict(const ArchDescriptor& arch, int quality) const;

  // One epoch of MSE regression over `profiles` (every 5th sample is held out
  // for the convergence check and skipped during training).
  void train_round(const std::vector<TrainingProfile>& profiles);

  bool converged() const { return converged_; }
  int epochs_trained() const { return epochs_; }
  double last_validation_mse() const { return val_mse_; }

  const ParamSet& params() const { return params_; }
  ParamSet& params() { return params_; }

  double learning_rate = 0.1;
  double convergence_threshold = 1e-3;
  int batch_size = 16;

 private:
  SupernetConfig cfg_;
  ParamSet params_;
  int input_dim_;
  int epochs_ = 0;
  bool converged_ = false;
  double val_mse_ = -1.0;
  std::uint64_t seed_;
};

}  // namespace cfl
