#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "psvit/dataset.hpp"
#include "psvit/supernet.hpp"

namespace psvit {

struct OptimizerConfig {
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  bool cosine = true;  // anneal lr to 0 across total steps
};

// SGD with momentum. Only parameters that received a gradient this iteration
// are touched: inactive supernet paths stay bit-identical, including their
// velocity buffers.
class SgdMomentum {
public:
  explicit SgdMomentum(OptimizerConfig cfg) : cfg_(cfg) {}

  void step(const std::vector<std::pair<std::string, Tensor>>& params, double lr);

  const OptimizerConfig& config() const { return cfg_; }
  const std::map<std::string, std::vector<double>>& velocities() const { return velocity_; }
  void set_velocities(std::map<std::string, std::vector<double>> v) { velocity_ = std::move(v); }

private:
  OptimizerConfig cfg_;
  std::map<std::string, std::vector<double>> velocity_;
};

double cosine_lr(double base_lr, std::size_t step, std::size_t total_steps);

struct TrainConfig {
  std::size_t steps = 1000;
  std::size_t batch_size = 8;
  OptimizerConfig opt;
  double label_smoothing = 0.1;
  std::size_t start_step = 0;          // resume offset; the schedule uses absolute steps
  std::size_t eval_every = 0;          // 0 = never
  double stop_at_train_acc = 0.0;      // early stop threshold, 0 = off
  std::optional<Path> fixed_path;      // supernet only: train this path instead of sampling
  std::size_t checkpoint_every = 0;    // 0 = never; fires the checkpoint callback
  // Momentum buffers restored from a checkpoint when resuming.
  std::map<std::string, std::vector<double>> resume_velocities;
};

struct TrainStep {
  std::size_t step = 0;
  double loss = 0.0;
  double lr = 0.0;
  std::string path;  // empty for standalone models
};

struct TrainResult {
  std::vector<TrainStep> log;
  bool aborted_nan = false;
  std::size_t abort_step = 0;
  std::size_t steps_run = 0;
  bool early_stopped = false;
  // Momentum buffers at exit, for writing a resumable final checkpoint.
  std::map<std::string, std::vector<double>> final_velocities;
};

// Fired after an optimizer step so drivers can persist exact state.
using CheckpointFn = std::function<void(std::size_t step, const SgdMomentum& opt, const Rng& rng)>;

TrainResult train_model(GenotypeModel& model, const Dataset& ds, const TrainConfig& cfg, Rng& rng,
                        const CheckpointFn& checkpoint_cb = {});

// One uniformly sampled path per iteration; only that path's parameters (plus
// the shared backbone) receive gradients and optimizer updates.
TrainResult train_supernet(Supernet& net, const Dataset& ds, const TrainConfig& cfg, Rng& rng,
                           const CheckpointFn& checkpoint_cb = {});

double evaluate_model(const GenotypeModel& model, const Dataset& ds, Split split);

// Forward-only evaluation with weights inherited from the supernet.
double evaluate_subnet(const Supernet& net, const Path& path, const Dataset& ds, Split split);

}  // namespace psvit
