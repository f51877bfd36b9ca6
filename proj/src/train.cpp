#include "psvit/train.hpp"

#include <cmath>

#include "psvit/errors.hpp"

namespace psvit {

void SgdMomentum::step(const std::vector<std::pair<std::string, Tensor>>& params, double lr) {
  for (const auto& [name, t] : params) {
    if (!t.has_grad()) continue;
    auto& w = const_cast<Tensor&>(t).data();
    const auto& g = t.grad();
    auto& v = velocity_[name];
    if (v.empty()) v.assign(w.size(), 0.0);
    for (std::size_t i = 0; i < w.size(); ++i) {
      v[i] = cfg_.momentum * v[i] + g[i] + cfg_.weight_decay * w[i];
      w[i] -= lr * v[i];
    }
  }
}

double cosine_lr(double base_lr, std::size_t step, std::size_t total_steps) {
  if (total_steps == 0) return base_lr;
  const double t = static_cast<double>(step) / static_cast<double>(total_steps);
  return 0.5 * base_lr * (1.0 + std::cos(3.14159265358979323846 * t));
}

namespace {

struct Batch {
  std::vector<std::size_t> indices;
  std::vector<std::size_t> labels;
};

Batch draw_batch(const Dataset& ds, std::size_t batch_size, Rng& rng) {
  const auto& pool = ds.train_indices;
  if (pool.empty()) throw ContractError("training split is empty");
  Batch b;
  for (std::size_t i = 0; i < batch_size; ++i) {
    const std::uint32_t idx = pool[rng.next_below(pool.size())];
    b.indices.push_back(idx);
    b.labels.push_back(ds.labels[idx]);
  }
  return b;
}

using ForwardFn = std::function<Tensor(const Tensor& image)>;
using ParamsOf = std::function<std::vector<std::pair<std::string, Tensor>>()>;

TrainResult run_training(const Dataset& ds, const TrainConfig& cfg, Rng& rng,
                         const ForwardFn& forward, const ParamsOf& step_params,
                         const std::function<std::string(Rng&)>& pick_path,
                         const std::function<double()>& train_accuracy,
                         SgdMomentum& opt, const CheckpointFn& checkpoint_cb) {
  TrainResult result;
  struct VelocityCapture {
    TrainResult& r;
    SgdMomentum& o;
    ~VelocityCapture() { r.final_velocities = o.velocities(); }
  } capture{result, opt};
  for (std::size_t step = cfg.start_step; step < cfg.steps; ++step) {
    std::string path_str;
    if (pick_path) path_str = pick_path(rng);
    const Batch batch = draw_batch(ds, cfg.batch_size, rng);

    Tensor loss;
    double loss_value = std::nan("");
    try {
      std::vector<Tensor> logits;
      logits.reserve(batch.indices.size());
      for (std::size_t idx : batch.indices) logits.push_back(forward(ds.image_tensor(idx)));
      loss = cross_entropy(concat_rows(logits), batch.labels, cfg.label_smoothing);
      loss_value = loss.scalar();
    } catch (const NumericError&) {
      // overflowed activations surface as a non-finite-loss abort
    }
    const double lr = cfg.opt.cosine ? cosine_lr(cfg.opt.lr, step, cfg.steps) : cfg.opt.lr;
    result.log.push_back({step, loss_value, lr, path_str});

    if (!std::isfinite(loss_value)) {
      result.aborted_nan = true;
      result.abort_step = step;
      return result;
    }

    auto params = step_params();
    for (auto& [name, t] : params) t.zero_grad();
    loss.backward();
    opt.step(params, lr);
    result.steps_run = step + 1;

    if (cfg.checkpoint_every && checkpoint_cb && (step + 1) % cfg.checkpoint_every == 0) {
      checkpoint_cb(step + 1, opt, rng);
    }
    if (cfg.eval_every && cfg.stop_at_train_acc > 0.0 && (step + 1) % cfg.eval_every == 0) {
      if (train_accuracy() >= cfg.stop_at_train_acc) {
        result.early_stopped = true;
        return result;
      }
    }
  }
  return result;
}

double accuracy_over(const std::vector<std::uint32_t>& indices, const Dataset& ds,
                     const ForwardFn& forward) {
  if (indices.empty()) throw ContractError("evaluation split is empty");
  NoGradGuard guard;
  std::size_t hits = 0;
  for (std::uint32_t idx : indices) {
    const Tensor logits = forward(ds.image_tensor(idx));
    const auto& row = logits.data();
    std::size_t best = 0;
    for (std::size_t j = 1; j < row.size(); ++j) {
      if (row[j] > row[best]) best = j;
    }
    if (best == ds.labels[idx]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(indices.size());
}

}  // namespace

TrainResult train_model(GenotypeModel& model, const Dataset& ds, const TrainConfig& cfg, Rng& rng,
                        const CheckpointFn& checkpoint_cb) {
  SgdMomentum opt(cfg.opt);
  if (!cfg.resume_velocities.empty()) opt.set_velocities(cfg.resume_velocities);
  auto forward = [&model](const Tensor& img) { return model.forward(img); };
  auto params = [&model]() {
    std::vector<std::pair<std::string, Tensor>> out;
    model.visit_params([&out](const std::string& n, Tensor& t) { out.emplace_back(n, t); });
    return out;
  };
  auto train_acc = [&]() { return accuracy_over(ds.train_indices, ds, forward); };
  return run_training(ds, cfg, rng, forward, params, nullptr, train_acc, opt, checkpoint_cb);
}

TrainResult train_supernet(Supernet& net, const Dataset& ds, const TrainConfig& cfg, Rng& rng,
                           const CheckpointFn& checkpoint_cb) {
  SgdMomentum opt(cfg.opt);
  if (!cfg.resume_velocities.empty()) opt.set_velocities(cfg.resume_velocities);
  Path active;
  auto pick = [&](Rng& r) {
    active = cfg.fixed_path ? *cfg.fixed_path : sample_path(net.cfg.total_cells(), r);
    return path_to_string(active);
  };
  auto forward = [&](const Tensor& img) { return net.forward(active, img); };
  auto params = [&]() {
    std::vector<std::pair<std::string, Tensor>> out;
    net.visit_path_params(active, [&out](const std::string& n, Tensor& t) {
      out.emplace_back(n, t);
    });
    return out;
  };
  auto train_acc = [&]() { return accuracy_over(ds.train_indices, ds, forward); };
  return run_training(ds, cfg, rng, forward, params, pick, train_acc, opt, checkpoint_cb);
}

double evaluate_model(const GenotypeModel& model, const Dataset& ds, Split split) {
  return accuracy_over(ds.indices(split), ds,
                       [&model](const Tensor& img) { return model.forward(img); });
}

double evaluate_subnet(const Supernet& net, const Path& path, const Dataset& ds, Split split) {
  net.check_path(path);
  return accuracy_over(ds.indices(split), ds,
                       [&](const Tensor& img) { return net.forward(path, img); });
}

}  // namespace psvit
