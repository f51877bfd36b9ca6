#include <doctest.h>

#include <cmath>

#include "psvit/checkpoint.hpp"
#include "psvit/train.hpp"

using namespace psvit;

namespace {

Dataset toy_data(std::size_t count = 40) {
  DatasetSpec spec;
  spec.seed = 7;
  spec.count = count;
  return generate_dataset(spec);
}

}  // namespace

TEST_CASE("fixed all-basic path overfits one 8-example batch") {
  const SupernetConfig cfg = SupernetConfig::toy_reduced();
  Supernet net(cfg, 1);
  Dataset ds = toy_data();
  ds.train_indices = {0, 1, 2, 3, 4, 5, 6, 7};  // a single toy batch

  TrainConfig tc;
  tc.steps = 300;
  tc.batch_size = 8;
  tc.label_smoothing = 0.0;  // the loss floor of smoothed CE is ~0.5
  tc.opt.lr = 0.15;
  tc.opt.cosine = false;
  tc.opt.weight_decay = 0.0;
  tc.fixed_path = Path(4, CellChoice::Basic);
  Rng rng(2);
  const TrainResult result = train_supernet(net, ds, tc, rng);
  REQUIRE_FALSE(result.aborted_nan);
  CHECK(result.steps_run == 300);
  CHECK(result.log.back().loss < 0.05);
}

TEST_CASE("training trajectories are deterministic under a fixed seed") {
  auto run = [] {
    const SupernetConfig cfg = SupernetConfig::toy_reduced();
    Supernet net(cfg, 5);
    const Dataset ds = toy_data();
    TrainConfig tc;
    tc.steps = 25;
    tc.batch_size = 4;
    Rng rng(11);
    std::vector<double> losses;
    for (const auto& entry : train_supernet(net, ds, tc, rng).log) losses.push_back(entry.loss);
    return losses;
  };
  CHECK(run() == run());
}

TEST_CASE("resume from a checkpoint replays the unbroken trajectory") {
  const Genotype g = preset_genotype("toy");
  const Dataset ds = toy_data();

  TrainConfig tc;
  tc.steps = 12;
  tc.batch_size = 4;
  tc.opt.lr = 0.05;

  // unbroken run, snapshotting exact state at step 6
  GenotypeModel model(g, 3);
  Rng rng_a(13);
  Checkpoint saved;
  TrainConfig tc_ckpt = tc;
  tc_ckpt.checkpoint_every = 6;
  const TrainResult full = train_model(
      model, ds, tc_ckpt, rng_a,
      [&](std::size_t step, const SgdMomentum& opt, const Rng& rng) {
        if (step == 6) saved = make_checkpoint(model, &opt, &rng, step);
      });
  REQUIRE(full.steps_run == 12);
  REQUIRE(saved.iteration == 6);

  // resumed run over the same schedule horizon
  GenotypeModel resumed = model_from_checkpoint(saved);
  TrainConfig tc_resume = tc;
  tc_resume.start_step = saved.iteration;
  tc_resume.resume_velocities = checkpoint_velocities(saved);
  Rng rng_b(0);
  rng_b.set_state(saved.rng_state);
  const TrainResult rest = train_model(resumed, ds, tc_resume, rng_b);

  REQUIRE(full.log.size() == 12);
  REQUIRE(rest.log.size() == 6);
  for (std::size_t i = 0; i < 6; ++i) {
    CHECK(full.log[6 + i].loss == rest.log[i].loss);  // bit-exact
  }
}

TEST_CASE("exploding optimization aborts with a diagnostic record") {
  const Genotype g = preset_genotype("toy");
  GenotypeModel model(g, 7);
  const Dataset ds = toy_data();
  TrainConfig tc;
  tc.steps = 60;
  tc.batch_size = 4;
  tc.opt.lr = 1e9;
  tc.opt.cosine = false;
  Rng rng(17);
  const TrainResult result = train_model(model, ds, tc, rng);
  CHECK(result.aborted_nan);
  CHECK(result.abort_step < 60);
  CHECK_FALSE(std::isfinite(result.log.back().loss));
}

TEST_CASE("early stopping on train accuracy") {
  const SupernetConfig cfg = SupernetConfig::toy_reduced();
  Supernet net(cfg, 29);
  Dataset ds = toy_data();
  ds.train_indices = {0, 1, 2, 3};
  TrainConfig tc;
  tc.steps = 400;
  tc.batch_size = 4;
  tc.label_smoothing = 0.0;
  tc.opt.lr = 0.1;
  tc.opt.cosine = false;
  tc.fixed_path = path_from_string("BIII");
  tc.eval_every = 10;
  tc.stop_at_train_acc = 1.0;
  Rng rng(31);
  const TrainResult result = train_supernet(net, ds, tc, rng);
  CHECK(result.early_stopped);
  CHECK(result.steps_run < 400);
}
