#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "psvit/checkpoint.hpp"
#include "psvit/errors.hpp"
#include "psvit/flops.hpp"
#include "psvit/search.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace psvit;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitDomain = 1;
constexpr int kExitUsage = 2;

Genotype load_genotype(const std::string& preset, const std::string& file) {
  if (!preset.empty() && !file.empty()) {
    throw ContractError("give either --preset or --genotype, not both");
  }
  if (!preset.empty()) return preset_genotype(preset);
  if (file.empty()) throw ContractError("a genotype is required (--preset or --genotype)");
  std::ifstream in(file);
  if (!in) throw IoError("IO", "cannot open " + file);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return genotype_from_json(text);
}

void emit(const std::string& text, const std::string& out_file) {
  if (out_file.empty()) {
    std::cout << text;
    if (text.empty() || text.back() != '\n') std::cout << '\n';
  } else {
    std::ofstream out(out_file, std::ios::binary);
    out << text;
    if (!out) throw IoError("IO", "cannot write " + out_file);
  }
}

json genotype_summary(const Genotype& g) {
  const FlopsReport report = count_flops(g);
  const ParamBreakdown params = count_params(g);
  json stages = json::array();
  for (const auto& s : g.stages) {
    json js{{"tokens", s.tokens},
            {"dim", s.dim},
            {"heads", s.heads},
            {"layers", s.realized_layers().size()}};
    if (s.is_manual()) {
      std::string flags;
      for (const auto& l : *s.manual_layers) flags.push_back(l.share_from_previous ? 's' : 'L');
      js["share_flags"] = flags;
    } else {
      std::string cells;
      for (CellChoice c : s.cells) cells.push_back(cell_char(c));
      js["cells"] = cells;
    }
    stages.push_back(js);
  }
  return json{{"pooling_mode", to_string(g.pooling_mode)},
              {"patch",
               {{"image", g.patch.image_size},
                {"patch", g.patch.patch_size},
                {"channels", g.patch.in_channels},
                {"cls", g.patch.use_cls_token}}},
              {"stages", stages},
              {"num_classes", g.num_classes},
              {"realized_depth", g.realized_depth()},
              {"total_macs", report.total_macs()},
              {"total_params", report.total_params()},
              {"attention_macs", report.attention_macs()},
              {"params",
               {{"attention", params.attention},
                {"mlp", params.mlp},
                {"norm", params.norm},
                {"embed", params.embed},
                {"pools", params.pools},
                {"head", params.head}}}};
}

std::string describe_text(const Genotype& g) {
  const json j = genotype_summary(g);
  std::ostringstream os;
  os << "pooling mode   " << j["pooling_mode"].get<std::string>() << "\n"
     << "patch          " << g.patch.image_size << "px / " << g.patch.patch_size << "px, "
     << g.patch.in_channels << " ch, cls=" << (g.patch.use_cls_token ? "yes" : "no") << "\n"
     << "classes        " << g.num_classes << "\n"
     << "realized depth " << g.realized_depth() << "\n";
  for (std::size_t i = 0; i < g.stages.size(); ++i) {
    const auto& s = g.stages[i];
    os << "stage " << i << "        tokens " << s.tokens << ", dim " << s.dim << ", heads "
       << s.heads << ", layers " << s.realized_layers().size();
    if (s.is_manual()) {
      os << ", flags ";
      for (const auto& l : *s.manual_layers) os << (l.share_from_previous ? 's' : 'L');
    } else {
      os << ", cells ";
      for (CellChoice c : s.cells) os << cell_char(c);
    }
    os << "\n";
  }
  os << "total MACs     " << j["total_macs"].get<std::uint64_t>() << "\n"
     << "total params   " << j["total_params"].get<std::uint64_t>() << "\n";
  return os.str();
}

SupernetConfig space_by_name(const std::string& name) {
  if (name == "toy") return SupernetConfig::toy();
  if (name == "toy-reduced") return SupernetConfig::toy_reduced();
  throw ContractError("unknown search space '" + name + "' (toy, toy-reduced)");
}

struct CommonTrainOpts {
  std::string data_dir;
  std::string out_dir;
  std::size_t steps = 3000;
  std::size_t batch = 8;
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  double smoothing = 0.1;
  bool no_cosine = false;
  std::uint64_t seed = 0;
  std::size_t checkpoint_every = 500;
  std::size_t eval_every = 0;
  double stop_at = 0.0;
  std::string resume;
};

void add_train_opts(CLI::App* cmd, CommonTrainOpts& o) {
  cmd->add_option("--data", o.data_dir, "dataset directory")->required();
  cmd->add_option("--out", o.out_dir, "output directory")->required();
  cmd->add_option("--steps", o.steps, "training steps");
  cmd->add_option("--batch", o.batch, "batch size");
  cmd->add_option("--lr", o.lr, "base learning rate");
  cmd->add_option("--momentum", o.momentum, "SGD momentum");
  cmd->add_option("--weight-decay", o.weight_decay, "L2 coefficient");
  cmd->add_option("--label-smoothing", o.smoothing, "label smoothing ratio");
  cmd->add_flag("--no-cosine", o.no_cosine, "constant learning rate");
  cmd->add_option("--seed", o.seed, "RNG seed");
  cmd->add_option("--checkpoint-every", o.checkpoint_every, "steps between checkpoints");
  cmd->add_option("--eval-every", o.eval_every, "steps between train-accuracy probes");
  cmd->add_option("--stop-at-train-acc", o.stop_at, "early-stop threshold");
  cmd->add_option("--resume", o.resume, "checkpoint to resume from");
}

TrainConfig to_train_config(const CommonTrainOpts& o) {
  TrainConfig tc;
  tc.steps = o.steps;
  tc.batch_size = o.batch;
  tc.opt.lr = o.lr;
  tc.opt.momentum = o.momentum;
  tc.opt.weight_decay = o.weight_decay;
  tc.opt.cosine = !o.no_cosine;
  tc.label_smoothing = o.smoothing;
  tc.checkpoint_every = o.checkpoint_every;
  tc.eval_every = o.eval_every;
  tc.stop_at_train_acc = o.stop_at;
  return tc;
}

json train_opts_json(const CommonTrainOpts& o) {
  return json{{"version", 1},
              {"data", o.data_dir},
              {"out", o.out_dir},
              {"steps", o.steps},
              {"batch", o.batch},
              {"lr", o.lr},
              {"momentum", o.momentum},
              {"weight_decay", o.weight_decay},
              {"label_smoothing", o.smoothing},
              {"cosine", !o.no_cosine},
              {"seed", o.seed},
              {"checkpoint_every", o.checkpoint_every},
              {"eval_every", o.eval_every},
              {"stop_at_train_acc", o.stop_at},
              {"resume", o.resume}};
}

void write_step_log(const fs::path& file, const TrainResult& result) {
  std::ofstream log(file);
  for (const auto& entry : result.log) {
    json j{{"step", entry.step}, {"loss", entry.loss}, {"lr", entry.lr}};
    if (!entry.path.empty()) j["path"] = entry.path;
    log << j.dump() << '\n';
  }
}

int abort_record(const TrainResult& result, const CommonTrainOpts& o) {
  const json abort{{"error", "NAN_LOSS"},
                   {"step", result.abort_step},
                   {"config", train_opts_json(o)}};
  emit(abort.dump(2), (fs::path(o.out_dir) / "abort.json").string());
  std::cerr << "NAN_LOSS: non-finite loss at step " << result.abort_step << "\n";
  return kExitDomain;
}

int run_model_train(const Genotype& g, const CommonTrainOpts& o) {
  const Dataset ds = load_dataset(o.data_dir);
  fs::create_directories(o.out_dir);

  GenotypeModel model(g, o.seed);
  TrainConfig tc = to_train_config(o);
  Rng rng(o.seed + 1);
  if (!o.resume.empty()) {
    const Checkpoint ckpt = load_checkpoint(o.resume);
    model = model_from_checkpoint(ckpt);
    tc.start_step = ckpt.iteration;
    tc.resume_velocities = checkpoint_velocities(ckpt);
    if (ckpt.has_rng) rng.set_state(ckpt.rng_state);
  }

  const fs::path ckpt_file = fs::path(o.out_dir) / "checkpoint.psvl";
  const auto t0 = std::chrono::steady_clock::now();
  const TrainResult result = train_model(
      model, ds, tc, rng, [&](std::size_t step, const SgdMomentum& opt, const Rng& r) {
        save_checkpoint(ckpt_file.string(), make_checkpoint(model, &opt, &r, step));
      });
  const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  write_step_log(fs::path(o.out_dir) / "log.jsonl", result);
  if (result.aborted_nan) return abort_record(result, o);

  SgdMomentum opt_final(tc.opt);
  opt_final.set_velocities(result.final_velocities);
  save_checkpoint(ckpt_file.string(), make_checkpoint(model, &opt_final, &rng, result.steps_run));
  const FlopsReport cost = count_flops(g);
  const json metrics{{"version", 1},
                     {"train_acc", evaluate_model(model, ds, Split::train)},
                     {"val_acc", evaluate_model(model, ds, Split::val)},
                     {"flops", cost.total_macs()},
                     {"params", cost.total_params()},
                     {"wall_seconds", wall},
                     {"steps_run", result.steps_run},
                     {"early_stopped", result.early_stopped},
                     {"final_loss", result.log.empty() ? 0.0 : result.log.back().loss},
                     {"config", train_opts_json(o)}};
  emit(metrics.dump(2), (fs::path(o.out_dir) / "metrics.json").string());
  std::cout << metrics.dump(2) << "\n";
  return kExitOk;
}

int run_supernet_train(const std::string& space, const CommonTrainOpts& o) {
  const Dataset ds = load_dataset(o.data_dir);
  fs::create_directories(o.out_dir);

  Supernet net(space_by_name(space), o.seed);
  TrainConfig tc = to_train_config(o);
  Rng rng(o.seed + 1);
  if (!o.resume.empty()) {
    const Checkpoint ckpt = load_checkpoint(o.resume);
    net = supernet_from_checkpoint(ckpt);
    tc.start_step = ckpt.iteration;
    tc.resume_velocities = checkpoint_velocities(ckpt);
    if (ckpt.has_rng) rng.set_state(ckpt.rng_state);
  }

  const fs::path ckpt_file = fs::path(o.out_dir) / "supernet.psvl";
  const auto t0 = std::chrono::steady_clock::now();
  const TrainResult result = train_supernet(
      net, ds, tc, rng, [&](std::size_t step, const SgdMomentum& opt, const Rng& r) {
        save_checkpoint(ckpt_file.string(), make_checkpoint(net, &opt, &r, step));
      });
  const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  write_step_log(fs::path(o.out_dir) / "log.jsonl", result);
  if (result.aborted_nan) return abort_record(result, o);

  SgdMomentum opt_final(tc.opt);
  opt_final.set_velocities(result.final_velocities);
  save_checkpoint(ckpt_file.string(), make_checkpoint(net, &opt_final, &rng, result.steps_run));
  const json metrics{{"version", 1},
                     {"space", space},
                     {"wall_seconds", wall},
                     {"steps_run", result.steps_run},
                     {"final_loss", result.log.empty() ? 0.0 : result.log.back().loss},
                     {"config", train_opts_json(o)}};
  emit(metrics.dump(2), (fs::path(o.out_dir) / "metrics.json").string());
  std::cout << metrics.dump(2) << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"PSViT lab: token pooling, attention sharing, cost model and SPOS search"};
  app.require_subcommand(1);

  std::string preset, genotype_file, out_file;
  bool as_json = false;

  auto* describe = app.add_subcommand("describe", "echo a genotype's schedule and costs");
  describe->add_option("--preset", preset, "named genotype");
  describe->add_option("--genotype", genotype_file, "genotype JSON file");
  describe->add_flag("--json", as_json, "machine-readable output");
  describe->add_option("--out", out_file, "write to file instead of stdout");

  auto* flops = app.add_subcommand("flops", "per-layer MAC/parameter report");
  flops->add_option("--preset", preset, "named genotype");
  flops->add_option("--genotype", genotype_file, "genotype JSON file");
  flops->add_flag("--json", as_json, "machine-readable output");
  flops->add_option("--out", out_file, "write to file instead of stdout");

  auto* validate_cmd = app.add_subcommand("validate", "check genotype invariants");
  validate_cmd->add_option("--preset", preset, "named genotype");
  validate_cmd->add_option("--genotype", genotype_file, "genotype JSON file");

  auto* presets_cmd = app.add_subcommand("presets", "list named genotypes");

  DatasetSpec gen_spec;
  std::string gen_out;
  auto* gen = app.add_subcommand("gen-data", "generate the synthetic classification set");
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--seed", gen_spec.seed, "generator seed");
  gen->add_option("--classes", gen_spec.num_classes, "number of classes");
  gen->add_option("--count", gen_spec.count, "sample count (multiple of classes)");
  gen->add_option("--size", gen_spec.image_size, "image side length");
  gen->add_option("--channels", gen_spec.channels, "channel count");
  gen->add_option("--noise", gen_spec.noise, "noise standard deviation");

  CommonTrainOpts train_opts;
  auto* train = app.add_subcommand("train", "train a standalone model");
  train->add_option("--preset", preset, "named genotype");
  train->add_option("--genotype", genotype_file, "genotype JSON file");
  add_train_opts(train, train_opts);

  CommonTrainOpts sup_opts;
  std::string space = "toy";
  auto* sup = app.add_subcommand("supernet-train", "uniform-path supernet training");
  sup->add_option("--space", space, "search space (toy, toy-reduced)");
  add_train_opts(sup, sup_opts);

  std::string ckpt_file, data_dir, split = "val", out_dir;
  std::uint64_t budget = 0;
  SearchConfig search_cfg;
  bool use_surrogate = false;
  double surrogate_target = 0.0;
  auto* search = app.add_subcommand("search", "FLOPS-constrained evolutionary search");
  search->add_option("--checkpoint", ckpt_file, "trained supernet checkpoint")->required();
  search->add_option("--data", data_dir, "dataset directory")->required();
  search->add_option("--budget", budget, "FLOPS budget (MACs)")->required();
  search->add_option("--out", out_dir, "output directory")->required();
  search->add_option("--seed", search_cfg.seed, "RNG seed");
  search->add_option("--population", search_cfg.population_size, "population size");
  search->add_option("--iterations", search_cfg.max_iterations, "max iterations");
  search->add_option("--samples", search_cfg.total_samples, "evaluation cap");
  search->add_option("--topk", search_cfg.topk, "retained models");
  search->add_option("--mutation", search_cfg.mutation_prob, "per-cell mutation probability");
  search->add_option("--crossover", search_cfg.crossover_rate, "crossover fraction");
  search->add_option("--workers", search_cfg.workers, "evaluation threads");
  search->add_option("--split", split, "fitness split (train, val)");
  search->add_flag("--surrogate", use_surrogate, "use -|flops - target| instead of accuracy");
  search->add_option("--surrogate-target", surrogate_target, "surrogate target MACs");

  std::string eval_path;
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on a split");
  eval_cmd->add_option("--checkpoint", ckpt_file, "model or supernet checkpoint")->required();
  eval_cmd->add_option("--data", data_dir, "dataset directory")->required();
  eval_cmd->add_option("--split", split, "train or val");
  eval_cmd->add_option("--path", eval_path, "cell choices (supernet checkpoints), e.g. BSI...");

  std::string maps_a, maps_b, dump_dir;
  std::size_t sample_count = 4;
  auto* correlate = app.add_subcommand("correlate", "adjacent-layer attention correlations");
  correlate->add_option("--checkpoint", ckpt_file, "model checkpoint");
  correlate->add_option("--data", data_dir, "dataset directory");
  correlate->add_option("--samples", sample_count, "validation images to average over");
  correlate->add_option("--dump-maps", dump_dir, "directory for raw attention map dumps");
  correlate->add_option("--maps-a", maps_a, "first dumped map file (file mode)");
  correlate->add_option("--maps-b", maps_b, "second dumped map file (file mode)");
  correlate->add_flag("--json", as_json, "machine-readable output");
  correlate->add_option("--out", out_file, "write to file instead of stdout");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (describe->parsed()) {
      const Genotype g = load_genotype(preset, genotype_file);
      require_valid(g);
      emit(as_json ? json{{"genotype", json::parse(genotype_to_json(g))},
                          {"summary", genotype_summary(g)}}
                         .dump(2)
                   : describe_text(g),
           out_file);
      return kExitOk;
    }
    if (flops->parsed()) {
      const Genotype g = load_genotype(preset, genotype_file);
      const FlopsReport report = count_flops(g);
      if (as_json || !out_file.empty()) {
        json j = json::parse(report.to_json());
        j["total"] = report.total_macs();
        emit(j.dump(2), out_file);
      } else {
        emit(report.to_table(), out_file);
      }
      return kExitOk;
    }
    if (validate_cmd->parsed()) {
      const Genotype g = load_genotype(preset, genotype_file);
      const auto violations = validate(g);
      if (violations.empty()) {
        std::cout << "OK\n";
        return kExitOk;
      }
      for (const auto& v : violations) std::cout << v.code << ": " << v.message << "\n";
      return kExitDomain;
    }
    if (presets_cmd->parsed()) {
      for (const auto& name : preset_names()) std::cout << name << "\n";
      return kExitOk;
    }
    if (gen->parsed()) {
      const Dataset ds = generate_dataset(gen_spec);
      write_dataset(ds, gen_out);
      const json j{{"out", gen_out},
                   {"seed", ds.spec.seed},
                   {"count", ds.spec.count},
                   {"classes", ds.spec.num_classes},
                   {"train", ds.train_indices.size()},
                   {"val", ds.val_indices.size()}};
      std::cout << j.dump(2) << "\n";
      return kExitOk;
    }
    if (train->parsed()) {
      const Genotype g = load_genotype(preset, genotype_file);
      require_valid(g);
      return run_model_train(g, train_opts);
    }
    if (sup->parsed()) {
      return run_supernet_train(space, sup_opts);
    }
    if (search->parsed()) {
      const Checkpoint ckpt = load_checkpoint(ckpt_file);
      const Supernet net = supernet_from_checkpoint(ckpt);
      const Dataset ds = load_dataset(data_dir);
      const Split eval_split = split == "train" ? Split::train : Split::val;
      search_cfg.flops_budget = budget;
      fs::create_directories(out_dir);

      FitnessFn fitness;
      if (use_surrogate) {
        const SupernetConfig cfg = net.cfg;
        fitness = [cfg, surrogate_target](const Path& p) {
          return -std::abs(static_cast<double>(path_flops(cfg, p)) - surrogate_target);
        };
      } else {
        fitness = [&net, &ds, eval_split](const Path& p) {
          return evaluate_subnet(net, p, ds, eval_split);
        };
      }
      const SearchResult result = evolutionary_search(net.cfg, search_cfg, fitness);

      std::ofstream log(fs::path(out_dir) / "search_log.jsonl");
      for (const auto& e : result.archive) {
        log << json{{"path", path_to_string(e.path)},
                    {"flops", e.flops},
                    {"fitness", e.fitness},
                    {"iteration", e.iteration}}
                   .dump()
            << '\n';
      }
      json ranked = json::array();
      for (const auto& e : result.topk) {
        ranked.push_back(
            {{"path", path_to_string(e.path)},
             {"fitness", e.fitness},
             {"flops", e.flops},
             {"genotype", json::parse(genotype_to_json(net.cfg.genotype_for(e.path)))}});
      }
      const json out{{"version", 1},
                     {"budget", budget},
                     {"evaluations", result.evaluations},
                     {"iterations", result.iterations},
                     {"config",
                      {{"seed", search_cfg.seed},
                       {"population", search_cfg.population_size},
                       {"iterations", search_cfg.max_iterations},
                       {"samples", search_cfg.total_samples},
                       {"topk", search_cfg.topk},
                       {"mutation", search_cfg.mutation_prob},
                       {"crossover", search_cfg.crossover_rate},
                       {"workers", search_cfg.workers},
                       {"split", split},
                       {"surrogate", use_surrogate},
                       {"surrogate_target", surrogate_target},
                       {"checkpoint", ckpt_file},
                       {"data", data_dir}}},
                     {"seed", search_cfg.seed},
                     {"ranked", ranked}};
      emit(out.dump(2), (fs::path(out_dir) / "ranked.json").string());
      std::cout << out.dump(2) << "\n";
      return kExitOk;
    }
    if (eval_cmd->parsed()) {
      const Checkpoint ckpt = load_checkpoint(ckpt_file);
      const Dataset ds = load_dataset(data_dir);
      const Split s = split == "train" ? Split::train : Split::val;
      double acc = 0.0;
      if (ckpt.kind() == "supernet") {
        if (eval_path.empty()) {
          throw ContractError("supernet checkpoints need --path with one choice per cell");
        }
        const Supernet net = supernet_from_checkpoint(ckpt);
        acc = evaluate_subnet(net, path_from_string(eval_path), ds, s);
      } else {
        const GenotypeModel model = model_from_checkpoint(ckpt);
        acc = evaluate_model(model, ds, s);
      }
      const json j{{"accuracy", acc}, {"split", split}, {"count", ds.indices(s).size()}};
      std::cout << j.dump(2) << "\n";
      return kExitOk;
    }
    if (correlate->parsed()) {
      if (!maps_a.empty() || !maps_b.empty()) {
        if (maps_a.empty() || maps_b.empty()) {
          throw ContractError("file mode needs both --maps-a and --maps-b");
        }
        std::ifstream fa(maps_a, std::ios::binary), fb(maps_b, std::ios::binary);
        if (!fa || !fb) throw IoError("IO", "cannot open map dumps");
        const auto da = read_attention_maps(fa);
        const auto db = read_attention_maps(fb);
        const auto corr = attention_correlation(da, db);
        double mean = 0.0;
        for (double c : corr) mean += c;
        mean /= static_cast<double>(corr.size());
        const json j{{"per_head", corr}, {"mean", mean}};
        emit(j.dump(2), out_file);
        return kExitOk;
      }
      if (ckpt_file.empty() || data_dir.empty()) {
        throw ContractError("correlate needs --checkpoint and --data (or --maps-a/--maps-b)");
      }
      const Checkpoint ckpt = load_checkpoint(ckpt_file);
      const GenotypeModel model = model_from_checkpoint(ckpt);
      if (model.genotype().realized_depth() < 2) {
        throw DomainError("TOO_SHALLOW", "correlation needs at least 2 realized layers");
      }
      const Dataset ds = load_dataset(data_dir);
      const auto& pool = ds.val_indices.empty() ? ds.train_indices : ds.val_indices;
      const std::size_t n_samples = std::min<std::size_t>(sample_count, pool.size());
      if (n_samples == 0) throw ContractError("dataset has no usable samples");

      struct PairStat {
        std::size_t stage, a, b;
        bool shared;
        double sum = 0.0;
      };
      std::vector<PairStat> pairs;
      NoGradGuard guard;
      for (std::size_t si = 0; si < n_samples; ++si) {
        std::vector<GenotypeModel::TraceEntry> trace;
        model.forward_traced(ds.image_tensor(pool[si]), &trace);
        if (!dump_dir.empty() && si == 0) {
          fs::create_directories(dump_dir);
          for (const auto& t : trace) {
            const std::string name =
                "stage" + std::to_string(t.stage) + "_layer" + std::to_string(t.layer) + ".maps";
            std::ofstream mf(fs::path(dump_dir) / name, std::ios::binary);
            write_attention_maps(mf, snapshot_maps(t.maps));
          }
        }
        std::size_t pair_idx = 0;
        for (std::size_t i = 0; i + 1 < trace.size(); ++i) {
          if (trace[i].stage != trace[i + 1].stage) continue;  // token counts differ across pools
          const auto corr = attention_correlation(trace[i].maps, trace[i + 1].maps);
          double mean = 0.0;
          for (double c : corr) mean += c;
          mean /= static_cast<double>(corr.size());
          if (si == 0) {
            pairs.push_back(
                {trace[i].stage, trace[i].layer, trace[i + 1].layer, trace[i + 1].shared, mean});
          } else {
            pairs[pair_idx].sum += mean;
          }
          ++pair_idx;
        }
      }
      json rows = json::array();
      std::ostringstream table;
      table << "stage  pair     shared  mean_correlation\n";
      for (const auto& p : pairs) {
        const double mean = p.sum / static_cast<double>(n_samples);
        rows.push_back({{"stage", p.stage},
                        {"layer_a", p.a},
                        {"layer_b", p.b},
                        {"shared", p.shared},
                        {"mean_correlation", mean}});
        table << "  " << p.stage << "    " << p.a << " -> " << p.b << "     "
              << (p.shared ? "yes" : "no ") << "    " << mean << "\n";
      }
      table << "cross-stage pairs: N/A (token counts differ)\n";
      const json j{{"samples", n_samples}, {"pairs", rows}};
      emit(as_json ? j.dump(2) : table.str(), out_file);
      return kExitOk;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitDomain;
  }
  return kExitUsage;
}
