#include "psvit/supernet.hpp"

#include <json.hpp>

#include "psvit/errors.hpp"

namespace psvit {

using nlohmann::json;

std::size_t SupernetConfig::total_cells() const {
  std::size_t n = 0;
  for (const auto& s : stages) n += s.cells;
  return n;
}

Genotype SupernetConfig::genotype_for(const std::vector<CellChoice>& path) const {
  if (path.size() != total_cells()) {
    throw ContractError("path length " + std::to_string(path.size()) + " does not match " +
                        std::to_string(total_cells()) + " cells");
  }
  Genotype g;
  g.pooling_mode = mode;
  g.patch = patch;
  g.patch.embed_dim = stages.empty() ? 0 : stages[0].dim;
  g.num_classes = num_classes;
  std::size_t at = 0;
  for (const auto& s : stages) {
    StageSpec spec;
    spec.tokens = s.tokens;
    spec.dim = s.dim;
    spec.heads = s.heads;
    spec.cells.assign(path.begin() + at, path.begin() + at + s.cells);
    at += s.cells;
    g.stages.push_back(std::move(spec));
  }
  return g;
}

Genotype SupernetConfig::skeleton() const {
  return genotype_for(Path(total_cells(), CellChoice::Basic));
}

SupernetConfig SupernetConfig::toy() {
  SupernetConfig c;
  c.mode = PoolingMode::one_d;
  c.patch.image_size = 32;
  c.patch.patch_size = 4;
  c.patch.in_channels = 1;
  c.patch.use_cls_token = true;
  c.stages = {{65, 16, 2, 6}, {33, 24, 2, 6}, {17, 32, 4, 6}};
  c.num_classes = 10;
  return c;
}

SupernetConfig SupernetConfig::toy_reduced() {
  SupernetConfig c = toy();
  c.stages[0].cells = 2;
  c.stages[1].cells = 1;
  c.stages[2].cells = 1;
  return c;
}

std::string SupernetConfig::to_json() const {
  json stages_json = json::array();
  for (const auto& s : stages) {
    stages_json.push_back({{"tokens", s.tokens}, {"dim", s.dim}, {"heads", s.heads},
                           {"cells", s.cells}});
  }
  json j{{"mode", to_string(mode)},
         {"patch",
          {{"image", patch.image_size},
           {"patch", patch.patch_size},
           {"channels", patch.in_channels},
           {"cls", patch.use_cls_token}}},
         {"stages", stages_json},
         {"num_classes", num_classes}};
  return j.dump();
}

SupernetConfig SupernetConfig::from_json(const std::string& text) {
  try {
    const json j = json::parse(text);
    SupernetConfig c;
    c.mode = pooling_mode_from_string(j.at("mode").get<std::string>());
    const auto& jp = j.at("patch");
    c.patch.image_size = jp.at("image").get<std::size_t>();
    c.patch.patch_size = jp.at("patch").get<std::size_t>();
    c.patch.in_channels = jp.at("channels").get<std::size_t>();
    c.patch.use_cls_token = jp.at("cls").get<bool>();
    c.num_classes = j.at("num_classes").get<std::size_t>();
    c.stages.clear();
    for (const auto& js : j.at("stages")) {
      c.stages.push_back({js.at("tokens").get<std::size_t>(), js.at("dim").get<std::size_t>(),
                          js.at("heads").get<std::size_t>(), js.at("cells").get<std::size_t>()});
    }
    return c;
  } catch (const json::exception& e) {
    throw IoError("BAD_META", std::string("supernet config: ") + e.what());
  }
}

std::string path_to_string(const Path& p) {
  std::string s;
  s.reserve(p.size());
  for (CellChoice c : p) s.push_back(cell_char(c));
  return s;
}

Path path_from_string(const std::string& s) {
  Path p;
  p.reserve(s.size());
  for (char c : s) p.push_back(cell_from_char(c));
  return p;
}

Path sample_path(std::size_t cells, Rng& rng) {
  Path p(cells, CellChoice::Identity);
  for (auto& c : p) {
    switch (rng.next_below(3)) {
      case 0: c = CellChoice::Basic; break;
      case 1: c = CellChoice::SharedPair; break;
      default: c = CellChoice::Identity; break;
    }
  }
  return p;
}

Supernet::Supernet(const SupernetConfig& config, std::uint64_t seed) : cfg(config) {
  require_valid(cfg.skeleton());
  Rng rng(seed);
  PatchEmbedConfig pc = cfg.patch;
  pc.embed_dim = cfg.stages[0].dim;
  embed = PatchEmbed(pc, rng);
  for (std::size_t si = 0; si < cfg.stages.size(); ++si) {
    const auto& s = cfg.stages[si];
    EncoderLayerConfig basic_cfg;
    basic_cfg.dim = s.dim;
    basic_cfg.heads = s.heads;
    EncoderLayerConfig share_cfg = basic_cfg;
    share_cfg.share_attention_from_previous = true;
    std::vector<SupernetCell> cells;
    for (std::size_t ci = 0; ci < s.cells; ++ci) {
      cells.push_back(SupernetCell{EncoderLayer(basic_cfg, rng), EncoderLayer(basic_cfg, rng),
                                   EncoderLayer(share_cfg, rng)});
    }
    stage_cells.push_back(std::move(cells));
    if (si + 1 < cfg.stages.size()) {
      const auto& nx = cfg.stages[si + 1];
      if (cfg.mode == PoolingMode::one_d) {
        pools1d.emplace_back(s.dim, nx.dim, rng);
      } else {
        pools2d.emplace_back(s.dim, nx.dim, rng);
      }
      stage_pos.push_back(Tensor::randn({nx.tokens, nx.dim}, rng, 0.02, true));
    }
  }
  final_ln_g = Tensor::full({cfg.stages.back().dim}, 1.0, true);
  final_ln_b = Tensor::zeros({cfg.stages.back().dim}, true);
  head = ClassifierHead(cfg.stages.back().dim, cfg.num_classes, rng);
}

void Supernet::check_path(const Path& path) const {
  if (path.size() != cfg.total_cells()) {
    throw ContractError("path length " + std::to_string(path.size()) + " does not match " +
                        std::to_string(cfg.total_cells()) + " supernet cells");
  }
}

Tensor Supernet::forward(const Path& path, const Tensor& image) const {
  check_path(path);
  Tensor x = embed.forward(image);
  std::size_t grid = cfg.patch.grid();
  std::size_t at = 0;
  for (std::size_t si = 0; si < cfg.stages.size(); ++si) {
    for (std::size_t ci = 0; ci < cfg.stages[si].cells; ++ci, ++at) {
      const SupernetCell& cell = stage_cells[si][ci];
      switch (path[at]) {
        case CellChoice::Identity:
          break;
        case CellChoice::Basic: {
          x = cell.basic.forward(x).first;
          break;
        }
        case CellChoice::SharedPair: {
          auto [h, maps] = cell.pair_first.forward(x);
          x = cell.pair_second.forward(h, &maps).first;
          break;
        }
      }
    }
    if (si + 1 < cfg.stages.size()) {
      if (cfg.mode == PoolingMode::one_d) {
        x = pools1d[si].forward(x);
      } else {
        x = reshape(x, {grid, grid, cfg.stages[si].dim});
        x = pools2d[si].forward(x);
        grid = x.shape()[0];
        x = reshape(x, {grid * grid, cfg.stages[si + 1].dim});
      }
      x = add(x, stage_pos[si]);
    }
  }
  x = layer_norm(x, final_ln_g, final_ln_b);
  const HeadMode mode = cfg.mode == PoolingMode::one_d ? HeadMode::cls_token : HeadMode::gap;
  return head.forward(x, mode, cfg.patch.use_cls_token);
}

void Supernet::visit_params(const ParamFn& fn) {
  visit_path_params(Path(), fn);
}

void Supernet::visit_path_params(const Path& path, const ParamFn& fn) {
  const bool all = path.empty();
  if (!all) check_path(path);
  embed.visit_params("embed", fn);
  std::size_t at = 0;
  for (std::size_t si = 0; si < cfg.stages.size(); ++si) {
    for (std::size_t ci = 0; ci < cfg.stages[si].cells; ++ci, ++at) {
      SupernetCell& cell = stage_cells[si][ci];
      const std::string prefix = "cell" + std::to_string(at);
      const CellChoice choice = all ? CellChoice::Basic : path[at];
      if (all || choice == CellChoice::Basic) cell.basic.visit_params(prefix + ".basic", fn);
      if (all || choice == CellChoice::SharedPair) {
        cell.pair_first.visit_params(prefix + ".pair0", fn);
        cell.pair_second.visit_params(prefix + ".pair1", fn);
      }
    }
    if (si + 1 < cfg.stages.size()) {
      const std::string pool_name = "pool" + std::to_string(si);
      if (cfg.mode == PoolingMode::one_d) {
        pools1d[si].visit_params(pool_name, fn);
      } else {
        pools2d[si].visit_params(pool_name, fn);
      }
      fn("pos" + std::to_string(si + 1), stage_pos[si]);
    }
  }
  fn("final_norm.g", final_ln_g);
  fn("final_norm.b", final_ln_b);
  head.visit_params("head", fn);
}

namespace {

void copy_tensor(const Tensor& src, Tensor& dst) {
  if (!src.defined() || !dst.defined() || src.shape() != dst.shape()) {
    throw ContractError("weight copy: shape mismatch");
  }
  dst.data() = src.data();
}

void copy_layer(const EncoderLayer& src, EncoderLayer& dst) {
  copy_tensor(src.ln1_g, dst.ln1_g);
  copy_tensor(src.ln1_b, dst.ln1_b);
  copy_tensor(src.ln2_g, dst.ln2_g);
  copy_tensor(src.ln2_b, dst.ln2_b);
  copy_tensor(src.mlp_w1, dst.mlp_w1);
  copy_tensor(src.mlp_b1, dst.mlp_b1);
  copy_tensor(src.mlp_w2, dst.mlp_w2);
  copy_tensor(src.mlp_b2, dst.mlp_b2);
  if (!src.cfg.share_attention_from_previous) {
    copy_tensor(src.attn.wq, dst.attn.wq);
    copy_tensor(src.attn.bq, dst.attn.bq);
    copy_tensor(src.attn.wk, dst.attn.wk);
    copy_tensor(src.attn.bk, dst.attn.bk);
  }
  copy_tensor(src.attn.wv, dst.attn.wv);
  copy_tensor(src.attn.bv, dst.attn.bv);
  copy_tensor(src.attn.wo, dst.attn.wo);
  copy_tensor(src.attn.bo, dst.attn.bo);
}

}  // namespace

GenotypeModel Supernet::extract(const Path& path) const {
  check_path(path);
  GenotypeModel model(cfg.genotype_for(path), 0);
  copy_tensor(embed.w, model.embed.w);
  copy_tensor(embed.b, model.embed.b);
  copy_tensor(embed.pos, model.embed.pos);
  if (cfg.patch.use_cls_token) copy_tensor(embed.cls, model.embed.cls);
  std::size_t at = 0;
  for (std::size_t si = 0; si < cfg.stages.size(); ++si) {
    std::size_t li = 0;
    for (std::size_t ci = 0; ci < cfg.stages[si].cells; ++ci, ++at) {
      const SupernetCell& cell = stage_cells[si][ci];
      switch (path[at]) {
        case CellChoice::Identity:
          break;
        case CellChoice::Basic:
          copy_layer(cell.basic, model.stages[si].layers[li++]);
          break;
        case CellChoice::SharedPair:
          copy_layer(cell.pair_first, model.stages[si].layers[li++]);
          copy_layer(cell.pair_second, model.stages[si].layers[li++]);
          break;
      }
    }
    if (si + 1 < cfg.stages.size()) {
      if (cfg.mode == PoolingMode::one_d) {
        copy_tensor(pools1d[si].w, model.pools1d[si].w);
        copy_tensor(pools1d[si].b, model.pools1d[si].b);
      } else {
        copy_tensor(pools2d[si].w, model.pools2d[si].w);
        copy_tensor(pools2d[si].b, model.pools2d[si].b);
      }
      copy_tensor(stage_pos[si], model.stage_pos[si]);
    }
  }
  copy_tensor(final_ln_g, model.final_ln_g);
  copy_tensor(final_ln_b, model.final_ln_b);
  copy_tensor(head.w, model.head.w);
  copy_tensor(head.b, model.head.b);
  return model;
}

}  // namespace psvit
