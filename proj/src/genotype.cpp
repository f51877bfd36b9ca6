#include "psvit/genotype.hpp"

#include <json.hpp>

#include "psvit/errors.hpp"

namespace psvit {

using nlohmann::json;

std::string to_string(PoolingMode m) { return m == PoolingMode::one_d ? "1d" : "2d"; }

PoolingMode pooling_mode_from_string(const std::string& s) {
  if (s == "1d" || s == "1D") return PoolingMode::one_d;
  if (s == "2d" || s == "2D") return PoolingMode::two_d;
  throw ValidationError("unknown pooling mode '" + s + "'");
}

char cell_char(CellChoice c) {
  switch (c) {
    case CellChoice::Basic: return 'B';
    case CellChoice::SharedPair: return 'S';
    case CellChoice::Identity: return 'I';
  }
  return '?';
}

CellChoice cell_from_char(char c) {
  switch (c) {
    case 'B': return CellChoice::Basic;
    case 'S': return CellChoice::SharedPair;
    case 'I': return CellChoice::Identity;
    default: throw ValidationError(std::string("unknown cell choice '") + c + "'");
  }
}

std::vector<LayerSpec> StageSpec::realized_layers() const {
  if (manual_layers) return *manual_layers;
  std::vector<LayerSpec> layers;
  for (CellChoice c : cells) {
    switch (c) {
      case CellChoice::Basic:
        layers.push_back({false});
        break;
      case CellChoice::SharedPair:
        layers.push_back({false});
        layers.push_back({true});
        break;
      case CellChoice::Identity:
        break;
    }
  }
  return layers;
}

std::size_t Genotype::realized_depth() const {
  std::size_t depth = 0;
  for (const auto& s : stages) depth += s.realized_layers().size();
  return depth;
}

std::string Genotype::cells_string() const {
  std::string out;
  for (std::size_t i = 0; i < stages.size(); ++i) {
    if (i) out.push_back('|');
    const auto& s = stages[i];
    if (s.is_manual()) {
      for (const auto& l : *s.manual_layers) out.push_back(l.share_from_previous ? 's' : 'L');
    } else {
      for (CellChoice c : s.cells) out.push_back(cell_char(c));
    }
  }
  return out;
}

std::size_t pooled_tokens(std::size_t tokens, PoolingMode mode) {
  if (mode == PoolingMode::one_d) {
    if (tokens < 2) throw ShapeError("pooling needs at least 2 tokens");
    return (tokens - 1) / 2 + 1;
  }
  // 2-D: tokens form a g x g grid, conv stride 2 halves each axis.
  std::size_t g = 0;
  while ((g + 1) * (g + 1) <= tokens) ++g;
  if (g * g != tokens) throw ShapeError("2-D stage token count must be a perfect square");
  if (g % 2 != 0) throw ShapeError("2-D pooling needs an even grid");
  return (g / 2) * (g / 2);
}

std::vector<Violation> validate(const Genotype& g) {
  std::vector<Violation> v;
  auto fail = [&](const char* code, std::string msg) { v.push_back({code, std::move(msg)}); };

  if (g.stages.empty()) {
    fail("EMPTY_STAGES", "genotype has no stages");
    return v;
  }
  if (g.num_classes == 0) fail("BAD_CLASSES", "num_classes must be positive");

  bool patch_ok = true;
  if (g.patch.image_size == 0 || g.patch.patch_size == 0 || g.patch.in_channels == 0) {
    fail("BAD_PATCH", "patch config extents must be positive");
    patch_ok = false;
  } else if (g.patch.image_size % g.patch.patch_size != 0) {
    fail("BAD_PATCH", "image size " + std::to_string(g.patch.image_size) +
                          " not divisible by patch size " + std::to_string(g.patch.patch_size));
    patch_ok = false;
  }
  if (g.pooling_mode == PoolingMode::two_d && g.patch.use_cls_token) {
    fail("CLS_IN_2D", "2-D pooling keeps tokens in a grid and has no CLS token");
    patch_ok = false;
  }

  for (std::size_t i = 0; i < g.stages.size(); ++i) {
    const auto& s = g.stages[i];
    const std::string at = "stage " + std::to_string(i);
    if (s.tokens == 0 || s.dim == 0 || s.heads == 0) {
      fail("STAGE_EXTENTS", at + ": tokens, dim and heads must be positive");
      continue;
    }
    if (s.dim % s.heads != 0) {
      fail("DIM_NOT_DIVISIBLE", at + ": dim " + std::to_string(s.dim) +
                                    " not divisible by heads " + std::to_string(s.heads));
    }
    if (s.is_manual() && !s.manual_layers->empty() && s.manual_layers->front().share_from_previous) {
      fail("SHARE_FIRST_LAYER",
           at + ": the first layer of a stage has no predecessor to share attention from");
    }
    if (i > 0) {
      const auto& prev = g.stages[i - 1];
      if (s.dim < prev.dim) {
        fail("NONDECREASING_DIM", at + ": dim " + std::to_string(s.dim) +
                                      " decreases from " + std::to_string(prev.dim));
      }
      if (s.tokens >= prev.tokens) {
        fail("TOKENS_NOT_DECREASING", at + ": tokens " + std::to_string(s.tokens) +
                                          " do not decrease from " + std::to_string(prev.tokens));
      }
    }
  }

  // Token schedule must follow exactly from the patch grid and the pooling law.
  if (patch_ok && !g.stages.empty() && g.stages[0].dim != 0) {
    PatchEmbedConfig pc = g.patch;
    pc.embed_dim = g.stages[0].dim;
    std::size_t expect = pc.token_count();
    for (std::size_t i = 0; i < g.stages.size(); ++i) {
      if (g.stages[i].tokens != expect) {
        fail("TOKEN_COUNT_MISMATCH",
             "stage " + std::to_string(i) + ": tokens " + std::to_string(g.stages[i].tokens) +
                 " but the pooling law gives " + std::to_string(expect));
        break;
      }
      if (i + 1 < g.stages.size()) {
        try {
          expect = pooled_tokens(expect, g.pooling_mode);
        } catch (const ShapeError& e) {
          fail("TOKEN_COUNT_MISMATCH", "stage " + std::to_string(i) + ": " + e.what());
          break;
        }
      }
    }
  }
  return v;
}

void require_valid(const Genotype& g) {
  const auto violations = validate(g);
  if (violations.empty()) return;
  std::string msg = "invalid genotype:";
  for (const auto& viol : violations) msg += " [" + viol.code + "] " + viol.message;
  throw ValidationError(msg);
}

std::string genotype_to_json(const Genotype& g, int indent) {
  json stages = json::array();
  for (const auto& s : g.stages) {
    json js{{"tokens", s.tokens}, {"dim", s.dim}, {"heads", s.heads}};
    if (s.is_manual()) {
      json flags = json::array();
      for (const auto& l : *s.manual_layers) flags.push_back(l.share_from_previous);
      js["share_flags"] = flags;
    } else {
      json cells = json::array();
      for (CellChoice c : s.cells) cells.push_back(std::string(1, cell_char(c)));
      js["cells"] = cells;
    }
    stages.push_back(js);
  }
  json j{{"version", g.version},
         {"pooling_mode", to_string(g.pooling_mode)},
         {"patch",
          {{"image", g.patch.image_size},
           {"patch", g.patch.patch_size},
           {"channels", g.patch.in_channels},
           {"cls", g.patch.use_cls_token}}},
         {"stages", stages},
         {"num_classes", g.num_classes}};
  return j.dump(indent);
}

Genotype genotype_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("genotype JSON parse error: ") + e.what());
  }
  try {
    Genotype g;
    g.version = j.value("version", 1u);
    if (g.version != 1) {
      throw ValidationError("unsupported genotype version " + std::to_string(g.version));
    }
    g.pooling_mode = pooling_mode_from_string(j.at("pooling_mode").get<std::string>());
    const auto& jp = j.at("patch");
    g.patch.image_size = jp.at("image").get<std::size_t>();
    g.patch.patch_size = jp.at("patch").get<std::size_t>();
    g.patch.in_channels = jp.at("channels").get<std::size_t>();
    g.patch.use_cls_token = jp.at("cls").get<bool>();
    g.num_classes = j.at("num_classes").get<std::size_t>();
    for (const auto& js : j.at("stages")) {
      StageSpec s;
      s.tokens = js.at("tokens").get<std::size_t>();
      s.dim = js.at("dim").get<std::size_t>();
      s.heads = js.at("heads").get<std::size_t>();
      if (js.contains("share_flags")) {
        std::vector<LayerSpec> layers;
        for (const auto& f : js.at("share_flags")) layers.push_back({f.get<bool>()});
        s.manual_layers = std::move(layers);
      } else {
        for (const auto& c : js.at("cells")) {
          const std::string cs = c.get<std::string>();
          if (cs.size() != 1) throw ValidationError("cell choice must be one of B, S, I");
          s.cells.push_back(cell_from_char(cs[0]));
        }
      }
      g.stages.push_back(std::move(s));
    }
    g.patch.embed_dim = g.stages.empty() ? 0 : g.stages[0].dim;
    return g;
  } catch (const json::exception& e) {
    throw ValidationError(std::string("genotype JSON missing field: ") + e.what());
  }
}

namespace {

StageSpec stage(std::size_t tokens, std::size_t dim, std::size_t heads,
                const std::string& cells) {
  StageSpec s;
  s.tokens = tokens;
  s.dim = dim;
  s.heads = heads;
  for (char c : cells) s.cells.push_back(cell_from_char(c));
  return s;
}

StageSpec manual_stage(std::size_t tokens, std::size_t dim, std::size_t heads,
                       const std::vector<bool>& share_flags) {
  StageSpec s;
  s.tokens = tokens;
  s.dim = dim;
  s.heads = heads;
  std::vector<LayerSpec> layers;
  for (bool f : share_flags) layers.push_back({f});
  s.manual_layers = std::move(layers);
  return s;
}

Genotype make_genotype(PoolingMode mode, std::size_t image, std::size_t patch,
                       std::size_t channels, bool cls, std::vector<StageSpec> stages,
                       std::size_t classes) {
  Genotype g;
  g.pooling_mode = mode;
  g.patch.image_size = image;
  g.patch.patch_size = patch;
  g.patch.in_channels = channels;
  g.patch.use_cls_token = cls;
  g.patch.embed_dim = stages.empty() ? 0 : stages[0].dim;
  g.stages = std::move(stages);
  g.num_classes = classes;
  return g;
}

}  // namespace

std::vector<std::string> preset_names() {
  return {"deit-tiny", "deit-small", "dimension1", "dimension2", "tiny8",       "tiny16",
          "small8",    "small16",    "sharing2",   "sharing3",   "tiny16-2d",   "toy",
          "toy-sharing2", "toy-2d"};
}

Genotype preset_genotype(const std::string& name) {
  const auto P1 = PoolingMode::one_d;
  const auto P2 = PoolingMode::two_d;
  if (name == "deit-tiny") {
    return make_genotype(P1, 224, 16, 3, true, {stage(197, 192, 3, "BBBBBBBBBBBB")}, 1000);
  }
  if (name == "deit-small") {
    return make_genotype(P1, 224, 16, 3, true, {stage(197, 384, 6, "BBBBBBBBBBBB")}, 1000);
  }
  if (name == "dimension1") {
    return make_genotype(P1, 224, 16, 3, true,
                         {stage(197, 192, 3, "BBBB"), stage(99, 192, 3, "BBBBBBBB"),
                          stage(50, 192, 3, "BBBBBBBBBBBBBBBBBBBB")},
                         1000);
  }
  if (name == "dimension2") {
    return make_genotype(
        P1, 224, 16, 3, true,
        {stage(197, 192, 3, "BBBB"), stage(99, 256, 4, "BBBB"), stage(50, 384, 6, "BBBB")}, 1000);
  }
  if (name == "tiny8") {
    return make_genotype(
        P1, 224, 8, 3, true,
        {stage(785, 64, 1, "BBBB"), stage(393, 144, 3, "BBBB"), stage(197, 192, 3, "BBBB")}, 1000);
  }
  if (name == "tiny16") {
    return make_genotype(
        P1, 224, 16, 3, true,
        {stage(197, 192, 3, "BBBB"), stage(99, 288, 6, "BBBB"), stage(50, 384, 6, "BBBB")}, 1000);
  }
  if (name == "small8") {
    return make_genotype(
        P1, 224, 8, 3, true,
        {stage(785, 144, 3, "BBBB"), stage(393, 256, 4, "BBBB"), stage(197, 384, 6, "BBBB")}, 1000);
  }
  if (name == "small16") {
    return make_genotype(
        P1, 224, 16, 3, true,
        {stage(197, 288, 6, "BBBB"), stage(99, 512, 8, "BBBB"), stage(50, 768, 12, "BBBB")}, 1000);
  }
  if (name == "sharing2") {
    // 12 layers, every 2 adjacent sharing one attention map.
    return make_genotype(P1, 224, 16, 3, true, {stage(197, 192, 3, "SSSSSS")}, 1000);
  }
  if (name == "sharing3") {
    // 12 layers, every 3 adjacent sharing; needs the manual layer list.
    std::vector<bool> flags;
    for (int grp = 0; grp < 4; ++grp) {
      flags.push_back(false);
      flags.push_back(true);
      flags.push_back(true);
    }
    return make_genotype(P1, 224, 16, 3, true, {manual_stage(197, 192, 3, flags)}, 1000);
  }
  if (name == "tiny16-2d") {
    return make_genotype(
        P2, 224, 8, 3, false,
        {stage(784, 192, 3, "BBBB"), stage(196, 288, 6, "BBBB"), stage(49, 384, 6, "BBBB")}, 1000);
  }
  if (name == "toy") {
    return make_genotype(
        P1, 32, 4, 1, true,
        {stage(65, 16, 2, "BBBB"), stage(33, 24, 2, "BBBB"), stage(17, 32, 4, "BBBB")}, 10);
  }
  if (name == "toy-sharing2") {
    return make_genotype(
        P1, 32, 4, 1, true,
        {stage(65, 16, 2, "SSII"), stage(33, 24, 2, "SSII"), stage(17, 32, 4, "SSII")}, 10);
  }
  if (name == "toy-2d") {
    return make_genotype(
        P2, 32, 4, 1, false,
        {stage(64, 16, 2, "BBBB"), stage(16, 24, 2, "BBBB"), stage(4, 32, 4, "BBBB")}, 10);
  }
  throw ValidationError("unknown preset '" + name + "'");
}

}  // namespace psvit
