#include "psvit/flops.hpp"

#include <algorithm>
#include <sstream>

#include <json.hpp>

#include "psvit/errors.hpp"

namespace psvit {

using nlohmann::json;

namespace {

std::uint64_t u(std::size_t v) { return static_cast<std::uint64_t>(v); }

}  // namespace

std::uint64_t FlopsReport::total_macs() const {
  std::uint64_t t = 0;
  for (const auto& e : entries) t += e.total_macs();
  return t;
}

std::uint64_t FlopsReport::total_params() const {
  std::uint64_t t = 0;
  for (const auto& e : entries) t += e.total_params();
  return t;
}

std::uint64_t FlopsReport::attention_macs() const {
  std::uint64_t t = 0;
  for (const auto& e : entries) t += e.attention_macs;
  return t;
}

std::uint64_t FlopsReport::mlp_macs() const {
  std::uint64_t t = 0;
  for (const auto& e : entries) t += e.mlp_macs;
  return t;
}

std::uint64_t FlopsReport::attention_params() const {
  std::uint64_t t = 0;
  for (const auto& e : entries) t += e.params_attention;
  return t;
}

std::uint64_t FlopsReport::mlp_params() const {
  std::uint64_t t = 0;
  for (const auto& e : entries) t += e.params_mlp;
  return t;
}

FlopsReport count_flops(const Genotype& g, bool include_bias) {
  require_valid(g);
  FlopsReport report;

  const std::size_t d0 = g.stages[0].dim;
  const std::size_t grid = g.patch.grid();
  const std::size_t n_patches = grid * grid;
  const std::size_t plen = g.patch.patch_size * g.patch.patch_size * g.patch.in_channels;

  CostEntry embed;
  embed.name = "embed";
  embed.kind = "embed";
  embed.other_macs = u(n_patches) * u(plen) * u(d0);
  embed.params_other = u(plen) * u(d0) + u(g.stages[0].tokens) * u(d0) +
                       (g.patch.use_cls_token ? u(d0) : 0);
  if (include_bias) embed.params_other += u(d0);
  report.entries.push_back(embed);

  for (std::size_t si = 0; si < g.stages.size(); ++si) {
    const auto& s = g.stages[si];
    const std::uint64_t n = u(s.tokens), d = u(s.dim), h = u(s.heads);
    const std::uint64_t mlp_ratio = 4;
    const auto layers = s.realized_layers();
    for (std::size_t li = 0; li < layers.size(); ++li) {
      CostEntry e;
      e.stage = si;
      e.name = "stage" + std::to_string(si) + ".layer" + std::to_string(li);
      e.kind = layers[li].share_from_previous ? "shared_layer" : "layer";
      if (layers[li].share_from_previous) {
        e.attention_macs = 2 * n * d * d + n * n * d;
      } else {
        e.attention_macs = 4 * n * d * d + 2 * n * n * d;
        e.softmax_macs = n * n * h;
      }
      e.mlp_macs = 2 * mlp_ratio * n * d * d;
      e.norm_macs = 2 * 5 * n * d;
      e.params_attention = (layers[li].share_from_previous ? 2 : 4) * d * d;
      e.params_mlp = 2 * mlp_ratio * d * d;
      e.params_norm = 4 * d;
      if (include_bias) {
        e.params_attention += (layers[li].share_from_previous ? 2 : 4) * d;
        e.params_mlp += (mlp_ratio + 1) * d;
      }
      report.entries.push_back(e);
    }
    if (si + 1 < g.stages.size()) {
      const auto& nx = g.stages[si + 1];
      CostEntry pool;
      pool.stage = si;
      pool.name = "pool" + std::to_string(si);
      pool.kind = "pool";
      if (g.pooling_mode == PoolingMode::one_d) {
        // conv k=3 s=1 p=1 keeps length; maxpool adds no MACs
        pool.other_macs = n * 3 * d * u(nx.dim);
        pool.params_other = 3 * d * u(nx.dim);
      } else {
        pool.other_macs = u(nx.tokens) * 9 * d * u(nx.dim);
        pool.params_other = 9 * d * u(nx.dim);
      }
      if (include_bias) pool.params_other += u(nx.dim);
      // re-learned positional embedding for the pooled stage
      pool.params_other += u(nx.tokens) * u(nx.dim);
      report.entries.push_back(pool);
    }
  }

  const auto& last = g.stages.back();
  CostEntry fnorm;
  fnorm.name = "final_norm";
  fnorm.kind = "final_norm";
  fnorm.norm_macs = 5 * u(last.tokens) * u(last.dim);
  fnorm.params_norm = 2 * u(last.dim);
  report.entries.push_back(fnorm);

  CostEntry head;
  head.name = "head";
  head.kind = "head";
  head.other_macs = u(last.dim) * u(g.num_classes);
  head.params_other = u(last.dim) * u(g.num_classes);
  if (include_bias) head.params_other += u(g.num_classes);
  report.entries.push_back(head);

  return report;
}

ParamBreakdown count_params(const Genotype& g, bool include_bias) {
  const FlopsReport report = count_flops(g, include_bias);
  ParamBreakdown p;
  for (const auto& e : report.entries) {
    p.attention += e.params_attention;
    p.mlp += e.params_mlp;
    p.norm += e.params_norm;
    if (e.kind == "embed") p.embed += e.params_other;
    else if (e.kind == "pool") p.pools += e.params_other;
    else if (e.kind == "head") p.head += e.params_other;
  }
  return p;
}

double attention_compute_share(std::uint64_t n_tokens, std::uint64_t dim) {
  if (n_tokens == 0 || dim == 0) throw ContractError("attention share: N and d must be positive");
  return static_cast<double>(dim + n_tokens) / static_cast<double>(3 * dim + n_tokens);
}

BigUint search_space_size(const SearchSpaceParams& p) {
  if (p.token_choices == 0 || p.dim_choices == 0 || p.share_choices == 0) {
    throw ContractError("search space: choice counts must be positive");
  }
  const BigUint base = BigUint(p.token_choices) * BigUint(p.dim_choices) * BigUint(p.share_choices);
  return BigUint::pow(base, p.layers);
}

std::string FlopsReport::to_json(int indent) const {
  json entries_json = json::array();
  for (const auto& e : entries) {
    entries_json.push_back({{"name", e.name},
                            {"kind", e.kind},
                            {"attention_macs", e.attention_macs},
                            {"mlp_macs", e.mlp_macs},
                            {"softmax_macs", e.softmax_macs},
                            {"norm_macs", e.norm_macs},
                            {"other_macs", e.other_macs},
                            {"total_macs", e.total_macs()},
                            {"params_attention", e.params_attention},
                            {"params_mlp", e.params_mlp},
                            {"params_norm", e.params_norm},
                            {"params_other", e.params_other},
                            {"total_params", e.total_params()}});
  }
  json j{{"entries", entries_json},
         {"totals",
          {{"macs", total_macs()},
           {"params", total_params()},
           {"attention_macs", attention_macs()},
           {"mlp_macs", mlp_macs()},
           {"attention_params", attention_params()},
           {"mlp_params", mlp_params()}}}};
  return j.dump(indent);
}

std::string FlopsReport::to_table() const {
  std::ostringstream os;
  auto pad = [&](const std::string& s, std::size_t width) {
    os << s;
    for (std::size_t i = s.size(); i < width; ++i) os << ' ';
  };
  auto num = [&](std::uint64_t v, std::size_t width) {
    const std::string s = std::to_string(v);
    for (std::size_t i = s.size(); i < width; ++i) os << ' ';
    os << s;
  };
  auto line = [&](const std::string& name, const std::string& kind, std::uint64_t macs,
                  std::uint64_t params) {
    pad(name, 20);
    pad(kind, 14);
    num(macs, 16);
    os << "  ";
    num(params, 12);
    os << '\n';
  };
  os << "name                kind                      macs        params\n";
  os << "----                ----                      ----        ------\n";
  for (const auto& e : entries) line(e.name, e.kind, e.total_macs(), e.total_params());
  os << "----\n";
  line("total", "", total_macs(), total_params());
  return os.str();
}

}  // namespace psvit
