#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <json.hpp>

#include "psvit/dataset.hpp"
#include "psvit/errors.hpp"
#include "psvit/flops.hpp"
#include "psvit/model.hpp"
#include "psvit/search.hpp"

namespace py = pybind11;
using nlohmann::json;
using namespace psvit;

namespace {

py::object json_to_py(const json& j) {
  switch (j.type()) {
    case json::value_t::null: return py::none();
    case json::value_t::boolean: return py::bool_(j.get<bool>());
    case json::value_t::number_integer: return py::int_(j.get<std::int64_t>());
    case json::value_t::number_unsigned: return py::int_(j.get<std::uint64_t>());
    case json::value_t::number_float: return py::float_(j.get<double>());
    case json::value_t::string: return py::str(j.get<std::string>());
    case json::value_t::array: {
      py::list out;
      for (const auto& v : j) out.append(json_to_py(v));
      return out;
    }
    case json::value_t::object: {
      py::dict out;
      for (auto it = j.begin(); it != j.end(); ++it) {
        out[py::str(it.key())] = json_to_py(it.value());
      }
      return out;
    }
    default: return py::none();
  }
}

Genotype genotype_from_arg(const std::string& text_or_preset) {
  if (!text_or_preset.empty() && text_or_preset.front() == '{') {
    return genotype_from_json(text_or_preset);
  }
  return preset_genotype(text_or_preset);
}

AttentionMapsDump dump_from_array(const py::array_t<double, py::array::c_style>& arr) {
  if (arr.ndim() != 3 || arr.shape(1) != arr.shape(2)) {
    throw ContractError("attention maps must have shape [heads, N, N]");
  }
  AttentionMapsDump d;
  d.heads = static_cast<std::size_t>(arr.shape(0));
  d.tokens = static_cast<std::size_t>(arr.shape(1));
  d.data.assign(arr.data(), arr.data() + arr.size());
  return d;
}

}  // namespace

PYBIND11_MODULE(_psvit, m) {
  m.doc() = "PSViT lab core: genotypes, cost model, layers and search";

  py::register_exception<ValidationError>(m, "ValidationError", PyExc_ValueError);
  py::register_exception<ContractError>(m, "ContractError", PyExc_ValueError);
  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);

  m.def("presets", &preset_names, "Names of the built-in genotypes");
  m.def(
      "preset_genotype",
      [](const std::string& name) {
        return json_to_py(json::parse(genotype_to_json(preset_genotype(name))));
      },
      py::arg("name"));
  m.def(
      "validate_genotype",
      [](const std::string& genotype) {
        py::list out;
        for (const auto& v : validate(genotype_from_arg(genotype))) {
          py::dict d;
          d["code"] = v.code;
          d["message"] = v.message;
          out.append(d);
        }
        return out;
      },
      py::arg("genotype"), "Violations for a genotype (JSON text or preset name); empty = valid");
  m.def(
      "count_flops",
      [](const std::string& genotype, bool include_bias) {
        return json_to_py(
            json::parse(count_flops(genotype_from_arg(genotype), include_bias).to_json()));
      },
      py::arg("genotype"), py::arg("include_bias") = true);
  m.def(
      "count_params",
      [](const std::string& genotype, bool include_bias) {
        const ParamBreakdown p = count_params(genotype_from_arg(genotype), include_bias);
        py::dict d;
        d["attention"] = p.attention;
        d["mlp"] = p.mlp;
        d["norm"] = p.norm;
        d["embed"] = p.embed;
        d["pools"] = p.pools;
        d["head"] = p.head;
        d["total"] = p.total();
        return d;
      },
      py::arg("genotype"), py::arg("include_bias") = true);
  m.def("attention_compute_share", &attention_compute_share, py::arg("tokens"), py::arg("dim"),
        "Attention fraction of a transformer layer's compute: (d+N)/(3d+N)");
  m.def(
      "search_space_size",
      [](std::uint64_t st, std::uint64_t sf, std::uint64_t ss, std::uint64_t layers) {
        return search_space_size({st, sf, ss, layers}).to_string();
      },
      py::arg("token_choices"), py::arg("dim_choices"), py::arg("share_choices"),
      py::arg("layers"), "Exact (S_t*S_f*S_s)^L as a decimal string");
  m.def(
      "pooled_tokens",
      [](std::size_t tokens, const std::string& mode) {
        return pooled_tokens(tokens, pooling_mode_from_string(mode));
      },
      py::arg("tokens"), py::arg("mode") = "1d");
  m.def(
      "attention_correlation",
      [](const py::array_t<double, py::array::c_style>& a,
         const py::array_t<double, py::array::c_style>& b) {
        return attention_correlation(dump_from_array(a), dump_from_array(b));
      },
      py::arg("maps_a"), py::arg("maps_b"),
      "Per-head Pearson correlation of two [heads, N, N] map stacks");
  m.def(
      "model_logits",
      [](const std::string& genotype, std::uint64_t seed,
         const py::array_t<double, py::array::c_style>& image) {
        const Genotype g = genotype_from_arg(genotype);
        if (image.ndim() != 3) throw ContractError("image must have shape [H, W, C]");
        const GenotypeModel model(g, seed);
        Shape shape{static_cast<std::size_t>(image.shape(0)),
                    static_cast<std::size_t>(image.shape(1)),
                    static_cast<std::size_t>(image.shape(2))};
        std::vector<double> data(image.data(), image.data() + image.size());
        NoGradGuard guard;
        const Tensor logits = model.forward(Tensor::from_data(shape, std::move(data)));
        py::array_t<double> out(static_cast<py::ssize_t>(logits.size()));
        std::copy(logits.data().begin(), logits.data().end(), out.mutable_data());
        return out;
      },
      py::arg("genotype"), py::arg("seed"), py::arg("image"),
      "Forward a seed-initialized model over one [H, W, C] image");
  m.def(
      "generate_dataset",
      [](const std::string& dir, std::uint64_t seed, std::size_t classes, std::size_t count,
         std::size_t size, std::size_t channels, double noise) {
        DatasetSpec spec;
        spec.seed = seed;
        spec.num_classes = classes;
        spec.count = count;
        spec.image_size = size;
        spec.channels = channels;
        spec.noise = noise;
        const Dataset ds = generate_dataset(spec);
        write_dataset(ds, dir);
        py::dict d;
        d["count"] = ds.spec.count;
        d["train"] = ds.train_indices.size();
        d["val"] = ds.val_indices.size();
        return d;
      },
      py::arg("dir"), py::arg("seed") = 7, py::arg("classes") = 10, py::arg("count") = 200,
      py::arg("size") = 32, py::arg("channels") = 1, py::arg("noise") = 0.15);
}
