#include "psvit/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <unordered_map>

#include <json.hpp>

#include "psvit/errors.hpp"

namespace psvit {

using nlohmann::json;

namespace {

constexpr char kMagic[4] = {'P', 'S', 'V', 'L'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!is) throw IoError("IO", "truncated checkpoint");
  return v;
}

void put_string(std::ostream& os, const std::string& s) {
  put<std::uint64_t>(os, s.size());
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_string(std::istream& is) {
  const auto len = get<std::uint64_t>(is);
  std::string s(len, '\0');
  is.read(s.data(), static_cast<std::streamsize>(len));
  if (!is) throw IoError("IO", "truncated checkpoint string");
  return s;
}

void put_doubles(std::ostream& os, const std::vector<double>& v) {
  put<std::uint64_t>(os, v.size());
  os.write(reinterpret_cast<const char*>(v.data()),
           static_cast<std::streamsize>(v.size() * sizeof(double)));
}

std::vector<double> get_doubles(std::istream& is) {
  const auto len = get<std::uint64_t>(is);
  std::vector<double> v(len);
  is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(len * sizeof(double)));
  if (!is) throw IoError("IO", "truncated checkpoint values");
  return v;
}

}  // namespace

std::string Checkpoint::kind() const {
  try {
    return json::parse(meta).at("kind").get<std::string>();
  } catch (const json::exception& e) {
    throw IoError("BAD_META", std::string("checkpoint meta: ") + e.what());
  }
}

Genotype Checkpoint::genotype() const {
  json j;
  try {
    j = json::parse(meta);
    if (j.at("kind").get<std::string>() != "model") {
      throw IoError("BAD_META", "checkpoint does not hold a standalone model");
    }
    return genotype_from_json(j.at("genotype").dump());
  } catch (const json::exception& e) {
    throw IoError("BAD_META", std::string("checkpoint meta: ") + e.what());
  }
}

SupernetConfig Checkpoint::supernet() const {
  json j;
  try {
    j = json::parse(meta);
    if (j.at("kind").get<std::string>() != "supernet") {
      throw IoError("BAD_META", "checkpoint does not hold a supernet");
    }
    return SupernetConfig::from_json(j.at("config").dump());
  } catch (const json::exception& e) {
    throw IoError("BAD_META", std::string("checkpoint meta: ") + e.what());
  }
}

void save_checkpoint(const std::string& file, const Checkpoint& ckpt) {
  std::ofstream os(file, std::ios::binary);
  if (!os) throw IoError("IO", "cannot open " + file + " for writing");
  os.write(kMagic, 4);
  put<std::uint32_t>(os, ckpt.version);
  put_string(os, ckpt.meta);
  put<std::uint64_t>(os, ckpt.params.size());
  for (const auto& [name, t] : ckpt.params) {
    put_string(os, name);
    put<std::uint32_t>(os, static_cast<std::uint32_t>(t.ndim()));
    for (std::size_t e : t.shape()) put<std::uint64_t>(os, e);
    os.write(reinterpret_cast<const char*>(t.data().data()),
             static_cast<std::streamsize>(t.data().size() * sizeof(double)));
  }
  put<std::uint8_t>(os, ckpt.has_optimizer ? 1 : 0);
  if (ckpt.has_optimizer) {
    put<double>(os, ckpt.opt_momentum);
    put<double>(os, ckpt.opt_weight_decay);
    put<std::uint64_t>(os, ckpt.opt_buffers.size());
    for (const auto& [name, buf] : ckpt.opt_buffers) {
      put_string(os, name);
      put_doubles(os, buf);
    }
  }
  put<std::uint8_t>(os, ckpt.has_rng ? 1 : 0);
  if (ckpt.has_rng) {
    for (std::uint64_t s : ckpt.rng_state) put<std::uint64_t>(os, s);
  }
  put<std::uint64_t>(os, ckpt.iteration);
  if (!os) throw IoError("IO", "failed writing " + file);
}

Checkpoint load_checkpoint(const std::string& file) {
  std::ifstream is(file, std::ios::binary);
  if (!is) throw IoError("IO", "cannot open " + file);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0) {
    throw IoError("BAD_MAGIC", file + " is not a checkpoint");
  }
  Checkpoint ckpt;
  ckpt.version = get<std::uint32_t>(is);
  if (ckpt.version != kVersion) {
    throw IoError("VERSION_MISMATCH", "checkpoint version " + std::to_string(ckpt.version) +
                                          ", this build reads " + std::to_string(kVersion));
  }
  ckpt.meta = get_string(is);
  const auto param_count = get<std::uint64_t>(is);
  for (std::uint64_t i = 0; i < param_count; ++i) {
    std::string name = get_string(is);
    const auto ndim = get<std::uint32_t>(is);
    Shape shape;
    for (std::uint32_t d = 0; d < ndim; ++d) shape.push_back(get<std::uint64_t>(is));
    std::size_t numel = 1;
    for (std::size_t e : shape) numel *= e;
    std::vector<double> data(numel);
    is.read(reinterpret_cast<char*>(data.data()),
            static_cast<std::streamsize>(numel * sizeof(double)));
    if (!is) throw IoError("IO", "truncated tensor " + name);
    ckpt.params.emplace_back(std::move(name), Tensor::from_data(shape, std::move(data)));
  }
  ckpt.has_optimizer = get<std::uint8_t>(is) != 0;
  if (ckpt.has_optimizer) {
    ckpt.opt_momentum = get<double>(is);
    ckpt.opt_weight_decay = get<double>(is);
    const auto buf_count = get<std::uint64_t>(is);
    for (std::uint64_t i = 0; i < buf_count; ++i) {
      std::string name = get_string(is);
      ckpt.opt_buffers.emplace_back(std::move(name), get_doubles(is));
    }
  }
  ckpt.has_rng = get<std::uint8_t>(is) != 0;
  if (ckpt.has_rng) {
    for (auto& s : ckpt.rng_state) s = get<std::uint64_t>(is);
  }
  ckpt.iteration = get<std::uint64_t>(is);
  return ckpt;
}

namespace {

template <typename Net>
Checkpoint checkpoint_impl(Net& net, const std::string& meta, const SgdMomentum* opt,
                           const Rng* rng, std::uint64_t iteration) {
  Checkpoint ckpt;
  ckpt.meta = meta;
  // deep copies: a checkpoint must not alias live training state
  net.visit_params([&ckpt](const std::string& name, Tensor& t) {
    ckpt.params.emplace_back(name, Tensor::from_data(t.shape(), t.data()));
  });
  if (opt) {
    ckpt.has_optimizer = true;
    ckpt.opt_momentum = opt->config().momentum;
    ckpt.opt_weight_decay = opt->config().weight_decay;
    for (const auto& [name, buf] : opt->velocities()) ckpt.opt_buffers.emplace_back(name, buf);
  }
  if (rng) {
    ckpt.has_rng = true;
    ckpt.rng_state = rng->state();
  }
  ckpt.iteration = iteration;
  return ckpt;
}

template <typename Net>
void load_params_into(const Checkpoint& ckpt, Net& net) {
  std::unordered_map<std::string, Tensor*> dst;
  net.visit_params([&dst](const std::string& name, Tensor& t) { dst[name] = &t; });
  std::size_t loaded = 0;
  for (const auto& [name, t] : ckpt.params) {
    auto it = dst.find(name);
    if (it == dst.end()) {
      throw IoError("MISSING_PARAM", "checkpoint tensor '" + name + "' has no destination");
    }
    if (it->second->shape() != t.shape()) {
      throw IoError("SHAPE_MISMATCH", "tensor '" + name + "' is " + shape_to_string(t.shape()) +
                                          " in the checkpoint but " +
                                          shape_to_string(it->second->shape()) + " in the model");
    }
    it->second->data() = t.data();
    ++loaded;
  }
  if (loaded != dst.size()) {
    throw IoError("MISSING_PARAM", "checkpoint holds " + std::to_string(loaded) + " of " +
                                       std::to_string(dst.size()) + " model tensors");
  }
}

}  // namespace

Checkpoint make_checkpoint(GenotypeModel& model, const SgdMomentum* opt, const Rng* rng,
                           std::uint64_t iteration) {
  const json meta{{"kind", "model"}, {"genotype", json::parse(genotype_to_json(model.genotype()))}};
  return checkpoint_impl(model, meta.dump(), opt, rng, iteration);
}

Checkpoint make_checkpoint(Supernet& net, const SgdMomentum* opt, const Rng* rng,
                           std::uint64_t iteration) {
  const json meta{{"kind", "supernet"}, {"config", json::parse(net.cfg.to_json())}};
  return checkpoint_impl(net, meta.dump(), opt, rng, iteration);
}

GenotypeModel model_from_checkpoint(const Checkpoint& ckpt) {
  GenotypeModel model(ckpt.genotype(), 0);
  load_params_into(ckpt, model);
  return model;
}

Supernet supernet_from_checkpoint(const Checkpoint& ckpt) {
  Supernet net(ckpt.supernet(), 0);
  load_params_into(ckpt, net);
  return net;
}

std::map<std::string, std::vector<double>> checkpoint_velocities(const Checkpoint& ckpt) {
  std::map<std::string, std::vector<double>> v;
  for (const auto& [name, buf] : ckpt.opt_buffers) v[name] = buf;
  return v;
}

}  // namespace psvit
