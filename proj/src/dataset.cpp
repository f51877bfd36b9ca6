#include "psvit/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "psvit/errors.hpp"

namespace psvit {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr double kTau = 6.283185307179586476925286766559;

}  // namespace

Tensor Dataset::image_tensor(std::size_t index) const {
  const std::size_t n = image_elems();
  std::vector<double> data(images.begin() + index * n, images.begin() + (index + 1) * n);
  return Tensor::from_data({spec.image_size, spec.image_size, spec.channels}, std::move(data));
}

const std::vector<std::uint32_t>& Dataset::indices(Split s) const {
  return s == Split::train ? train_indices : val_indices;
}

Dataset generate_dataset(const DatasetSpec& spec) {
  if (spec.num_classes == 0 || spec.count == 0 || spec.image_size == 0 || spec.channels == 0) {
    throw ContractError("dataset spec extents must be positive");
  }
  if (spec.count % spec.num_classes != 0) {
    throw ContractError("dataset count " + std::to_string(spec.count) +
                        " must be a multiple of num_classes " + std::to_string(spec.num_classes));
  }
  Dataset ds;
  ds.spec = spec;
  const std::size_t s = spec.image_size;
  ds.images.resize(spec.count * ds.image_elems());
  ds.labels.resize(spec.count);
  Rng rng(spec.seed);
  for (std::size_t i = 0; i < spec.count; ++i) {
    const std::uint32_t label = static_cast<std::uint32_t>(i % spec.num_classes);
    ds.labels[i] = label;
    const double theta = kTau / 2.0 * static_cast<double>(label) /
                         static_cast<double>(spec.num_classes);
    const double freq = 1.5 + 0.75 * static_cast<double>(label % 4);
    const double phase = 0.7 * static_cast<double>(label);
    const double amp = 0.75 + 0.5 * rng.next_double();
    double* img = ds.images.data() + i * ds.image_elems();
    for (std::size_t y = 0; y < s; ++y) {
      for (std::size_t x = 0; x < s; ++x) {
        const double u = (static_cast<double>(x) * std::cos(theta) +
                          static_cast<double>(y) * std::sin(theta)) /
                         static_cast<double>(s);
        const double base = amp * std::sin(kTau * freq * u + phase);
        for (std::size_t c = 0; c < spec.channels; ++c) {
          const double chan_shift = 0.35 * static_cast<double>(c);
          img[(y * s + x) * spec.channels + c] =
              base * std::cos(chan_shift) + spec.noise * rng.next_normal();
        }
      }
    }
  }
  // Deterministic split by index hash, ~20% validation.
  for (std::uint32_t i = 0; i < spec.count; ++i) {
    if (mix64(spec.seed ^ (0x5851f42d4c957f2dULL * (i + 1))) % 5 == 0) {
      ds.val_indices.push_back(i);
    } else {
      ds.train_indices.push_back(i);
    }
  }
  return ds;
}

void write_dataset(const Dataset& ds, const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  json manifest{{"version", 1},
                {"seed", ds.spec.seed},
                {"num_classes", ds.spec.num_classes},
                {"count", ds.spec.count},
                {"image_size", ds.spec.image_size},
                {"channels", ds.spec.channels},
                {"noise", ds.spec.noise},
                {"labels", ds.labels},
                {"train_indices", ds.train_indices},
                {"val_indices", ds.val_indices},
                {"data_file", "data.bin"}};
  std::ofstream mf(fs::path(dir) / "manifest.json", std::ios::binary);
  mf << manifest.dump(2) << '\n';
  if (!mf) throw IoError("IO", "cannot write manifest under " + dir);
  std::ofstream df(fs::path(dir) / "data.bin", std::ios::binary);
  df.write(reinterpret_cast<const char*>(ds.images.data()),
           static_cast<std::streamsize>(ds.images.size() * sizeof(double)));
  if (!df) throw IoError("IO", "cannot write data.bin under " + dir);
}

Dataset load_dataset(const std::string& dir) {
  std::ifstream mf(fs::path(dir) / "manifest.json", std::ios::binary);
  if (!mf) throw IoError("IO", "missing manifest.json under " + dir);
  json manifest;
  try {
    mf >> manifest;
  } catch (const json::exception& e) {
    throw IoError("BAD_META", std::string("manifest parse error: ") + e.what());
  }
  try {
    if (manifest.at("version").get<int>() != 1) {
      throw IoError("VERSION_MISMATCH", "unsupported dataset manifest version");
    }
    Dataset ds;
    ds.spec.seed = manifest.at("seed").get<std::uint64_t>();
    ds.spec.num_classes = manifest.at("num_classes").get<std::size_t>();
    ds.spec.count = manifest.at("count").get<std::size_t>();
    ds.spec.image_size = manifest.at("image_size").get<std::size_t>();
    ds.spec.channels = manifest.at("channels").get<std::size_t>();
    ds.spec.noise = manifest.at("noise").get<double>();
    ds.labels = manifest.at("labels").get<std::vector<std::uint32_t>>();
    ds.train_indices = manifest.at("train_indices").get<std::vector<std::uint32_t>>();
    ds.val_indices = manifest.at("val_indices").get<std::vector<std::uint32_t>>();
    const fs::path data_file = fs::path(dir) / manifest.at("data_file").get<std::string>();
    std::ifstream df(data_file, std::ios::binary);
    if (!df) throw IoError("IO", "missing data file " + data_file.string());
    ds.images.resize(ds.spec.count * ds.image_elems());
    df.read(reinterpret_cast<char*>(ds.images.data()),
            static_cast<std::streamsize>(ds.images.size() * sizeof(double)));
    if (df.gcount() != static_cast<std::streamsize>(ds.images.size() * sizeof(double))) {
      throw IoError("SHAPE_MISMATCH", "data file shorter than manifest promises");
    }
    return ds;
  } catch (const json::exception& e) {
    throw IoError("BAD_META", std::string("manifest missing field: ") + e.what());
  }
}

namespace {

// Binary PPM (P6), 8-bit, exact size match; values scaled to [-1, 1].
std::vector<double> read_ppm(const fs::path& file, std::size_t size, std::size_t channels) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw IoError("IO", "cannot open " + file.string());
  std::string magic;
  in >> magic;
  if (magic != "P6") throw IoError("BAD_MAGIC", file.string() + " is not a P6 PPM");
  auto next_int = [&in, &file]() {
    int c = in.peek();
    while (c == '#' || std::isspace(c)) {
      if (c == '#') in.ignore(1 << 20, '\n');
      else in.ignore();
      c = in.peek();
    }
    std::size_t v = 0;
    if (!(in >> v)) throw IoError("IO", "truncated PPM header in " + file.string());
    return v;
  };
  const std::size_t w = next_int(), h = next_int(), maxval = next_int();
  in.ignore();  // single whitespace before raster
  if (w != size || h != size) {
    throw IoError("SHAPE_MISMATCH", file.string() + " is " + std::to_string(w) + "x" +
                                        std::to_string(h) + ", expected " + std::to_string(size));
  }
  if (maxval != 255) throw IoError("BAD_META", "only 8-bit PPM supported");
  std::vector<unsigned char> raw(w * h * 3);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!in) throw IoError("IO", "truncated PPM raster in " + file.string());
  std::vector<double> out(w * h * channels);
  for (std::size_t p = 0; p < w * h; ++p) {
    for (std::size_t c = 0; c < channels; ++c) {
      const double v = raw[p * 3 + (c % 3)] / 255.0;
      out[p * channels + c] = v * 2.0 - 1.0;
    }
  }
  return out;
}

}  // namespace

Dataset load_image_folder(const std::string& dir, std::size_t image_size) {
  std::vector<fs::path> class_dirs;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_directory()) class_dirs.push_back(entry.path());
  }
  std::sort(class_dirs.begin(), class_dirs.end());
  if (class_dirs.empty()) throw IoError("IO", "no class subdirectories under " + dir);

  Dataset ds;
  ds.spec.seed = 0;
  ds.spec.num_classes = class_dirs.size();
  ds.spec.image_size = image_size;
  ds.spec.channels = 3;
  ds.spec.noise = 0.0;
  for (std::size_t label = 0; label < class_dirs.size(); ++label) {
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(class_dirs[label])) {
      if (entry.is_regular_file() && entry.path().extension() == ".ppm") {
        files.push_back(entry.path());
      }
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      const auto pixels = read_ppm(f, image_size, 3);
      ds.images.insert(ds.images.end(), pixels.begin(), pixels.end());
      ds.labels.push_back(static_cast<std::uint32_t>(label));
    }
  }
  ds.spec.count = ds.labels.size();
  if (ds.spec.count == 0) throw IoError("IO", "no .ppm files found under " + dir);
  for (std::uint32_t i = 0; i < ds.spec.count; ++i) {
    if (mix64(0x5851f42d4c957f2dULL * (i + 1)) % 5 == 0) ds.val_indices.push_back(i);
    else ds.train_indices.push_back(i);
  }
  return ds;
}

}  // namespace psvit
