#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "psvit/tensor.hpp"

namespace psvit {

// Class-conditional oriented sinusoid patterns plus Gaussian noise. Each class
// has a fixed orientation/frequency/phase; amplitude jitters per sample. The
// same seed always produces byte-identical data.
struct DatasetSpec {
  std::uint64_t seed = 7;
  std::size_t num_classes = 10;
  std::size_t count = 200;  // must be a multiple of num_classes
  std::size_t image_size = 32;
  std::size_t channels = 1;
  double noise = 0.15;
};

enum class Split { train, val };

struct Dataset {
  DatasetSpec spec;
  std::vector<double> images;  // count * H * W * C, row-major
  std::vector<std::uint32_t> labels;
  std::vector<std::uint32_t> train_indices;
  std::vector<std::uint32_t> val_indices;

  std::size_t image_elems() const { return spec.image_size * spec.image_size * spec.channels; }
  Tensor image_tensor(std::size_t index) const;
  const std::vector<std::uint32_t>& indices(Split s) const;
};

Dataset generate_dataset(const DatasetSpec& spec);

// manifest.json + data.bin (raw f64 little-endian images).
void write_dataset(const Dataset& ds, const std::string& dir);
Dataset load_dataset(const std::string& dir);

// Optional ingestion of real images: one subdirectory per class holding
// binary PPM (P6) files of exactly image_size x image_size.
Dataset load_image_folder(const std::string& dir, std::size_t image_size);

}  // namespace psvit
