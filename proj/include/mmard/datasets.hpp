#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mmard/tensor.hpp"

namespace mmard {

struct DatasetBundle {
  Tensor features;  // [N, ...], values in [0,1]
  std::vector<std::size_t> labels;
  std::size_t classes{2};
  std::string split{"train"};
  std::map<std::string, std::string> metadata;

  std::size_t count() const { return labels.size(); }
  Shape sample_shape() const;
  // Nominal inter-class margin in feature units, from metadata.
  double margin() const;
  void validate() const;
};

// Two interleaving half circles with Gaussian noise, affinely rescaled into
// [0,1]^2. Metadata records the noiseless inter-class margin in rescaled units.
DatasetBundle gen_two_moons(std::size_t n, double noise, std::uint64_t seed,
                            const std::string& split = "train");

// C isotropic Gaussian blobs on a grid with the given spacing, rescaled into
// [0,1]^2, or rendered as 8x8 intensity patches when `image` is set.
DatasetBundle gen_blob_grid(std::size_t classes, std::size_t per_class, double spacing,
                            double noise, std::uint64_t seed, bool image = false,
                            const std::string& split = "train");

void write_dataset(const DatasetBundle& bundle, const std::string& path);
DatasetBundle read_dataset(const std::string& path);

// Rows of `data.features` at `indices`, plus the matching labels.
std::pair<Tensor, std::vector<std::size_t>> gather_batch(const DatasetBundle& data,
                                                         const std::vector<std::size_t>& indices,
                                                         std::size_t begin, std::size_t end);

}  // namespace mmard
