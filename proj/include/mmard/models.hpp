#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mmard/tensor.hpp"

namespace mmard {

enum class ArchFamily { Mlp, SmallCnn };

struct ConvLayerSpec {
  std::size_t out_channels{8};
  int kernel{3};
  int stride{1};
  int pad{1};
};

// Architecture descriptor; round-trips through a compact text form, e.g.
//   mlp:in=2,hidden=16;32,classes=2
//   smallcnn:in=1x8x8,conv=8k3s2p1;16k3s2p1,classes=4
struct ArchSpec {
  ArchFamily family{ArchFamily::Mlp};
  Shape input_shape{2};                 // mlp: [d]; smallcnn: [c,h,w]
  std::vector<std::size_t> hidden{16};  // mlp widths
  std::vector<ConvLayerSpec> conv;      // smallcnn schedule
  std::size_t classes{2};

  std::string descriptor() const;
  static ArchSpec parse(const std::string& text);
  void validate() const;
  std::size_t input_size() const { return shape_size(input_shape); }
};

struct Param {
  std::string name;
  Tensor value;
};

struct Model {
  ArchSpec arch;
  std::vector<Param> params;
  bool frozen{false};  // frozen teachers never receive gradients

  std::size_t param_count() const;
  std::uint64_t checksum() const;  // bit-level FNV-1a over all parameters
};

// Scaled-uniform fan-in init (bound = sqrt(6/fan_in)), zero biases,
// deterministic in the seed.
Model build_model(const ArchSpec& arch, std::uint64_t seed);

// Model parameters registered as leaves of `g`, aligned with model.params.
struct AttachedModel {
  const Model* model{nullptr};
  std::vector<Tensor> params;
};

AttachedModel attach_model(Graph& g, const Model& m, bool trainable);
inline AttachedModel attach_model(Graph& g, const Model& m) {
  return attach_model(g, m, !m.frozen);
}

Tensor forward_logits(Graph& g, const AttachedModel& am, const Tensor& batch);
Tensor forward_logits(Graph& g, const Model& m, const Tensor& batch);

void save_checkpoint(const Model& m, const std::string& path);
Model load_checkpoint(const std::string& path);

}  // namespace mmard
