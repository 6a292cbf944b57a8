// Dataset plumbing: sliding-window patch extraction, source-grouped splits,
// the synthetic ellipse dataset, and dataset directory I/O.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "histoseg/image.hpp"
#include "histoseg/metrics.hpp"
#include "histoseg/tensor.hpp"

namespace histoseg {

struct LabeledSample {
  std::string id;
  std::string source_id;
  int origin_x = 0, origin_y = 0;
  ImageU8 image;
  BinaryMask mask;
};

// Window origins {0, stride, 2*stride, ...}; when the last regular origin
// leaves a sliver uncovered, a final window is clamped to end at the edge.
std::vector<int> patch_origins(int dim, int patch, int stride);

// Crops image and mask identically at every (origin_y, origin_x) pair in
// row-major order. Patches inherit the source id; ids are "{src}_{x}_{y}".
std::vector<LabeledSample> extract_patches(const ImageU8& image, const BinaryMask& mask,
                                           const std::string& source_id, int patch = 256,
                                           int stride = 256);

// Pastes patches back at their origins (row-major order, later windows win on
// overlap). Patches cut from one image reproduce it exactly.
ImageU8 reassemble_patches(const std::vector<LabeledSample>& patches, int height, int width);

struct SplitManifest {
  std::vector<std::string> train, val, test;
  std::uint64_t seed = 0;

  std::string to_json() const;
  static SplitManifest from_json(const std::string& text);
};

// Seeded shuffle of the source ids, then a floor-count partition (leftovers
// go to train, then val), so patches of one source never straddle splits.
SplitManifest split(const std::vector<LabeledSample>& samples, double train_fraction,
                    double val_fraction, double test_fraction, std::uint64_t seed);

// Renders n samples of 3..8 randomly placed dark rotated ellipses over a
// textured light background with Gaussian pixel noise (sigma 6); the mask is
// the exact ellipse union evaluated at pixel centers, noise-free. Geometry
// per ellipse: center uniform in [0.15, 0.85]*size, semi-axes uniform in
// [size/12, size/5], rotation uniform in [0, pi).
std::vector<LabeledSample> generate_synthetic(int n, int size, std::uint64_t seed);

struct AugmentConfig {
  bool hflip = false;  // random left-right flip
  bool vflip = false;  // random top-bottom flip
};

LabeledSample augment(const LabeledSample& sample, const AugmentConfig& config, Rng& rng);

struct Dataset {
  std::vector<LabeledSample> samples;
  SplitManifest manifest;

  // Indices into samples for "train", "val", or "test", in manifest order.
  std::vector<int> split_indices(const std::string& which) const;
};

// Layout: dir/images/{id}.png, dir/masks/{id}.png, dir/manifest.json.
void write_dataset(const std::string& dir, const std::vector<LabeledSample>& samples,
                   const SplitManifest& manifest);
Dataset read_dataset(const std::string& dir);

// Stacks selected samples into batch tensors: images Nx3xHxW in [0,1], masks
// Nx1xHxW in {0,1}.
Tensor batch_images(const std::vector<LabeledSample>& samples, const std::vector<int>& indices);
Tensor batch_masks(const std::vector<LabeledSample>& samples, const std::vector<int>& indices);

}  // namespace histoseg
