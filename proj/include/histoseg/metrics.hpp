#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "histoseg/tensor.hpp"

namespace histoseg {

struct BinaryMask {
  int height = 0, width = 0;
  std::vector<std::uint8_t> values;  // row-major, strictly 0/1

  BinaryMask() = default;
  BinaryMask(int h, int w) : height(h), width(w) {
    if (h < 1 || w < 1) fail("binary mask extents must be positive");
    values.assign(static_cast<std::size_t>(h) * static_cast<std::size_t>(w), 0);
  }

  std::uint8_t& at(int y, int x) {
    return values[static_cast<std::size_t>(y) * static_cast<std::size_t>(width) +
                  static_cast<std::size_t>(x)];
  }
  std::uint8_t at(int y, int x) const {
    return values[static_cast<std::size_t>(y) * static_cast<std::size_t>(width) +
                  static_cast<std::size_t>(x)];
  }
  std::size_t foreground() const {
    std::size_t n = 0;
    for (std::uint8_t v : values) n += v;
    return n;
  }
};

struct LabeledObjects {
  int height = 0, width = 0;
  std::vector<int> labels;         // 0 = background, objects numbered 1..count
  int count = 0;                   // K
  std::vector<std::size_t> sizes;  // sizes[k-1] = pixel count of object k
};

struct MatchDetails {
  int tp = 0, fp = 0, fn = 0;
};

struct ObjectF1 {
  double f1 = 0.0;
  MatchDetails match;
};

struct ImageEval {
  double object_f1 = 0.0, pixel_f1 = 0.0, dice = 0.0, iou = 0.0, miou = 0.0;
  MatchDetails match;
};

struct EvalReport {
  std::vector<ImageEval> per_image;
  double mean_object_f1 = 0.0, mean_pixel_f1 = 0.0, mean_dice = 0.0, mean_iou = 0.0;
  double miou = 0.0;
  std::string to_json() const;
};

// Foreground where the probability is >= threshold (ties go to foreground).
template <typename T>
BinaryMask binarize(const TensorT<T>& prob, double threshold = 0.5) {
  if (!(threshold > 0.0 && threshold < 1.0)) fail("binarize: threshold must be in (0, 1)");
  if (prob.ndim() < 2) fail("binarize: expected a map with spatial dims, got " + shape_str(prob.shape()));
  const int h = prob.dim(prob.ndim() - 2);
  const int w = prob.dim(prob.ndim() - 1);
  if (prob.numel() != static_cast<std::size_t>(h) * static_cast<std::size_t>(w)) {
    fail("binarize: expected a single-channel map, got " + shape_str(prob.shape()));
  }
  BinaryMask m(h, w);
  for (std::size_t i = 0; i < prob.numel(); ++i) {
    m.values[i] = static_cast<double>(prob.cptr()[i]) >= threshold ? 1 : 0;
  }
  return m;
}

// 8-connected components, labeled in row-major order of each object's first pixel.
LabeledObjects connected_components(const BinaryMask& mask);

// Object-level F1: one-to-one matching of predictions to GT objects, where a
// pair is matchable when the intersection covers at least `coverage` of the
// GT object's area; conflicts resolve to the maximum number of matches.
// Empty vs empty scores 1.
ObjectF1 object_f1(const BinaryMask& pred, const BinaryMask& gt, double coverage = 0.5);

double dice_score(const BinaryMask& pred, const BinaryMask& gt);
double pixel_f1(const BinaryMask& pred, const BinaryMask& gt);
double iou(const BinaryMask& pred, const BinaryMask& gt);

ImageEval evaluate_pair(const BinaryMask& pred, const BinaryMask& gt);
EvalReport evaluate(const std::vector<BinaryMask>& preds, const std::vector<BinaryMask>& gts);

}  // namespace histoseg
