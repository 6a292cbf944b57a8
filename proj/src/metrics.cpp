#include "histoseg/metrics.hpp"

#include <algorithm>
#include <sstream>

#include "json.hpp"

namespace histoseg {

namespace {

void check_extents(const BinaryMask& a, const BinaryMask& b, const char* op) {
  if (a.height != b.height || a.width != b.width) {
    fail(std::string(op) + ": mask extents differ: " + std::to_string(a.height) + "x" +
         std::to_string(a.width) + " vs " + std::to_string(b.height) + "x" +
         std::to_string(b.width));
  }
}

struct PixelCounts {
  std::size_t inter = 0, a = 0, b = 0;
};

bool assign_match(int p, const std::vector<std::vector<int>>& eligible, std::vector<int>& match_g,
                  std::vector<char>& visited) {
  for (int g : eligible[static_cast<std::size_t>(p)]) {
    if (visited[static_cast<std::size_t>(g)]) continue;
    visited[static_cast<std::size_t>(g)] = 1;
    if (match_g[static_cast<std::size_t>(g)] < 0 ||
        assign_match(match_g[static_cast<std::size_t>(g)], eligible, match_g, visited)) {
      match_g[static_cast<std::size_t>(g)] = p;
      return true;
    }
  }
  return false;
}

PixelCounts count_pixels(const BinaryMask& pred, const BinaryMask& gt) {
  PixelCounts c;
  for (std::size_t i = 0; i < pred.values.size(); ++i) {
    c.a += pred.values[i];
    c.b += gt.values[i];
    c.inter += static_cast<std::size_t>(pred.values[i] & gt.values[i]);
  }
  return c;
}

}  // namespace

LabeledObjects connected_components(const BinaryMask& mask) {
  LabeledObjects out;
  out.height = mask.height;
  out.width = mask.width;
  out.labels.assign(mask.values.size(), 0);

  std::vector<std::size_t> stack;
  for (int y = 0; y < mask.height; ++y) {
    for (int x = 0; x < mask.width; ++x) {
      std::size_t start = static_cast<std::size_t>(y) * mask.width + x;
      if (!mask.values[start] || out.labels[start]) continue;
      const int label = ++out.count;
      std::size_t size = 0;
      out.labels[start] = label;
      stack.assign(1, start);
      while (!stack.empty()) {
        std::size_t i = stack.back();
        stack.pop_back();
        ++size;
        int cy = static_cast<int>(i) / mask.width;
        int cx = static_cast<int>(i) % mask.width;
        for (int dy = -1; dy <= 1; ++dy) {
          for (int dx = -1; dx <= 1; ++dx) {
            int ny = cy + dy, nx = cx + dx;
            if (ny < 0 || ny >= mask.height || nx < 0 || nx >= mask.width) continue;
            std::size_t ni = static_cast<std::size_t>(ny) * mask.width + nx;
            if (mask.values[ni] && !out.labels[ni]) {
              out.labels[ni] = label;
              stack.push_back(ni);
            }
          }
        }
      }
      out.sizes.push_back(size);
    }
  }
  return out;
}

ObjectF1 object_f1(const BinaryMask& pred, const BinaryMask& gt, double coverage) {
  check_extents(pred, gt, "object_f1");
  LabeledObjects po = connected_components(pred);
  LabeledObjects go = connected_components(gt);

  ObjectF1 result;
  if (po.count == 0 && go.count == 0) {
    result.f1 = 1.0;
    return result;
  }

  // intersection table: inter[p][g] for labels 1..count
  std::vector<std::vector<std::size_t>> inter(
      static_cast<std::size_t>(po.count),
      std::vector<std::size_t>(static_cast<std::size_t>(go.count), 0));
  for (std::size_t i = 0; i < po.labels.size(); ++i) {
    if (po.labels[i] && go.labels[i]) {
      ++inter[static_cast<std::size_t>(po.labels[i] - 1)]
             [static_cast<std::size_t>(go.labels[i] - 1)];
    }
  }

  // One-to-one matching over the pairs that satisfy the coverage rule,
  // resolved to the maximum number of matches (augmenting paths in the
  // deterministic label order), so no prediction steals a ground-truth
  // object another prediction needs.
  std::vector<std::vector<int>> eligible(static_cast<std::size_t>(po.count));
  for (int p = 0; p < po.count; ++p) {
    for (int g = 0; g < go.count; ++g) {
      std::size_t v = inter[static_cast<std::size_t>(p)][static_cast<std::size_t>(g)];
      if (static_cast<double>(v) >=
          coverage * static_cast<double>(go.sizes[static_cast<std::size_t>(g)])) {
        eligible[static_cast<std::size_t>(p)].push_back(g);
      }
    }
  }
  std::vector<int> match_g(static_cast<std::size_t>(go.count), -1);
  for (int p = 0; p < po.count; ++p) {
    std::vector<char> visited(static_cast<std::size_t>(go.count), 0);
    if (assign_match(p, eligible, match_g, visited)) ++result.match.tp;
  }
  result.match.fp = po.count - result.match.tp;
  result.match.fn = go.count - result.match.tp;
  result.f1 = 2.0 * result.match.tp /
              static_cast<double>(2 * result.match.tp + result.match.fp + result.match.fn);
  return result;
}

double dice_score(const BinaryMask& pred, const BinaryMask& gt) {
  check_extents(pred, gt, "dice_score");
  PixelCounts c = count_pixels(pred, gt);
  if (c.a + c.b == 0) return 1.0;
  return 2.0 * static_cast<double>(c.inter) / static_cast<double>(c.a + c.b);
}

double pixel_f1(const BinaryMask& pred, const BinaryMask& gt) {
  check_extents(pred, gt, "pixel_f1");
  PixelCounts c = count_pixels(pred, gt);
  if (c.a + c.b == 0) return 1.0;
  if (c.inter == 0) return 0.0;
  // literal Eq-6 form: 2 / (|A|/|A.B| + |B|/|A.B|)
  return 2.0 / (static_cast<double>(c.a) / static_cast<double>(c.inter) +
                static_cast<double>(c.b) / static_cast<double>(c.inter));
}

double iou(const BinaryMask& pred, const BinaryMask& gt) {
  check_extents(pred, gt, "iou");
  PixelCounts c = count_pixels(pred, gt);
  std::size_t uni = c.a + c.b - c.inter;
  if (uni == 0) return 1.0;
  return static_cast<double>(c.inter) / static_cast<double>(uni);
}

ImageEval evaluate_pair(const BinaryMask& pred, const BinaryMask& gt) {
  ImageEval e;
  ObjectF1 of = object_f1(pred, gt);
  e.object_f1 = of.f1;
  e.match = of.match;
  e.pixel_f1 = pixel_f1(pred, gt);
  e.dice = dice_score(pred, gt);
  e.iou = iou(pred, gt);

  BinaryMask pred_bg(pred.height, pred.width), gt_bg(gt.height, gt.width);
  for (std::size_t i = 0; i < pred.values.size(); ++i) {
    pred_bg.values[i] = pred.values[i] ? 0 : 1;
    gt_bg.values[i] = gt.values[i] ? 0 : 1;
  }
  e.miou = 0.5 * (e.iou + iou(pred_bg, gt_bg));
  return e;
}

EvalReport evaluate(const std::vector<BinaryMask>& preds, const std::vector<BinaryMask>& gts) {
  if (preds.size() != gts.size()) fail("evaluate: prediction and ground-truth counts differ");
  if (preds.empty()) fail("evaluate: empty input");
  EvalReport r;
  r.per_image.reserve(preds.size());
  for (std::size_t i = 0; i < preds.size(); ++i) {
    r.per_image.push_back(evaluate_pair(preds[i], gts[i]));
  }
  const double n = static_cast<double>(r.per_image.size());
  for (const ImageEval& e : r.per_image) {
    r.mean_object_f1 += e.object_f1 / n;
    r.mean_pixel_f1 += e.pixel_f1 / n;
    r.mean_dice += e.dice / n;
    r.mean_iou += e.iou / n;
    r.miou += e.miou / n;
  }
  return r;
}

namespace {

std::string pct(double v) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(2);
  os << v * 100.0;
  return os.str();
}

nlohmann::json metric_fields(const ImageEval& e) {
  return {
      {"object_f1", e.object_f1},    {"object_f1_pct", pct(e.object_f1)},
      {"pixel_f1", e.pixel_f1},      {"pixel_f1_pct", pct(e.pixel_f1)},
      {"dice", e.dice},              {"dice_pct", pct(e.dice)},
      {"iou", e.iou},                {"iou_pct", pct(e.iou)},
      {"miou", e.miou},              {"miou_pct", pct(e.miou)},
      {"tp", e.match.tp},            {"fp", e.match.fp},
      {"fn", e.match.fn},
  };
}

}  // namespace

std::string EvalReport::to_json() const {
  nlohmann::json j;
  j["aggregate"] = {
      {"object_f1", mean_object_f1}, {"object_f1_pct", pct(mean_object_f1)},
      {"pixel_f1", mean_pixel_f1},   {"pixel_f1_pct", pct(mean_pixel_f1)},
      {"dice", mean_dice},           {"dice_pct", pct(mean_dice)},
      {"iou", mean_iou},             {"iou_pct", pct(mean_iou)},
      {"miou", miou},                {"miou_pct", pct(miou)},
      {"images", per_image.size()},
  };
  j["per_image"] = nlohmann::json::array();
  for (const ImageEval& e : per_image) j["per_image"].push_back(metric_fields(e));
  return j.dump(2);
}

}  // namespace histoseg
