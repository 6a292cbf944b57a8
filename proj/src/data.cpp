#include "histoseg/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>

#include "json.hpp"

namespace histoseg {

std::vector<int> patch_origins(int dim, int patch, int stride) {
  if (patch < 1 || stride < 1) fail("patches: size and stride must be positive");
  if (dim < patch) {
    fail("patches: extent " + std::to_string(dim) + " is smaller than the patch size " +
         std::to_string(patch) + " (no padding is applied)");
  }
  std::vector<int> origins;
  for (int o = 0; o + patch <= dim; o += stride) origins.push_back(o);
  if (origins.back() + patch < dim) origins.push_back(dim - patch);
  return origins;
}

std::vector<LabeledSample> extract_patches(const ImageU8& image, const BinaryMask& mask,
                                           const std::string& source_id, int patch,
                                           int stride) {
  if (image.height != mask.height || image.width != mask.width) {
    fail("patches: image " + std::to_string(image.height) + "x" + std::to_string(image.width) +
         " and mask " + std::to_string(mask.height) + "x" + std::to_string(mask.width) +
         " extents differ");
  }
  const std::vector<int> ys = patch_origins(image.height, patch, stride);
  const std::vector<int> xs = patch_origins(image.width, patch, stride);
  std::vector<LabeledSample> out;
  out.reserve(ys.size() * xs.size());
  for (const int oy : ys) {
    for (const int ox : xs) {
      LabeledSample s;
      s.id = source_id + "_" + std::to_string(ox) + "_" + std::to_string(oy);
      s.source_id = source_id;
      s.origin_x = ox;
      s.origin_y = oy;
      s.image = ImageU8(patch, patch, image.channels);
      s.mask = BinaryMask(patch, patch);
      for (int y = 0; y < patch; ++y) {
        for (int x = 0; x < patch; ++x) {
          for (int c = 0; c < image.channels; ++c) {
            s.image.at(y, x, c) = image.at(oy + y, ox + x, c);
          }
          s.mask.at(y, x) = mask.at(oy + y, ox + x);
        }
      }
      out.push_back(std::move(s));
    }
  }
  return out;
}

ImageU8 reassemble_patches(const std::vector<LabeledSample>& patches, int height, int width) {
  if (patches.empty()) fail("reassemble: no patches");
  ImageU8 out(height, width, patches.front().image.channels);
  for (const LabeledSample& p : patches) {
    if (p.image.channels != out.channels) fail("reassemble: mixed channel counts");
    if (p.origin_y + p.image.height > height || p.origin_x + p.image.width > width) {
      fail("reassemble: patch " + p.id + " does not fit the target extents");
    }
    for (int y = 0; y < p.image.height; ++y) {
      for (int x = 0; x < p.image.width; ++x) {
        for (int c = 0; c < out.channels; ++c) {
          out.at(p.origin_y + y, p.origin_x + x, c) = p.image.at(y, x, c);
        }
      }
    }
  }
  return out;
}

std::string SplitManifest::to_json() const {
  nlohmann::json j;
  j["train"] = train;
  j["val"] = val;
  j["test"] = test;
  j["seed"] = seed;
  return j.dump(2) + "\n";
}

SplitManifest SplitManifest::from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    fail(std::string("manifest: not valid JSON: ") + e.what());
  }
  if (!j.is_object()) fail("manifest: expected a JSON object");
  for (const auto& [key, value] : j.items()) {
    (void)value;
    if (key != "train" && key != "val" && key != "test" && key != "seed") {
      fail("manifest: unknown key \"" + key + "\"");
    }
  }
  SplitManifest m;
  try {
    m.train = j.at("train").get<std::vector<std::string>>();
    m.val = j.at("val").get<std::vector<std::string>>();
    m.test = j.at("test").get<std::vector<std::string>>();
    m.seed = j.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    fail(std::string("manifest: bad field: ") + e.what());
  }
  return m;
}

SplitManifest split(const std::vector<LabeledSample>& samples, double train_fraction,
                    double val_fraction, double test_fraction, std::uint64_t seed) {
  if (samples.empty()) fail("split: no samples");
  for (const double f : {train_fraction, val_fraction, test_fraction}) {
    if (f < 0.0 || f > 1.0) fail("split: fractions must be in [0, 1]");
  }
  if (std::abs(train_fraction + val_fraction + test_fraction - 1.0) > 1e-9) {
    fail("split: fractions must sum to 1");
  }

  std::vector<std::string> sources;
  std::unordered_set<std::string> seen;
  for (const LabeledSample& s : samples) {
    if (seen.insert(s.source_id).second) sources.push_back(s.source_id);
  }
  Rng rng(seed);
  shuffle(sources, rng);

  const std::size_t n = sources.size();
  std::size_t counts[3] = {static_cast<std::size_t>(std::floor(n * train_fraction)),
                           static_cast<std::size_t>(std::floor(n * val_fraction)),
                           static_cast<std::size_t>(std::floor(n * test_fraction))};
  std::size_t leftover = n - counts[0] - counts[1] - counts[2];
  for (std::size_t k = 0; leftover > 0; k = (k + 1) % 3, --leftover) ++counts[k];

  std::unordered_map<std::string, int> bucket_of;
  std::size_t i = 0;
  for (int b = 0; b < 3; ++b) {
    for (std::size_t k = 0; k < counts[b]; ++k) bucket_of[sources[i++]] = b;
  }

  SplitManifest m;
  m.seed = seed;
  for (const LabeledSample& s : samples) {
    switch (bucket_of.at(s.source_id)) {
      case 0: m.train.push_back(s.id); break;
      case 1: m.val.push_back(s.id); break;
      default: m.test.push_back(s.id); break;
    }
  }
  return m;
}

namespace {

std::string synth_name(int i) {
  std::string d = std::to_string(i);
  if (d.size() < 4) d.insert(0, 4 - d.size(), '0');
  return "synth_" + d;
}

std::uint8_t quantize(double v) {
  const long r = std::lround(v);
  return static_cast<std::uint8_t>(std::min(255L, std::max(0L, r)));
}

}  // namespace

std::vector<LabeledSample> generate_synthetic(int n, int size, std::uint64_t seed) {
  if (n < 1) fail("synthetic: sample count must be positive");
  if (size < 8 || size % 8 != 0) {
    fail("synthetic: size must be a positive multiple of 8, got " + std::to_string(size));
  }
  struct Ellipse {
    double cx, cy, a, b, cth, sth;
    double color[3];
  };
  std::vector<LabeledSample> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    Rng rng(seed + 1000003ULL * static_cast<std::uint64_t>(i));
    LabeledSample s;
    s.id = synth_name(i);
    s.source_id = s.id;
    s.image = ImageU8(size, size, 3);
    s.mask = BinaryMask(size, size);

    const double base[3] = {rng.uniform(205.0, 235.0), rng.uniform(190.0, 220.0),
                            rng.uniform(215.0, 245.0)};
    const int count = 3 + static_cast<int>(rng.uniform_int(6));
    std::vector<Ellipse> ellipses(static_cast<std::size_t>(count));
    for (Ellipse& e : ellipses) {
      e.cx = rng.uniform(0.15, 0.85) * size;
      e.cy = rng.uniform(0.15, 0.85) * size;
      e.a = rng.uniform(size / 12.0, size / 5.0);
      e.b = rng.uniform(size / 12.0, size / 5.0);
      const double th = rng.uniform(0.0, std::numbers::pi);
      e.cth = std::cos(th);
      e.sth = std::sin(th);
      e.color[0] = rng.uniform(70.0, 105.0);
      e.color[1] = rng.uniform(40.0, 75.0);
      e.color[2] = rng.uniform(110.0, 150.0);
    }

    for (int y = 0; y < size; ++y) {
      for (int x = 0; x < size; ++x) {
        const double px = x + 0.5, py = y + 0.5;
        const Ellipse* hit = nullptr;
        for (const Ellipse& e : ellipses) {
          const double dx = px - e.cx, dy = py - e.cy;
          const double u = dx * e.cth + dy * e.sth;
          const double v = -dx * e.sth + dy * e.cth;
          if (u * u / (e.a * e.a) + v * v / (e.b * e.b) <= 1.0) {
            hit = &e;
            break;
          }
        }
        s.mask.at(y, x) = hit ? 1 : 0;
        const double texture = rng.uniform(-8.0, 8.0);
        for (int c = 0; c < 3; ++c) {
          const double shade = (hit ? hit->color[c] : base[c]) + texture;
          s.image.at(y, x, c) = quantize(shade + rng.normal() * 6.0);
        }
      }
    }
    out.push_back(std::move(s));
  }
  return out;
}

LabeledSample augment(const LabeledSample& sample, const AugmentConfig& config, Rng& rng) {
  LabeledSample out = sample;
  const int h = sample.image.height, w = sample.image.width;
  if (config.hflip && rng.uniform() < 0.5) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        for (int c = 0; c < sample.image.channels; ++c) {
          out.image.at(y, x, c) = sample.image.at(y, w - 1 - x, c);
        }
        out.mask.at(y, x) = sample.mask.at(y, w - 1 - x);
      }
    }
  }
  if (config.vflip && rng.uniform() < 0.5) {
    const LabeledSample pre = out;
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        for (int c = 0; c < pre.image.channels; ++c) {
          out.image.at(y, x, c) = pre.image.at(h - 1 - y, x, c);
        }
        out.mask.at(y, x) = pre.mask.at(h - 1 - y, x);
      }
    }
  }
  return out;
}

std::vector<int> Dataset::split_indices(const std::string& which) const {
  const std::vector<std::string>* ids = nullptr;
  if (which == "train") {
    ids = &manifest.train;
  } else if (which == "val") {
    ids = &manifest.val;
  } else if (which == "test") {
    ids = &manifest.test;
  } else {
    fail("dataset: unknown split \"" + which + "\"");
  }
  std::unordered_map<std::string, int> index;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    index[samples[i].id] = static_cast<int>(i);
  }
  std::vector<int> out;
  out.reserve(ids->size());
  for (const std::string& id : *ids) {
    auto it = index.find(id);
    if (it == index.end()) fail("dataset: manifest lists unknown sample \"" + id + "\"");
    out.push_back(it->second);
  }
  return out;
}

void write_dataset(const std::string& dir, const std::vector<LabeledSample>& samples,
                   const SplitManifest& manifest) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(fs::path(dir) / "images", ec);
  fs::create_directories(fs::path(dir) / "masks", ec);
  if (ec) throw std::runtime_error("cannot create dataset directories under " + dir);
  for (const LabeledSample& s : samples) {
    save_png((fs::path(dir) / "images" / (s.id + ".png")).string(), s.image);
    save_png((fs::path(dir) / "masks" / (s.id + ".png")).string(), mask_to_image(s.mask));
  }
  const std::string manifest_path = (fs::path(dir) / "manifest.json").string();
  std::ofstream out(manifest_path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + manifest_path);
  out << manifest.to_json();
}

Dataset read_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  const std::string manifest_path = (fs::path(dir) / "manifest.json").string();
  std::ifstream in(manifest_path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + manifest_path);
  std::ostringstream text;
  text << in.rdbuf();

  Dataset ds;
  ds.manifest = SplitManifest::from_json(text.str());
  auto load_ids = [&](const std::vector<std::string>& ids) {
    for (const std::string& id : ids) {
      LabeledSample s;
      s.id = id;
      s.source_id = id;
      s.image = load_png((fs::path(dir) / "images" / (id + ".png")).string());
      s.mask = to_mask(load_png((fs::path(dir) / "masks" / (id + ".png")).string()));
      if (s.mask.height != s.image.height || s.mask.width != s.image.width) {
        throw std::runtime_error("dataset: image and mask extents differ for " + id);
      }
      ds.samples.push_back(std::move(s));
    }
  };
  load_ids(ds.manifest.train);
  load_ids(ds.manifest.val);
  load_ids(ds.manifest.test);
  return ds;
}

Tensor batch_images(const std::vector<LabeledSample>& samples, const std::vector<int>& indices) {
  if (indices.empty()) fail("batch: no samples selected");
  const ImageU8& first = samples.at(static_cast<std::size_t>(indices[0])).image;
  Tensor t = Tensor::zeros({static_cast<int>(indices.size()), first.channels, first.height,
                            first.width});
  float* p = t.ptr();
  for (const int idx : indices) {
    const ImageU8& img = samples.at(static_cast<std::size_t>(idx)).image;
    if (img.height != first.height || img.width != first.width ||
        img.channels != first.channels) {
      fail("batch: sample extents differ");
    }
    for (int c = 0; c < img.channels; ++c) {
      for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width; ++x) {
          *p++ = static_cast<float>(img.at(y, x, c)) / 255.0f;
        }
      }
    }
  }
  return t;
}

Tensor batch_masks(const std::vector<LabeledSample>& samples, const std::vector<int>& indices) {
  if (indices.empty()) fail("batch: no samples selected");
  const BinaryMask& first = samples.at(static_cast<std::size_t>(indices[0])).mask;
  Tensor t = Tensor::zeros({static_cast<int>(indices.size()), 1, first.height, first.width});
  float* p = t.ptr();
  for (const int idx : indices) {
    const BinaryMask& m = samples.at(static_cast<std::size_t>(idx)).mask;
    if (m.height != first.height || m.width != first.width) fail("batch: sample extents differ");
    for (const std::uint8_t v : m.values) *p++ = v ? 1.0f : 0.0f;
  }
  return t;
}

}  // namespace histoseg
