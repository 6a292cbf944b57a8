#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "histoseg/checkpoint.hpp"
#include "histoseg/trainer.hpp"
#include "json.hpp"
#include "testutil.hpp"

using namespace histoseg;
using testutil::bit_identical;
namespace fs = std::filesystem;

namespace {

// Frozen outputs of tests/oracles/adam_scalar.py (float64 trajectory on
// f(w) = (w-3)^2 from w = 0 at lr 0.01): |w-3| first drops below 1e-3 at
// step 992, and w after step 1 is exactly +lr.
constexpr int kQuadHitLo = 892;
constexpr int kQuadHitHi = 1092;

fs::path temp_dir(const std::string& tag) {
  const fs::path dir = fs::temp_directory_path() / ("histoseg_test_" + tag);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(bool(in));
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void write_bytes(const fs::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  REQUIRE(bool(out));
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

// Drops the wall-time column so deterministic runs can be compared whole.
std::string strip_seconds(const std::string& csv) {
  std::istringstream in(csv);
  std::string line, out;
  while (std::getline(in, line)) {
    out += line.substr(0, line.rfind(','));
    out += '\n';
  }
  return out;
}

NetworkSpec small_spec(int hw) {
  NetworkSpec spec;
  spec.width_multiplier = 0.125;
  spec.input_height = hw;
  spec.input_width = hw;
  return spec;
}

// Synthetic dataset with the first train_n samples in train and the next
// val_n in val; anything left over lands in test.
Dataset make_dataset(int n, int size, std::uint64_t seed, int train_n, int val_n) {
  Dataset d;
  d.samples = generate_synthetic(n, size, seed);
  d.manifest.seed = seed;
  for (int i = 0; i < n; ++i) {
    const std::string& id = d.samples[static_cast<std::size_t>(i)].id;
    if (i < train_n) {
      d.manifest.train.push_back(id);
    } else if (i < train_n + val_n) {
      d.manifest.val.push_back(id);
    } else {
      d.manifest.test.push_back(id);
    }
  }
  return d;
}

ParameterStore single_param_store(const std::vector<float>& values) {
  ParameterStore store;
  store.add("w", Tensor::from({static_cast<int>(values.size())}, values), true);
  return store;
}

}  // namespace

TEST_CASE("adam: zero gradients from scratch leave parameters untouched") {
  ParameterStore store = single_param_store({1.0f, -2.0f, 3.5f, 0.25f});
  const Tensor before = store.at("w").tensor.clone();
  TrainConfig cfg;
  store.zero_grad();
  adam_step(store, cfg, 1);
  CHECK(bit_identical(store.at("w").tensor, before));
  for (float m : store.at("w").m) CHECK(m == 0.0f);
  for (float v : store.at("w").v) CHECK(v == 0.0f);
}

TEST_CASE("adam: moments decay by beta factors once gradients stop") {
  ParameterStore store = single_param_store({0.0f, 0.0f});
  TrainConfig cfg;
  store.at("w").tensor.grad() = {2.0f, -4.0f};
  adam_step(store, cfg, 1);
  const std::vector<float> m1 = store.at("w").m;
  const std::vector<float> v1 = store.at("w").v;
  CHECK(m1[0] == doctest::Approx(0.1 * 2.0));
  CHECK(v1[1] == doctest::Approx(0.001 * 16.0));

  store.zero_grad();
  adam_step(store, cfg, 2);
  for (std::size_t i = 0; i < m1.size(); ++i) {
    CHECK(store.at("w").m[i] == doctest::Approx(0.9 * m1[i]));
    CHECK(store.at("w").v[i] == doctest::Approx(0.999 * v1[i]));
    CHECK(std::abs(store.at("w").m[i]) < std::abs(m1[i]));
  }
}

TEST_CASE("adam: the first step moves each weight by lr against the gradient sign") {
  ParameterStore store = single_param_store({0.5f, -1.0f, 2.0f});
  TrainConfig cfg;
  store.at("w").tensor.grad() = {5.0f, -0.3f, 0.01f};
  adam_step(store, cfg, 1);
  const float* w = store.at("w").tensor.cptr();
  CHECK(w[0] == doctest::Approx(0.5 - 0.01).epsilon(1e-5));
  CHECK(w[1] == doctest::Approx(-1.0 + 0.01).epsilon(1e-5));
  CHECK(w[2] == doctest::Approx(2.0 - 0.01).epsilon(1e-5));
}

TEST_CASE("adam: scalar quadratic reaches the optimum inside the step budget") {
  ParameterStore store = single_param_store({0.0f});
  TrainConfig cfg;
  int hit = 0;
  for (int t = 1; t <= 2000; ++t) {
    const float w = store.at("w").tensor.cptr()[0];
    store.zero_grad();
    store.at("w").tensor.grad()[0] = 2.0f * (w - 3.0f);
    adam_step(store, cfg, t);
    if (t == 1) CHECK(store.at("w").tensor.cptr()[0] == doctest::Approx(0.01).epsilon(1e-5));
    if (hit == 0 && std::abs(store.at("w").tensor.cptr()[0] - 3.0f) < 1e-3f) hit = t;
  }
  CHECK(hit > 0);
  CHECK(hit >= kQuadHitLo);
  CHECK(hit <= kQuadHitHi);
  CHECK(std::abs(store.at("w").tensor.cptr()[0] - 3.0f) < 1e-3f);
}

TEST_CASE("adam: first-step updates are invariant to gradient scale") {
  const std::vector<float> w0 = {1.0f, 2.0f, -3.0f};
  const std::vector<float> g = {0.2f, -4.0f, 7.0f};
  ParameterStore a = single_param_store(w0);
  ParameterStore b = single_param_store(w0);
  a.at("w").tensor.grad() = g;
  b.at("w").tensor.grad() = {g[0] * 1000.0f, g[1] * 1000.0f, g[2] * 1000.0f};
  TrainConfig cfg;
  adam_step(a, cfg, 1);
  adam_step(b, cfg, 1);
  for (int i = 0; i < 3; ++i) {
    const double da = a.at("w").tensor.cptr()[i] - w0[static_cast<std::size_t>(i)];
    const double db = b.at("w").tensor.cptr()[i] - w0[static_cast<std::size_t>(i)];
    CHECK(std::abs(da - db) < 1e-3 * std::abs(da));
  }
}

TEST_CASE("adam: a trainable parameter without a grad buffer is named") {
  ParameterStore store;
  store.entries().push_back({"conv.weight", Tensor::zeros({2, 2}), true, {}, {}});
  TrainConfig cfg;
  CHECK_THROWS_WITH_AS(adam_step(store, cfg, 1),
                       "adam_step: no gradient for parameter conv.weight", std::invalid_argument);
}

TEST_CASE("adam: config and step index are validated") {
  ParameterStore store = single_param_store({1.0f});
  TrainConfig cfg;
  CHECK_THROWS_WITH_AS(adam_step(store, cfg, 0), "adam_step: step index must be >= 1, got 0",
                       std::invalid_argument);
  cfg.beta1 = 1.0;
  CHECK_THROWS_WITH_AS(adam_step(store, cfg, 1), "train config: beta1 must be in [0, 1)",
                       std::invalid_argument);
  cfg = TrainConfig{};
  cfg.learning_rate = -0.1;
  CHECK_THROWS_WITH_AS(adam_step(store, cfg, 1), "train config: learning rate must be >= 0",
                       std::invalid_argument);
  cfg = TrainConfig{};
  cfg.epochs = 0;
  CHECK_THROWS_WITH_AS(cfg.validate(), "train config: epochs must be >= 1",
                       std::invalid_argument);
  cfg = TrainConfig{};
  cfg.batch_size = 0;
  CHECK_THROWS_WITH_AS(cfg.validate(), "train config: batch size must be >= 1",
                       std::invalid_argument);
}

TEST_CASE("checkpoint: save and load round-trip byte for byte") {
  const fs::path dir = temp_dir("ckpt");
  NetworkSpec spec = small_spec(32);
  HistoSegModel a = HistoSegModel::build(spec, 7);
  HistoSegModel b = HistoSegModel::build(spec, 8);

  bool any_differs = false;
  for (std::size_t i = 0; i < a.params().entries().size(); ++i) {
    if (!bit_identical(a.params().entries()[i].tensor, b.params().entries()[i].tensor)) {
      any_differs = true;
    }
  }
  CHECK(any_differs);

  const std::string path = (dir / "model.ckpt").string();
  save_checkpoint(path, a.params());
  load_checkpoint(path, b.params());
  for (std::size_t i = 0; i < a.params().entries().size(); ++i) {
    CAPTURE(a.params().entries()[i].name);
    CHECK(bit_identical(a.params().entries()[i].tensor, b.params().entries()[i].tensor));
  }

  const std::string again = (dir / "again.ckpt").string();
  save_checkpoint(again, b.params());
  CHECK(read_bytes(path) == read_bytes(again));
}

TEST_CASE("checkpoint: corrupted and mismatched files raise distinct errors") {
  const fs::path dir = temp_dir("ckpterr");
  ParameterStore store;
  store.add("a", Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6}), true);
  store.add("b", Tensor::from({4}, {9, 8, 7, 6}), false);
  const std::string path = (dir / "small.ckpt").string();
  save_checkpoint(path, store);
  const std::string good = read_bytes(path);

  CHECK_THROWS_WITH_AS(load_checkpoint((dir / "absent.ckpt").string(), store),
                       ("checkpoint: cannot open " + (dir / "absent.ckpt").string()).c_str(),
                       std::runtime_error);

  std::string bad = good;
  bad[0] = 'X';
  write_bytes(dir / "magic.ckpt", bad);
  CHECK_THROWS_WITH_AS(load_checkpoint((dir / "magic.ckpt").string(), store),
                       ("checkpoint: " + (dir / "magic.ckpt").string() +
                        " is not a checkpoint (bad magic)")
                           .c_str(),
                       std::runtime_error);

  bad = good;
  bad[4] = 2;
  write_bytes(dir / "version.ckpt", bad);
  CHECK_THROWS_WITH_AS(
      load_checkpoint((dir / "version.ckpt").string(), store),
      ("checkpoint: unsupported version 2 in " + (dir / "version.ckpt").string()).c_str(),
      std::runtime_error);

  write_bytes(dir / "short.ckpt", good.substr(0, good.size() / 2));
  CHECK_THROWS_WITH_AS(
      load_checkpoint((dir / "short.ckpt").string(), store),
      ("checkpoint: truncated file " + (dir / "short.ckpt").string()).c_str(),
      std::runtime_error);

  // Tensor "a" starts right after the 12-byte header; its dtype byte sits
  // after the u16 name length and the 1-byte name.
  bad = good;
  bad[12 + 2 + 1] = 7;
  write_bytes(dir / "dtype.ckpt", bad);
  CHECK_THROWS_WITH_AS(load_checkpoint((dir / "dtype.ckpt").string(), store),
                       "checkpoint: unsupported dtype 7 for tensor a", std::runtime_error);

  ParameterStore only_a;
  only_a.add("a", Tensor::zeros({2, 3}), true);
  CHECK_THROWS_WITH_AS(load_checkpoint(path, only_a),
                       "checkpoint: unknown tensor b (not in the parameter store)",
                       std::runtime_error);

  ParameterStore extra = store;
  extra.add("c", Tensor::zeros({1}), true);
  CHECK_THROWS_WITH_AS(load_checkpoint(path, extra),
                       "checkpoint: store tensor c missing from file", std::runtime_error);

  ParameterStore transposed;
  transposed.add("a", Tensor::zeros({3, 2}), true);
  CHECK_THROWS_WITH_AS(load_checkpoint(path, transposed),
                       "checkpoint: shape mismatch for a: file [2x3] vs store [3x2]",
                       std::runtime_error);
}

TEST_CASE("checkpoint: a narrower model's file names the first offending tensor") {
  const fs::path dir = temp_dir("ckptwidth");
  NetworkSpec narrow = small_spec(32);
  narrow.width_multiplier = 0.25;
  NetworkSpec wide = narrow;
  wide.width_multiplier = 0.5;

  const std::string path = (dir / "narrow.ckpt").string();
  HistoSegModel n = HistoSegModel::build(narrow, 1);
  save_checkpoint(path, n.params());

  HistoSegModel w = HistoSegModel::build(wide, 1);
  CHECK_THROWS_WITH_AS(
      load_checkpoint(path, w.params()),
      "checkpoint: shape mismatch for stem.conv.weight: file [8x3x3x3] vs store [16x3x3x3]",
      std::runtime_error);
}

TEST_CASE("train: learning rate zero leaves every trainable tensor bit-identical") {
  const Dataset d = make_dataset(12, 32, 3, 8, 4);
  const NetworkSpec spec = small_spec(32);
  TrainConfig cfg;
  cfg.learning_rate = 0.0;
  cfg.batch_size = 4;
  cfg.epochs = 2;
  cfg.seed = 3;

  const HistoSegModel reference = HistoSegModel::build(spec, cfg.seed);
  TrainResult res = train(d, spec, cfg);

  bool stats_moved = false;
  for (std::size_t i = 0; i < reference.params().entries().size(); ++i) {
    const ParamEntry<float>& want = reference.params().entries()[i];
    const ParamEntry<float>& got = res.model.params().entries()[i];
    CAPTURE(want.name);
    if (want.trainable) {
      CHECK(bit_identical(want.tensor, got.tensor));
    } else if (!bit_identical(want.tensor, got.tensor)) {
      // Running statistics are estimates refreshed by train-mode forward
      // passes, not optimizer state, so they drift even at lr 0.
      stats_moved = true;
    }
  }
  CHECK(stats_moved);
}

TEST_CASE("train: identical seeds give identical logs and checkpoints") {
  const Dataset d = make_dataset(16, 32, 9, 12, 4);
  const NetworkSpec spec = small_spec(32);
  TrainConfig cfg;
  cfg.batch_size = 4;
  cfg.epochs = 3;
  cfg.seed = 11;

  const fs::path dir_a = temp_dir("det_a");
  const fs::path dir_b = temp_dir("det_b");
  cfg.out_dir = dir_a.string();
  const TrainResult a = train(d, spec, cfg);
  cfg.out_dir = dir_b.string();
  const TrainResult b = train(d, spec, cfg);

  CHECK(read_bytes(dir_a / "last.ckpt") == read_bytes(dir_b / "last.ckpt"));
  CHECK(read_bytes(dir_a / "best.ckpt") == read_bytes(dir_b / "best.ckpt"));
  CHECK(strip_seconds(read_bytes(dir_a / "log.csv")) ==
        strip_seconds(read_bytes(dir_b / "log.csv")));
  CHECK(a.best_epoch == b.best_epoch);
  CHECK(a.best_val_iou == b.best_val_iou);

  // A different seed shuffles, initializes, and drops out differently.
  cfg.seed = 12;
  cfg.out_dir.clear();
  const TrainResult c = train(d, spec, cfg);
  CHECK(c.log.epochs.back().train_loss != a.log.epochs.back().train_loss);
}

TEST_CASE("train: the log is contiguous, finite, and mirrored into JSON") {
  const Dataset d = make_dataset(10, 32, 21, 8, 2);
  const NetworkSpec spec = small_spec(32);
  TrainConfig cfg;
  cfg.batch_size = 4;
  cfg.epochs = 2;
  cfg.seed = 4;
  const fs::path dir = temp_dir("log");
  cfg.out_dir = dir.string();

  const TrainResult res = train(d, spec, cfg);
  REQUIRE(res.log.epochs.size() == 2);
  for (std::size_t i = 0; i < res.log.epochs.size(); ++i) {
    const EpochRecord& r = res.log.epochs[i];
    CHECK(r.epoch == static_cast<int>(i) + 1);
    CHECK(std::isfinite(r.train_loss));
    CHECK(std::isfinite(r.val_loss));
    CHECK(r.val_iou >= 0.0);
    CHECK(r.val_iou <= 1.0);
    CHECK(r.seconds >= 0.0);
    CHECK(r.train_loss == doctest::Approx(r.bce + r.focal + r.dice).epsilon(1e-5));
  }
  CHECK(res.best_epoch >= 1);
  CHECK(res.best_epoch <= 2);
  double best = -1.0;
  for (const EpochRecord& r : res.log.epochs) best = std::max(best, r.val_iou);
  CHECK(res.best_val_iou == best);

  const std::string csv = read_bytes(dir / "log.csv");
  CHECK(csv.rfind("epoch,train_loss,bce,focal,dice,val_loss,val_iou,seconds\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);

  const nlohmann::json j = nlohmann::json::parse(read_bytes(dir / "log.json"));
  REQUIRE(j.at("epochs").size() == 2);
  for (std::size_t i = 0; i < 2; ++i) {
    const nlohmann::json& e = j.at("epochs")[i];
    CHECK(e.at("epoch").get<int>() == res.log.epochs[i].epoch);
    CHECK(e.at("train_loss").get<double>() == res.log.epochs[i].train_loss);
    CHECK(e.at("val_loss").get<double>() == res.log.epochs[i].val_loss);
    CHECK(e.at("val_iou").get<double>() == res.log.epochs[i].val_iou);
  }

  CHECK(fs::exists(dir / "best.ckpt"));
  CHECK(fs::exists(dir / "last.ckpt"));
}

TEST_CASE("train: a tiny fixed batch is overfit within 200 steps") {
  Dataset d;
  d.samples = generate_synthetic(8, 64, 5);
  for (const LabeledSample& s : d.samples) {
    d.manifest.train.push_back(s.id);
    d.manifest.val.push_back(s.id);
  }
  NetworkSpec spec = small_spec(64);
  TrainConfig cfg;
  cfg.batch_size = 8;
  cfg.epochs = 200;
  cfg.seed = 5;

  // Thresholds frozen from the first verified convergence run (0.197x the
  // initial loss, IoU 0.776 on the memorized batch). The loss cannot fall
  // much further at this scale: the head predicts on an 8x-downsampled grid,
  // so the upsampled boundary band of each small ellipse stays imperfect no
  // matter how long the run continues (500 steps: 0.196x; no dropout: same;
  // double width: no better).
  const TrainResult res = train(d, spec, cfg);
  const double initial = res.log.epochs.front().train_loss;
  const double final_loss = res.log.epochs.back().train_loss;
  CAPTURE(initial);
  CAPTURE(final_loss);
  CHECK(final_loss < 0.25 * initial);
  CHECK(res.log.epochs.back().val_iou > 0.70);
}

TEST_CASE("train: a non-finite loss aborts naming the batch and step") {
  const Dataset d = make_dataset(8, 32, 2, 4, 4);
  const NetworkSpec spec = small_spec(32);
  HistoSegModel m = HistoSegModel::build(spec, 1);
  m.params().at("head.weight").tensor.ptr()[0] = std::numeric_limits<float>::quiet_NaN();

  TrainConfig cfg;
  cfg.batch_size = 4;
  cfg.epochs = 1;
  cfg.seed = 1;
  CHECK_THROWS_WITH_AS(train(d, std::move(m), cfg),
                       "train: non-finite loss at epoch 1, batch 1, step 1", std::runtime_error);
}

TEST_CASE("train: validation and test samples are never mutated") {
  Dataset d = make_dataset(12, 32, 6, 8, 2);
  const std::vector<LabeledSample> before = d.samples;
  const NetworkSpec spec = small_spec(32);
  TrainConfig cfg;
  cfg.batch_size = 4;
  cfg.epochs = 2;
  cfg.seed = 6;
  train(d, spec, cfg);

  REQUIRE(d.samples.size() == before.size());
  for (std::size_t i = 0; i < before.size(); ++i) {
    CHECK(d.samples[i].image.pixels == before[i].image.pixels);
    CHECK(d.samples[i].mask.values == before[i].mask.values);
  }
}

TEST_CASE("train: split and batch preconditions are enforced") {
  const NetworkSpec spec = small_spec(32);
  TrainConfig cfg;
  cfg.batch_size = 8;
  cfg.epochs = 1;

  Dataset no_val = make_dataset(8, 32, 1, 8, 0);
  CHECK_THROWS_WITH_AS(train(no_val, spec, cfg), "train: the val split is empty",
                       std::invalid_argument);

  Dataset tiny = make_dataset(8, 32, 1, 4, 4);
  CHECK_THROWS_WITH_AS(train(tiny, spec, cfg),
                       "train: the train split has 4 samples, fewer than one batch of 8",
                       std::invalid_argument);
}
