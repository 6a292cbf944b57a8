#include "histoseg/trainer.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

#include "histoseg/checkpoint.hpp"
#include "histoseg/metrics.hpp"

namespace histoseg {

void TrainConfig::validate() const {
  if (!(learning_rate >= 0.0)) fail("train config: learning rate must be >= 0");
  if (batch_size < 1) fail("train config: batch size must be >= 1");
  if (epochs < 1) fail("train config: epochs must be >= 1");
  if (!(beta1 >= 0.0 && beta1 < 1.0)) fail("train config: beta1 must be in [0, 1)");
  if (!(beta2 >= 0.0 && beta2 < 1.0)) fail("train config: beta2 must be in [0, 1)");
  if (!(adam_epsilon > 0.0)) fail("train config: adam epsilon must be > 0");
  loss.validate();
}

std::string TrainingLog::to_csv() const {
  std::ostringstream out;
  out << "epoch,train_loss,bce,focal,dice,val_loss,val_iou,seconds\n";
  out << std::fixed;
  for (const EpochRecord& r : epochs) {
    out << r.epoch << ',' << std::setprecision(6) << r.train_loss << ',' << r.bce << ','
        << r.focal << ',' << r.dice << ',' << r.val_loss << ',' << r.val_iou << ','
        << std::setprecision(3) << r.seconds << '\n';
  }
  return out.str();
}

std::string TrainingLog::to_json() const {
  nlohmann::json j;
  j["epochs"] = nlohmann::json::array();
  for (const EpochRecord& r : epochs) {
    j["epochs"].push_back({{"epoch", r.epoch},
                           {"train_loss", r.train_loss},
                           {"bce", r.bce},
                           {"focal", r.focal},
                           {"dice", r.dice},
                           {"val_loss", r.val_loss},
                           {"val_iou", r.val_iou},
                           {"seconds", r.seconds}});
  }
  return j.dump(2) + "\n";
}

void adam_step(ParameterStore& params, const TrainConfig& config, int t) {
  config.validate();
  if (t < 1) fail("adam_step: step index must be >= 1, got " + std::to_string(t));
  const double lr = config.learning_rate;
  const double b1 = config.beta1, b2 = config.beta2;
  const double bias1 = 1.0 - std::pow(b1, t);
  const double bias2 = 1.0 - std::pow(b2, t);
  for (ParamEntry<float>& e : params.entries()) {
    if (!e.trainable) continue;
    if (!e.tensor.has_grad()) fail("adam_step: no gradient for parameter " + e.name);
    const std::vector<float>& g = e.tensor.grad();
    const std::size_t n = e.tensor.numel();
    if (e.m.empty()) {
      e.m.assign(n, 0.0f);
      e.v.assign(n, 0.0f);
    }
    float* w = e.tensor.ptr();
    for (std::size_t i = 0; i < n; ++i) {
      const double gi = g[i];
      const double m = b1 * e.m[i] + (1.0 - b1) * gi;
      const double v = b2 * e.v[i] + (1.0 - b2) * gi * gi;
      e.m[i] = static_cast<float>(m);
      e.v[i] = static_cast<float>(v);
      w[i] = static_cast<float>(w[i] - lr * (m / bias1) / (std::sqrt(v / bias2) + config.adam_epsilon));
    }
  }
}

namespace {

void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("train: cannot write " + path);
  out << content;
  if (!out) throw std::runtime_error("train: cannot write " + path);
}

// Mean IoU of thresholded predictions against the ground-truth masks, one
// image at a time.
double validation_iou(const Tensor& prob, const std::vector<LabeledSample>& samples,
                      const std::vector<int>& indices, std::size_t first, std::size_t count) {
  const int h = prob.dim(2), w = prob.dim(3);
  const std::size_t plane = static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
  double sum = 0.0;
  for (std::size_t i = 0; i < count; ++i) {
    std::vector<float> p(prob.cptr() + i * plane, prob.cptr() + (i + 1) * plane);
    const BinaryMask pred = binarize(Tensor::from({1, 1, h, w}, std::move(p)), 0.5);
    sum += iou(pred, samples[static_cast<std::size_t>(indices[first + i])].mask);
  }
  return sum / static_cast<double>(count);
}

}  // namespace

TrainResult train(const Dataset& data, const NetworkSpec& spec, const TrainConfig& config) {
  config.validate();
  return train(data, HistoSegModel::build(spec, config.seed), config);
}

TrainResult train(const Dataset& data, HistoSegModel model, const TrainConfig& config) {
  config.validate();
  const std::vector<int> train_idx_base = data.split_indices("train");
  const std::vector<int> val_idx = data.split_indices("val");
  if (train_idx_base.empty()) fail("train: the train split is empty");
  if (val_idx.empty()) fail("train: the val split is empty");
  const std::size_t bs = static_cast<std::size_t>(config.batch_size);
  if (train_idx_base.size() < bs) {
    fail("train: the train split has " + std::to_string(train_idx_base.size()) +
         " samples, fewer than one batch of " + std::to_string(config.batch_size));
  }

  TrainResult res;
  res.model = std::move(model);
  ParameterStore& params = res.model.params();

  const bool to_disk = !config.out_dir.empty();
  if (to_disk) {
    std::filesystem::create_directories(config.out_dir);
    const std::filesystem::path dir(config.out_dir);
    res.best_path = (dir / "best.ckpt").string();
    res.last_path = (dir / "last.ckpt").string();
    res.csv_path = (dir / "log.csv").string();
    res.json_path = (dir / "log.json").string();
  }

  Rng shuffle_rng(config.seed);
  int step = 1;
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();

    std::vector<int> train_idx = train_idx_base;
    shuffle(train_idx, shuffle_rng);

    EpochRecord rec;
    rec.epoch = epoch;
    int batches = 0;
    for (std::size_t off = 0; off + bs <= train_idx.size(); off += bs, ++batches, ++step) {
      const std::vector<int> batch(train_idx.begin() + static_cast<std::ptrdiff_t>(off),
                                   train_idx.begin() + static_cast<std::ptrdiff_t>(off + bs));
      const Tensor x = batch_images(data.samples, batch);
      const Tensor y = batch_masks(data.samples, batch);

      Tape tape;
      TapeScope scope(tape);
      params.zero_grad();
      const MultiLoss<float> loss = multi_loss(y, res.model.forward(x, Mode::kTrain), config.loss);
      const double total = loss.total.item();
      if (!std::isfinite(total)) {
        throw std::runtime_error("train: non-finite loss at epoch " + std::to_string(epoch) +
                                 ", batch " + std::to_string(batches + 1) + ", step " +
                                 std::to_string(step));
      }
      tape.backward(loss.total);
      adam_step(params, config, step);

      rec.train_loss += total;
      rec.bce += loss.bce.item();
      rec.focal += loss.focal.item();
      rec.dice += loss.dice.item();
    }
    rec.train_loss /= batches;
    rec.bce /= batches;
    rec.focal /= batches;
    rec.dice /= batches;

    for (std::size_t off = 0; off < val_idx.size(); off += bs) {
      const std::size_t count = std::min(bs, val_idx.size() - off);
      const std::vector<int> batch(val_idx.begin() + static_cast<std::ptrdiff_t>(off),
                                   val_idx.begin() + static_cast<std::ptrdiff_t>(off + count));
      const Tensor x = batch_images(data.samples, batch);
      const Tensor y = batch_masks(data.samples, batch);
      const Tensor prob = res.model.forward(x, Mode::kInfer);
      rec.val_loss += multi_loss(y, prob, config.loss).total.item() * static_cast<double>(count);
      rec.val_iou += validation_iou(prob, data.samples, val_idx, off, count) *
                     static_cast<double>(count);
    }
    rec.val_loss /= static_cast<double>(val_idx.size());
    rec.val_iou /= static_cast<double>(val_idx.size());

    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    res.log.epochs.push_back(rec);

    if (rec.val_iou > res.best_val_iou) {
      res.best_val_iou = rec.val_iou;
      res.best_epoch = epoch;
      if (to_disk) save_checkpoint(res.best_path, params);
    }
    if (to_disk) {
      save_checkpoint(res.last_path, params);
      write_file(res.csv_path, res.log.to_csv());
      write_file(res.json_path, res.log.to_json());
    }
  }
  return res;
}

}  // namespace histoseg
