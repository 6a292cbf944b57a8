#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "histoseg/data.hpp"
#include "histoseg/losses.hpp"
#include "histoseg/network.hpp"

namespace histoseg {

struct TrainConfig {
  double learning_rate = 0.01;
  int batch_size = 8;
  int epochs = 1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_epsilon = 1e-8;
  std::uint64_t seed = 0;
  LossConfig loss;
  // Checkpoints and logs are written here; leave empty to keep a run off disk.
  std::string out_dir;

  // Learning rate 0 is allowed: it runs the full loop without moving any
  // parameter, which is how the plumbing is exercised in isolation.
  void validate() const;
};

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0, bce = 0.0, focal = 0.0, dice = 0.0;
  double val_loss = 0.0;
  double val_iou = 0.0;
  double seconds = 0.0;
};

struct TrainingLog {
  std::vector<EpochRecord> epochs;

  // Header epoch,train_loss,bce,focal,dice,val_loss,val_iou,seconds; one row
  // per epoch. seconds is wall time, so it differs between otherwise
  // identical runs; every other column is deterministic given the seed.
  std::string to_csv() const;
  std::string to_json() const;
};

// Bias-corrected Adam update over every trainable entry, reading each
// tensor's accumulated grad buffer. First and second moments live in the
// store's per-entry m/v slots, sized on first use; t is the 1-based step
// index shared by the bias corrections.
void adam_step(ParameterStore& params, const TrainConfig& config, int t);

struct TrainResult {
  HistoSegModel model;  // state after the last epoch
  TrainingLog log;
  double best_val_iou = -1.0;
  int best_epoch = 0;
  // Set when out_dir is non-empty.
  std::string best_path, last_path, csv_path, json_path;
};

// Full training loop: per epoch, a seeded shuffle of the train split,
// minibatches with the last partial batch dropped, zeroed grads before every
// step, then validation loss and mean IoU in infer mode. Writes best.ckpt
// (highest validation IoU so far), last.ckpt, log.csv, and log.json under
// config.out_dir after every epoch. Deterministic given the seed, apart from
// the seconds column. A non-finite training loss aborts with an error naming
// the epoch, batch, and step.
TrainResult train(const Dataset& data, const NetworkSpec& spec, const TrainConfig& config);

// Warm-start variant: continues from an existing model (a loaded checkpoint,
// say) instead of a fresh seeded build.
TrainResult train(const Dataset& data, HistoSegModel model, const TrainConfig& config);

}  // namespace histoseg
