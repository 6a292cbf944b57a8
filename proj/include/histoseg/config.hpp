#pragma once

#include <string>
#include <vector>

#include "histoseg/network.hpp"
#include "histoseg/trainer.hpp"

namespace histoseg {

// Run settings assembled from defaults, an optional JSON config file, and
// command-line overrides, in that order of precedence (later wins). Every
// field is addressable by a dotted key ("train.learning_rate",
// "network.width_multiplier", "loss.alpha", ...); unknown keys are rejected
// so typos cannot silently fall back to defaults.
struct RunConfig {
  NetworkSpec network;
  TrainConfig train;
  std::string data_dir;
  std::string out_dir;

  // Merges a whole JSON document (nested objects become dotted paths).
  void merge_json_text(const std::string& text);

  // Sets one key from a command-line literal: "true"/"false", an integer, a
  // real, or a bare string, checked against the field's type.
  void override_key(const std::string& key, const std::string& value);

  // The fully resolved settings, nested the same way a config file is.
  std::string to_json() const;

  static std::vector<std::string> known_keys();
};

}  // namespace histoseg
