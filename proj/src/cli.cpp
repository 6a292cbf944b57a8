#include "histoseg/cli.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "histoseg/checkpoint.hpp"
#include "histoseg/config.hpp"
#include "histoseg/data.hpp"
#include "histoseg/gradcheck.hpp"
#include "histoseg/image.hpp"
#include "histoseg/metrics.hpp"
#include "histoseg/trainer.hpp"

namespace histoseg {

namespace {

namespace fs = std::filesystem;

RunConfig load_config(const std::string& config_path, const std::vector<std::string>& sets) {
  RunConfig cfg;
  if (!config_path.empty()) {
    std::ifstream in(config_path);
    if (!in) throw std::runtime_error("cannot open " + config_path);
    std::ostringstream buf;
    buf << in.rdbuf();
    cfg.merge_json_text(buf.str());
  }
  for (const std::string& kv : sets) {
    const std::size_t eq = kv.find('=');
    if (eq == std::string::npos) {
      fail("config: --set expects key=value, got \"" + kv + "\"");
    }
    cfg.override_key(kv.substr(0, eq), kv.substr(eq + 1));
  }
  return cfg;
}

void write_text(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << content;
  if (!out) throw std::runtime_error("cannot write " + path);
}

// Stems of the PNG files directly inside dir, sorted for determinism.
std::vector<std::string> png_stems(const std::string& dir) {
  if (!fs::is_directory(dir)) throw std::runtime_error("not a directory: " + dir);
  std::vector<std::string> stems;
  for (const fs::directory_entry& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".png") {
      stems.push_back(e.path().stem().string());
    }
  }
  std::sort(stems.begin(), stems.end());
  return stems;
}

// ---------------------------------------------------------------------------
// synth

struct SynthArgs {
  std::string out;
  int n = 200;
  int size = 64;
  std::uint64_t seed = 42;
};

int cmd_synth(const SynthArgs& a) {
  Dataset d;
  d.samples = generate_synthetic(a.n, a.size, a.seed);
  d.manifest = split(d.samples, 0.7, 0.2, 0.1, a.seed);
  write_dataset(a.out, d.samples, d.manifest);
  std::printf("wrote %d synthetic %dx%d samples to %s (train %zu / val %zu / test %zu)\n", a.n,
              a.size, a.size, a.out.c_str(), d.manifest.train.size(), d.manifest.val.size(),
              d.manifest.test.size());
  return 0;
}

// ---------------------------------------------------------------------------
// patch

struct PatchArgs {
  std::string images, masks, out;
  int size = 256;
  int stride = 256;
  int resize = 0;
  std::uint64_t seed = 42;
};

int cmd_patch(const PatchArgs& a) {
  const std::vector<std::string> stems = png_stems(a.images);
  if (stems.empty()) throw std::runtime_error("patch: no PNG images in " + a.images);

  std::vector<LabeledSample> samples;
  nlohmann::json per_source = nlohmann::json::object();
  for (const std::string& stem : stems) {
    const fs::path mask_path = fs::path(a.masks) / (stem + ".png");
    if (!fs::exists(mask_path)) {
      throw std::runtime_error("patch: no mask for image stem \"" + stem + "\"");
    }
    ImageU8 image = load_png((fs::path(a.images) / (stem + ".png")).string());
    ImageU8 mask_image = load_png(mask_path.string());
    if (a.resize > 0) {
      image = resize_image(image, a.resize, a.resize);
      mask_image = resize_image(mask_image, a.resize, a.resize);
    }
    const std::vector<LabeledSample> patches =
        extract_patches(image, to_mask(mask_image), stem, a.size, a.stride);
    per_source[stem] = patches.size();
    samples.insert(samples.end(), patches.begin(), patches.end());
  }

  const SplitManifest manifest = split(samples, 0.7, 0.2, 0.1, a.seed);
  write_dataset(a.out, samples, manifest);

  nlohmann::json summary = {{"patch_size", a.size},
                            {"stride", a.stride},
                            {"total_patches", samples.size()},
                            {"per_source", per_source}};
  write_text((fs::path(a.out) / "summary.json").string(), summary.dump(2) + "\n");
  std::printf("wrote %zu patches from %zu sources to %s\n", samples.size(), stems.size(),
              a.out.c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  std::string data, config, out;
  std::vector<std::string> sets;
};

int cmd_train(const TrainArgs& a) {
  RunConfig cfg = load_config(a.config, a.sets);
  if (!a.data.empty()) cfg.data_dir = a.data;
  if (!a.out.empty()) cfg.out_dir = a.out;
  if (cfg.data_dir.empty()) fail("train: no dataset directory (use --data or data.dir)");
  if (cfg.out_dir.empty()) fail("train: no output directory (use --out or out.dir)");
  cfg.network.validate();
  cfg.train.validate();
  cfg.train.out_dir = cfg.out_dir;

  const Dataset dataset = read_dataset(cfg.data_dir);
  fs::create_directories(cfg.out_dir);
  write_text((fs::path(cfg.out_dir) / "resolved-config.json").string(), cfg.to_json());

  const TrainResult res = train(dataset, cfg.network, cfg.train);
  for (const EpochRecord& r : res.log.epochs) {
    std::printf("epoch %d/%d  train %.4f  val %.4f  iou %.4f  (%.1fs)\n", r.epoch,
                cfg.train.epochs, r.train_loss, r.val_loss, r.val_iou, r.seconds);
  }
  std::printf("best val iou %.4f at epoch %d; artifacts in %s\n", res.best_val_iou,
              res.best_epoch, cfg.out_dir.c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// predict

struct PredictArgs {
  std::string model, image, out, config;
  std::vector<std::string> sets;
  bool prob = false;
};

int cmd_predict(const PredictArgs& a) {
  const RunConfig cfg = load_config(a.config, a.sets);
  HistoSegModel model = HistoSegModel::build(cfg.network, 0);
  load_checkpoint(a.model, model.params());

  const ImageU8 image = load_png(a.image);
  if (image.channels != cfg.network.in_channels) {
    fail("predict: image has " + std::to_string(image.channels) +
         " channels but the network expects " + std::to_string(cfg.network.in_channels));
  }
  const int h = image.height, w = image.width;
  const int pad_h = (8 - h % 8) % 8;
  const int pad_w = (8 - w % 8) % 8;
  const Tensor x = image_to_tensor(reflect_pad(image, pad_h, pad_w));
  const Tensor full = model.forward(x, Mode::kInfer);

  Tensor prob({1, 1, h, w});
  for (int y = 0; y < h; ++y) {
    const float* src = full.cptr() + static_cast<std::size_t>(y) * full.dim(3);
    std::copy(src, src + w, prob.ptr() + static_cast<std::size_t>(y) * w);
  }

  const fs::path parent = fs::path(a.out).parent_path();
  if (!parent.empty()) fs::create_directories(parent);
  if (a.prob) {
    save_png(a.out, prob_to_image(prob));
  } else {
    save_png(a.out, mask_to_image(binarize(prob, 0.5)));
  }
  std::printf("wrote %s (%dx%d %s)\n", a.out.c_str(), h, w,
              a.prob ? "probability map" : "binary mask");
  return 0;
}

// ---------------------------------------------------------------------------
// eval

struct EvalArgs {
  std::string pred, gt, report;
};

int cmd_eval(const EvalArgs& a) {
  const std::vector<std::string> stems = png_stems(a.gt);
  if (stems.empty()) throw std::runtime_error("eval: no PNG masks in " + a.gt);

  std::vector<BinaryMask> preds, gts;
  for (const std::string& stem : stems) {
    const fs::path pred_path = fs::path(a.pred) / (stem + ".png");
    if (!fs::exists(pred_path)) {
      throw std::runtime_error("eval: no prediction for \"" + stem + "\"");
    }
    gts.push_back(to_mask(load_png((fs::path(a.gt) / (stem + ".png")).string())));
    preds.push_back(to_mask(load_png(pred_path.string())));
  }

  const EvalReport rep = evaluate(preds, gts);
  if (!a.report.empty()) write_text(a.report, rep.to_json());

  std::printf("evaluated %zu image pairs\n", stems.size());
  std::printf("object_f1 %.2f\n", 100.0 * rep.mean_object_f1);
  std::printf("pixel_f1  %.2f\n", 100.0 * rep.mean_pixel_f1);
  std::printf("dice      %.2f\n", 100.0 * rep.mean_dice);
  std::printf("iou       %.2f\n", 100.0 * rep.mean_iou);
  std::printf("miou      %.2f\n", 100.0 * rep.miou);
  return 0;
}

// ---------------------------------------------------------------------------
// gradcheck

struct GradCheckArgs {
  bool skip_network = false;
};

using DTensor = TensorT<double>;

struct CheckRow {
  std::string name;
  double tolerance;
  std::function<GradCheckReport()> run;
};

std::vector<CheckRow> gradcheck_battery(bool skip_network) {
  std::vector<CheckRow> rows;

  rows.push_back({"conv2d 3x3 same+bias", 1e-4, [] {
                    Rng r(1);
                    DTensor x = DTensor::randn({2, 3, 6, 7}, r);
                    DTensor w = DTensor::randn({4, 3, 3, 3}, r, 0.3);
                    DTensor b = DTensor::randn({4}, r, 0.3);
                    std::vector<GradCheckParam> p{{"x", x}, {"w", w}, {"b", b}};
                    return gradcheck([&] { return mean(conv2d(x, w, &b, 1)); }, p);
                  }});

  rows.push_back({"conv2d stride2 dil2", 1e-4, [] {
                    Rng r(2);
                    DTensor x = DTensor::randn({1, 3, 10, 10}, r);
                    DTensor w = DTensor::randn({2, 3, 3, 3}, r, 0.3);
                    std::vector<GradCheckParam> p{{"x", x}, {"w", w}};
                    return gradcheck([&] { return mean(conv2d(x, w, nullptr, 2, 2)); }, p);
                  }});

  rows.push_back({"depthwise 3x3 dil2", 1e-4, [] {
                    Rng r(3);
                    DTensor x = DTensor::randn({2, 4, 8, 8}, r);
                    DTensor w = DTensor::randn({4, 1, 3, 3}, r, 0.3);
                    std::vector<GradCheckParam> p{{"x", x}, {"w", w}};
                    return gradcheck([&] { return mean(depthwise_conv2d(x, w, 2)); }, p);
                  }});

  rows.push_back({"pointwise 1x1", 1e-4, [] {
                    Rng r(4);
                    DTensor x = DTensor::randn({2, 5, 4, 4}, r);
                    DTensor w = DTensor::randn({3, 5, 1, 1}, r, 0.3);
                    std::vector<GradCheckParam> p{{"x", x}, {"w", w}};
                    return gradcheck([&] { return mean(conv2d(x, w, nullptr, 1)); }, p);
                  }});

  rows.push_back({"batch_norm train", 1e-4, [] {
                    Rng r(5);
                    DTensor x = DTensor::randn({3, 4, 5, 5}, r);
                    DTensor g = DTensor::randn({4}, r, 0.2, 1.0);
                    DTensor b = DTensor::randn({4}, r, 0.2);
                    std::vector<GradCheckParam> p{{"x", x}, {"gamma", g}, {"beta", b}};
                    return gradcheck(
                        [&] {
                          DTensor rm = DTensor::zeros({4});
                          DTensor rv = DTensor::full({4}, 1.0);
                          return mean(batch_norm(x, g, b, rm, rv, Mode::kTrain));
                        },
                        p);
                  }});

  rows.push_back({"relu", 1e-4, [] {
                    Rng r(6);
                    DTensor x = DTensor::randn({2, 3, 6, 6}, r);
                    // keep probe points away from the kink at 0
                    for (std::size_t i = 0; i < x.numel(); ++i) {
                      if (std::abs(x.ptr()[i]) < 1e-3) x.ptr()[i] = 0.1;
                    }
                    std::vector<GradCheckParam> p{{"x", x}};
                    return gradcheck([&] { return mean(relu(x)); }, p);
                  }});

  rows.push_back({"sigmoid", 1e-4, [] {
                    Rng r(7);
                    DTensor x = DTensor::randn({2, 3, 5, 5}, r);
                    std::vector<GradCheckParam> p{{"x", x}};
                    return gradcheck([&] { return mean(sigmoid(x)); }, p);
                  }});

  rows.push_back({"bilinear_resize", 1e-4, [] {
                    Rng r(8);
                    DTensor x = DTensor::randn({1, 2, 5, 7}, r);
                    std::vector<GradCheckParam> p{{"x", x}};
                    return gradcheck([&] { return mean(bilinear_resize(x, 10, 14)); }, p);
                  }});

  rows.push_back({"global_avg_pool", 1e-4, [] {
                    Rng r(9);
                    DTensor x = DTensor::randn({2, 3, 4, 6}, r);
                    std::vector<GradCheckParam> p{{"x", x}};
                    return gradcheck([&] { return mean(global_avg_pool(x)); }, p);
                  }});

  rows.push_back({"quick_attention", 1e-4, [] {
                    Rng r(10);
                    DTensor x = DTensor::randn({1, 3, 4, 4}, r);
                    QuickAttentionLayer<double> qa = QuickAttentionLayer<double>::init(3, r);
                    std::vector<GradCheckParam> p{{"x", x}, {"w", qa.weight}, {"b", qa.bias}};
                    return gradcheck([&] { return mean(qa.forward(x)); }, p);
                  }});

  rows.push_back({"expanded_conv s2 d2", 1e-4, [] {
                    Rng r(11);
                    DTensor x = DTensor::randn({1, 4, 8, 8}, r);
                    ExpandedConvBlock<double> blk = ExpandedConvBlock<double>::init(4, 6, 2, 2, 6, r);
                    std::vector<GradCheckParam> p{
                        {"x", x},           {"expand", blk.expand_w}, {"depth", blk.depth_w},
                        {"project", blk.project_w}, {"g1", blk.bn1.gamma}, {"b1", blk.bn1.beta},
                        {"g2", blk.bn2.gamma},      {"b2", blk.bn2.beta}, {"g3", blk.bn3.gamma},
                        {"b3", blk.bn3.beta}};
                    return gradcheck([&] { return mean(blk.forward(x, Mode::kTrain)); }, p);
                  }});

  rows.push_back({"aspp", 1e-4, [] {
                    Rng r(12);
                    DTensor x = DTensor::randn({1, 4, 6, 6}, r);
                    AsppBlock<double> aspp = AsppBlock<double>::init(4, 8, r);
                    std::vector<GradCheckParam> p{
                        {"x", x},
                        {"w_1x1", aspp.w_1x1},   {"b_1x1", aspp.b_1x1},
                        {"w_r6", aspp.w_r6},     {"b_r6", aspp.b_r6},
                        {"w_r12", aspp.w_r12},   {"b_r12", aspp.b_r12},
                        {"w_r18", aspp.w_r18},   {"b_r18", aspp.b_r18},
                        {"w_pool", aspp.w_pool}, {"b_pool", aspp.b_pool},
                        {"w_fuse", aspp.w_fuse}, {"b_fuse", aspp.b_fuse}};
                    return gradcheck([&] { return mean(aspp.forward(x, Mode::kTrain)); }, p);
                  }});

  rows.push_back({"multi_loss", 1e-4, [] {
                    Rng r(13);
                    DTensor z = DTensor::randn({2, 1, 6, 6}, r);
                    DTensor y = DTensor::zeros({2, 1, 6, 6});
                    for (std::size_t i = 0; i < y.numel(); ++i) y.ptr()[i] = (r.uniform() < 0.4) ? 1.0 : 0.0;
                    std::vector<GradCheckParam> p{{"z", z}};
                    return gradcheck([&] { return multi_loss(y, sigmoid(z)).total; }, p);
                  }});

  if (!skip_network) {
    rows.push_back({"network (sampled)", 1e-4, [] {
                      NetworkSpec spec;
                      spec.width_multiplier = 0.125;
                      spec.input_height = spec.input_width = 32;
                      spec.dropout_rate = 0.0;  // finite differences need a pure forward
                      HistoSegModelT<double> m = HistoSegModelT<double>::build(spec, 3);
                      Rng r(14);
                      DTensor x = DTensor::uniform({1, 3, 32, 32}, r, 0.0, 1.0);
                      DTensor y = DTensor::zeros({1, 1, 32, 32});
                      for (std::size_t i = 0; i < y.numel(); ++i) {
                        y.ptr()[i] = (r.uniform() < 0.3) ? 1.0 : 0.0;
                      }
                      std::vector<GradCheckParam> p;
                      for (const ParamEntry<double>& e : m.params().entries()) {
                        if (e.trainable) p.push_back({e.name, e.tensor});
                      }
                      // Narrow step: batch-normalized activations sit close
                      // enough to the relu kink that 1e-5 probes straddle it.
                      return gradcheck(
                          [&] { return multi_loss(y, m.forward(x, Mode::kTrain)).total; }, p,
                          1e-6, 1e-3, 4);
                    }});
  }
  return rows;
}

int cmd_gradcheck(const GradCheckArgs& a) {
  bool all_passed = true;
  std::printf("%-22s %12s %10s %8s  %s\n", "check", "max_rel_err", "tolerance", "values",
              "result");
  for (const CheckRow& row : gradcheck_battery(a.skip_network)) {
    const GradCheckReport rep = row.run();
    const bool ok = rep.max_rel_err < row.tolerance;
    all_passed = all_passed && ok;
    std::printf("%-22s %12.3e %10.0e %8zu  %s\n", row.name.c_str(), rep.max_rel_err,
                row.tolerance, rep.values_checked, ok ? "PASS" : "FAIL");
    if (!ok) {
      std::printf("  worst: %s[%zu] analytic %.6e numeric %.6e\n", rep.worst_param.c_str(),
                  rep.worst_index, rep.worst_analytic, rep.worst_numeric);
    }
  }
  std::printf("gradcheck: %s\n", all_passed ? "all checks passed" : "FAILURES above");
  return all_passed ? 0 : 1;
}

// ---------------------------------------------------------------------------
// flops

struct FlopsArgs {
  std::string config;
  std::vector<std::string> sets;
};

int cmd_flops(const FlopsArgs& a) {
  const RunConfig cfg = load_config(a.config, a.sets);
  cfg.network.validate();
  const FlopsReport rep = count_flops(cfg.network);
  std::printf("%-22s %16s\n", "layer", "macs");
  for (const FlopsRow& row : rep.rows) {
    std::printf("%-22s %16lld\n", row.layer.c_str(), row.macs);
  }
  std::printf("%-22s %16lld\n", "total", rep.total);
  std::printf("%-22s %16lld\n", "attention share", rep.qa_total);
  return 0;
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"histology segmentation with quick attention"};
  app.require_subcommand(1);

  SynthArgs synth_args;
  CLI::App* synth = app.add_subcommand("synth", "generate a synthetic labeled dataset");
  synth->add_option("--out", synth_args.out, "output dataset directory")->required();
  synth->add_option("--n", synth_args.n, "number of samples");
  synth->add_option("--size", synth_args.size, "image extent (multiple of 8)");
  synth->add_option("--seed", synth_args.seed, "generator seed");

  PatchArgs patch_args;
  CLI::App* patch = app.add_subcommand("patch", "cut image/mask pairs into patches");
  patch->add_option("--images", patch_args.images, "directory of source images")->required();
  patch->add_option("--masks", patch_args.masks, "directory of masks with matching stems")
      ->required();
  patch->add_option("--out", patch_args.out, "output dataset directory")->required();
  patch->add_option("--size", patch_args.size, "patch extent");
  patch->add_option("--stride", patch_args.stride, "patch stride");
  patch->add_option("--resize", patch_args.resize,
                    "resize sources to this extent before patching (0 = off)");
  patch->add_option("--seed", patch_args.seed, "split seed");

  TrainArgs train_args;
  CLI::App* train_cmd = app.add_subcommand("train", "train a model on a dataset directory");
  train_cmd->add_option("--data", train_args.data, "dataset directory");
  train_cmd->add_option("--config", train_args.config, "JSON config file");
  train_cmd->add_option("--out", train_args.out, "output directory for checkpoints and logs");
  train_cmd->add_option("--set", train_args.sets, "override a config key (key=value)");

  PredictArgs predict_args;
  CLI::App* predict = app.add_subcommand("predict", "segment one image with a checkpoint");
  predict->add_option("--model", predict_args.model, "checkpoint file")->required();
  predict->add_option("--image", predict_args.image, "input PNG")->required();
  predict->add_option("--out", predict_args.out, "output PNG")->required();
  predict->add_option("--config", predict_args.config, "JSON config file");
  predict->add_option("--set", predict_args.sets, "override a config key (key=value)");
  predict->add_flag("--prob", predict_args.prob, "write the 8-bit probability map instead");

  EvalArgs eval_args;
  CLI::App* eval_cmd = app.add_subcommand("eval", "score predictions against ground truth");
  eval_cmd->add_option("--pred", eval_args.pred, "directory of predicted masks")->required();
  eval_cmd->add_option("--gt", eval_args.gt, "directory of ground-truth masks")->required();
  eval_cmd->add_option("--report", eval_args.report, "write the JSON report here");

  GradCheckArgs gradcheck_args;
  CLI::App* gradcheck_cmd =
      app.add_subcommand("gradcheck", "finite-difference check of every gradient path");
  gradcheck_cmd->add_flag("--skip-network", gradcheck_args.skip_network,
                          "skip the sampled whole-network check");

  FlopsArgs flops_args;
  CLI::App* flops = app.add_subcommand("flops", "per-layer multiply-add table");
  flops->add_option("--config", flops_args.config, "JSON config file");
  flops->add_option("--set", flops_args.sets, "override a config key (key=value)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (synth->parsed()) return cmd_synth(synth_args);
    if (patch->parsed()) return cmd_patch(patch_args);
    if (train_cmd->parsed()) return cmd_train(train_args);
    if (predict->parsed()) return cmd_predict(predict_args);
    if (eval_cmd->parsed()) return cmd_eval(eval_args);
    if (gradcheck_cmd->parsed()) return cmd_gradcheck(gradcheck_args);
    if (flops->parsed()) return cmd_flops(flops_args);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace histoseg
