#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <sys/wait.h>

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "histoseg/checkpoint.hpp"
#include "histoseg/image.hpp"
#include "histoseg/metrics.hpp"
#include "histoseg/network.hpp"
#include "json.hpp"

// Path of the built binary, injected by the build so the suite drives the
// real executable.
#ifndef HISTOSEG_CLI_PATH
#error "compile with -DHISTOSEG_CLI_PATH=\"<path to the histoseg binary>\""
#endif

using namespace histoseg;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
  const fs::path dir = fs::temp_directory_path() / ("histoseg_test_cli_" + tag);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return {};
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

struct RunResult {
  int code = -1;
  std::string out, err;
};

RunResult run_cli(const std::string& args) {
  const fs::path dir = fs::temp_directory_path() / "histoseg_test_cli_streams";
  fs::create_directories(dir);
  const fs::path out_f = dir / "stdout.txt";
  const fs::path err_f = dir / "stderr.txt";
  const std::string cmd = std::string(HISTOSEG_CLI_PATH) + " " + args + " > " + out_f.string() +
                          " 2> " + err_f.string();
  const int rc = std::system(cmd.c_str());
  RunResult r;
  r.code = WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
  r.out = read_file(out_f);
  r.err = read_file(err_f);
  return r;
}

bool contains(const std::string& haystack, const std::string& needle) {
  return haystack.find(needle) != std::string::npos;
}

// relative path -> file bytes, for whole-directory comparisons
std::map<std::string, std::string> dir_bytes(const fs::path& root) {
  std::map<std::string, std::string> files;
  for (const fs::directory_entry& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) {
      files[fs::relative(e.path(), root).string()] = read_file(e.path());
    }
  }
  return files;
}

std::string strip_seconds(const std::string& csv) {
  std::istringstream in(csv);
  std::string line, out;
  while (std::getline(in, line)) {
    out += line.substr(0, line.rfind(','));
    out += '\n';
  }
  return out;
}

ImageU8 checker_image(int h, int w) {
  ImageU8 img(h, w, 3);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      img.at(y, x, 0) = static_cast<std::uint8_t>((x * 7 + y * 13) % 256);
      img.at(y, x, 1) = static_cast<std::uint8_t>((x * 3 + y * 5 + 31) % 256);
      img.at(y, x, 2) = static_cast<std::uint8_t>((x + 2 * y + 97) % 256);
    }
  }
  return img;
}

BinaryMask blob_mask(int h, int w) {
  BinaryMask m(h, w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      m.values[static_cast<std::size_t>(y) * w + x] = ((x / 40 + y / 40) % 3 == 0) ? 1 : 0;
    }
  }
  return m;
}

void fill_square(BinaryMask& m, int y0, int x0, int side) {
  for (int y = y0; y < y0 + side; ++y) {
    for (int x = x0; x < x0 + side; ++x) {
      m.values[static_cast<std::size_t>(y) * m.width + x] = 1;
    }
  }
}

}  // namespace

TEST_CASE("synth: default fractions split 200 samples 140/40/20 and reruns are identical") {
  const fs::path dir = temp_dir("synth");
  const std::string out_a = (dir / "a").string();
  const std::string out_b = (dir / "b").string();
  const std::string flags = " --n 200 --size 64 --seed 42";

  RunResult r = run_cli("synth --out " + out_a + flags);
  CHECK(r.code == 0);
  CHECK(contains(r.out, "train 140 / val 40 / test 20"));

  const nlohmann::json manifest = nlohmann::json::parse(read_file(fs::path(out_a) / "manifest.json"));
  CHECK(manifest.at("train").size() == 140);
  CHECK(manifest.at("val").size() == 40);
  CHECK(manifest.at("test").size() == 20);

  std::size_t images = 0, masks = 0;
  for (const fs::directory_entry& e : fs::directory_iterator(fs::path(out_a) / "images")) {
    images += e.is_regular_file();
  }
  for (const fs::directory_entry& e : fs::directory_iterator(fs::path(out_a) / "masks")) {
    masks += e.is_regular_file();
  }
  CHECK(images == 200);
  CHECK(masks == 200);

  r = run_cli("synth --out " + out_b + flags);
  CHECK(r.code == 0);
  CHECK(dir_bytes(out_a) == dir_bytes(out_b));
}

TEST_CASE("synth: an extent that is not a multiple of 8 exits nonzero") {
  const fs::path dir = temp_dir("synthbad");
  const RunResult r = run_cli("synth --out " + (dir / "d").string() + " --n 4 --size 65");
  CHECK(r.code != 0);
  CHECK(contains(r.err, "multiple of 8"));
}

TEST_CASE("patch: a 1000x1000 pair yields 16 patch pairs at the default grid") {
  const fs::path dir = temp_dir("patch");
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "masks");
  save_png((dir / "images" / "slide.png").string(), checker_image(1000, 1000));
  save_png((dir / "masks" / "slide.png").string(), mask_to_image(blob_mask(1000, 1000)));
  save_png((dir / "images" / "tile.png").string(), checker_image(256, 256));
  save_png((dir / "masks" / "tile.png").string(), mask_to_image(blob_mask(256, 256)));

  const std::string out = (dir / "out").string();
  const RunResult r = run_cli("patch --images " + (dir / "images").string() + " --masks " +
                              (dir / "masks").string() + " --out " + out);
  CHECK(r.code == 0);

  const nlohmann::json summary = nlohmann::json::parse(read_file(fs::path(out) / "summary.json"));
  CHECK(summary.at("per_source").at("slide").get<int>() == 16);
  CHECK(summary.at("per_source").at("tile").get<int>() == 1);
  CHECK(summary.at("total_patches").get<int>() == 17);

  // Origins clamp the last window to the edge: {0, 256, 512, 744} each axis.
  CHECK(fs::exists(fs::path(out) / "images" / "slide_0_0.png"));
  CHECK(fs::exists(fs::path(out) / "images" / "slide_744_512.png"));
  CHECK(fs::exists(fs::path(out) / "masks" / "slide_744_744.png"));
  CHECK(fs::exists(fs::path(out) / "images" / "tile_0_0.png"));
  CHECK(!fs::exists(fs::path(out) / "images" / "slide_768_768.png"));

  const ImageU8 patch = load_png((fs::path(out) / "images" / "slide_0_0.png").string());
  CHECK(patch.height == 256);
  CHECK(patch.width == 256);
}

TEST_CASE("patch: an image without a mask names the stem and exits nonzero") {
  const fs::path dir = temp_dir("patchbad");
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "masks");
  save_png((dir / "images" / "orphan.png").string(), checker_image(256, 256));
  const RunResult r = run_cli("patch --images " + (dir / "images").string() + " --masks " +
                              (dir / "masks").string() + " --out " + (dir / "out").string());
  CHECK(r.code != 0);
  CHECK(contains(r.err, "patch: no mask for image stem \"orphan\""));
}

TEST_CASE("train: writes all artifacts and identical invocations agree") {
  const fs::path dir = temp_dir("train");
  const std::string data = (dir / "data").string();
  REQUIRE(run_cli("synth --out " + data + " --n 10 --size 32 --seed 3").code == 0);

  const std::string overrides =
      " --set network.width_multiplier=0.125 --set network.input_height=32"
      " --set network.input_width=32 --set train.epochs=2 --set train.batch_size=4"
      " --set train.seed=7";
  const std::string run_a = (dir / "runa").string();
  const std::string run_b = (dir / "runb").string();

  RunResult r = run_cli("train --data " + data + " --out " + run_a + overrides);
  CHECK(r.code == 0);
  for (const char* name :
       {"best.ckpt", "last.ckpt", "log.csv", "log.json", "resolved-config.json"}) {
    CAPTURE(name);
    CHECK(fs::exists(fs::path(run_a) / name));
  }

  // The echoed config resolves defaults plus every override.
  const nlohmann::json resolved =
      nlohmann::json::parse(read_file(fs::path(run_a) / "resolved-config.json"));
  CHECK(resolved.at("network").at("width_multiplier").get<double>() == 0.125);
  CHECK(resolved.at("train").at("epochs").get<int>() == 2);
  CHECK(resolved.at("train").at("learning_rate").get<double>() == 0.01);
  CHECK(resolved.at("data").at("dir").get<std::string>() == data);

  r = run_cli("train --data " + data + " --out " + run_b + overrides);
  CHECK(r.code == 0);
  CHECK(strip_seconds(read_file(fs::path(run_a) / "log.csv")) ==
        strip_seconds(read_file(fs::path(run_b) / "log.csv")));
  CHECK(read_file(fs::path(run_a) / "last.ckpt") == read_file(fs::path(run_b) / "last.ckpt"));
}

TEST_CASE("train: epochs 0 is rejected by config validation") {
  const fs::path dir = temp_dir("trainbad");
  const std::string data = (dir / "data").string();
  REQUIRE(run_cli("synth --out " + data + " --n 10 --size 32 --seed 3").code == 0);
  const RunResult r = run_cli("train --data " + data + " --out " + (dir / "run").string() +
                              " --set train.epochs=0");
  CHECK(r.code != 0);
  CHECK(contains(r.err, "epochs must be >= 1"));
}

TEST_CASE("train: unknown config keys are rejected") {
  const fs::path dir = temp_dir("trainkey");
  const RunResult r = run_cli("train --data x --out y --set train.lerning_rate=0.1");
  CHECK(r.code != 0);
  CHECK(contains(r.err, "config: unknown key \"train.lerning_rate\""));
}

TEST_CASE("predict: a 999x999 input comes back as a 999x999 mask") {
  const fs::path dir = temp_dir("predict");

  NetworkSpec spec;
  spec.width_multiplier = 0.125;
  HistoSegModel model = HistoSegModel::build(spec, 4);
  const std::string ckpt = (dir / "model.ckpt").string();
  save_checkpoint(ckpt, model.params());

  save_png((dir / "odd.png").string(), checker_image(999, 999));
  const std::string overrides = " --set network.width_multiplier=0.125";

  const std::string mask_out = (dir / "mask.png").string();
  RunResult r = run_cli("predict --model " + ckpt + " --image " + (dir / "odd.png").string() +
                        " --out " + mask_out + overrides);
  CHECK(r.code == 0);
  const ImageU8 mask = load_png(mask_out);
  CHECK(mask.height == 999);
  CHECK(mask.width == 999);
  CHECK(mask.channels == 1);
  for (std::uint8_t v : mask.pixels) CHECK((v == 0 || v == 255));

  const std::string prob_out = (dir / "prob.png").string();
  r = run_cli("predict --model " + ckpt + " --image " + (dir / "odd.png").string() + " --out " +
              prob_out + " --prob" + overrides);
  CHECK(r.code == 0);
  const ImageU8 prob = load_png(prob_out);
  CHECK(prob.height == 999);
  CHECK(prob.width == 999);
  CHECK(prob.channels == 1);

  // Thresholding the probability map at 128 reproduces the binary output,
  // modulo quantization right at the boundary.
  std::size_t agree = 0;
  for (std::size_t i = 0; i < prob.pixels.size(); ++i) {
    agree += (prob.pixels[i] >= 128) == (mask.pixels[i] == 255);
  }
  CHECK(static_cast<double>(agree) / static_cast<double>(prob.pixels.size()) > 0.999);

  // Missing output directories are created, like the other writers do.
  const std::string nested_out = (dir / "deep" / "nest" / "mask.png").string();
  r = run_cli("predict --model " + ckpt + " --image " + (dir / "odd.png").string() + " --out " +
              nested_out + overrides);
  CHECK(r.code == 0);
  CHECK(load_png(nested_out).height == 999);
}

TEST_CASE("predict: a checkpoint from another width names the offending tensor") {
  const fs::path dir = temp_dir("predictbad");
  NetworkSpec spec;
  spec.width_multiplier = 0.125;
  HistoSegModel model = HistoSegModel::build(spec, 4);
  const std::string ckpt = (dir / "model.ckpt").string();
  save_checkpoint(ckpt, model.params());
  save_png((dir / "in.png").string(), checker_image(64, 64));

  // Widths 0.125 and 0.25 agree until the first 64-wide block, so the first
  // offending tensor in file order is block07's projection.
  const RunResult r = run_cli("predict --model " + ckpt + " --image " + (dir / "in.png").string() +
                              " --out " + (dir / "out.png").string() +
                              " --set network.width_multiplier=0.25");
  CHECK(r.code != 0);
  CHECK(contains(r.err, "checkpoint: shape mismatch for block07.project.weight"));
}

TEST_CASE("eval: a directory scored against itself is 100.00 everywhere") {
  const fs::path dir = temp_dir("evalself");
  fs::create_directories(dir / "gt");
  for (int i = 0; i < 3; ++i) {
    BinaryMask m(40, 40);
    fill_square(m, 5 + i * 3, 6, 7);
    save_png((dir / "gt" / ("img" + std::to_string(i) + ".png")).string(), mask_to_image(m));
  }
  const RunResult r = run_cli("eval --pred " + (dir / "gt").string() + " --gt " +
                              (dir / "gt").string() + " --report " + (dir / "rep.json").string());
  CHECK(r.code == 0);
  CHECK(contains(r.out, "object_f1 100.00"));
  CHECK(contains(r.out, "pixel_f1  100.00"));
  CHECK(contains(r.out, "dice      100.00"));
  CHECK(contains(r.out, "iou       100.00"));
  CHECK(contains(r.out, "miou      100.00"));
}

TEST_CASE("eval: three objects with two exact matches score object_f1 80.00") {
  const fs::path dir = temp_dir("evalgolden");
  fs::create_directories(dir / "gt");
  fs::create_directories(dir / "pred");

  // Three well-separated ground-truth squares; the prediction reproduces two
  // of them exactly and misses the third: precision 1, recall 2/3, F1 0.8.
  BinaryMask gt(64, 64);
  fill_square(gt, 4, 4, 10);
  fill_square(gt, 4, 40, 10);
  fill_square(gt, 40, 4, 10);
  BinaryMask pred(64, 64);
  fill_square(pred, 4, 4, 10);
  fill_square(pred, 4, 40, 10);
  save_png((dir / "gt" / "case.png").string(), mask_to_image(gt));
  save_png((dir / "pred" / "case.png").string(), mask_to_image(pred));

  const RunResult r = run_cli("eval --pred " + (dir / "pred").string() + " --gt " +
                              (dir / "gt").string() + " --report " + (dir / "rep.json").string());
  CHECK(r.code == 0);
  CHECK(contains(r.out, "object_f1 80.00"));

  const nlohmann::json rep = nlohmann::json::parse(read_file(dir / "rep.json"));
  CHECK(rep.at("aggregate").at("object_f1").get<double>() == doctest::Approx(0.8));
  CHECK(rep.at("aggregate").at("images").get<int>() == 1);
}

TEST_CASE("eval: an all-background prediction scores zero against non-empty truth") {
  const fs::path dir = temp_dir("evalzero");
  fs::create_directories(dir / "gt");
  fs::create_directories(dir / "pred");
  BinaryMask gt(32, 32);
  fill_square(gt, 8, 8, 10);
  save_png((dir / "gt" / "a.png").string(), mask_to_image(gt));
  save_png((dir / "pred" / "a.png").string(), mask_to_image(BinaryMask(32, 32)));

  const RunResult r =
      run_cli("eval --pred " + (dir / "pred").string() + " --gt " + (dir / "gt").string());
  CHECK(r.code == 0);
  CHECK(contains(r.out, "object_f1 0.00"));
  CHECK(contains(r.out, "iou       0.00"));
}

TEST_CASE("eval: a missing prediction names the stem") {
  const fs::path dir = temp_dir("evalmissing");
  fs::create_directories(dir / "gt");
  fs::create_directories(dir / "pred");
  BinaryMask gt(16, 16);
  fill_square(gt, 2, 2, 5);
  save_png((dir / "gt" / "lost.png").string(), mask_to_image(gt));
  const RunResult r =
      run_cli("eval --pred " + (dir / "pred").string() + " --gt " + (dir / "gt").string());
  CHECK(r.code != 0);
  CHECK(contains(r.err, "eval: no prediction for \"lost\""));
}

TEST_CASE("gradcheck: the whole battery passes from a fresh build") {
  const RunResult r = run_cli("gradcheck");
  CHECK(r.code == 0);
  CHECK(contains(r.out, "all checks passed"));
  CHECK(contains(r.out, "network (sampled)"));
  CHECK(!contains(r.out, "FAIL"));
}

TEST_CASE("flops: the table matches the frozen totals and separates attention") {
  const RunResult r = run_cli("flops");
  CHECK(r.code == 0);
  CHECK(contains(r.out, "encoder_qa"));
  CHECK(contains(r.out, "decoder_qa"));
  CHECK(contains(r.out, "242276864"));
  CHECK(contains(r.out, "4407296"));

  // Disabling attention removes exactly the attention share.
  const RunResult ablated = run_cli("flops --set network.use_qa=false");
  CHECK(ablated.code == 0);
  CHECK(contains(ablated.out, std::to_string(242276864 - 4407296)));
  CHECK(!contains(ablated.out, "encoder_qa"));
}

TEST_CASE("cli: no subcommand or an unknown flag exits nonzero") {
  CHECK(run_cli("").code != 0);
  CHECK(run_cli("synth --out /tmp/x --bogus-flag 1").code != 0);
}
