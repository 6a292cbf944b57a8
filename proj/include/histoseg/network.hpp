// Full encoder-decoder assembly: stem, sixteen expanded convolution blocks
// with the 1/2/4 dilation schedule, attention after the shallow encoder, ASPP,
// a pooling decoder branch, an encoder-decoder residual, and a sigmoid head.
// Also owns the named parameter store and the analytic multiply-add counter.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "histoseg/blocks.hpp"
#include "histoseg/ops.hpp"
#include "histoseg/tensor.hpp"

namespace histoseg {

struct BlockSpec {
  int base_out_channels = 0;
  int stride = 1;
  int dilation = 1;
  int expansion = 6;
};

// Channel widths are base values scaled by width_multiplier and rounded to
// the nearest multiple of 8 (minimum 8), so desk-scale graphs stay small
// while keeping the full topology.
struct NetworkSpec {
  int input_height = 256;
  int input_width = 256;
  int in_channels = 3;
  double width_multiplier = 0.25;
  int stem_base_width = 32;
  int aspp_base_width = 256;
  int decoder_base_width = 256;
  double dropout_rate = 0.1;
  int encoder_qa_after_block = 6;
  bool use_qa = true;
  bool encoder_decoder_residual = true;
  std::vector<BlockSpec> blocks = default_blocks();

  // Block schedule: widths 16x2, 24x2, 32x2, 64x4, 96x3, 160x3 with stride 2
  // entering the 24 and 32 groups (stem stride 2 completes output stride 8)
  // and dilation 1 for blocks 1-6, 2 for 7-13, 4 for 14-16.
  static std::vector<BlockSpec> default_blocks() {
    std::vector<BlockSpec> b;
    auto group = [&b](int count, int width, int first_stride, int dilation) {
      for (int i = 0; i < count; ++i) {
        b.push_back({width, i == 0 ? first_stride : 1, dilation,
                     b.empty() ? 1 : 6});
      }
    };
    group(2, 16, 1, 1);
    group(2, 24, 2, 1);
    group(2, 32, 2, 1);
    group(4, 64, 1, 2);
    group(3, 96, 1, 2);
    group(3, 160, 1, 4);
    return b;
  }

  int scaled(int base_width) const {
    int rounded =
        static_cast<int>(std::floor(base_width * width_multiplier / 8.0 + 0.5)) * 8;
    return std::max(8, rounded);
  }

  void validate() const {
    if (width_multiplier <= 0.0) fail("network spec: width_multiplier must be positive");
    if (in_channels < 1) fail("network spec: in_channels must be positive");
    if (stem_base_width < 1 || aspp_base_width < 1 || decoder_base_width < 1) {
      fail("network spec: non-positive base width");
    }
    if (blocks.size() != 16) {
      fail("network spec: expected 16 blocks, got " + std::to_string(blocks.size()));
    }
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      const BlockSpec& blk = blocks[i];
      if (blk.base_out_channels < 1 || blk.dilation < 1 || blk.expansion < 1 ||
          (blk.stride != 1 && blk.stride != 2)) {
        fail("network spec: block " + std::to_string(i + 1) + " is ill-formed");
      }
    }
    if (encoder_qa_after_block < 1 ||
        encoder_qa_after_block > static_cast<int>(blocks.size())) {
      fail("network spec: encoder_qa_after_block out of range");
    }
    if (dropout_rate < 0.0 || dropout_rate >= 1.0) {
      fail("network spec: dropout_rate must be in [0, 1)");
    }
  }
};

struct ShapeTraceEntry {
  std::string stage;
  Shape shape;
};

// One named tensor plus its optimizer slots. The tensor shares its buffer
// with the layer that owns it, so updates through the store train the model.
template <typename T>
struct ParamEntry {
  std::string name;
  TensorT<T> tensor;
  bool trainable = true;
  std::vector<T> m, v;  // Adam moments, sized on first use
};

template <typename T>
class ParameterStoreT {
 public:
  void add(const std::string& name, const TensorT<T>& tensor, bool trainable) {
    if (index_.count(name)) fail("parameter store: duplicate name " + name);
    index_[name] = entries_.size();
    entries_.push_back({name, tensor, trainable, {}, {}});
    if (trainable) entries_.back().tensor.set_requires_grad(true);
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  ParamEntry<T>& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) fail("parameter store: no parameter named " + name);
    return entries_[it->second];
  }
  const ParamEntry<T>& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) fail("parameter store: no parameter named " + name);
    return entries_[it->second];
  }

  std::vector<ParamEntry<T>>& entries() { return entries_; }
  const std::vector<ParamEntry<T>>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  long long value_count(bool trainable_only) const {
    long long n = 0;
    for (const ParamEntry<T>& e : entries_) {
      if (!trainable_only || e.trainable) n += static_cast<long long>(e.tensor.numel());
    }
    return n;
  }

  void zero_grad() {
    for (ParamEntry<T>& e : entries_) {
      if (e.trainable) e.tensor.zero_grad();
    }
  }

 private:
  std::vector<ParamEntry<T>> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

using ParameterStore = ParameterStoreT<float>;

template <typename T>
class HistoSegModelT {
 public:
  static HistoSegModelT build(const NetworkSpec& spec, std::uint64_t seed) {
    spec.validate();
    HistoSegModelT m;
    m.spec_ = spec;
    m.dropout_rng_ = Rng(seed + 1);
    Rng rng(seed);

    const int stem_c = spec.scaled(spec.stem_base_width);
    m.stem_w_ = he_normal<T>({stem_c, spec.in_channels, 3, 3}, rng);
    m.stem_bn_ = BatchNormLayer<T>::init(stem_c);

    int c = stem_c;
    for (std::size_t i = 0; i < spec.blocks.size(); ++i) {
      const BlockSpec& blk = spec.blocks[i];
      const int out_c = spec.scaled(blk.base_out_channels);
      m.blocks_.push_back(
          ExpandedConvBlock<T>::init(c, out_c, blk.stride, blk.dilation, blk.expansion, rng));
      c = out_c;
      if (static_cast<int>(i) + 1 == spec.encoder_qa_after_block) m.encoder_c_ = c;
    }
    if (spec.use_qa) m.encoder_qa_ = QuickAttentionLayer<T>::init(m.encoder_c_, rng);

    const int aspp_w = spec.scaled(spec.aspp_base_width);
    m.aspp_ = AsppBlock<T>::init(c, aspp_w, rng);

    const int dec_w = spec.scaled(spec.decoder_base_width);
    m.pool_proj_w_ = he_normal<T>({dec_w, aspp_w, 1, 1}, rng);
    m.pool_proj_b_ = TensorT<T>::zeros({dec_w});
    m.fuse_w_ = he_normal<T>({dec_w, aspp_w + dec_w, 1, 1}, rng);
    m.fuse_b_ = TensorT<T>::zeros({dec_w});
    if (spec.use_qa) m.decoder_qa_ = QuickAttentionLayer<T>::init(dec_w, rng);
    if (spec.encoder_decoder_residual) {
      m.skip_w_ = he_normal<T>({dec_w, m.encoder_c_, 1, 1}, rng);
      m.skip_b_ = TensorT<T>::zeros({dec_w});
    }
    m.head_w_ = he_normal<T>({1, dec_w, 1, 1}, rng);
    m.head_b_ = TensorT<T>::zeros({1});

    m.register_params();
    return m;
  }

  // Pipeline: stem -> blocks 1..6 -> attention -> blocks 7..16 -> ASPP ->
  // pooling branch (GAP, 1x1, resize back) -> concat -> fuse -> dropout ->
  // attention -> add projected encoder features -> 1x1 head -> sigmoid ->
  // resize to the input resolution. Requires H and W divisible by 8.
  TensorT<T> forward(const TensorT<T>& x, Mode mode,
                     std::vector<ShapeTraceEntry>* trace = nullptr) {
    if (x.ndim() != 4 || x.dim(1) != spec_.in_channels) {
      fail("network forward: expected Nx" + std::to_string(spec_.in_channels) +
           "xHxW input, got " + shape_str(x.shape()));
    }
    const int h = x.dim(2), w = x.dim(3);
    if (h % 8 != 0 || w % 8 != 0) {
      fail("network forward: input " + std::to_string(h) + "x" + std::to_string(w) +
           " is not divisible by 8; pad the input to the next multiple of 8 and crop "
           "the output back");
    }
    auto note = [trace](const std::string& stage, const TensorT<T>& t) {
      if (trace) trace->push_back({stage, t.shape()});
    };
    note("input", x);

    TensorT<T> cur = relu(stem_bn_.forward(conv2d(x, stem_w_, nullptr, 2), mode));
    note("stem", cur);

    TensorT<T> encoder_feat;
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      cur = blocks_[i].forward(cur, mode);
      note(block_name(i), cur);
      if (static_cast<int>(i) + 1 == spec_.encoder_qa_after_block) {
        if (spec_.use_qa) {
          cur = encoder_qa_.forward(cur);
          note("encoder_qa", cur);
        }
        encoder_feat = cur;
      }
    }

    cur = aspp_.forward(cur, mode);
    note("aspp", cur);

    TensorT<T> pooled = global_avg_pool(cur);
    note("pool_branch.gap", pooled);
    pooled = conv2d(pooled, pool_proj_w_, pool_proj_b_);
    note("pool_branch.proj", pooled);
    pooled = bilinear_resize(pooled, cur.dim(2), cur.dim(3));
    note("pool_branch.resize", pooled);

    cur = concat(std::vector<TensorT<T>>{cur, pooled});
    note("concat", cur);
    cur = conv2d(cur, fuse_w_, fuse_b_);
    note("decoder_fuse", cur);
    if (mode == Mode::kTrain && spec_.dropout_rate > 0.0) {
      cur = dropout(cur, spec_.dropout_rate, mode, dropout_rng_);
    }
    if (spec_.use_qa) {
      cur = decoder_qa_.forward(cur);
      note("decoder_qa", cur);
    }
    if (spec_.encoder_decoder_residual) {
      cur = add(cur, conv2d(encoder_feat, skip_w_, skip_b_));
      note("skip_add", cur);
    }
    cur = conv2d(cur, head_w_, head_b_);
    note("head", cur);
    cur = bilinear_resize(sigmoid(cur), h, w);
    note("output", cur);
    return cur;
  }

  const NetworkSpec& spec() const { return spec_; }
  ParameterStoreT<T>& params() { return params_; }
  const ParameterStoreT<T>& params() const { return params_; }

 private:
  static std::string block_name(std::size_t index) {
    const std::size_t n = index + 1;
    return (n < 10 ? "block0" : "block") + std::to_string(n);
  }

  void register_bn(const std::string& prefix, BatchNormLayer<T>& bn) {
    params_.add(prefix + ".gamma", bn.gamma, true);
    params_.add(prefix + ".beta", bn.beta, true);
    params_.add(prefix + ".running_mean", bn.running_mean, false);
    params_.add(prefix + ".running_var", bn.running_var, false);
  }

  void register_params() {
    params_.add("stem.conv.weight", stem_w_, true);
    register_bn("stem.bn", stem_bn_);
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      const std::string p = block_name(i);
      params_.add(p + ".expand.weight", blocks_[i].expand_w, true);
      register_bn(p + ".bn1", blocks_[i].bn1);
      params_.add(p + ".depthwise.weight", blocks_[i].depth_w, true);
      register_bn(p + ".bn2", blocks_[i].bn2);
      params_.add(p + ".project.weight", blocks_[i].project_w, true);
      register_bn(p + ".bn3", blocks_[i].bn3);
    }
    if (spec_.use_qa) {
      params_.add("encoder_qa.weight", encoder_qa_.weight, true);
      params_.add("encoder_qa.bias", encoder_qa_.bias, true);
    }
    params_.add("aspp.conv1x1.weight", aspp_.w_1x1, true);
    params_.add("aspp.conv1x1.bias", aspp_.b_1x1, true);
    params_.add("aspp.rate6.weight", aspp_.w_r6, true);
    params_.add("aspp.rate6.bias", aspp_.b_r6, true);
    params_.add("aspp.rate12.weight", aspp_.w_r12, true);
    params_.add("aspp.rate12.bias", aspp_.b_r12, true);
    params_.add("aspp.rate18.weight", aspp_.w_r18, true);
    params_.add("aspp.rate18.bias", aspp_.b_r18, true);
    params_.add("aspp.pool.weight", aspp_.w_pool, true);
    params_.add("aspp.pool.bias", aspp_.b_pool, true);
    params_.add("aspp.fuse.weight", aspp_.w_fuse, true);
    params_.add("aspp.fuse.bias", aspp_.b_fuse, true);
    params_.add("decoder.pool_proj.weight", pool_proj_w_, true);
    params_.add("decoder.pool_proj.bias", pool_proj_b_, true);
    params_.add("decoder.fuse.weight", fuse_w_, true);
    params_.add("decoder.fuse.bias", fuse_b_, true);
    if (spec_.use_qa) {
      params_.add("decoder_qa.weight", decoder_qa_.weight, true);
      params_.add("decoder_qa.bias", decoder_qa_.bias, true);
    }
    if (spec_.encoder_decoder_residual) {
      params_.add("decoder.skip_proj.weight", skip_w_, true);
      params_.add("decoder.skip_proj.bias", skip_b_, true);
    }
    params_.add("head.weight", head_w_, true);
    params_.add("head.bias", head_b_, true);
  }

  NetworkSpec spec_;
  TensorT<T> stem_w_;
  BatchNormLayer<T> stem_bn_;
  std::vector<ExpandedConvBlock<T>> blocks_;
  int encoder_c_ = 0;
  QuickAttentionLayer<T> encoder_qa_;
  AsppBlock<T> aspp_;
  TensorT<T> pool_proj_w_, pool_proj_b_;
  TensorT<T> fuse_w_, fuse_b_;
  QuickAttentionLayer<T> decoder_qa_;
  TensorT<T> skip_w_, skip_b_;
  TensorT<T> head_w_, head_b_;
  ParameterStoreT<T> params_;
  Rng dropout_rng_;
};

using HistoSegModel = HistoSegModelT<float>;

struct FlopsRow {
  std::string layer;
  long long macs = 0;
};

struct FlopsReport {
  std::vector<FlopsRow> rows;
  long long total = 0;
  long long qa_total = 0;
};

// Analytic multiply-add walk over the graph at the configured input size.
// Convolutions count in_c*kh*kw MACs per output value (depthwise: kh*kw);
// attention rows add their two elementwise passes (sigmoid, add) on top of
// the 1x1 conv. Normalization, activations, and resizes are not counted.
inline FlopsReport count_flops(const NetworkSpec& spec) {
  spec.validate();
  FlopsReport rep;
  auto push = [&rep](const std::string& layer, long long macs, bool qa = false) {
    rep.rows.push_back({layer, macs});
    rep.total += macs;
    if (qa) rep.qa_total += macs;
  };
  auto ceil_div = [](int a, int b) { return (a + b - 1) / b; };
  auto conv = [](int in_c, int out_c, int k, int oh, int ow) {
    return 1LL * out_c * oh * ow * in_c * k * k;
  };
  auto qa_cost = [](int ch, int oh, int ow) {
    return 1LL * ch * oh * ow * (ch + 2);
  };

  int h = ceil_div(spec.input_height, 2), w = ceil_div(spec.input_width, 2);
  const int stem_c = spec.scaled(spec.stem_base_width);
  push("stem.conv", conv(spec.in_channels, stem_c, 3, h, w));

  int c = stem_c;
  int qa_c = 0;
  for (std::size_t i = 0; i < spec.blocks.size(); ++i) {
    const BlockSpec& blk = spec.blocks[i];
    const int out_c = spec.scaled(blk.base_out_channels);
    const int hidden = c * blk.expansion;
    const int oh = ceil_div(h, blk.stride), ow = ceil_div(w, blk.stride);
    long long macs = conv(c, hidden, 1, h, w) + 1LL * hidden * oh * ow * 9 +
                     conv(hidden, out_c, 1, oh, ow);
    const std::size_t n = i + 1;
    push((n < 10 ? "block0" : "block") + std::to_string(n), macs);
    c = out_c;
    h = oh;
    w = ow;
    if (static_cast<int>(n) == spec.encoder_qa_after_block) {
      qa_c = c;
      if (spec.use_qa) push("encoder_qa", qa_cost(c, h, w), true);
    }
  }

  const int aspp_w = spec.scaled(spec.aspp_base_width);
  push("aspp", conv(c, aspp_w, 1, h, w) + 3 * conv(c, aspp_w, 3, h, w) +
                   conv(c, aspp_w, 1, 1, 1) + conv(5 * aspp_w, aspp_w, 1, h, w));

  const int dec_w = spec.scaled(spec.decoder_base_width);
  push("decoder.pool_proj", conv(aspp_w, dec_w, 1, 1, 1));
  push("decoder.fuse", conv(aspp_w + dec_w, dec_w, 1, h, w));
  if (spec.use_qa) push("decoder_qa", qa_cost(dec_w, h, w), true);
  if (spec.encoder_decoder_residual) push("decoder.skip_proj", conv(qa_c, dec_w, 1, h, w));
  push("head", conv(dec_w, 1, 1, h, w));
  return rep;
}

}  // namespace histoseg
