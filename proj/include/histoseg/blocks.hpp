#pragma once

#include "histoseg/ops.hpp"
#include "histoseg/tensor.hpp"

namespace histoseg {

// He-normal init: std = sqrt(2 / fan_in), fan_in = product of non-leading dims.
template <typename T>
TensorT<T> he_normal(Shape shape, Rng& rng) {
  std::size_t fan_in = 1;
  for (std::size_t i = 1; i < shape.size(); ++i) fan_in *= static_cast<std::size_t>(shape[i]);
  return TensorT<T>::randn(shape, rng, std::sqrt(2.0 / static_cast<double>(fan_in)));
}

template <typename T>
struct BatchNormLayer {
  TensorT<T> gamma, beta, running_mean, running_var;

  static BatchNormLayer init(int channels) {
    BatchNormLayer bn;
    bn.gamma = TensorT<T>::full({channels}, T(1));
    bn.beta = TensorT<T>::zeros({channels});
    bn.running_mean = TensorT<T>::zeros({channels});
    bn.running_var = TensorT<T>::full({channels}, T(1));
    return bn;
  }

  TensorT<T> forward(const TensorT<T>& x, Mode mode) const {
    // running stats are shared buffers, so train-mode updates stick
    TensorT<T> rm = running_mean, rv = running_var;
    return batch_norm(x, gamma, beta, rm, rv, mode);
  }
};

// QA(x) = sigmoid(conv1x1(x)) + x. The conv keeps the channel count; the bias
// starts at zero so a fresh layer maps x to x + 0.5.
template <typename T>
struct QuickAttentionLayer {
  TensorT<T> weight;  // C x C x 1 x 1
  TensorT<T> bias;    // C

  static QuickAttentionLayer init(int channels, Rng& rng) {
    QuickAttentionLayer qa;
    qa.weight = he_normal<T>({channels, channels, 1, 1}, rng);
    qa.bias = TensorT<T>::zeros({channels});
    return qa;
  }

  TensorT<T> forward(const TensorT<T>& x) const {
    if (x.ndim() != 4 || x.dim(1) != weight.dim(0)) {
      fail("quick_attention: input " + shape_str(x.shape()) + " does not match " +
           std::to_string(weight.dim(0)) + " channels");
    }
    return add(sigmoid(conv2d(x, weight, &bias)), x);
  }
};

// Inverted-residual block: 1x1 expand -> BN/relu -> 3x3 depthwise (dilated,
// carries the stride) -> BN/relu -> 1x1 project -> BN, no activation after the
// projection. Residual only when the shapes line up (stride 1, in_c == out_c).
template <typename T>
struct ExpandedConvBlock {
  int in_c = 0, out_c = 0, stride = 1, dilation = 1;
  TensorT<T> expand_w;   // hidden x in_c x 1 x 1
  TensorT<T> depth_w;    // hidden x 1 x 3 x 3
  TensorT<T> project_w;  // out_c x hidden x 1 x 1
  BatchNormLayer<T> bn1, bn2, bn3;

  static ExpandedConvBlock init(int in_c, int out_c, int stride, int dilation, int expansion,
                                Rng& rng) {
    if (in_c < 1 || out_c < 1 || expansion < 1) fail("expanded_conv: non-positive block widths");
    ExpandedConvBlock b;
    b.in_c = in_c;
    b.out_c = out_c;
    b.stride = stride;
    b.dilation = dilation;
    const int hidden = in_c * expansion;
    b.expand_w = he_normal<T>({hidden, in_c, 1, 1}, rng);
    b.bn1 = BatchNormLayer<T>::init(hidden);
    b.depth_w = he_normal<T>({hidden, 1, 3, 3}, rng);
    b.bn2 = BatchNormLayer<T>::init(hidden);
    b.project_w = he_normal<T>({out_c, hidden, 1, 1}, rng);
    b.bn3 = BatchNormLayer<T>::init(out_c);
    return b;
  }

  bool residual() const { return stride == 1 && in_c == out_c; }

  TensorT<T> forward(const TensorT<T>& x, Mode mode) const {
    if (x.ndim() != 4 || x.dim(1) != in_c) {
      fail("expanded_conv: input " + shape_str(x.shape()) + " does not match " +
           std::to_string(in_c) + " channels");
    }
    TensorT<T> h = relu(bn1.forward(conv2d(x, expand_w), mode));
    h = relu(bn2.forward(depthwise_conv2d(h, depth_w, dilation, Padding::kSame, stride), mode));
    h = bn3.forward(conv2d(h, project_w), mode);
    return residual() ? add(h, x) : h;
  }
};

// Five parallel branches at a shared width: 1x1, three 3x3 dilated convs at
// rates 6/12/18, and image pooling (global average pool -> 1x1 conv ->
// resize back), concatenated and fused by a 1x1 conv.
template <typename T>
struct AsppBlock {
  int width = 0;
  TensorT<T> w_1x1, b_1x1;
  TensorT<T> w_r6, b_r6;
  TensorT<T> w_r12, b_r12;
  TensorT<T> w_r18, b_r18;
  TensorT<T> w_pool, b_pool;
  TensorT<T> w_fuse, b_fuse;

  static AsppBlock init(int in_c, int width, Rng& rng) {
    if (width < 1) fail("aspp: non-positive branch width");
    AsppBlock a;
    a.width = width;
    a.w_1x1 = he_normal<T>({width, in_c, 1, 1}, rng);
    a.b_1x1 = TensorT<T>::zeros({width});
    a.w_r6 = he_normal<T>({width, in_c, 3, 3}, rng);
    a.b_r6 = TensorT<T>::zeros({width});
    a.w_r12 = he_normal<T>({width, in_c, 3, 3}, rng);
    a.b_r12 = TensorT<T>::zeros({width});
    a.w_r18 = he_normal<T>({width, in_c, 3, 3}, rng);
    a.b_r18 = TensorT<T>::zeros({width});
    a.w_pool = he_normal<T>({width, in_c, 1, 1}, rng);
    a.b_pool = TensorT<T>::zeros({width});
    a.w_fuse = he_normal<T>({width, 5 * width, 1, 1}, rng);
    a.b_fuse = TensorT<T>::zeros({width});
    return a;
  }

  TensorT<T> forward(const TensorT<T>& x, Mode mode) const {
    (void)mode;  // no stateful layers inside
    const int h = x.dim(2), w = x.dim(3);
    TensorT<T> pooled = conv2d(global_avg_pool(x), w_pool, &b_pool);
    std::vector<TensorT<T>> branches{
        conv2d(x, w_1x1, &b_1x1),
        conv2d(x, w_r6, &b_r6, 1, 6),
        conv2d(x, w_r12, &b_r12, 1, 12),
        conv2d(x, w_r18, &b_r18, 1, 18),
        bilinear_resize(pooled, h, w),
    };
    return conv2d(concat(branches), w_fuse, &b_fuse);
  }
};

}  // namespace histoseg
