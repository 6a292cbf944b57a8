#!/usr/bin/env python3
"""Independent parameter and multiply-add walk over the segmentation graph.

Recomputes the totals straight from the documented schedule (stem 32, widths
16x2/24x2/32x2/64x4/96x3/160x3, strides on blocks 3 and 5, dilations 1/2/4,
attention after block 6, ASPP and decoder at base width 256, sigmoid head) so
the C++ tests can freeze the results as regression constants. Multiply-add
convention: convolutions count in_c*k*k per output value (depthwise k*k);
attention rows add two elementwise passes; BN/activations/resizes are free.

Usage: network_counts.py [width_multiplier] [height] [width]
"""
import math
import sys


def scaled(base, mult):
    return max(8, int(math.floor(base * mult / 8.0 + 0.5)) * 8)


# (base_out_channels, stride, dilation, expansion)
BLOCKS = (
    [(16, 1, 1, 1), (16, 1, 1, 6),
     (24, 2, 1, 6), (24, 1, 1, 6),
     (32, 2, 1, 6), (32, 1, 1, 6)]
    + [(64, 1, 2, 6)] * 4
    + [(96, 1, 2, 6)] * 3
    + [(160, 1, 4, 6)] * 3
)


def walk(mult, in_h, in_w):
    trainable = 0
    total = 0
    flops = 0
    qa_flops = 0

    def bn(c):
        nonlocal trainable, total
        trainable += 2 * c
        total += 4 * c

    def conv_params(in_c, out_c, k, bias):
        nonlocal trainable, total
        n = out_c * in_c * k * k + (out_c if bias else 0)
        trainable += n
        total += n

    def ceil_div(a, b):
        return -(-a // b)

    stem = scaled(32, mult)
    h, w = ceil_div(in_h, 2), ceil_div(in_w, 2)
    conv_params(3, stem, 3, False)
    bn(stem)
    flops += stem * h * w * 3 * 9

    c = stem
    qa_c = 0
    for idx, (base, stride, _dil, exp) in enumerate(BLOCKS, start=1):
        out_c = scaled(base, mult)
        hidden = c * exp
        conv_params(c, hidden, 1, False)
        bn(hidden)
        conv_params(1, hidden, 3, False)  # depthwise: hidden x 1 x 3 x 3
        bn(hidden)
        conv_params(hidden, out_c, 1, False)
        bn(out_c)
        oh, ow = ceil_div(h, stride), ceil_div(w, stride)
        flops += hidden * h * w * c
        flops += hidden * oh * ow * 9
        flops += out_c * oh * ow * hidden
        c, h, w = out_c, oh, ow
        if idx == 6:
            qa_c = c
            conv_params(c, c, 1, True)
            cost = c * h * w * (c + 2)
            flops += cost
            qa_flops += cost

    aspp = scaled(256, mult)
    conv_params(c, aspp, 1, True)
    for _ in range(3):
        conv_params(c, aspp, 3, True)
    conv_params(c, aspp, 1, True)
    conv_params(5 * aspp, aspp, 1, True)
    flops += aspp * h * w * c
    flops += 3 * aspp * h * w * c * 9
    flops += aspp * c
    flops += aspp * h * w * 5 * aspp

    dec = scaled(256, mult)
    conv_params(aspp, dec, 1, True)        # pooled-branch projection
    flops += dec * aspp
    conv_params(aspp + dec, dec, 1, True)  # concat fuse
    flops += dec * h * w * (aspp + dec)
    conv_params(dec, dec, 1, True)         # decoder attention
    cost = dec * h * w * (dec + 2)
    flops += cost
    qa_flops += cost
    conv_params(qa_c, dec, 1, True)        # encoder residual projection
    flops += dec * h * w * qa_c
    conv_params(dec, 1, 1, True)           # head
    flops += h * w * dec

    return trainable, total, flops, qa_flops


def main():
    mult = float(sys.argv[1]) if len(sys.argv) > 1 else 0.25
    h = int(sys.argv[2]) if len(sys.argv) > 2 else 256
    w = int(sys.argv[3]) if len(sys.argv) > 3 else 256
    trainable, total, flops, qa = walk(mult, h, w)
    print(f"width_multiplier {mult} input {h}x{w}")
    print(f"trainable_params {trainable}")
    print(f"total_params     {total}")
    print(f"flops_total      {flops}")
    print(f"flops_qa         {qa}")


if __name__ == "__main__":
    main()
