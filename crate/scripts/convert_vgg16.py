#!/usr/bin/env python3
"""Convert torchvision VGG-16 convolution weights (blocks 1-4) to CTW1.

One-time step for the pretrained perceptual extractor:

    pip install torch torchvision
    python scripts/convert_vgg16.py --out vgg16_conv.ctw1

With no --state-dict the ImageNet weights are fetched through torchvision
(network access needed once). Pass --state-dict to convert a local
`vgg16-*.pth` file instead.

The extractor feeds the trunk `255 * x - mean[c]` for grayscale `x` in
[0, 1], with `mean` the ImageNet channel means in R, G, B order. torchvision
weights expect `(x - m[c]) / s[c]`, so the first convolution is rescaled by
1 / (255 s[c]) and its bias absorbs the remaining offset. The fold is exact
away from the image border; zero padding differs in the outermost pixel.
"""

import argparse
import struct
import zlib

import torch
import torchvision

# Must match VGG_CHANNEL_MEANS in crates/core/src/losses.rs.
CHANNEL_MEANS = (123.68, 116.779, 103.939)
TORCH_MEAN = (0.485, 0.456, 0.406)
TORCH_STD = (0.229, 0.224, 0.225)
# features[0..=22]: conv/relu pairs with pools at 4, 9 and 16.
CONV_INDICES = (0, 2, 5, 7, 10, 12, 14, 17, 19, 21)


def load_features(state_dict_path):
    if state_dict_path is None:
        model = torchvision.models.vgg16(weights=torchvision.models.VGG16_Weights.IMAGENET1K_V1)
    else:
        model = torchvision.models.vgg16(weights=None)
        model.load_state_dict(torch.load(state_dict_path, map_location="cpu"))
    return model.features


def fold_input_normalization(kernel, bias):
    kernel = kernel.clone()
    bias = bias.clone()
    for c in range(3):
        scale = 1.0 / (255.0 * TORCH_STD[c])
        offset = (CHANNEL_MEANS[c] / 255.0 - TORCH_MEAN[c]) / TORCH_STD[c]
        bias += kernel[:, c].sum(dim=(1, 2)) * offset
        kernel[:, c] *= scale
    return kernel, bias


def entries(features):
    for i in CONV_INDICES:
        conv = features[i]
        kernel = conv.weight.detach().double()
        bias = conv.bias.detach().double()
        if i == 0:
            kernel, bias = fold_input_normalization(kernel, bias)
        yield f"layer{i:02}.conv.kernel", kernel.float()
        yield f"layer{i:02}.conv.bias", bias.float()


def encode_ctw1(named_tensors):
    body = bytearray()
    body += struct.pack("<I", len(named_tensors))
    for name, tensor in named_tensors:
        raw = name.encode("utf-8")
        body += struct.pack("<H", len(raw)) + raw
        body += struct.pack("<B", tensor.dim())
        body += struct.pack(f"<{tensor.dim()}I", *tensor.shape)
        body += tensor.contiguous().numpy().astype("<f4").tobytes()
    return b"CTW1" + bytes(body) + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default="vgg16_conv.ctw1")
    parser.add_argument("--state-dict", help="local torchvision VGG-16 state dict (.pth)")
    args = parser.parse_args()

    features = load_features(args.state_dict)
    named = list(entries(features))
    with open(args.out, "wb") as f:
        f.write(encode_ctw1(named))
    total = sum(t.numel() for _, t in named)
    print(f"wrote {len(named)} tensors ({total} values) to {args.out}")


if __name__ == "__main__":
    main()
