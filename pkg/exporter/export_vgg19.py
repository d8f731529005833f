#!/usr/bin/env python3
"""Convert VGG19 weights to the GBWV format and emit reference fixtures.

The tool loads the 13-convolution VGG19 prefix from one of three sources
(the torchvision ImageNet download, a local state-dict file, or a seeded
random initialization), writes the kernels as a GBWV file, then runs the
source framework forward on a bundled deterministic reference raster and
dumps the post-ReLU activations at the five tap layers as GBVR files. The
activations come from torch itself, so they are an independent oracle for
any reimplementation of the forward pass.

Preprocessing convention (must match the consumer): RGB uint8, per-channel
means (123.68, 116.779, 103.939) subtracted on the 0-255 scale, no resizing,
no further normalization.

Outputs in --out:
    vgg19.gbwv            packed weights
    reference.png         64x64 deterministic reference raster
    tap_<layer>.gbvr      float32 activation dump, flat (channel, y, x) order
    checksums.txt         sha256 of every emitted file
"""

from __future__ import annotations

import argparse
import hashlib
import struct
import sys
from pathlib import Path

import numpy as np
import torch
import torchvision
from PIL import Image

GBWV_MAGIC = b"GBWV"
GBWV_VERSION = 1
GBVR_MAGIC = b"GBVR"
GBVR_VERSION = 1

CHANNEL_MEANS = np.array([123.68, 116.779, 103.939], dtype=np.float32)

# Position of each prefix conv inside torchvision's vgg19().features stack.
CONV_FEATURE_INDEX = {
    "conv1_1": 0, "conv1_2": 2,
    "conv2_1": 5, "conv2_2": 7,
    "conv3_1": 10, "conv3_2": 12, "conv3_3": 14, "conv3_4": 16,
    "conv4_1": 19, "conv4_2": 21, "conv4_3": 23, "conv4_4": 25,
    "conv5_1": 28,
}

CONV_ORDER = (
    "conv1_1", "conv1_2",
    "conv2_1", "conv2_2",
    "conv3_1", "conv3_2", "conv3_3", "conv3_4",
    "conv4_1", "conv4_2", "conv4_3", "conv4_4",
    "conv5_1",
)

EXPECTED_SHAPES = {
    "conv1_1": (64, 3), "conv1_2": (64, 64),
    "conv2_1": (128, 64), "conv2_2": (128, 128),
    "conv3_1": (256, 128), "conv3_2": (256, 256),
    "conv3_3": (256, 256), "conv3_4": (256, 256),
    "conv4_1": (512, 256), "conv4_2": (512, 512),
    "conv4_3": (512, 512), "conv4_4": (512, 512),
    "conv5_1": (512, 512),
}

# Module index of the ReLU following each tapped conv in vgg19().features.
TAP_RELU_INDEX = {"conv1_1": 1, "conv2_1": 6, "conv3_1": 11, "conv4_1": 20, "conv5_1": 29}


def load_source_layers(source: str, seed: int, state_dict_path: str | None):
    """Return {name: (kernel float32 (out,in,3,3), bias float32 (out,))}."""
    if source == "imagenet":
        weights = torchvision.models.VGG19_Weights.IMAGENET1K_V1
        features = torchvision.models.vgg19(weights=weights).features
    elif source == "random":
        torch.manual_seed(seed)
        features = torchvision.models.vgg19(weights=None).features
    elif source == "state-dict":
        if not state_dict_path:
            raise SystemExit("--source state-dict requires --state-dict PATH")
        state = torch.load(state_dict_path, map_location="cpu", weights_only=True)
        features = torchvision.models.vgg19(weights=None).features
        # Accept both full-model dicts ("features.0.weight") and
        # features-only dicts ("0.weight").
        prefix = {}
        for key, value in state.items():
            if key.startswith("features."):
                prefix[key.removeprefix("features.")] = value
            elif key.split(".", 1)[0].isdigit():
                prefix[key] = value
        try:
            missing = features.load_state_dict(prefix, strict=False).missing_keys
        except RuntimeError as exc:
            raise SystemExit(f"state dict does not fit VGG19: {exc}") from exc
        needed = {f"{i}.weight" for i in CONV_FEATURE_INDEX.values()}
        needed |= {f"{i}.bias" for i in CONV_FEATURE_INDEX.values()}
        lost = needed & set(missing)
        if lost:
            raise SystemExit(f"state dict is missing prefix layers: {sorted(lost)}")
    else:
        raise SystemExit(f"unknown source {source!r}")

    layers = {}
    for name, idx in CONV_FEATURE_INDEX.items():
        module = features[idx]
        kernel = module.weight.detach().numpy().astype(np.float32)  # (out,in,ky,kx)
        bias = module.bias.detach().numpy().astype(np.float32)
        out_c, in_c = EXPECTED_SHAPES[name]
        if kernel.shape != (out_c, in_c, 3, 3):
            raise SystemExit(f"{name}: kernel shape {kernel.shape} != {(out_c, in_c, 3, 3)}")
        if bias.shape != (out_c,):
            raise SystemExit(f"{name}: bias shape {bias.shape} != ({out_c},)")
        layers[name] = (kernel, bias)
    return features, layers


def write_gbwv(path: Path, layers: dict) -> None:
    with open(path, "wb") as fh:
        fh.write(GBWV_MAGIC)
        fh.write(struct.pack("<II", GBWV_VERSION, len(CONV_ORDER)))
        for name in CONV_ORDER:
            kernel, bias = layers[name]
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<IIII", *kernel.shape))
            fh.write(np.ascontiguousarray(kernel, dtype="<f4").tobytes())
            fh.write(struct.pack("<I", bias.size))
            fh.write(np.ascontiguousarray(bias, dtype="<f4").tobytes())


def write_gbvr(path: Path, values: np.ndarray) -> None:
    flat = np.ascontiguousarray(values, dtype="<f4").reshape(-1)
    with open(path, "wb") as fh:
        fh.write(GBVR_MAGIC)
        fh.write(struct.pack("<IQ", GBVR_VERSION, flat.size))
        fh.write(flat.tobytes())


def reference_raster(size: int = 64) -> np.ndarray:
    """Deterministic RGB test pattern mixing gradients, rings and noise."""
    rng = np.random.default_rng(20240 + size)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / (size - 1)
    r = 0.5 + 0.5 * np.sin(9.0 * xx + 3.0 * yy)
    g = np.cos(np.hypot(yy - 0.4, xx - 0.6) * 14.0) * 0.5 + 0.5
    b = (yy + xx) / 2.0
    img = np.stack([r, g, b], axis=-1)
    img = img + 0.08 * rng.normal(size=img.shape)
    return np.clip(img * 255.0, 0, 255).astype(np.uint8)


def run_taps(features, raster: np.ndarray) -> dict[str, np.ndarray]:
    """Source-framework forward pass; post-ReLU activations per tap."""
    x = raster.astype(np.float32).transpose(2, 0, 1) - CHANNEL_MEANS[:, None, None]
    tensor = torch.from_numpy(x[None, :, :, :])
    taps: dict[str, np.ndarray] = {}
    by_index = {idx: name for name, idx in TAP_RELU_INDEX.items()}
    features.eval()
    with torch.no_grad():
        for i, module in enumerate(features):
            tensor = module(tensor)
            if i in by_index:
                taps[by_index[i]] = tensor[0].numpy().astype(np.float32)
            if i >= max(TAP_RELU_INDEX.values()):
                break
    return taps


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--source", choices=("imagenet", "random", "state-dict"),
                        default="imagenet")
    parser.add_argument("--state-dict", default=None,
                        help="Path to a saved VGG19 state dict (source=state-dict).")
    parser.add_argument("--seed", type=int, default=0,
                        help="Initialization seed (source=random).")
    parser.add_argument("--out", required=True, help="Output directory.")
    parser.add_argument("--reference-size", type=int, default=64,
                        help="Side length of the reference raster.")
    args = parser.parse_args(argv)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    features, layers = load_source_layers(args.source, args.seed, args.state_dict)
    emitted: list[Path] = []

    gbwv = out / "vgg19.gbwv"
    write_gbwv(gbwv, layers)
    emitted.append(gbwv)

    raster = reference_raster(args.reference_size)
    ref = out / "reference.png"
    Image.fromarray(raster).save(ref)
    emitted.append(ref)

    taps = run_taps(features, raster)
    for name in sorted(taps):
        tap_path = out / f"tap_{name}.gbvr"
        write_gbvr(tap_path, taps[name])
        emitted.append(tap_path)
        print(f"{name}: shape {taps[name].shape}, "
              f"min {taps[name].min():.4f}, max {taps[name].max():.4f}")

    checks = out / "checksums.txt"
    with open(checks, "w", encoding="utf-8") as fh:
        for path in emitted:
            digest = hashlib.sha256(path.read_bytes()).hexdigest()
            fh.write(f"{digest}  {path.name}\n")
    print(f"wrote {len(emitted) + 1} files to {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
