#!/usr/bin/env python3
# Copyright (c) 2026, the dgrepair authors
# SPDX-License-Identifier: Apache-2.0
"""Writes the small checkpoint fixtures under data/fixtures/.

Independent of the C++ writer: plain struct/json/numpy. Alongside each file an
expect JSON records shapes, dtypes, the raw element bits of a few entries and
f64 sums, which the C++ tests compare against.
"""
import json
import pathlib
import struct

import numpy as np

OUT = pathlib.Path(__file__).resolve().parent.parent / "data" / "fixtures"

SHAPES = {
    "conv1d.weight": (32, 16, 4),
    "model.embed_tokens.weight": (100, 32),
    "model.layers.0.input_layernorm.weight": (48,),
    "model.layers.0.mlp.down_proj.weight": (48, 64),
    "model.layers.0.mlp.gate_proj.weight": (64, 48),
    "model.layers.0.mlp.up_proj.weight": (64, 48),
    "model.layers.0.self_attn.o_proj.bias": (4096,),
    "model.layers.0.self_attn.q_proj.weight": (48, 48),
    "small.weight": (16, 16),
}


def to_bf16_bits(x):
    """Round-to-nearest-even f32 -> bf16 on the bit pattern."""
    bits = np.asarray(x, dtype=np.float32).view(np.uint32).astype(np.uint64)
    rounding = 0x7FFF + ((bits >> 16) & 1)
    return ((bits + rounding) >> 16).astype(np.uint16)


def bf16_bits_to_f64(b):
    return (b.astype(np.uint32) << 16).view(np.float32).astype(np.float64)


def encode(values, dtype):
    if dtype == "F32":
        arr = np.asarray(values, dtype="<f4")
        return arr.tobytes(), arr.astype(np.float64)
    if dtype == "F16":
        arr = np.asarray(values, dtype="<f2")
        return arr.tobytes(), arr.astype(np.float64)
    bits = to_bf16_bits(values).astype("<u2")
    return bits.tobytes(), bf16_bits_to_f64(bits)


def write(path, tensors, dtype, metadata=None):
    header = {}
    blobs = []
    offset = 0
    expect = {"dtype": dtype, "tensors": {}}
    for name in sorted(tensors):
        raw, decoded = encode(tensors[name].ravel(), dtype)
        header[name] = {"dtype": dtype, "shape": list(tensors[name].shape),
                        "data_offsets": [offset, offset + len(raw)]}
        blobs.append(raw)
        offset += len(raw)
        expect["tensors"][name] = {
            "shape": list(tensors[name].shape),
            "sum": float(decoded.sum()),
            "first": float(decoded[0]),
            "last": float(decoded[-1]),
        }
    if metadata:
        header["__metadata__"] = metadata
    text = json.dumps(header, separators=(",", ":"), sort_keys=True).encode()
    text += b" " * ((8 - len(text) % 8) % 8)
    path.write_bytes(struct.pack("<Q", len(text)) + text + b"".join(blobs))
    return expect


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(20260101)
    base = {k: rng.normal(0.0, 0.05, size=s) for k, s in SHAPES.items()}
    ft = {}
    for k, s in SHAPES.items():
        delta = rng.normal(0.0, 0.002, size=s)
        if len(s) >= 2:
            m = s[0]
            n = int(np.prod(s[1:]))
            u = np.linalg.qr(rng.normal(size=(m, 3)))[0]
            v = np.linalg.qr(rng.normal(size=(n, 3)))[0]
            spikes = np.array([0.6, 0.45, 0.3])
            delta = delta + ((u * spikes) @ v.T).reshape(s)
        ft[k] = base[k] + delta
    expects = {}
    for dtype in ("F32", "F16", "BF16"):
        name = f"ckpt_{dtype.lower()}.safetensors"
        expects[name] = write(OUT / name, base, dtype, {"format": "pt", "fixture": dtype.lower()})
    expects["pair_base.safetensors"] = write(OUT / "pair_base.safetensors", base, "F32")
    expects["pair_ft.safetensors"] = write(OUT / "pair_ft.safetensors", ft, "F32")
    (OUT / "checkpoint_expect.json").write_text(json.dumps(expects, indent=2, sort_keys=True) + "\n")


if __name__ == "__main__":
    main()
