#!/usr/bin/env python3
"""Export scikit-learn's bundled 8x8 digits set as IDX files.

The C++ side upsamples and jitters these into 28x28 images when no
MNIST-format data directory is supplied.
"""
import argparse
import struct
from pathlib import Path

import numpy as np
from sklearn.datasets import load_digits


def write_idx(path, magic, dims, payload):
    with open(path, "wb") as f:
        f.write(struct.pack(">I", magic))
        for d in dims:
            f.write(struct.pack(">I", d))
        f.write(payload.astype(np.uint8).tobytes())


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default=str(Path(__file__).resolve().parent.parent / "data"))
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    digits = load_digits()
    images = np.rint(digits.images / 16.0 * 255.0)
    write_idx(out / "digits8-images-idx3-ubyte", 0x00000803, images.shape, images)
    write_idx(out / "digits8-labels-idx1-ubyte", 0x00000801, digits.target.shape, digits.target)
    print(f"wrote {images.shape[0]} samples to {out}")


if __name__ == "__main__":
    main()
