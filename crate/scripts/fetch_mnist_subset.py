#!/usr/bin/env python3
"""Build the 10k-sample MNIST subset used for desk-scale training.

The digits come from the `mnist` npm package (v1.1.0, MIT), which ships
10,000 MNIST samples as per-class JSON arrays of pixel intensities in [0, 1].
They are converted back to bytes, shuffled with a fixed seed, split
8000/2000 and written as gzipped IDX files.

    python3 scripts/fetch_mnist_subset.py [--package-dir DIR] [--out data/mnist-10k]

Without --package-dir the package tarball is fetched with `npm pack`.
"""

import argparse
import gzip
import json
import pathlib
import random
import struct
import subprocess
import tarfile
import tempfile

SIDE = 28
TRAIN = 8000
SEED = 20180801


def fetch_package(workdir: pathlib.Path) -> pathlib.Path:
    subprocess.run(["npm", "pack", "mnist@1.1.0"], cwd=workdir, check=True, capture_output=True)
    tgz = next(workdir.glob("mnist-*.tgz"))
    with tarfile.open(tgz) as t:
        t.extractall(workdir, filter="data")
    return workdir / "package"


def load_digits(package: pathlib.Path):
    samples = []
    for label in range(10):
        data = json.loads((package / "src" / "digits" / f"{label}.json").read_text())["data"]
        n = len(data) // (SIDE * SIDE)
        for k in range(n):
            px = data[k * SIDE * SIDE:(k + 1) * SIDE * SIDE]
            samples.append((bytes(round(v * 255) for v in px), label))
    return samples


def write_idx(path: pathlib.Path, magic: int, dims, payload: bytes):
    header = struct.pack(">I", magic) + b"".join(struct.pack(">I", d) for d in dims)
    with open(path, "wb") as raw, gzip.GzipFile(fileobj=raw, mode="wb", mtime=0, filename="") as f:
        f.write(header + payload)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--package-dir", type=pathlib.Path)
    ap.add_argument("--out", type=pathlib.Path, default=pathlib.Path("data/mnist-10k"))
    args = ap.parse_args()

    with tempfile.TemporaryDirectory() as tmp:
        package = args.package_dir or fetch_package(pathlib.Path(tmp))
        samples = load_digits(package)

    random.Random(SEED).shuffle(samples)
    args.out.mkdir(parents=True, exist_ok=True)
    for split, part in (("train", samples[:TRAIN]), ("test", samples[TRAIN:])):
        images = b"".join(img for img, _ in part)
        labels = bytes(lbl for _, lbl in part)
        write_idx(args.out / f"{split}-images-idx3-ubyte.gz", 0x803, (len(part), SIDE, SIDE), images)
        write_idx(args.out / f"{split}-labels-idx1-ubyte.gz", 0x801, (len(part),), labels)
        print(f"{split}: {len(part)} samples")


if __name__ == "__main__":
    main()
