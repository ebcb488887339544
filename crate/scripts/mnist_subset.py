#!/usr/bin/env python3
"""Build the 10,000-digit MNIST subset under data/mnist as gzipped IDX files.

The digits come from the `mnist` npm package (10,000 MNIST samples stored as
JSON pixel arrays scaled to [0, 1]). They are shuffled with a fixed seed and
split into 8,000 training and 2,000 test images.

    python3 scripts/mnist_subset.py [path/to/unpacked/npm/package] [out_dir]

Without a package path the script runs `npm pack mnist@1.1.0` in a temp dir.
"""
import gzip
import json
import os
import random
import struct
import subprocess
import sys
import tarfile
import tempfile

SEED = 20151015
N_TRAIN = 8000


def fetch_package(tmp):
    subprocess.run(["npm", "pack", "mnist@1.1.0"], cwd=tmp, check=True,
                   stdout=subprocess.DEVNULL)
    with tarfile.open(os.path.join(tmp, "mnist-1.1.0.tgz")) as tar:
        tar.extractall(tmp)
    return os.path.join(tmp, "package")


def write_idx(path, magic, dims, payload):
    header = struct.pack(">I", magic) + b"".join(struct.pack(">I", d) for d in dims)
    # mtime=0 keeps the archives byte-stable across rebuilds
    with open(path, "wb") as raw:
        with gzip.GzipFile(filename="", mode="wb", fileobj=raw, mtime=0) as f:
            f.write(header + payload)


def main():
    out_dir = sys.argv[2] if len(sys.argv) > 2 else os.path.join(
        os.path.dirname(__file__), "..", "data", "mnist")
    with tempfile.TemporaryDirectory() as tmp:
        pkg = sys.argv[1] if len(sys.argv) > 1 else fetch_package(tmp)
        samples = []
        for digit in range(10):
            with open(os.path.join(pkg, "src", "digits", f"{digit}.json")) as f:
                data = json.load(f)["data"]
            for i in range(len(data) // 784):
                px = bytes(min(255, max(0, round(v * 255))) for v in data[i * 784:(i + 1) * 784])
                samples.append((px, digit))

    random.Random(SEED).shuffle(samples)
    os.makedirs(out_dir, exist_ok=True)
    for name, part in (("train", samples[:N_TRAIN]), ("t10k", samples[N_TRAIN:])):
        write_idx(os.path.join(out_dir, f"{name}-images-idx3-ubyte.gz"), 0x803,
                  (len(part), 28, 28), b"".join(p for p, _ in part))
        write_idx(os.path.join(out_dir, f"{name}-labels-idx1-ubyte.gz"), 0x801,
                  (len(part),), bytes(l for _, l in part))
        print(f"{name}: {len(part)} samples")


if __name__ == "__main__":
    main()
