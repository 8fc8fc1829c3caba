"""Convert the 5000-sample MNIST subset bundled with mlxtend into IDX files.

Usage: python3 scripts/mnist_subset_to_idx.py path/to/mlxtend-*.whl data/mnist-5k

The wheel only needs to be downloaded (`pip download --no-deps mlxtend`);
nothing is installed.
"""
import gzip
import struct
import sys
import zipfile
from pathlib import Path


def main():
    wheel, out = sys.argv[1], Path(sys.argv[2])
    out.mkdir(parents=True, exist_ok=True)
    raw = zipfile.ZipFile(wheel).read("mlxtend/data/data/mnist_5k.csv.gz")
    rows = gzip.decompress(raw).decode().strip().split("\n")
    pixels = bytearray()
    labels = bytearray()
    for row in rows:
        values = [int(float(v)) for v in row.split(",")]
        pixels.extend(values[:784])
        labels.append(values[784])
    n = len(rows)
    with open(out / "images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, n, 28, 28))
        f.write(pixels)
    with open(out / "labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 0x00000801, n))
        f.write(labels)


if __name__ == "__main__":
    main()
