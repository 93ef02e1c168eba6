#!/usr/bin/env python3
"""Convert the 5000-sample MNIST CSV shipped inside the mlxtend wheel to IDX files.

Usage:
    pip download mlxtend==0.24.0 --no-deps -d /tmp/mlx
    python3 scripts/mnist5k_to_idx.py /tmp/mlx/mlxtend-0.24.0-py3-none-any.whl data/mnist5k

The first argument may also be the extracted mnist_5k.csv.gz. Rows are
784 pixel values (0-255) followed by the label. Row order is preserved;
the CSV is sorted by label, so consumers must shuffle before splitting.
"""

import gzip
import struct
import sys
import zipfile
from pathlib import Path

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def read_rows(src: Path):
    if src.suffix == ".whl":
        raw = zipfile.ZipFile(src).read(MEMBER)
    else:
        raw = src.read_bytes()
    text = gzip.decompress(raw).decode()
    for line in text.splitlines():
        if line.strip():
            values = [int(float(v)) for v in line.split(",")]
            yield values[:-1], values[-1]


def main() -> None:
    if len(sys.argv) != 3:
        sys.exit(__doc__)
    src, out = Path(sys.argv[1]), Path(sys.argv[2])
    out.mkdir(parents=True, exist_ok=True)
    images, labels = bytearray(), bytearray()
    count = 0
    for pixels, label in read_rows(src):
        assert len(pixels) == 784 and 0 <= label <= 9
        images.extend(bytes(pixels))
        labels.append(label)
        count += 1
    (out / "mnist5k-images-idx3-ubyte").write_bytes(struct.pack(">IIII", 0x803, count, 28, 28) + images)
    (out / "mnist5k-labels-idx1-ubyte").write_bytes(struct.pack(">II", 0x801, count) + labels)
    print(f"wrote {count} samples to {out}")


if __name__ == "__main__":
    main()
