#!/usr/bin/env python3
"""Convert the per-digit JSON files of the `mnist` npm package to IDX files.

Fetch the package with `npm pack mnist@1.1.0` and extract it; the digit
files live under `package/src/digits/{0..9}.json`, each holding a flat list
of 784-pixel images scaled to [0, 1]. The first `--test-per-class` images of
every digit go to the test split, the rest to the training split. Output
uses the standard MNIST file names so the trainer can read the directory.
"""

import argparse
import json
import struct
from pathlib import Path

SIDE = 28
AREA = SIDE * SIDE


def write_images(path: Path, images: list[bytes]) -> None:
    with path.open("wb") as f:
        f.write(struct.pack(">IIII", 0x803, len(images), SIDE, SIDE))
        for img in images:
            f.write(img)


def write_labels(path: Path, labels: list[int]) -> None:
    with path.open("wb") as f:
        f.write(struct.pack(">II", 0x801, len(labels)))
        f.write(bytes(labels))


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("digits_dir", type=Path, help="directory with 0.json .. 9.json")
    ap.add_argument("out_dir", type=Path)
    ap.add_argument("--test-per-class", type=int, default=200)
    args = ap.parse_args()

    splits = {"train": ([], []), "test": ([], [])}
    for digit in range(10):
        flat = json.loads((args.digits_dir / f"{digit}.json").read_text())["data"]
        if len(flat) % AREA:
            raise SystemExit(f"{digit}.json: {len(flat)} values is not a whole number of images")
        for n in range(len(flat) // AREA):
            pixels = bytes(min(255, max(0, round(v * 255))) for v in flat[n * AREA:(n + 1) * AREA])
            images, labels = splits["test" if n < args.test_per_class else "train"]
            images.append(pixels)
            labels.append(digit)

    args.out_dir.mkdir(parents=True, exist_ok=True)
    for split, prefix in (("train", "train"), ("test", "t10k")):
        images, labels = splits[split]
        write_images(args.out_dir / f"{prefix}-images-idx3-ubyte", images)
        write_labels(args.out_dir / f"{prefix}-labels-idx1-ubyte", labels)
        print(f"{split}: {len(images)} images")


if __name__ == "__main__":
    main()
