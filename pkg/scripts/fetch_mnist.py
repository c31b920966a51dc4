#!/usr/bin/env python3
"""Download the four gzipped MNIST IDX files into data/mnist."""

import argparse
import sys
import urllib.request
from pathlib import Path

MIRRORS = (
    "https://ossci-datasets.s3.amazonaws.com/mnist/",
    "https://storage.googleapis.com/cvdf-datasets/mnist/",
)
FILES = (
    "train-images-idx3-ubyte.gz",
    "train-labels-idx1-ubyte.gz",
    "t10k-images-idx3-ubyte.gz",
    "t10k-labels-idx1-ubyte.gz",
)


def fetch(name: str, out_dir: Path) -> None:
    dest = out_dir / name
    if dest.exists():
        print(f"{dest} already present, skipping")
        return
    for base in MIRRORS:
        url = base + name
        try:
            print(f"fetching {url}")
            with urllib.request.urlopen(url, timeout=60) as resp:
                dest.write_bytes(resp.read())
            return
        except OSError as exc:
            print(f"  failed: {exc}", file=sys.stderr)
    raise SystemExit(f"could not download {name} from any mirror")


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", type=Path, default=Path("data/mnist"))
    args = parser.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)
    for name in FILES:
        fetch(name, args.out)

    from vflsim.data import load_mnist_idx

    images, _ = load_mnist_idx(args.out / FILES[0], args.out / FILES[1])
    print(f"ok: {images.shape[0]} training images under {args.out}")


if __name__ == "__main__":
    main()
