#!/usr/bin/env python3
"""Download the four MNIST IDX files into data/mnist/ (or a given directory).

Needs network access; the package itself never downloads anything. Files
are decompressed and verified against the IDX magic numbers.
"""

import argparse
import gzip
import struct
import sys
import urllib.request
from pathlib import Path

MIRRORS = (
    "https://ossci-datasets.s3.amazonaws.com/mnist/",
    "https://storage.googleapis.com/cvdf-datasets/mnist/",
)
FILES = {
    "train-images-idx3-ubyte": 2051,
    "train-labels-idx1-ubyte": 2049,
    "t10k-images-idx3-ubyte": 2051,
    "t10k-labels-idx1-ubyte": 2049,
}


def fetch(name: str, dest: Path) -> None:
    last_error = None
    for mirror in MIRRORS:
        url = f"{mirror}{name}.gz"
        try:
            print(f"fetching {url}")
            with urllib.request.urlopen(url, timeout=60) as response:
                payload = gzip.decompress(response.read())
            (magic,) = struct.unpack(">I", payload[:4])
            if magic != FILES[name]:
                raise ValueError(f"{name}: magic 0x{magic:08x} != 0x{FILES[name]:08x}")
            dest.write_bytes(payload)
            print(f"wrote {dest} ({len(payload):,} bytes)")
            return
        except Exception as exc:  # try the next mirror
            last_error = exc
            print(f"  failed: {exc}")
    raise SystemExit(f"could not fetch {name}: {last_error}")


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--dest", default="data/mnist", help="target directory")
    args = parser.parse_args()
    dest = Path(args.dest)
    dest.mkdir(parents=True, exist_ok=True)
    for name in FILES:
        target = dest / name
        if target.is_file():
            print(f"already present: {target}")
            continue
        fetch(name, target)
    print("done")
    return 0


if __name__ == "__main__":
    sys.exit(main())
