"""Write the 5000-image MNIST subset shipped inside mlxtend as a gzipped IDX pair.

    python scripts/make_mnist_idx.py [--out data]

Needs mlxtend importable (``pip install mlxtend``) or a path to its wheel via
``--wheel``. Output: ``mnist5k-images-idx3-ubyte.gz`` and
``mnist5k-labels-idx1-ubyte.gz``.
"""
import argparse
import gzip
import importlib.util
import io
import struct
import zipfile
from pathlib import Path

import numpy as np

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def read_csv_gz(args) -> bytes:
    if args.wheel:
        with zipfile.ZipFile(args.wheel) as zf:
            return zf.read(MEMBER)
    spec = importlib.util.find_spec("mlxtend")
    if spec is None or spec.origin is None:
        raise SystemExit("mlxtend is not installed; pip install mlxtend or pass --wheel")
    return (Path(spec.origin).parent / "data" / "data" / "mnist_5k.csv.gz").read_bytes()


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="data")
    ap.add_argument("--wheel", help="path to an mlxtend wheel")
    args = ap.parse_args()

    table = np.loadtxt(io.BytesIO(gzip.decompress(read_csv_gz(args))), delimiter=",")
    pixels = table[:, :-1].astype(np.uint8)
    labels = table[:, -1].astype(np.uint8)
    assert pixels.shape[1] == 784

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n = pixels.shape[0]
    # mtime=0 keeps the gzip bytes reproducible
    with gzip.GzipFile(out / "mnist5k-images-idx3-ubyte.gz", "wb", mtime=0) as fh:
        fh.write(struct.pack(">IIII", 0x803, n, 28, 28) + pixels.tobytes())
    with gzip.GzipFile(out / "mnist5k-labels-idx1-ubyte.gz", "wb", mtime=0) as fh:
        fh.write(struct.pack(">II", 0x801, n) + labels.tobytes())
    print(f"wrote {n} images to {out}/ (class counts {np.bincount(labels).tolist()})")


if __name__ == "__main__":
    main()
