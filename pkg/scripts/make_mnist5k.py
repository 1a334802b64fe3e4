"""Rebuild data/mnist5k-*-idx*-ubyte.gz from the 5000-image MNIST sample that
ships with mlxtend (mlxtend/data/data/mnist_5k.csv.gz: 784 pixel columns in
0..255 followed by the label).

    pip download mlxtend==0.24.0 --no-deps -d /tmp/wheel
    python scripts/make_mnist5k.py /tmp/wheel/mlxtend-0.24.0-py3-none-any.whl

A plain or gzipped copy of the CSV is accepted as well.
"""

import argparse
import gzip
import io
import zipfile
from pathlib import Path

import numpy as np

from exvae.data import LabeledDataset, write_idx

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def read_csv_bytes(path: Path) -> bytes:
    raw = path.read_bytes()
    if path.suffix == ".whl":
        raw = zipfile.ZipFile(path).read(MEMBER)
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("source", type=Path, help="mlxtend wheel, mnist_5k.csv or mnist_5k.csv.gz")
    ap.add_argument("--out", type=Path, default=Path(__file__).resolve().parents[1] / "data")
    args = ap.parse_args(argv)
    table = np.loadtxt(io.BytesIO(read_csv_bytes(args.source)), delimiter=",")
    if table.shape != (5000, 785):
        raise SystemExit(f"unexpected table shape {table.shape}")
    ds = LabeledDataset(table[:, :784] / 255.0, table[:, 784].astype(np.int64), "all", (28, 28))
    args.out.mkdir(parents=True, exist_ok=True)
    write_idx(ds, args.out / "mnist5k-images-idx3-ubyte.gz", args.out / "mnist5k-labels-idx1-ubyte.gz")
    print(f"wrote {len(ds)} images to {args.out}")


if __name__ == "__main__":
    main()
