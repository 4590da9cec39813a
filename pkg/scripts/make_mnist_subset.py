"""Build IDX-format MNIST train/test files from a CSV subset.

The CSV holds one image per row: 784 pixel values (0-255) followed by the
label.  It may be gzip-compressed, or read from inside a zip/wheel archive
with ``--member``.  Rows are shuffled with a fixed seed before the split so
both splits cover every class.

    python3 scripts/make_mnist_subset.py mlxtend-0.24.0-py3-none-any.whl \
        --member mlxtend/data/data/mnist_5k.csv.gz --out data/mnist
"""
import argparse
import gzip
import io
import zipfile
from pathlib import Path

import numpy as np

from trunclab.tasks import MNIST_FILES, write_idx_images, write_idx_labels


def read_csv(source, member=None) -> np.ndarray:
    if member:
        with zipfile.ZipFile(source) as zf:
            raw = zf.read(member)
    else:
        raw = Path(source).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return np.loadtxt(io.BytesIO(raw), delimiter=",", dtype=np.int64)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("source")
    ap.add_argument("--member", default=None, help="path inside a zip archive")
    ap.add_argument("--out", default="data/mnist")
    ap.add_argument("--n-test", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    rows = read_csv(args.source, args.member)
    images = rows[:, :784].astype(np.uint8).reshape(-1, 28, 28)
    labels = rows[:, 784].astype(np.uint8)
    order = np.random.default_rng(args.seed).permutation(len(labels))
    images, labels = images[order], labels[order]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n_train = len(labels) - args.n_test
    for split, sl in (("train", slice(0, n_train)), ("test", slice(n_train, None))):
        img_name, lab_name = MNIST_FILES[split]
        write_idx_images(out / img_name, images[sl])
        write_idx_labels(out / lab_name, labels[sl])
        print(f"{split}: {len(labels[sl])} examples -> {out}")


if __name__ == "__main__":
    main()
