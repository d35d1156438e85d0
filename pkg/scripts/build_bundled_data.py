"""Rebuild the small datasets shipped in ``src/ekiml/datasets``.

Sources (both fetched through standard package managers):

* MNIST digits: the npm package ``mnist`` 1.1.0 (``npm pack mnist``), whose
  ``src/digits/<d>.json`` files hold 10,000 MNIST training images as
  ``pixel / 255`` rounded to three decimals.  Rounding ``v * 255`` recovers the
  original bytes exactly.  The images are shuffled with a fixed seed and split
  into 9,000 training and 1,000 test images stored as gzipped IDX files.
* Voting records: ``Orange/datasets/voting.tab`` from the Orange3 3.10.0
  source distribution (``pip download --no-deps --no-binary :all:
  Orange3==3.10.0``).  It carries the 435 UCI congressional voting records;
  empty cells become ``?`` in the UCI comma-separated layout.

Usage::

    python scripts/build_bundled_data.py --digits DIR --voting FILE
"""

import argparse
import json
from pathlib import Path

import numpy as np

from ekiml.data import file_checksum, write_idx_file
from ekiml.numerics import make_rng

OUT = Path(__file__).resolve().parents[1] / "src" / "ekiml" / "datasets"
SEED = 20190611
N_TEST = 1000


def build_mnist(digits_dir):
    images, labels = [], []
    for d in range(10):
        payload = json.loads((Path(digits_dir) / f"{d}.json").read_text())["data"]
        flat = np.asarray(payload, dtype=np.float64)
        if flat.size % 784:
            raise ValueError(f"{d}.json does not hold whole 28x28 images")
        pix = np.rint(flat * 255.0)
        if np.max(np.abs(pix - flat * 255.0)) > 0.2 or pix.min() < 0 or pix.max() > 255:
            raise ValueError(f"{d}.json values are not byte/255 roundings")
        images.append(pix.astype(np.uint8).reshape(-1, 28, 28))
        labels.append(np.full(images[-1].shape[0], d, dtype=np.uint8))
    images = np.concatenate(images)
    labels = np.concatenate(labels)
    perm = make_rng(SEED).permutation(labels.shape[0])
    images, labels = images[perm], labels[perm]
    parts = {
        "train": (images[N_TEST:], labels[N_TEST:]),
        "test": (images[:N_TEST], labels[:N_TEST]),
    }
    for split, (x, y) in parts.items():
        write_idx_file(OUT / f"mnist-subset-{split}-images-idx3-ubyte.gz", x)
        write_idx_file(OUT / f"mnist-subset-{split}-labels-idx1-ubyte.gz", y)


def build_voting(tab_path):
    lines = Path(tab_path).read_text().splitlines()
    rows = []
    for line in lines[3:]:
        if not line.strip():
            continue
        fields = line.split("\t")
        fields += [""] * (17 - len(fields))
        rows.append(",".join([fields[0]] + [f if f else "?" for f in fields[1:17]]))
    (OUT / "house-votes-84.data").write_text("\n".join(rows) + "\n")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--digits", required=True, help="directory with 0.json .. 9.json")
    ap.add_argument("--voting", required=True, help="path to voting.tab")
    args = ap.parse_args()
    OUT.mkdir(parents=True, exist_ok=True)
    build_mnist(args.digits)
    build_voting(args.voting)
    for f in sorted(OUT.iterdir()):
        if f.is_file() and f.name != "SHA256SUMS":
            print(f"{file_checksum(f).split(':')[1]}  {f.name}")


if __name__ == "__main__":
    main()
