"""Write the 5,000-digit MNIST sample bundled with mlxtend as IDX files.

    python scripts/export_mnist_subset.py data/mnist5k

The sample holds 500 images per class drawn from the official MNIST
training set; it is enough for the desk-scale experiments.
"""

import sys
from pathlib import Path

import numpy as np

from logradial.datasets import LabeledImageSet, save_idx


def export(out_dir) -> Path:
    from mlxtend.data import mnist_data

    x, y = mnist_data()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = LabeledImageSet(x.reshape(-1, 28, 28) / 255.0, y.astype(np.int64))
    save_idx(data, out / "train-images-idx3-ubyte", out / "train-labels-idx1-ubyte")
    return out


if __name__ == "__main__":
    target = sys.argv[1] if len(sys.argv) > 1 else "data/mnist5k"
    print(export(target))
