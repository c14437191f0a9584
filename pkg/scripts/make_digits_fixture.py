"""Write the 8x8 handwritten-digits fixture as IDX files.

The source is scikit-learn's bundled copy of the UCI optical digits set
(1797 images, 17 grey levels).  Rows are shuffled with a fixed seed and split
1400/397; grey levels 0..16 are rescaled to 0..255 bytes.

    python3 scripts/make_digits_fixture.py [--out data/digits]
"""
import argparse
from pathlib import Path

import numpy as np
from sklearn.datasets import load_digits

from apartlab.data import write_idx

N_TRAIN = 1400


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default="data/digits")
    out = Path(parser.parse_args().out)
    out.mkdir(parents=True, exist_ok=True)

    digits = load_digits()
    order = np.random.default_rng(0).permutation(len(digits.target))
    images = np.rint(digits.images[order] * 255.0 / 16.0).astype(np.uint8)
    labels = digits.target[order].astype(np.uint8)
    for split, rows in (("train", slice(None, N_TRAIN)), ("test", slice(N_TRAIN, None))):
        write_idx(out / f"{split}-images.idx", images[rows])
        write_idx(out / f"{split}-labels.idx", labels[rows])
        print(f"{split}: {len(labels[rows])} images -> {out}")


if __name__ == "__main__":
    main()
