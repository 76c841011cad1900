"""Regenerate the bundled 8x8 digits IDX files from scikit-learn's copy.

Pixel intensities 0..16 are rescaled to bytes 0..255.

    python scripts/make_digits_idx.py
"""

import numpy as np
from sklearn.datasets import load_digits

from robustft.data_io import DIGITS_IMAGES, DIGITS_LABELS, ImageDataset, save_idx


def main():
    digits = load_digits()
    pixels = np.rint(digits.images * 255.0 / 16.0) / 255.0
    data = ImageDataset(pixels[:, None], digits.target, 10)
    DIGITS_IMAGES.parent.mkdir(parents=True, exist_ok=True)
    save_idx(data, DIGITS_IMAGES, DIGITS_LABELS)
    print(f"wrote {len(data)} images to {DIGITS_IMAGES.parent}")


if __name__ == "__main__":
    main()
