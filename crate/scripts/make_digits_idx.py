"""Write the 8x8 optical-digits set as IDX files (u8 pixels scaled to 0..255).

The first 1500 samples form the training split, the remaining 297 the test split.
"""
import struct
from pathlib import Path

import numpy as np
from sklearn.datasets import load_digits

out = Path(__file__).resolve().parent.parent / "data"
digits = load_digits()
images = np.clip(digits.images * 16.0, 0, 255).astype(np.uint8)
labels = digits.target.astype(np.uint8)


def write(prefix, imgs, labs):
    n, h, w = imgs.shape
    with open(out / f"{prefix}-images.idx", "wb") as f:
        f.write(struct.pack(">IIII", 2051, n, h, w))
        f.write(imgs.tobytes())
    with open(out / f"{prefix}-labels.idx", "wb") as f:
        f.write(struct.pack(">II", 2049, n))
        f.write(labs.tobytes())


write("digits8-train", images[:1500], labels[:1500])
write("digits8-test", images[1500:], labels[1500:])
