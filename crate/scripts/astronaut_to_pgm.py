#!/usr/bin/env python3
# SPDX-License-Identifier: Apache-2.0
"""Write the scikit-image astronaut photo as an 8-bit grayscale PGM (P5).

Luminance weights 0.299/0.587/0.114, rounded to the nearest level.
"""
import argparse

import numpy as np
from skimage import data


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("out", help="output .pgm path")
    args = ap.parse_args()
    rgb = data.astronaut().astype(np.float64)
    gray = rgb @ np.array([0.299, 0.587, 0.114])
    img = np.clip(np.rint(gray), 0, 255).astype(np.uint8)
    h, w = img.shape
    with open(args.out, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(img.tobytes())


if __name__ == "__main__":
    main()
