"""Why the motion rule matters: a brighter distractor versus the tracked object.

Run from the repository root:  python3 demos/motion_vs_maximum.py
"""

import numpy as np

from f2net.center import motion_predict, select_center, topk_nms


def bump(x, y, peak, size=16):
    yy, xx = np.mgrid[0:size, 0:size]
    return peak * np.exp(-((xx - x) ** 2 + (yy - y) ** 2) / 4.0)


def main():
    heat = np.maximum(bump(12, 12, 0.9), bump(3, 4, 0.7))
    history = [(0.0, 1.0), (1.0, 2.0), (2.0, 3.0)]  # object moving down-right by (1, 1)

    candidates = topk_nms(heat, k=5)
    guess = motion_predict(history, n=10)
    print("NMS candidates:", [(c, round(s, 3)) for c, s in candidates])
    print("motion guess for the next frame:", guess)
    print("maximum rule picks:", select_center(candidates, guess, "maximum"))
    print("motion rule picks: ", select_center(candidates, guess, "motion"))


if __name__ == "__main__":
    main()
