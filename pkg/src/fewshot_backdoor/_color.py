"""Vectorized RGB <-> HSV conversion (hexcone model).

Inputs are H x W x 3 arrays with values in [0, 1]. Kept dependency-free so
the hue/saturation transforms are reproducible from the formulas below:

    V = max(R, G, B)
    C = V - min(R, G, B)
    S = C / V  (0 where V = 0)
    H = 1/6 * (((G - B) / C) mod 6)   if V = R
        1/6 * ((B - R) / C + 2)       if V = G
        1/6 * ((R - G) / C + 4)       if V = B
"""

import numpy as np


def rgb_to_hsv(rgb):
    rgb = np.asarray(rgb, dtype=np.float64)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    v = rgb.max(axis=-1)
    c = v - rgb.min(axis=-1)
    s = np.where(v > 0, c / np.where(v > 0, v, 1.0), 0.0)

    safe_c = np.where(c > 0, c, 1.0)
    h_r = np.mod((g - b) / safe_c, 6.0)
    h_g = (b - r) / safe_c + 2.0
    h_b = (r - g) / safe_c + 4.0
    h = np.select([c == 0, v == r, v == g], [0.0, h_r, h_g], default=h_b) / 6.0
    return np.stack([h, s, v], axis=-1)


def hsv_to_rgb(hsv):
    hsv = np.asarray(hsv, dtype=np.float64)
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    h6 = np.mod(h, 1.0) * 6.0
    i = np.floor(h6).astype(int) % 6
    f = h6 - np.floor(h6)
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))

    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b], axis=-1)
