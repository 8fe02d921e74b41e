"""Scalar-loop reference implementations used as independent test oracles."""
import math

import numpy as np


def attention_loop(q, k, v, mask=None):
    m, d = len(q), len(q[0])
    out = []
    for i in range(m):
        logits = []
        for j in range(len(k)):
            if mask is not None and not mask[i][j]:
                continue
            logits.append((j, sum(q[i][t] * k[j][t] for t in range(d)) / math.sqrt(d)))
        top = max(s for _, s in logits)
        ws = [(j, math.exp(s - top)) for j, s in logits]
        z = sum(w for _, w in ws)
        out.append([sum(w * v[j][c] for j, w in ws) / z for c in range(len(v[0]))])
    return np.array(out)


def bilinear_pixel(grid, oy, ox, out_h, out_w):
    h, w = len(grid), len(grid[0])

    def src(o, n_in, n_out):
        s = (o + 0.5) * n_in / n_out - 0.5
        return min(max(s, 0.0), n_in - 1)

    sy, sx = src(oy, h, out_h), src(ox, w, out_w)
    y0, x0 = int(math.floor(sy)), int(math.floor(sx))
    y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
    fy, fx = sy - y0, sx - x0
    top = grid[y0][x0] * (1 - fx) + grid[y0][x1] * fx
    bot = grid[y1][x0] * (1 - fx) + grid[y1][x1] * fx
    return top * (1 - fy) + bot * fy


def bilinear_grid(grid, out_h, out_w):
    """Per-pixel reference resize of an ``[h, w, c]`` array."""
    grid = np.asarray(grid)
    chans = [[[bilinear_pixel(grid[..., c].tolist(), y, x, out_h, out_w) for x in range(out_w)]
              for y in range(out_h)] for c in range(grid.shape[-1])]
    return np.moveaxis(np.array(chans), 0, -1)
