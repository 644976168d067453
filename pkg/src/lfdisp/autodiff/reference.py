"""Brute-force loop convolution used as an independent check on :func:`conv2d`."""
import numpy as np


def conv2d_reference(x: np.ndarray, weight: np.ndarray, bias=None, stride: int = 1,
                     padding: int = 0, dilation: int = 1) -> np.ndarray:
    n, c, h, w = x.shape
    o, ci, k, _ = weight.shape
    assert ci == c
    k_eff = k + (k - 1) * (dilation - 1)
    ho = (h + 2 * padding - k_eff) // stride + 1
    wo = (w + 2 * padding - k_eff) // stride + 1
    out = np.zeros((n, o, ho, wo), dtype=np.float64)
    for b in range(n):
        for oc in range(o):
            for oy in range(ho):
                for ox in range(wo):
                    acc = 0.0 if bias is None else float(bias[oc])
                    for ic in range(c):
                        for i in range(k):
                            iy = oy * stride + i * dilation - padding
                            if iy < 0 or iy >= h:
                                continue
                            for j in range(k):
                                ix = ox * stride + j * dilation - padding
                                if 0 <= ix < w:
                                    acc += float(x[b, ic, iy, ix]) * float(weight[oc, ic, i, j])
                    out[b, oc, oy, ox] = acc
    return out
