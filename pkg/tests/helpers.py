import numpy as np

from stvsr import tensor as T


def t64(arr, grad=True):
    return T.Tensor(np.asarray(arr, dtype=np.float64), requires_grad=grad)


def project(out, weights):
    """Scalar random projection of ``out`` so every entry gets a distinct weight."""
    return T.sum(T.mul(out, T.Tensor(weights)))


def loop_conv(x, weight, bias=None, padding=0):
    """Direct-summation cross-correlation of a C x H x W array."""
    c_out, c_in, k, _ = weight.shape
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    ho, wo = xp.shape[1] - k + 1, xp.shape[2] - k + 1
    out = np.zeros((c_out, ho, wo))
    for o in range(c_out):
        for y in range(ho):
            for xx in range(wo):
                out[o, y, xx] = np.sum(weight[o] * xp[:, y : y + k, xx : xx + k])
        if bias is not None:
            out[o] += bias[o]
    return out


def loop_deform(x, offsets, weight, bias):
    """Straight-line reference: explicit per-tap bilinear sampling with zero border."""
    c, h, w = x.shape
    c_out, _, k, _ = weight.shape

    def sample(ch, py, px):
        y0, x0 = int(np.floor(py)), int(np.floor(px))
        total = 0.0
        for yy in (y0, y0 + 1):
            for xx in (x0, x0 + 1):
                if 0 <= yy < h and 0 <= xx < w:
                    total += (1 - abs(py - yy)) * (1 - abs(px - xx)) * x[ch, yy, xx]
        return total

    out = np.zeros((c_out, h, w))
    for o in range(c_out):
        for y in range(h):
            for xx in range(w):
                acc = bias[o]
                for tap in range(k * k):
                    ry, rx = tap // k - k // 2, tap % k - k // 2
                    py = y + ry + offsets[2 * tap, y, xx]
                    px = xx + rx + offsets[2 * tap + 1, y, xx]
                    for ch in range(c):
                        acc += weight[o, ch, tap // k, tap % k] * sample(ch, py, px)
                out[o, y, xx] = acc
    return out
