"""Independent reference implementations used as test oracles.

Everything here is written with explicit scalar loops over plain Python /
numpy scalars so it shares no code path with the vectorised library.
"""

import math

import numpy as np


def conv2d_loops(x, w, b, stride, padding):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, o, oh, ow), dtype=np.float64)
    for bi in range(n):
        for oc in range(o):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0 if b is None else float(b[oc])
                    for ic in range(c):
                        for di in range(kh):
                            for dj in range(kw):
                                y = i * stride + di - padding
                                xx = j * stride + dj - padding
                                if 0 <= y < h and 0 <= xx < wd:
                                    acc += float(x[bi, ic, y, xx]) * float(w[oc, ic, di, dj])
                    out[bi, oc, i, j] = acc
    return out


def matmul_loops(x, w, b):
    n, f = x.shape
    k = w.shape[0]
    out = np.zeros((n, k))
    for i in range(n):
        for j in range(k):
            acc = float(b[j])
            for t in range(f):
                acc += float(x[i, t]) * float(w[j, t])
            out[i, j] = acc
    return out


def batchnorm_train_scalar(x, gamma, beta, eps):
    n, c, h, w = x.shape
    out = np.zeros(x.shape)
    for ch in range(c):
        vals = [float(x[i, ch, a, b]) for i in range(n) for a in range(h) for b in range(w)]
        mean = sum(vals) / len(vals)
        var = sum((v - mean) ** 2 for v in vals) / len(vals)
        for i in range(n):
            for a in range(h):
                for b in range(w):
                    out[i, ch, a, b] = (float(x[i, ch, a, b]) - mean) / math.sqrt(var + eps) * gamma[ch] + beta[ch]
    return out


def softmax_xent_scalar(logits, labels):
    total = 0.0
    for row, label in zip(logits, labels):
        exps = [math.exp(float(v)) for v in row]
        total += -math.log(exps[label] / sum(exps))
    return total / len(labels)


def bilinear_scalar(img, out_h, out_w):
    """Half-pixel-centred bilinear resize of a 2-D list, clamping at borders."""
    h, w = len(img), len(img[0])
    out = []
    for i in range(out_h):
        sy = min(max((i + 0.5) * h / out_h - 0.5, 0.0), h - 1)
        y0 = int(math.floor(sy))
        y1 = min(y0 + 1, h - 1)
        fy = sy - y0
        row = []
        for j in range(out_w):
            sx = min(max((j + 0.5) * w / out_w - 0.5, 0.0), w - 1)
            x0 = int(math.floor(sx))
            x1 = min(x0 + 1, w - 1)
            fx = sx - x0
            top = img[y0][x0] * (1 - fx) + img[y0][x1] * fx
            bottom = img[y1][x0] * (1 - fx) + img[y1][x1] * fx
            row.append(top * (1 - fy) + bottom * fy)
        out.append(row)
    return out


def resnet34_parameter_count(num_classes, in_channels=3):
    """Count ResNet-34 parameters straight from the layer table.

    conv: out*in*kh*kw (no bias); batchnorm: 2*C; fc: K*F + K.
    Stages: 3, 4, 6, 3 basic blocks of widths 64, 128, 256, 512; the first
    block of stages 2-4 has a 1x1 projection conv + batchnorm.
    """
    total = 64 * in_channels * 7 * 7 + 2 * 64
    prev = 64
    for blocks, width in ((3, 64), (4, 128), (6, 256), (3, 512)):
        for b in range(blocks):
            total += width * prev * 9 + 2 * width
            total += width * width * 9 + 2 * width
            if prev != width:
                total += width * prev * 1 + 2 * width
            prev = width
    total += num_classes * 512 + num_classes
    return total


def one_vs_rest_scalar(matrix, k):
    """(precision, recall, specificity, f1) in percent from nested lists."""
    n = len(matrix)
    tp = fp = fn = tn = 0
    for i in range(n):
        for j in range(n):
            v = matrix[i][j]
            if i == k and j == k:
                tp += v
            elif j == k:
                fp += v
            elif i == k:
                fn += v
            else:
                tn += v
    p = 100.0 * tp / (tp + fp) if tp + fp else float("nan")
    r = 100.0 * tp / (tp + fn) if tp + fn else float("nan")
    s = 100.0 * tn / (tn + fp) if tn + fp else float("nan")
    f = 2 * p * r / (p + r) if (tp + fp and tp + fn and p + r) else float("nan")
    return p, r, s, f


def central_difference(fn, arrays, h=1e-4):
    """Numerical gradient of scalar ``fn(*arrays)`` w.r.t. every array."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            plus = fn(*arrays)
            flat[i] = orig - h
            minus = fn(*arrays)
            flat[i] = orig
            gflat[i] = (plus - minus) / (2 * h)
        grads.append(g)
    return grads


def conv2d_shift_add(x, w, b, stride, padding):
    """Convolution as a sum of shifted, strided slices of the padded input.

    One kernel tap at a time, accumulated elementwise in a fixed order; fast
    enough for exhaustive sweeps and independent of any im2col layout.
    """
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    xp = np.pad(np.asarray(x, np.float64), ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((n, o, oh, ow))
    if b is not None:
        out += np.asarray(b, np.float64)[None, :, None, None]
    for oc in range(o):
        for ic in range(c):
            for di in range(kh):
                for dj in range(kw):
                    patch = xp[:, ic, di:di + stride * (oh - 1) + 1:stride, dj:dj + stride * (ow - 1) + 1:stride]
                    out[:, oc] += patch * float(w[oc, ic, di, dj])
    return out
