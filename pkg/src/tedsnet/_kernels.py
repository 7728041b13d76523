"""Hot inner loops, each with a numba and a pure-numpy implementation.

The numba path is used when numba imports cleanly and the environment
variable ``TEDSNET_DISABLE_NUMBA`` is unset (or ``0``).  Both paths compute
the same quantities; scatter-adds may differ in the last bit because the
summation order differs, so determinism is guaranteed per backend only.
"""

from __future__ import annotations

import os

import numpy as np

_DISABLED = os.environ.get("TEDSNET_DISABLE_NUMBA", "0") not in ("", "0")

try:
    if _DISABLED:
        raise ImportError
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised via the env flag
    HAVE_NUMBA = False


def backend() -> str:
    return "numba" if HAVE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# bilinear sampling with clamp-to-edge borders
# ---------------------------------------------------------------------------


def _np_corners(rows, cols, H, W):
    r = np.clip(rows, 0.0, H - 1.0)
    c = np.clip(cols, 0.0, W - 1.0)
    r0 = np.floor(r).astype(np.int64)
    c0 = np.floor(c).astype(np.int64)
    r1 = np.minimum(r0 + 1, H - 1)
    c1 = np.minimum(c0 + 1, W - 1)
    return r0, r1, r - r0, c0, c1, c - c0


def _np_sample(img, rows, cols):
    N, C, H, W = img.shape
    r0, r1, wr, c0, c1, wc = _np_corners(rows, cols, H, W)
    n = np.arange(N)[:, None, None]
    out = np.empty((N, C) + rows.shape[1:])
    for ch in range(C):
        plane = img[:, ch]
        v00 = plane[n, r0, c0]
        v01 = plane[n, r0, c1]
        v10 = plane[n, r1, c0]
        v11 = plane[n, r1, c1]
        out[:, ch] = (1 - wr) * ((1 - wc) * v00 + wc * v01) + wr * ((1 - wc) * v10 + wc * v11)
    return out


def _np_sample_grad(img, rows, cols, gout):
    N, C, H, W = img.shape
    r0, r1, wr, c0, c1, wc = _np_corners(rows, cols, H, W)
    # clip has zero derivative outside the open interior
    inside_r = (rows > 0.0) & (rows < H - 1.0)
    inside_c = (cols > 0.0) & (cols < W - 1.0)
    n = np.arange(N)[:, None, None]
    base = (n * H) * W
    i00 = (base + r0 * W + c0).ravel()
    i01 = (base + r0 * W + c1).ravel()
    i10 = (base + r1 * W + c0).ravel()
    i11 = (base + r1 * W + c1).ravel()
    w00 = ((1 - wr) * (1 - wc)).ravel()
    w01 = ((1 - wr) * wc).ravel()
    w10 = (wr * (1 - wc)).ravel()
    w11 = (wr * wc).ravel()
    gimg = np.zeros_like(img)
    grows = np.zeros(rows.shape)
    gcols = np.zeros(cols.shape)
    size = N * H * W
    for ch in range(C):
        plane = img[:, ch]
        g = gout[:, ch]
        gf = g.ravel()
        acc = np.bincount(i00, w00 * gf, size)
        acc += np.bincount(i01, w01 * gf, size)
        acc += np.bincount(i10, w10 * gf, size)
        acc += np.bincount(i11, w11 * gf, size)
        gimg[:, ch] = acc.reshape(N, H, W)
        v00 = plane[n, r0, c0]
        v01 = plane[n, r0, c1]
        v10 = plane[n, r1, c0]
        v11 = plane[n, r1, c1]
        grows += g * ((1 - wc) * (v10 - v00) + wc * (v11 - v01))
        gcols += g * ((1 - wr) * (v01 - v00) + wr * (v11 - v10))
    grows *= inside_r
    gcols *= inside_c
    return gimg, grows, gcols


if HAVE_NUMBA:

    @njit(cache=True)
    def _nb_sample(img, rows, cols):
        N, C, H, W = img.shape
        Ho, Wo = rows.shape[1], rows.shape[2]
        out = np.empty((N, C, Ho, Wo))
        for n in range(N):
            for i in range(Ho):
                for j in range(Wo):
                    r = min(max(rows[n, i, j], 0.0), H - 1.0)
                    c = min(max(cols[n, i, j], 0.0), W - 1.0)
                    r0 = int(np.floor(r))
                    c0 = int(np.floor(c))
                    r1 = min(r0 + 1, H - 1)
                    c1 = min(c0 + 1, W - 1)
                    wr = r - r0
                    wc = c - c0
                    for ch in range(C):
                        out[n, ch, i, j] = (1 - wr) * (
                            (1 - wc) * img[n, ch, r0, c0] + wc * img[n, ch, r0, c1]
                        ) + wr * ((1 - wc) * img[n, ch, r1, c0] + wc * img[n, ch, r1, c1])
        return out

    @njit(cache=True)
    def _nb_sample_grad(img, rows, cols, gout):
        N, C, H, W = img.shape
        Ho, Wo = rows.shape[1], rows.shape[2]
        gimg = np.zeros_like(img)
        grows = np.zeros((N, Ho, Wo))
        gcols = np.zeros((N, Ho, Wo))
        for n in range(N):
            for i in range(Ho):
                for j in range(Wo):
                    rr = rows[n, i, j]
                    cc = cols[n, i, j]
                    r = min(max(rr, 0.0), H - 1.0)
                    c = min(max(cc, 0.0), W - 1.0)
                    r0 = int(np.floor(r))
                    c0 = int(np.floor(c))
                    r1 = min(r0 + 1, H - 1)
                    c1 = min(c0 + 1, W - 1)
                    wr = r - r0
                    wc = c - c0
                    gr = 0.0
                    gc = 0.0
                    for ch in range(C):
                        g = gout[n, ch, i, j]
                        v00 = img[n, ch, r0, c0]
                        v01 = img[n, ch, r0, c1]
                        v10 = img[n, ch, r1, c0]
                        v11 = img[n, ch, r1, c1]
                        gimg[n, ch, r0, c0] += (1 - wr) * (1 - wc) * g
                        gimg[n, ch, r0, c1] += (1 - wr) * wc * g
                        gimg[n, ch, r1, c0] += wr * (1 - wc) * g
                        gimg[n, ch, r1, c1] += wr * wc * g
                        gr += g * ((1 - wc) * (v10 - v00) + wc * (v11 - v01))
                        gc += g * ((1 - wr) * (v01 - v00) + wr * (v11 - v10))
                    if 0.0 < rr < H - 1.0:
                        grows[n, i, j] = gr
                    if 0.0 < cc < W - 1.0:
                        gcols[n, i, j] = gc
        return gimg, grows, gcols


def bilinear_sample(img: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Sample ``img`` (N,C,H,W) at absolute positions ``rows``/``cols`` (N,Ho,Wo)."""
    img = np.ascontiguousarray(img, dtype=np.float64)
    rows = np.ascontiguousarray(rows, dtype=np.float64)
    cols = np.ascontiguousarray(cols, dtype=np.float64)
    if HAVE_NUMBA:
        return _nb_sample(img, rows, cols)
    return _np_sample(img, rows, cols)


def bilinear_sample_grad(img, rows, cols, gout):
    """Vector-Jacobian product of :func:`bilinear_sample` for image and both coordinates."""
    img = np.ascontiguousarray(img, dtype=np.float64)
    rows = np.ascontiguousarray(rows, dtype=np.float64)
    cols = np.ascontiguousarray(cols, dtype=np.float64)
    gout = np.ascontiguousarray(gout, dtype=np.float64)
    if HAVE_NUMBA:
        return _nb_sample_grad(img, rows, cols, gout)
    return _np_sample_grad(img, rows, cols, gout)


# ---------------------------------------------------------------------------
# 2x2 max pooling
# ---------------------------------------------------------------------------


def _np_maxpool(x):
    N, C, H, W = x.shape
    win = x.reshape(N, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(N, C, H // 2, W // 2, 4)
    # argmax returns the first maximum, i.e. row-major tie break inside the window
    arg = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return out, arg


if HAVE_NUMBA:

    @njit(cache=True)
    def _nb_maxpool(x):
        N, C, H, W = x.shape
        Ho, Wo = H // 2, W // 2
        out = np.empty((N, C, Ho, Wo))
        arg = np.empty((N, C, Ho, Wo), dtype=np.int64)
        for n in range(N):
            for ch in range(C):
                for i in range(Ho):
                    for j in range(Wo):
                        best = x[n, ch, 2 * i, 2 * j]
                        k = 0
                        for q in range(1, 4):
                            v = x[n, ch, 2 * i + q // 2, 2 * j + q % 2]
                            if v > best:
                                best = v
                                k = q
                        out[n, ch, i, j] = best
                        arg[n, ch, i, j] = k
        return out, arg


def maxpool2x2(x: np.ndarray):
    """Return (pooled, argmax-in-window) for a (N,C,H,W) array with even H, W."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    if HAVE_NUMBA:
        return _nb_maxpool(x)
    return _np_maxpool(x)


def maxpool2x2_grad(arg: np.ndarray, gout: np.ndarray) -> np.ndarray:
    N, C, Ho, Wo = gout.shape
    g = np.zeros((N, C, Ho, Wo, 4))
    np.put_along_axis(g, arg[..., None], gout[..., None], axis=-1)
    g = g.reshape(N, C, Ho, Wo, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return g.reshape(N, C, 2 * Ho, 2 * Wo)


# ---------------------------------------------------------------------------
# connected-component labelling
# ---------------------------------------------------------------------------


def _np_label(mask, connectivity):
    # min-label propagation; converges in at most (#pixels) sweeps, far fewer in practice
    H, W = mask.shape
    big = H * W + 1
    lab = np.where(mask, np.arange(H * W).reshape(H, W), big)
    if connectivity == 4:
        shifts = [(-1, 0), (1, 0), (0, -1), (0, 1)]
    else:
        shifts = [(dr, dc) for dr in (-1, 0, 1) for dc in (-1, 0, 1) if dr or dc]
    while True:
        padded = np.pad(lab, 1, constant_values=big)
        best = lab.copy()
        for dr, dc in shifts:
            best = np.minimum(best, padded[1 + dr : 1 + dr + H, 1 + dc : 1 + dc + W])
        best = np.where(mask, best, big)
        if np.array_equal(best, lab):
            break
        lab = best
    roots = np.unique(lab[mask])
    out = np.zeros((H, W), dtype=np.int64)
    out[mask] = np.searchsorted(roots, lab[mask]) + 1
    return out, len(roots)


if HAVE_NUMBA:

    @njit(cache=True)
    def _find(parent, i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    @njit(cache=True)
    def _nb_label(mask, connectivity):
        H, W = mask.shape
        parent = np.arange(H * W)
        for r in range(H):
            for c in range(W):
                if not mask[r, c]:
                    continue
                i = r * W + c
                # already-visited neighbours in raster order
                for dr, dc in ((-1, 0), (0, -1), (-1, -1), (-1, 1)):
                    if connectivity == 4 and dr != 0 and dc != 0:
                        continue
                    rr = r + dr
                    cc = c + dc
                    if rr < 0 or cc < 0 or cc >= W:
                        continue
                    if mask[rr, cc]:
                        a = _find(parent, i)
                        b = _find(parent, rr * W + cc)
                        if a != b:
                            if a < b:
                                parent[b] = a
                            else:
                                parent[a] = b
        out = np.zeros((H, W), dtype=np.int64)
        remap = np.zeros(H * W, dtype=np.int64)
        count = 0
        for r in range(H):
            for c in range(W):
                if mask[r, c]:
                    root = _find(parent, r * W + c)
                    if remap[root] == 0:
                        count += 1
                        remap[root] = count
                    out[r, c] = remap[root]
        return out, count


def label(mask: np.ndarray, connectivity: int = 4):
    """Label foreground components; labels are 1..count in raster order of first pixel."""
    if connectivity not in (4, 8):
        raise ValueError(f"connectivity must be 4 or 8, got {connectivity}")
    mask = np.ascontiguousarray(mask, dtype=np.bool_)
    if mask.size == 0:
        return np.zeros(mask.shape, dtype=np.int64), 0
    if HAVE_NUMBA:
        return _nb_label(mask, connectivity)
    return _np_label(mask, connectivity)


# ---------------------------------------------------------------------------
# brute-force directed Hausdorff distance
# ---------------------------------------------------------------------------


def _np_directed_hausdorff(a, b):
    worst = 0.0
    for start in range(0, len(a), 512):
        chunk = a[start : start + 512]
        d2 = ((chunk[:, None, :] - b[None, :, :]) ** 2).sum(-1)
        worst = max(worst, float(d2.min(axis=1).max()))
    return np.sqrt(worst)


if HAVE_NUMBA:

    @njit(cache=True)
    def _nb_directed_hausdorff(a, b):
        worst = 0.0
        for i in range(a.shape[0]):
            best = np.inf
            for j in range(b.shape[0]):
                dr = a[i, 0] - b[j, 0]
                dc = a[i, 1] - b[j, 1]
                d = dr * dr + dc * dc
                if d < best:
                    best = d
                    if best <= worst:
                        break  # cannot raise the max any more
            if best > worst:
                worst = best
        return np.sqrt(worst)


def directed_hausdorff(a: np.ndarray, b: np.ndarray) -> float:
    """max over points of ``a`` of the distance to the nearest point of ``b``."""
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    if HAVE_NUMBA:
        return float(_nb_directed_hausdorff(a, b))
    return float(_np_directed_hausdorff(a, b))
