# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled 3x3 same-padding convolution kernels.

Each image is unfolded into a (C*9, H*W) column buffer and multiplied with
BLAS ``dgemm``. Loops run in a fixed order, so results are bit-reproducible.
"""
import numpy as np
cimport numpy as cnp
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()


cdef void _im2col(const double[:, :, ::1] x, double[:, ::1] col) noexcept nogil:
    cdef Py_ssize_t C = x.shape[0], H = x.shape[1], W = x.shape[2]
    cdef Py_ssize_t c, ky, kx, y, xx, row, sy, sx
    for c in range(C):
        for ky in range(3):
            for kx in range(3):
                row = c * 9 + ky * 3 + kx
                for y in range(H):
                    sy = y + ky - 1
                    if sy < 0 or sy >= H:
                        for xx in range(W):
                            col[row, y * W + xx] = 0.0
                        continue
                    for xx in range(W):
                        sx = xx + kx - 1
                        if sx < 0 or sx >= W:
                            col[row, y * W + xx] = 0.0
                        else:
                            col[row, y * W + xx] = x[c, sy, sx]


def conv3x3_forward(x, w, b):
    """y[n, o] = b[o] + sum_c w[o, c] * x[n, c] (3x3, stride 1, zero pad 1)."""
    cdef const double[:, :, :, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef const double[:, ::1] wm = np.ascontiguousarray(w, dtype=np.float64).reshape(w.shape[0], -1)
    cdef const double[::1] bv = np.ascontiguousarray(b, dtype=np.float64)
    cdef int N = xv.shape[0], C = xv.shape[1], H = xv.shape[2], W = xv.shape[3]
    cdef int O = wm.shape[0], K = wm.shape[1]
    if K != C * 9:
        raise ValueError("weight shape does not match input channels")
    out = np.empty((N, O, H * W), dtype=np.float64)
    cdef double[:, :, ::1] yv = out
    cdef double[:, ::1] col = np.empty((K, H * W), dtype=np.float64)
    cdef int m = H * W, n = O, k = K
    cdef double one = 1.0
    cdef Py_ssize_t i, o, p
    cdef char trans = b'N'
    with nogil:
        for i in range(N):
            _im2col(xv[i], col)
            for o in range(O):
                for p in range(m):
                    yv[i, o, p] = bv[o]
            # row-major Y(O, HW) += Wm(O, K) @ col(K, HW), expressed column-major
            dgemm(&trans, &trans, &m, &n, &k, &one, &col[0, 0], &m,
                  &wm[0, 0], &k, &one, &yv[i, 0, 0], &m)
    return out.reshape(N, O, H, W)


def conv3x3_weight_grad(x, dy):
    """dw[o, c, ky, kx] = sum over batch and pixels of dy[n, o] * shifted x[n, c]."""
    cdef const double[:, :, :, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef const double[:, :, :, ::1] dyv = np.ascontiguousarray(dy, dtype=np.float64)
    cdef int N = xv.shape[0], C = xv.shape[1], H = xv.shape[2], W = xv.shape[3]
    cdef int O = dyv.shape[1]
    if dyv.shape[0] != N or dyv.shape[2] != H or dyv.shape[3] != W:
        raise ValueError("gradient shape does not match input")
    cdef int K = C * 9, m = K, n = O, k = H * W
    dw = np.zeros((O, K), dtype=np.float64)
    cdef double[:, ::1] dwv = dw
    cdef double[:, ::1] col = np.empty((K, H * W), dtype=np.float64)
    cdef double one = 1.0
    cdef char tr = b'T', nt = b'N'
    cdef Py_ssize_t i
    with nogil:
        for i in range(N):
            _im2col(xv[i], col)
            # row-major dW(O, K) += dY(O, HW) @ col(K, HW)^T
            dgemm(&tr, &nt, &m, &n, &k, &one, &col[0, 0], &k,
                  &dyv[i, 0, 0, 0], &k, &one, &dwv[0, 0], &m)
    return dw.reshape(O, C, 3, 3)


from libc.math cimport sqrt


def squareplus_with_grad(x):
    """Return (0.5 (x + sqrt(x^2 + 4)), its derivative) in one pass."""
    xa = np.ascontiguousarray(x, dtype=np.float64)
    cdef double[::1] xv = xa.reshape(-1)
    y = np.empty_like(xa)
    d = np.empty_like(xa)
    cdef double[::1] yv = y.reshape(-1)
    cdef double[::1] dv = d.reshape(-1)
    cdef Py_ssize_t i, n = xv.shape[0]
    cdef double t, r
    with nogil:
        for i in range(n):
            t = xv[i]
            r = sqrt(t * t + 4.0)
            yv[i] = 0.5 * (t + r)
            dv[i] = 0.5 * (1.0 + t / r)
    return y, d


def avg_pool2(x):
    """2x2 average pooling with stride 2 on (N, C, H, W)."""
    cdef const double[:, :, :, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef Py_ssize_t N = xv.shape[0], C = xv.shape[1], H = xv.shape[2] // 2, W = xv.shape[3] // 2
    out = np.empty((N, C, H, W), dtype=np.float64)
    cdef double[:, :, :, ::1] ov = out
    cdef Py_ssize_t n, c, y, xx
    with nogil:
        for n in range(N):
            for c in range(C):
                for y in range(H):
                    for xx in range(W):
                        ov[n, c, y, xx] = 0.25 * (
                            xv[n, c, 2 * y, 2 * xx] + xv[n, c, 2 * y, 2 * xx + 1]
                            + xv[n, c, 2 * y + 1, 2 * xx] + xv[n, c, 2 * y + 1, 2 * xx + 1]
                        )
    return out


def avg_pool2_backward_mul(dy, scale):
    """Upsample dy by 2 (each cell gets dy / 4) and multiply by ``scale`` elementwise."""
    cdef const double[:, :, :, ::1] dv = np.ascontiguousarray(dy, dtype=np.float64)
    cdef const double[:, :, :, ::1] sv = np.ascontiguousarray(scale, dtype=np.float64)
    cdef Py_ssize_t N = sv.shape[0], C = sv.shape[1], H = sv.shape[2], W = sv.shape[3]
    out = np.empty((N, C, H, W), dtype=np.float64)
    cdef double[:, :, :, ::1] ov = out
    cdef Py_ssize_t n, c, y, xx
    with nogil:
        for n in range(N):
            for c in range(C):
                for y in range(H):
                    for xx in range(W):
                        ov[n, c, y, xx] = 0.25 * dv[n, c, y // 2, xx // 2] * sv[n, c, y, xx]
    return out


cdef double _recon_from_stats(double vv, double[:, ::1] w, double[:, ::1] vht,
                              double[:, ::1] hht) noexcept nogil:
    # 0.5 ||V - WH||^2 = 0.5 (||V||^2 - 2 <W, V H^T> + <W^T W, H H^T>)
    cdef double cross = 0.0, quad = 0.0, g
    cdef Py_ssize_t r, a, b
    for r in range(3):
        for a in range(2):
            cross += w[r, a] * vht[r, a]
    for a in range(2):
        for b in range(2):
            g = w[0, a] * w[0, b] + w[1, a] * w[1, b] + w[2, a] * w[2, b]
            quad += g * hht[a, b]
    return 0.5 * (vv - 2.0 * cross + quad)


cdef double _objective(double[:, ::1] v, double[:, ::1] w, double[:, ::1] h,
                       double lam) noexcept nogil:
    cdef Py_ssize_t n = v.shape[1], p, r
    cdef double sq = 0.0, l1 = 0.0, d
    for p in range(n):
        for r in range(3):
            d = v[r, p] - (w[r, 0] * h[0, p] + w[r, 1] * h[1, p])
            sq += d * d
        l1 += h[0, p] + h[1, p]
    return 0.5 * sq + lam * l1


def sparse_nmf(v_in, w_in, h_in, double lam, int max_iterations, double tolerance):
    """Alternating sparse NMF iterations on a 3 x n matrix with a 3 x 2 basis.

    Mirrors ``_kernels_py.sparse_nmf`` step for step. Returns (w, h, history).
    """
    cdef double[:, ::1] v = np.ascontiguousarray(v_in, dtype=np.float64)
    w_arr = np.array(w_in, dtype=np.float64, order="C")
    h_arr = np.array(h_in, dtype=np.float64, order="C")
    cdef double[:, ::1] w = w_arr
    cdef double[:, ::1] h = h_arr
    cdef Py_ssize_t n = v.shape[1], p, r, a, it, tries
    nw_arr = np.empty((3, 2))
    nh_arr = np.empty((2, n))
    cdef double[:, ::1] nw = nw_arr
    cdef double[:, ::1] nh = nh_arr
    cdef double[:, ::1] hht = np.empty((2, 2))
    cdef double[:, ::1] vht = np.empty((3, 2))
    cdef double[:, ::1] grad = np.empty((3, 2))
    cdef double[:, ::1] cand = np.empty((3, 2))
    cdef double[:, ::1] gram = np.empty((2, 2))
    cdef double[:, ::1] wtv = np.empty((2, n))
    cdef double vv = 0.0, recon, t, step = -1.0, obj, new_obj, norm, trace, det
    cdef double change, base, d, num0, num1, den0, den1, col0, col1
    cdef bint ok
    history = []

    for p in range(n):
        for r in range(3):
            vv += v[r, p] * v[r, p]
    obj = _objective(v, w, h, lam)
    history.append(obj)

    for it in range(max_iterations):
        with nogil:
            for a in range(2):
                for r in range(2):
                    hht[a, r] = 0.0
                for r in range(3):
                    vht[r, a] = 0.0
            for p in range(n):
                hht[0, 0] += h[0, p] * h[0, p]
                hht[0, 1] += h[0, p] * h[1, p]
                hht[1, 1] += h[1, p] * h[1, p]
                for r in range(3):
                    vht[r, 0] += v[r, p] * h[0, p]
                    vht[r, 1] += v[r, p] * h[1, p]
            hht[1, 0] = hht[0, 1]
            for r in range(3):
                for a in range(2):
                    grad[r, a] = w[r, 0] * hht[0, a] + w[r, 1] * hht[1, a] - vht[r, a]
            if step < 0:
                # spectral norm of the symmetric 2x2 matrix H H^T
                trace = hht[0, 0] + hht[1, 1]
                det = hht[0, 0] * hht[1, 1] - hht[0, 1] * hht[0, 1]
                norm = 0.5 * trace + sqrt(max(0.25 * trace * trace - det, 0.0))
                step = 1.0 / max(norm, 1e-12)
            recon = _recon_from_stats(vv, w, vht, hht)
            for r in range(3):
                for a in range(2):
                    nw[r, a] = w[r, a]
            t = step * 2.0
            for tries in range(30):
                for r in range(3):
                    for a in range(2):
                        cand[r, a] = max(w[r, a] - t * grad[r, a], 0.0)
                col0 = sqrt(cand[0, 0] ** 2 + cand[1, 0] ** 2 + cand[2, 0] ** 2)
                col1 = sqrt(cand[0, 1] ** 2 + cand[1, 1] ** 2 + cand[2, 1] ** 2)
                ok = col0 > 1e-12 and col1 > 1e-12
                if ok:
                    for r in range(3):
                        cand[r, 0] /= col0
                        cand[r, 1] /= col1
                    if _recon_from_stats(vv, cand, vht, hht) <= recon:
                        for r in range(3):
                            for a in range(2):
                                nw[r, a] = cand[r, a]
                        step = t
                        break
                t *= 0.5

            for a in range(2):
                for r in range(2):
                    gram[a, r] = nw[0, a] * nw[0, r] + nw[1, a] * nw[1, r] + nw[2, a] * nw[2, r]
            for p in range(n):
                num0 = nw[0, 0] * v[0, p] + nw[1, 0] * v[1, p] + nw[2, 0] * v[2, p]
                num1 = nw[0, 1] * v[0, p] + nw[1, 1] * v[1, p] + nw[2, 1] * v[2, p]
                den0 = gram[0, 0] * h[0, p] + gram[0, 1] * h[1, p] + lam
                den1 = gram[1, 0] * h[0, p] + gram[1, 1] * h[1, p] + lam
                nh[0, p] = h[0, p] * num0 / den0 if den0 > 0 else 0.0
                nh[1, p] = h[1, p] * num1 / den1 if den1 > 0 else 0.0

            new_obj = _objective(v, nw, nh, lam)
        if new_obj > obj:
            break
        change = 0.0
        base = 0.0
        for p in range(n):
            for r in range(3):
                d = w[r, 0] * h[0, p] + w[r, 1] * h[1, p]
                base += d * d
                d = (nw[r, 0] * nh[0, p] + nw[r, 1] * nh[1, p]) - d
                change += d * d
        w_arr, nw_arr = nw_arr, w_arr
        h_arr, nh_arr = nh_arr, h_arr
        w, nw = nw, w
        h, nh = nh, h
        obj = new_obj
        history.append(obj)
        if sqrt(change) / max(sqrt(base), 1e-300) < tolerance:
            break
    return w_arr, h_arr, history
