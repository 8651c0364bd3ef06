# Compiled hot kernels. Loop order per output cell is ascending kernel
# offset (ky, kx), matching the numpy fallback so both backends produce
# bit-identical float32 results (compiled with -ffp-contract=off).
import numpy as np

cimport cython
cimport numpy as cnp

cnp.import_array()


def correlate2d_replicate(cnp.ndarray[cnp.float32_t, ndim=3] img,
                          cnp.ndarray[cnp.float32_t, ndim=2] kernel):
    cdef Py_ssize_t H = img.shape[0], W = img.shape[1], C = img.shape[2]
    cdef Py_ssize_t kh = kernel.shape[0], kw = kernel.shape[1]
    cdef Py_ssize_t ph = kh // 2, pw = kw // 2
    cdef cnp.ndarray[cnp.float32_t, ndim=3] out = \
        np.zeros((H, W, C), dtype=np.float32)
    cdef float[:, :, ::1] im = np.ascontiguousarray(img)
    cdef float[:, ::1] k = np.ascontiguousarray(kernel)
    cdef float[:, :, ::1] o = out
    cdef Py_ssize_t y, x, c, ky, kx, sy, sx
    # float64 accumulator: float*float products are exact in double, and
    # one final rounding keeps normalized kernels identity on constants
    cdef double acc, kv
    with nogil:
        for y in range(H):
            for x in range(W):
                for c in range(C):
                    acc = 0.0
                    for ky in range(kh):
                        sy = y + ky - ph
                        if sy < 0:
                            sy = 0
                        elif sy >= H:
                            sy = H - 1
                        for kx in range(kw):
                            sx = x + kx - pw
                            if sx < 0:
                                sx = 0
                            elif sx >= W:
                                sx = W - 1
                            kv = <double> k[ky, kx]
                            acc = acc + kv * <double> im[sy, sx, c]
                    o[y, x, c] = <float> acc
    return out


def im2col(cnp.ndarray[cnp.float32_t, ndim=4] x,
           Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t sh, Py_ssize_t sw,
           Py_ssize_t ph, Py_ssize_t pw):
    cdef Py_ssize_t B = x.shape[0], H = x.shape[1], W = x.shape[2], C = x.shape[3]
    cdef Py_ssize_t OH = (H + 2 * ph - kh) // sh + 1
    cdef Py_ssize_t OW = (W + 2 * pw - kw) // sw + 1
    cdef cnp.ndarray[cnp.float32_t, ndim=2] cols = \
        np.zeros((B * OH * OW, kh * kw * C), dtype=np.float32)
    cdef float[:, :, :, ::1] xv = np.ascontiguousarray(x)
    cdef float[:, ::1] cv = cols
    cdef Py_ssize_t b, oh, ow, ky, kx, c, iy, ix, row, col
    with nogil:
        for b in range(B):
            for oh in range(OH):
                for ow in range(OW):
                    row = (b * OH + oh) * OW + ow
                    for ky in range(kh):
                        iy = oh * sh + ky - ph
                        if iy < 0 or iy >= H:
                            continue
                        for kx in range(kw):
                            ix = ow * sw + kx - pw
                            if ix < 0 or ix >= W:
                                continue
                            col = (ky * kw + kx) * C
                            for c in range(C):
                                cv[row, col + c] = xv[b, iy, ix, c]
    return cols


def col2im(cnp.ndarray[cnp.float32_t, ndim=2] cols,
           Py_ssize_t B, Py_ssize_t H, Py_ssize_t W, Py_ssize_t C,
           Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t sh, Py_ssize_t sw,
           Py_ssize_t ph, Py_ssize_t pw):
    cdef Py_ssize_t OH = (H + 2 * ph - kh) // sh + 1
    cdef Py_ssize_t OW = (W + 2 * pw - kw) // sw + 1
    cdef cnp.ndarray[cnp.float32_t, ndim=4] out = \
        np.zeros((B, H, W, C), dtype=np.float32)
    cdef float[:, ::1] cv = np.ascontiguousarray(cols)
    cdef float[:, :, :, ::1] ov = out
    cdef Py_ssize_t b, oh, ow, ky, kx, c, iy, ix, row, col
    # ky,kx outermost: each target cell accumulates taps in ascending
    # (ky, kx) order, same as the numpy fallback.
    with nogil:
        for ky in range(kh):
            for kx in range(kw):
                col = (ky * kw + kx) * C
                for b in range(B):
                    for oh in range(OH):
                        iy = oh * sh + ky - ph
                        if iy < 0 or iy >= H:
                            continue
                        for ow in range(OW):
                            ix = ow * sw + kx - pw
                            if ix < 0 or ix >= W:
                                continue
                            row = (b * OH + oh) * OW + ow
                            for c in range(C):
                                ov[b, iy, ix, c] = ov[b, iy, ix, c] + cv[row, col + c]
    return out
