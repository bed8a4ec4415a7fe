# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled kernel core: fused GRU step and lambda-return scan.

Matrix products go through BLAS (numpy); the gate math and the scan run
as C loops, which is where the numpy backend loses time on small desks.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, tanh

cnp.import_array()

BACKEND_NAME = "cython"


def gru_forward(cnp.ndarray[double, ndim=2] x,
                cnp.ndarray[double, ndim=2] h,
                cnp.ndarray[double, ndim=2] wz,
                cnp.ndarray[double, ndim=2] wr,
                cnp.ndarray[double, ndim=2] wn,
                cnp.ndarray[double, ndim=1] bz,
                cnp.ndarray[double, ndim=1] br,
                cnp.ndarray[double, ndim=1] bn):
    cdef int i = x.shape[1]
    cdef cnp.ndarray[double, ndim=2] az = np.dot(x, wz[:i]) + np.dot(h, wz[i:])
    cdef cnp.ndarray[double, ndim=2] ar = np.dot(x, wr[:i]) + np.dot(h, wr[i:])
    cdef cnp.ndarray[double, ndim=2] an = np.dot(x, wn[:i])
    cdef cnp.ndarray[double, ndim=2] hn = np.dot(h, wn[i:])
    cdef int b = az.shape[0]
    cdef int hd = az.shape[1]
    cdef cnp.ndarray[double, ndim=2] z = np.empty((b, hd))
    cdef cnp.ndarray[double, ndim=2] r = np.empty((b, hd))
    cdef cnp.ndarray[double, ndim=2] n = np.empty((b, hd))
    cdef cnp.ndarray[double, ndim=2] h_new = np.empty((b, hd))
    cdef int j, k
    cdef double zv, rv, nv
    for j in range(b):
        for k in range(hd):
            zv = 1.0 / (1.0 + exp(-(az[j, k] + bz[k])))
            rv = 1.0 / (1.0 + exp(-(ar[j, k] + br[k])))
            nv = tanh(an[j, k] + rv * hn[j, k] + bn[k])
            z[j, k] = zv
            r[j, k] = rv
            n[j, k] = nv
            h_new[j, k] = (1.0 - zv) * nv + zv * h[j, k]
    return h_new, (x, h, z, r, n, hn)


def gru_backward(cache,
                 cnp.ndarray[double, ndim=2] wz,
                 cnp.ndarray[double, ndim=2] wr,
                 cnp.ndarray[double, ndim=2] wn,
                 cnp.ndarray[double, ndim=2] dh_new):
    cdef cnp.ndarray[double, ndim=2] x = cache[0]
    cdef cnp.ndarray[double, ndim=2] h = cache[1]
    cdef cnp.ndarray[double, ndim=2] z = cache[2]
    cdef cnp.ndarray[double, ndim=2] r = cache[3]
    cdef cnp.ndarray[double, ndim=2] n = cache[4]
    cdef cnp.ndarray[double, ndim=2] hn = cache[5]
    cdef int i = x.shape[1]
    cdef int b = z.shape[0]
    cdef int hd = z.shape[1]

    cdef cnp.ndarray[double, ndim=2] da_z = np.empty((b, hd))
    cdef cnp.ndarray[double, ndim=2] da_r = np.empty((b, hd))
    cdef cnp.ndarray[double, ndim=2] da_n = np.empty((b, hd))
    cdef cnp.ndarray[double, ndim=2] dhn = np.empty((b, hd))
    cdef cnp.ndarray[double, ndim=2] dh_gate = np.empty((b, hd))
    cdef int j, k
    cdef double g, zv, rv, nv, dnv, danv, drv
    for j in range(b):
        for k in range(hd):
            g = dh_new[j, k]
            zv = z[j, k]
            rv = r[j, k]
            nv = n[j, k]
            danv = g * (1.0 - zv) * (1.0 - nv * nv)
            drv = danv * hn[j, k]
            da_n[j, k] = danv
            dhn[j, k] = danv * rv
            da_z[j, k] = g * (h[j, k] - nv) * zv * (1.0 - zv)
            da_r[j, k] = drv * rv * (1.0 - rv)
            dh_gate[j, k] = g * zv

    dx = np.dot(da_z, wz[:i].T) + np.dot(da_r, wr[:i].T) + np.dot(da_n, wn[:i].T)
    dh = (
        dh_gate
        + np.dot(da_z, wz[i:].T)
        + np.dot(da_r, wr[i:].T)
        + np.dot(dhn, wn[i:].T)
    )
    dwz = np.concatenate([np.dot(x.T, da_z), np.dot(h.T, da_z)])
    dwr = np.concatenate([np.dot(x.T, da_r), np.dot(h.T, da_r)])
    dwn = np.concatenate([np.dot(x.T, da_n), np.dot(h.T, dhn)])
    return (
        dx,
        dh,
        dwz,
        dwr,
        dwn,
        da_z.sum(axis=0),
        da_r.sum(axis=0),
        da_n.sum(axis=0),
    )


def lambda_scan(cnp.ndarray[double, ndim=2] r,
                cnp.ndarray[double, ndim=2] boot,
                cnp.ndarray[double, ndim=2] terminated,
                cnp.ndarray[double, ndim=2] mask,
                double lam, double gamma):
    cdef int b = r.shape[0]
    cdef int t_max = r.shape[1]
    cdef cnp.ndarray[double, ndim=2] g = np.zeros((b, t_max))
    cdef int j, t
    cdef double g_next
    for j in range(b):
        for t in range(t_max - 1, -1, -1):
            if t == t_max - 1 or mask[j, t + 1] <= 0.5:
                g_next = boot[j, t]
            else:
                g_next = g[j, t + 1]
            g[j, t] = mask[j, t] * (
                r[j, t]
                + gamma
                * (1.0 - terminated[j, t])
                * ((1.0 - lam) * boot[j, t] + lam * g_next)
            )
    return g
