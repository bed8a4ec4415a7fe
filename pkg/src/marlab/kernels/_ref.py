"""Pure numpy kernel implementations.

Reference backend; the Cython module in ``_core.pyx`` mirrors these
signatures exactly. Each backend is deterministic on its own; across
backends results agree to float64 rounding (numpy's vectorized exp/tanh
may differ from libm by an ulp).
"""

import numpy as np

BACKEND_NAME = "numpy"


def gru_forward(x, h, wz, wr, wn, bz, br, bn):
    """One GRU step for a batch.

    x: (B, I), h: (B, H), each weight (I+H, H), each bias (H,).

    z = sigmoid(x Wz_x + h Wz_h + bz)
    r = sigmoid(x Wr_x + h Wr_h + br)
    n = tanh(x Wn_x + r * (h Wn_h) + bn)
    h' = (1 - z) * n + z * h

    Returns (h_new, cache); cache feeds gru_backward.
    """
    i = x.shape[1]
    az = x @ wz[:i] + h @ wz[i:] + bz
    ar = x @ wr[:i] + h @ wr[i:] + br
    z = 1.0 / (1.0 + np.exp(-az))
    r = 1.0 / (1.0 + np.exp(-ar))
    hn = h @ wn[i:]
    n = np.tanh(x @ wn[:i] + r * hn + bn)
    h_new = (1.0 - z) * n + z * h
    return h_new, (x, h, z, r, n, hn)


def gru_backward(cache, wz, wr, wn, dh_new):
    """Backward pass of gru_forward.

    Returns (dx, dh, dwz, dwr, dwn, dbz, dbr, dbn).
    """
    x, h, z, r, n, hn = cache
    i = x.shape[1]

    dz = dh_new * (h - n)
    dn = dh_new * (1.0 - z)
    da_n = dn * (1.0 - n * n)
    dr = da_n * hn
    dhn = da_n * r
    da_z = dz * z * (1.0 - z)
    da_r = dr * r * (1.0 - r)

    dx = da_z @ wz[:i].T + da_r @ wr[:i].T + da_n @ wn[:i].T
    dh = (
        dh_new * z
        + da_z @ wz[i:].T
        + da_r @ wr[i:].T
        + dhn @ wn[i:].T
    )

    dwz = np.concatenate([x.T @ da_z, h.T @ da_z])
    dwr = np.concatenate([x.T @ da_r, h.T @ da_r])
    dwn = np.concatenate([x.T @ da_n, h.T @ dhn])
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


def lambda_scan(r, boot, terminated, mask, lam, gamma):
    """Backward recursion for lambda returns, shared by TD(lambda) and
    Peng's Q(lambda) (only the bootstrap column differs).

    All inputs (B, T) float64 except lam/gamma scalars. For each row:

        G_t = r_t + gamma * (1 - term_t) * ((1 - lam) * boot_t + lam * G_{t+1})

    with G_{t+1} read as boot_t past the last unmasked step, so the final
    valid step reduces to the 1-step bootstrap. Masked steps are zero.
    """
    b, t_max = r.shape
    g = np.zeros((b, t_max))
    g_next = boot[:, t_max - 1].copy()
    for t in range(t_max - 1, -1, -1):
        if t < t_max - 1:
            g_next = np.where(mask[:, t + 1] > 0.5, g[:, t + 1], boot[:, t])
        g[:, t] = mask[:, t] * (
            r[:, t]
            + gamma
            * (1.0 - terminated[:, t])
            * ((1.0 - lam) * boot[:, t] + lam * g_next)
        )
    return g
