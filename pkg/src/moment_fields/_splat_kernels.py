"""Tile rasterization kernels for projected Gaussians.

Inputs shared by both backends:

    tile_offsets  (n_tiles + 1,) CSR offsets into ``tile_splats``
    tile_splats   (L,) splat ids per tile, front to back
    mean2d        (M, 2) pixel-space means
    conic         (M, 3) inverse 2D covariance (a, b, c) = [[a, b], [b, c]]
    alpha         (M,) base opacities
    feats         (M, F) per-splat features, depth last
    bg            (F,) background features
    px, py, tile  (P,) integer pixel coordinates and their tile ids

The backward pass writes into a buffer aligned with ``tile_splats`` (one row per
tile-splat pair), so each tile owns its rows and the final per-splat sums
are merged serially in tile order.  Buffer columns: d mean (2), d conic (3),
d alpha (1), d feats (F).
"""

import numpy as np

from ._backend import USE_NUMBA, njit, prange

ALPHA_MAX = 0.999
T_MIN = 1e-4
CUTOFF = 9.0  # squared Mahalanobis radius of the 3-sigma ellipse
N_GEOM = 6


@njit(parallel=True)
def _forward_loop(tile_offsets, tile_splats, mean2d, conic, alpha, feats, bg, px, py, tile,
                  j_max):
    n_pix = px.shape[0]
    n_ch = feats.shape[1]
    moments = np.zeros((n_pix, j_max, n_ch))
    residual = np.empty(n_pix)
    n_contrib = np.zeros(n_pix, dtype=np.int64)
    for q in prange(n_pix):
        x = px[q] + 0.5
        y = py[q] + 0.5
        t = tile[q]
        trans = 1.0
        for k in range(tile_offsets[t], tile_offsets[t + 1]):
            s = tile_splats[k]
            dx = x - mean2d[s, 0]
            dy = y - mean2d[s, 1]
            maha = conic[s, 0] * dx * dx + 2.0 * conic[s, 1] * dx * dy + conic[s, 2] * dy * dy
            if maha > CUTOFF:
                continue
            a = alpha[s] * np.exp(-0.5 * maha)
            if a > ALPHA_MAX:
                a = ALPHA_MAX
            w = trans * a
            for c in range(n_ch):
                p = w
                for j in range(j_max):
                    p *= feats[s, c]
                    moments[q, j, c] += p
            n_contrib[q] += 1
            trans *= 1.0 - a
            if trans < T_MIN:
                break
        residual[q] = trans
        for c in range(n_ch):
            p = trans
            for j in range(j_max):
                p *= bg[c]
                moments[q, j, c] += p
    return moments, residual, n_contrib


@njit(parallel=True)
def _backward_tiles(tile_offsets, tile_splats, mean2d, conic, alpha, feats, bg, px, py,
                    pix_offsets, g):
    """Per tile-splat gradient rows; pixels are pre-sorted by tile."""
    n_tiles = tile_offsets.shape[0] - 1
    n_ch = feats.shape[1]
    j_max = g.shape[1]
    buf = np.zeros((tile_splats.shape[0], N_GEOM + n_ch))
    for t in prange(n_tiles):
        start = tile_offsets[t]
        n_list = tile_offsets[t + 1] - start
        if n_list == 0 or pix_offsets[t + 1] == pix_offsets[t]:
            continue
        ks = np.empty(n_list, dtype=np.int64)
        a_t = np.empty(n_list)
        t_in = np.empty(n_list)
        gauss = np.empty(n_list)
        dxs = np.empty(n_list)
        dys = np.empty(n_list)
        for q in range(pix_offsets[t], pix_offsets[t + 1]):
            x = px[q] + 0.5
            y = py[q] + 0.5
            trans = 1.0
            n = 0
            for k in range(start, start + n_list):
                s = tile_splats[k]
                dx = x - mean2d[s, 0]
                dy = y - mean2d[s, 1]
                maha = (conic[s, 0] * dx * dx + 2.0 * conic[s, 1] * dx * dy
                        + conic[s, 2] * dy * dy)
                if maha > CUTOFF:
                    continue
                gv = np.exp(-0.5 * maha)
                a = alpha[s] * gv
                if a > ALPHA_MAX:
                    a = ALPHA_MAX
                ks[n] = k
                a_t[n] = a
                t_in[n] = trans
                gauss[n] = gv
                dxs[n] = dx
                dys[n] = dy
                n += 1
                trans *= 1.0 - a
                if trans < T_MIN:
                    break
            g_res = 0.0
            for c in range(n_ch):
                p = 1.0
                for j in range(j_max):
                    p *= bg[c]
                    g_res += g[q, j, c] * p
            after = g_res * trans
            for i in range(n - 1, -1, -1):
                k = ks[i]
                s = tile_splats[k]
                a = a_t[i]
                w = t_in[i] * a
                s_w = 0.0
                for c in range(n_ch):
                    v = feats[s, c]
                    p = 1.0
                    dv = 0.0
                    for j in range(j_max):
                        dv += g[q, j, c] * (j + 1) * p
                        p *= v
                        s_w += g[q, j, c] * p
                    buf[k, N_GEOM + c] += w * dv
                d_a = s_w * t_in[i] - after / (1.0 - a)
                after += s_w * w
                if alpha[s] * gauss[i] > ALPHA_MAX:
                    continue
                buf[k, 5] += d_a * gauss[i]
                d_maha = -0.5 * gauss[i] * alpha[s] * d_a
                dx = dxs[i]
                dy = dys[i]
                buf[k, 0] -= 2.0 * d_maha * (conic[s, 0] * dx + conic[s, 1] * dy)
                buf[k, 1] -= 2.0 * d_maha * (conic[s, 1] * dx + conic[s, 2] * dy)
                buf[k, 2] += d_maha * dx * dx
                buf[k, 3] += 2.0 * d_maha * dx * dy
                buf[k, 4] += d_maha * dy * dy
    return buf


@njit
def _merge(tile_splats, buf, n_splats):
    out = np.zeros((n_splats, buf.shape[1]))
    for k in range(tile_splats.shape[0]):
        s = tile_splats[k]
        for c in range(buf.shape[1]):
            out[s, c] += buf[k, c]
    return out


def _backward_loop(tile_offsets, tile_splats, mean2d, conic, alpha, feats, bg, px, py,
                   pix_offsets, g):
    buf = _backward_tiles(tile_offsets, tile_splats, mean2d, conic, alpha, feats, bg,
                          px, py, pix_offsets, g)
    return _merge(tile_splats, buf, mean2d.shape[0])


# --- vectorized numpy path ---------------------------------------------------

def _np_tile_terms(ids, mean2d, conic, alpha, x, y):
    dx = x[:, None] - mean2d[ids, 0][None, :]
    dy = y[:, None] - mean2d[ids, 1][None, :]
    a, b, c = conic[ids, 0], conic[ids, 1], conic[ids, 2]
    maha = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
    inside = maha <= CUTOFF
    gauss = np.where(inside, np.exp(-0.5 * np.where(inside, maha, 0.0)), 0.0)
    raw = alpha[ids] * gauss
    clamped = raw > ALPHA_MAX
    a_t = np.minimum(raw, ALPHA_MAX)
    after = np.cumprod(1.0 - a_t, axis=1)
    before = np.concatenate([np.ones((len(x), 1)), after[:, :-1]], axis=1)
    # a splat is reached only while transmittance has not dropped below T_MIN
    active = inside & (before >= T_MIN)
    a_t = np.where(active, a_t, 0.0)
    trans_in = np.concatenate([np.ones((len(x), 1)),
                               np.cumprod(1.0 - a_t, axis=1)[:, :-1]], axis=1)
    residual = trans_in[:, -1] * (1.0 - a_t[:, -1]) if a_t.shape[1] else np.ones(len(x))
    return dict(dx=dx, dy=dy, gauss=gauss, clamped=clamped, active=active, a_t=a_t,
                trans_in=trans_in, w=trans_in * a_t, residual=residual)


def _forward_numpy(tile_offsets, tile_splats, mean2d, conic, alpha, feats, bg, px, py, tile,
                   j_max):
    n_pix = len(px)
    n_ch = feats.shape[1]
    orders = np.arange(1, j_max + 1)
    moments = np.zeros((n_pix, j_max, n_ch))
    residual = np.ones(n_pix)
    n_contrib = np.zeros(n_pix, dtype=np.int64)
    for t in np.unique(tile):
        sel = np.nonzero(tile == t)[0]
        ids = tile_splats[tile_offsets[t]:tile_offsets[t + 1]]
        if len(ids) == 0:
            continue
        terms = _np_tile_terms(ids, mean2d, conic, alpha, px[sel] + 0.5, py[sel] + 0.5)
        powers = feats[ids][None, :, :] ** orders[:, None, None]
        moments[sel] = np.einsum("ps,jsc->pjc", terms["w"], powers)
        residual[sel] = terms["residual"]
        n_contrib[sel] = terms["active"].sum(axis=1)
    moments += residual[:, None, None] * bg[None, None, :] ** orders[None, :, None]
    return moments, residual, n_contrib


def _backward_numpy(tile_offsets, tile_splats, mean2d, conic, alpha, feats, bg, px, py,
                    pix_offsets, g):
    n_ch = feats.shape[1]
    j_max = g.shape[1]
    orders = np.arange(1, j_max + 1)
    out = np.zeros((mean2d.shape[0], N_GEOM + n_ch))
    g_res_all = np.einsum("pjc,jc->p", g, bg[None, :] ** orders[:, None])
    for t in range(len(tile_offsets) - 1):
        ids = tile_splats[tile_offsets[t]:tile_offsets[t + 1]]
        sel = np.arange(pix_offsets[t], pix_offsets[t + 1])
        if len(ids) == 0 or len(sel) == 0:
            continue
        m = _np_tile_terms(ids, mean2d, conic, alpha, px[sel] + 0.5, py[sel] + 0.5)
        f = feats[ids]
        gt = g[sel]
        powers = f[None, :, :] ** orders[:, None, None]
        s_w = np.einsum("pjc,jsc->ps", gt, powers)
        dpow = orders[:, None, None] * f[None, :, :] ** (orders - 1)[:, None, None]
        d_feat = np.einsum("ps,pjc,jsc->sc", m["w"], gt, dpow)
        contrib = s_w * m["w"]
        after = np.cumsum(contrib[:, ::-1], axis=1)[:, ::-1] - contrib
        after += (g_res_all[sel] * m["residual"])[:, None]
        d_a = np.where(m["active"], s_w * m["trans_in"] - after / (1.0 - m["a_t"]), 0.0)
        d_a = np.where(m["clamped"], 0.0, d_a)
        d_alpha = (d_a * m["gauss"]).sum(axis=0)
        d_maha = -0.5 * m["gauss"] * alpha[ids][None, :] * d_a
        a, b, c = conic[ids, 0], conic[ids, 1], conic[ids, 2]
        dx, dy = m["dx"], m["dy"]
        rows = np.zeros((len(ids), N_GEOM + n_ch))
        rows[:, 0] = -2.0 * (d_maha * (a * dx + b * dy)).sum(axis=0)
        rows[:, 1] = -2.0 * (d_maha * (b * dx + c * dy)).sum(axis=0)
        rows[:, 2] = (d_maha * dx * dx).sum(axis=0)
        rows[:, 3] = 2.0 * (d_maha * dx * dy).sum(axis=0)
        rows[:, 4] = (d_maha * dy * dy).sum(axis=0)
        rows[:, 5] = d_alpha
        rows[:, N_GEOM:] = d_feat
        np.add.at(out, ids, rows)
    return out


if USE_NUMBA:
    forward, backward = _forward_loop, _backward_loop
else:
    forward, backward = _forward_numpy, _backward_numpy

BACKENDS = {
    "numba": (_forward_loop, _backward_loop),
    "numpy": (_forward_numpy, _backward_numpy),
}
