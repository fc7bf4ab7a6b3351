"""Ray-marching kernels for the voxel field.

Both backends take the same arrays:

    origins, dirs   (R, 3) world-frame rays, unit directions
    inv_dz          (R,)   1 / camera-z component of each direction
    t               (R, N) sample depths (camera-frame z), ascending
    t_end           (R,)   far plane depth closing the last segment
    density         (X, Y, Z) raw density, sigma = softplus(trilinear(raw))
    feats           (X, Y, Z, C) features, rho = trilinear(feats)
    lo, hi          (3,) bounding box
    bg              (C + 1,) background features; the last one is depth

Moments come back as (R, J, C + 1) with depth as the last channel.
"""

import numpy as np

from ._backend import USE_NUMBA, njit, prange


@njit
def _softplus(x):
    if x > 20.0:
        return x
    return np.log1p(np.exp(x))


@njit
def _sigmoid(x):
    if x >= 0:
        return 1.0 / (1.0 + np.exp(-x))
    e = np.exp(x)
    return e / (1.0 + e)


@njit
def _cell(px, py, pz, lo, scale, res):
    """Lower corner and fractional offsets of the cell holding a point."""
    ux = (px - lo[0]) * scale[0]
    uy = (py - lo[1]) * scale[1]
    uz = (pz - lo[2]) * scale[2]
    if (ux < 0.0 or uy < 0.0 or uz < 0.0
            or ux > res[0] - 1 or uy > res[1] - 1 or uz > res[2] - 1):
        return False, 0, 0, 0, 0.0, 0.0, 0.0
    i = min(int(ux), res[0] - 2)
    j = min(int(uy), res[1] - 2)
    k = min(int(uz), res[2] - 2)
    return True, i, j, k, ux - i, uy - j, uz - k


@njit(parallel=True)
def _forward_loop(origins, dirs, inv_dz, t, t_end, density, feats, lo, hi, bg, j_max):
    n_rays, n_samples = t.shape
    n_feat = feats.shape[3]
    n_ch = n_feat + 1
    res = np.array(density.shape)
    scale = (res - 1) / (hi - lo)
    moments = np.zeros((n_rays, j_max, n_ch))
    residual = np.empty(n_rays)
    for r in prange(n_rays):
        rho = np.empty(n_ch)
        trans = 1.0
        for s in range(n_samples):
            depth = t[r, s]
            nxt = t[r, s + 1] if s + 1 < n_samples else t_end[r]
            delta = (nxt - depth) * inv_dz[r]
            dist = depth * inv_dz[r]
            px = origins[r, 0] + dist * dirs[r, 0]
            py = origins[r, 1] + dist * dirs[r, 1]
            pz = origins[r, 2] + dist * dirs[r, 2]
            ok, i, j, k, fx, fy, fz = _cell(px, py, pz, lo, scale, res)
            if not ok:
                continue
            x = 0.0
            for c in range(n_feat):
                rho[c] = 0.0
            for corner in range(8):
                di = corner & 1
                dj = (corner >> 1) & 1
                dk = (corner >> 2) & 1
                wgt = ((fx if di else 1.0 - fx) * (fy if dj else 1.0 - fy)
                       * (fz if dk else 1.0 - fz))
                x += wgt * density[i + di, j + dj, k + dk]
                for c in range(n_feat):
                    rho[c] += wgt * feats[i + di, j + dj, k + dk, c]
            rho[n_feat] = depth
            decay = np.exp(-_softplus(x) * delta)
            w = trans * (1.0 - decay)
            for c in range(n_ch):
                p = w
                for jj in range(j_max):
                    p *= rho[c]
                    moments[r, jj, c] += p
            trans *= decay
        residual[r] = trans
        for c in range(n_ch):
            p = trans
            for jj in range(j_max):
                p *= bg[c]
                moments[r, jj, c] += p
    return moments, residual


@njit(parallel=True)
def _sample_grads(origins, dirs, inv_dz, t, t_end, density, feats, lo, hi, bg, g):
    """Per-sample gradients w.r.t. the interpolated raw density and features."""
    n_rays, n_samples = t.shape
    n_feat = feats.shape[3]
    n_ch = n_feat + 1
    j_max = g.shape[1]
    res = np.array(density.shape)
    scale = (res - 1) / (hi - lo)
    d_x = np.zeros((n_rays, n_samples))
    d_rho = np.zeros((n_rays, n_samples, n_feat))
    for r in prange(n_rays):
        rho = np.empty((n_samples, n_ch))
        xs = np.zeros(n_samples)
        deltas = np.zeros(n_samples)
        ws = np.zeros(n_samples)
        trans_in = np.zeros(n_samples)
        decays = np.ones(n_samples)
        inside = np.zeros(n_samples, dtype=np.bool_)
        trans = 1.0
        for s in range(n_samples):
            depth = t[r, s]
            nxt = t[r, s + 1] if s + 1 < n_samples else t_end[r]
            deltas[s] = (nxt - depth) * inv_dz[r]
            dist = depth * inv_dz[r]
            px = origins[r, 0] + dist * dirs[r, 0]
            py = origins[r, 1] + dist * dirs[r, 1]
            pz = origins[r, 2] + dist * dirs[r, 2]
            ok, i, j, k, fx, fy, fz = _cell(px, py, pz, lo, scale, res)
            inside[s] = ok
            trans_in[s] = trans
            if not ok:
                continue
            x = 0.0
            for c in range(n_feat):
                rho[s, c] = 0.0
            for corner in range(8):
                di = corner & 1
                dj = (corner >> 1) & 1
                dk = (corner >> 2) & 1
                wgt = ((fx if di else 1.0 - fx) * (fy if dj else 1.0 - fy)
                       * (fz if dk else 1.0 - fz))
                x += wgt * density[i + di, j + dj, k + dk]
                for c in range(n_feat):
                    rho[s, c] += wgt * feats[i + di, j + dj, k + dk, c]
            rho[s, n_feat] = depth
            xs[s] = x
            decays[s] = np.exp(-_softplus(x) * deltas[s])
            ws[s] = trans * (1.0 - decays[s])
            trans *= decays[s]
        # gradient flowing into the residual mass through the background term
        g_res = 0.0
        for c in range(n_ch):
            p = 1.0
            for jj in range(j_max):
                p *= bg[c]
                g_res += g[r, jj, c] * p
        after = g_res * trans
        for s in range(n_samples - 1, -1, -1):
            if not inside[s]:
                continue
            s_w = 0.0
            for c in range(n_ch):
                v = rho[s, c]
                p = 1.0
                dv = 0.0
                for jj in range(j_max):
                    # p = v^jj before the update
                    dv += g[r, jj, c] * (jj + 1) * p
                    p *= v
                    s_w += g[r, jj, c] * p
                if c < n_feat:
                    d_rho[r, s, c] = ws[s] * dv
            d_sigma = deltas[s] * (s_w * trans_in[s] * decays[s] - after)
            d_x[r, s] = d_sigma * _sigmoid(xs[s])
            after += s_w * ws[s]
    return d_x, d_rho


@njit
def _scatter(origins, dirs, inv_dz, t, lo, hi, d_x, d_rho, grad_density, grad_feats):
    n_rays, n_samples = t.shape
    n_feat = grad_feats.shape[3]
    res = np.array(grad_density.shape)
    scale = (res - 1) / (hi - lo)
    for r in range(n_rays):
        for s in range(n_samples):
            dist = t[r, s] * inv_dz[r]
            px = origins[r, 0] + dist * dirs[r, 0]
            py = origins[r, 1] + dist * dirs[r, 1]
            pz = origins[r, 2] + dist * dirs[r, 2]
            ok, i, j, k, fx, fy, fz = _cell(px, py, pz, lo, scale, res)
            if not ok:
                continue
            for corner in range(8):
                di = corner & 1
                dj = (corner >> 1) & 1
                dk = (corner >> 2) & 1
                wgt = ((fx if di else 1.0 - fx) * (fy if dj else 1.0 - fy)
                       * (fz if dk else 1.0 - fz))
                grad_density[i + di, j + dj, k + dk] += wgt * d_x[r, s]
                for c in range(n_feat):
                    grad_feats[i + di, j + dj, k + dk, c] += wgt * d_rho[r, s, c]


def _backward_loop(origins, dirs, inv_dz, t, t_end, density, feats, lo, hi, bg, g):
    d_x, d_rho = _sample_grads(origins, dirs, inv_dz, t, t_end, density, feats, lo, hi, bg, g)
    grad_density = np.zeros_like(density)
    grad_feats = np.zeros_like(feats)
    # sequential scatter in ray order keeps gradients independent of threads
    _scatter(origins, dirs, inv_dz, t, lo, hi, d_x, d_rho, grad_density, grad_feats)
    return grad_density, grad_feats


# --- vectorized numpy path ---------------------------------------------------

def _np_cells(origins, dirs, inv_dz, t, lo, hi, res):
    pts = origins[:, None, :] + (t * inv_dz[:, None])[..., None] * dirs[:, None, :]
    u = (pts - lo) * ((res - 1) / (hi - lo))
    inside = np.all((u >= 0.0) & (u <= res - 1), axis=-1)
    base = np.minimum(np.floor(np.where(inside[..., None], u, 0.0)), res - 2).astype(np.int64)
    frac = np.where(inside[..., None], u - base, 0.0)
    corners = []
    for corner in range(8):
        off = np.array([corner & 1, (corner >> 1) & 1, (corner >> 2) & 1])
        wgt = np.prod(np.where(off == 1, frac, 1.0 - frac), axis=-1) * inside
        corners.append((base + off, wgt))
    return inside, corners


def _np_interp(grid, corners):
    out = 0.0
    for idx, wgt in corners:
        v = grid[idx[..., 0], idx[..., 1], idx[..., 2]]
        out = out + (wgt[..., None] * v if v.ndim > wgt.ndim else wgt * v)
    return out


def _np_march(origins, dirs, inv_dz, t, t_end, density, feats, lo, hi):
    res = np.array(density.shape)
    inside, corners = _np_cells(origins, dirs, inv_dz, t, lo, hi, res)
    x = _np_interp(density, corners)
    rho = _np_interp(feats, corners)
    nxt = np.concatenate([t[:, 1:], t_end[:, None]], axis=1)
    deltas = (nxt - t) * inv_dz[:, None]
    sigma = np.where(inside, np.logaddexp(0.0, x), 0.0)
    decay = np.exp(-sigma * deltas)
    trans_in = np.concatenate([np.ones((t.shape[0], 1)), np.cumprod(decay, axis=1)], axis=1)
    w = trans_in[:, :-1] * (1.0 - decay)
    rho = np.concatenate([rho, t[..., None]], axis=-1)
    return dict(inside=inside, corners=corners, x=x, rho=rho, deltas=deltas,
                decay=decay, trans_in=trans_in[:, :-1], w=w, residual=trans_in[:, -1])


def _forward_numpy(origins, dirs, inv_dz, t, t_end, density, feats, lo, hi, bg, j_max):
    m = _np_march(origins, dirs, inv_dz, t, t_end, density, feats, lo, hi)
    orders = np.arange(1, j_max + 1)
    powers = m["rho"][:, :, None, :] ** orders[None, None, :, None]
    moments = np.einsum("rs,rsjc->rjc", m["w"], powers)
    moments += m["residual"][:, None, None] * bg[None, None, :] ** orders[None, :, None]
    return moments, m["residual"]


def _backward_numpy(origins, dirs, inv_dz, t, t_end, density, feats, lo, hi, bg, g):
    m = _np_march(origins, dirs, inv_dz, t, t_end, density, feats, lo, hi)
    n_feat = feats.shape[3]
    j_max = g.shape[1]
    orders = np.arange(1, j_max + 1)
    rho = m["rho"]
    powers = rho[:, :, None, :] ** orders[None, None, :, None]
    s_w = np.einsum("rjc,rsjc->rs", g, powers)
    dpow = orders[None, None, :, None] * rho[:, :, None, :] ** (orders - 1)[None, None, :, None]
    d_rho = m["w"][..., None] * np.einsum("rjc,rsjc->rsc", g, dpow)[..., :n_feat]
    g_res = np.einsum("rjc,jc->r", g, bg[None, :] ** orders[:, None])
    contrib = s_w * m["w"]
    # sum over later samples of s_k w_k, plus the residual branch
    after = np.cumsum(contrib[:, ::-1], axis=1)[:, ::-1] - contrib
    after += (g_res * m["residual"])[:, None]
    d_sigma = m["deltas"] * (s_w * m["trans_in"] * m["decay"] - after)
    d_x = np.where(m["inside"], d_sigma / (1.0 + np.exp(-m["x"])), 0.0)
    d_rho = np.where(m["inside"][..., None], d_rho, 0.0)
    grad_density = np.zeros_like(density)
    grad_feats = np.zeros_like(feats)
    for idx, wgt in m["corners"]:
        flat = np.ravel_multi_index((idx[..., 0], idx[..., 1], idx[..., 2]), density.shape)
        grad_density += np.bincount(flat.ravel(), (wgt * d_x).ravel(),
                                    minlength=density.size).reshape(density.shape)
        for c in range(n_feat):
            grad_feats[..., c] += np.bincount(flat.ravel(), (wgt * d_rho[..., c]).ravel(),
                                              minlength=density.size).reshape(density.shape)
    return grad_density, grad_feats


if USE_NUMBA:
    forward, backward = _forward_loop, _backward_loop
else:
    forward, backward = _forward_numpy, _backward_numpy

BACKENDS = {
    "numba": (_forward_loop, _backward_loop),
    "numpy": (_forward_numpy, _backward_numpy),
}
