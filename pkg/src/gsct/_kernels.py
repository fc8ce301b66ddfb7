"""Numba kernels for splat rasterization and voxelization.

Forward passes are parallel over output tiles/bricks, each owning a disjoint
set of pixels; every pixel sums its splats in ascending index order.  Backward
passes are parallel over splats, each reading its own footprint and writing
only its own gradient row.  Both are therefore race-free and deterministic.
"""
import numba as nb
import numpy as np
from numba import prange

_OPTS = dict(cache=True, nogil=True, fastmath=False)


# ---------------------------------------------------------------------------
# binning
# ---------------------------------------------------------------------------


@nb.njit(**_OPTS)
def bin_rects(bbox, tile, n_tu, n_tv):
    """CSR lists of rectangle indices per tile; rects with lo > hi are empty."""
    m = bbox.shape[0]
    counts = np.zeros(n_tu * n_tv + 1, dtype=np.int64)
    for i in range(m):
        if bbox[i, 0] > bbox[i, 1] or bbox[i, 2] > bbox[i, 3]:
            continue
        for tu in range(bbox[i, 0] // tile, bbox[i, 1] // tile + 1):
            for tv in range(bbox[i, 2] // tile, bbox[i, 3] // tile + 1):
                counts[tu * n_tv + tv + 1] += 1
    offsets = np.cumsum(counts)
    fill = offsets[:-1].copy()
    indices = np.empty(offsets[-1], dtype=np.int64)
    for i in range(m):
        if bbox[i, 0] > bbox[i, 1] or bbox[i, 2] > bbox[i, 3]:
            continue
        for tu in range(bbox[i, 0] // tile, bbox[i, 1] // tile + 1):
            for tv in range(bbox[i, 2] // tile, bbox[i, 3] // tile + 1):
                t = tu * n_tv + tv
                indices[fill[t]] = i
                fill[t] += 1
    return offsets, indices


@nb.njit(**_OPTS)
def bin_boxes(bbox, bx_size, by_size, bz_size, n_bx, n_by, n_bz):
    """3D analogue of :func:`bin_rects`; bbox rows are (x0, x1, y0, y1, z0, z1)."""
    m = bbox.shape[0]
    counts = np.zeros(n_bx * n_by * n_bz + 1, dtype=np.int64)
    for i in range(m):
        if bbox[i, 0] > bbox[i, 1] or bbox[i, 2] > bbox[i, 3] or bbox[i, 4] > bbox[i, 5]:
            continue
        for bx in range(bbox[i, 0] // bx_size, bbox[i, 1] // bx_size + 1):
            for by in range(bbox[i, 2] // by_size, bbox[i, 3] // by_size + 1):
                for bz in range(bbox[i, 4] // bz_size, bbox[i, 5] // bz_size + 1):
                    counts[(bx * n_by + by) * n_bz + bz + 1] += 1
    offsets = np.cumsum(counts)
    fill = offsets[:-1].copy()
    indices = np.empty(offsets[-1], dtype=np.int64)
    for i in range(m):
        if bbox[i, 0] > bbox[i, 1] or bbox[i, 2] > bbox[i, 3] or bbox[i, 4] > bbox[i, 5]:
            continue
        for bx in range(bbox[i, 0] // bx_size, bbox[i, 1] // bx_size + 1):
            for by in range(bbox[i, 2] // by_size, bbox[i, 3] // by_size + 1):
                for bz in range(bbox[i, 4] // bz_size, bbox[i, 5] // bz_size + 1):
                    t = (bx * n_by + by) * n_bz + bz
                    indices[fill[t]] = i
                    fill[t] += 1
    return offsets, indices


@nb.njit(parallel=True, **_OPTS)
def scaled_gram(R, w):
    """Batched ``R diag(w) R^T`` for rotations ``R`` (m, 3, 3) and weights (m, 3)."""
    m = R.shape[0]
    out = np.empty((m, 3, 3))
    for n in prange(m):
        for i in range(3):
            for j in range(i, 3):
                acc = 0.0
                for k in range(3):
                    acc += R[n, i, k] * w[n, k] * R[n, j, k]
                out[n, i, j] = acc
                out[n, j, i] = acc
    return out


@nb.njit(parallel=True, **_OPTS)
def sandwich(Q, S):
    """Batched ``Q S Q^T`` for ``Q`` (m, p, q) and symmetric ``S`` (m, q, q)."""
    m, p, q = Q.shape
    out = np.empty((m, p, p))
    for n in prange(m):
        for i in range(p):
            for j in range(i, p):
                acc = 0.0
                for k in range(q):
                    t = 0.0
                    for l in range(q):
                        t += S[n, k, l] * Q[n, j, l]
                    acc += Q[n, i, k] * t
                out[n, i, j] = acc
                out[n, j, i] = acc
    return out


# ---------------------------------------------------------------------------
# rasterizer
# ---------------------------------------------------------------------------


# Along a pixel row the exponent is quadratic in the column offset, so
# successive Gaussian values follow E[k+1] = E[k] * F[k], F[k+1] = F[k] * exp(-c).
# Rows are walked outward from the sample closest to their peak, which keeps
# every factor bounded; very narrow rows fall back to direct evaluation.
_DIRECT_CURV = 50.0


@nb.njit(inline="always")
def _row_start(j0, j1, mv, bu, c):
    js = int(np.floor(mv - bu / c + 0.5))
    if js < j0:
        js = j0
    elif js > j1:
        js = j1
    return js


@nb.njit(**_OPTS)
def _row_forward(out, pu, j0, j1, du, mv, a, b, c, ec, A):
    bu = b * du
    if c > _DIRECT_CURV:
        for pv in range(j0, j1 + 1):
            dv = pv - mv
            out[pu, pv] += A * np.exp(-0.5 * (a * du * du + 2.0 * bu * dv + c * dv * dv))
        return
    js = _row_start(j0, j1, mv, bu, c)
    dv = js - mv
    e0 = A * np.exp(-0.5 * (a * du * du + 2.0 * bu * dv + c * dv * dv))
    out[pu, js] += e0
    e = e0
    f_right = np.exp(-0.5 * (2.0 * bu + c * (2.0 * dv + 1.0)))
    f = f_right
    for pv in range(js + 1, j1 + 1):
        e *= f
        f *= ec
        out[pu, pv] += e
    e = e0
    f = ec / f_right
    for pv in range(js - 1, j0 - 1, -1):
        e *= f
        f *= ec
        out[pu, pv] += e


@nb.njit(parallel=True, **_OPTS)
def raster_forward(mean, conic, amp, bbox, offsets, indices, tile, n_u, n_v, out):
    n_tv = (n_v + tile - 1) // tile
    n_tiles = offsets.shape[0] - 1
    for t in prange(n_tiles):
        tu = t // n_tv
        tv = t - tu * n_tv
        u_lo = tu * tile
        u_hi = min(u_lo + tile, n_u) - 1
        v_lo = tv * tile
        v_hi = min(v_lo + tile, n_v) - 1
        for k in range(offsets[t], offsets[t + 1]):
            i = indices[k]
            i0 = max(bbox[i, 0], u_lo)
            i1 = min(bbox[i, 1], u_hi)
            j0 = max(bbox[i, 2], v_lo)
            j1 = min(bbox[i, 3], v_hi)
            ec = np.exp(-conic[i, 2])
            for pu in range(i0, i1 + 1):
                _row_forward(out, pu, j0, j1, pu - mean[i, 0], mean[i, 1],
                             conic[i, 0], conic[i, 1], conic[i, 2], ec, amp[i])


@nb.njit(**_OPTS)
def _row_backward(grad_img, pu, j0, j1, du, mv, a, b, c, ec, acc):
    """Accumulate sum G*g, sum G*g*dv, sum G*g*dv^2 along one row into acc[0:3]."""
    bu = b * du
    s0 = 0.0
    s1 = 0.0
    s2 = 0.0
    if c > _DIRECT_CURV:
        for pv in range(j0, j1 + 1):
            dv = pv - mv
            wg = grad_img[pu, pv] * np.exp(-0.5 * (a * du * du + 2.0 * bu * dv + c * dv * dv))
            s0 += wg
            s1 += wg * dv
            s2 += wg * dv * dv
    else:
        js = _row_start(j0, j1, mv, bu, c)
        dv0 = js - mv
        e0 = np.exp(-0.5 * (a * du * du + 2.0 * bu * dv0 + c * dv0 * dv0))
        wg = grad_img[pu, js] * e0
        s0 += wg
        s1 += wg * dv0
        s2 += wg * dv0 * dv0
        e = e0
        f_right = np.exp(-0.5 * (2.0 * bu + c * (2.0 * dv0 + 1.0)))
        f = f_right
        for pv in range(js + 1, j1 + 1):
            e *= f
            f *= ec
            dv = pv - mv
            wg = grad_img[pu, pv] * e
            s0 += wg
            s1 += wg * dv
            s2 += wg * dv * dv
        e = e0
        f = ec / f_right
        for pv in range(js - 1, j0 - 1, -1):
            e *= f
            f *= ec
            dv = pv - mv
            wg = grad_img[pu, pv] * e
            s0 += wg
            s1 += wg * dv
            s2 += wg * dv * dv
    acc[0] = s0
    acc[1] = s1
    acc[2] = s2


@nb.njit(parallel=True, **_OPTS)
def raster_backward(mean, conic, amp, bbox, grad_img, g_amp, g_mean, g_conic):
    """Per-splat accumulation of d loss / d (amplitude, mean2d, conic a/b/c).

    ``g_conic[:, 1]`` is the derivative w.r.t. the shared off-diagonal entry
    ``b`` of the quadratic form ``a du^2 + 2 b du dv + c dv^2``.
    """
    m = mean.shape[0]
    for i in prange(m):
        if bbox[i, 0] > bbox[i, 1] or bbox[i, 2] > bbox[i, 3]:
            continue
        mu = mean[i, 0]
        mv = mean[i, 1]
        a = conic[i, 0]
        b = conic[i, 1]
        c = conic[i, 2]
        A = amp[i]
        acc = np.empty(3)
        ec = np.exp(-c)
        # row sums of G*g weighted by powers of du and dv
        s00 = 0.0
        s10 = 0.0
        s01 = 0.0
        s20 = 0.0
        s11 = 0.0
        s02 = 0.0
        for pu in range(bbox[i, 0], bbox[i, 1] + 1):
            du = pu - mu
            _row_backward(grad_img, pu, bbox[i, 2], bbox[i, 3], du, mv, a, b, c, ec, acc)
            s00 += acc[0]
            s10 += acc[0] * du
            s20 += acc[0] * du * du
            s01 += acc[1]
            s11 += acc[1] * du
            s02 += acc[2]
        g_amp[i] = s00
        g_mean[i, 0] = A * (a * s10 + b * s01)
        g_mean[i, 1] = A * (b * s10 + c * s01)
        g_conic[i, 0] = -0.5 * A * s20
        g_conic[i, 1] = -A * s11
        g_conic[i, 2] = -0.5 * A * s02


# ---------------------------------------------------------------------------
# voxelizer
# ---------------------------------------------------------------------------


@nb.njit(**_OPTS)
def _line_forward(out, ix, iy, z0, z1, cz, qxy, lin, pzz, ec, rho):
    if pzz > _DIRECT_CURV:
        for iz in range(z0, z1 + 1):
            dz = iz - cz
            out[ix, iy, iz] += rho * np.exp(-0.5 * (qxy + (lin + pzz * dz) * dz))
        return
    zs = _row_start(z0, z1, cz, 0.5 * lin, pzz)
    dz = zs - cz
    e0 = rho * np.exp(-0.5 * (qxy + (lin + pzz * dz) * dz))
    out[ix, iy, zs] += e0
    f_right = np.exp(-0.5 * (lin + pzz * (2.0 * dz + 1.0)))
    e = e0
    f = f_right
    for iz in range(zs + 1, z1 + 1):
        e *= f
        f *= ec
        out[ix, iy, iz] += e
    e = e0
    f = ec / f_right
    for iz in range(zs - 1, z0 - 1, -1):
        e *= f
        f *= ec
        out[ix, iy, iz] += e


@nb.njit(parallel=True, **_OPTS)
def voxel_forward(center, prec, dens, bbox, offsets, indices, bxs, bys, bzs, nx, ny, nz, out):
    """``prec`` rows are (xx, xy, xz, yy, yz, zz) of the precision in index units."""
    n_by = (ny + bys - 1) // bys
    n_bz = (nz + bzs - 1) // bzs
    n_bricks = offsets.shape[0] - 1
    for t in prange(n_bricks):
        bx = t // (n_by * n_bz)
        rem = t - bx * n_by * n_bz
        by = rem // n_bz
        bz = rem - by * n_bz
        x_lo = bx * bxs
        x_hi = min(x_lo + bxs, nx) - 1
        y_lo = by * bys
        y_hi = min(y_lo + bys, ny) - 1
        z_lo = bz * bzs
        z_hi = min(z_lo + bzs, nz) - 1
        for k in range(offsets[t], offsets[t + 1]):
            i = indices[k]
            x0 = max(bbox[i, 0], x_lo)
            x1 = min(bbox[i, 1], x_hi)
            y0 = max(bbox[i, 2], y_lo)
            y1 = min(bbox[i, 3], y_hi)
            z0 = max(bbox[i, 4], z_lo)
            z1 = min(bbox[i, 5], z_hi)
            cx = center[i, 0]
            cy = center[i, 1]
            pxx = prec[i, 0]
            pxy = prec[i, 1]
            pxz = prec[i, 2]
            pyy = prec[i, 3]
            pyz = prec[i, 4]
            ec = np.exp(-prec[i, 5])
            for ix in range(x0, x1 + 1):
                dx = ix - cx
                for iy in range(y0, y1 + 1):
                    dy = iy - cy
                    qxy = pxx * dx * dx + 2.0 * pxy * dx * dy + pyy * dy * dy
                    lin = 2.0 * (pxz * dx + pyz * dy)
                    _line_forward(out, ix, iy, z0, z1, center[i, 2], qxy, lin, prec[i, 5], ec, dens[i])


@nb.njit(**_OPTS)
def _line_backward(grad_vol, ix, iy, z0, z1, cz, qxy, lin, pzz, ec, acc):
    s0 = 0.0
    s1 = 0.0
    s2 = 0.0
    if pzz > _DIRECT_CURV:
        for iz in range(z0, z1 + 1):
            dz = iz - cz
            wg = grad_vol[ix, iy, iz] * np.exp(-0.5 * (qxy + (lin + pzz * dz) * dz))
            s0 += wg
            s1 += wg * dz
            s2 += wg * dz * dz
    else:
        zs = _row_start(z0, z1, cz, 0.5 * lin, pzz)
        dz0 = zs - cz
        e0 = np.exp(-0.5 * (qxy + (lin + pzz * dz0) * dz0))
        wg = grad_vol[ix, iy, zs] * e0
        s0 += wg
        s1 += wg * dz0
        s2 += wg * dz0 * dz0
        f_right = np.exp(-0.5 * (lin + pzz * (2.0 * dz0 + 1.0)))
        e = e0
        f = f_right
        for iz in range(zs + 1, z1 + 1):
            e *= f
            f *= ec
            dz = iz - cz
            wg = grad_vol[ix, iy, iz] * e
            s0 += wg
            s1 += wg * dz
            s2 += wg * dz * dz
        e = e0
        f = ec / f_right
        for iz in range(zs - 1, z0 - 1, -1):
            e *= f
            f *= ec
            dz = iz - cz
            wg = grad_vol[ix, iy, iz] * e
            s0 += wg
            s1 += wg * dz
            s2 += wg * dz * dz
    acc[0] = s0
    acc[1] = s1
    acc[2] = s2


@nb.njit(parallel=True, **_OPTS)
def voxel_backward(center, prec, dens, bbox, grad_vol, g_dens, g_center, g_prec):
    """Per-splat gradients; ``g_prec`` off-diagonals are w.r.t. the shared entry."""
    m = center.shape[0]
    for i in prange(m):
        if bbox[i, 0] > bbox[i, 1] or bbox[i, 2] > bbox[i, 3] or bbox[i, 4] > bbox[i, 5]:
            continue
        cx = center[i, 0]
        cy = center[i, 1]
        pxx = prec[i, 0]
        pxy = prec[i, 1]
        pxz = prec[i, 2]
        pyy = prec[i, 3]
        pyz = prec[i, 4]
        pzz = prec[i, 5]
        rho = dens[i]
        acc = np.empty(3)
        ec = np.exp(-pzz)
        # weighted moments of G*g over the footprint
        m0 = 0.0
        mx = 0.0
        my = 0.0
        mz = 0.0
        mxx = 0.0
        mxy = 0.0
        mxz = 0.0
        myy = 0.0
        myz = 0.0
        mzz = 0.0
        for ix in range(bbox[i, 0], bbox[i, 1] + 1):
            dx = ix - cx
            for iy in range(bbox[i, 2], bbox[i, 3] + 1):
                dy = iy - cy
                qxy = pxx * dx * dx + 2.0 * pxy * dx * dy + pyy * dy * dy
                lin = 2.0 * (pxz * dx + pyz * dy)
                _line_backward(grad_vol, ix, iy, bbox[i, 4], bbox[i, 5], center[i, 2],
                               qxy, lin, pzz, ec, acc)
                s0 = acc[0]
                s1 = acc[1]
                m0 += s0
                mx += s0 * dx
                my += s0 * dy
                mz += s1
                mxx += s0 * dx * dx
                mxy += s0 * dx * dy
                myy += s0 * dy * dy
                mxz += s1 * dx
                myz += s1 * dy
                mzz += acc[2]
        g_dens[i] = m0
        g_center[i, 0] = rho * (pxx * mx + pxy * my + pxz * mz)
        g_center[i, 1] = rho * (pxy * mx + pyy * my + pyz * mz)
        g_center[i, 2] = rho * (pxz * mx + pyz * my + pzz * mz)
        g_prec[i, 0] = -0.5 * rho * mxx
        g_prec[i, 1] = -rho * mxy
        g_prec[i, 2] = -rho * mxz
        g_prec[i, 3] = -0.5 * rho * myy
        g_prec[i, 4] = -rho * myz
        g_prec[i, 5] = -0.5 * rho * mzz


# ---------------------------------------------------------------------------
# volume ray marching (ground-truth projector) and backprojection
# ---------------------------------------------------------------------------


@nb.njit(**_OPTS)
def _trilinear(vol, x, y, z):
    nx, ny, nz = vol.shape
    if x < 0.0 or y < 0.0 or z < 0.0 or x > nx - 1 or y > ny - 1 or z > nz - 1:
        return 0.0
    ix = min(int(x), nx - 2) if nx > 1 else 0
    iy = min(int(y), ny - 2) if ny > 1 else 0
    iz = min(int(z), nz - 2) if nz > 1 else 0
    fx = x - ix
    fy = y - iy
    fz = z - iz
    jx = ix + 1 if nx > 1 else ix
    jy = iy + 1 if ny > 1 else iy
    jz = iz + 1 if nz > 1 else iz
    c00 = vol[ix, iy, iz] * (1 - fx) + vol[jx, iy, iz] * fx
    c10 = vol[ix, jy, iz] * (1 - fx) + vol[jx, jy, iz] * fx
    c01 = vol[ix, iy, jz] * (1 - fx) + vol[jx, iy, jz] * fx
    c11 = vol[ix, jy, jz] * (1 - fx) + vol[jx, jy, jz] * fx
    c0 = c00 * (1 - fy) + c10 * fy
    c1 = c01 * (1 - fy) + c11 * fy
    return c0 * (1 - fz) + c1 * fz


@nb.njit(parallel=True, **_OPTS)
def march_rays(vol, origins, dirs, t0, t1, step, out):
    """Trapezoid-free midpoint integration of a trilinear field along rays.

    ``origins``/``dirs`` are in voxel-index units; ``step`` is in index units
    and the result is in index-length units (caller rescales to world).
    """
    n = origins.shape[0]
    for r in prange(n):
        a = t0[r]
        b = t1[r]
        if b <= a:
            out[r] = 0.0
            continue
        ns = int(np.ceil((b - a) / step))
        h = (b - a) / ns
        acc = 0.0
        for k in range(ns):
            t = a + (k + 0.5) * h
            acc += _trilinear(vol, origins[r, 0] + t * dirs[r, 0],
                              origins[r, 1] + t * dirs[r, 1],
                              origins[r, 2] + t * dirs[r, 2])
        out[r] = acc * h


@nb.njit(parallel=True, **_OPTS)
def backproject_parallel(filtered, cos_t, sin_t, su, sv, cu, cv, ox, oy, oz, h, weight, out):
    """Accumulate bilinearly sampled detector values at every voxel center."""
    nx, ny, nz = out.shape
    n_views, n_u, n_v = filtered.shape
    for ix in prange(nx):
        x = ox + ix * h
        for iy in range(ny):
            y = oy + iy * h
            for a in range(n_views):
                pu = (-sin_t[a] * x + cos_t[a] * y) / su + cu
                if pu < 0.0 or pu > n_u - 1:
                    continue
                i0 = min(int(pu), n_u - 2) if n_u > 1 else 0
                fu = pu - i0
                i1 = i0 + 1 if n_u > 1 else i0
                for iz in range(nz):
                    pv = (oz + iz * h) / sv + cv
                    if pv < 0.0 or pv > n_v - 1:
                        continue
                    j0 = min(int(pv), n_v - 2) if n_v > 1 else 0
                    fv = pv - j0
                    j1 = j0 + 1 if n_v > 1 else j0
                    val = ((filtered[a, i0, j0] * (1 - fv) + filtered[a, i0, j1] * fv) * (1 - fu)
                           + (filtered[a, i1, j0] * (1 - fv) + filtered[a, i1, j1] * fv) * fu)
                    out[ix, iy, iz] += weight * val


@nb.njit(parallel=True, **_OPTS)
def backproject_cone_kernel(images, cos_t, sin_t, su, sv, cu, cv, dso, dsd,
                            ox, oy, oz, h, out):
    nx, ny, nz = out.shape
    n_views, n_u, n_v = images.shape
    for ix in prange(nx):
        x = ox + ix * h
        for iy in range(ny):
            y = oy + iy * h
            for a in range(n_views):
                c = cos_t[a]
                s = sin_t[a]
                xu = -s * x + c * y
                zd = c * x + s * y + dso
                if zd <= 0.0:
                    continue
                mag = dsd / zd
                pu = xu * mag / su + cu
                if pu < 0.0 or pu > n_u - 1:
                    continue
                i0 = min(int(pu), n_u - 2) if n_u > 1 else 0
                fu = pu - i0
                i1 = i0 + 1 if n_u > 1 else i0
                w = (dso / zd) ** 2
                for iz in range(nz):
                    pv = (oz + iz * h) * mag / sv + cv
                    if pv < 0.0 or pv > n_v - 1:
                        continue
                    j0 = min(int(pv), n_v - 2) if n_v > 1 else 0
                    fv = pv - j0
                    j1 = j0 + 1 if n_v > 1 else j0
                    val = ((images[a, i0, j0] * (1 - fv) + images[a, i0, j1] * fv) * (1 - fu)
                           + (images[a, i1, j0] * (1 - fv) + images[a, i1, j1] * fv) * fu)
                    out[ix, iy, iz] += w * val
