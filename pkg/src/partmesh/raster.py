"""Differentiable triangle rasterizer with alpha compositing.

Forward model, per pixel p with fragments n sorted front to back:

    weight    w_n = alpha_n * prod_{r<n} (1 - alpha_r)
    color     I(p) = sum_n c_n w_n + bg * T_total
    depth     D(p) = sum_n z_n w_n
    extras    E(p) = sum_n e_n w_n          (e.g. part probabilities)
    coverage  A(p) = 1 - T_total,  T_total = prod_n (1 - alpha_n)

Fragment opacity is alpha_n = sigma_n * phi_n where sigma_n is the
perspective-correct interpolated vertex opacity and phi_n a soft window
over the projected triangle:

    phi_n(p) = (relu(psi_n(p)) / r_n) ** gamma

psi_n is the signed distance to the triangle boundary in screen space
(minimum of the three edge distances, positive inside) and r_n the
inradius, so phi peaks at 1 on the incenter and falls to 0 on the edges.
With ``hard=True`` phi becomes the inside indicator and outputs are exact
(used to produce ground-truth observations); hard renders do not support
backward.

Colors, opacities, depth and extras all interpolate with perspective
correction: screen barycentrics are divided by vertex camera depth and
renormalized, which makes the composited depth the exact ray/plane
intersection depth.

Fragments sort front to back by the camera-space depth of each face's
3D incenter, ties broken by face index. Gradients do not flow through
the ordering.

The backward pass is fully analytic: it chains pixel gradients through
compositing (suffix sums over the transmittance products), the window
function at its active edge, the inradius, both barycentric stages, and
the pinhole projection, accumulating per-vertex gradients with bincount
scatter-adds. Pixels land at integer centers (ix + 0.5, iy + 0.5) with
the origin at the top-left corner.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import PinholeCamera

AREA_EPS = 1e-14


@dataclass
class RenderConfig:
    gamma: float = 2.0
    background: tuple = (0.0, 0.0, 0.0)
    hard: bool = False
    alpha_clip: float = 1.0 - 1e-7


def _signed_area(a, b, c):
    """Twice-free signed area of 2D triangles: 0.5 * cross(b - a, c - a)."""
    return 0.5 * (
        (b[..., 0] - a[..., 0]) * (c[..., 1] - a[..., 1])
        - (b[..., 1] - a[..., 1]) * (c[..., 0] - a[..., 0])
    )


class RenderResult:
    """Rendered buffers plus the saved tensors needed for backward."""

    def __init__(self):
        self.image = None
        self.depth = None
        self.extras = None
        self.alpha = None
        self._ctx = None

    def backward(self, grad_image=None, grad_depth=None, grad_extras=None, grad_alpha=None):
        """Gradients of a scalar loss with respect to the render inputs.

        Any of the per-pixel gradient images may be omitted (treated as
        zero). Returns a dict with per-vertex arrays "positions" (world
        frame), "colors", "opacities" and, when extras were rendered,
        "extras".
        """
        ctx = self._ctx
        if ctx is None:
            raise RuntimeError("render context missing")
        if ctx["hard"]:
            raise RuntimeError("hard renders are not differentiable")
        return _backward(ctx, grad_image, grad_depth, grad_extras, grad_alpha)


def render(
    camera: PinholeCamera,
    positions: np.ndarray,
    faces: np.ndarray,
    colors: np.ndarray,
    opacities: np.ndarray,
    extras: np.ndarray | None = None,
    config: RenderConfig | None = None,
) -> RenderResult:
    """Rasterize a vertex-attributed triangle mesh into one camera.

    Parameters
    ----------
    positions : (V, 3) world-space vertices
    faces : (F, 3) vertex indices
    colors : (V, 3) RGB per vertex
    opacities : (V,) in [0, 1]
    extras : optional (V, C) additional channels, composited like color
        but with a zero background
    """
    cfg = config or RenderConfig()
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    colors = np.asarray(colors, dtype=np.float64).reshape(positions.shape[0], 3)
    opacities = np.asarray(opacities, dtype=np.float64).reshape(-1)
    has_extras = extras is not None
    if has_extras:
        extras = np.asarray(extras, dtype=np.float64)
        if extras.ndim == 1:
            extras = extras[:, None]
    W_img, H_img = camera.width, camera.height
    bg = np.asarray(cfg.background, dtype=np.float64).reshape(3)

    res = RenderResult()
    n_extra = extras.shape[1] if has_extras else 0

    cam_pts = camera.world_to_camera(positions)
    z_all = cam_pts[:, 2]
    # vertices at or behind the near plane get a placeholder projection;
    # every face touching one is culled below, so the value never matters
    z_safe = np.where(z_all > camera.near, z_all, 1.0)
    sx = camera.fx * cam_pts[:, 0] / z_safe + camera.cx
    sy = camera.fy * cam_pts[:, 1] / z_safe + camera.cy
    screen = np.stack([sx, sy], axis=1)

    def empty_result():
        res.image = np.tile(bg, (H_img, W_img, 1))
        res.depth = np.zeros((H_img, W_img))
        res.alpha = np.zeros((H_img, W_img))
        res.extras = np.zeros((H_img, W_img, n_extra)) if has_extras else None
        res._ctx = {"empty": True, "hard": cfg.hard, "num_vertices": positions.shape[0],
                    "n_extra": n_extra, "has_extras": has_extras}
        return res

    if faces.shape[0] == 0:
        return empty_result()

    fz = z_all[faces]
    front = np.all(fz > camera.near, axis=1)
    sv_all = screen[faces]  # (F, 3, 2)
    st = _signed_area(sv_all[:, 0], sv_all[:, 1], sv_all[:, 2])
    nondegen = np.abs(st) > AREA_EPS

    # non-finite screen coordinates (NaN positions, overflow) only occur on
    # faces the masks below already cull; keep them out of the integer casts
    lo = np.nan_to_num(sv_all.min(axis=1), nan=0.0, posinf=0.0, neginf=0.0)
    hi = np.nan_to_num(sv_all.max(axis=1), nan=-1.0, posinf=-1.0, neginf=-1.0)
    ix0 = np.maximum(np.ceil(lo[:, 0] - 0.5), 0).astype(np.int64)
    ix1 = np.minimum(np.floor(hi[:, 0] - 0.5), W_img - 1).astype(np.int64)
    iy0 = np.maximum(np.ceil(lo[:, 1] - 0.5), 0).astype(np.int64)
    iy1 = np.minimum(np.floor(hi[:, 1] - 0.5), H_img - 1).astype(np.int64)
    nx = ix1 - ix0 + 1
    ny = iy1 - iy0 + 1
    active = front & nondegen & (nx > 0) & (ny > 0)
    if not np.any(active):
        return empty_result()

    f_ids = np.nonzero(active)[0]
    sv = sv_all[active]
    st = st[active]
    orient = np.sign(st)
    zf = fz[active]
    vid = faces[active]
    ix0, iy0, nx, ny = ix0[active], iy0[active], nx[active], ny[active]

    elen = np.stack(
        [
            np.linalg.norm(sv[:, 1] - sv[:, 0], axis=1),
            np.linalg.norm(sv[:, 2] - sv[:, 1], axis=1),
            np.linalg.norm(sv[:, 0] - sv[:, 2], axis=1),
        ],
        axis=1,
    )
    perim = elen.sum(axis=1)
    inradius = 2.0 * np.abs(st) / perim

    # front-to-back order key: camera depth of each 3D triangle's incenter
    cam_tri = cam_pts[vid]
    a3 = np.linalg.norm(cam_tri[:, 1] - cam_tri[:, 2], axis=1)
    b3 = np.linalg.norm(cam_tri[:, 2] - cam_tri[:, 0], axis=1)
    c3 = np.linalg.norm(cam_tri[:, 0] - cam_tri[:, 1], axis=1)
    wsum = a3 + b3 + c3
    incenter_z = (a3 * cam_tri[:, 0, 2] + b3 * cam_tri[:, 1, 2] + c3 * cam_tri[:, 2, 2]) / wsum

    # enumerate candidate pixels per face as one flat ragged block
    counts = nx * ny
    total = int(counts.sum())
    if total == 0:
        return empty_result()
    cf = np.repeat(np.arange(f_ids.size), counts)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    o = np.arange(total) - np.repeat(starts, counts)
    nx_rep = np.repeat(nx, counts)
    dx = o % nx_rep
    dy = o // nx_rep
    px = np.repeat(ix0, counts) + dx
    py = np.repeat(iy0, counts) + dy
    pcx = px + 0.5
    pcy = py + 0.5

    va = sv[cf]  # (M, 3, 2)
    p2 = np.stack([pcx, pcy], axis=1)

    # signed edge distances, positive inside regardless of winding
    d_edges = np.empty((total, 3))
    for e in range(3):
        a = va[:, e]
        b = va[:, (e + 1) % 3]
        cross = (b[:, 0] - a[:, 0]) * (p2[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (
            p2[:, 0] - a[:, 0]
        )
        d_edges[:, e] = orient[cf] * cross / elen[cf, e]
    psi = d_edges.min(axis=1)
    emin = np.argmin(d_edges, axis=1)

    inside = psi > 0.0
    if not np.any(inside):
        return empty_result()
    cf, px, py, pcx, pcy, psi, emin = (
        arr[inside] for arr in (cf, px, py, pcx, pcy, psi, emin)
    )
    p2 = np.stack([pcx, pcy], axis=1)
    M = cf.size
    va = sv[cf]

    # screen barycentrics from sub-areas, then perspective correction
    s0 = _signed_area(p2, va[:, 1], va[:, 2])
    s1 = _signed_area(va[:, 0], p2, va[:, 2])
    s2 = _signed_area(va[:, 0], va[:, 1], p2)
    bs = np.stack([s0, s1, s2], axis=1) / st[cf, None]
    zc = zf[cf]  # (M, 3)
    wpc = bs / zc
    Wsum = wpc.sum(axis=1)
    beta = wpc / Wsum[:, None]
    z_pix = 1.0 / Wsum

    if cfg.hard:
        phi = np.ones(M)
    else:
        phi = (psi / inradius[cf]) ** cfg.gamma

    fvid = vid[cf]  # (M, 3)
    c_corner = colors[fvid]  # (M, 3, 3)
    o_corner = opacities[fvid]  # (M, 3)
    c_pix = np.einsum("mi,mic->mc", beta, c_corner)
    sig_pix = np.einsum("mi,mi->m", beta, o_corner)
    if has_extras:
        e_corner = extras[fvid]
        e_pix = np.einsum("mi,mic->mc", beta, e_corner)
    else:
        e_corner = None
        e_pix = None

    alpha_raw = sig_pix * phi
    if cfg.hard:
        alpha = alpha_raw
        clipped = np.zeros(M, dtype=bool)
    else:
        clipped = alpha_raw > cfg.alpha_clip
        alpha = np.where(clipped, cfg.alpha_clip, alpha_raw)

    pix_id = py * W_img + px
    order = np.lexsort((f_ids[cf], incenter_z[cf], pix_id))
    cf, psi, emin, pix_id = cf[order], psi[order], emin[order], pix_id[order]
    p2, bs, zc, wpc, beta = p2[order], bs[order], zc[order], wpc[order], beta[order]
    z_pix, phi, c_pix, sig_pix = z_pix[order], phi[order], c_pix[order], sig_pix[order]
    alpha, clipped, fvid = alpha[order], clipped[order], fvid[order]
    c_corner, o_corner = c_corner[order], o_corner[order]
    if has_extras:
        e_corner, e_pix = e_corner[order], e_pix[order]

    uniq_pix, run_start, run_len = np.unique(pix_id, return_index=True, return_counts=True)
    P = uniq_pix.size
    rows = np.repeat(np.arange(P), run_len)
    cols = np.arange(M) - np.repeat(run_start, run_len)
    n_max = int(run_len.max())

    A_d = np.zeros((P, n_max))
    A_d[rows, cols] = alpha
    trans = np.cumprod(1.0 - A_d, axis=1)
    T_excl = np.concatenate([np.ones((P, 1)), trans[:, :-1]], axis=1)
    T_total = trans[:, -1]
    T_frag = T_excl[rows, cols]
    wgt = alpha * T_frag

    image = np.tile(bg, (H_img * W_img, 1))
    depth = np.zeros(H_img * W_img)
    alpha_out = np.zeros(H_img * W_img)
    for ch in range(3):
        image[uniq_pix, ch] = np.bincount(rows, weights=wgt * c_pix[:, ch], minlength=P) + bg[
            ch
        ] * T_total
    depth[uniq_pix] = np.bincount(rows, weights=wgt * z_pix, minlength=P)
    alpha_out[uniq_pix] = 1.0 - T_total
    if has_extras:
        extras_out = np.zeros((H_img * W_img, n_extra))
        for ch in range(n_extra):
            extras_out[uniq_pix, ch] = np.bincount(rows, weights=wgt * e_pix[:, ch], minlength=P)
        res.extras = extras_out.reshape(H_img, W_img, n_extra)

    res.image = image.reshape(H_img, W_img, 3)
    res.depth = depth.reshape(H_img, W_img)
    res.alpha = alpha_out.reshape(H_img, W_img)

    res._ctx = {
        "empty": False,
        "hard": cfg.hard,
        "gamma": cfg.gamma,
        "bg": bg,
        "camera": camera,
        "has_extras": has_extras,
        "n_extra": n_extra,
        "num_vertices": positions.shape[0],
        "cam_pts": cam_pts,
        "sv": sv,
        "st": st,
        "orient": orient,
        "elen": elen,
        "perim": perim,
        "inradius": inradius,
        "zf": zf,
        "vid": vid,
        "cf": cf,
        "fvid": fvid,
        "p2": p2,
        "psi": psi,
        "emin": emin,
        "bs": bs,
        "zc": zc,
        "wpc": wpc,
        "Wsum": 1.0 / z_pix,
        "beta": beta,
        "z_pix": z_pix,
        "phi": phi,
        "c_corner": c_corner,
        "o_corner": o_corner,
        "e_corner": e_corner,
        "c_pix": c_pix,
        "sig_pix": sig_pix,
        "e_pix": e_pix,
        "alpha": alpha,
        "clipped": clipped,
        "uniq_pix": uniq_pix,
        "rows": rows,
        "cols": cols,
        "P": P,
        "n_max": n_max,
        "T_excl": T_excl,
        "T_total": T_total,
        "T_frag": T_frag,
        "wgt": wgt,
    }
    return res


def _backward(ctx, grad_image, grad_depth, grad_extras, grad_alpha):
    nv = ctx["num_vertices"]
    out = {
        "positions": np.zeros((nv, 3)),
        "colors": np.zeros((nv, 3)),
        "opacities": np.zeros(nv),
    }
    if ctx["has_extras"]:
        out["extras"] = np.zeros((nv, ctx["n_extra"]))
    if ctx["empty"]:
        return out

    uniq_pix = ctx["uniq_pix"]
    rows, cols = ctx["rows"], ctx["cols"]
    P, n_max = ctx["P"], ctx["n_max"]
    bg = ctx["bg"]
    cam = ctx["camera"]
    M = rows.size

    g_I = (
        np.asarray(grad_image, dtype=np.float64).reshape(-1, 3)[uniq_pix]
        if grad_image is not None
        else np.zeros((P, 3))
    )
    g_D = (
        np.asarray(grad_depth, dtype=np.float64).reshape(-1)[uniq_pix]
        if grad_depth is not None
        else np.zeros(P)
    )
    g_A = (
        np.asarray(grad_alpha, dtype=np.float64).reshape(-1)[uniq_pix]
        if grad_alpha is not None
        else np.zeros(P)
    )
    if ctx["has_extras"] and grad_extras is not None:
        g_E = np.asarray(grad_extras, dtype=np.float64).reshape(-1, ctx["n_extra"])[uniq_pix]
    else:
        g_E = None

    alpha, T_frag, wgt = ctx["alpha"], ctx["T_frag"], ctx["wgt"]
    c_pix, z_pix, e_pix = ctx["c_pix"], ctx["z_pix"], ctx["e_pix"]

    # q_n = d(pixel outputs)/d(weight w_n) dotted with the pixel gradient
    q = np.einsum("mc,mc->m", g_I[rows], c_pix) + g_D[rows] * z_pix
    if g_E is not None:
        q += np.einsum("mc,mc->m", g_E[rows], e_pix)

    # u = dL/dT_total per pixel (background color term and coverage term)
    u = g_I @ bg - g_A

    QAT = np.zeros((P, n_max))
    QAT[rows, cols] = q * wgt
    rev = np.flip(np.cumsum(np.flip(QAT, axis=1), axis=1), axis=1)
    suffix = rev - QAT  # sum over fragments strictly behind each slot
    S_n = suffix[rows, cols] + (u * ctx["T_total"])[rows]

    d_alpha = q * T_frag - S_n / (1.0 - alpha)
    d_alpha[ctx["clipped"]] = 0.0

    # fragment value gradients (attribute path, independent of alpha path)
    g_c_frag = g_I[rows] * wgt[:, None]
    g_z_frag = g_D[rows] * wgt
    g_e_frag = g_E[rows] * wgt[:, None] if g_E is not None else None

    phi, psi, sig_pix = ctx["phi"], ctx["psi"], ctx["sig_pix"]
    d_sig = d_alpha * phi
    d_phi = d_alpha * sig_pix

    gamma = ctx["gamma"]
    cf = ctx["cf"]
    inr = ctx["inradius"][cf]
    d_psi = d_phi * gamma * phi / psi
    d_r = -d_phi * gamma * phi / inr

    # beta receives from every interpolated attribute
    beta, bs, zc = ctx["beta"], ctx["bs"], ctx["zc"]
    c_corner, o_corner, e_corner = ctx["c_corner"], ctx["o_corner"], ctx["e_corner"]
    d_beta = np.einsum("mc,mic->mi", g_c_frag, c_corner) + d_sig[:, None] * o_corner
    if g_e_frag is not None:
        d_beta += np.einsum("mc,mic->mi", g_e_frag, e_corner)

    # perspective correction chain: beta = w / W, z_pix = 1 / W, w_i = bs_i / z_i
    Wsum = ctx["Wsum"]
    wpc = ctx["wpc"]
    gW = -np.einsum("mi,mi->m", d_beta, wpc) / Wsum**2 - g_z_frag / Wsum**2
    gw = d_beta / Wsum[:, None] + gW[:, None]
    d_bs = gw / zc
    d_zc = -gw * bs / zc**2  # (M, 3) gradient on the corner camera depths

    # screen barycentric chain: bs_i = S_i / S_t
    st_f = ctx["st"][cf]
    p2 = ctx["p2"]
    va = ctx["sv"][cf]
    d_Si = d_bs / st_f[:, None]
    d_St = -np.einsum("mi,mi->m", d_bs, bs) / st_f

    d_sv = np.zeros((M, 3, 2))  # gradients on this fragment's screen corners

    def darea_da(b, c):
        return 0.5 * np.stack([b[:, 1] - c[:, 1], c[:, 0] - b[:, 0]], axis=1)

    # S_0 = S(p, v1, v2), S_1 = S(v0, p, v2), S_2 = S(v0, v1, p)
    d_sv[:, 1] += d_Si[:, 0, None] * darea_da(va[:, 2], p2)      # dS0/dv1
    d_sv[:, 2] += d_Si[:, 0, None] * darea_da(p2, va[:, 1])      # dS0/dv2
    d_sv[:, 0] += d_Si[:, 1, None] * darea_da(p2, va[:, 2])      # dS1/dv0
    d_sv[:, 2] += d_Si[:, 1, None] * darea_da(va[:, 0], p2)      # dS1/dv2
    d_sv[:, 0] += d_Si[:, 2, None] * darea_da(va[:, 1], p2)      # dS2/dv0
    d_sv[:, 1] += d_Si[:, 2, None] * darea_da(p2, va[:, 0])      # dS2/dv1
    d_sv[:, 0] += d_St[:, None] * darea_da(va[:, 1], va[:, 2])
    d_sv[:, 1] += d_St[:, None] * darea_da(va[:, 2], va[:, 0])
    d_sv[:, 2] += d_St[:, None] * darea_da(va[:, 0], va[:, 1])

    # window chain through the active (minimum-distance) edge
    emin = ctx["emin"]
    orient_f = ctx["orient"][cf]
    enext = (emin + 1) % 3
    rng = np.arange(M)
    ea = va[rng, emin]  # (M, 2)
    eb = va[rng, enext]
    L = ctx["elen"][cf, emin]
    d_val = psi  # by definition psi is the active edge distance
    dcross_da = np.stack([eb[:, 1] - p2[:, 1], p2[:, 0] - eb[:, 0]], axis=1)
    dcross_db = np.stack([p2[:, 1] - ea[:, 1], ea[:, 0] - p2[:, 0]], axis=1)
    coef = (orient_f * d_psi / L)[:, None]
    ga = coef * dcross_da - (d_psi * d_val / L**2)[:, None] * (ea - eb)
    gb = coef * dcross_db - (d_psi * d_val / L**2)[:, None] * (eb - ea)
    np.add.at(d_sv, (rng, emin), ga)
    np.add.at(d_sv, (rng, enext), gb)

    # inradius chain: r = 2|S_t| / perimeter
    perim_f = ctx["perim"][cf]
    elen_f = ctx["elen"][cf]
    coef_area = (2.0 * d_r * orient_f / perim_f)[:, None]
    d_sv[:, 0] += coef_area * darea_da(va[:, 1], va[:, 2])
    d_sv[:, 1] += coef_area * darea_da(va[:, 2], va[:, 0])
    d_sv[:, 2] += coef_area * darea_da(va[:, 0], va[:, 1])
    coef_perim = -d_r * inr / perim_f
    e01 = (va[:, 0] - va[:, 1]) / elen_f[:, 0, None]
    e12 = (va[:, 1] - va[:, 2]) / elen_f[:, 1, None]
    e20 = (va[:, 2] - va[:, 0]) / elen_f[:, 2, None]
    d_sv[:, 0] += coef_perim[:, None] * (e01 - e20)
    d_sv[:, 1] += coef_perim[:, None] * (-e01 + e12)
    d_sv[:, 2] += coef_perim[:, None] * (-e12 + e20)

    # scatter fragment-corner gradients onto shared vertices
    fvid = ctx["fvid"]
    flat_vid = fvid.ravel()
    g_screen = np.zeros((nv, 2))
    g_zv = np.bincount(flat_vid, weights=d_zc.ravel(), minlength=nv)
    for axis in range(2):
        g_screen[:, axis] = np.bincount(
            flat_vid, weights=d_sv[..., axis].ravel(), minlength=nv
        )

    out["opacities"] = np.bincount(
        flat_vid, weights=(beta * d_sig[:, None]).ravel(), minlength=nv
    )
    for ch in range(3):
        out["colors"][:, ch] = np.bincount(
            flat_vid, weights=(beta * g_c_frag[:, ch, None]).ravel(), minlength=nv
        )
    if g_e_frag is not None:
        for ch in range(ctx["n_extra"]):
            out["extras"][:, ch] = np.bincount(
                flat_vid, weights=(beta * g_e_frag[:, ch, None]).ravel(), minlength=nv
            )

    # projection chain: screen = (fx x / z + cx, fy y / z + cy)
    cam_pts = ctx["cam_pts"]
    zv = cam_pts[:, 2]
    safe_z = np.where(zv > 0, zv, 1.0)
    g_cam = np.zeros((nv, 3))
    g_cam[:, 0] = g_screen[:, 0] * cam.fx / safe_z
    g_cam[:, 1] = g_screen[:, 1] * cam.fy / safe_z
    g_cam[:, 2] = (
        g_zv
        - g_screen[:, 0] * cam.fx * cam_pts[:, 0] / safe_z**2
        - g_screen[:, 1] * cam.fy * cam_pts[:, 1] / safe_z**2
    )
    out["positions"] = g_cam @ cam.rotation
    return out


def segmentation_map(result: RenderResult, coverage_threshold: float = 0.5) -> np.ndarray:
    """Hard label image from composited part probabilities.

    Pixels with coverage below the threshold get label -1 (background).
    """
    if result.extras is None:
        raise ValueError("render carried no extra channels to label")
    labels = np.argmax(result.extras, axis=2).astype(np.int64)
    labels[result.alpha < coverage_threshold] = -1
    return labels
