"""Differentiable volume rendering of projector coordinates and patterns.

Camera rays are sampled front to back over the signed distance field; the
density-free alpha at each step comes from the ratio of consecutive sigmoid
transforms of the SDF, so opacity concentrates where the field crosses zero.
Two images share one set of weights per ray: the projector coordinate image
(what projector pixel does this surface point see) and the pattern image
(what intensity does the projector cast there).  The backward pass returns
sparse field-parameter packets plus per-ray adjoints for ray origins and
directions, and pose-increment adjoints for the projector.
"""

import numpy as np
from scipy.special import expit

from .geometry import OutOfBounds, camera_ray, project_points

# Samples closer to the projector plane than this (in -z) are treated as
# behind the device: value zeroed, alpha kept in the transmittance product.
_Z_EPS = 1e-12


def phi(s, x):
    """Sigmoid of s*x; the steepness s sets the rendered surface thickness."""
    if s <= 0:
        raise ValueError("steepness must be positive")
    return expit(s * np.asarray(x, dtype=np.float64))


class RenderConfig:
    """Per-render knobs: sigmoid steepness and depth sampling."""

    __slots__ = ("inv_s", "n_samples", "near", "far")

    def __init__(self, inv_s, n_samples=64, near=None, far=None):
        if inv_s <= 0:
            raise ValueError("inv_s must be positive")
        if n_samples < 2:
            raise ValueError("need at least two samples per ray")
        if (near is None) != (far is None):
            raise ValueError("set both near and far or neither")
        if near is not None and not 0.0 <= near < far:
            raise ValueError("need 0 <= near < far")
        self.inv_s = float(inv_s)
        self.n_samples = int(n_samples)
        self.near = None if near is None else float(near)
        self.far = None if far is None else float(far)

    def depth_range(self):
        if self.near is None:
            raise ValueError("config has no fixed depth range")
        return self.near, self.far


class PatternTexture:
    """Projected pattern as an intensity grid in [0,1], bilinearly sampled."""

    __slots__ = ("intensities", "width", "height")

    def __init__(self, intensities):
        arr = np.asarray(intensities, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError("intensities must be a 2-D grid")
        if arr.size == 0:
            raise ValueError("empty texture")
        if not np.all(np.isfinite(arr)):
            raise ValueError("intensities must be finite")
        if np.any(arr < 0.0) or np.any(arr > 1.0):
            raise ValueError("intensities must lie in [0, 1]")
        self.intensities = arr
        self.height, self.width = arr.shape


class RaySampleSet:
    """One ray's samples: depths, points, SDF values, alphas, weights."""

    __slots__ = ("depths", "positions", "values", "alphas", "weights")

    def __init__(self, depths, positions, values, alphas, weights):
        self.depths = depths
        self.positions = positions
        self.values = values
        self.alphas = alphas
        self.weights = weights


def _stratified_depths(near, far, n_samples, jitter):
    """Uniform strata over [near, far]; one scalar jitter shifts all strata.

    near, far, jitter are (rays,) arrays; returns (rays, n_samples).
    """
    frac = (np.arange(n_samples)[None, :] + jitter[:, None]) / n_samples
    return near[:, None] + frac * (far - near)[:, None]


def _alphas_from_values(values, s):
    """(rays, n) SDF values -> (rays, n) alphas; the last alpha is zero.

    alpha_i = max((phi_i - phi_{i+1}) / phi_i, 0) over consecutive samples;
    there is no value beyond the last sample, so its alpha is pinned to 0.
    """
    phis = expit(s * values)
    alphas = np.zeros_like(phis)
    # phi underflows to 0 far inside the surface; those strata are already
    # fully occluded, so a zero alpha there is the correct limit
    num = phis[:, :-1] - phis[:, 1:]
    den = phis[:, :-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(den > 0.0, num / np.where(den > 0.0, den, 1.0), 0.0)
    alphas[:, :-1] = np.clip(ratio, 0.0, 1.0)
    return alphas, phis


def _composite_weights(alphas):
    """Front-to-back weights w_i = alpha_i * prod_{j<i} (1 - alpha_j)."""
    trans = np.cumprod(1.0 - alphas, axis=-1)
    trans = np.concatenate(
        [np.ones_like(trans[..., :1]), trans[..., :-1]], axis=-1)
    return trans * alphas, trans


def composite(values, alphas):
    """Blend per-sample values front to back; returns (blend, weights)."""
    values = np.asarray(values, dtype=np.float64)
    alphas = np.asarray(alphas, dtype=np.float64)
    if len(values) != len(alphas):
        raise ValueError("values and alphas must have equal length")
    weights, _ = _composite_weights(alphas[None, :])
    weights = weights[0]
    if values.ndim == 1:
        return float(weights @ values), weights
    return weights @ values, weights


def alphas_along_ray(field, ray, cfg, rng=None):
    """Sample one ray over cfg's depth range and compute its alpha profile.

    With no rng the strata are sampled at their midpoints.
    """
    near, far = cfg.depth_range()
    u = np.array([0.5 if rng is None else rng.random()])
    depths = _stratified_depths(
        np.array([near]), np.array([far]), cfg.n_samples, u)[0]
    positions = ray.at(depths)
    values = field(positions).astype(np.float64)
    alphas, _ = _alphas_from_values(values[None, :], cfg.inv_s)
    weights, _ = _composite_weights(alphas)
    return RaySampleSet(depths, positions, values, alphas[0], weights[0])


def _bilinear_cell(tex, q):
    """Clamped bilinear footprint for (..., 2) pattern coordinates.

    Returns corner columns/rows, fractional weights, and the clamp mask
    (True where the query stayed strictly inside the border in x resp. y,
    i.e. where moving the query still moves the sample).
    """
    x = q[..., 0]
    y = q[..., 1]
    xc = np.clip(x, 0.0, tex.width - 1.0)
    yc = np.clip(y, 0.0, tex.height - 1.0)
    x0 = np.minimum(np.floor(xc), tex.width - 2 if tex.width > 1 else 0)
    y0 = np.minimum(np.floor(yc), tex.height - 2 if tex.height > 1 else 0)
    x0 = x0.astype(np.intp)
    y0 = y0.astype(np.intp)
    fx = xc - x0
    fy = yc - y0
    live_x = (x > 0.0) & (x < tex.width - 1.0) & (tex.width > 1)
    live_y = (y > 0.0) & (y < tex.height - 1.0) & (tex.height > 1)
    return x0, y0, fx, fy, live_x, live_y


def sample_texture(tex, q):
    """Bilinear texture lookup; queries outside the grid clamp to the border."""
    q = np.asarray(q, dtype=np.float64)
    scalar = q.ndim == 1
    x0, y0, fx, fy, _, _ = _bilinear_cell(tex, np.atleast_2d(q))
    g = tex.intensities
    x1 = np.minimum(x0 + 1, tex.width - 1)
    y1 = np.minimum(y0 + 1, tex.height - 1)
    val = (g[y0, x0] * (1 - fx) * (1 - fy) + g[y0, x1] * fx * (1 - fy)
           + g[y1, x0] * (1 - fx) * fy + g[y1, x1] * fx * fy)
    return float(val[0]) if scalar else val


def _texture_lookup(tex, q):
    """Bilinear value plus its derivative with respect to q.

    The derivative is zero wherever the border clamp is active, since the
    sample no longer moves with the query there.
    """
    x0, y0, fx, fy, live_x, live_y = _bilinear_cell(tex, q)
    g = tex.intensities
    x1 = np.minimum(x0 + 1, tex.width - 1)
    y1 = np.minimum(y0 + 1, tex.height - 1)
    g00 = g[y0, x0]
    g01 = g[y0, x1]
    g10 = g[y1, x0]
    g11 = g[y1, x1]
    val = (g00 * (1 - fx) * (1 - fy) + g01 * fx * (1 - fy)
           + g10 * (1 - fx) * fy + g11 * fx * fy)
    dx = ((g01 - g00) * (1 - fy) + (g11 - g10) * fy) * live_x
    dy = ((g10 - g00) * (1 - fx) + (g11 - g01) * fx) * live_y
    return val, dx, dy


class RenderTape:
    """Everything the batched backward pass needs from the forward pass."""

    __slots__ = ("field_tape", "cfg", "hit", "depths", "alphas", "phis",
                 "trans", "weights", "coords", "tvals", "p_proj", "valid",
                 "proj_pose", "proj_intr", "texture", "n_rays")

    def __init__(self, **kw):
        for k, v in kw.items():
            setattr(self, k, v)


class RenderResult:
    """Batched render outputs; rays that miss the scene bounds have hit=False
    and zero outputs."""

    __slots__ = ("coord_image", "pattern_image", "weight_sum", "hit", "tape")

    def __init__(self, coord_image, pattern_image, weight_sum, hit, tape):
        self.coord_image = coord_image
        self.pattern_image = pattern_image
        self.weight_sum = weight_sum
        self.hit = hit
        self.tape = tape


def ray_sphere_range(origins, dirs, center, radius):
    """Depth interval of each ray inside the bounding sphere.

    Returns (near, far, hit); near is clamped at 0.  Rays that miss the
    sphere entirely, or whose intersection lies behind the origin, come
    back with hit=False.
    """
    oc = origins - np.asarray(center, dtype=np.float64)
    b = np.einsum("ij,ij->i", oc, dirs)
    disc = b * b - (np.einsum("ij,ij->i", oc, oc) - radius * radius)
    hit = disc > 0.0
    root = np.sqrt(np.where(hit, disc, 0.0))
    near = np.maximum(-b - root, 0.0)
    far = -b + root
    hit &= far > near
    return near, far, hit


def render_rays(field, origins, dirs, proj_pose, proj_intr, texture, cfg,
                center, radius, rng=None, want_tape=True, depth_range=None):
    """Render coordinate and pattern values for a batch of world-space rays.

    Depth ranges come from the scene bounding sphere and carry no gradient;
    depth_range=(near, far) arrays pin them instead (used by gradient
    checks, which must hold the sampling fixed while rays move).  One
    stratified jitter is drawn per ray (midpoints when rng is None).
    Both output images blend with the same weights by construction.
    """
    dirs = np.asarray(dirs, dtype=np.float64)
    n = len(dirs)
    # a camera contributes one shared origin for all its rays
    origins = np.broadcast_to(
        np.asarray(origins, dtype=np.float64), dirs.shape)
    if depth_range is None:
        near, far, hit = ray_sphere_range(origins, dirs, center, radius)
    else:
        near = np.broadcast_to(np.asarray(depth_range[0], dtype=np.float64), (n,))
        far = np.broadcast_to(np.asarray(depth_range[1], dtype=np.float64), (n,))
        hit = near < far

    jitter = np.full(n, 0.5) if rng is None else rng.random(n)
    # dead rays keep a dummy unit interval so array shapes stay rectangular
    depths = _stratified_depths(np.where(hit, near, 0.0),
                                np.where(hit, far, 1.0),
                                cfg.n_samples, jitter)
    pts = origins[:, None, :] + depths[:, :, None] * dirs[:, None, :]
    flat = pts.reshape(-1, 3)
    values, field_tape = field.forward(flat, want_tape=want_tape)
    values = values.astype(np.float64).reshape(n, cfg.n_samples)

    alphas, phis = _alphas_from_values(values, cfg.inv_s)
    alphas[~hit] = 0.0
    weights, trans = _composite_weights(alphas)

    coords, valid = project_points(proj_intr, proj_pose, flat)
    coords = coords.reshape(n, cfg.n_samples, 2)
    valid = valid.reshape(n, cfg.n_samples)
    coords = np.where(valid[:, :, None], coords, 0.0)

    if texture is not None:
        tvals, _, _ = _texture_lookup(texture, coords)
        tvals = np.where(valid, tvals, 0.0)
        pattern = np.einsum("ns,ns->n", weights, tvals)
    else:
        tvals = None
        pattern = np.zeros(n)

    coord_image = np.einsum("ns,nsd->nd", weights, coords)
    weight_sum = weights.sum(axis=1)

    tape = None
    if want_tape:
        p_proj = proj_pose.apply(flat).reshape(n, cfg.n_samples, 3)
        tape = RenderTape(field_tape=field_tape, cfg=cfg, hit=hit,
                          depths=depths, alphas=alphas, phis=phis,
                          trans=trans, weights=weights, coords=coords,
                          tvals=tvals, p_proj=p_proj, valid=valid,
                          proj_pose=proj_pose, proj_intr=proj_intr,
                          texture=texture, n_rays=n)
    return RenderResult(coord_image, pattern, weight_sum, hit, tape)


def render_rays_backward(field, tape, d_coord=None, d_pattern=None,
                         d_weight_sum=None, want_rays=True):
    """Reverse-mode pass for render_rays.

    Returns (field_grads, d_origins, d_dirs, d_proj_delta, d_proj_omega).
    The projector adjoints are with respect to a zero pose increment
    (translation delta, rotation omega) applied on top of the taped pose,
    summed over the batch.  d_origins / d_dirs are per ray (None when
    want_rays is False).
    """
    cfg = tape.cfg
    n, S = tape.n_rays, cfg.n_samples
    weights = tape.weights
    alphas = tape.alphas
    trans = tape.trans

    # adjoint arriving at each per-sample weight
    g = np.zeros((n, S))
    d_coords = np.zeros((n, S, 2))
    if d_coord is not None:
        g += np.einsum("nsd,nd->ns", tape.coords, d_coord)
        d_coords += weights[:, :, None] * d_coord[:, None, :]
    if d_pattern is not None and tape.texture is not None:
        g += tape.tvals * d_pattern[:, None]
        _, tdx, tdy = _texture_lookup(tape.texture, tape.coords)
        gp = (weights * d_pattern[:, None]) * tape.valid
        d_coords[:, :, 0] += gp * tdx
        d_coords[:, :, 1] += gp * tdy
    if d_weight_sum is not None:
        g += d_weight_sum[:, None]

    # compositing adjoint: dL/da_k = T_k g_k - (sum_{i>k} w_i g_i)/(1-a_k);
    # past a fully opaque sample every later weight is zero, so the guarded
    # division loses nothing
    wg = weights * g
    tail = np.cumsum(wg[:, ::-1], axis=1)[:, ::-1] - wg
    one_minus = 1.0 - alphas
    safe = one_minus > 0.0
    d_alpha = trans * g - np.where(safe, tail, 0.0) / np.where(safe, one_minus, 1.0)
    d_alpha[:, -1] = 0.0
    d_alpha[~tape.hit] = 0.0

    # alpha_i = (phi_i - phi_{i+1}) / phi_i before the clamp; the clamp
    # (and phi underflow) zero the derivative where they were active
    phis = tape.phis
    raw_pos = alphas[:, :-1] > 0.0
    den_ok = phis[:, :-1] > 0.0
    live = raw_pos & den_ok
    da = np.where(live, d_alpha[:, :-1], 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        den = np.where(den_ok, phis[:, :-1], 1.0)
        d_phi_lo = da * phis[:, 1:] / (den * den)
        d_phi_hi = -da / den
    d_phis = np.zeros_like(phis)
    d_phis[:, :-1] += d_phi_lo
    d_phis[:, 1:] += d_phi_hi

    s = cfg.inv_s
    d_values = d_phis * s * phis * (1.0 - phis)

    # projector projection: u = ax * x'/(-z') + bx, v likewise in y
    intr = tape.proj_intr
    x = tape.p_proj[:, :, 0]
    y = tape.p_proj[:, :, 1]
    z = tape.p_proj[:, :, 2]
    dcu = np.where(tape.valid, d_coords[:, :, 0], 0.0)
    dcv = np.where(tape.valid, d_coords[:, :, 1], 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv_nz = np.where(tape.valid, 1.0 / np.where(tape.valid, -z, 1.0), 0.0)
    d_pp = np.empty((n, S, 3))
    d_pp[:, :, 0] = intr.alpha_x * inv_nz * dcu
    d_pp[:, :, 1] = intr.alpha_y * inv_nz * dcv
    d_pp[:, :, 2] = (intr.alpha_x * x * dcu + intr.alpha_y * y * dcv) \
        * inv_nz * inv_nz

    # pose increment at zero: p'' = R(omega) p' + delta
    d_proj_delta = d_pp.sum(axis=(0, 1))
    d_proj_omega = np.cross(tape.p_proj.reshape(-1, 3),
                            d_pp.reshape(-1, 3)).sum(axis=0)

    # world-point adjoint: through the SDF samples and through p' = R p + t
    R = tape.proj_pose.rotation_matrix()
    d_pts_proj = d_pp.reshape(-1, 3) @ R

    field_grads, d_pts = field.backward(
        tape.field_tape, d_values.reshape(-1), want_d_pts=want_rays)

    if not want_rays:
        return field_grads, None, None, d_proj_delta, d_proj_omega

    d_pts = d_pts.astype(np.float64) + d_pts_proj
    d_pts = d_pts.reshape(n, S, 3)
    # depth samples are detached: pts = o + t d with t treated as constant
    d_origins = d_pts.sum(axis=1)
    d_dirs = np.einsum("ns,nsd->nd", tape.depths, d_pts)
    return field_grads, d_origins, d_dirs, d_proj_delta, d_proj_omega


def camera_increment_grads(cam_pose, dirs_device, d_origins, d_dirs):
    """Fold per-ray origin/direction adjoints into a camera pose increment.

    The increment acts on the world-to-device map as p'' = R(omega)(R0 p
    + t0) + delta, so at zero increment the ray origin moves by -R0^T delta
    and the world direction of a device ray dhat by -R0^T (omega x dhat).
    Returns (d_delta, d_omega) summed over the batch.
    """
    R0 = cam_pose.rotation_matrix()
    d_delta = -(d_origins @ R0.T).sum(axis=0)
    d_omega = -np.cross(dirs_device, d_dirs @ R0.T).sum(axis=0)
    return d_delta, d_omega


def _single_ray(field, cam_intr, cam_pose, proj_intr, proj_pose, texture,
                pixel, cfg, rng):
    ray = camera_ray(cam_intr, cam_pose, pixel)
    if cfg.near is not None:
        near, far = cfg.depth_range()
        u = np.array([0.5 if rng is None else rng.random()])
        depths = _stratified_depths(
            np.array([near]), np.array([far]), cfg.n_samples, u)
        pts = ray.origin[None, None, :] + depths[:, :, None] * ray.direction
        flat = pts.reshape(-1, 3)
        values = field(flat).astype(np.float64).reshape(1, cfg.n_samples)
        alphas, _ = _alphas_from_values(values, cfg.inv_s)
        weights, _ = _composite_weights(alphas)
        coords, valid = project_points(proj_intr, proj_pose, flat)
        coords = np.where(valid[:, None], coords, 0.0)[None, :, :]
        valid = valid[None, :]
        if texture is not None:
            tvals, _, _ = _texture_lookup(texture, coords)
            tvals = np.where(valid, tvals, 0.0)
            pattern = float(np.einsum("ns,ns->n", weights, tvals)[0])
        else:
            pattern = 0.0
        coord_image = np.einsum("ns,nsd->nd", weights, coords)[0]
        wsum = float(weights.sum())
        return coord_image, pattern, wsum
    raise ValueError("config has no fixed depth range")


def render_coordinates(field, cam_intr, cam_pose, proj_intr, proj_pose,
                       pixel, cfg, rng=None):
    """Render the projector coordinate seen through one camera pixel.

    Returns (2-vector coordinate estimate, weight sum).  A weight sum
    below the caller's empty-pixel threshold means no surface was met.
    """
    c, _, w = _single_ray(field, cam_intr, cam_pose, proj_intr, proj_pose,
                          None, pixel, cfg, rng)
    return c, w


def render_pattern(field, cam_intr, cam_pose, proj_intr, proj_pose, texture,
                   pixel, cfg, rng=None):
    """Render the projected pattern intensity for one camera pixel.

    Shares its blending weights with render_coordinates bit for bit when
    given the same ray, config, and jitter.
    """
    _, p, w = _single_ray(field, cam_intr, cam_pose, proj_intr, proj_pose,
                          texture, pixel, cfg, rng)
    return p, w
