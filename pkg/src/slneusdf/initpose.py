"""Initial pose estimation from correspondence images.

Per-frame relative camera/projector geometry via the essential matrix,
midpoint triangulation of every valid pixel, and inter-frame chaining
with point-to-point ICP.  Everything here runs once, before the joint
optimization; precision targets are initialization-grade.
"""

import os
import warnings

import numpy as np

from . import io
from .geometry import Pose, apply_increment, quat_from_matrix
from .optimize import load_frameset
from .synth import perturb_pose


class Degenerate(ValueError):
    """Relative-pose estimation has no usable parallax or support."""


class IllConditioned(ValueError):
    """Point covariance lost rank; the rigid fit is not determined."""


class DegenerateFrameWarning(UserWarning):
    """A frame whose relative pose failed and was filled from a neighbor."""


# The rigid output of registration carries the same payload as a device
# pose, so it shares the type.
RigidTransform = Pose


class PointCloud:
    """Triangulated 3-D points, optionally tagged with source pixels."""

    __slots__ = ("points", "pixels")

    def __init__(self, points, pixels=None):
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if not np.isfinite(points).all():
            raise ValueError("cloud points must be finite")
        if pixels is not None:
            pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
            if len(pixels) != len(points):
                raise ValueError("need one source pixel per point")
        self.points = points
        self.pixels = pixels

    def __len__(self):
        return len(self.points)

    def transformed(self, pose):
        return PointCloud(pose.apply(self.points), self.pixels)


class RansacConfig:
    """Settings for the essential-matrix RANSAC loop.

    threshold is a Sampson distance in normalized image coordinates
    (squared units).  rotation_tol is the median angular residual, in
    radians, below which the bearing fields are explained by a pure
    rotation and the baseline is declared unobservable.
    """

    __slots__ = ("iters", "threshold", "min_inlier_ratio", "rotation_tol",
                 "max_points", "seed")

    def __init__(self, iters=500, threshold=2e-4, min_inlier_ratio=0.3,
                 rotation_tol=1e-3, max_points=4096, seed=0):
        if iters < 1:
            raise ValueError("need at least one RANSAC iteration")
        if threshold <= 0 or rotation_tol <= 0:
            raise ValueError("thresholds must be positive")
        if not 0.0 < min_inlier_ratio <= 1.0:
            raise ValueError("min_inlier_ratio must be in (0, 1]")
        self.iters = int(iters)
        self.threshold = float(threshold)
        self.min_inlier_ratio = float(min_inlier_ratio)
        self.rotation_tol = float(rotation_tol)
        self.max_points = int(max_points)
        self.seed = int(seed)


# ---------------------------------------------------------------------------
# relative pose from a correspondence image


def _correspondences(cmap, cam_intr, proj_intr):
    """Valid pixel pairs as unnormalized bearings (x, y, -1).

    A pixel participates when its stored coordinate is finite (the
    invalid-pixel convention) and lands inside the pattern.
    """
    cmap = np.asarray(cmap, dtype=np.float64)
    if cmap.ndim != 3 or cmap.shape[2] != 2:
        raise ValueError("correspondence image must be (H, W, 2)")
    valid = np.isfinite(cmap).all(axis=2)
    valid &= ((cmap[..., 0] >= 0.0) & (cmap[..., 0] < proj_intr.width)
              & (cmap[..., 1] >= 0.0) & (cmap[..., 1] < proj_intr.height))
    rows, cols = np.nonzero(valid)
    pix = np.stack([cols, rows], axis=1).astype(np.float64)
    pc = cmap[valid]
    b1 = np.stack([(pix[:, 0] - cam_intr.beta_x) / cam_intr.alpha_x,
                   (pix[:, 1] - cam_intr.beta_y) / cam_intr.alpha_y,
                   -np.ones(len(pix))], axis=1)
    b2 = np.stack([(pc[:, 0] - proj_intr.beta_x) / proj_intr.alpha_x,
                   (pc[:, 1] - proj_intr.beta_y) / proj_intr.alpha_y,
                   -np.ones(len(pc))], axis=1)
    return b1, b2, pix


def _eight_point(b1, b2):
    # rows of the design matrix are kron(b2, b1) for row-major E;
    # full_matrices keeps the null vector when exactly 8 rows are given
    a = (b2[:, :, None] * b1[:, None, :]).reshape(len(b1), 9)
    _, _, vt = np.linalg.svd(a, full_matrices=True)
    e = vt[-1].reshape(3, 3)
    u, _, vt = np.linalg.svd(e)
    return (u * np.array([1.0, 1.0, 0.0])) @ vt


def _sampson(e, b1, b2):
    eb1 = b1 @ e.T
    etb2 = b2 @ e
    num = np.einsum("ij,ij->i", b2, eb1) ** 2
    den = (eb1[:, 0] ** 2 + eb1[:, 1] ** 2
           + etb2[:, 0] ** 2 + etb2[:, 1] ** 2)
    return num / np.maximum(den, 1e-300)


def _rotation_residual(b1, b2):
    """Median angular misfit of the best single rotation b1 -> b2."""
    u1 = b1 / np.linalg.norm(b1, axis=1, keepdims=True)
    u2 = b2 / np.linalg.norm(b2, axis=1, keepdims=True)
    u, _, vt = np.linalg.svd(u1.T @ u2)
    d = np.linalg.det(vt.T) * np.linalg.det(u.T)
    r = (vt.T * np.array([1.0, 1.0, d])) @ u.T
    dots = np.einsum("ij,ij->i", u2, u1 @ r.T)
    return float(np.median(np.arccos(np.clip(dots, -1.0, 1.0))))


def _pair_depths(r, t, b1, b2):
    """Least-squares depths of both rays for candidate (R, t)."""
    rb1 = b1 @ r.T
    a11 = np.einsum("ij,ij->i", rb1, rb1)
    a22 = np.einsum("ij,ij->i", b2, b2)
    a12 = -np.einsum("ij,ij->i", rb1, b2)
    r1 = -(rb1 @ t)
    r2 = b2 @ t
    det = a11 * a22 - a12 * a12
    det = np.where(np.abs(det) < 1e-300, 1e-300, det)
    l1 = (r1 * a22 - a12 * r2) / det
    l2 = (a11 * r2 - a12 * r1) / det
    return l1, l2


def _decompose(e, b1, b2):
    """Pick the (R, t) factorization that puts the points in front."""
    u, _, vt = np.linalg.svd(e)
    if np.linalg.det(u) < 0:
        u = -u
    if np.linalg.det(vt) < 0:
        vt = -vt
    w = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    best = None
    for r in (u @ w @ vt, u @ w.T @ vt):
        for t in (u[:, 2], -u[:, 2]):
            l1, l2 = _pair_depths(r, t, b1, b2)
            score = int(np.count_nonzero((l1 > 0) & (l2 > 0)))
            if best is None or score > best[0]:
                best = (score, r, t)
    return best[1], best[2]


def estimate_relative_pose(cmap, cam_intr, proj_intr, ransac_cfg=None):
    """Projector pose relative to the camera, at unit baseline.

    Runs RANSAC over eight-point essential-matrix fits on normalized
    bearings, refits on the inlier set, and resolves the four-fold
    factorization ambiguity by counting positive ray depths.  The
    returned pose maps camera-frame points into the projector frame
    with its translation scaled to unit norm; the true baseline length
    is not recoverable from one frame.

    Raises Degenerate when fewer than 8 pixels are valid, when the two
    bearing fields differ only by a rotation (no parallax, so no
    baseline direction), or when the inlier ratio ends up below the
    configured floor.
    """
    cfg = ransac_cfg if ransac_cfg is not None else RansacConfig()
    b1, b2, _ = _correspondences(cmap, cam_intr, proj_intr)
    n = len(b1)
    if n < 8:
        raise Degenerate(f"only {n} valid correspondences, need 8")
    rng = np.random.default_rng(cfg.seed)
    if n > cfg.max_points:
        keep = rng.choice(n, cfg.max_points, replace=False)
        b1, b2 = b1[keep], b2[keep]
        n = cfg.max_points
    if _rotation_residual(b1, b2) < cfg.rotation_tol:
        raise Degenerate("bearings explained by a pure rotation; "
                         "baseline unobservable")

    best_inliers = None
    best_count = -1
    for _ in range(cfg.iters):
        pick = rng.choice(n, 8, replace=False)
        try:
            e = _eight_point(b1[pick], b2[pick])
        except np.linalg.LinAlgError:
            continue
        inl = _sampson(e, b1, b2) < cfg.threshold
        count = int(np.count_nonzero(inl))
        if count > best_count:
            best_count = count
            best_inliers = inl
    if best_count < 8 or best_count < cfg.min_inlier_ratio * n:
        raise Degenerate(f"inlier ratio {max(best_count, 0) / n:.2f} "
                         f"below {cfg.min_inlier_ratio:.2f}")

    e = _eight_point(b1[best_inliers], b2[best_inliers])
    # cheirality vote on a bounded subset keeps the 2x2 solves cheap
    sub = np.flatnonzero(best_inliers)
    if len(sub) > 256:
        sub = sub[rng.choice(len(sub), 256, replace=False)]
    r, t = _decompose(e, b1[sub], b2[sub])
    return Pose(quat_from_matrix(r), t / np.linalg.norm(t))


# ---------------------------------------------------------------------------
# per-frame triangulation


def triangulate_frame(cmap, cam_intr, proj_intr, rel_pose, max_gap=None,
                      cam_pose=None):
    """Midpoint triangulation of every valid correspondence.

    The cloud lives in the camera frame of the given relative pose;
    pass cam_pose (world to camera) to lift it to world coordinates.
    Pairs with near-parallel rays, a ray gap above max_gap (default
    5% of the baseline), or a crossing behind either device are
    dropped.  Scaling the baseline by k scales the output by k.
    """
    baseline = float(np.linalg.norm(rel_pose.t))
    if baseline <= 0.0:
        raise ValueError("relative pose needs a positive baseline")
    if max_gap is None:
        max_gap = 0.05 * baseline
    b1, b2, pix = _correspondences(cmap, cam_intr, proj_intr)
    r = rel_pose.rotation_matrix()
    c2 = rel_pose.center()
    d2 = b2 @ r

    a11 = np.einsum("ij,ij->i", b1, b1)
    a22 = np.einsum("ij,ij->i", d2, d2)
    a12 = -np.einsum("ij,ij->i", b1, d2)
    r1 = b1 @ c2
    r2 = -(d2 @ c2)
    det = a11 * a22 - a12 * a12
    # det equals |b1 x d2|^2, so this bound is a squared sine of the
    # ray angle: parallel pairs never make it through
    ok = det > 1e-12 * a11 * a22
    det = np.where(ok, det, 1.0)
    l1 = (r1 * a22 - a12 * r2) / det
    l2 = (a11 * r2 - a12 * r1) / det

    p1 = l1[:, None] * b1
    p2 = c2 + l2[:, None] * d2
    gap = np.linalg.norm(p1 - p2, axis=1)
    keep = ok & (gap <= max_gap) & (l1 > 0.0) & (l2 > 0.0)
    mid = 0.5 * (p1[keep] + p2[keep])
    if cam_pose is not None:
        mid = cam_pose.inverse().apply(mid)
    return PointCloud(mid, pix[keep])


# ---------------------------------------------------------------------------
# ICP on a uniform spatial hash


def _median_spacing(pts, probe=512):
    """Median nearest-neighbor distance, estimated on a subsample."""
    n = len(pts)
    sel = np.arange(n) if n <= probe else np.linspace(
        0, n - 1, probe).astype(np.intp)
    d = np.linalg.norm(pts[sel, None, :] - pts[None, :, :], axis=2)
    d[np.arange(len(sel)), sel] = np.inf
    return float(np.median(d.min(axis=1)))


class _SpatialGrid:
    """Exact nearest neighbors over a uniform hash of the target cloud.

    Cell edge defaults to twice the median point spacing.  Queries scan
    the (2r+1)^3 block around their cell and grow r until the best hit
    is provably global (distance at most r cells).
    """

    def __init__(self, pts, cell=None):
        self.pts = np.asarray(pts, dtype=np.float64)
        if cell is None:
            cell = 2.0 * _median_spacing(self.pts)
        span = float(np.ptp(self.pts)) if len(self.pts) else 1.0
        self.cell = max(float(cell), 1e-12 * (1.0 + span))
        self.origin = self.pts.min(axis=0)
        keys = np.floor((self.pts - self.origin) / self.cell).astype(np.int64)
        order = np.lexsort((keys[:, 2], keys[:, 1], keys[:, 0]))
        sk = keys[order]
        cuts = np.flatnonzero(np.any(sk[1:] != sk[:-1], axis=1)) + 1
        self.buckets = {}
        start = 0
        for end in list(cuts) + [len(order)]:
            self.buckets[tuple(sk[start])] = order[start:end]
            start = end

    def _candidates(self, key, radius):
        out = []
        for dx in range(-radius, radius + 1):
            for dy in range(-radius, radius + 1):
                for dz in range(-radius, radius + 1):
                    b = self.buckets.get((key[0] + dx, key[1] + dy,
                                          key[2] + dz))
                    if b is not None:
                        out.append(b)
        return np.concatenate(out) if out else np.empty(0, dtype=np.intp)

    def nearest(self, q):
        """Indices and distances of the exact nearest target points."""
        q = np.asarray(q, dtype=np.float64)
        keys = np.floor((q - self.origin) / self.cell).astype(np.int64)
        idx = np.empty(len(q), dtype=np.intp)
        dist = np.empty(len(q))
        order = np.lexsort((keys[:, 2], keys[:, 1], keys[:, 0]))
        sk = keys[order]
        cuts = np.flatnonzero(np.any(sk[1:] != sk[:-1], axis=1)) + 1
        start = 0
        for end in list(cuts) + [len(order)]:
            group = order[start:end]
            key = tuple(sk[start])
            start = end
            radius = 1
            while True:
                cand = self._candidates(key, radius)
                if len(cand):
                    d = np.linalg.norm(
                        q[group][:, None, :] - self.pts[cand][None, :, :],
                        axis=2)
                    best = np.argmin(d, axis=1)
                    bd = d[np.arange(len(group)), best]
                    # a hit within radius cells cannot be beaten from
                    # outside the scanned block
                    if bd.max() <= radius * self.cell:
                        idx[group] = cand[best]
                        dist[group] = bd
                        break
                radius += 1
                if radius * self.cell > 4.0 * (1.0 + np.ptp(self.pts)):
                    d = np.linalg.norm(
                        q[group][:, None, :] - self.pts[None, :, :], axis=2)
                    best = np.argmin(d, axis=1)
                    idx[group] = best
                    dist[group] = d[np.arange(len(group)), best]
                    break
        return idx, dist


def _rigid_fit(p, q):
    """Closed-form rigid transform taking points p onto points q."""
    if len(p) < 3:
        raise IllConditioned(f"{len(p)} matched points cannot fix a "
                             f"rigid transform")
    pc = p.mean(axis=0)
    qc = q.mean(axis=0)
    h = (p - pc).T @ (q - qc)
    u, s, vt = np.linalg.svd(h)
    if s[2] < 1e-9 * max(s[0], 1e-300):
        raise IllConditioned("matched covariance rank below 3")
    d = np.linalg.det(vt.T) * np.linalg.det(u.T)
    r = (vt.T * np.array([1.0, 1.0, d])) @ u.T
    return Pose(quat_from_matrix(r), qc - r @ pc)


class IcpResult:
    """Final transform, its RMSE, and the per-iteration RMSE history."""

    __slots__ = ("transform", "rmse", "history")

    def __init__(self, transform, rmse, history):
        self.transform = transform
        self.rmse = float(rmse)
        self.history = np.asarray(history, dtype=np.float64)


def icp_align(source, target, max_iter=50, tol=1e-10, trim=None):
    """Rigid registration of the source cloud onto the target cloud.

    Alternates exact nearest-neighbor matching on a uniform spatial
    hash with the closed-form SVD fit, recording the RMSE over the
    current matches after every fit, and stops once the improvement
    drops below tol.  Matching every source point to its true nearest
    target and then refitting both shrink the same energy, so with full
    matching the recorded sequence never increases.

    trim, when set to a fraction in (0, 1], keeps only that share of
    the closest matches for the fit and the RMSE.  Partially
    overlapping clouds then register on their common support instead
    of letting unpaired points drag the minimum; the monotonicity
    guarantee applies only to the default full matching.
    """
    s = np.asarray(getattr(source, "points", source), dtype=np.float64)
    t = np.asarray(getattr(target, "points", target), dtype=np.float64)
    if len(s) < 3 or len(t) < 3:
        raise IllConditioned("both clouds need at least 3 points")
    if trim is not None and not 0.0 < trim <= 1.0:
        raise ValueError("trim must be a fraction in (0, 1]")
    grid = _SpatialGrid(t)
    total = Pose.identity()
    history = []
    prev = None
    for _ in range(int(max_iter)):
        moved = total.apply(s)
        nn, dist = grid.nearest(moved)
        if trim is not None:
            k = max(int(np.ceil(trim * len(s))), 3)
            sel = np.argpartition(dist, min(k, len(s)) - 1)[:k]
        else:
            sel = np.arange(len(s))
        matched = t[nn[sel]]
        step = _rigid_fit(moved[sel], matched)
        total = step.compose(total)
        resid = total.apply(s[sel]) - matched
        rmse = float(np.sqrt(np.mean(np.einsum("ij,ij->i", resid, resid))))
        history.append(rmse)
        if prev is not None and prev - rmse < tol:
            break
        prev = rmse
    return IcpResult(total, history[-1], history)


# ---------------------------------------------------------------------------
# chaining with a coarse start search

# Adjacent scan views can differ by tens of degrees, which is outside
# the basin of plain nearest-neighbor ICP.  The chain therefore seeds
# each pair from a small deterministic set of coarse guesses (principal
# normal aligned, in-plane rotation swept) plus the previous pair's
# answer, probes each with a few iterations, and refines the winner.

_SWEEP_STEPS = 12
_PROBE_ITERS = 8
# adjacent views share most but not all of their surface coverage; the
# chain fits on the best 70% of matches so the uncovered remainder
# cannot drag the registration
_CHAIN_TRIM = 0.7


def _principal_frame(pts):
    """Centroid and the least-variance axis, oriented toward +z."""
    c = pts.mean(axis=0)
    _, vecs = np.linalg.eigh(np.cov((pts - c).T))
    n = vecs[:, 0]
    if n[2] < 0:
        n = -n
    return c, n


def _axis_rotation(axis, angle):
    axis = axis / np.linalg.norm(axis)
    k = np.array([[0.0, -axis[2], axis[1]],
                  [axis[2], 0.0, -axis[0]],
                  [-axis[1], axis[0], 0.0]])
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)


def _coarse_starts(src, tgt):
    """Rigid guesses mapping the source cloud roughly onto the target."""
    cs, ns = _principal_frame(src)
    ct, nt = _principal_frame(tgt)
    cross = np.cross(ns, nt)
    norm = np.linalg.norm(cross)
    if norm > 1e-12:
        base = _axis_rotation(cross / norm,
                             np.arctan2(norm, float(ns @ nt)))
    else:
        base = np.eye(3)
    starts = []
    for k in range(_SWEEP_STEPS):
        r = _axis_rotation(nt, 2.0 * np.pi * k / _SWEEP_STEPS) @ base
        starts.append(Pose(quat_from_matrix(r), ct - r @ cs))
    return starts


def _estimate_normals(pts, k=12):
    """Unoriented unit normals from local PCA neighborhoods."""
    n = len(pts)
    k = min(k, n - 1)
    d = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=2)
    nb = np.argpartition(d, k, axis=1)[:, :k + 1]
    normals = np.empty((n, 3))
    for i in range(n):
        local = pts[nb[i]]
        _, vecs = np.linalg.eigh(np.cov((local - local.mean(0)).T))
        normals[i] = vecs[:, 0]
    return normals


def _plane_refine(src, tgt, normals, pose, iters=15, gate=3.0):
    """Linearized point-to-plane polish of an already close alignment.

    Point-to-point fits bottom out at a fraction of the sampling pitch
    because the two clouds sample different surface points; plane
    residuals only penalize the normal component, which removes that
    floor on smooth geometry.  Matches beyond gate times the median
    distance are ignored to keep uncovered regions out of the solve.
    """
    grid = _SpatialGrid(tgt)
    for _ in range(int(iters)):
        p = pose.apply(src)
        nn, dist = grid.nearest(p)
        keep = dist <= gate * max(float(np.median(dist)), 1e-300)
        if np.count_nonzero(keep) < 6:
            break
        pk = p[keep]
        q = tgt[nn[keep]]
        nrm = normals[nn[keep]]
        rhs = -np.einsum("ij,ij->i", nrm, pk - q)
        a = np.concatenate([np.cross(pk, nrm), nrm], axis=1)
        h = a.T @ a
        g = a.T @ rhs
        try:
            x = np.linalg.solve(h, g)
        except np.linalg.LinAlgError:
            break
        pose = apply_increment(pose, x)
        if np.linalg.norm(x) < 1e-14:
            break
    return pose


def _chain_align(source, target, warm, max_iter, tol):
    """Best-of-starts trimmed ICP between consecutive clouds.

    Starts are ranked by the median match distance over the whole
    source cloud, not the trimmed fit residual: a wrong basin can fit
    its trimmed subset tightly while stranding the majority.  The
    winning point-to-point alignment is polished with point-to-plane
    iterations.
    """
    grid = _SpatialGrid(target.points)
    cands = [warm] + _coarse_starts(source.points, target.points)
    best = None
    for t0 in cands:
        probe = icp_align(source.transformed(t0), target,
                          max_iter=_PROBE_ITERS, tol=tol, trim=_CHAIN_TRIM)
        probed = probe.transform.compose(t0)
        _, dist = grid.nearest(probed.apply(source.points))
        med = float(np.median(dist))
        if best is None or med < best[0]:
            best = (med, probed)
    res = icp_align(source.transformed(best[1]), target, max_iter=max_iter,
                    tol=tol, trim=_CHAIN_TRIM)
    coarse = res.transform.compose(best[1])
    return _plane_refine(source.points, target.points,
                         _estimate_normals(target.points), coarse)


# ---------------------------------------------------------------------------
# dataset-level assembly


def build_initial_frameset(root, mode, rot_deg=2.0, trans_frac=0.02, seed=0,
                           ransac_cfg=None, icp_iters=60, icp_tol=1e-10,
                           dump_clouds=False):
    """Load a dataset, install initial poses, and rewrite poses_init.txt.

    mode "perturb-gt" disturbs the stored ground truth by the exact
    requested magnitudes, keeping the frame-0 camera fixed as the gauge
    anchor; zero magnitudes reproduce the ground truth bit for bit.

    mode "autocalib-icp" estimates each frame's relative pose from its
    correspondence image, triangulates a per-frame cloud at unit
    baseline, chains consecutive clouds with ICP, and anchors the chain
    to the frame-0 ground-truth camera, taking the one free global
    scale from the frame-0 ground-truth baseline.  A frame whose
    relative pose is Degenerate gets its poses copied from the nearest
    estimated neighbor under a DegenerateFrameWarning.
    """
    fs, scene = load_frameset(root, poses="gt")
    n = len(fs)
    if mode == "perturb-gt":
        rng = np.random.default_rng(seed)
        for k, fr in enumerate(fs.frames):
            if rot_deg == 0.0 and trans_frac == 0.0:
                continue
            if k > 0:
                fr.cam_pose = perturb_pose(fr.cam_pose, rot_deg, trans_frac,
                                           rng, scene.diameter)
            fr.proj_pose = perturb_pose(fr.proj_pose, rot_deg, trans_frac,
                                        rng, scene.diameter)
    elif mode == "autocalib-icp":
        rels = []
        clouds = []
        for k, fr in enumerate(fs.frames):
            try:
                rel = estimate_relative_pose(fr.coords, fs.cam_intr,
                                             fs.proj_intr, ransac_cfg)
                cloud = triangulate_frame(fr.coords, fs.cam_intr,
                                          fs.proj_intr, rel)
                if len(cloud) < 3:
                    raise Degenerate("triangulation kept fewer than 3 points")
            except Degenerate as exc:
                warnings.warn(f"frame {k}: {exc}; poses copied from the "
                              f"nearest estimated neighbor",
                              DegenerateFrameWarning)
                rel, cloud = None, None
            rels.append(rel)
            clouds.append(cloud)
        good = [k for k in range(n) if rels[k] is not None]
        if not good:
            raise Degenerate("no frame produced a usable relative pose")

        if dump_clouds:
            cdir = os.path.join(root, "clouds")
            os.makedirs(cdir, exist_ok=True)
            for k in good:
                io.write_ply(os.path.join(cdir, f"frame_{k:04d}.ply"),
                             clouds[k].points,
                             np.zeros((0, 3), dtype=np.int64))

        gt0 = fs.frames[good[0]]
        scale = float(np.linalg.norm(
            gt0.proj_pose.compose(gt0.cam_pose.inverse()).t))
        # chain transform: frame-k cloud coordinates into the first
        # estimated frame's coordinates, warm-starting each pair with
        # the previous pair's answer (a ring advances by roughly the
        # same motion every step)
        to_anchor = {good[0]: Pose.identity()}
        warm = Pose.identity()
        for prev, cur in zip(good[:-1], good[1:]):
            step = _chain_align(clouds[cur], clouds[prev], warm,
                                icp_iters, icp_tol)
            warm = step
            to_anchor[cur] = to_anchor[prev].compose(step)

        cam0 = gt0.cam_pose
        for k in good:
            chain = to_anchor[k]
            chain_scaled = Pose(chain.q, scale * chain.t)
            cam_k = chain_scaled.inverse().compose(cam0)
            rel_scaled = Pose(rels[k].q, scale * rels[k].t)
            fs.frames[k].cam_pose = cam_k
            fs.frames[k].proj_pose = rel_scaled.compose(cam_k)
        for k in range(n):
            if rels[k] is None:
                near = min(good, key=lambda g: (abs(g - k), g))
                fs.frames[k].cam_pose = fs.frames[near].cam_pose.copy()
                fs.frames[k].proj_pose = fs.frames[near].proj_pose.copy()
    else:
        raise ValueError(f"unknown initialization mode {mode!r}")

    poses = {}
    for k, fr in enumerate(fs.frames):
        poses[(k, "cam")] = fr.cam_pose
        poses[(k, "proj")] = fr.proj_pose
    io.write_poses(os.path.join(root, io.POSES_INIT), poses)
    return fs
