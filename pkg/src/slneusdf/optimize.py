"""Joint shape and pose refinement.

The loss is w_c * L_c + w_p * L_p + w_e * L_e: an L1 term on rendered
projector coordinates, a cosine term on rendered pattern brightness, and
an eikonal regularizer on the field.  Each iteration draws one frame's
pixel batch, renders it, and applies adaptive-moment updates to the field
and to that frame's camera/projector pose increments; the first frame's
camera stays fixed as the gauge anchor.
"""

import os

import numpy as np

from . import io
from .adam import Adam, FieldAdam
from .geometry import Pose, apply_increment, pixel_directions
from .render import (PatternTexture, RenderConfig, camera_increment_grads,
                     render_rays, render_rays_backward)
from .synth import read_scene


class EmptyBatch(ValueError):
    """No valid entries to average a loss over."""


class DegenerateBatch(ValueError):
    """A stacked pattern vector has vanishing norm."""


class EmptyMask(ValueError):
    """A frame mask with no pixels cannot be sampled."""


class LossWeights:
    __slots__ = ("w_c", "w_p", "w_e")

    def __init__(self, w_c=1000.0, w_p=0.05, w_e=0.01):
        if w_c < 0 or w_p < 0 or w_e < 0:
            raise ValueError("loss weights must be non-negative")
        self.w_c = float(w_c)
        self.w_p = float(w_p)
        self.w_e = float(w_e)


class OptimizerSchedule:
    __slots__ = ("max_iters", "inv_s_start", "inv_s_step", "inv_s_cap",
                 "lr_field_start", "lr_field_end", "lr_pose_start",
                 "lr_pose_end", "decay_end_iter", "pixels_per_iter",
                 "eikonal_samples")

    def __init__(self, max_iters=10000, inv_s_start=32.0, inv_s_step=0.02,
                 inv_s_cap=200.0, lr_field_start=5e-4, lr_field_end=5e-12,
                 lr_pose_start=1e-3, lr_pose_end=5e-12, decay_end_iter=8000,
                 pixels_per_iter=2024, eikonal_samples=512):
        if inv_s_start > inv_s_cap:
            raise ValueError("inv_s_start must not exceed inv_s_cap")
        for lr in (lr_field_start, lr_field_end, lr_pose_start, lr_pose_end):
            if lr <= 0:
                raise ValueError("learning rates must be positive")
        if pixels_per_iter < 1:
            raise ValueError("need at least one pixel per iteration")
        if decay_end_iter < 1:
            raise ValueError("decay_end_iter must be positive")
        self.max_iters = int(max_iters)
        self.inv_s_start = float(inv_s_start)
        self.inv_s_step = float(inv_s_step)
        self.inv_s_cap = float(inv_s_cap)
        self.lr_field_start = float(lr_field_start)
        self.lr_field_end = float(lr_field_end)
        self.lr_pose_start = float(lr_pose_start)
        self.lr_pose_end = float(lr_pose_end)
        self.decay_end_iter = int(decay_end_iter)
        self.pixels_per_iter = int(pixels_per_iter)
        self.eikonal_samples = int(eikonal_samples)


class Frame:
    """One scan: device poses plus target images.

    coords is (H, W, 2) in projector pixels, pattern (H, W), mask (H, W)
    boolean.  Masked pixels must carry finite coordinates.
    """

    __slots__ = ("cam_pose", "proj_pose", "coords", "pattern", "mask")

    def __init__(self, cam_pose, proj_pose, coords, pattern, mask):
        coords = np.asarray(coords, dtype=np.float64)
        pattern = np.asarray(pattern, dtype=np.float64)
        mask = np.asarray(mask).astype(bool)
        if coords.ndim != 3 or coords.shape[2] != 2:
            raise ValueError("coords must be (H, W, 2)")
        if pattern.shape != coords.shape[:2] or mask.shape != pattern.shape:
            raise ValueError("frame image dimensions disagree")
        if not np.isfinite(coords[mask]).all():
            raise ValueError("masked pixels must have finite coordinates")
        self.cam_pose = cam_pose
        self.proj_pose = proj_pose
        self.coords = coords
        self.pattern = pattern
        self.mask = mask


class FrameSet:
    """Frames plus the shared camera/projector intrinsics, the projected
    texture, and the scene bounding sphere used for ray depth ranges."""

    __slots__ = ("frames", "cam_intr", "proj_intr", "texture", "center",
                 "radius")

    def __init__(self, frames, cam_intr, proj_intr, texture, center, radius):
        if not frames:
            raise ValueError("need at least one frame")
        self.frames = list(frames)
        self.cam_intr = cam_intr
        self.proj_intr = proj_intr
        self.texture = texture
        self.center = np.asarray(center, dtype=np.float64).reshape(3)
        self.radius = float(radius)

    def __len__(self):
        return len(self.frames)

    def __getitem__(self, k):
        return self.frames[k]


# ---------------------------------------------------------------------------
# loss terms


def _coord_residual(rendered, target, valid, pattern_size):
    rendered = np.asarray(rendered, dtype=np.float64).reshape(-1, 2)
    target = np.asarray(target, dtype=np.float64).reshape(-1, 2)
    if len(rendered) != len(target):
        raise ValueError("batch sizes disagree")
    valid = np.asarray(valid, dtype=bool).reshape(-1)
    if not valid.any():
        raise EmptyBatch("no valid pixels in batch")
    diff = rendered - target
    if pattern_size is not None:
        diff = diff / np.asarray(pattern_size, dtype=np.float64)
    return diff, valid


def coord_loss(rendered, target, valid, pattern_size=None):
    """Mean absolute coordinate difference over valid components.

    pattern_size=(width, height) rescales coordinates to [0, 1] per axis
    first; None compares raw projector pixels.
    """
    diff, valid = _coord_residual(rendered, target, valid, pattern_size)
    return float(np.abs(diff[valid]).mean())


def _coord_loss_grad(rendered, target, valid, pattern_size):
    """(loss, d loss / d rendered); invalid rows get zero gradient."""
    diff, valid = _coord_residual(rendered, target, valid, pattern_size)
    n_comp = 2 * int(valid.sum())
    grad = np.sign(diff) / n_comp
    if pattern_size is not None:
        grad = grad / np.asarray(pattern_size, dtype=np.float64)
    grad[~valid] = 0.0
    return float(np.abs(diff[valid]).mean()), grad


def pattern_loss(rendered, target):
    """One minus the cosine of the stacked batch vectors."""
    return _pattern_loss_grad(rendered, target)[0]


def _pattern_loss_grad(rendered, target):
    a = np.asarray(rendered, dtype=np.float64).reshape(-1)
    b = np.asarray(target, dtype=np.float64).reshape(-1)
    if len(a) != len(b):
        raise ValueError("batch sizes disagree")
    if len(a) == 0:
        raise EmptyBatch("empty pattern batch")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < 1e-12 or nb < 1e-12:
        raise DegenerateBatch("stacked pattern vector has vanishing norm")
    cos = float(a @ b) / (na * nb)
    grad = -(b / (na * nb) - cos * a / (na * na))
    return 1.0 - cos, grad


def eikonal_loss(field, sample_points, eps=None):
    """Mean squared deviation of the spatial gradient norm from 1."""
    return _eikonal_terms(field, sample_points, eps)[0]


def _eikonal_terms(field, sample_points, eps):
    pts = np.asarray(sample_points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("need at least one sample point")
    grad = field.spatial_gradient(pts, eps)
    norms = np.linalg.norm(grad, axis=1)
    loss = float(np.mean((norms - 1.0) ** 2))
    return loss, grad, norms


def _eikonal_backward(field, pts, eps, scale, out):
    """Accumulate d(scale * eikonal_loss)/d params into ``out``.

    One taped forward over the 6-point stencil serves both the loss value
    and the chain back into the field parameters; the stencil offsets
    themselves carry no parameters.
    """
    if eps is None:
        eps = 1e-4 * field.diagonal
    n = len(pts)
    offsets = np.concatenate([eps * np.eye(3), -eps * np.eye(3)])
    shifted = (pts[None, :, :] + offsets[:, None, :]).reshape(-1, 3)
    values, tape = field.forward(shifted)
    values = values.astype(np.float64).reshape(6, n)
    grad = (values[:3] - values[3:]).T / (2.0 * eps)
    norms = np.linalg.norm(grad, axis=1)
    loss = float(np.mean((norms - 1.0) ** 2))
    safe = np.maximum(norms, 1e-12)
    d_grad = scale * 2.0 * (norms - 1.0)[:, None] * (grad / safe[:, None]) / n
    d_vals = np.concatenate([d_grad.T.reshape(-1), -d_grad.T.reshape(-1)])
    field.backward(tape, d_vals / (2.0 * eps), out=out, want_d_pts=False)
    return loss


class TotalLoss:
    """Loss value, its components, and the adjoints of one batch."""

    __slots__ = ("L", "L_c", "L_p", "L_e", "n_valid", "field_grads",
                 "d_cam", "d_proj")

    def __init__(self, L, L_c, L_p, L_e, n_valid, field_grads, d_cam, d_proj):
        self.L = L
        self.L_c = L_c
        self.L_p = L_p
        self.L_e = L_e
        self.n_valid = n_valid
        self.field_grads = field_grads
        self.d_cam = d_cam
        self.d_proj = d_proj


EMPTY_PIXEL_WSUM = 0.01


def total_loss(frames, field, weights, batch, cfg, rng=None,
               eikonal_samples=512, normalize_coords=True, use_pattern=True,
               want_grads=True, depth_range=None):
    """Weighted loss of one frame's pixel batch, with reverse-mode adjoints
    for the field and for that frame's camera/projector pose increments.

    batch is (frame_index, pixels (n, 2)).  Terms with zero weight are
    skipped entirely, so a zero-weight configuration costs nothing and
    returns exact zero gradients.  Rendered-empty pixels (weight sum under
    EMPTY_PIXEL_WSUM) drop out of the coordinate and pattern terms.
    """
    frame_idx, pixels = batch
    frame = frames[frame_idx]
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    w_p = weights.w_p if use_pattern else 0.0
    want_pattern = w_p > 0

    dirs_device = pixel_directions(frames.cam_intr, pixels)
    rot = frame.cam_pose.rotation_matrix()
    origin = -(rot.T @ frame.cam_pose.t)
    dirs = dirs_device @ rot

    res = render_rays(field, origin, dirs, frame.proj_pose, frames.proj_intr,
                      frames.texture if want_pattern else None, cfg,
                      frames.center, frames.radius, rng=rng,
                      want_tape=want_grads, depth_range=depth_range)
    valid = res.weight_sum >= EMPTY_PIXEL_WSUM

    cols = pixels[:, 0].astype(np.intp)
    rows = pixels[:, 1].astype(np.intp)
    target_c = frame.coords[rows, cols]
    target_p = frame.pattern[rows, cols]
    size = ((frames.proj_intr.width, frames.proj_intr.height)
            if normalize_coords else None)

    L_c = L_p = L_e = 0.0
    d_coord = d_pattern = None
    if weights.w_c > 0:
        if want_grads:
            L_c, g = _coord_loss_grad(res.coord_image, target_c, valid, size)
            d_coord = weights.w_c * g
        else:
            L_c = coord_loss(res.coord_image, target_c, valid, size)
    if want_pattern:
        if not valid.any():
            raise EmptyBatch("no valid pixels in batch")
        ls, g = _pattern_loss_grad(res.pattern_image[valid], target_p[valid])
        L_p = ls
        if want_grads:
            d_pattern = np.zeros(len(pixels))
            d_pattern[valid] = w_p * g

    grads = d_cam = d_proj = None
    if want_grads:
        grads, d_origins, d_dirs, d_pd, d_po = render_rays_backward(
            field, res.tape, d_coord=d_coord, d_pattern=d_pattern)
        dd, do = camera_increment_grads(frame.cam_pose, dirs_device,
                                        d_origins, d_dirs)
        d_cam = np.concatenate([do, dd])
        d_proj = np.concatenate([d_po, d_pd])

    if weights.w_e > 0 and eikonal_samples > 0:
        pts = _eikonal_points(field, res, origin, dirs, valid,
                              eikonal_samples, rng)
        if want_grads:
            L_e = _eikonal_backward(field, pts, None, weights.w_e, grads)
        else:
            L_e = eikonal_loss(field, pts)

    L = weights.w_c * L_c + w_p * L_p + weights.w_e * L_e
    return TotalLoss(L, L_c, L_p, L_e, int(valid.sum()), grads, d_cam, d_proj)


def _eikonal_points(field, res, origin, dirs, valid, n, rng):
    """Half uniform over the field bounds, half Gaussian around the batch's
    current surface estimates (weight-averaged ray depths, detached)."""
    if rng is None:
        rng = np.random.default_rng(0)
    n_uni = n // 2
    uni = rng.uniform(field.lo, field.hi, size=(n_uni, 3))
    n_surf = n - n_uni
    if valid.any() and res.tape is not None:
        w = res.tape.weights[valid]
        t_bar = (w * res.tape.depths[valid]).sum(axis=1) / w.sum(axis=1)
        surf = origin[None, :] + t_bar[:, None] * dirs[valid]
        pick = rng.integers(0, len(surf), size=n_surf)
        sigma = 0.03 * field.diagonal
        pts = surf[pick] + rng.normal(0.0, sigma, size=(n_surf, 3))
        pts = np.clip(pts, field.lo, field.hi)
        return np.concatenate([uni, pts])
    extra = rng.uniform(field.lo, field.hi, size=(n_surf, 3))
    return np.concatenate([uni, extra])


# ---------------------------------------------------------------------------
# sampling and schedules


def sample_pixels(frame, n, rng):
    """n pixel coordinates drawn uniformly from the frame mask, without
    replacement (with replacement when the mask is smaller than n)."""
    ii, jj = np.nonzero(frame.mask)
    m = len(ii)
    if m == 0:
        raise EmptyMask("frame mask is empty")
    idx = rng.choice(m, size=int(n), replace=(m < n))
    return np.stack([jj[idx], ii[idx]], axis=1).astype(np.float64)


def schedule_inv_s(sched, iteration):
    """Linear steepness ramp, clamped at the cap."""
    if iteration < 0:
        raise ValueError("iteration must be non-negative")
    return min(sched.inv_s_start + sched.inv_s_step * iteration,
               sched.inv_s_cap)


def schedule_lr(sched, iteration):
    """Exponential decay from start to end over [0, decay_end_iter],
    constant afterward.  Returns (lr_field, lr_pose)."""
    if iteration < 0:
        raise ValueError("iteration must be non-negative")
    u = min(iteration / sched.decay_end_iter, 1.0)
    if u >= 1.0:
        return sched.lr_field_end, sched.lr_pose_end
    lr_f = sched.lr_field_start * (sched.lr_field_end
                                   / sched.lr_field_start) ** u
    lr_p = sched.lr_pose_start * (sched.lr_pose_end
                                  / sched.lr_pose_start) ** u
    return lr_f, lr_p


# ---------------------------------------------------------------------------
# the update loop


class OptimizeResult:
    __slots__ = ("trace", "diverged", "iters_run")

    def __init__(self, trace, diverged, iters_run):
        self.trace = trace
        self.diverged = diverged
        self.iters_run = iters_run


def optimize(frames, field, weights, sched, rng, n_samples=64,
             freeze_poses=False, use_pattern_loss=True, anneal_s=True,
             normalize_coords=True, callback=None):
    """Run the joint update loop; mutates field and frame poses in place.

    Frames are visited round robin, one per iteration.  The first frame's
    camera pose is the gauge anchor and is never touched.  A non-finite
    loss aborts the loop; the partial trace is returned with the diverged
    flag set.  Identical seeds and inputs reproduce the trace bit for bit.
    """
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(int(rng))
    field_opt = FieldAdam(field)
    pose_opts = {}
    for k in range(len(frames)):
        pose_opts[(k, "cam")] = Adam(6)
        pose_opts[(k, "proj")] = Adam(6)

    trace = []
    diverged = False
    for it in range(sched.max_iters):
        k = it % len(frames)
        frame = frames[k]
        inv_s = schedule_inv_s(sched, it) if anneal_s else sched.inv_s_start
        lr_f, lr_p = schedule_lr(sched, it)
        pixels = sample_pixels(frame, sched.pixels_per_iter, rng)
        cfg = RenderConfig(inv_s=inv_s, n_samples=n_samples)
        out = total_loss(frames, field, weights, (k, pixels), cfg, rng=rng,
                         eikonal_samples=sched.eikonal_samples,
                         normalize_coords=normalize_coords,
                         use_pattern=use_pattern_loss)
        trace.append((it, out.L, out.L_c, out.L_p, out.L_e, inv_s, lr_f,
                      lr_p))
        if not np.isfinite(out.L):
            diverged = True
            break

        field_opt.step(out.field_grads, lr_f)
        if not freeze_poses:
            if k != 0:
                inc = pose_opts[(k, "cam")].step(np.zeros(6), out.d_cam, lr_p)
                frame.cam_pose = apply_increment(frame.cam_pose, inc)
            inc = pose_opts[(k, "proj")].step(np.zeros(6), out.d_proj, lr_p)
            frame.proj_pose = apply_increment(frame.proj_pose, inc)
        if callback is not None:
            callback(it, out)

    return OptimizeResult(np.asarray(trace, dtype=np.float64), diverged,
                          len(trace))


# ---------------------------------------------------------------------------
# run configuration and dataset loading


CONFIG_KEYS = ("max_iters", "pixels_per_iter", "n_samples", "inv_s_start",
               "inv_s_step", "inv_s_cap", "w_c", "w_p", "w_e",
               "lr_field_start", "lr_field_end", "lr_pose_start",
               "lr_pose_end", "decay_end_iter", "seed", "freeze_poses",
               "use_pattern_loss", "anneal_s")


class RunConfig:
    """Flat-file optimizer configuration; the three booleans switch the
    ablation arms (pose freezing, pattern loss, steepness annealing)."""

    __slots__ = CONFIG_KEYS

    def __init__(self, **kw):
        defaults = dict(max_iters=10000, pixels_per_iter=2024, n_samples=64,
                        inv_s_start=32.0, inv_s_step=0.02, inv_s_cap=200.0,
                        w_c=1000.0, w_p=0.05, w_e=0.01, lr_field_start=5e-4,
                        lr_field_end=5e-12, lr_pose_start=1e-3,
                        lr_pose_end=5e-12, decay_end_iter=8000, seed=0,
                        freeze_poses=False, use_pattern_loss=True,
                        anneal_s=True)
        unknown = set(kw) - set(CONFIG_KEYS)
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        defaults.update(kw)
        for key, value in defaults.items():
            setattr(self, key, value)

    def to_dict(self):
        return {key: getattr(self, key) for key in CONFIG_KEYS}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def save(self, path):
        io.write_config(path, self.to_dict())

    @classmethod
    def load(cls, path):
        return cls.from_dict(io.read_config(path))

    def loss_weights(self):
        return LossWeights(self.w_c, self.w_p, self.w_e)

    def schedule(self):
        return OptimizerSchedule(
            max_iters=self.max_iters, inv_s_start=self.inv_s_start,
            inv_s_step=self.inv_s_step, inv_s_cap=self.inv_s_cap,
            lr_field_start=self.lr_field_start,
            lr_field_end=self.lr_field_end,
            lr_pose_start=self.lr_pose_start, lr_pose_end=self.lr_pose_end,
            decay_end_iter=self.decay_end_iter,
            pixels_per_iter=self.pixels_per_iter)


def _single_channel(img):
    """Collapse an (H, W, 1) image container payload to its (H, W) grid."""
    if img.shape[2] != 1:
        raise io.FormatError(f"expected a single-channel image, "
                             f"got {img.shape[2]} channels")
    return img[:, :, 0]


def load_frameset(root, poses="init"):
    """Assemble a FrameSet from a dataset directory.

    poses selects which pose file seeds the optimization: "init"
    (perturbed) or "gt".
    """
    scene, cam_intr, proj_intr = read_scene(os.path.join(root, io.SCENE_FILE))
    if cam_intr is None or proj_intr is None:
        raise io.FormatError("scene file lacks intrinsics")
    texture = PatternTexture(
        _single_channel(io.read_fimg(os.path.join(root, io.PATTERN_FILE))))
    fname = {"init": io.POSES_INIT, "gt": io.POSES_GT}[poses]
    pose_map = io.read_poses(os.path.join(root, fname))
    n = io.count_frames(root)
    if n == 0:
        raise io.FormatError(f"no frames found under {root}")
    frames = []
    for k in range(n):
        coords = io.read_cmap(io.frame_file(root, k, "cmap"))
        pattern = _single_channel(io.read_fimg(io.frame_file(root, k, "fimg")))
        mask = io.read_mask(io.frame_file(root, k, "mask"),
                            coords.shape[1], coords.shape[0])
        frames.append(Frame(pose_map[(k, "cam")].copy(),
                            pose_map[(k, "proj")].copy(),
                            coords, pattern, mask))
    return FrameSet(frames, cam_intr, proj_intr, texture, scene.center,
                    0.5 * scene.diameter), scene


def run_from_config(frames, field, config, callback=None):
    """Drive optimize() from a RunConfig."""
    return optimize(frames, field, config.loss_weights(), config.schedule(),
                    np.random.default_rng(config.seed),
                    n_samples=config.n_samples,
                    freeze_poses=config.freeze_poses,
                    use_pattern_loss=config.use_pattern_loss,
                    anneal_s=config.anneal_s, callback=callback)
