"""Synthetic structured-light scanner: the ground-truth data oracle.

Scenes are unions of analytic signed-distance primitives, so surface
intersections come from sphere tracing rather than any learned component.
A frame's targets are computed per camera pixel: trace the ray, project the
hit into the projector, check projector-side occlusion by a second trace,
then bake in Gaussian decode noise and rectangular decode-failure dropouts.
"""

import os

import numpy as np

from . import io
from .geometry import (Intrinsics, Pose, camera_rays, project_points,
                       quat_from_axis_angle, quat_mul, quat_normalize,
                       quat_to_matrix)
from .render import PatternTexture, sample_texture


def _unit_axis(axis):
    # bit-stable on already-unit input so serialized axes round trip exactly
    axis = np.asarray(axis, dtype=np.float64).reshape(3)
    n = np.linalg.norm(axis)
    if n == 0:
        raise ValueError("axis must be nonzero")
    if abs(n - 1.0) <= 1e-12:
        return axis
    return axis / n


class Sphere:
    __slots__ = ("center", "radius")

    def __init__(self, center, radius):
        if radius <= 0:
            raise ValueError("radius must be positive")
        self.center = np.asarray(center, dtype=np.float64).reshape(3)
        self.radius = float(radius)

    def sdf(self, pts):
        return np.linalg.norm(pts - self.center, axis=-1) - self.radius


class Box:
    __slots__ = ("center", "half_extents")

    def __init__(self, center, half_extents):
        self.center = np.asarray(center, dtype=np.float64).reshape(3)
        self.half_extents = np.asarray(half_extents, dtype=np.float64).reshape(3)
        if np.any(self.half_extents <= 0):
            raise ValueError("half extents must be positive")

    def sdf(self, pts):
        q = np.abs(pts - self.center) - self.half_extents
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return outside + inside


class Cylinder:
    """Capped cylinder around ``center`` with unit ``axis``."""

    __slots__ = ("center", "axis", "radius", "half_height")

    def __init__(self, center, axis, radius, half_height):
        if radius <= 0 or half_height <= 0:
            raise ValueError("radius and half height must be positive")
        self.center = np.asarray(center, dtype=np.float64).reshape(3)
        self.axis = _unit_axis(axis)
        self.radius = float(radius)
        self.half_height = float(half_height)

    def sdf(self, pts):
        rel = pts - self.center
        along = rel @ self.axis
        radial = np.linalg.norm(rel - np.multiply.outer(along, self.axis),
                                axis=-1)
        dr = radial - self.radius
        dz = np.abs(along) - self.half_height
        outside = np.sqrt(np.maximum(dr, 0.0) ** 2 + np.maximum(dz, 0.0) ** 2)
        inside = np.minimum(np.maximum(dr, dz), 0.0)
        return outside + inside


class Cone:
    """Infinite solid cone: apex point, unit axis, half-angle in radians."""

    __slots__ = ("apex", "axis", "angle")

    def __init__(self, apex, axis, angle):
        if not 0.0 < angle < np.pi / 2:
            raise ValueError("half-angle must lie in (0, pi/2)")
        self.apex = np.asarray(apex, dtype=np.float64).reshape(3)
        self.axis = _unit_axis(axis)
        self.angle = float(angle)

    def sdf(self, pts):
        # reduce to the (radial, along-axis) half-plane; the boundary is the
        # ray from the apex with direction (sin a, cos a)
        rel = pts - self.apex
        t = rel @ self.axis
        r = np.linalg.norm(rel - np.multiply.outer(t, self.axis), axis=-1)
        ur, ut = np.sin(self.angle), np.cos(self.angle)
        proj = np.maximum(r * ur + t * ut, 0.0)
        dist = np.hypot(r - proj * ur, t - proj * ut)
        sign = np.where(r * ut - t * ur < 0.0, -1.0, 1.0)
        return sign * dist


class SyntheticScene:
    """Union (pointwise min) of analytic SDF primitives inside bounds."""

    __slots__ = ("primitives", "lo", "hi")

    def __init__(self, primitives, bounds):
        if not primitives:
            raise ValueError("scene needs at least one primitive")
        self.primitives = list(primitives)
        lo, hi = bounds
        self.lo = np.asarray(lo, dtype=np.float64).reshape(3)
        self.hi = np.asarray(hi, dtype=np.float64).reshape(3)
        if np.any(self.lo >= self.hi):
            raise ValueError("invalid bounds")

    @property
    def bounds(self):
        return self.lo, self.hi

    @property
    def center(self):
        return 0.5 * (self.lo + self.hi)

    @property
    def diameter(self):
        return float(np.linalg.norm(self.hi - self.lo))

    def sdf(self, pts):
        pts = np.asarray(pts, dtype=np.float64)
        values = self.primitives[0].sdf(pts)
        for prim in self.primitives[1:]:
            values = np.minimum(values, prim.sdf(pts))
        return values

    def __call__(self, pts):
        return self.sdf(pts)


class SceneField:
    """Adapter exposing a scene's exact SDF through the field interface,
    so the renderer can run on ground truth directly."""

    __slots__ = ("scene", "lo", "hi")

    def __init__(self, scene):
        self.scene = scene
        self.lo = scene.lo
        self.hi = scene.hi

    @property
    def diagonal(self):
        return float(np.linalg.norm(self.hi - self.lo))

    def forward(self, pts, want_tape=True):
        return self.scene.sdf(pts), None

    def __call__(self, pts):
        return self.scene.sdf(pts)


def scene_sdf(scene, p):
    """Scene SDF at a single point."""
    return float(scene.sdf(np.asarray(p, dtype=np.float64).reshape(3)))


def sphere_trace(scene, ray, max_steps=256, tol=1e-6, far=None):
    """March one ray to the scene surface; returns the hit point or None.

    Running out of steps or passing ``far`` counts as a miss.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    if far is None:
        far = 2.0 * scene.diameter + float(np.linalg.norm(
            ray.origin - scene.center))
    t, hit = _trace_batch(scene, ray.origin[None, :], ray.direction[None, :],
                          np.zeros(1), np.array([far]), max_steps, tol)
    if not hit[0]:
        return None
    return ray.at(float(t[0]))


def _trace_batch(scene, origins, dirs, near, far, max_steps=256, tol=1e-6):
    """Vectorized sphere tracing; returns (t, hit) per ray."""
    n = len(dirs)
    origins = np.broadcast_to(origins, dirs.shape)
    t = near.astype(np.float64).copy()
    hit = np.zeros(n, dtype=bool)
    active = t < far
    for _ in range(max_steps):
        if not active.any():
            break
        idx = np.flatnonzero(active)
        p = origins[idx] + t[idx, None] * dirs[idx]
        d = scene.sdf(p)
        newly_hit = d < tol
        hit[idx[newly_hit]] = True
        t[idx] += d
        active[idx] = ~newly_hit & (t[idx] <= far[idx])
    return t, hit


class PatternSpec:
    """Procedural gap-coded grid pattern parameters."""

    __slots__ = ("width", "height", "pitch", "line_width", "gap_size", "seed")

    def __init__(self, width=256, height=256, pitch=16, line_width=2,
                 gap_size=2, seed=0):
        if line_width < 1 or pitch <= line_width:
            raise ValueError("need pitch > line_width >= 1")
        if gap_size < 0:
            raise ValueError("gap size must be non-negative")
        self.width = int(width)
        self.height = int(height)
        self.pitch = int(pitch)
        self.line_width = int(line_width)
        self.gap_size = int(gap_size)
        self.seed = int(seed)


def generate_pattern(spec):
    """Render the gap-coded grid: bright lines on dark background, and at
    each node one of five code symbols (no displacement, horizontal segment
    shifted up/down, vertical segment shifted left/right).

    Segments are moved rather than erased, which keeps the bright-pixel
    fraction at the plain-grid coverage.
    """
    h, w, lw = spec.height, spec.width, spec.line_width
    img = np.zeros((h, w))
    rows = np.arange(0, h, spec.pitch)
    cols = np.arange(0, w, spec.pitch)
    for r in rows:
        img[r:r + lw, :] = 1.0
    for c in cols:
        img[:, c:c + lw] = 1.0

    rng = np.random.default_rng(spec.seed)
    seg = max(spec.pitch // 3, 1)
    g = spec.gap_size
    for r in rows:
        for c in cols:
            code = int(rng.integers(5))
            if code == 0 or g == 0:
                continue
            if code in (1, 2):
                # displace part of the horizontal line right of the node
                c0, c1 = min(c + lw, w), min(c + lw + seg, w)
                shift = -g if code == 1 else g
                r2 = min(max(r + shift, 0), h - lw)
                img[r:r + lw, c0:c1] = 0.0
                img[r2:r2 + lw, c0:c1] = 1.0
            else:
                # displace part of the vertical line below the node
                r0, r1 = min(r + lw, h), min(r + lw + seg, h)
                shift = -g if code == 3 else g
                c2 = min(max(c + shift, 0), w - lw)
                img[r0:r1, c:c + lw] = 0.0
                img[r0:r1, c2:c2 + lw] = 1.0
    return PatternTexture(img)


class NoiseSpec:
    """Measurement degradation: Gaussian noise on decoded coordinates (in
    projector pixels) and pattern intensities, plus rectangular decode
    dropouts cleared from the mask."""

    __slots__ = ("sigma_coord", "sigma_pattern", "dropout_count",
                 "dropout_frac", "seed")

    def __init__(self, sigma_coord=0.0, sigma_pattern=0.0, dropout_count=3,
                 dropout_frac=0.10, seed=0):
        if sigma_coord < 0 or sigma_pattern < 0:
            raise ValueError("noise levels must be non-negative")
        if not 0.0 <= dropout_frac < 1.0:
            raise ValueError("dropout fraction must lie in [0, 1)")
        self.sigma_coord = float(sigma_coord)
        self.sigma_pattern = float(sigma_pattern)
        self.dropout_count = int(dropout_count)
        self.dropout_frac = float(dropout_frac)
        self.seed = int(seed)


def synth_frame(scene, cam_pose, cam_intr, proj_pose, proj_intr, texture,
                noise=None):
    """Ground-truth correspondence image, pattern image, and mask.

    Per pixel: sphere-trace the camera ray; on a hit, project the point
    into the projector and keep it only if the projector actually sees it
    (second trace toward the projector center) and the coordinate lands
    inside the pattern.  Gaussian noise and dropout rectangles from
    ``noise`` are applied afterward.
    """
    h, w = cam_intr.height, cam_intr.width
    jj, ii = np.meshgrid(np.arange(w, dtype=np.float64),
                         np.arange(h, dtype=np.float64))
    pixels = np.stack([jj.ravel(), ii.ravel()], axis=1)
    origin, dirs = camera_rays(cam_intr, cam_pose, pixels)

    center = scene.center
    radius = 0.5 * scene.diameter
    oc = origin - center
    b = dirs @ oc
    disc = b * b - (oc @ oc - radius * radius)
    near = np.maximum(-b - np.sqrt(np.maximum(disc, 0.0)), 0.0)
    far = -b + np.sqrt(np.maximum(disc, 0.0))
    sphere_hit = (disc > 0.0) & (far > near)
    far = np.where(sphere_hit, far, 0.0)

    t, hit = _trace_batch(scene, origin[None, :], dirs, near, far)
    hit &= sphere_hit
    points = origin[None, :] + t[:, None] * dirs

    coords = np.zeros((h * w, 2))
    visible = hit.copy()
    if hit.any():
        p_hit = points[hit]
        c, in_front = project_points(proj_intr, proj_pose, p_hit)
        inside = (in_front
                  & (c[:, 0] >= 0.0) & (c[:, 0] < proj_intr.width)
                  & (c[:, 1] >= 0.0) & (c[:, 1] < proj_intr.height))
        # shadow test: walk from the surface toward the projector center
        # and see whether anything intervenes
        proj_center = proj_pose.center()
        to_proj = proj_center[None, :] - p_hit
        dist = np.linalg.norm(to_proj, axis=1)
        to_proj /= dist[:, None]
        lift = 1e-3 * scene.diameter
        t2, blocked = _trace_batch(
            scene, p_hit + lift * to_proj, to_proj,
            np.zeros(len(p_hit)), dist - 2.0 * lift, tol=1e-6)
        keep = inside & ~blocked
        visible[np.flatnonzero(hit)[~keep]] = False
        coords[np.flatnonzero(hit)[keep]] = c[keep]

    mask = visible.reshape(h, w)
    coord_img = coords.reshape(h, w, 2)
    pattern_img = np.zeros((h, w))
    if visible.any():
        pattern_img.ravel()[visible] = sample_texture(
            texture, coords[visible])

    if noise is not None:
        rng = np.random.default_rng(noise.seed)
        if noise.sigma_coord > 0:
            coord_img = coord_img + rng.normal(
                0.0, noise.sigma_coord, size=coord_img.shape)
        if noise.sigma_pattern > 0:
            pattern_img = pattern_img + rng.normal(
                0.0, noise.sigma_pattern, size=pattern_img.shape)
        side_h = max(int(round(noise.dropout_frac * h)), 1)
        side_w = max(int(round(noise.dropout_frac * w)), 1)
        for _ in range(noise.dropout_count):
            r = int(rng.integers(0, max(h - side_h, 1)))
            c = int(rng.integers(0, max(w - side_w, 1)))
            mask[r:r + side_h, c:c + side_w] = False

    # invalid pixels carry NaN in the correspondence image (the on-disk
    # convention readers rely on); the intensity image stays zero there
    coord_img = np.where(mask[:, :, None], coord_img, np.nan)
    pattern_img = np.where(mask, pattern_img, 0.0)
    return (coord_img.astype(np.float32), pattern_img.astype(np.float32),
            mask.astype(np.uint8))


def perturb_pose(pose, rot_deg, trans_frac, rng, diameter=1.0):
    """Compose an exact-magnitude random disturbance onto a pose.

    The rotation has geodesic angle exactly rot_deg (degrees); the
    translation offset has norm exactly trans_frac * diameter.
    """
    if rot_deg < 0 or trans_frac < 0:
        raise ValueError("perturbation magnitudes must be non-negative")

    def rand_unit():
        v = rng.normal(size=3)
        n = np.linalg.norm(v)
        while n < 1e-12:
            v = rng.normal(size=3)
            n = np.linalg.norm(v)
        return v / n

    axis = rand_unit()
    offset_dir = rand_unit()
    dq = quat_from_axis_angle(axis * np.deg2rad(rot_deg))
    new_q = quat_normalize(quat_mul(dq, pose.q))
    new_t = quat_to_matrix(dq) @ pose.t + trans_frac * diameter * offset_dir
    return Pose(new_q, new_t)


def look_at(eye, target, up=(0.0, 0.0, 1.0)):
    """World-to-device pose for a device at ``eye`` looking at ``target``.

    The device looks down its -z axis; ``up`` picks the roll.
    """
    eye = np.asarray(eye, dtype=np.float64).reshape(3)
    target = np.asarray(target, dtype=np.float64).reshape(3)
    fwd = target - eye
    n = np.linalg.norm(fwd)
    if n < 1e-12:
        raise ValueError("eye and target coincide")
    fwd /= n
    z = -fwd
    up = np.asarray(up, dtype=np.float64).reshape(3)
    x = np.cross(up, z)
    nx = np.linalg.norm(x)
    if nx < 1e-9:
        # looking straight along up: fall back to a fixed reference roll
        x = np.cross((1.0, 0.0, 0.0), z)
        nx = np.linalg.norm(x)
    x /= nx
    y = np.cross(z, x)
    rot = np.stack([x, y, z])          # rows: device axes in world coords
    return Pose.from_matrix(rot, -rot @ eye)


def ring_poses(n_frames, ring_radius, height, baseline, rng,
               target=(0.0, 0.0, 0.0)):
    """Camera/projector pose pairs on a viewing ring around the z axis.

    Cameras sit evenly spaced at the given height; each projector is
    displaced from its camera by a random direction of constant norm
    ``baseline`` and aimed at the same target.
    """
    target = np.asarray(target, dtype=np.float64)
    pairs = []
    for k in range(n_frames):
        theta = 2.0 * np.pi * k / n_frames
        eye = target + np.array([ring_radius * np.cos(theta),
                                 ring_radius * np.sin(theta), height])
        cam = look_at(eye, target)
        off = rng.normal(size=3)
        off /= np.linalg.norm(off)
        proj = look_at(eye + baseline * off, target)
        pairs.append((cam, proj))
    return pairs


def write_scene(path, scene, cam_intr=None, proj_intr=None):
    """Scene description text: bounds, optional intrinsics, one primitive
    per line."""
    fmt = io._fmt_float
    with open(path, "w") as f:
        f.write("bounds " + " ".join(fmt(x) for x in (*scene.lo, *scene.hi))
                + "\n")
        for name, intr in (("camera_intr", cam_intr),
                           ("projector_intr", proj_intr)):
            if intr is not None:
                f.write(f"{name} {fmt(intr.alpha_x)} {fmt(intr.alpha_y)} "
                        f"{fmt(intr.beta_x)} {fmt(intr.beta_y)} "
                        f"{intr.width} {intr.height}\n")
        for prim in scene.primitives:
            if isinstance(prim, Sphere):
                nums = (*prim.center, prim.radius)
                f.write("sphere " + " ".join(fmt(x) for x in nums) + "\n")
            elif isinstance(prim, Box):
                nums = (*prim.center, *prim.half_extents)
                f.write("box " + " ".join(fmt(x) for x in nums) + "\n")
            elif isinstance(prim, Cylinder):
                nums = (*prim.center, *prim.axis, prim.radius,
                        prim.half_height)
                f.write("cylinder " + " ".join(fmt(x) for x in nums) + "\n")
            elif isinstance(prim, Cone):
                nums = (*prim.apex, *prim.axis, prim.angle)
                f.write("cone " + " ".join(fmt(x) for x in nums) + "\n")
            else:
                raise ValueError(f"unknown primitive {type(prim).__name__}")


def read_scene(path):
    """Inverse of write_scene; returns (scene, cam_intr, proj_intr)."""
    prims = []
    bounds = None
    cam_intr = proj_intr = None
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            kind, *rest = line.split()
            vals = [float(x) for x in rest]
            try:
                if kind == "bounds":
                    bounds = (vals[:3], vals[3:6])
                elif kind in ("camera_intr", "projector_intr"):
                    intr = Intrinsics(*vals[:4], int(vals[4]), int(vals[5]))
                    if kind == "camera_intr":
                        cam_intr = intr
                    else:
                        proj_intr = intr
                elif kind == "sphere":
                    prims.append(Sphere(vals[:3], vals[3]))
                elif kind == "box":
                    prims.append(Box(vals[:3], vals[3:6]))
                elif kind == "cylinder":
                    prims.append(Cylinder(vals[:3], vals[3:6], vals[6],
                                          vals[7]))
                elif kind == "cone":
                    prims.append(Cone(vals[:3], vals[3:6], vals[6]))
                else:
                    raise ValueError(f"unknown entry {kind!r}")
            except (IndexError, ValueError) as e:
                raise io.FormatError(f"{path}:{lineno}: {e}") from e
    if bounds is None:
        raise io.FormatError(f"{path}: missing bounds line")
    return SyntheticScene(prims, bounds), cam_intr, proj_intr


def synth_dataset(root, scene, pattern_spec, pose_pairs, cam_intr, proj_intr,
                  noise=None, init_rot_deg=0.0, init_trans_frac=0.0, seed=0,
                  config=None):
    """Write a complete scan dataset directory.

    pose_pairs holds the ground-truth (camera, projector) pose per frame.
    Initial poses are the ground truth disturbed by exactly init_rot_deg
    and init_trans_frac of the scene diameter, except the first camera,
    which stays exact: it is the gauge anchor the optimizer holds fixed.
    Each frame gets its own decorrelated noise stream.
    """
    os.makedirs(root, exist_ok=True)
    texture = generate_pattern(pattern_spec)
    io.write_fimg(os.path.join(root, io.PATTERN_FILE), texture.intensities)

    rng = np.random.default_rng(seed)
    gt, init = {}, {}
    for k, (cam, proj) in enumerate(pose_pairs):
        frame_noise = None
        if noise is not None:
            frame_noise = NoiseSpec(noise.sigma_coord, noise.sigma_pattern,
                                    noise.dropout_count, noise.dropout_frac,
                                    noise.seed + 7919 * k)
        coord, pattern, mask = synth_frame(scene, cam, cam_intr, proj, proj_intr,
                                           texture, frame_noise)
        io.write_cmap(io.frame_file(root, k, "cmap"), coord)
        io.write_fimg(io.frame_file(root, k, "fimg"), pattern)
        io.write_mask(io.frame_file(root, k, "mask"), mask)
        gt[(k, "cam")], gt[(k, "proj")] = cam, proj
        for device, pose in (("cam", cam), ("proj", proj)):
            if k == 0 and device == "cam":
                init[(k, device)] = pose.copy()
            else:
                init[(k, device)] = perturb_pose(pose, init_rot_deg,
                                                 init_trans_frac, rng,
                                                 scene.diameter)
    io.write_poses(os.path.join(root, io.POSES_GT), gt)
    io.write_poses(os.path.join(root, io.POSES_INIT), init)
    write_scene(os.path.join(root, io.SCENE_FILE), scene, cam_intr, proj_intr)
    if config is not None:
        io.write_config(os.path.join(root, io.CONFIG_FILE), config)


def make_benchmark_scene():
    """Statue stand-in: a cone and a cylinder standing on a ground slab.

    The slab is thick enough that the cone's infinite tail stays buried
    inside it down to near the domain floor.
    """
    prims = [
        Cone(apex=(0.25, 0.05, 0.55), axis=(0.02, -0.01, -1.0),
             angle=np.deg2rad(22.0)),
        Cylinder(center=(-0.28, -0.05, -0.15), axis=(0.0, 0.0, 1.0),
                 radius=0.21, half_height=0.33),
        Box(center=(0.0, 0.0, -0.715), half_extents=(0.85, 0.85, 0.235)),
    ]
    return SyntheticScene(prims, ((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0)))
