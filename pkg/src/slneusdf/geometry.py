"""Pinhole device models, rigid poses, and camera/projector ray geometry.

Conventions used throughout the package:

* A :class:`Pose` maps world coordinates to device coordinates,
  ``p_dev = R @ p_world + t``.
* Devices (camera and projector alike) look down their local ``-z`` axis.
  A world point is in front of a device iff its device-frame ``z`` is
  negative.
* Pixel coordinates are continuous, ``(u, v)`` with ``u`` along the width
  axis, and valid inside ``[0, width) x [0, height)``.

All functions are pure and operate on float64 numpy arrays; batched
variants accept ``(..., 3)`` stacks of points.
"""

import numpy as np


class BehindDevice(ValueError):
    """Point at or behind the device principal plane (device-frame z >= 0)."""


class OutOfBounds(ValueError):
    """Pixel coordinate outside the sensor/pattern rectangle."""


# ---------------------------------------------------------------------------
# quaternion helpers (w, x, y, z ordering, Hamilton product)

def quat_normalize(q):
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if n == 0.0:
        raise ValueError("zero quaternion")
    if abs(n - 1.0) < 1e-12:
        # already unit to working precision; dividing would only churn bits
        return q.copy()
    return q / n


def quat_mul(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conj(q):
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_to_matrix(q):
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quat_from_axis_angle(w):
    """Quaternion for a rotation vector ``w`` (axis * angle, radians)."""
    w = np.asarray(w, dtype=np.float64)
    theta = np.linalg.norm(w)
    if theta < 1e-12:
        # first-order expansion, renormalized
        return quat_normalize(np.array([1.0, 0.5 * w[0], 0.5 * w[1], 0.5 * w[2]]))
    axis = w / theta
    s = np.sin(0.5 * theta)
    return np.array([np.cos(0.5 * theta), s * axis[0], s * axis[1], s * axis[2]])


def quat_from_matrix(m):
    """Unit quaternion from a proper rotation matrix (Shepperd's method)."""
    m = np.asarray(m, dtype=np.float64)
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = np.array([0.25 * s,
                      (m[2, 1] - m[1, 2]) / s,
                      (m[0, 2] - m[2, 0]) / s,
                      (m[1, 0] - m[0, 1]) / s])
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
        q = np.array([(m[2, 1] - m[1, 2]) / s,
                      0.25 * s,
                      (m[0, 1] + m[1, 0]) / s,
                      (m[0, 2] + m[2, 0]) / s])
    elif m[1, 1] > m[2, 2]:
        s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
        q = np.array([(m[0, 2] - m[2, 0]) / s,
                      (m[0, 1] + m[1, 0]) / s,
                      0.25 * s,
                      (m[1, 2] + m[2, 1]) / s])
    else:
        s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
        q = np.array([(m[1, 0] - m[0, 1]) / s,
                      (m[0, 2] + m[2, 0]) / s,
                      (m[1, 2] + m[2, 1]) / s,
                      0.25 * s])
    return quat_normalize(q)


def geodesic_angle(qa, qb):
    """Rotation angle (radians) between two unit quaternions."""
    d = abs(float(np.dot(qa, qb)))
    return 2.0 * np.arccos(min(d, 1.0))


# ---------------------------------------------------------------------------


class Pose:
    """Rigid world-to-device transform stored as unit quaternion + translation."""

    __slots__ = ("q", "t")

    def __init__(self, q=(1.0, 0.0, 0.0, 0.0), t=(0.0, 0.0, 0.0)):
        self.q = quat_normalize(np.asarray(q, dtype=np.float64))
        self.t = np.asarray(t, dtype=np.float64).reshape(3).copy()

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_matrix(cls, rotation, translation=(0.0, 0.0, 0.0)):
        return cls(quat_from_matrix(rotation), translation)

    @classmethod
    def from_axis_angle(cls, w, t=(0.0, 0.0, 0.0)):
        return cls(quat_from_axis_angle(w), t)

    def rotation_matrix(self):
        return quat_to_matrix(self.q)

    def apply(self, p):
        """Transform world point(s) ``p`` of shape (..., 3) into the device frame."""
        p = np.asarray(p, dtype=np.float64)
        return p @ self.rotation_matrix().T + self.t

    def compose(self, other):
        """Transform applying ``other`` first, then ``self``."""
        r = self.rotation_matrix()
        return Pose(quat_mul(self.q, other.q), r @ other.t + self.t)

    def inverse(self):
        r = self.rotation_matrix()
        return Pose(quat_conj(self.q), -(r.T @ self.t))

    def center(self):
        """Device origin expressed in world coordinates."""
        return -(self.rotation_matrix().T @ self.t)

    def copy(self):
        return Pose(self.q.copy(), self.t.copy())

    def __repr__(self):
        return f"Pose(q={self.q.tolist()}, t={self.t.tolist()})"


def apply_increment(pose, inc):
    """Compose a 6-vector increment (rotation vector, translation) onto a pose.

    The increment acts in the device frame: the updated transform maps a
    world point p to ``R(w) @ (pose.R @ p + pose.t) + d`` where ``inc``
    stacks ``(w, d)``.  The result is renormalized.
    """
    inc = np.asarray(inc, dtype=np.float64).reshape(6)
    dq = quat_from_axis_angle(inc[:3])
    dr = quat_to_matrix(dq)
    return Pose(quat_mul(dq, pose.q), dr @ pose.t + inc[3:])


class Intrinsics:
    """Pinhole intrinsics: focal lengths, principal point, sensor size in pixels."""

    __slots__ = ("alpha_x", "alpha_y", "beta_x", "beta_y", "width", "height")

    def __init__(self, alpha_x, alpha_y, beta_x, beta_y, width, height):
        if alpha_x <= 0 or alpha_y <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= beta_x < width and 0 <= beta_y < height):
            raise ValueError("principal point outside the sensor")
        self.alpha_x = float(alpha_x)
        self.alpha_y = float(alpha_y)
        self.beta_x = float(beta_x)
        self.beta_y = float(beta_y)
        self.width = int(width)
        self.height = int(height)

    def __repr__(self):
        return (f"Intrinsics(alpha=({self.alpha_x}, {self.alpha_y}), "
                f"beta=({self.beta_x}, {self.beta_y}), "
                f"size=({self.width}, {self.height}))")


class Ray:
    """World-space ray ``p(t) = origin + t * direction`` with unit direction."""

    __slots__ = ("origin", "direction")

    def __init__(self, origin, direction):
        self.origin = np.asarray(origin, dtype=np.float64).reshape(3).copy()
        d = np.asarray(direction, dtype=np.float64).reshape(3)
        n = np.linalg.norm(d)
        if n == 0.0:
            raise ValueError("zero ray direction")
        self.direction = d / n

    def at(self, t):
        return self.origin + np.multiply.outer(np.asarray(t, dtype=np.float64),
                                               self.direction)

    def __repr__(self):
        return f"Ray(origin={self.origin.tolist()}, direction={self.direction.tolist()})"


# ---------------------------------------------------------------------------
# projection and ray generation


def world_to_device(pose, p):
    """Express world point(s) ``p`` in the device frame of ``pose``."""
    return pose.apply(p)


def project_to_pattern(intr, pose, p):
    """Project a world point to 2D pixel coordinates of the device.

    Raises BehindDevice when the point is at or behind the device plane.
    """
    x, y, z = pose.apply(np.asarray(p, dtype=np.float64).reshape(3))
    if z >= 0.0:
        raise BehindDevice(f"device-frame z = {z:g} (needs z < 0)")
    return np.array([intr.alpha_x * x / (-z) + intr.beta_x,
                     intr.alpha_y * y / (-z) + intr.beta_y])


def project_points(intr, pose, pts, z_min=1e-12):
    """Batched projection of ``(..., 3)`` world points.

    Returns ``(coords, valid)`` where ``coords`` has shape ``(..., 2)`` and
    ``valid`` marks points strictly in front of the device.  Coordinates of
    invalid points are zero.
    """
    dev = pose.apply(pts)
    z = dev[..., 2]
    valid = z < -z_min
    inv = np.where(valid, -1.0 / np.where(valid, z, -1.0), 0.0)
    u = intr.alpha_x * dev[..., 0] * inv + np.where(valid, intr.beta_x, 0.0)
    v = intr.alpha_y * dev[..., 1] * inv + np.where(valid, intr.beta_y, 0.0)
    return np.stack([u, v], axis=-1), valid


def pixel_directions(intr, pixels):
    """Unit device-frame ray directions for ``(..., 2)`` pixel coordinates."""
    pixels = np.asarray(pixels, dtype=np.float64)
    d = np.stack([
        (pixels[..., 0] - intr.beta_x) / intr.alpha_x,
        (pixels[..., 1] - intr.beta_y) / intr.alpha_y,
        -np.ones(pixels.shape[:-1]),
    ], axis=-1)
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def camera_ray(intr, pose, pixel):
    """World-space viewing ray through a pixel.  Raises OutOfBounds."""
    u, v = float(pixel[0]), float(pixel[1])
    if not (0 <= u < intr.width and 0 <= v < intr.height):
        raise OutOfBounds(f"pixel ({u:g}, {v:g}) outside "
                          f"[0, {intr.width}) x [0, {intr.height})")
    d_dev = pixel_directions(intr, np.array([u, v]))
    r = pose.rotation_matrix()
    return Ray(-(r.T @ pose.t), r.T @ d_dev)


def camera_rays(intr, pose, pixels):
    """Batched camera_ray: returns ``(origin (3,), directions (..., 3))``.

    Out-of-bounds pixels are the caller's responsibility here; use
    :func:`camera_ray` for checked single-pixel access.
    """
    d_dev = pixel_directions(intr, pixels)
    r = pose.rotation_matrix()
    return -(r.T @ pose.t), d_dev @ r
