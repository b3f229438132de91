"""Planar rigid transforms for end-effector frame alignment.

Poses are [x, y, theta] rows; a transform rotates the position by `angle`,
then translates, and adds `angle` to the heading. Composition and inversion
follow SE(2); headings are always wrapped to (-pi, pi].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def wrap_angle(theta):
    """Wrap angle(s) to the half-open interval (-pi, pi].

    In-range values pass through bit-exactly (k = 0 subtracts nothing), so
    wrapping an already-wrapped angle is the identity.
    """
    theta = np.asarray(theta, dtype=np.float64)
    k = np.ceil((theta - np.pi) / (2.0 * np.pi))
    wrapped = theta - 2.0 * np.pi * k
    return wrapped if wrapped.ndim else float(wrapped)


@dataclass(frozen=True)
class Rigid2D:
    """Rotation by `angle` followed by translation by (tx, ty)."""

    angle: float
    tx: float
    ty: float

    @staticmethod
    def identity() -> "Rigid2D":
        return Rigid2D(0.0, 0.0, 0.0)

    def matrix(self) -> np.ndarray:
        c, s = np.cos(self.angle), np.sin(self.angle)
        return np.array([[c, -s, self.tx], [s, c, self.ty], [0.0, 0.0, 1.0]])

    def apply(self, poses: np.ndarray) -> np.ndarray:
        """Map (..., 3) poses [x, y, theta] into the target frame."""
        poses = np.asarray(poses, dtype=np.float64)
        c, s = np.cos(self.angle), np.sin(self.angle)
        x, y, theta = poses[..., 0], poses[..., 1], poses[..., 2]
        out = np.empty_like(poses)
        out[..., 0] = c * x - s * y + self.tx
        out[..., 1] = s * x + c * y + self.ty
        out[..., 2] = wrap_angle(theta + self.angle)
        return out

    def compose(self, inner: "Rigid2D") -> "Rigid2D":
        """self o inner: apply `inner` first, then self."""
        c, s = np.cos(self.angle), np.sin(self.angle)
        return Rigid2D(
            angle=float(wrap_angle(self.angle + inner.angle)),
            tx=float(c * inner.tx - s * inner.ty + self.tx),
            ty=float(s * inner.tx + c * inner.ty + self.ty),
        )

    def inverse(self) -> "Rigid2D":
        c, s = np.cos(self.angle), np.sin(self.angle)
        return Rigid2D(
            angle=float(wrap_angle(-self.angle)),
            tx=float(-(c * self.tx + s * self.ty)),
            ty=float(-(-s * self.tx + c * self.ty)),
        )

    def to_json(self) -> dict:
        return {"angle": self.angle, "translation": [self.tx, self.ty]}

    @staticmethod
    def from_json(obj: dict) -> "Rigid2D":
        t = obj["translation"]
        return Rigid2D(float(obj["angle"]), float(t[0]), float(t[1]))
