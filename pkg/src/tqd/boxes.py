"""BEV box type and its regression parameterisation."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

N_BOX_PARAMS = 10  # center offset (3), log size (3), sin/cos yaw (2), velocity (2)


def wrap_angle(theta: float) -> float:
    """Wrap to (-pi, pi]."""
    t = math.fmod(theta + math.pi, 2 * math.pi)
    if t <= 0:
        t += 2 * math.pi
    return t - math.pi


@dataclass(frozen=True)
class BevBox:
    center: tuple[float, float, float]
    size: tuple[float, float, float]
    yaw: float = 0.0
    velocity: tuple[float, float] = (0.0, 0.0)
    instance_id: int | None = None
    score: float = 1.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        object.__setattr__(self, "size", tuple(float(s) for s in self.size))
        object.__setattr__(self, "velocity", tuple(float(v) for v in self.velocity))
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))
        if len(self.center) != 3 or len(self.size) != 3 or len(self.velocity) != 2:
            raise ValueError("center/size need 3 components, velocity needs 2")
        if min(self.size) <= 0:
            raise ValueError(f"box sizes must be positive, got {self.size}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must lie in [0, 1], got {self.score}")

    def with_center(self, center) -> "BevBox":
        return replace(self, center=tuple(center))

    def with_velocity(self, velocity) -> "BevBox":
        return replace(self, velocity=tuple(velocity))

    def advanced(self, dt: float) -> "BevBox":
        """Constant-velocity motion update in the BEV plane; z is unchanged."""
        x, y, z = self.center
        vx, vy = self.velocity
        return replace(self, center=(x + vx * dt, y + vy * dt, z))


def box_targets(boxes: list[BevBox], refs: np.ndarray, ref_velocity: np.ndarray | None = None) -> np.ndarray:
    """Regression targets of ``boxes`` relative to reference points (n × 10).

    With ``ref_velocity`` the velocity target is the residual on it.
    """
    out = np.zeros((len(boxes), N_BOX_PARAMS))
    for i, b in enumerate(boxes):
        out[i, 0:3] = np.asarray(b.center) - refs[i]
        out[i, 3:6] = np.log(b.size)
        out[i, 6] = math.sin(b.yaw)
        out[i, 7] = math.cos(b.yaw)
        out[i, 8:10] = b.velocity
    if ref_velocity is not None:
        out[:, 8:10] -= ref_velocity
    return out


def decode_boxes(params: np.ndarray, refs: np.ndarray, scores: np.ndarray | None = None,
                 ref_velocity: np.ndarray | None = None) -> list[BevBox]:
    """Inverse of :func:`box_targets`.  Log-sizes are clipped to keep exp finite."""
    boxes = []
    for i in range(params.shape[0]):
        p = np.array(params[i], dtype=np.float64)
        if ref_velocity is not None:
            p[8:10] += ref_velocity[i]
        size = np.exp(np.clip(p[3:6], -6.0, 6.0))
        yaw = math.atan2(p[6], p[7])
        s = 1.0 if scores is None else float(scores[i])
        boxes.append(BevBox(tuple(refs[i] + p[0:3]), tuple(size), yaw, tuple(p[8:10]), None, s))
    return boxes


def centers(boxes: list[BevBox]) -> np.ndarray:
    return np.array([b.center for b in boxes], dtype=np.float64).reshape(-1, 3)


def velocities(boxes: list[BevBox]) -> np.ndarray:
    return np.array([b.velocity for b in boxes], dtype=np.float64).reshape(-1, 2)


@dataclass(frozen=True)
class TrackOutput:
    """One reported track hypothesis in one frame."""

    track_id: int
    box: BevBox
    score: float
