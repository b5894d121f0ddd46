from __future__ import annotations

from dataclasses import dataclass
from typing import List, Tuple

import numpy as np
from scipy.spatial.transform import Rotation

MAX_TRANSLATION_M = 1.0
MAX_ROTATION_RAD = 0.05


class OutOfRangeError(ValueError):
    pass


@dataclass(frozen=True)
class PoseCorrection:
    t: np.ndarray
    theta: np.ndarray  # omega, phi, kappa

    def __post_init__(self) -> None:
        object.__setattr__(self, "t", np.asarray(self.t, dtype=np.float64).reshape(3))
        object.__setattr__(self, "theta", np.asarray(self.theta, dtype=np.float64).reshape(3))

    @classmethod
    def zero(cls) -> "PoseCorrection":
        return cls(np.zeros(3), np.zeros(3))

    @classmethod
    def from_vector(cls, vec: np.ndarray) -> "PoseCorrection":
        v = np.asarray(vec, dtype=np.float64).reshape(6)
        return cls(v[:3], v[3:])

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.t, self.theta])

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.t)) and np.all(np.isfinite(self.theta)))

    def within_bounds(self) -> bool:
        return (
            self.is_finite()
            and float(np.linalg.norm(self.t)) <= MAX_TRANSLATION_M
            and float(np.linalg.norm(self.theta)) <= MAX_ROTATION_RAD
        )


@dataclass
class AnchorChain:
    """
    Pose corrections of one trajectory, one 6-vector (t, theta) per anchor.
    Anchor k sits at arc-length arc_origin + k * spacing.
    """

    trajectory_id: int
    values: np.ndarray
    spacing: float = 0.5
    arc_origin: float = 0.0

    def __post_init__(self) -> None:
        self.values = np.array(self.values, dtype=np.float64).reshape(-1, 6)
        if self.values.shape[0] < 1:
            raise ValueError("Anchor chain needs at least one anchor.")
        if not self.spacing > 0.0:
            raise ValueError(f"Anchor spacing must be positive, got {self.spacing}.")

    @classmethod
    def zeros(cls, trajectory_id: int, n: int, spacing: float = 0.5, arc_origin: float = 0.0) -> "AnchorChain":
        return cls(trajectory_id, np.zeros((max(int(n), 1), 6)), spacing, arc_origin)

    @classmethod
    def covering(cls, trajectory_id: int, arc_min: float, arc_max: float, spacing: float = 0.5) -> "AnchorChain":
        origin = float(np.floor(arc_min / spacing) * spacing)
        n = int(np.ceil((arc_max - origin) / spacing - 1e-12)) + 1
        return cls.zeros(trajectory_id, max(n, 2), spacing, origin)

    @property
    def n(self) -> int:
        return int(self.values.shape[0])

    @property
    def arc_end(self) -> float:
        return self.arc_origin + (self.n - 1) * self.spacing

    @property
    def anchors(self) -> List[PoseCorrection]:
        return [PoseCorrection.from_vector(v) for v in self.values]

    def anchor_arcs(self) -> np.ndarray:
        return self.arc_origin + self.spacing * np.arange(self.n, dtype=np.float64)

    def copy(self) -> "AnchorChain":
        return AnchorChain(self.trajectory_id, self.values.copy(), self.spacing, self.arc_origin)


@dataclass(frozen=True)
class PlaneTarget:
    w: np.ndarray
    s: np.ndarray

    def __post_init__(self) -> None:
        w = np.asarray(self.w, dtype=np.float64).reshape(3)
        if abs(float(np.linalg.norm(w)) - 1.0) > 1e-9:
            raise ValueError("Plane normal must be a unit vector.")
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "s", np.asarray(self.s, dtype=np.float64).reshape(3))


@dataclass(frozen=True)
class RayMeasurement:
    t0: np.ndarray
    r: np.ndarray
    arc: float
    trajectory_id: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "t0", np.asarray(self.t0, dtype=np.float64).reshape(3))
        object.__setattr__(self, "r", np.asarray(self.r, dtype=np.float64).reshape(3))

    @property
    def is_valid(self) -> bool:
        return float(np.linalg.norm(self.r)) > 0.0


def interpolate_correction(chain: AnchorChain, arc: float) -> Tuple[int, float, PoseCorrection]:
    idx, alpha, values, ok = interpolate_corrections(chain, np.array([arc], dtype=np.float64))
    if not ok[0]:
        raise OutOfRangeError(
            f"Arc {arc:.6f} outside anchor chain [{chain.arc_origin:.6f}, {chain.arc_end:.6f}] "
            f"of trajectory {chain.trajectory_id}."
        )
    return int(idx[0]), float(alpha[0]), PoseCorrection.from_vector(values[0])


def interpolate_corrections(
    chain: AnchorChain, arcs: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """
    Vectorized interpolation. Returns (anchor index, alpha, corrections (N, 6), in-range mask);
    out-of-range entries get index 0, alpha 0 and a zero correction.
    """
    arcs = np.asarray(arcs, dtype=np.float64).reshape(-1)
    ok = np.isfinite(arcs) & (arcs >= chain.arc_origin) & (arcs <= chain.arc_end)
    u = np.where(ok, (arcs - chain.arc_origin) / chain.spacing, 0.0)
    if chain.n == 1:
        idx = np.zeros(arcs.size, dtype=np.int64)
        alpha = np.zeros(arcs.size, dtype=np.float64)
        values = np.repeat(chain.values[:1], arcs.size, axis=0)
    else:
        idx = np.minimum(np.floor(u).astype(np.int64), chain.n - 2)
        alpha = np.clip(u - idx, 0.0, 1.0)
        a = alpha[:, None]
        values = (1.0 - a) * chain.values[idx] + a * chain.values[idx + 1]
    values[~ok] = 0.0
    alpha[~ok] = 0.0
    idx[~ok] = 0
    return idx, alpha, values, ok


def rotation_matrix(theta: np.ndarray) -> np.ndarray:
    # Rz(kappa) @ Ry(phi) @ Rx(omega)
    omega, phi, kappa = np.asarray(theta, dtype=np.float64).reshape(3)
    return Rotation.from_euler("xyz", [omega, phi, kappa]).as_matrix()


def apply_correction(corr: PoseCorrection, m: RayMeasurement) -> np.ndarray:
    return m.r + (np.cross(corr.theta, m.r) + corr.t) + m.t0


def apply_correction_full(corr: PoseCorrection, m: RayMeasurement) -> np.ndarray:
    return rotation_matrix(corr.theta) @ m.r + corr.t + m.t0


def correct_points(xyz: np.ndarray, t0: np.ndarray, corrections: np.ndarray) -> np.ndarray:
    """Small-angle correction of measured points; a zero correction returns xyz bit-exactly."""
    xyz = np.asarray(xyz, dtype=np.float64)
    r = xyz - np.asarray(t0, dtype=np.float64)
    corrections = np.asarray(corrections, dtype=np.float64)
    return xyz + (np.cross(corrections[:, 3:], r) + corrections[:, :3])


def point_to_plane_residual(target: PlaneTarget, p: np.ndarray) -> float:
    return float(np.dot(target.w, target.s - np.asarray(p, dtype=np.float64)))


def residual_jacobian(target: PlaneTarget, m: RayMeasurement, alpha: float) -> Tuple[np.ndarray, np.ndarray]:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"Interpolation weight must be in [0, 1], got {alpha}.")
    row = jacobian_rows(target.w[None, :], m.r[None, :])[0]
    return (1.0 - alpha) * row, alpha * row


def jacobian_rows(w: np.ndarray, r: np.ndarray) -> np.ndarray:
    # d<w, R(theta) r + t>/d(t, theta) at zero: (w, r x w)
    w = np.asarray(w, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    return np.concatenate([w, np.cross(r, w)], axis=1)
