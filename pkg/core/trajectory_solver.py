from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, List, Optional

import numpy as np
from scipy import linalg

from .geometry import PoseCorrection
from .normal_blocks import DIAG, NoiseConfig, NormalBlock

PIVOT_RATIO = 1e-12


class MixedTrajectoryError(ValueError):
    pass


class SingularChainError(RuntimeError):
    def __init__(self, trajectory_id: int, anchor: int, detail: str = ""):
        self.trajectory_id = int(trajectory_id)
        self.anchor = int(anchor)
        msg = f"Singular anchor chain for trajectory {self.trajectory_id} at anchor {self.anchor}"
        super().__init__(f"{msg}: {detail}" if detail else msg)


@dataclass
class ChainSystem:
    """Block-tridiagonal normal equations of one trajectory; anchor k of the arrays is anchor start + k."""

    trajectory_id: int
    start: int
    D: np.ndarray
    U: np.ndarray
    b: np.ndarray

    @property
    def n(self) -> int:
        return int(self.D.shape[0])

    def full_matrix(self) -> np.ndarray:
        n = self.n
        full = np.zeros((6 * n, 6 * n))
        for k in range(n):
            full[6 * k : 6 * k + 6, 6 * k : 6 * k + 6] = self.D[k]
        for k in range(n - 1):
            full[6 * k : 6 * k + 6, 6 * k + 6 : 6 * k + 12] = self.U[k]
            full[6 * k + 6 : 6 * k + 12, 6 * k : 6 * k + 6] = self.U[k].T
        return full

    def full_rhs(self) -> np.ndarray:
        return self.b.reshape(-1).copy()


@dataclass
class ChainSolution:
    trajectory_id: int
    start: int
    x: np.ndarray
    cov: np.ndarray

    @property
    def n(self) -> int:
        return int(self.x.shape[0])

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(np.maximum(np.diagonal(self.cov, axis1=1, axis2=2), 0.0))

    @property
    def corrections(self) -> List[PoseCorrection]:
        return [PoseCorrection.from_vector(v) for v in self.x]


def assemble(blocks: Iterable[NormalBlock], noise: Optional[NoiseConfig] = None) -> ChainSystem:
    """
    Sum blocks into D/U/b in canonical (anchor, kind) order. Anchors inside the covered range
    that received nothing get a prior-only diagonal block.
    """
    items = sorted(blocks, key=lambda b: (b.i, b.kind))
    if not items:
        raise ValueError("Cannot assemble a chain from zero blocks.")
    tid = items[0].trajectory_id
    for b in items:
        if b.trajectory_id != tid:
            raise MixedTrajectoryError(f"Blocks of trajectories {tid} and {b.trajectory_id} in one chain.")
    lo = min(b.i for b in items)
    hi = max(b.i + (0 if b.kind == DIAG else 1) for b in items)
    n = hi - lo + 1
    D = np.zeros((n, 6, 6))
    U = np.zeros((max(n - 1, 0), 6, 6))
    b_vec = np.zeros((n, 6))
    touched = np.zeros(n, dtype=bool)
    for blk in items:
        k = blk.i - lo
        if blk.kind == DIAG:
            D[k] += blk.m
            b_vec[k] += blk.rhs
            touched[k] = True
        else:
            U[k] += blk.m
    if not np.all(touched):
        fill = (noise or NoiseConfig()).prior_information()
        D[~touched] = fill
    return ChainSystem(tid, lo, D, U, b_vec)


def _factor_pivot(S: np.ndarray, D: np.ndarray, trajectory_id: int, anchor: int):
    eig = np.linalg.eigvalsh(0.5 * (S + S.T))
    scale = max(float(eig[-1]), float(np.max(np.abs(D))), 0.0)
    if not np.all(np.isfinite(eig)) or scale <= 0.0 or eig[0] < PIVOT_RATIO * scale:
        raise SingularChainError(trajectory_id, anchor, f"pivot eigenvalues [{eig[0]:.3e}, {eig[-1]:.3e}]")
    try:
        return linalg.cho_factor(S, lower=True, check_finite=False)
    except linalg.LinAlgError as exc:
        raise SingularChainError(trajectory_id, anchor, str(exc)) from exc


def solve(sys: ChainSystem) -> ChainSolution:
    """Block-Thomas forward elimination and back-substitution, plus diagonal covariance blocks."""
    n = sys.n
    factors = []
    G = np.zeros((max(n - 1, 0), 6, 6))
    y = np.zeros((n, 6))
    S = sys.D[0].copy()
    y[0] = sys.b[0]
    for k in range(n):
        if k > 0:
            S = sys.D[k] - sys.U[k - 1].T @ G[k - 1]
            y[k] = sys.b[k] - G[k - 1].T @ y[k - 1]
        cf = _factor_pivot(S, sys.D[k], sys.trajectory_id, sys.start + k)
        factors.append(cf)
        if k < n - 1:
            G[k] = linalg.cho_solve(cf, sys.U[k], check_finite=False)

    x = np.zeros((n, 6))
    cov = np.zeros((n, 6, 6))
    eye = np.eye(6)
    x[n - 1] = linalg.cho_solve(factors[n - 1], y[n - 1], check_finite=False)
    cov[n - 1] = linalg.cho_solve(factors[n - 1], eye, check_finite=False)
    for k in range(n - 2, -1, -1):
        x[k] = linalg.cho_solve(factors[k], y[k], check_finite=False) - G[k] @ x[k + 1]
        cov[k] = linalg.cho_solve(factors[k], eye, check_finite=False) + G[k] @ cov[k + 1] @ G[k].T
    return ChainSolution(sys.trajectory_id, sys.start, x, cov)


def solve_dense(sys: ChainSystem) -> ChainSolution:
    n = sys.n
    full = sys.full_matrix()
    eig, vecs = np.linalg.eigh(full)
    if not np.all(np.isfinite(eig)) or eig[-1] <= 0.0 or eig[0] < PIVOT_RATIO * eig[-1]:
        anchor = int(np.argmax(np.abs(vecs[:, 0]))) // 6
        raise SingularChainError(sys.trajectory_id, sys.start + anchor, "dense system not positive definite")
    cf = linalg.cho_factor(full, lower=True, check_finite=False)
    x = linalg.cho_solve(cf, sys.full_rhs(), check_finite=False).reshape(n, 6)
    inv = linalg.cho_solve(cf, np.eye(6 * n), check_finite=False)
    cov = np.stack([inv[6 * k : 6 * k + 6, 6 * k : 6 * k + 6] for k in range(n)])
    return ChainSolution(sys.trajectory_id, sys.start, x, cov)
