"""Classical primal-dual (CP-PPA) reconstruction with an l1 soft-threshold prox.

The update helpers only use arithmetic operators, so they work unchanged on
plain numpy arrays, on floats and on :class:`~dunmri.tensor.Tensor` values
inside the unfolded network.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from dunmri.physics import CoilSensitivities, EncodingOperator, KSpaceData
from dunmri.tensor import Tensor, soft_threshold


@dataclass
class CPPAConfig:
    tau: float = 0.5
    sigma: float = 0.5
    theta: float = 1.0
    threshold: float = 0.0
    max_iters: int = 500
    tol: float = 1e-8
    # ||A^H A||; 1 for any nonempty mask under the unitary FFT with RSS-normalized maps
    op_norm: float = 1.0

    def __post_init__(self):
        if self.tau <= 0 or self.sigma <= 0:
            raise ValueError(f"step sizes must be positive (tau={self.tau}, sigma={self.sigma})")
        if self.threshold < 0:
            raise ValueError(f"threshold must be >= 0, got {self.threshold}")
        if self.tau * self.sigma * self.op_norm >= 1.0:
            raise ValueError(
                f"step-size certificate violated: tau*sigma*||A^H A|| = "
                f"{self.tau * self.sigma * self.op_norm:g} must be < 1")


@dataclass
class SolveTrace:
    residual: list[float] = field(default_factory=list)
    delta: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.residual)

    def to_csv(self, path) -> None:
        with open(Path(path), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "residual", "delta"])
            for i, (r, d) in enumerate(zip(self.residual, self.delta), start=1):
                w.writerow([i, repr(r), repr(d)])


def update_y(y, az, k_tilde, sigma):
    """Dual step: (y + sigma*A z - sigma*k) / (1 + sigma), given ``az = A z``."""
    return (y + sigma * az - sigma * k_tilde) / (1 + sigma)


def extrapolate(x_next, x_prev, theta):
    """Momentum point z = x_next + theta * (x_next - x_prev)."""
    return x_next + theta * (x_next - x_prev)


def prox_soft(x_bar, tau, threshold):
    """l1 prox on pixels: complex soft-threshold of the gradient-step point.

    ``tau`` is accepted for signature parity with the learned prox; the
    threshold is already the scaled level.
    """
    return soft_threshold(x_bar, threshold)


def solve(k_tilde: KSpaceData, cfg: CPPAConfig, sens: CoilSensitivities | None = None,
          x0: np.ndarray | None = None) -> tuple[np.ndarray, SolveTrace]:
    """Run CP-PPA from x0 (zeros by default) and y0 = 0.

    Stops after ``cfg.max_iters`` or once ||x_k - x_{k-1}|| / ||x_k|| < tol.
    """
    if cfg.tau * cfg.sigma * cfg.op_norm >= 1.0:
        raise ValueError("step-size certificate violated")
    maps = None if sens is None else sens.maps
    op = EncodingOperator(k_tilde.mask.columns(), maps)
    k = k_tilde.samples[None]
    h, w = k_tilde.shape
    x = np.zeros((1, h, w), dtype=np.complex128) if x0 is None else np.asarray(x0, np.complex128)[None]
    y = np.zeros_like(k)
    trace = SolveTrace()

    def fwd(v):
        return op.forward(Tensor(v)).data

    def adj(v):
        return op.adjoint(Tensor(v)).data

    for _ in range(cfg.max_iters):
        x_bar = x - cfg.tau * adj(y)
        x_next = prox_soft(Tensor(x_bar), cfg.tau, cfg.threshold).data
        z = extrapolate(x_next, x, cfg.theta)
        y = update_y(y, fwd(z), k, cfg.sigma)
        delta = float(np.linalg.norm(x_next - x))
        x = x_next
        trace.residual.append(float(np.linalg.norm(fwd(x) - k)))
        trace.delta.append(delta)
        norm_x = float(np.linalg.norm(x))
        if norm_x > 0 and delta / norm_x < cfg.tol:
            break
    return x[0], trace
