"""Re-visible dual-domain self-supervised training.

Every step partitions the measured k-space ``k`` into a subset ``k_p``,
reconstructs both, and scores them with

    L_k   = |(A x_p + lam A sg(x)) / (1 + lam) - k|_1 + eta |A x_p - k|_1
    L_img = (1 - SSIM)(|A^H mix|, |A^H k|) + eta (1 - SSIM)(|A^H A x_p|, |A^H k|)
    L_d   = L_img + beta L_k

where ``sg`` blocks gradients, so the full-data reconstruction only shapes
training through the partitioned branch.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from dunmri.layers import gaussian_window, separable_filter_valid
from dunmri.metrics import SSIM_K1, SSIM_K2, SSIM_SIGMA, SSIM_WINDOW, _filt
from dunmri.network import ModelParams, model_forward
from dunmri.physics import CoilSensitivities, KSpaceData, operator_for
from dunmri.tensor import (Tensor, abs_, add, as_tensor, backward, mean, mul_const, scale, stop_gradient,
                           sub)

RHO_MIN, RHO_MAX = 0.2, 0.8


@dataclass(frozen=True)
class PartitionSpec:
    rho: float
    seed: int = 0
    keep_center: bool = True

    def __post_init__(self):
        if not RHO_MIN <= self.rho <= RHO_MAX:
            raise ValueError(f"rho must lie in [{RHO_MIN}, {RHO_MAX}], got {self.rho}")


@dataclass(frozen=True)
class LossWeights:
    lam: float = 10.0
    eta: float = 1.0
    beta: float = 10.0

    def __post_init__(self):
        for name in ("lam", "eta", "beta"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")


@dataclass
class LossBreakdown:
    L_k_rev: Tensor
    L_k_reg: Tensor
    L_img_rev: Tensor
    L_img_reg: Tensor
    L_k: Tensor
    L_img: Tensor
    L_d: Tensor

    def as_floats(self) -> dict[str, float]:
        return {name: float(getattr(self, name).data) for name in
                ("L_k_rev", "L_k_reg", "L_img_rev", "L_img_reg", "L_k", "L_img", "L_d")}


# ------------------------------------------------------------------ partition


def partition(k_tilde: KSpaceData, spec: PartitionSpec) -> KSpaceData:
    """Keep the center block plus round(rho * n) of the other n sampled lines."""
    mask = k_tilde.mask
    lines = np.array(mask.line_set, dtype=int)
    if lines.size == 0:
        raise ValueError("cannot partition an empty mask")
    rng = np.random.default_rng(spec.seed)
    if spec.keep_center:
        center = np.intersect1d(lines, mask.center_lines)
        pool = np.setdiff1d(lines, center)
    else:
        center = np.array([], dtype=int)
        pool = lines
    keep = int(round(spec.rho * pool.size))
    chosen = rng.choice(pool, size=keep, replace=False) if keep else np.array([], dtype=int)
    sub_mask = mask.with_lines(np.concatenate([center, chosen]))
    return KSpaceData(sub_mask.apply(k_tilde.samples), sub_mask)


# --------------------------------------------------------------------- losses


def l1_kspace(a, b) -> Tensor:
    """Mean complex magnitude of a - b over every k-space entry."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"l1_kspace: shape mismatch {a.shape} vs {b.shape}")
    return mean(abs_(sub(a, b)))


def ssim_tensor(test, ref: np.ndarray, data_range: np.ndarray, window: int = SSIM_WINDOW,
                sigma: float = SSIM_SIGMA, k1: float = SSIM_K1, k2: float = SSIM_K2) -> Tensor:
    """Differentiable mean SSIM of ``test`` (N, H, W) against a constant reference.

    ``data_range`` holds one value per sample.  The arithmetic mirrors
    :func:`dunmri.metrics.ssim` so values agree to rounding.
    """
    test = as_tensor(test)
    ref = np.asarray(ref, dtype=np.float64)
    taps = gaussian_window(window, sigma)
    h, w = test.shape[-2] - window + 1, test.shape[-1] - window + 1
    dr = np.asarray(data_range, dtype=np.float64).reshape(-1, 1, 1)
    shape = test.shape[:-2] + (h, w)
    c1 = Tensor(np.broadcast_to((k1 * dr) ** 2, shape))
    c2 = Tensor(np.broadcast_to((k2 * dr) ** 2, shape))
    my = _filt(ref, taps)
    syy = _filt(ref * ref, taps) - my * my
    mx = separable_filter_valid(test, taps)
    sxx = sub(separable_filter_valid(test * test, taps), mx * mx)
    sxy = sub(separable_filter_valid(mul_const(test, ref), taps), mul_const(mx, my))
    num = (mul_const(scale(mx, 2.0), my) + c1) * (scale(sxy, 2.0) + c2)
    den = ((mx * mx + Tensor(my * my)) + c1) * ((sxx + Tensor(syy)) + c2)
    return mean(num / den)


def _mix(x_rec_p, x_rec, lam: float, physics) -> Tensor:
    return scale(physics.forward(x_rec_p) + scale(physics.forward(stop_gradient(x_rec)), lam),
                 1.0 / (1.0 + lam))


def loss_k_rev(x_rec_p, x_rec, k_tilde, lam: float, physics) -> Tensor:
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    return l1_kspace(_mix(x_rec_p, x_rec, lam, physics), k_tilde)


def _reference(k_tilde, physics) -> tuple[np.ndarray, np.ndarray]:
    ref = np.abs(physics.adjoint(stop_gradient(as_tensor(k_tilde))).data)
    dr = ref.reshape(ref.shape[0], -1).max(axis=1)
    return ref, np.where(dr > 0, dr, 1.0)


def loss_img(x_rec_p, x_rec, k_tilde, lam: float, eta: float, physics) -> tuple[Tensor, Tensor]:
    """(1 - SSIM) image-domain terms; returns (rev, reg) before eta weighting."""
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    ref, dr = _reference(k_tilde, physics)
    rev_img = abs_(physics.adjoint(_mix(x_rec_p, x_rec, lam, physics)))
    reg_img = abs_(physics.adjoint(physics.forward(x_rec_p)))
    rev = sub(1.0, ssim_tensor(rev_img, ref, dr))
    reg = sub(1.0, ssim_tensor(reg_img, ref, dr))
    return rev, reg


def loss_total(x_rec_p, x_rec, k_tilde, weights: LossWeights, physics) -> LossBreakdown:
    k_rev = loss_k_rev(x_rec_p, x_rec, k_tilde, weights.lam, physics)
    k_reg = l1_kspace(physics.forward(x_rec_p), k_tilde)
    img_rev, img_reg = loss_img(x_rec_p, x_rec, k_tilde, weights.lam, weights.eta, physics)
    l_k = add(k_rev, scale(k_reg, weights.eta))
    l_img = add(img_rev, scale(img_reg, weights.eta))
    l_d = add(l_img, scale(l_k, weights.beta))
    return LossBreakdown(k_rev, k_reg, img_rev, img_reg, l_k, l_img, l_d)


# ---------------------------------------------------------------------- Adam


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def _as_real(a: np.ndarray) -> np.ndarray:
    if a.dtype.kind == "c":
        return np.stack([a.real, a.imag], axis=-1)
    return np.asarray(a, dtype=np.float64)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> tuple[dict[str, np.ndarray], AdamState]:
    """Bias-corrected Adam; complex parameters are updated as (re, im) pairs."""
    if lr <= 0:
        raise ValueError(f"learning rate must be > 0, got {lr}")
    t = state.t + 1
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        p_r = _as_real(p)
        g = grads.get(name)
        g_r = np.zeros_like(p_r) if g is None else _as_real(np.asarray(g, dtype=p.dtype))
        m = state.m.get(name, np.zeros_like(p_r))
        v = state.v.get(name, np.zeros_like(p_r))
        m = beta1 * m + (1.0 - beta1) * g_r
        v = beta2 * v + (1.0 - beta2) * (g_r * g_r)
        step = lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        out = p_r - step
        new_params[name] = out[..., 0] + 1j * out[..., 1] if p.dtype.kind == "c" else out
        new_m[name], new_v[name] = m, v
    return new_params, AdamState(new_m, new_v, t)


# ------------------------------------------------------------------- training


@dataclass
class TrainState:
    """Everything needed to resume training bit-for-bit."""

    params: ModelParams
    adam: AdamState = field(default_factory=AdamState)
    epoch: int = 0
    batch_index: int = 0
    history: list[dict] = field(default_factory=list)


HISTORY_FIELDS = ("step", "L_k_rev", "L_k_reg", "L_img_rev", "L_img_reg", "L_d", "wall_ms")


def _epoch_plan(n: int, batch: int, seed: int, epoch: int, rho_min: float, rho_max: float):
    rng = np.random.default_rng([seed, epoch])
    order = rng.permutation(n)
    rhos = rng.uniform(rho_min, rho_max, size=n)
    part_seeds = rng.integers(0, 2 ** 31 - 1, size=n)
    batches = [order[i:i + batch] for i in range(0, n, batch)]
    return batches, rhos, part_seeds


def training_step(params: ModelParams, batch: list[KSpaceData], parts: list[KSpaceData],
                  weights: LossWeights, sens: list[CoilSensitivities] | None = None):
    """Both branches, L_d and its gradients for one batch."""
    op, k = operator_for(batch, sens)
    op_p, k_p = operator_for(parts, sens)
    x_p = model_forward(k_p, params, op_p)
    x = model_forward(k, params, op)
    losses = loss_total(x_p, x, k, weights, op)
    grads = backward(losses.L_d)
    named = {p: name for name, p in params.named_parameters()}
    return losses, {named[p]: g for p, g in grads.items() if p in named}


def train(dataset: list[KSpaceData], model: ModelParams | TrainState, weights: LossWeights = LossWeights(),
          epochs: int = 1, batch: int = 2, lr: float = 1e-4, seed: int = 0,
          rho_min: float = RHO_MIN, rho_max: float = RHO_MAX,
          sens: list[CoilSensitivities] | None = None, max_steps: int | None = None,
          callback=None) -> tuple[ModelParams, list[dict], TrainState]:
    """Self-supervised training; deterministic for a fixed seed.

    ``model`` may be a :class:`TrainState` to resume an interrupted run.
    Returns the final parameters, the full loss history and the state.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    state = model if isinstance(model, TrainState) else TrainState(model)
    steps_done = 0
    while state.epoch < epochs:
        batches, rhos, part_seeds = _epoch_plan(len(dataset), batch, seed, state.epoch, rho_min, rho_max)
        while state.batch_index < len(batches):
            if max_steps is not None and steps_done >= max_steps:
                return state.params, state.history, state
            t0 = time.perf_counter()
            idx = batches[state.batch_index]
            items = [dataset[i] for i in idx]
            parts = [partition(dataset[i], PartitionSpec(float(rhos[i]), int(part_seeds[i])))
                     for i in idx]
            s = None if sens is None else [sens[i] for i in idx]
            losses, grads = training_step(state.params, items, parts, weights, s)
            new_vals, state.adam = adam_step(state.params.values(), grads, state.adam, lr)
            state.params = state.params.with_values(new_vals)
            row = {"step": len(state.history), **{k: v for k, v in losses.as_floats().items()
                                                 if k in HISTORY_FIELDS}}
            row["wall_ms"] = (time.perf_counter() - t0) * 1000.0
            state.history.append(row)
            state.batch_index += 1
            steps_done += 1
            if callback is not None:
                callback(state, row)
        state.epoch += 1
        state.batch_index = 0
    return state.params, state.history, state


def reconstruct(k_tilde: list[KSpaceData], params: ModelParams, sens=None, dc: bool | None = None,
                batch: int = 4) -> list[np.ndarray]:
    """Inference on the full measured k-space (no partitioning)."""
    frozen = params.detached()
    out = []
    for i in range(0, len(k_tilde), batch):
        s = None if sens is None else sens[i:i + batch]
        op, k = operator_for(k_tilde[i:i + batch], s)
        out.extend(model_forward(k, frozen, op, dc=dc).data)
    return out


def check_model_gradients(cfg, weights: LossWeights = LossWeights(), step: float = 1e-5,
                          tolerance: float = 1e-5, max_entries: int | None = 3, directions: int = 1,
                          batch: int = 2, acceleration: int = 4, seed: int = 0):
    """Finite-difference check of dL_d/dtheta for every parameter of a (toy) model.

    Builds ``batch`` random phantoms at the model's size, samples them with
    ``acceleration``-fold random masks and partitions each at rho = 0.5.
    """
    from dunmri.network import init_params
    from dunmri.physics import forward_single, make_mask, make_phantom
    from dunmri.tensor import grad_check

    params = init_params(cfg)
    data = [forward_single(make_phantom(cfg.height, cfg.width, "random-ellipses", seed + i, phase=True),
                           make_mask(cfg.width, acceleration, "random", seed + 100 + i))
            for i in range(batch)]
    parts = [partition(k, PartitionSpec(0.5, seed + 200 + i)) for i, k in enumerate(data)]
    op, k = operator_for(data)
    op_p, k_p = operator_for(parts)
    names = [n for n, _ in params.named_parameters()]

    def f(tensors):
        p = params.with_values(dict(zip(names, tensors)))
        x_p = model_forward(k_p, p, op_p)
        x = model_forward(k, p, op)
        return loss_total(x_p, x, k, weights, op).L_d

    return grad_check(f, params.parameters(), step=step, tolerance=tolerance,
                      max_entries=max_entries, directions=directions, seed=seed)
