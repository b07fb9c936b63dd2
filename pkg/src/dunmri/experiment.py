"""Desk-scale self-supervised experiment shared by the acceptance suite and scripts."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from dunmri.metrics import evaluate_volume
from dunmri.network import ModelConfig, ModelParams, init_params
from dunmri.physics import KSpaceData, add_kspace_noise, adjoint_single, forward_single, make_mask, make_phantom
from dunmri.ssl import LossWeights, PartitionSpec, partition, reconstruct, train


@dataclass(frozen=True)
class DeskSetup:
    train_count: int = 64
    test_count: int = 16
    test_seed: int = 1000
    mask_offset: int = 1000
    size: int = 64
    acceleration: int = 4
    pattern: str = "random"
    stages: int = 4
    base_channels: int = 8
    epochs: int = 20
    batch: int = 2
    lr: float = 1e-4
    seed: int = 0
    weights: LossWeights = LossWeights()


@dataclass
class DeskResult:
    params: ModelParams
    history: list[dict]
    train_seconds: float
    refs: list[np.ndarray] = field(default_factory=list)
    test_k: list[KSpaceData] = field(default_factory=list)


def _slice(setup: DeskSetup, seed: int) -> tuple[np.ndarray, KSpaceData]:
    img = make_phantom(setup.size, setup.size, "random-ellipses", seed)
    mask = make_mask(setup.size, setup.acceleration, setup.pattern, seed + setup.mask_offset)
    return img, forward_single(img, mask)


def model_config(setup: DeskSetup) -> ModelConfig:
    return ModelConfig(stages=setup.stages, base_channels=setup.base_channels,
                       height=setup.size, width=setup.size)


def held_out(setup: DeskSetup, params: ModelParams) -> DeskResult:
    """Wrap already trained parameters with the test split."""
    test = [_slice(setup, setup.test_seed + i) for i in range(setup.test_count)]
    return DeskResult(params, [], 0.0, [np.abs(img) for img, _ in test], [k for _, k in test])


def run_training(setup: DeskSetup = DeskSetup(), callback=None) -> DeskResult:
    """Train on measured k-space only; the clean test images are kept for scoring."""
    train_k = [_slice(setup, s)[1] for s in range(setup.train_count)]
    t0 = time.perf_counter()
    params, history, _ = train(train_k, init_params(model_config(setup)), setup.weights,
                               epochs=setup.epochs, batch=setup.batch, lr=setup.lr, seed=setup.seed,
                               callback=callback)
    res = held_out(setup, params)
    res.history, res.train_seconds = history, time.perf_counter() - t0
    return res


def scores(refs, images) -> tuple[np.ndarray, np.ndarray]:
    report = evaluate_volume(refs, [np.abs(x) for x in images])
    return np.asarray(report.psnr_db), np.asarray(report.ssim)


def zero_filled(result: DeskResult):
    return scores(result.refs, [adjoint_single(k) for k in result.test_k])


def full_input(result: DeskResult, dc: bool = True):
    return scores(result.refs, reconstruct(result.test_k, result.params, dc=dc))


def partitioned_input(result: DeskResult, rho: float = 0.5, seed: int = 7):
    parts = [partition(k, PartitionSpec(rho, seed + i)) for i, k in enumerate(result.test_k)]
    return scores(result.refs, reconstruct(parts, result.params))


def noisy_input(result: DeskResult, sigma_n: float, seed: int = 100, dc: bool | None = None):
    """Data consistency stays on for clean input and is removed for noisy input unless forced."""
    noisy = [add_kspace_noise(k, sigma_n, seed + i) for i, k in enumerate(result.test_k)]
    dc = (sigma_n == 0) if dc is None else dc
    return scores(result.refs, reconstruct(noisy, result.params, dc=dc)), noisy
