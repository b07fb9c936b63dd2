"""Unfolded primal-dual reconstruction network.

Each stage replaces the primal prox with a residual U-Net (ProxNet) built
from spatial/frequency feature blocks, keeps the analytic dual update, and
learns its own step sizes tau, sigma and theta.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, is_dataclass, replace
from typing import Iterator

import numpy as np

from dunmri import layers as L
from dunmri.cppa import extrapolate, update_y
from dunmri.fft import is_power_of_two
from dunmri.tensor import (Tensor, as_tensor, channels_to_complex, complex_to_channels,
                           fft2, ifft2, make_op, real, softplus)


@dataclass
class ModelConfig:
    stages: int = 4
    base_channels: int = 8
    levels: int = 4
    height: int = 64
    width: int = 64
    slope: float = 0.2
    eps: float = 1e-5
    init_tau: float = 0.5
    init_sigma: float = 0.5
    init_theta: float = 1.0
    final_init: str = "zero"  # "zero" or "random"
    data_consistency: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.stages < 0:
            raise ValueError(f"stages must be >= 0, got {self.stages}")
        if self.final_init not in ("zero", "random"):
            raise ValueError(f"final_init must be 'zero' or 'random', got {self.final_init!r}")

    def widths(self) -> list[int]:
        return [self.base_channels * 2 ** lv for lv in range(self.levels)]


@dataclass
class SFFEParams:
    conv_w: Tensor
    norm_gamma: Tensor
    norm_beta: Tensor
    global_filter: Tensor
    fuse_w: Tensor
    fuse_b: Tensor
    proj_w: Tensor
    proj_b: Tensor


@dataclass
class ConvBlockParams:
    w1: Tensor
    gamma1: Tensor
    beta1: Tensor
    w2: Tensor
    gamma2: Tensor
    beta2: Tensor


@dataclass
class UpParams:
    w: Tensor
    b: Tensor


@dataclass
class ProxNetParams:
    encoder: list[SFFEParams]
    up: list[UpParams]
    decoder: list[ConvBlockParams]
    out_w: Tensor
    out_b: Tensor


@dataclass
class StageParams:
    tau_raw: Tensor
    sigma_raw: Tensor
    theta_raw: Tensor
    proxnet: ProxNetParams

    @property
    def tau(self) -> Tensor:
        return softplus(self.tau_raw)

    @property
    def sigma(self) -> Tensor:
        return softplus(self.sigma_raw)

    @property
    def theta(self) -> Tensor:
        return softplus(self.theta_raw)


@dataclass
class ModelParams:
    config: ModelConfig
    stages: list[StageParams] = field(default_factory=list)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(_walk(self.stages, "stages"))

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def values(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.named_parameters()}

    def with_values(self, values: dict[str, np.ndarray]) -> "ModelParams":
        """Fresh leaf tensors for every parameter, taking new values by name.

        Values that are already tensors are used as given (grad checks rely on this).
        """
        return replace(self, stages=_rebuild(self.stages, "stages", values))

    def detached(self) -> "ModelParams":
        """Same values without grad records, for tape-free inference."""
        return replace(self, stages=_rebuild(self.stages, "stages", {}, leaf=False))

    def count(self) -> int:
        """Number of real scalars (complex entries count twice)."""
        return sum(t.data.size * (2 if t.is_complex else 1) for t in self.parameters())


def _walk(obj, prefix: str) -> Iterator[tuple[str, Tensor]]:
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif isinstance(obj, list):
        for i, item in enumerate(obj):
            yield from _walk(item, f"{prefix}.{i}")
    elif is_dataclass(obj):
        for f in fields(obj):
            yield from _walk(getattr(obj, f.name), f"{prefix}.{f.name}")


def _rebuild(obj, prefix: str, values: dict, leaf: bool = True):
    if isinstance(obj, Tensor):
        value = values.get(prefix, obj.data)
        if isinstance(value, Tensor):
            return value
        return Tensor.param(value, prefix) if leaf else Tensor(value, None, prefix)
    if isinstance(obj, list):
        return [_rebuild(item, f"{prefix}.{i}", values, leaf) for i, item in enumerate(obj)]
    if is_dataclass(obj):
        return replace(obj, **{f.name: _rebuild(getattr(obj, f.name), f"{prefix}.{f.name}", values, leaf)
                               for f in fields(obj)})
    return obj


# -------------------------------------------------------------- initialization


def _inv_softplus(v: float) -> float:
    return float(np.log(np.expm1(v)))


def _conv_init(rng, out_ch: int, in_ch: int, k: int, slope: float) -> np.ndarray:
    gain = np.sqrt(2.0 / (1.0 + slope ** 2))
    return rng.standard_normal((out_ch, in_ch, k, k)) * gain / np.sqrt(in_ch * k * k)


def init_params(cfg: ModelConfig) -> ModelParams:
    """He-style random convolutions, unit global filters, unit norms.

    Convolutions that feed an instance norm carry no bias: the norm removes
    any per-channel constant, and its own beta plays that role.

    With ``final_init='zero'`` the last 1x1 convolution starts at zero, so the
    untrained network returns the zero-filled reconstruction.
    """
    if cfg.height % 2 ** cfg.levels or cfg.width % 2 ** cfg.levels:
        raise ValueError(f"{cfg.height}x{cfg.width} is too small for {cfg.levels} levels")
    rng = np.random.default_rng(cfg.seed)
    widths = cfg.widths()
    stages = []
    for k in range(cfg.stages):
        pre = f"stages.{k}"
        encoder, up, decoder = [], [], []
        in_ch = 2
        for lv, ch in enumerate(widths):
            h, w = cfg.height >> lv, cfg.width >> lv
            p = f"{pre}.proxnet.encoder.{lv}"
            encoder.append(SFFEParams(
                conv_w=Tensor.param(_conv_init(rng, ch, in_ch, 3, cfg.slope), f"{p}.conv_w"),
                norm_gamma=Tensor.param(np.ones(ch), f"{p}.norm_gamma"),
                norm_beta=Tensor.param(np.zeros(ch), f"{p}.norm_beta"),
                global_filter=Tensor.param(np.ones((in_ch, h, w), dtype=np.complex128), f"{p}.global_filter"),
                fuse_w=Tensor.param(_conv_init(rng, ch, ch + in_ch, 3, cfg.slope), f"{p}.fuse_w"),
                fuse_b=Tensor.param(np.zeros(ch), f"{p}.fuse_b"),
                proj_w=Tensor.param(_conv_init(rng, ch, in_ch, 1, 1.0), f"{p}.proj_w"),
                proj_b=Tensor.param(np.zeros(ch), f"{p}.proj_b"),
            ))
            in_ch = ch
        for lv in range(cfg.levels):
            ch = widths[lv]
            src = widths[lv + 1] if lv + 1 < cfg.levels else widths[-1]
            p = f"{pre}.proxnet.up.{lv}"
            up.append(UpParams(
                w=Tensor.param(rng.standard_normal((src, ch, 2, 2)) / np.sqrt(src), f"{p}.w"),
                b=Tensor.param(np.zeros(ch), f"{p}.b"),
            ))
            p = f"{pre}.proxnet.decoder.{lv}"
            decoder.append(ConvBlockParams(
                w1=Tensor.param(_conv_init(rng, ch, 2 * ch, 3, cfg.slope), f"{p}.w1"),
                gamma1=Tensor.param(np.ones(ch), f"{p}.gamma1"),
                beta1=Tensor.param(np.zeros(ch), f"{p}.beta1"),
                w2=Tensor.param(_conv_init(rng, ch, ch, 3, cfg.slope), f"{p}.w2"),
                gamma2=Tensor.param(np.ones(ch), f"{p}.gamma2"),
                beta2=Tensor.param(np.zeros(ch), f"{p}.beta2"),
            ))
        if cfg.final_init == "zero":
            out_w, out_b = np.zeros((2, widths[0], 1, 1)), np.zeros(2)
        else:
            out_w = rng.standard_normal((2, widths[0], 1, 1)) * 0.1 / np.sqrt(widths[0])
            out_b = rng.standard_normal(2) * 0.01
        prox = ProxNetParams(encoder, up, decoder,
                             Tensor.param(out_w, f"{pre}.proxnet.out_w"),
                             Tensor.param(out_b, f"{pre}.proxnet.out_b"))
        stages.append(StageParams(
            tau_raw=Tensor.param(_inv_softplus(cfg.init_tau), f"{pre}.tau_raw"),
            sigma_raw=Tensor.param(_inv_softplus(cfg.init_sigma), f"{pre}.sigma_raw"),
            theta_raw=Tensor.param(_inv_softplus(cfg.init_theta), f"{pre}.theta_raw"),
            proxnet=prox,
        ))
    return ModelParams(cfg, stages)


def expected_param_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count for a configuration (real scalars)."""
    widths = cfg.widths()
    total = 0
    in_ch = 2
    for lv, ch in enumerate(widths):
        h, w = cfg.height >> lv, cfg.width >> lv
        total += ch * in_ch * 9               # spatial conv (no bias, norm follows)
        total += 2 * ch                       # norm
        total += 2 * in_ch * h * w            # complex global filter
        total += ch * (ch + in_ch) * 9 + ch   # fusion conv
        total += ch * in_ch + ch              # residual projection
        in_ch = ch
    for lv, ch in enumerate(widths):
        src = widths[lv + 1] if lv + 1 < cfg.levels else widths[-1]
        total += src * ch * 4 + ch
        total += ch * 2 * ch * 9 + 2 * ch + ch * ch * 9 + 2 * ch
    total += 2 * widths[0] + 2
    return cfg.stages * (total + 3)


# --------------------------------------------------------------------- blocks


def apply_global_filter(f, filt) -> Tensor:
    """Multiply (N, C, H, W) spectra by one (C, H, W) filter shared over the batch."""
    f, filt = as_tensor(f), as_tensor(filt)
    if f.shape[-3:] != filt.shape:
        raise ValueError(f"global filter {filt.shape} does not match features {f.shape}")
    out = f.data * filt.data

    def vjp(g, needs):
        gf = g * np.conj(filt.data) if needs[0] else None
        gfilt = None
        if needs[1]:
            gfilt = (g * np.conj(f.data)).reshape((-1,) + filt.shape).sum(axis=0)
        return gf, gfilt

    return make_op("global_filter", out, (f, filt), vjp)


def sffe_block(f_in, p: SFFEParams, slope: float = 0.2, eps: float = 1e-5) -> Tensor:
    """Spatial branch (conv, norm, leaky ReLU) and frequency branch (FFT, global
    filter, inverse FFT, real part), fused by concat + conv, plus a projected
    residual."""
    spatial = L.leaky_relu(L.instance_norm(L.conv2d(f_in, p.conv_w),
                                           p.norm_gamma, p.norm_beta, eps), slope)
    freq = real(ifft2(apply_global_filter(fft2(f_in), p.global_filter)))
    fused = L.conv2d(L.concat_channels(spatial, freq), p.fuse_w, p.fuse_b)
    return fused + L.conv2d(f_in, p.proj_w, p.proj_b)


def conv_block(f, p: ConvBlockParams, slope: float = 0.2, eps: float = 1e-5) -> Tensor:
    f = L.leaky_relu(L.instance_norm(L.conv2d(f, p.w1), p.gamma1, p.beta1, eps), slope)
    return L.leaky_relu(L.instance_norm(L.conv2d(f, p.w2), p.gamma2, p.beta2, eps), slope)


def proxnet_apply(v, p: ProxNetParams, slope: float = 0.2, eps: float = 1e-5) -> Tensor:
    """U-Net on (N, 2, H, W) real input; returns a (N, 2, H, W) correction."""
    v = as_tensor(v)
    if v.ndim != 4:
        raise ValueError(f"proxnet expects (N, 2, H, W), got {v.shape}")
    levels = len(p.encoder)
    h, w = v.shape[-2:]
    if h % 2 ** levels or w % 2 ** levels or not (is_power_of_two(h) and is_power_of_two(w)):
        raise ValueError(f"{h}x{w} input is too small or not a power of two for {levels} levels")
    skips = []
    f = v
    for blk in p.encoder:
        f = sffe_block(f, blk, slope, eps)
        skips.append(f)
        f = L.avg_pool2(f)
    for lv in reversed(range(levels)):
        f = L.transpose_conv_up2(f, p.up[lv].w, p.up[lv].b)
        f = conv_block(L.concat_channels(f, skips[lv]), p.decoder[lv], slope, eps)
    return L.conv2d(f, p.out_w, p.out_b)


# ---------------------------------------------------------------------- model


def stage_forward(x_k, y_k, k_tilde, stage: StageParams, physics, cfg: ModelConfig):
    """One unfolded iteration; returns (x_next, y_next)."""
    tau, sigma, theta = stage.tau, stage.sigma, stage.theta
    v = x_k - tau * physics.adjoint(y_k)
    correction = proxnet_apply(complex_to_channels(v), stage.proxnet, cfg.slope, cfg.eps)
    x_next = x_k + channels_to_complex(correction)
    z = extrapolate(x_next, x_k, theta)
    y_next = update_y(y_k, physics.forward(z), k_tilde, sigma)
    return x_next, y_next


def data_consistency(x, k_tilde, physics) -> Tensor:
    """Replace the sampled k-space of x with the measurements: x + A^H(k - A x)."""
    return x + physics.adjoint(k_tilde - physics.forward(x))


def model_forward(k_tilde, params: ModelParams, physics, dc: bool | None = None,
                  return_stages: bool = False):
    """x0 = A^H k, y0 = 0, then K stages (and optional data consistency)."""
    k_tilde = as_tensor(k_tilde)
    x = physics.adjoint(k_tilde)
    y = Tensor(np.zeros(k_tilde.shape, dtype=np.complex128))
    history = [x]
    for stage in params.stages:
        x, y = stage_forward(x, y, k_tilde, stage, physics, params.config)
        history.append(x)
    use_dc = params.config.data_consistency if dc is None else dc
    if use_dc and params.stages:
        x = data_consistency(x, k_tilde, physics)
    return (x, history) if return_stages else x
