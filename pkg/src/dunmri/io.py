"""File formats: tensor container, run config, checkpoints, PGM images.

Container layout (all little-endian)::

    b"DUNT"  u16 version  u32 record_count
    per record:
        u16 name_len  name (utf-8)
        u8 dtype_code  u8 ndim  u64 dims[ndim]
        payload (product(dims) * itemsize bytes, C order)

dtype codes: 1 float64, 2 complex128 (interleaved re/im), 3 int64, 4 uint8.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

MAGIC = b"DUNT"
VERSION = 1
DTYPES = {1: np.dtype("<f8"), 2: np.dtype("<c16"), 3: np.dtype("<i8"), 4: np.dtype("u1")}
CODES = {np.dtype(v).newbyteorder("="): k for k, v in DTYPES.items()}


class FormatError(ValueError):
    pass


def _code_for(arr: np.ndarray) -> int:
    if arr.dtype == np.bool_:
        return 4
    key = arr.dtype.newbyteorder("=")
    if key not in CODES:
        raise FormatError(f"unsupported dtype {arr.dtype}")
    return CODES[key]


def write_container(path, records: dict[str, np.ndarray]) -> None:
    chunks = [MAGIC, struct.pack("<HI", VERSION, len(records))]
    for name, arr in records.items():
        arr = np.asarray(arr)
        code = _code_for(arr)
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<BB", code, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_container(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise FormatError(f"{path}: not a tensor container")
    version, count = struct.unpack_from("<HI", buf, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported container version {version}")
    pos = 10
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        code, ndim = struct.unpack_from("<BB", buf, pos)
        pos += 2
        if code not in DTYPES:
            raise FormatError(f"{path}: unknown dtype code {code} in record {name!r}")
        dims = struct.unpack_from(f"<{ndim}Q", buf, pos)
        pos += 8 * ndim
        dt = DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        if pos + nbytes > len(buf):
            raise FormatError(f"{path}: truncated payload in record {name!r}")
        out[name] = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(dims).copy()
        pos += nbytes
    return out


def text_record(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).copy()


def record_text(arr: np.ndarray) -> str:
    return bytes(np.asarray(arr, dtype=np.uint8)).decode("utf-8")


# -------------------------------------------------------------------- config


@dataclass
class RunConfig:
    # model
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
    final_init: str = "zero"
    data_consistency: bool = True
    model_seed: int = 0
    # loss
    lam: float = 10.0
    eta: float = 1.0
    beta: float = 10.0
    # training
    lr: float = 1e-4
    epochs: int = 20
    batch: int = 2
    rho_min: float = 0.2
    rho_max: float = 0.8
    seed: int = 0
    # sampling
    acceleration: int = 4
    pattern: str = "random"
    center_fraction: float = 0.32
    mask_seed: int = 1000
    # classical solver
    tau: float = 0.5
    sigma: float = 0.5
    theta: float = 1.0
    threshold: float = 0.0
    max_iters: int = 500
    tol: float = 1e-8
    # metrics
    ssim_window: int = 11
    ssim_sigma: float = 1.5
    ssim_k1: float = 0.01
    ssim_k2: float = 0.03
    # gradient check
    gradcheck_step: float = 1e-5
    gradcheck_tol: float = 1e-5
    gradcheck_entries: int = 3

    _ALIASES = {"lambda": "lam"}

    @classmethod
    def parse(cls, text: str) -> "RunConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        values = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {lineno}: expected 'key = value', got {line!r}")
            key, raw = (s.strip() for s in line.split("=", 1))
            key = cls._ALIASES.get(key, key)
            if key not in kinds:
                raise ValueError(f"line {lineno}: unknown config key {key!r}")
            values[key] = _convert(key, kinds[key], raw)
        cfg = cls(**values)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.parse(Path(path).read_text())

    def serialize(self) -> str:
        out = []
        for key, value in asdict(self).items():
            if isinstance(value, bool):
                value = "true" if value else "false"
            elif isinstance(value, float):
                value = repr(value)
            out.append(f"{'lambda' if key == 'lam' else key} = {value}")
        return "\n".join(out) + "\n"

    def validate(self) -> None:
        checks = [
            ("lam", self.lam >= 0, ">= 0"), ("eta", self.eta >= 0, ">= 0"),
            ("beta", self.beta >= 0, ">= 0"), ("lr", self.lr > 0, "> 0"),
            ("epochs", self.epochs >= 0, ">= 0"), ("batch", self.batch >= 1, ">= 1"),
            ("rho_min", 0.2 <= self.rho_min <= self.rho_max, "in [0.2, rho_max]"),
            ("rho_max", self.rho_min <= self.rho_max <= 0.8, "in [rho_min, 0.8]"),
            ("stages", self.stages >= 0, ">= 0"), ("eps", self.eps > 0, "> 0"),
            ("tau", self.tau > 0, "> 0"), ("sigma", self.sigma > 0, "> 0"),
            ("threshold", self.threshold >= 0, ">= 0"),
            ("pattern", self.pattern in ("random", "equispaced"), "random or equispaced"),
            ("final_init", self.final_init in ("zero", "random"), "zero or random"),
        ]
        for key, ok, rule in checks:
            if not ok:
                raise ValueError(f"config key {key!r} violates constraint: must be {rule}")

    def model_config(self):
        from dunmri.network import ModelConfig
        return ModelConfig(stages=self.stages, base_channels=self.base_channels, levels=self.levels,
                           height=self.height, width=self.width, slope=self.slope, eps=self.eps,
                           init_tau=self.init_tau, init_sigma=self.init_sigma, init_theta=self.init_theta,
                           final_init=self.final_init, data_consistency=self.data_consistency,
                           seed=self.model_seed)

    def loss_weights(self):
        from dunmri.ssl import LossWeights
        return LossWeights(self.lam, self.eta, self.beta)

    def cppa_config(self):
        from dunmri.cppa import CPPAConfig
        return CPPAConfig(self.tau, self.sigma, self.theta, self.threshold, self.max_iters, self.tol)


def _convert(key: str, kind, raw: str):
    kind = kind if isinstance(kind, str) else kind.__name__
    try:
        if kind == "bool":
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ValueError(f"config key {key!r}: cannot read {raw!r} as {kind}") from None


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, state, run_config: RunConfig | None = None) -> None:
    """Parameters (by canonical name), optimizer moments and loop counters."""
    from dunmri.ssl import HISTORY_FIELDS
    params = state.params if hasattr(state, "params") else state
    records: dict[str, np.ndarray] = {"__version__": np.array([VERSION], dtype=np.int64)}
    if run_config is not None:
        records["__config__"] = text_record(run_config.serialize())
    records.update(params.values())
    if hasattr(state, "adam"):
        for name, m in state.adam.m.items():
            records[f"__adam_m__/{name}"] = m
        for name, v in state.adam.v.items():
            records[f"__adam_v__/{name}"] = v
        records["__counters__"] = np.array([state.adam.t, state.epoch, state.batch_index], dtype=np.int64)
        hist = np.array([[row[k] for k in HISTORY_FIELDS] for row in state.history], dtype=np.float64)
        records["__history__"] = hist.reshape(-1, len(HISTORY_FIELDS))
    write_container(path, records)


def load_checkpoint(path, model_config=None):
    """Return (TrainState, RunConfig or None)."""
    from dunmri.network import init_params
    from dunmri.ssl import HISTORY_FIELDS, AdamState, TrainState
    rec = read_container(path)
    run_cfg = RunConfig.parse(record_text(rec["__config__"])) if "__config__" in rec else None
    if model_config is None:
        if run_cfg is None:
            raise FormatError(f"{path}: no embedded config; pass a model config")
        model_config = run_cfg.model_config()
    params = init_params(model_config)
    names = {n for n, _ in params.named_parameters()}
    missing = names - rec.keys()
    if missing:
        raise FormatError(f"{path}: missing parameters {sorted(missing)[:3]}...")
    params = params.with_values({n: rec[n] for n in names})
    state = TrainState(params)
    if "__counters__" in rec:
        t, epoch, bi = (int(v) for v in rec["__counters__"])
        m = {k.split("/", 1)[1]: v for k, v in rec.items() if k.startswith("__adam_m__/")}
        v = {k.split("/", 1)[1]: a for k, a in rec.items() if k.startswith("__adam_v__/")}
        state.adam = AdamState(m, v, t)
        state.epoch, state.batch_index = epoch, bi
        state.history = [{k: (int(x) if k == "step" else float(x)) for k, x in zip(HISTORY_FIELDS, row)}
                         for row in rec["__history__"]]
    return state, run_cfg


def write_history_csv(history: list[dict], path) -> None:
    from dunmri.ssl import HISTORY_FIELDS
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HISTORY_FIELDS)
        for row in history:
            w.writerow([row["step"]] + [repr(float(row[k])) for k in HISTORY_FIELDS[1:]])


# --------------------------------------------------------------------- k-space


def save_kspace(path, k) -> None:
    write_container(path, {"kspace": k.samples, "mask": text_record(k.mask.to_text())})


def load_kspace(path):
    from dunmri.physics import KSpaceData, SamplingMask
    rec = read_container(path)
    if "kspace" not in rec or "mask" not in rec:
        raise FormatError(f"{path}: expected 'kspace' and 'mask' records")
    return KSpaceData(rec["kspace"], SamplingMask.from_text(record_text(rec["mask"])))


# ------------------------------------------------------------------------- PGM


def export_pgm(image, path, bit_depth: int = 16, data_range: float | None = None) -> None:
    """Binary PGM of the magnitude, mapping [0, data_range] linearly to [0, maxval]."""
    mag = np.abs(np.asarray(image))
    if not np.all(np.isfinite(mag)):
        raise ValueError("image contains NaN or Inf")
    if bit_depth not in (8, 16):
        raise ValueError(f"bit_depth must be 8 or 16, got {bit_depth}")
    maxval = 2 ** bit_depth - 1
    data_range = float(mag.max()) if data_range is None else float(data_range)
    scaled = np.zeros_like(mag) if data_range <= 0 else np.clip(mag / data_range, 0, 1) * maxval
    pixels = np.round(scaled).astype(">u2" if bit_depth == 16 else "u1")
    h, w = mag.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n{maxval}\n".encode("ascii") + pixels.tobytes())


def read_pgm(path) -> tuple[np.ndarray, int]:
    """Return (pixels, maxval)."""
    buf = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            pos = buf.index(b"\n", pos) + 1
            continue
        start = pos
        while not buf[pos:pos + 1].isspace():
            pos += 1
        tokens.append(buf[start:pos].decode("ascii"))
    if tokens[0] != "P5":
        raise FormatError(f"{path}: not a binary PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    dt = ">u2" if maxval > 255 else "u1"
    pixels = np.frombuffer(buf, dtype=dt, count=w * h, offset=pos + 1).reshape(h, w)
    return pixels.astype(np.int64), maxval
