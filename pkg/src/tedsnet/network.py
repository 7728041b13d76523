"""Two-branch encoder/decoder that predicts velocity fields, plus the full warping pipeline."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import fields as F
from . import ndtensor as nt
from .config import ConfigError, ModelConfig
from .ndtensor import DimensionError, Tensor


@dataclass
class TedsModel:
    cfg: ModelConfig
    h: int
    w: int
    params: dict[str, Tensor]

    @property
    def encoder_widths(self) -> list[int]:
        return [self.cfg.base_channels * 2**lvl for lvl in range(self.cfg.levels)]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())


@dataclass
class TedsOutput:
    y_soft: Tensor  # (N, h, w)
    phi_bulk: Tensor | None  # (N, 2, H', W')
    phi_ft: Tensor | None
    y_bulk: Tensor  # (N, H', W')
    u_bulk: Tensor | None = None
    u_ft: Tensor | None = None


def _conv_params(params, name, cin, cout, k, rng):
    # no bias: every block conv feeds an instance norm, which cancels any per-channel constant
    std = np.sqrt(2.0 / (cin * k * k))
    params[f"{name}.w"] = Tensor(rng.normal(0.0, std, (cout, cin, k, k)), requires_grad=True)


def _block_params(params, name, cin, cout, rng):
    _conv_params(params, f"{name}.conv1", cin, cout, 3, rng)
    _conv_params(params, f"{name}.conv2", cout, cout, 3, rng)


def _decoder_plan(cfg: ModelConfig) -> dict[str, list[int]]:
    widths = [cfg.base_channels * 2**lvl for lvl in range(cfg.levels)]
    return {
        # bulk: one up-block; fine-tune: three
        "bulk": [widths[-1], widths[-2]],
        "ft": [widths[-1], widths[-2], widths[-3], widths[-4]],
    }


def build(cfg: ModelConfig, h: int, w: int, seed: int | None = None) -> TedsModel:
    """He-initialised model; velocity heads start at exactly zero (identity warp)."""
    div = 2 ** (cfg.levels - 1)
    if h % div or w % div or h % 16 or w % 16:
        raise ConfigError(f"input {h}x{w} must be divisible by 16 and {div}")
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    params: dict[str, Tensor] = {}
    cin = 1
    for lvl in range(cfg.levels):
        cout = cfg.base_channels * 2**lvl
        _block_params(params, f"enc{lvl}", cin, cout, rng)
        cin = cout
    for branch, chans in _decoder_plan(cfg).items():
        for i in range(len(chans) - 1):
            _block_params(params, f"{branch}.up{i}", chans[i], chans[i + 1], rng)
        params[f"{branch}.head.w"] = Tensor(np.zeros((2, chans[-1], 1, 1)), requires_grad=True)
        params[f"{branch}.head.b"] = Tensor(np.zeros(2), requires_grad=True)
    for name, p in params.items():
        p.name = name
    return TedsModel(cfg, h, w, params)


def _block(m: TedsModel, name: str, x: Tensor, training: bool, rng) -> Tensor:
    p = m.params
    for conv in ("conv1", "conv2"):
        x = nt.conv2d(x, p[f"{name}.{conv}.w"])
        x = nt.relu(nt.instance_norm2d(x))
    return nt.dropout2d(x, m.cfg.dropout, rng, training)


def _as_batch(m: TedsModel, x) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim == 2:
        x = nt.reshape(x, (1, 1) + x.shape)
    elif x.ndim == 3:
        x = nt.reshape(x, (1,) + x.shape)
    if x.shape[1:] != (1, m.h, m.w):
        raise DimensionError(f"model expects (N,1,{m.h},{m.w}) input, got {x.shape}")
    return x


def forward_velocities(m: TedsModel, x, training: bool = False, rng=None):
    """Return raw (u_bulk at h/8, u_ft at h/2) velocity fields, batched (N,2,·,·)."""
    x = _as_batch(m, x)
    if training and rng is None:
        raise ValueError("training mode needs an rng for dropout")
    for lvl in range(m.cfg.levels):
        if lvl:
            x = nt.maxpool2d(x)
        x = _block(m, f"enc{lvl}", x, training, rng)
    out = []
    for branch, chans in _decoder_plan(m.cfg).items():
        y = x
        for i in range(len(chans) - 1):
            y = _block(m, f"{branch}.up{i}", nt.upsample_bilinear(y, 2), training, rng)
        out.append(nt.conv2d(y, m.params[f"{branch}.head.w"], m.params[f"{branch}.head.b"]))
    return out[0], out[1]


def warp_grid(m: TedsModel) -> tuple[int, int]:
    """Grid the prior is warped on: 2x the input when super-upsampling, else the input grid."""
    return (2 * m.h, 2 * m.w) if m.cfg.super_upsample else (m.h, m.w)


def final_field(u: Tensor, cfg: ModelConfig, grid: tuple[int, int]) -> Tensor:
    v = F.diffeo_activation(u)
    d = F.integrate_ss(v, cfg.T, cfg.smoothing_cfg)
    return F.super_upsample(d, *grid)


def teds_forward(m: TedsModel, x, prior, training: bool = False, rng=None) -> TedsOutput:
    """Image -> velocities -> diffeomorphic fields -> warped prior -> max-pooled soft mask."""
    cfg = m.cfg
    x = _as_batch(m, x)
    N = x.shape[0]
    prior = np.asarray(prior.data if isinstance(prior, Tensor) else prior, dtype=np.float64)
    if prior.shape != (m.h, m.w):
        raise DimensionError(f"prior must be {(m.h, m.w)}, got {prior.shape}")
    u_bulk, u_ft = forward_velocities(m, x, training, rng)
    grid = warp_grid(m)
    p = prior if grid == prior.shape else nt.resize_bilinear(Tensor(prior), *grid).data
    y = Tensor(np.broadcast_to(p, (N,) + grid).copy())
    phi_bulk = phi_ft = None
    if cfg.use_bulk:
        phi_bulk = final_field(u_bulk, cfg, grid)
        y = F.warp(y, phi_bulk)
    y_bulk = y
    if cfg.use_ft:
        phi_ft = final_field(u_ft, cfg, grid)
        y = F.warp(y, phi_ft)
    if grid != (m.h, m.w):
        y = nt.reshape(nt.maxpool2d(nt.reshape(y, (N, 1) + grid)), (N, m.h, m.w))
    return TedsOutput(y, phi_bulk, phi_ft, y_bulk, u_bulk, u_ft)


# ---------------------------------------------------------------------------
# checkpoints: text manifest header followed by concatenated TNSR blobs
# ---------------------------------------------------------------------------

_CKPT_MAGIC = "TEDSCKPT 1"


def save_checkpoint(m: TedsModel, path, extra: dict[str, str] | None = None) -> None:
    blobs = []
    offset = 0
    lines = [_CKPT_MAGIC, f"h = {m.h}", f"w = {m.w}"]
    for k, v in (extra or {}).items():
        lines.append(f"meta {k} = {v}")
    for name, p in m.params.items():
        blob = nt.tensor_to_bytes(p.data)
        shape = "x".join(str(s) for s in p.shape)
        lines.append(f"tensor {name} {offset} {shape}")
        blobs.append(blob)
        offset += len(blob)
    lines.append("end")
    header = ("\n".join(lines) + "\n").encode("utf-8")
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    import io

    raw = Path(path).read_bytes()
    (hlen,) = struct.unpack("<Q", raw[:8])
    header = raw[8 : 8 + hlen].decode("utf-8").splitlines()
    if not header or header[0] != _CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint")
    body = raw[8 + hlen :]
    meta: dict[str, str] = {}
    tensors: dict[str, np.ndarray] = {}
    for line in header[1:]:
        if line == "end":
            break
        if line.startswith("tensor "):
            _, name, off, shape = line.split()
            arr = nt.read_tensor(io.BytesIO(body[int(off) :]))
            expect = tuple(int(s) for s in shape.split("x"))
            if arr.shape != expect:
                raise ValueError(f"{path}: tensor {name} shape {arr.shape} != manifest {expect}")
            tensors[name] = arr
        elif line.startswith("meta "):
            k, v = line[5:].split(" = ", 1)
            meta[k] = v
        else:
            k, v = line.split(" = ", 1)
            meta[k] = v
    return meta, tensors


def load_checkpoint(path, cfg: ModelConfig) -> TedsModel:
    meta, tensors = read_checkpoint(path)
    m = build(cfg, int(meta["h"]), int(meta["w"]))
    if set(tensors) != set(m.params):
        missing = set(m.params) ^ set(tensors)
        raise ValueError(f"{path}: checkpoint does not match the configured architecture ({sorted(missing)[:3]} ...)")
    for name, arr in tensors.items():
        if arr.shape != m.params[name].shape:
            raise ValueError(f"{path}: {name} has shape {arr.shape}, model expects {m.params[name].shape}")
        m.params[name].data = arr.copy()
    return m
