"""Dense gated non-causal TCN with three formant heads."""
from __future__ import annotations

import dataclasses
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .rng import derive_rng

MODEL_MAGIC = b"FTCNMODL"
MODEL_VERSION = 1
N_FORMANTS = 3


class ModelFileError(ValueError):
    pass


class BadMagicError(ModelFileError):
    pass


class VersionMismatchError(ModelFileError):
    pass


class TruncatedFileError(ModelFileError):
    pass


class ShapeMismatchError(ModelFileError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_blocks: int = 9
    dilations: tuple = (1, 2, 4, 1, 2, 4, 1, 2, 4)
    channels: int = 64
    kernel: int = 3
    head_width: int = 256
    input_dim: int = 350
    dropout_p: float = 0.1
    include_input_in_dense: bool = True
    head_input: str = "concat_all_blocks"
    target_scale: float = 1000.0
    bn_momentum: float = 0.99
    bn_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "dilations", tuple(int(d) for d in self.dilations))
        if len(self.dilations) != self.n_blocks:
            raise ValueError("need one dilation per block")
        if min(self.dilations) < 1:
            raise ValueError("dilations must be >= 1")
        if self.kernel != nn.KERNEL:
            raise ValueError("only kernel size 3 is supported")
        if self.head_input not in ("concat_all_blocks", "last_block"):
            raise ValueError(f"unknown head_input {self.head_input!r}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must be in [0, 1)")

    @property
    def receptive_radius(self):
        return (self.kernel - 1) // 2 * sum(self.dilations)

    def block_input_channels(self, i):
        """Input width of block i (0-based)."""
        if i == 0:
            return self.input_dim
        return self.input_dim * self.include_input_in_dense + self.channels * i

    @property
    def head_input_channels(self):
        if self.head_input == "last_block":
            return self.channels
        return self.channels * self.n_blocks

    def to_text(self):
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        return cls(**parse_config_values(cls, parse_key_values(text)))


def parse_key_values(text):
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _convert(value, default):
    if isinstance(default, bool):
        if str(value).lower() in ("1", "true", "yes", "on"):
            return True
        if str(value).lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    if isinstance(default, tuple):
        if isinstance(value, (tuple, list)):
            return tuple(value)
        parts = [p for p in str(value).replace(" ", "").split(",") if p]
        kind = type(default[0]) if default else float
        return tuple(kind(p) for p in parts)
    return str(value)


def parse_config_values(cls, values, strict=True):
    """Convert string values to the field types of dataclass ``cls``."""
    defaults = cls()
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if strict and unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return {k: _convert(v, getattr(defaults, k)) for k, v in values.items() if k in names}


def param_shapes(cfg: ModelConfig):
    """Ordered {name: shape} for every tensor, including BN running statistics."""
    shapes = {}
    C = cfg.channels
    for i in range(cfg.n_blocks):
        p = f"block{i + 1}"
        c_in = cfg.block_input_channels(i)
        shapes[f"{p}.conv.W"] = (C, c_in, cfg.kernel)
        shapes[f"{p}.conv.b"] = (C,)
        for s in ("gamma", "beta", "running_mean", "running_var"):
            shapes[f"{p}.bn.{s}"] = (C,)
        shapes[f"{p}.glu.W"] = (C, C)
        shapes[f"{p}.glu.b"] = (C,)
        shapes[f"{p}.glu.V"] = (C, C)
        shapes[f"{p}.glu.c"] = (C,)
    for k in range(N_FORMANTS):
        p = f"head{k + 1}"
        shapes[f"{p}.dense1.W"] = (cfg.head_input_channels, cfg.head_width)
        shapes[f"{p}.dense1.b"] = (cfg.head_width,)
        shapes[f"{p}.dense2.W"] = (cfg.head_width, 1)
        shapes[f"{p}.dense2.b"] = (1,)
    return shapes


def is_running_stat(name):
    return name.endswith((".running_mean", ".running_var"))


@dataclass
class ModelWeights:
    config: ModelConfig
    params: dict = field(default_factory=dict)

    def __getitem__(self, name):
        return self.params[name]

    def trainable(self):
        return {k: v for k, v in self.params.items() if not is_running_stat(k)}

    def copy(self):
        return ModelWeights(self.config, {k: v.copy() for k, v in self.params.items()})

    def n_params(self):
        return sum(v.size for k, v in self.params.items() if not is_running_stat(k))


def build(config: ModelConfig, seed=0) -> ModelWeights:
    """Glorot-uniform weights, zero biases, identity batch norm."""
    rng = derive_rng(seed, "init")
    params = {}
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[1]
        if leaf in ("W", "V"):
            if len(shape) == 3:
                fan_in, fan_out = shape[1] * shape[2], shape[0] * shape[2]
            else:
                fan_in, fan_out = shape
            a = np.sqrt(6.0 / (fan_in + fan_out))
            params[name] = rng.uniform(-a, a, size=shape)
        elif leaf in ("gamma", "running_var"):
            params[name] = np.ones(shape)
        else:
            params[name] = np.zeros(shape)
    return ModelWeights(config, params)


def _crop_length(mask):
    valid_t = np.flatnonzero(np.asarray(mask).any(axis=0))
    return int(valid_t[-1]) + 1 if len(valid_t) else 0


def forward(weights: ModelWeights, x, mask, train=False, rng=None):
    """Predict (3, B, T) formants in target-scale units.

    Frames with mask False are zeroed at the input, after every block and
    in the output, so they never influence valid frames. Trailing frames that are masked
    across the whole batch are cropped before computing (exactly
    equivalent, since zero padding and zeroed frames are the same).
    """
    cfg = weights.config
    P = weights.params
    dtype = P["block1.conv.W"].dtype
    x = np.asarray(x, dtype=dtype)
    mask = np.asarray(mask, dtype=bool)
    B, T_full, D = x.shape
    if D != cfg.input_dim or mask.shape != (B, T_full):
        raise nn.ShapeError(f"expected (B, T, {cfg.input_dim}) features with a (B, T) mask")
    if train and cfg.dropout_p > 0 and rng is None:
        raise ValueError("train mode with dropout needs an rng")
    T = max(_crop_length(mask), 1)
    x, mask = x[:, :T], mask[:, :T]
    m = mask[..., None].astype(dtype)

    h0 = x * m
    outputs = []
    caches = []
    bn_stats = {}
    for i, d in enumerate(cfg.dilations):
        p = f"block{i + 1}"
        parts = ([h0] if (i == 0 or cfg.include_input_in_dense) else []) + outputs
        inp, sizes = nn.concat_channels(parts)
        a, c_conv = nn.dilated_conv1d_same(inp, P[f"{p}.conv.W"], P[f"{p}.conv.b"], d)
        bn, c_bn, stats = nn.batch_norm_masked(
            a, mask, P[f"{p}.bn.gamma"], P[f"{p}.bn.beta"],
            P[f"{p}.bn.running_mean"], P[f"{p}.bn.running_var"], train=train, eps=cfg.bn_eps)
        if stats is not None:
            bn_stats[p] = stats
        g, c_glu = nn.glu(bn, P[f"{p}.glu.W"], P[f"{p}.glu.b"], P[f"{p}.glu.V"], P[f"{p}.glu.c"])
        dr, c_drop = nn.channel_dropout(g, cfg.dropout_p, train, rng)
        outputs.append(dr * m)
        caches.append((sizes, c_conv, c_bn, c_glu, c_drop))

    if cfg.head_input == "last_block":
        head_in, head_sizes = outputs[-1], None
    else:
        head_in, head_sizes = nn.concat_channels(outputs)
    preds = np.zeros((N_FORMANTS, B, T_full), dtype=dtype)
    head_caches = []
    for k in range(N_FORMANTS):
        p = f"head{k + 1}"
        h, c1 = nn.dense_td(head_in, P[f"{p}.dense1.W"], P[f"{p}.dense1.b"], "relu")
        o, c2 = nn.dense_td(h, P[f"{p}.dense2.W"], P[f"{p}.dense2.b"], "linear")
        preds[k, :, :T] = o[..., 0] * m[..., 0]
        head_caches.append((c1, c2))
    cache = dict(T=T, m=m, blocks=caches, heads=head_caches, head_sizes=head_sizes,
                 bn_stats=bn_stats, input_dim=D)
    return preds, cache


def backward(weights: ModelWeights, cache, dpreds, input_grad=True):
    """Gradients of a scalar loss w.r.t. every trainable tensor and the input.

    Returns (grads, dx) with dx shaped like the (uncropped) input, or None
    for dx when ``input_grad`` is False (saves a third of the conv work).
    """
    cfg = weights.config
    T, m = cache["T"], cache["m"]
    dpreds = np.asarray(dpreds)
    B, T_full = dpreds.shape[1:]
    grads = {}
    d_head_in = 0.0
    for k in range(N_FORMANTS):
        p = f"head{k + 1}"
        c1, c2 = cache["heads"][k]
        dh, grads[f"{p}.dense2.W"], grads[f"{p}.dense2.b"] = nn.dense_td_backward(
            dpreds[k, :, :T, None] * m, c2)
        dhi, grads[f"{p}.dense1.W"], grads[f"{p}.dense1.b"] = nn.dense_td_backward(dh, c1)
        d_head_in = d_head_in + dhi

    n = cfg.n_blocks
    d_out = [np.zeros((B, T, cfg.channels)) for _ in range(n)]
    if cfg.head_input == "last_block":
        d_out[-1] += d_head_in
    else:
        for i, g in enumerate(nn.concat_channels_backward(d_head_in, cache["head_sizes"])):
            d_out[i] += g
    d_h0 = np.zeros((B, T, cache["input_dim"]))
    for i in reversed(range(n)):
        p = f"block{i + 1}"
        sizes, c_conv, c_bn, c_glu, c_drop = cache["blocks"][i]
        dg = nn.channel_dropout_backward(d_out[i] * m, c_drop)
        dbn, grads[f"{p}.glu.W"], grads[f"{p}.glu.b"], grads[f"{p}.glu.V"], grads[f"{p}.glu.c"] = \
            nn.glu_backward(dg, c_glu)
        da, grads[f"{p}.bn.gamma"], grads[f"{p}.bn.beta"] = nn.batch_norm_masked_backward(dbn, c_bn)
        has_input = i == 0 or cfg.include_input_in_dense
        skip = sizes[0] if (has_input and not input_grad) else 0
        dinp, grads[f"{p}.conv.W"], grads[f"{p}.conv.b"] = nn.dilated_conv1d_same_backward(
            da, c_conv, skip)
        pieces = nn.concat_channels_backward(dinp, sizes)
        if has_input:
            d_h0 += pieces[0]
            pieces = pieces[1:]
        for j, g in enumerate(pieces):
            d_out[j] += g
    if not input_grad:
        return grads, None
    dx = np.zeros((B, T_full, cache["input_dim"]))
    dx[:, :T] = d_h0 * m
    return grads, dx


def apply_bn_stats(weights: ModelWeights, bn_stats):
    """running <- momentum * running + (1 - momentum) * batch statistic."""
    mom = weights.config.bn_momentum
    for p, (mu, var) in bn_stats.items():
        rm, rv = weights.params[f"{p}.bn.running_mean"], weights.params[f"{p}.bn.running_var"]
        rm *= mom
        rm += (1.0 - mom) * mu
        rv *= mom
        rv += (1.0 - mom) * var


def predict_hz(weights: ModelWeights, x, mask, dtype=np.float64):
    """Inference-mode predictions in Hz, shape (3, B, T).

    ``dtype=np.float32`` runs the network in single precision.
    """
    if dtype != np.float64:
        w = ModelWeights(weights.config, {k: v.astype(dtype) for k, v in weights.params.items()})
        preds, _ = forward(w, x, mask, train=False)
    else:
        preds, _ = forward(weights, x, mask, train=False)
    return preds * weights.config.target_scale


# -- serialization -------------------------------------------------------------------

def _header(weights: ModelWeights):
    entries, offset = [], 0
    for name, arr in weights.params.items():
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    cfg = dataclasses.asdict(weights.config)
    cfg["dilations"] = list(cfg["dilations"])
    return {"config": cfg, "tensors": entries, "data_bytes": offset}


def to_bytes(weights: ModelWeights) -> bytes:
    header = json.dumps(_header(weights), sort_keys=True, separators=(",", ":")).encode()
    body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in weights.params.values())
    return MODEL_MAGIC + struct.pack("<II", MODEL_VERSION, len(header)) + header + body


def save(weights: ModelWeights, path):
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(to_bytes(weights))
    os.replace(tmp, path)


def from_bytes(data: bytes, config: ModelConfig | None = None) -> ModelWeights:
    if len(data) < 16:
        raise TruncatedFileError("truncated file: missing header")
    if data[:8] != MODEL_MAGIC:
        raise BadMagicError("bad magic")
    version, hlen = struct.unpack_from("<II", data, 8)
    if version != MODEL_VERSION:
        raise VersionMismatchError(f"version mismatch: file has {version}, expected {MODEL_VERSION}")
    if len(data) < 16 + hlen:
        raise TruncatedFileError("truncated file: header cut short")
    try:
        header = json.loads(data[16:16 + hlen])
    except ValueError as exc:
        raise TruncatedFileError(f"truncated file: unreadable header ({exc})") from None
    file_cfg = ModelConfig(**parse_config_values(ModelConfig, header["config"]))
    cfg = config or file_cfg
    expected = param_shapes(cfg)
    body = data[16 + hlen:]
    if len(body) < header["data_bytes"]:
        raise TruncatedFileError(f"truncated file: {len(body)} of {header['data_bytes']} data bytes")
    listed = {e["name"]: e for e in header["tensors"]}
    params = {}
    for name, shape in expected.items():
        e = listed.get(name)
        if e is None:
            raise ShapeMismatchError(f"shape mismatch: tensor {name} missing from file")
        if tuple(e["shape"]) != tuple(shape):
            raise ShapeMismatchError(f"shape mismatch: tensor {name} is {tuple(e['shape'])}, "
                                     f"config expects {tuple(shape)}")
        count = int(np.prod(shape, dtype=np.int64))
        params[name] = np.frombuffer(body, dtype="<f8", count=count,
                                     offset=e["offset"]).reshape(shape).astype(np.float64)
    if len(listed) != len(expected):
        extra = sorted(set(listed) - set(expected))
        raise ShapeMismatchError(f"shape mismatch: unexpected tensors {extra}")
    return ModelWeights(cfg, params)


def load(path, config: ModelConfig | None = None) -> ModelWeights:
    return from_bytes(Path(path).read_bytes(), config)
