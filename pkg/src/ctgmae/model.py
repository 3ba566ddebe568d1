"""Channel-independent patch transformer with reconstruction and classification heads.

Both channels share one encoder and are run as separate sequences in the
same batch, so attention never crosses channels.  The heads are the only
place FHR and UC representations meet.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .patchmask import n_patches

HEAD_TYPES = ("reconstruction", "classification")
MAGIC = b"CTGW"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    patch_len: int = 48
    stride: int = 24
    context_len: int = 1800
    d_model: int = 128
    n_heads: int = 8
    n_layers: int = 3
    ff_dim: int = 256
    dropout: float = 0.2
    head_type: str = "reconstruction"

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.head_type not in HEAD_TYPES:
            raise ValueError(f"head_type must be one of {HEAD_TYPES}")
        n_patches(self.context_len, self.patch_len, self.stride)

    @property
    def n_patches(self):
        return n_patches(self.context_len, self.patch_len, self.stride)

    @classmethod
    def tiny(cls, **overrides):
        """Small dims for desk-scale training and gradient checks.

        Dropout is off: at d_model=8 the variance shift it causes between
        training-mode and running batch-norm statistics swamps the signal.
        """
        base = dict(d_model=8, n_heads=2, n_layers=1, ff_dim=16, dropout=0.0)
        base.update(overrides)
        return cls(**base)


@dataclass(eq=False)
class ModelParams:
    """Learnable tensors plus batch-norm running statistics."""

    config: ModelConfig
    tensors: dict
    buffers: dict

    def copy(self):
        return ModelParams(self.config,
                           {k: v.copy() for k, v in self.tensors.items()},
                           {k: v.copy() for k, v in self.buffers.items()})


def _shapes(cfg: ModelConfig):
    d, f, p, n = cfg.d_model, cfg.ff_dim, cfg.patch_len, cfg.n_patches
    shapes = {"embed.W_P": (p, d), "embed.W_pos": (n, d)}
    for i in range(cfg.n_layers):
        pre = f"layers.{i}."
        for w in ("q", "k", "v", "o"):
            shapes[pre + f"attn.W_{w}"] = (d, d)
            shapes[pre + f"attn.b_{w}"] = (d,)
        for bn in ("bn1", "bn2"):
            shapes[pre + f"{bn}.gamma"] = (d,)
            shapes[pre + f"{bn}.beta"] = (d,)
        shapes[pre + "ff.W_1"] = (d, f)
        shapes[pre + "ff.b_1"] = (f,)
        shapes[pre + "ff.W_2"] = (f, d)
        shapes[pre + "ff.b_2"] = (d,)
    shapes.update(_head_shapes(cfg))
    return shapes


def _head_shapes(cfg):
    if cfg.head_type == "reconstruction":
        return {"head.W": (2 * cfg.d_model, cfg.patch_len), "head.b": (cfg.patch_len,)}
    return {"head.W": (2 * cfg.n_patches * cfg.d_model, 2), "head.b": (2,)}


def _buffer_shapes(cfg):
    shapes = {}
    for i in range(cfg.n_layers):
        for bn in ("bn1", "bn2"):
            shapes[f"layers.{i}.{bn}.running_mean"] = (cfg.d_model,)
            shapes[f"layers.{i}.{bn}.running_var"] = (cfg.d_model,)
    return shapes


def _init_tensor(name, shape, rng):
    if name.endswith("W_pos"):
        return rng.normal(0.0, 0.02, size=shape)
    if name.endswith("gamma"):
        return np.ones(shape)
    if len(shape) == 1:
        return np.zeros(shape)
    bound = 1.0 / np.sqrt(shape[0])
    return rng.uniform(-bound, bound, size=shape)


def init_params(cfg: ModelConfig, seed=0) -> ModelParams:
    rng = np.random.default_rng(seed)
    tensors = {name: _init_tensor(name, shape, rng) for name, shape in _shapes(cfg).items()}
    buffers = {name: (np.ones(s) if name.endswith("var") else np.zeros(s))
               for name, s in _buffer_shapes(cfg).items()}
    return ModelParams(cfg, tensors, buffers)


def is_head(name):
    return name.startswith("head.")


def load_backbone(backbone: ModelParams, cfg: ModelConfig | None = None, seed=0) -> ModelParams:
    """Fresh model for ``cfg`` (default: a classifier) with the encoder copied from ``backbone``.

    Every non-head tensor and running statistic is copied bit-for-bit;
    the head is newly initialized.
    """
    if cfg is None:
        cfg = replace(backbone.config, head_type="classification")
    if replace(cfg, head_type="reconstruction", dropout=0.0) != replace(
            backbone.config, head_type="reconstruction", dropout=0.0):
        raise ValueError("backbone architecture does not match the target config")
    fresh = init_params(cfg, seed)
    for name, value in backbone.tensors.items():
        if not is_head(name):
            fresh.tensors[name] = value.copy()
    for name, value in backbone.buffers.items():
        fresh.buffers[name] = value.copy()
    return fresh


# --- forward -------------------------------------------------------------

class Forward:
    """One forward pass: wraps parameters as graph leaves and holds mode/rng."""

    def __init__(self, params: ModelParams, mode="infer", rng=None, track=False):
        if mode not in ("train", "infer"):
            raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
        if mode == "train" and rng is None:
            rng = np.random.default_rng(0)
        self.params = params
        self.cfg = params.config
        self.training = mode == "train"
        self.rng = rng
        self.leaves = {k: T.Tensor(v, requires_grad=track) for k, v in params.tensors.items()}
        self.attention = []

    def __getitem__(self, name):
        return self.leaves[name]

    def dropout(self, x):
        return T.dropout(x, self.cfg.dropout, self.rng, self.training)

    def embed(self, patches):
        patches = T.as_tensor(patches)
        if patches.shape[-1] != self.cfg.patch_len:
            raise ValueError(f"patch width {patches.shape[-1]} != patch_len {self.cfg.patch_len}")
        if patches.shape[-2] != self.cfg.n_patches:
            raise ValueError(f"got {patches.shape[-2]} patches, positional table has {self.cfg.n_patches}")
        x = T.add(T.matmul(patches, self["embed.W_P"]), self["embed.W_pos"])
        return self.dropout(x)

    def _bn(self, x, prefix):
        buf = self.params.buffers
        return T.batch_norm(x, self[prefix + ".gamma"], self[prefix + ".beta"],
                            buf[prefix + ".running_mean"], buf[prefix + ".running_var"],
                            self.training)

    def _self_attention(self, x, pre):
        b, n, d = x.shape
        h = self.cfg.n_heads

        def heads(name):
            y = T.linear(x, self[pre + f"attn.W_{name}"], self[pre + f"attn.b_{name}"])
            return T.transpose(T.reshape(y, (b, n, h, d // h)), (0, 2, 1, 3))

        out, weights = T.attention(heads("q"), heads("k"), heads("v"))
        self.attention.append(weights)
        out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (b, n, d))
        return T.linear(out, self[pre + "attn.W_o"], self[pre + "attn.b_o"])

    def encode(self, x):
        x = T.as_tensor(x)
        for i in range(self.cfg.n_layers):
            pre = f"layers.{i}."
            x = self._bn(T.add(x, self.dropout(self._self_attention(x, pre))), pre + "bn1")
            ff = T.gelu(T.linear(x, self[pre + "ff.W_1"], self[pre + "ff.b_1"]))
            ff = T.linear(ff, self[pre + "ff.W_2"], self[pre + "ff.b_2"])
            x = self._bn(T.add(x, self.dropout(ff)), pre + "bn2")
        return x

    def channels(self, fhr_patches, uc_patches):
        """Run both channels through the shared encoder as separate sequences."""
        fhr_patches, uc_patches = T.as_tensor(fhr_patches), T.as_tensor(uc_patches)
        if fhr_patches.shape != uc_patches.shape:
            raise ValueError(f"FHR patches {fhr_patches.shape} and UC patches {uc_patches.shape} differ")
        both = T.concat([fhr_patches, uc_patches], axis=0)
        fhr_repr, uc_repr = T.split(self.encode(self.embed(both)), 2, axis=0)
        return fhr_repr, uc_repr

    def reconstruct(self, fhr_repr, uc_repr):
        if self.cfg.head_type != "reconstruction":
            raise ValueError("model has no reconstruction head")
        joint = self.dropout(T.concat([fhr_repr, uc_repr], axis=-1))
        return T.linear(joint, self["head.W"], self["head.b"])

    def classify_logits(self, fhr_repr, uc_repr):
        if self.cfg.head_type != "classification":
            raise ValueError("model has no classification head")
        joint = T.concat([T.flatten(fhr_repr), T.flatten(uc_repr)], axis=-1)
        return T.linear(self.dropout(joint), self["head.W"], self["head.b"])


def _batched(patches):
    patches = np.asarray(patches, dtype=np.float64)
    return (patches[None], True) if patches.ndim == 2 else (patches, False)


def embed_patches(patches, params: ModelParams):
    """Token matrix ``patches @ W_P + W_pos`` (inference mode)."""
    x, single = _batched(patches)
    out = Forward(params).embed(x).data
    return out[0] if single else out


def encode(tokens, params: ModelParams, mode="infer", rng=None, return_attention=False):
    x, single = _batched(tokens)
    fw = Forward(params, mode, rng)
    out = fw.encode(x).data
    out = out[0] if single else out
    return (out, fw.attention) if return_attention else out


def forward_channel_independent(fhr_patches, uc_patches, params: ModelParams, mode="infer", rng=None):
    fhr, single = _batched(fhr_patches)
    uc, _ = _batched(uc_patches)
    f, u = Forward(params, mode, rng).channels(fhr, uc)
    return (f.data[0], u.data[0]) if single else (f.data, u.data)


def reconstruct(fhr_repr, uc_repr, params: ModelParams, mode="infer", rng=None):
    """Per-token linear map from the joint ``[fhr; uc]`` token to a patch."""
    f, single = _batched(fhr_repr)
    u, _ = _batched(uc_repr)
    out = Forward(params, mode, rng).reconstruct(f, u).data
    return out[0] if single else out


def _softmax_positive(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e[..., 1] / e.sum(axis=-1)


def classify(fhr_repr, uc_repr, params: ModelParams, mode="infer", rng=None):
    """Probability of the positive (acidemia) class."""
    f, single = _batched(fhr_repr)
    u, _ = _batched(uc_repr)
    p = _softmax_positive(Forward(params, mode, rng).classify_logits(f, u).data)
    return float(p[0]) if single else p


def predict_proba(params: ModelParams, fhr_patches, uc_patches, batch_size=256):
    """End-to-end inference-mode probabilities for ``(B, N, P)`` patch batches."""
    out = []
    for s in range(0, len(fhr_patches), batch_size):
        fw = Forward(params)
        f, u = fw.channels(fhr_patches[s:s + batch_size], uc_patches[s:s + batch_size])
        out.append(_softmax_positive(fw.classify_logits(f, u).data))
    return np.concatenate(out) if out else np.zeros(0)


def pretrain_loss(pred, target, mask):
    """Mean over masked patches of the squared L2 patch error.

    ``pred``/``target`` are ``(..., N, P)``; ``mask`` is a boolean array
    of the leading shape ``(..., N)``.  Unmasked patches get exactly zero
    gradient.
    """
    mask = np.asarray(mask, dtype=bool)
    n_masked = int(mask.sum())
    if n_masked == 0:
        raise ValueError("pretraining loss needs at least one masked patch")
    weight = mask[..., None].astype(np.float64)
    diff = T.mul(T.sub(target, pred), weight)
    return T.mul(T.tsum(T.mul(diff, diff)), 1.0 / n_masked)


# --- weight file ----------------------------------------------------------

def save_params(params: ModelParams, path) -> None:
    """Write the ``CTGW`` weight file (float32 little-endian tensors)."""
    cfg = json.dumps(asdict(params.config), sort_keys=True).encode("utf-8")
    chunks = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<I", len(cfg)), cfg]
    named = sorted({**params.tensors, **params.buffers}.items())
    for name, value in named:
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack("<I", value.ndim) + struct.pack(f"<{value.ndim}I", *value.shape))
        chunks.append(np.ascontiguousarray(value, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


class WeightFileError(ValueError):
    pass


def load_params(path, expected: ModelConfig | None = None) -> ModelParams:
    blob = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise WeightFileError(f"{path}: truncated weight file")
        out = blob[pos:pos + n]
        pos += n
        return out

    if take(4) != MAGIC:
        raise WeightFileError(f"{path}: not a CTGW weight file")
    (version,) = struct.unpack("<I", take(4))
    if version != FORMAT_VERSION:
        raise WeightFileError(f"{path}: unsupported format version {version}")
    (cfg_len,) = struct.unpack("<I", take(4))
    try:
        cfg = ModelConfig(**json.loads(take(cfg_len).decode("utf-8")))
    except (TypeError, ValueError) as exc:
        raise WeightFileError(f"{path}: bad config block ({exc})") from None
    if expected is not None and cfg != expected:
        raise WeightFileError(f"{path}: stored config {cfg} does not match expected {expected}")

    found = {}
    while pos < len(blob):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        found[name] = np.frombuffer(take(4 * count), dtype="<f4").reshape(dims).astype(np.float64)

    shapes, buffer_shapes = _shapes(cfg), _buffer_shapes(cfg)
    wanted = {**shapes, **buffer_shapes}
    missing = sorted(set(wanted) - set(found))
    extra = sorted(set(found) - set(wanted))
    if missing or extra:
        raise WeightFileError(f"{path}: missing tensors {missing}, unexpected {extra}")
    for name, shape in wanted.items():
        if found[name].shape != tuple(shape):
            raise WeightFileError(f"{path}: tensor {name} has shape {found[name].shape}, expected {shape}")
    if not all(np.all(np.isfinite(v)) for v in found.values()):
        raise WeightFileError(f"{path}: non-finite values in weight file")
    return ModelParams(cfg, {k: found[k] for k in shapes}, {k: found[k] for k in buffer_shapes})
