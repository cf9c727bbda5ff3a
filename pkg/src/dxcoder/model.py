"""Multi-label text classifier: token + learned positional embeddings, a
small pre-norm transformer encoder, and a pooler/dropout/classifier head
producing one logit per code.

Everything is float64 numpy with hand-written analytic gradients, which
keeps finite-difference checks tight and makes training bit-reproducible.
Fixed choices, held stable for reproducibility:

  - pre-norm blocks: x += attention(LN(x)); x += feedforward(LN(x))
  - layer norm epsilon 1e-5
  - feed-forward nonlinearity: tanh-approximation GELU,
    0.5*u*(1 + tanh(sqrt(2/pi)*(u + 0.044715*u^3)))
  - attention padding mask fills scores with -1e30 before softmax
  - pooling reads the sequence-start position (index 0)
  - dropout (head only, train mode only) is inverted dropout driven by an
    explicit dropout_seed, so a step is exactly repeatable

The parameter partition is name-based: pooler.* and classifier.* form the
head, everything else (embeddings and blocks) the backbone. In
backbone_frozen mode only head parameters receive gradients.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .tokenizer import PAD_ID, START_ID

LN_EPS = 1e-5
_MASK_FILL = -1e30
_GELU_K = math.sqrt(2.0 / math.pi)
_GELU_C = 0.044715


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    n_classes: int
    max_len: int = 256
    embed_dim: int = 128
    n_blocks: int = 2
    n_heads: int = 4
    dropout: float = 0.25
    backbone_frozen: bool = False

    def __post_init__(self) -> None:
        for name in ("vocab_size", "n_classes", "max_len", "embed_dim", "n_blocks", "n_heads"):
            if getattr(self, name) < 1:
                raise ModelError(f"{name} must be positive")
        if self.embed_dim % self.n_heads:
            raise ModelError(
                f"n_heads ({self.n_heads}) must divide embed_dim ({self.embed_dim})"
            )
        if not (0.0 <= self.dropout < 1.0):
            raise ModelError(f"dropout must be in [0, 1), got {self.dropout!r}")

    @property
    def ff_dim(self) -> int:
        return 4 * self.embed_dim

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.n_heads


def _expected_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f = config.embed_dim, config.ff_dim
    shapes: dict[str, tuple[int, ...]] = {
        "embedding": (config.vocab_size, d),
        "positional": (config.max_len, d),
    }
    for i in range(config.n_blocks):
        p = f"block{i}."
        shapes[p + "ln1.scale"] = (d,)
        shapes[p + "ln1.shift"] = (d,)
        for w in ("wq", "wk", "wv", "wo"):
            shapes[p + "attn." + w] = (d, d)
        for b in ("bq", "bk", "bv", "bo"):
            shapes[p + "attn." + b] = (d,)
        shapes[p + "ln2.scale"] = (d,)
        shapes[p + "ln2.shift"] = (d,)
        shapes[p + "ff.w1"] = (f, d)
        shapes[p + "ff.b1"] = (f,)
        shapes[p + "ff.w2"] = (d, f)
        shapes[p + "ff.b2"] = (d,)
    shapes["pooler.weight"] = (d, d)
    shapes["pooler.bias"] = (d,)
    shapes["classifier.weight"] = (config.n_classes, d)
    shapes["classifier.bias"] = (config.n_classes,)
    return shapes


def partition_of(name: str) -> str:
    return "head" if name.startswith(("pooler.", "classifier.")) else "backbone"


@dataclass
class ModelState:
    config: ModelConfig
    params: dict[str, np.ndarray]

    def __post_init__(self) -> None:
        expected = _expected_shapes(self.config)
        if set(self.params) != set(expected):
            missing = sorted(set(expected) - set(self.params))
            extra = sorted(set(self.params) - set(expected))
            raise ModelError(f"parameter set mismatch: missing={missing[:4]} extra={extra[:4]}")
        for name, arr in self.params.items():
            if arr.shape != expected[name]:
                raise ModelError(
                    f"{name}: expected shape {expected[name]}, got {arr.shape}"
                )
            if arr.dtype != np.float64:
                raise ModelError(f"{name}: parameters must be float64, got {arr.dtype}")

    def trainable_names(self) -> list[str]:
        if self.config.backbone_frozen:
            return [n for n in self.params if partition_of(n) == "head"]
        return list(self.params)


def init(config: ModelConfig, seed: int) -> ModelState:
    """Matrices are zero-mean uniform with half-width sqrt(6/(fan_in+fan_out));
    biases zero; layer-norm scale 1, shift 0. Matrices are drawn in a fixed
    documented order (embedding, positional, per block wq wk wv wo w1 w2,
    pooler, classifier) so states are bitwise reproducible per seed."""
    rng = np.random.default_rng(seed)

    def xavier(rows: int, cols: int) -> np.ndarray:
        half = math.sqrt(6.0 / (rows + cols))
        return rng.uniform(-half, half, size=(rows, cols))

    d, f = config.embed_dim, config.ff_dim
    params: dict[str, np.ndarray] = {
        "embedding": xavier(config.vocab_size, d),
        "positional": xavier(config.max_len, d),
    }
    for i in range(config.n_blocks):
        p = f"block{i}."
        for w in ("wq", "wk", "wv", "wo"):
            params[p + "attn." + w] = xavier(d, d)
        params[p + "ff.w1"] = xavier(f, d)
        params[p + "ff.w2"] = xavier(d, f)
        for b, width in (("bq", d), ("bk", d), ("bv", d), ("bo", d)):
            params[p + "attn." + b] = np.zeros(width)
        params[p + "ff.b1"] = np.zeros(f)
        params[p + "ff.b2"] = np.zeros(d)
        params[p + "ln1.scale"] = np.ones(d)
        params[p + "ln1.shift"] = np.zeros(d)
        params[p + "ln2.scale"] = np.ones(d)
        params[p + "ln2.shift"] = np.zeros(d)
    params["pooler.weight"] = xavier(d, d)
    params["pooler.bias"] = np.zeros(d)
    params["classifier.weight"] = xavier(config.n_classes, d)
    params["classifier.bias"] = np.zeros(config.n_classes)
    return ModelState(config=config, params=params)


def assemble_batch(sequences: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad id sequences to the longest in the batch; mask marks real
    tokens."""
    if not sequences:
        raise ModelError("cannot assemble an empty batch")
    width = max(len(s) for s in sequences)
    ids = np.full((len(sequences), width), PAD_ID, dtype=np.int64)
    mask = np.zeros((len(sequences), width), dtype=bool)
    for row, seq in enumerate(sequences):
        ids[row, : len(seq)] = seq
        mask[row, : len(seq)] = True
    return ids, mask


# --- layer primitives --------------------------------------------------------


def _layer_norm(x: np.ndarray, scale: np.ndarray, shift: np.ndarray):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (x - mu) * inv
    return xhat * scale + shift, (xhat, inv, scale)


def _layer_norm_backward(dy: np.ndarray, cache):
    xhat, inv, scale = cache
    reduce_axes = tuple(range(dy.ndim - 1))
    dscale = (dy * xhat).sum(axis=reduce_axes)
    dshift = dy.sum(axis=reduce_axes)
    dxhat = dy * scale
    dx = inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dscale, dshift


def _gelu(u: np.ndarray):
    inner = _GELU_K * (u + _GELU_C * u**3)
    t = np.tanh(inner)
    return 0.5 * u * (1.0 + t), (u, t)


def _gelu_backward(d: np.ndarray, cache):
    u, t = cache
    dinner = _GELU_K * (1.0 + 3.0 * _GELU_C * u**2)
    return d * (0.5 * (1.0 + t) + 0.5 * u * (1.0 - t**2) * dinner)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def bce_with_logits(logits: np.ndarray, targets: np.ndarray) -> float:
    """Mean over all entries of max(z,0) - z*t + log(1 + exp(-|z|))."""
    if logits.shape != targets.shape:
        raise ModelError(f"logits {logits.shape} vs targets {targets.shape}")
    z, t = logits, targets
    per_entry = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    return float(per_entry.mean())


# --- forward -----------------------------------------------------------------


def _check_batch(state: ModelState, ids: np.ndarray, mask: np.ndarray) -> None:
    if ids.ndim != 2 or ids.shape != mask.shape:
        raise ModelError(f"ids {ids.shape} and mask {mask.shape} must be equal 2-d shapes")
    if ids.shape[1] > state.config.max_len:
        raise ModelError(
            f"sequence length {ids.shape[1]} exceeds max_len {state.config.max_len}"
        )
    if ids.max(initial=0) >= state.config.vocab_size:
        raise ModelError("token id outside the vocabulary")
    if not (ids[:, 0] == START_ID).all() or not mask[:, 0].all():
        raise ModelError("every row must begin with the sequence-start token")


def _forward(state: ModelState, ids: np.ndarray, mask: np.ndarray,
             train_mode: bool, dropout_seed: int):
    _check_batch(state, ids, mask)
    cfg = state.config
    p = state.params
    n_batch, seq = ids.shape
    dh = cfg.head_dim

    x = p["embedding"][ids] + p["positional"][:seq]
    key_mask = mask[:, None, None, :]  # broadcast over heads and query index
    blocks = []
    for i in range(cfg.n_blocks):
        pre = f"block{i}."
        h, ln1_cache = _layer_norm(x, p[pre + "ln1.scale"], p[pre + "ln1.shift"])
        q = h @ p[pre + "attn.wq"].T + p[pre + "attn.bq"]
        k = h @ p[pre + "attn.wk"].T + p[pre + "attn.bk"]
        v = h @ p[pre + "attn.wv"].T + p[pre + "attn.bv"]
        # (batch, heads, seq, head_dim)
        q4 = q.reshape(n_batch, seq, cfg.n_heads, dh).transpose(0, 2, 1, 3)
        k4 = k.reshape(n_batch, seq, cfg.n_heads, dh).transpose(0, 2, 1, 3)
        v4 = v.reshape(n_batch, seq, cfg.n_heads, dh).transpose(0, 2, 1, 3)
        scores = np.where(key_mask, (q4 @ k4.transpose(0, 1, 3, 2)) / math.sqrt(dh), _MASK_FILL)
        scores -= scores.max(axis=-1, keepdims=True)
        attn = np.exp(scores)
        attn /= attn.sum(axis=-1, keepdims=True)
        ctx = (attn @ v4).transpose(0, 2, 1, 3).reshape(n_batch, seq, cfg.embed_dim)
        x_attn = x + (ctx @ p[pre + "attn.wo"].T + p[pre + "attn.bo"])

        h2, ln2_cache = _layer_norm(x_attn, p[pre + "ln2.scale"], p[pre + "ln2.shift"])
        u = h2 @ p[pre + "ff.w1"].T + p[pre + "ff.b1"]
        g, gelu_cache = _gelu(u)
        x = x_attn + (g @ p[pre + "ff.w2"].T + p[pre + "ff.b2"])
        blocks.append(
            {"h": h, "ln1": ln1_cache, "q4": q4, "k4": k4, "v4": v4, "attn": attn,
             "ctx": ctx, "x_attn": x_attn, "h2": h2, "ln2": ln2_cache,
             "gelu": gelu_cache, "g": g}
        )

    cls = x[:, 0, :]
    pooled_pre = cls @ p["pooler.weight"].T + p["pooler.bias"]
    pooled = np.tanh(pooled_pre)
    if train_mode and cfg.dropout > 0.0:
        rng = np.random.default_rng(dropout_seed)
        keep = (rng.random(pooled.shape) >= cfg.dropout) / (1.0 - cfg.dropout)
    else:
        keep = None
    dropped = pooled if keep is None else pooled * keep
    logits = dropped @ p["classifier.weight"].T + p["classifier.bias"]
    cache = {"ids": ids, "mask": mask, "seq": seq, "blocks": blocks, "cls": cls,
             "pooled": pooled, "keep": keep, "dropped": dropped}
    return logits, cache


def forward(state: ModelState, ids: np.ndarray, mask: np.ndarray,
            train_mode: bool = False, dropout_seed: int = 0) -> np.ndarray:
    logits, _ = _forward(state, ids, mask, train_mode, dropout_seed)
    return logits


def predict(logits: np.ndarray, threshold: float = 0.5) -> tuple[np.ndarray, set[int]]:
    """Sigmoid probabilities and the set of indices STRICTLY above the
    threshold (a probability equal to the threshold is not predicted)."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 1:
        raise ModelError(f"predict expects a logit vector, got shape {logits.shape}")
    probs = _sigmoid(logits)
    return probs, {int(i) for i in np.nonzero(probs > threshold)[0]}


def predict_batch(logits: np.ndarray, threshold: float = 0.5) -> tuple[np.ndarray, list[set[int]]]:
    probs = _sigmoid(np.asarray(logits, dtype=np.float64))
    return probs, [{int(i) for i in np.nonzero(row > threshold)[0]} for row in probs]


# --- backward ----------------------------------------------------------------


def backward(
    state: ModelState,
    ids: np.ndarray,
    mask: np.ndarray,
    targets: np.ndarray,
    train_mode: bool = True,
    dropout_seed: int = 0,
) -> tuple[float, dict[str, np.ndarray]]:
    """Loss plus analytic gradients for every trainable parameter. In
    backbone_frozen mode backpropagation stops at the pooled vector and only
    head gradients are returned."""
    cfg = state.config
    p = state.params
    logits, cache = _forward(state, ids, mask, train_mode, dropout_seed)
    if targets.shape != logits.shape:
        raise ModelError(f"targets {targets.shape} vs logits {logits.shape}")
    bad = np.setdiff1d(np.unique(targets), [0.0, 1.0])
    if bad.size:
        raise ModelError(f"targets must be 0/1, found {bad[:4]}")

    loss = bce_with_logits(logits, targets)
    grads: dict[str, np.ndarray] = {}
    dlogits = (_sigmoid(logits) - targets) / logits.size

    grads["classifier.weight"] = dlogits.T @ cache["dropped"]
    grads["classifier.bias"] = dlogits.sum(axis=0)
    ddropped = dlogits @ p["classifier.weight"]
    dpooled = ddropped if cache["keep"] is None else ddropped * cache["keep"]
    dpooled_pre = dpooled * (1.0 - cache["pooled"] ** 2)
    grads["pooler.weight"] = dpooled_pre.T @ cache["cls"]
    grads["pooler.bias"] = dpooled_pre.sum(axis=0)

    if cfg.backbone_frozen:
        return loss, grads

    n_batch, seq = cache["ids"].shape
    dh = cfg.head_dim
    dcls = dpooled_pre @ p["pooler.weight"]
    dx = np.zeros((n_batch, seq, cfg.embed_dim))
    dx[:, 0, :] = dcls

    for i in reversed(range(cfg.n_blocks)):
        pre = f"block{i}."
        blk = cache["blocks"][i]

        # feed-forward sublayer: x = x_attn + g @ w2.T + b2
        dg = dx @ p[pre + "ff.w2"]
        grads[pre + "ff.w2"] = np.einsum("btd,btf->df", dx, blk["g"])
        grads[pre + "ff.b2"] = dx.sum(axis=(0, 1))
        du = _gelu_backward(dg, blk["gelu"])
        grads[pre + "ff.w1"] = np.einsum("btf,btd->fd", du, blk["h2"])
        grads[pre + "ff.b1"] = du.sum(axis=(0, 1))
        dh2 = du @ p[pre + "ff.w1"]
        dx_attn, dscale2, dshift2 = _layer_norm_backward(dh2, blk["ln2"])
        grads[pre + "ln2.scale"] = dscale2
        grads[pre + "ln2.shift"] = dshift2
        dx_attn = dx_attn + dx  # residual

        # attention sublayer: x_attn = x_in + ctx @ wo.T + bo
        dctx = dx_attn @ p[pre + "attn.wo"]
        grads[pre + "attn.wo"] = np.einsum("btd,bte->de", dx_attn, blk["ctx"])
        grads[pre + "attn.bo"] = dx_attn.sum(axis=(0, 1))
        dctx4 = dctx.reshape(n_batch, seq, cfg.n_heads, dh).transpose(0, 2, 1, 3)
        dattn = dctx4 @ blk["v4"].transpose(0, 1, 3, 2)
        dv4 = blk["attn"].transpose(0, 1, 3, 2) @ dctx4
        # softmax backward; masked entries have attn == 0 so they drop out
        dscores = blk["attn"] * (dattn - (dattn * blk["attn"]).sum(axis=-1, keepdims=True))
        dscores /= math.sqrt(dh)
        dq4 = dscores @ blk["k4"]
        dk4 = dscores.transpose(0, 1, 3, 2) @ blk["q4"]

        def _merge(t4: np.ndarray) -> np.ndarray:
            return t4.transpose(0, 2, 1, 3).reshape(n_batch, seq, cfg.embed_dim)

        dq, dk, dv = _merge(dq4), _merge(dk4), _merge(dv4)
        h = blk["h"]
        grads[pre + "attn.wq"] = np.einsum("btd,bte->de", dq, h)
        grads[pre + "attn.wk"] = np.einsum("btd,bte->de", dk, h)
        grads[pre + "attn.wv"] = np.einsum("btd,bte->de", dv, h)
        grads[pre + "attn.bq"] = dq.sum(axis=(0, 1))
        grads[pre + "attn.bk"] = dk.sum(axis=(0, 1))
        grads[pre + "attn.bv"] = dv.sum(axis=(0, 1))
        dh_total = dq @ p[pre + "attn.wq"] + dk @ p[pre + "attn.wk"] + dv @ p[pre + "attn.wv"]
        dx_in, dscale1, dshift1 = _layer_norm_backward(dh_total, blk["ln1"])
        grads[pre + "ln1.scale"] = dscale1
        grads[pre + "ln1.shift"] = dshift1
        dx = dx_in + dx_attn  # residual

    grads["embedding"] = np.zeros_like(p["embedding"])
    np.add.at(grads["embedding"], cache["ids"], dx)
    grads["positional"] = np.zeros_like(p["positional"])
    grads["positional"][:seq] = dx.sum(axis=0)
    return loss, grads


# --- checkpoints -------------------------------------------------------------
#
# A checkpoint is a numpy .npz archive holding:
#   config     uint8 bytes of the sorted-key JSON ModelConfig
#   partition  uint8 bytes of the sorted-key JSON {parameter name: partition}
#   param.<name>  one float64 array per parameter
# Loading restores arrays bitwise and re-validates shapes and partition labels.


def save_checkpoint(state: ModelState, path: str | Path) -> None:
    arrays: dict[str, np.ndarray] = {}
    config_json = json.dumps(asdict(state.config), sort_keys=True)
    partition_json = json.dumps(
        {name: partition_of(name) for name in state.params}, sort_keys=True
    )
    arrays["config"] = np.frombuffer(config_json.encode("utf-8"), dtype=np.uint8)
    arrays["partition"] = np.frombuffer(partition_json.encode("utf-8"), dtype=np.uint8)
    for name, arr in state.params.items():
        arrays["param." + name] = arr
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path: str | Path) -> ModelState:
    with np.load(path) as archive:
        try:
            config_obj = json.loads(bytes(archive["config"]).decode("utf-8"))
            partition_obj = json.loads(bytes(archive["partition"]).decode("utf-8"))
        except (KeyError, json.JSONDecodeError) as err:
            raise ModelError(f"{path}: not a model checkpoint ({err})") from None
        config = ModelConfig(**config_obj)
        params = {
            key[len("param."):]: archive[key]
            for key in archive.files
            if key.startswith("param.")
        }
    state = ModelState(config=config, params=params)
    for name in state.params:
        recorded = partition_obj.get(name)
        if recorded != partition_of(name):
            raise ModelError(
                f"{path}: partition label for {name!r} is {recorded!r}, "
                f"expected {partition_of(name)!r}"
            )
    return state
