"""Local embedding model: a small dense encoder with a classification head.

Each silo trains one of these per ensemble member.  The encoder body maps an
input feature vector through hidden layers to a latent embedding (the
pre-classification activation); the head is only used during training.  Two
loss variants: plain softmax cross-entropy on raw head logits, and an
additive angular margin on cosine logits (true-class logit s*cos(theta+m)).

All math is float64 numpy with manual backprop so training is deterministic
and bit-reproducible given seeds.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, replace

import numpy as np

from .core import Layout, ParamVec, SeededRng, flatten_tensors

NORM_EPS = 1e-12  # guard for zero-norm latents / class weights

ACTIVATIONS = ("relu", "tanh")
LOSSES = ("softmax", "angular_margin")


@dataclass(frozen=True)
class EncoderConfig:
    input_dim: int
    hidden_dims: tuple[int, ...] = (64,)
    embed_dim: int = 64
    num_classes: int = 2
    activation: str = "relu"
    loss: str = "softmax"
    margin: float = 0.2
    scale: float = 16.0

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(d) for d in self.hidden_dims))
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.embed_dim < 2:
            raise ValueError("embed_dim must be >= 2")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}")
        if self.margin < 0:
            raise ValueError("margin must be >= 0")
        if self.scale <= 0:
            raise ValueError("scale must be > 0")

    def layer_dims(self) -> list[tuple[int, int]]:
        dims = [self.input_dim, *self.hidden_dims, self.embed_dim, self.num_classes]
        return list(zip(dims[:-1], dims[1:]))

    def layout(self) -> Layout:
        entries = []
        pairs = self.layer_dims()
        for i, (d_in, d_out) in enumerate(pairs):
            if i == len(pairs) - 1:
                name = "head"
            elif i == len(pairs) - 2:
                name = "embed"
            else:
                name = f"hidden{i}"
            entries.append((f"{name}.W", (d_in, d_out)))
            entries.append((f"{name}.b", (d_out,)))
        return tuple(entries)


def init_model(cfg: EncoderConfig, rng: SeededRng) -> ParamVec:
    """Uniform fan-in initialization, drawn layer by layer (W then b).

    Deterministic in the rng stream, so silos sharing (seed, label) build
    bit-identical initial models.
    """
    tensors = {}
    for name, shape in cfg.layout():
        fan_in = shape[0] if len(shape) == 2 else _bias_fan_in(cfg, name)
        bound = 1.0 / np.sqrt(max(fan_in, 1))
        tensors[name] = rng.uniform(-bound, bound, size=shape)
    return flatten_tensors(tensors, cfg.layout())


def _bias_fan_in(cfg: EncoderConfig, bias_name: str) -> int:
    prefix = bias_name[: -len(".b")]
    for name, shape in cfg.layout():
        if name == f"{prefix}.W":
            return shape[0]
    raise KeyError(bias_name)


def _act(h: np.ndarray, kind: str) -> np.ndarray:
    return np.maximum(h, 0.0) if kind == "relu" else np.tanh(h)


def _act_grad(h_pre: np.ndarray, h_post: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return (h_pre > 0).astype(np.float64)
    return 1.0 - h_post * h_post


def _forward_body(params: ParamVec, cfg: EncoderConfig, x: np.ndarray):
    """Run the encoder body; returns the latent batch plus per-layer caches."""
    t = params.tensors()
    h = x
    caches = []  # (input, pre-activation, post-activation) per hidden layer
    for i in range(len(cfg.hidden_dims)):
        pre = h @ t[f"hidden{i}.W"] + t[f"hidden{i}.b"]
        post = _act(pre, cfg.activation)
        caches.append((h, pre, post))
        h = post
    z = h @ t["embed.W"] + t["embed.b"]
    return z, h, caches, t


def embed(params: ParamVec, cfg: EncoderConfig, x: np.ndarray) -> np.ndarray:
    """Latent representation: the pre-classification layer output."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    if xb.shape[1] != cfg.input_dim:
        raise ValueError(f"expected input_dim={cfg.input_dim}, got {xb.shape[1]}")
    z, _, _, _ = _forward_body(params, cfg, xb)
    return z[0] if single else z


def _softmax_ce(logits: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and dL/dlogits for a batch."""
    m = logits.max(axis=1, keepdims=True)
    ex = np.exp(logits - m)
    probs = ex / ex.sum(axis=1, keepdims=True)
    n = logits.shape[0]
    nll = -np.log(probs[np.arange(n), y] + 1e-300)
    dlogits = probs.copy()
    dlogits[np.arange(n), y] -= 1.0
    return float(nll.mean()), dlogits / n


def _head_logits(t: dict, cfg: EncoderConfig, z: np.ndarray):
    """Logits plus the intermediates needed for the backward pass."""
    W, b = t["head.W"], t["head.b"]
    if cfg.loss == "softmax":
        return z @ W + b, None
    # Angular margin: cosine between normalized latent and normalized class rows.
    zn_norm = np.maximum(np.linalg.norm(z, axis=1, keepdims=True), NORM_EPS)
    wn_norm = np.maximum(np.linalg.norm(W, axis=0, keepdims=True), NORM_EPS)
    zn = z / zn_norm
    wn = W / wn_norm
    cos = zn @ wn  # (n, C)
    return cos, (zn, wn, zn_norm, wn_norm, cos)


def loss_and_grad(
    params: ParamVec, cfg: EncoderConfig, x: np.ndarray, y: np.ndarray
) -> tuple[float, ParamVec]:
    """Mean cross-entropy over the batch and its analytic gradient.

    For `angular_margin`, the true-class logit is s*cos(theta_y + m) and all
    other logits s*cos(theta_j); at m=0, s=1 this is softmax cross-entropy on
    the cosine logits.  The head bias is unused on that path (gradient zero).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("batch must be a nonempty (n, input_dim) array")
    if y.min() < 0 or y.max() >= cfg.num_classes:
        raise ValueError("class index out of range")

    z, h_last, caches, t = _forward_body(params, cfg, x)
    n = x.shape[0]
    rows = np.arange(n)
    grads = {name: np.zeros(shape) for name, shape in cfg.layout()}

    if cfg.loss == "softmax":
        logits = z @ t["head.W"] + t["head.b"]
        loss, dlogits = _softmax_ce(logits, y)
        grads["head.W"] = z.T @ dlogits
        grads["head.b"] = dlogits.sum(axis=0)
        dz = dlogits @ t["head.W"].T
    else:
        cos, (zn, wn, zn_norm, wn_norm, _) = _head_logits(t, cfg, z)
        cos_y = cos[rows, y]
        sin_y = np.sqrt(np.maximum(1.0 - cos_y**2, NORM_EPS))
        logits = cfg.scale * cos
        logits[rows, y] = cfg.scale * (
            cos_y * np.cos(cfg.margin) - sin_y * np.sin(cfg.margin)
        )
        loss, dlogits = _softmax_ce(logits, y)
        # dlogit/dcos is s everywhere except the true class, where the margin
        # rotation contributes an extra cos/sin term.
        dcos = dlogits * cfg.scale
        dcos[rows, y] = dlogits[rows, y] * cfg.scale * (
            np.cos(cfg.margin) + np.sin(cfg.margin) * cos_y / sin_y
        )
        # cos = zn @ wn with zn, wn normalized: push through both normalizations.
        dzn = dcos @ wn.T
        dwn = zn.T @ dcos
        dz = (dzn - zn * (dzn * zn).sum(axis=1, keepdims=True)) / zn_norm
        grads["head.W"] = (dwn - wn * (dwn * wn).sum(axis=0, keepdims=True)) / wn_norm
        # head bias unused by the angular path

    # Backprop through embed layer and hidden stack.
    grads["embed.W"] = h_last.T @ dz
    grads["embed.b"] = dz.sum(axis=0)
    dh = dz @ t["embed.W"].T
    for i in reversed(range(len(cfg.hidden_dims))):
        h_in, pre, post = caches[i]
        dpre = dh * _act_grad(pre, post, cfg.activation)
        grads[f"hidden{i}.W"] = h_in.T @ dpre
        grads[f"hidden{i}.b"] = dpre.sum(axis=0)
        dh = dpre @ t[f"hidden{i}.W"].T
    return loss, flatten_tensors(grads, cfg.layout())


def train_local(
    params: ParamVec,
    cfg: EncoderConfig,
    features: np.ndarray,
    labels: np.ndarray,
    epochs: int,
    lr: float,
    batch_size: int,
    rng: SeededRng,
) -> ParamVec:
    """Plain SGD with seeded shuffling; deterministic given (params, data, rng)."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if features.shape[0] == 0:
        raise ValueError("empty training data")
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    values = params.values.copy()
    n = features.shape[0]
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            _, grad = loss_and_grad(params.with_values(values), cfg, features[idx], labels[idx])
            values = values - lr * grad.values
    return params.with_values(values)


@dataclass(frozen=True)
class EnsembleModel:
    """Ordered, fixed list of (config, params) members; identical across silos."""

    members: tuple[tuple[EncoderConfig, ParamVec], ...]

    def __post_init__(self):
        if len(self.members) < 1:
            raise ValueError("ensemble needs at least one member")
        base = self.members[0][0]
        for cfg, _ in self.members:
            if cfg.input_dim != base.input_dim or cfg.num_classes != base.num_classes:
                raise ValueError("members must share input_dim and num_classes")

    @property
    def size(self) -> int:
        return len(self.members)


def init_ensemble(cfg: EncoderConfig, n_members: int, rng: SeededRng) -> EnsembleModel:
    """Members differ only in their init stream (`member=<i>` children)."""
    members = tuple(
        (cfg, init_model(cfg, rng.child(f"member={i}"))) for i in range(n_members)
    )
    return EnsembleModel(members)


def ensemble_embed(ens: EnsembleModel, x: np.ndarray) -> list[np.ndarray]:
    return [embed(params, cfg, x) for cfg, params in ens.members]


def flatten_ensemble(ens: EnsembleModel) -> ParamVec:
    """Concatenate member vectors into one flat vector for a single sync round."""
    layout = []
    parts = []
    for i, (_, params) in enumerate(ens.members):
        layout.extend(((f"m{i}.{name}", shape) for name, shape in params.layout))
        parts.append(params.values)
    return ParamVec(np.concatenate(parts), tuple(layout))


def unflatten_ensemble(flat: ParamVec, ens: EnsembleModel) -> EnsembleModel:
    """Inverse of flatten_ensemble, reusing the member configs of `ens`."""
    members = []
    offset = 0
    for cfg, params in ens.members:
        n = params.size
        members.append((cfg, params.with_values(flat.values[offset:offset + n])))
        offset += n
    if offset != flat.size:
        raise ValueError("flat vector does not match ensemble size")
    return EnsembleModel(tuple(members))


CHECKPOINT_FORMAT = "fedgm-checkpoint-v1"


def save_checkpoint(path, params: ParamVec) -> None:
    """Header line of JSON (format + layout) followed by raw little-endian f64."""
    header = {"format": CHECKPOINT_FORMAT, "layout": [[n, list(s)] for n, s in params.layout]}
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, separators=(",", ":")).encode("utf-8") + b"\n")
        fh.write(params.values.astype("<f8").tobytes())


def load_checkpoint(path) -> ParamVec:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"not a {CHECKPOINT_FORMAT} file")
        layout = tuple((n, tuple(s)) for n, s in header["layout"])
        raw = fh.read()
    values = np.frombuffer(raw, dtype="<f8")
    return ParamVec(values, layout)
