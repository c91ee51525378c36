"""Reconstruction-attack demo: regress inputs back from plaintext latents.

Demonstrates why sharing unmasked embeddings is unsafe: any party holding
(latent, input) pairs can train a decoder and then invert latents it was never
given inputs for.  The decoder here is a small dense network on feature
vectors; the reference system's image decoder is a transposed-convolution
stack (fully connected 512 -> 7x7x256, then five ConvTranspose2d stages up to
112x112, tanh output for [-1, 1]-normalized pixels), which this module
replaces at desk scale.

By construction the attack consumes plaintext latents only: no operation here
accepts masked embeddings, because without a silo's private left inverse they
do not expose the latent space.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Layout, ParamVec, SeededRng, flatten_tensors


@dataclass(frozen=True)
class DecoderConfig:
    embed_dim: int
    hidden_dims: tuple[int, ...] = (64,)
    output_dim: int = 32
    activation: str = "relu"
    output_activation: str = "linear"  # "tanh" when targets live in [-1, 1]

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(d) for d in self.hidden_dims))
        if self.output_activation not in ("linear", "tanh"):
            raise ValueError("output_activation must be 'linear' or 'tanh'")
        if self.activation not in ("relu", "tanh"):
            raise ValueError("activation must be 'relu' or 'tanh'")

    def layer_dims(self) -> list[tuple[int, int]]:
        dims = [self.embed_dim, *self.hidden_dims, self.output_dim]
        return list(zip(dims[:-1], dims[1:]))

    def layout(self) -> Layout:
        entries = []
        for i, (d_in, d_out) in enumerate(self.layer_dims()):
            entries.append((f"layer{i}.W", (d_in, d_out)))
            entries.append((f"layer{i}.b", (d_out,)))
        return tuple(entries)


def init_decoder(cfg: DecoderConfig, rng: SeededRng) -> ParamVec:
    tensors = {}
    for i, (d_in, d_out) in enumerate(cfg.layer_dims()):
        bound = 1.0 / np.sqrt(max(d_in, 1))
        tensors[f"layer{i}.W"] = rng.uniform(-bound, bound, size=(d_in, d_out))
        tensors[f"layer{i}.b"] = rng.uniform(-bound, bound, size=(d_out,))
    return flatten_tensors(tensors, cfg.layout())


def _act(h, kind):
    return np.maximum(h, 0.0) if kind == "relu" else np.tanh(h)


def decode(params: ParamVec, cfg: DecoderConfig, Z: np.ndarray) -> np.ndarray:
    """Reconstruct inputs from latent rows."""
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    t = params.tensors()
    h = Z
    last = len(cfg.layer_dims()) - 1
    for i in range(last):
        h = _act(h @ t[f"layer{i}.W"] + t[f"layer{i}.b"], cfg.activation)
    out = h @ t[f"layer{last}.W"] + t[f"layer{last}.b"]
    return np.tanh(out) if cfg.output_activation == "tanh" else out


def _mse_loss_and_grad(params: ParamVec, cfg: DecoderConfig, Z, Y):
    t = params.tensors()
    h = Z
    caches = []
    last = len(cfg.layer_dims()) - 1
    for i in range(last):
        pre = h @ t[f"layer{i}.W"] + t[f"layer{i}.b"]
        post = _act(pre, cfg.activation)
        caches.append((h, pre, post))
        h = post
    pre_out = h @ t[f"layer{last}.W"] + t[f"layer{last}.b"]
    out = np.tanh(pre_out) if cfg.output_activation == "tanh" else pre_out
    diff = out - Y
    loss = float(np.mean(diff**2))
    dout = 2.0 * diff / diff.size
    if cfg.output_activation == "tanh":
        dout = dout * (1.0 - out**2)
    grads = {}
    grads[f"layer{last}.W"] = h.T @ dout
    grads[f"layer{last}.b"] = dout.sum(axis=0)
    dh = dout @ t[f"layer{last}.W"].T
    for i in reversed(range(last)):
        h_in, pre, post = caches[i]
        if cfg.activation == "relu":
            dpre = dh * (pre > 0)
        else:
            dpre = dh * (1.0 - post**2)
        grads[f"layer{i}.W"] = h_in.T @ dpre
        grads[f"layer{i}.b"] = dpre.sum(axis=0)
        dh = dpre @ t[f"layer{i}.W"].T
    return loss, flatten_tensors(grads, cfg.layout())


def train_decoder(
    latents: np.ndarray,
    inputs: np.ndarray,
    cfg: DecoderConfig,
    epochs: int = 200,
    lr: float = 0.05,
    batch_size: int = 32,
    seed: int = 0,
) -> tuple[ParamVec, list[float]]:
    """Seeded SGD on mean squared error; returns params and per-epoch losses."""
    latents = np.asarray(latents, dtype=np.float64)
    inputs = np.asarray(inputs, dtype=np.float64)
    if latents.shape[0] != inputs.shape[0]:
        raise ValueError("latents and inputs must align")
    if latents.shape[0] < 10:
        raise ValueError("need at least 10 training pairs")
    rng = SeededRng(seed, "attack/train")
    params = init_decoder(cfg, rng.child("init"))
    values = params.values.copy()
    n = latents.shape[0]
    history = []
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            _, grad = _mse_loss_and_grad(
                params.with_values(values), cfg, latents[idx], inputs[idx]
            )
            values = values - lr * grad.values
        epoch_loss, _ = _mse_loss_and_grad(params.with_values(values), cfg, latents, inputs)
        history.append(epoch_loss)
    return params.with_values(values), history


def reconstruction_report(
    params: ParamVec,
    cfg: DecoderConfig,
    held_out_latents: np.ndarray,
    held_out_inputs: np.ndarray,
) -> dict:
    """Leakage metric: decoder MSE relative to the blind mean-input predictor.

    rel_mse < 1 means the latents leak input information; the baseline is 1
    by construction.
    """
    Z = np.asarray(held_out_latents, dtype=np.float64)
    Y = np.asarray(held_out_inputs, dtype=np.float64)
    recon = decode(params, cfg, Z)
    mse = float(np.mean((recon - Y) ** 2))
    baseline = float(np.mean((Y.mean(axis=0) - Y) ** 2))
    return {
        "rel_mse": mse / baseline if baseline > 0 else float("inf"),
        "baseline_rel_mse": 1.0,
        "decoder_mse": mse,
        "mean_predictor_mse": baseline,
        "n_held_out": int(Z.shape[0]),
    }
