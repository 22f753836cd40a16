"""Shallow feed-forward encoder with hand-derived gradients and momentum SGD.

The encoder is a stack of affine layers with identity/relu/tanh activations.
All gradients are computed by explicit backpropagation; no autodiff. The
embedding-level gradient of the joint objective (hinge triplet term plus a
lambda-weighted quantization residual) is exact, with the hinge subgradient
taken as 0 at the kink.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, TrainingError

ACTIVATIONS = ("identity", "relu", "tanh")
ENCODER_MAGIC = b"TQEN"


@dataclass
class EncoderParams:
    """Layer parameters plus the SGD settings that update them.

    layers: list of (W, b, activation) with W of shape (d_out, d_in).
    """

    layers: list[tuple[np.ndarray, np.ndarray, str]]
    learning_rate: float = 1e-3
    momentum: float = 0.9
    _velocity: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list, repr=False)

    def __post_init__(self):
        if not self.layers:
            raise ValueError("encoder needs at least one layer")
        for i, (w, b, act) in enumerate(self.layers):
            if act not in ACTIVATIONS:
                raise ValueError(f"layer {i}: unknown activation {act!r}")
            if w.shape[0] != b.shape[0]:
                raise ValueError(f"layer {i}: weight/bias shapes disagree")
            if i > 0 and w.shape[1] != self.layers[i - 1][0].shape[0]:
                raise ValueError(f"layer {i}: input dim does not chain")
        if not (0.0 <= self.momentum < 1.0):
            raise ValueError("momentum must be in [0, 1)")
        if self.learning_rate < 0:
            raise ValueError("learning rate must be non-negative")
        if not self._velocity:
            self._velocity = [
                (np.zeros_like(w), np.zeros_like(b)) for w, b, _ in self.layers
            ]

    @property
    def in_dim(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1][0].shape[0]


def init_encoder(
    dims: list[int],
    activations: list[str] | None = None,
    learning_rate: float = 1e-3,
    momentum: float = 0.9,
    seed: int = 0,
) -> EncoderParams:
    """Build an encoder with Glorot-uniform weights (zero biases).

    dims chains input to output: dims=[32, 16] is one affine layer 32->16.
    """
    if len(dims) < 2:
        raise ValueError("dims must list input and output sizes")
    if activations is None:
        # default: hidden layers relu, final layer linear
        activations = ["relu"] * (len(dims) - 2) + ["identity"]
    if len(activations) != len(dims) - 1:
        raise ValueError("one activation per layer required")
    rng = np.random.default_rng(seed)
    layers = []
    for d_in, d_out, act in zip(dims[:-1], dims[1:], activations):
        bound = np.sqrt(6.0 / (d_in + d_out))
        w = rng.uniform(-bound, bound, size=(d_out, d_in))
        layers.append((w, np.zeros(d_out), act))
    return EncoderParams(layers, learning_rate, momentum)


def _act(u: np.ndarray, kind: str) -> np.ndarray:
    if kind == "identity":
        return u
    if kind == "relu":
        return np.maximum(u, 0.0)
    return np.tanh(u)


def _act_grad(u: np.ndarray, y: np.ndarray, kind: str) -> np.ndarray:
    if kind == "identity":
        return np.ones_like(u)
    if kind == "relu":
        # subgradient 0 exactly at the kink
        return (u > 0.0).astype(u.dtype)
    return 1.0 - y * y


def forward(params: EncoderParams, x: np.ndarray) -> np.ndarray:
    """Map a batch of raw features (batch x D_in) to embeddings (batch x D)."""
    out, _ = forward_cached(params, x)
    return out


def forward_cached(params: EncoderParams, x: np.ndarray):
    """Forward pass that also returns per-layer (input, preactivation) caches."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("input must be a 2-d batch")
    if x.shape[1] != params.in_dim:
        raise ValueError(
            f"input has {x.shape[1]} columns, encoder expects {params.in_dim}"
        )
    caches = []
    h = x
    for w, b, act in params.layers:
        u = h @ w.T + b
        y = _act(u, act)
        caches.append((h, u, y))
        h = y
    return h, caches


def triplet_loss(za, zp, zn, delta: float) -> float:
    """Hinge triplet loss max(0, delta - |za-zn|^2 + |za-zp|^2) for one triplet."""
    za, zp, zn = (np.asarray(v, dtype=np.float64) for v in (za, zp, zn))
    if delta < 0:
        raise ValueError("delta must be non-negative")
    d_ap = float(np.sum((za - zp) ** 2))
    d_an = float(np.sum((za - zn) ** 2))
    return max(0.0, delta - d_an + d_ap)


def triplet_losses(za: np.ndarray, zp: np.ndarray, zn: np.ndarray, delta: float) -> np.ndarray:
    """Vectorized hinge values for a batch of triplets (rows aligned)."""
    d_ap = np.sum((za - zp) ** 2, axis=1)
    d_an = np.sum((za - zn) ** 2, axis=1)
    return np.maximum(0.0, delta - d_an + d_ap)


def loss_grad_embeddings(
    za: np.ndarray,
    zp: np.ndarray,
    zn: np.ndarray,
    delta: float,
    lam: float,
    recon_a: np.ndarray | None = None,
    recon_p: np.ndarray | None = None,
    recon_n: np.ndarray | None = None,
):
    """Gradient of the per-triplet joint loss w.r.t. each role embedding.

    The joint loss per triplet is the hinge term plus lam times the summed
    quantization residuals |z - recon|^2 of the three roles, with codebooks
    and codes held fixed (recon_* are the fixed reconstructions). Accepts
    single vectors or row-aligned batches; returns gradients of matching shape.
    """
    squeeze = np.asarray(za).ndim == 1
    za = np.atleast_2d(np.asarray(za, dtype=np.float64))
    zp = np.atleast_2d(np.asarray(zp, dtype=np.float64))
    zn = np.atleast_2d(np.asarray(zn, dtype=np.float64))

    hinge = triplet_losses(za, zp, zn, delta)
    active = (hinge > 0.0)[:, None].astype(np.float64)
    ga = active * 2.0 * (zn - zp)
    gp = active * 2.0 * (zp - za)
    gn = active * 2.0 * (za - zn)
    if lam != 0.0:
        if recon_a is None or recon_p is None or recon_n is None:
            raise ValueError("lam != 0 requires reconstructions for all roles")
        ga = ga + lam * 2.0 * (za - np.atleast_2d(recon_a))
        gp = gp + lam * 2.0 * (zp - np.atleast_2d(recon_p))
        gn = gn + lam * 2.0 * (zn - np.atleast_2d(recon_n))
    if squeeze:
        return ga[0], gp[0], gn[0]
    return ga, gp, gn


def backward(params: EncoderParams, caches, upstream: np.ndarray):
    """Backpropagate upstream embedding gradients; returns per-layer (dW, db).

    Gradients are summed over batch rows; scale upstream beforehand if a mean
    is wanted.
    """
    grads = []
    g = np.asarray(upstream, dtype=np.float64)
    for (h, u, y), (w, _b, act) in zip(reversed(caches), reversed(params.layers)):
        du = g * _act_grad(u, y, act)
        dw = du.T @ h
        db = du.sum(axis=0)
        g = du @ w
        grads.append((dw, db))
    grads.reverse()
    return grads


def sgd_step(params: EncoderParams, grads) -> EncoderParams:
    """Momentum SGD update in place: v = mu*v + g; p -= lr*v."""
    for i, ((w, b, _act), (dw, db)) in enumerate(zip(params.layers, grads)):
        if not (np.all(np.isfinite(dw)) and np.all(np.isfinite(db))):
            raise TrainingError(f"non-finite gradient at layer {i}")
        vw, vb = params._velocity[i]
        vw *= params.momentum
        vw += dw
        vb *= params.momentum
        vb += db
        w -= params.learning_rate * vw
        b -= params.learning_rate * vb
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise TrainingError(f"non-finite parameter at layer {i} after update")
    return params


def backward_and_step(params: EncoderParams, caches, upstream: np.ndarray) -> EncoderParams:
    """Backprop a batch's embedding gradients and apply one momentum SGD step."""
    return sgd_step(params, backward(params, caches, upstream))


def save_encoder(path, params: EncoderParams) -> None:
    """Write the checkpoint: layer shapes/activations header + float64 params."""
    with open(path, "wb") as fh:
        fh.write(ENCODER_MAGIC)
        fh.write(struct.pack("<I", len(params.layers)))
        for w, _b, act in params.layers:
            fh.write(struct.pack("<IIB", w.shape[0], w.shape[1], ACTIVATIONS.index(act)))
        for w, b, _act in params.layers:
            fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())


def load_encoder(path, learning_rate: float = 1e-3, momentum: float = 0.9) -> EncoderParams:
    """Read a checkpoint; optimizer settings are supplied by the caller."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != ENCODER_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}")
    off = 4
    try:
        (n_layers,) = struct.unpack_from("<I", blob, off)
        off += 4
        shapes = []
        for _ in range(n_layers):
            d_out, d_in, act_code = struct.unpack_from("<IIB", blob, off)
            off += 9
            if act_code >= len(ACTIVATIONS):
                raise FormatError(f"{path}: unknown activation code {act_code}")
            shapes.append((d_out, d_in, ACTIVATIONS[act_code]))
    except struct.error as exc:
        raise FormatError(f"{path}: truncated header") from exc
    layers = []
    for d_out, d_in, act in shapes:
        need = (d_out * d_in + d_out) * 8
        if off + need > len(blob):
            raise FormatError(f"{path}: truncated parameter payload")
        w = np.frombuffer(blob, dtype="<f8", count=d_out * d_in, offset=off)
        off += d_out * d_in * 8
        b = np.frombuffer(blob, dtype="<f8", count=d_out, offset=off)
        off += d_out * 8
        layers.append((w.reshape(d_out, d_in).copy(), b.copy(), act))
    if off != len(blob):
        raise FormatError(f"{path}: {len(blob) - off} trailing bytes")
    return EncoderParams(layers, learning_rate, momentum)
