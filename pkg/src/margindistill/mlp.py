"""Dense feed-forward embedding models with explicit analytical backprop.

Hidden layers use the max(0, .) rectifier with the subgradient-0 convention
at 0; the output layer is affine, optionally followed by L2 normalization.
Weights live in float64 so gradient checks against central finite
differences are meaningful; checkpoints store float32 per the file format.

The chain rule through row normalization uses the exact Jacobian
``J = (I - e e^T) / ||z||`` at the pre-normalization output z, e = z/||z||.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, DegenerateInput, FormatError
from .numerics import Rng, as_vector

CHECKPOINT_MAGIC = b"TFMLP1"


@dataclass
class MlpModel:
    layer_dims: tuple[int, ...]
    weights: list[np.ndarray]          # per layer, shape (fan_in, fan_out)
    biases: list[np.ndarray]           # per layer, shape (fan_out,)
    normalize_output: bool = True
    version: int = 0                   # bumped on every in-place update

    def __post_init__(self):
        self.layer_dims = tuple(int(d) for d in self.layer_dims)
        if len(self.layer_dims) < 2 or any(d < 1 for d in self.layer_dims):
            raise ContractViolation("layer_dims needs >= 2 positive entries")
        expected = list(zip(self.layer_dims[:-1], self.layer_dims[1:]))
        if len(self.weights) != len(expected) or len(self.biases) != len(expected):
            raise ContractViolation("one weight matrix and bias per layer required")
        for (fi, fo), w, b in zip(expected, self.weights, self.biases):
            if w.shape != (fi, fo) or b.shape != (fo,):
                raise ContractViolation(
                    f"layer shapes inconsistent with layer_dims {self.layer_dims}"
                )

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def embed_dim(self) -> int:
        return self.layer_dims[-1]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def copy(self) -> "MlpModel":
        return MlpModel(
            layer_dims=self.layer_dims,
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            normalize_output=self.normalize_output,
            version=0,
        )


def init_mlp(layer_dims, normalize_output: bool, rng: Rng) -> MlpModel:
    """Glorot-uniform weights in [-s, s], s = sqrt(6/(fan_in+fan_out)); zero biases.

    Entries are drawn row-major, layer by layer, so initialization is a pure
    function of (layer_dims, seed).
    """
    dims = tuple(int(d) for d in layer_dims)
    weights = []
    biases = []
    for fi, fo in zip(dims[:-1], dims[1:]):
        s = math.sqrt(6.0 / (fi + fo))
        u = rng.uniforms(fi * fo)
        weights.append(((2.0 * u - 1.0) * s).reshape(fi, fo))
        biases.append(np.zeros(fo, dtype=np.float64))
    return MlpModel(
        layer_dims=dims, weights=weights, biases=biases,
        normalize_output=normalize_output,
    )


@dataclass
class ForwardCache:
    acts: list[np.ndarray]        # inputs to each layer: acts[0] = X
    hidden_zs: list[np.ndarray]   # pre-activations of hidden layers
    z_out: np.ndarray             # pre-normalization output
    norms: np.ndarray | None      # row norms of z_out when normalizing
    emb: np.ndarray               # final embeddings
    model_version: int


@dataclass
class ModelGrads:
    weights: list[np.ndarray]
    biases: list[np.ndarray]


def forward_batch(model: MlpModel, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    """Embed a (B, input_dim) batch; the cache feeds backward_batch."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != model.input_dim:
        raise ContractViolation(
            f"expected input of shape (B, {model.input_dim}), got {a.shape}"
        )
    acts = [a]
    hidden_zs = []
    for w, b in zip(model.weights[:-1], model.biases[:-1]):
        z = a @ w + b
        hidden_zs.append(z)
        a = np.maximum(z, 0.0)
        acts.append(a)
    z_out = a @ model.weights[-1] + model.biases[-1]
    if model.normalize_output:
        norms = np.sqrt(np.einsum("ij,ij->i", z_out, z_out))
        if np.any(norms == 0.0):
            raise DegenerateInput("pre-normalization output collapsed to zero norm")
        emb = z_out / norms[:, None]
    else:
        norms = None
        emb = z_out
    cache = ForwardCache(
        acts=acts, hidden_zs=hidden_zs, z_out=z_out, norms=norms,
        emb=emb, model_version=model.version,
    )
    return emb, cache


def forward(model: MlpModel, x) -> tuple[np.ndarray, ForwardCache]:
    """Single-vector convenience wrapper around forward_batch."""
    v = as_vector(x)
    emb, cache = forward_batch(model, v[None, :])
    return emb[0], cache


def backward_batch(
    model: MlpModel, cache: ForwardCache, grad_embedding: np.ndarray
) -> ModelGrads:
    """Exact gradients of sum_rows <grad_embedding, embedding> w.r.t. weights."""
    if cache.model_version != model.version:
        raise ContractViolation("stale forward cache: model was updated after forward")
    g = np.asarray(grad_embedding, dtype=np.float64)
    if g.shape != cache.emb.shape:
        raise ContractViolation(
            f"grad_embedding shape {g.shape} != embeddings shape {cache.emb.shape}"
        )
    if model.normalize_output:
        e = cache.emb
        dot = np.einsum("ij,ij->i", e, g)
        g = (g - dot[:, None] * e) / cache.norms[:, None]
    grads_w: list[np.ndarray] = [None] * model.n_layers  # type: ignore[list-item]
    grads_b: list[np.ndarray] = [None] * model.n_layers  # type: ignore[list-item]
    for layer in reversed(range(model.n_layers)):
        a_prev = cache.acts[layer]
        grads_w[layer] = a_prev.T @ g
        grads_b[layer] = g.sum(axis=0)
        if layer > 0:
            g = (g @ model.weights[layer].T) * (cache.hidden_zs[layer - 1] > 0.0)
    return ModelGrads(weights=grads_w, biases=grads_b)


def backward(model: MlpModel, cache: ForwardCache, grad_embedding) -> ModelGrads:
    g = as_vector(grad_embedding)
    return backward_batch(model, cache, g[None, :])


# ---------------------------------------------------------------------------
# SGD with momentum
# ---------------------------------------------------------------------------

@dataclass
class SgdState:
    learning_rate: float
    momentum: float
    vel_w: list[np.ndarray] = field(default_factory=list)
    vel_b: list[np.ndarray] = field(default_factory=list)
    iteration: int = 0


def init_sgd(model: MlpModel, learning_rate: float, momentum: float) -> SgdState:
    if not (learning_rate > 0.0):
        raise ContractViolation("learning_rate must be > 0")
    if not (0.0 <= momentum < 1.0):
        raise ContractViolation("momentum must lie in [0, 1)")
    return SgdState(
        learning_rate=learning_rate,
        momentum=momentum,
        vel_w=[np.zeros_like(w) for w in model.weights],
        vel_b=[np.zeros_like(b) for b in model.biases],
        iteration=0,
    )


def sgd_step(state: SgdState, model: MlpModel, grads: ModelGrads) -> None:
    """v <- momentum*v - lr*g; w <- w + v; in place."""
    for vw, w, gw in zip(state.vel_w, model.weights, grads.weights):
        if gw.shape != w.shape:
            raise ContractViolation("gradient shape mismatch")
        vw *= state.momentum
        vw -= state.learning_rate * gw
        w += vw
    for vb, b, gb in zip(state.vel_b, model.biases, grads.biases):
        if gb.shape != b.shape:
            raise ContractViolation("gradient shape mismatch")
        vb *= state.momentum
        vb -= state.learning_rate * gb
        b += vb
    state.iteration += 1
    model.version += 1


# ---------------------------------------------------------------------------
# checkpoint format: magic "TFMLP1", u32 n_dims, dims as u32, flag byte,
# then per layer row-major little-endian f32 weights followed by biases
# ---------------------------------------------------------------------------

def save_checkpoint(model: MlpModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(model.layer_dims)))
        fh.write(struct.pack(f"<{len(model.layer_dims)}I", *model.layer_dims))
        fh.write(struct.pack("<B", 1 if model.normalize_output else 0))
        for w, b in zip(model.weights, model.biases):
            fh.write(w.astype("<f4").tobytes(order="C"))
            fh.write(b.astype("<f4").tobytes())


def load_checkpoint(path) -> MlpModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(CHECKPOINT_MAGIC) or not blob.startswith(CHECKPOINT_MAGIC):
        raise FormatError(f"{path}: bad checkpoint magic (expected TFMLP1)")
    off = len(CHECKPOINT_MAGIC)
    try:
        (n_dims,) = struct.unpack_from("<I", blob, off)
        off += 4
        dims = struct.unpack_from(f"<{n_dims}I", blob, off)
        off += 4 * n_dims
        (flag,) = struct.unpack_from("<B", blob, off)
        off += 1
        weights = []
        biases = []
        for fi, fo in zip(dims[:-1], dims[1:]):
            w = np.frombuffer(blob, dtype="<f4", count=fi * fo, offset=off)
            off += 4 * fi * fo
            b = np.frombuffer(blob, dtype="<f4", count=fo, offset=off)
            off += 4 * fo
            weights.append(w.reshape(fi, fo).astype(np.float64))
            biases.append(b.astype(np.float64))
    except (struct.error, ValueError) as exc:
        raise FormatError(f"{path}: truncated checkpoint: {exc}") from exc
    if off != len(blob):
        raise FormatError(f"{path}: {len(blob) - off} trailing bytes in checkpoint")
    if n_dims < 2:
        raise FormatError(f"{path}: checkpoint needs >= 2 layer dims")
    return MlpModel(
        layer_dims=dims, weights=weights, biases=biases,
        normalize_output=bool(flag),
    )
