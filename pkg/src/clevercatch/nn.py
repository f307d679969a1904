"""Dense numeric kernel shared by every learning stage.

Small MLPs over float64 numpy arrays with hand-derived backward passes; no
autodiff graph anywhere. Shapes are validated eagerly and nothing broadcasts
silently. All randomness flows through seeded PCG64 generators so identical
seeds give bitwise-identical runs.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

from .errors import ContractError, NumericError, ShapeError, ValidationError

ACTIVATIONS = ("relu", "identity", "sigmoid")

_MAX_SEED = 2**64


def make_rng(seed: int) -> np.random.Generator:
    """Deterministic generator: identical seed, identical stream."""
    if not 0 <= int(seed) < _MAX_SEED:
        raise ValidationError(f"seed must be a 64-bit non-negative integer, got {seed}")
    return np.random.default_rng(int(seed))


def derive_seed(root_seed: int, label: str) -> int:
    """Fan a root seed out to a per-stage seed keyed by a fixed label."""
    if not 0 <= int(root_seed) < _MAX_SEED:
        raise ValidationError(f"seed must be a 64-bit non-negative integer, got {root_seed}")
    payload = int(root_seed).to_bytes(8, "little") + label.encode("utf-8")
    return int.from_bytes(hashlib.sha256(payload).digest()[:8], "little")


def he_uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    """Uniform init in +/- sqrt(6 / fan_in)."""
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


@dataclass
class Layer:
    weight: np.ndarray  # (fan_in, fan_out)
    bias: np.ndarray  # (fan_out,)
    activation: str

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2:
            raise ShapeError(f"layer weight must be 2-D, got shape {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[1],):
            raise ShapeError(
                f"bias shape {self.bias.shape} does not match fan-out {self.weight.shape[1]}"
            )
        if self.activation not in ACTIVATIONS:
            raise ValidationError(f"unknown activation {self.activation!r}")


@dataclass
class Mlp:
    layers: list[Layer]

    def __post_init__(self):
        if not self.layers:
            raise ValidationError("an MLP needs at least one layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.weight.shape[1] != nxt.weight.shape[0]:
                raise ShapeError(
                    f"layer widths do not chain: {prev.weight.shape} then {nxt.weight.shape}"
                )

    @property
    def input_dim(self) -> int:
        return self.layers[0].weight.shape[0]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].weight.shape[1]

    def parameters(self) -> list[np.ndarray]:
        out: list[np.ndarray] = []
        for layer in self.layers:
            out.append(layer.weight)
            out.append(layer.bias)
        return out

    def parameter_names(self) -> list[str]:
        out: list[str] = []
        for i in range(len(self.layers)):
            out.append(f"layer{i}.weight")
            out.append(f"layer{i}.bias")
        return out

    def copy(self) -> "Mlp":
        return Mlp(
            [Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers]
        )


def init_mlp(dims: Sequence[int], activations: Sequence[str], rng: np.random.Generator) -> Mlp:
    """Build an MLP with uniform +/- sqrt(6/fan_in) weights and zero biases.

    dims has one more entry than activations: dims[i] -> dims[i+1] per layer.
    """
    if len(dims) < 2 or len(activations) != len(dims) - 1:
        raise ValidationError(
            f"need len(dims) == len(activations) + 1 >= 2, got {len(dims)} and {len(activations)}"
        )
    layers = []
    for fan_in, fan_out, act in zip(dims, dims[1:], activations):
        weight = he_uniform(rng, fan_in, (fan_in, fan_out))
        layers.append(Layer(weight, np.zeros(fan_out), act))
    return Mlp(layers)


def _activate(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return np.maximum(z, 0.0)
    if activation == "identity":
        return z
    return expit(z)


def _activation_grad(z: np.ndarray, activation: str) -> np.ndarray:
    # relu picks the zero subgradient exactly at the kink.
    if activation == "relu":
        return (z > 0.0).astype(np.float64)
    if activation == "identity":
        return np.ones_like(z)
    s = expit(z)
    return s * (1.0 - s)


@dataclass
class ForwardCache:
    mlp: Mlp
    inputs: list[np.ndarray]
    preacts: list[np.ndarray]
    output: np.ndarray


def mlp_forward(mlp: Mlp, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"forward input must be 2-D (batch, features), got shape {x.shape}")
    if x.shape[1] != mlp.input_dim:
        raise ShapeError(f"input width {x.shape[1]} does not match network width {mlp.input_dim}")
    inputs: list[np.ndarray] = []
    preacts: list[np.ndarray] = []
    h = x
    for layer in mlp.layers:
        inputs.append(h)
        z = h @ layer.weight + layer.bias
        preacts.append(z)
        h = _activate(z, layer.activation)
    return h, ForwardCache(mlp, inputs, preacts, h)


def mlp_backward(
    mlp: Mlp, cache: ForwardCache, output_grad: np.ndarray
) -> tuple[list[np.ndarray], np.ndarray]:
    """Exact reverse-mode gradients; returns (param grads, input grad).

    Parameter gradients are aligned with mlp.parameters() order.
    """
    if cache.mlp is not mlp:
        raise ContractError("forward cache belongs to a different network")
    g = np.asarray(output_grad, dtype=np.float64)
    if g.shape != cache.output.shape:
        raise ContractError(
            f"output gradient shape {g.shape} does not match forward output {cache.output.shape}"
        )
    grads: list[np.ndarray] = [np.empty(0)] * (2 * len(mlp.layers))
    for i in range(len(mlp.layers) - 1, -1, -1):
        layer = mlp.layers[i]
        dz = g * _activation_grad(cache.preacts[i], layer.activation)
        grads[2 * i] = cache.inputs[i].T @ dz
        grads[2 * i + 1] = dz.sum(axis=0)
        g = dz @ layer.weight.T
    return grads, g


@dataclass
class OptimizerState:
    kind: str
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    moments1: list[np.ndarray] | None = field(default=None, repr=False)
    moments2: list[np.ndarray] | None = field(default=None, repr=False)


def sgd(learning_rate: float) -> OptimizerState:
    if learning_rate <= 0:
        raise ValidationError("learning rate must be positive")
    return OptimizerState(kind="sgd", learning_rate=learning_rate)


def adam(
    learning_rate: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8
) -> OptimizerState:
    if learning_rate <= 0:
        raise ValidationError("learning rate must be positive")
    if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
        raise ValidationError("adam betas must lie in [0, 1)")
    return OptimizerState(kind="adam", learning_rate=learning_rate, beta1=beta1, beta2=beta2, eps=eps)


def optimizer_step(
    state: OptimizerState,
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    names: Sequence[str] | None = None,
) -> None:
    """Update parameters in place; state moments are owned by this function."""
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} parameters but {len(grads)} gradients")
    for i, (p, g) in enumerate(zip(params, grads)):
        label = names[i] if names is not None else f"parameter {i}"
        if p.shape != g.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match {label} shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {label}")
    state.step_count += 1
    if state.kind == "sgd":
        for p, g in zip(params, grads):
            p -= state.learning_rate * g
        return
    if state.moments1 is None:
        state.moments1 = [np.zeros_like(p) for p in params]
        state.moments2 = [np.zeros_like(p) for p in params]
    if len(state.moments1) != len(params):
        raise ContractError("optimizer state was initialized for a different parameter list")
    t = state.step_count
    bias1 = 1.0 - state.beta1**t
    bias2 = 1.0 - state.beta2**t
    for p, g, m, v in zip(params, grads, state.moments1, state.moments2):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.learning_rate * (m / bias1) / (np.sqrt(v / bias2) + state.eps)


@dataclass
class GradCheckReport:
    max_rel_err: float
    n_coords: int
    passed: bool


def grad_check(
    loss_and_grad: Callable[[np.ndarray], tuple[float, np.ndarray]],
    theta: np.ndarray,
    tolerance: float = 1e-5,
    step: float = 1e-6,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare an analytic gradient against central finite differences.

    loss_and_grad maps a flat float64 vector to (loss, gradient). Differences
    are normalized by the max-norm over both gradients so near-zero
    coordinates do not divide by noise. All coordinates are checked unless
    theta has more than 10,000 entries, in which case a random subset of at
    least 100 is sampled.
    """
    theta = np.asarray(theta, dtype=np.float64).ravel()
    _, analytic = loss_and_grad(theta)
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    if analytic.shape != theta.shape:
        raise ShapeError(
            f"analytic gradient has {analytic.size} entries for {theta.size} parameters"
        )
    n = theta.size
    coords = np.arange(n)
    if n > 10_000:
        k = max(100, max_coords or 0)
        gen = rng if rng is not None else make_rng(0)
        coords = np.sort(gen.choice(n, size=min(k, n), replace=False))
    elif max_coords is not None and max_coords < n:
        gen = rng if rng is not None else make_rng(0)
        coords = np.sort(gen.choice(n, size=max(1, max_coords), replace=False))
    numeric = np.empty(coords.size)
    for j, idx in enumerate(coords):
        bumped = theta.copy()
        bumped[idx] = theta[idx] + step
        loss_plus, _ = loss_and_grad(bumped)
        bumped[idx] = theta[idx] - step
        loss_minus, _ = loss_and_grad(bumped)
        numeric[j] = (loss_plus - loss_minus) / (2.0 * step)
    scale = max(np.abs(analytic[coords]).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-12)
    max_rel_err = float(np.abs(analytic[coords] - numeric).max(initial=0.0) / scale)
    return GradCheckReport(max_rel_err=max_rel_err, n_coords=int(coords.size), passed=max_rel_err < tolerance)


def flatten_arrays(arrays: Sequence[np.ndarray]) -> tuple[np.ndarray, list[tuple[int, ...]]]:
    shapes = [a.shape for a in arrays]
    if not arrays:
        return np.empty(0), []
    return np.concatenate([np.asarray(a, dtype=np.float64).ravel() for a in arrays]), shapes


def unflatten_arrays(vec: np.ndarray, shapes: Sequence[tuple[int, ...]]) -> list[np.ndarray]:
    vec = np.asarray(vec, dtype=np.float64).ravel()
    sizes = [int(np.prod(shape)) if shape else 1 for shape in shapes]
    if sum(sizes) != vec.size:
        raise ShapeError(f"vector has {vec.size} entries but shapes need {sum(sizes)}")
    out = []
    offset = 0
    for shape, size in zip(shapes, sizes):
        out.append(vec[offset : offset + size].reshape(shape))
        offset += size
    return out
