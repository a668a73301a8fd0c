"""Feed-forward networks with hand-written reverse-mode gradients, plus Adam.

Everything runs in float64. Parameters are a flat list of arrays
``[W_0, b_0, W_1, b_1, ...]`` with ``W_l`` of shape ``(fan_in, fan_out)`` so a
forward layer is ``h @ W + b`` on row-major batches.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

LEAKY_SLOPE = 0.01


class ShapeError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


@dataclass(frozen=True)
class MlpSpec:
    """Architecture of a time-conditioned MLP.

    ``input_dim`` counts state coordinates only; time is appended as one
    extra input channel, so the first weight matrix has ``input_dim + 1`` rows.
    ``depth`` is the number of affine layers.
    """

    input_dim: int
    output_dim: int
    hidden_width: int = 256
    depth: int = 5
    negative_slope: float = LEAKY_SLOPE

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if min(self.input_dim, self.output_dim, self.hidden_width) < 1:
            raise ValueError("widths must be >= 1")

    @property
    def layer_sizes(self) -> list[int]:
        return [self.input_dim + 1] + [self.hidden_width] * (self.depth - 1) + [self.output_dim]

    def param_shapes(self) -> list[tuple[int, ...]]:
        sizes = self.layer_sizes
        shapes = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            shapes += [(fan_in, fan_out), (fan_out,)]
        return shapes

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "output_dim": self.output_dim,
            "hidden_width": self.hidden_width,
            "depth": self.depth,
            "negative_slope": self.negative_slope,
        }


def init_params(spec: MlpSpec, rng: np.random.Generator, zero_last: bool = False) -> list[np.ndarray]:
    """Uniform fan-in initialisation, U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    params = []
    shapes = spec.param_shapes()
    n_layers = len(shapes) // 2
    for layer in range(n_layers):
        w_shape, b_shape = shapes[2 * layer], shapes[2 * layer + 1]
        if zero_last and layer == n_layers - 1:
            params += [np.zeros(w_shape), np.zeros(b_shape)]
            continue
        bound = 1.0 / np.sqrt(w_shape[0])
        params += [rng.uniform(-bound, bound, w_shape), rng.uniform(-bound, bound, b_shape)]
    return params


def _leaky(z, slope):
    return np.where(z > 0, z, slope * z)


def _leaky_grad(z, slope):
    # subgradient at exactly 0 is the negative slope
    return np.where(z > 0, 1.0, slope)


def _inputs(spec, x, t):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ShapeError(f"expected x of shape (n, {spec.input_dim}), got {x.shape}")
    t = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1), (x.shape[0],))
    return np.hstack([x, t[:, None]])


def _check_params(spec, params):
    shapes = spec.param_shapes()
    if len(params) != len(shapes) or any(p.shape != s for p, s in zip(params, shapes)):
        raise ShapeError("parameter shapes do not match MlpSpec")


def mlp_forward(spec: MlpSpec, params, x, t, return_cache: bool = False):
    """Evaluate the network on a batch.

    Parameters
    ----------
    spec : MlpSpec
    params : list of ndarray
    x : array, shape (n, input_dim)
    t : float or array, shape (n,)
        Time, concatenated as the last input feature.
    return_cache : bool
        Also return the pre-activations needed by :func:`mlp_backward`.

    Returns
    -------
    out : ndarray, shape (n, output_dim)
    cache : tuple, only if ``return_cache``
    """
    _check_params(spec, params)
    h = _inputs(spec, x, t)
    slope = spec.negative_slope
    acts, pre = [h], []
    n_layers = len(params) // 2
    for layer in range(n_layers):
        z = h @ params[2 * layer] + params[2 * layer + 1]
        if layer < n_layers - 1:
            pre.append(z)
            h = _leaky(z, slope)
            acts.append(h)
        else:
            h = z
    if return_cache:
        return h, (acts, pre)
    return h


def mlp_backward(spec: MlpSpec, params, cache, upstream) -> list[np.ndarray]:
    """Gradients of ``sum(upstream * out)`` with respect to every parameter."""
    upstream = np.asarray(upstream, dtype=np.float64)
    if not np.all(np.isfinite(upstream)):
        raise NumericError("non-finite upstream gradient")
    acts, pre = cache
    slope = spec.negative_slope
    n_layers = len(params) // 2
    grads = [None] * len(params)
    delta = upstream
    for layer in range(n_layers - 1, -1, -1):
        grads[2 * layer] = acts[layer].T @ delta
        grads[2 * layer + 1] = delta.sum(axis=0)
        if layer > 0:
            delta = (delta @ params[2 * layer].T) * _leaky_grad(pre[layer - 1], slope)
    return grads


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(state: AdamState, params, grads):
    """One bias-corrected Adam update; returns new params and mutates ``state``."""
    if len(params) != len(grads):
        raise ShapeError("params and grads differ in length")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    new = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ShapeError(f"gradient {i} has shape {g.shape}, expected {p.shape}")
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
        new.append(p - state.lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + state.eps))
    return new, state
