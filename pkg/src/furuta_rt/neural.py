"""Small fully connected networks with hand-written backprop and Adam.

Everything is float64 and batch-first: ``forward`` accepts either a single
input vector or a ``(batch, n_in)`` matrix.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import IO

import numpy as np

OUTPUTS = ("identity", "tanh")


class DivergenceError(FloatingPointError):
    """A loss, gradient or prediction became non-finite."""


@dataclass
class MlpParams:
    """Weights of an MLP with tanh hidden layers.

    ``weights[i]`` has shape ``(n_out, n_in)``. With ``output="tanh"`` the last
    layer is squashed and multiplied by ``output_scale``.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    output: str = "identity"
    output_scale: float = 1.0

    def __post_init__(self):
        if self.output not in OUTPUTS:
            raise ValueError(f"unknown output activation {self.output!r}")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias per weight matrix")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ValueError(f"layer {i}: weight {w.shape} / bias {b.shape}")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ValueError(f"layer {i} input width does not match layer {i - 1}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {i}: non-finite parameters")

    @property
    def layer_sizes(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                         self.output, self.output_scale)

    def arrays(self) -> list[np.ndarray]:
        """Parameter arrays in a fixed order (w0, b0, w1, b1, ...)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def zero_(self) -> "MlpParams":
        for arr in self.arrays():
            arr[...] = 0.0
        return self


def init(layer_sizes, seed: int, output: str = "identity",
         output_scale: float = 1.0) -> MlpParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialisation."""
    layer_sizes = [int(n) for n in layer_sizes]
    if len(layer_sizes) < 2 or min(layer_sizes) < 1:
        raise ValueError("need at least an input and an output width")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for n_in, n_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        bound = 1.0 / np.sqrt(n_in)
        weights.append(rng.uniform(-bound, bound, size=(n_out, n_in)))
        biases.append(rng.uniform(-bound, bound, size=n_out))
    return MlpParams(weights, biases, output, output_scale)


def _as_batch(params: MlpParams, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None]
    if x.ndim != 2 or x.shape[1] != params.weights[0].shape[1]:
        raise ValueError(f"input shape {x.shape} does not fit width {params.layer_sizes[0]}")
    return x, single


def _forward_cache(params: MlpParams, x: np.ndarray) -> list[np.ndarray]:
    acts = [x]
    h = x
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        # in-place ops: fresh temporaries of this size are surprisingly costly
        h = h @ w.T
        h += b
        if i < last or params.output == "tanh":
            np.tanh(h, out=h)
        acts.append(h)
    return acts


def forward(params: MlpParams, x) -> np.ndarray:
    xb, single = _as_batch(params, x)
    out = _forward_cache(params, xb)[-1]
    if params.output == "tanh":
        out *= params.output_scale
    return out[0] if single else out


def backward(params: MlpParams, x, upstream) -> tuple[list[np.ndarray], np.ndarray]:
    """Reverse-mode gradients of ``sum(forward(x) * upstream)``.

    Returns ``(grads, input_grad)`` where ``grads`` follows ``params.arrays()``
    order and per-sample contributions are summed over the batch.
    """
    xb, single = _as_batch(params, x)
    g = np.asarray(upstream, dtype=np.float64)
    if single:
        g = g[None]
    acts = _forward_cache(params, xb)
    if g.shape != acts[-1].shape:
        raise ValueError(f"upstream shape {g.shape} != output shape {acts[-1].shape}")
    last = len(params.weights) - 1
    if params.output == "tanh":
        g = g * params.output_scale
    grads: list[np.ndarray] = [None] * (2 * len(params.weights))  # type: ignore[list-item]
    for i in range(last, -1, -1):
        if i < last or params.output == "tanh":
            g = g * (1.0 - acts[i + 1] ** 2)
        grads[2 * i] = g.T @ acts[i]
        grads[2 * i + 1] = g.sum(axis=0)
        g = g @ params.weights[i]
    return grads, (g[0] if single else g)


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0

    @classmethod
    def for_params(cls, params: MlpParams, lr: float = 1e-3, **kw) -> "AdamState":
        arrs = params.arrays()
        return cls([np.zeros_like(a) for a in arrs], [np.zeros_like(a) for a in arrs],
                   lr=lr, **kw)


def adam_step(params: MlpParams, grads: list[np.ndarray],
              state: AdamState) -> tuple[MlpParams, AdamState]:
    """In-place bias-corrected Adam update. Returns the same objects."""
    arrs = params.arrays()
    if len(grads) != len(arrs):
        raise ValueError("gradient list does not match parameters")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise DivergenceError("non-finite gradient")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(arrs, grads, state.m, state.v):
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def polyak_(target: MlpParams, source: MlpParams, tau: float) -> None:
    """target <- tau * source + (1 - tau) * target, in place."""
    for t, s in zip(target.arrays(), source.arrays()):
        if tau == 1.0:
            t[...] = s
        else:
            t *= 1.0 - tau
            t += tau * s


# -- checkpoint format --------------------------------------------------------
#
#   mlp <n_layers+1> <size0> <size1> ... <output> <output_scale>
#   <one value per line, row-major, w0 b0 w1 b1 ...>

def write_params(params: MlpParams, fh: IO[str]) -> None:
    sizes = " ".join(str(n) for n in params.layer_sizes)
    fh.write(f"mlp {len(params.layer_sizes)} {sizes} {params.output} "
             f"{params.output_scale!r}\n")
    for arr in params.arrays():
        for v in arr.ravel():
            fh.write(f"{v:.17g}\n")


def read_params(fh: IO[str]) -> MlpParams:
    header = fh.readline().split()
    if not header or header[0] != "mlp":
        raise ValueError(f"not an mlp checkpoint header: {' '.join(header)!r}")
    n = int(header[1])
    sizes = [int(s) for s in header[2:2 + n]]
    output, scale = header[2 + n], float(header[3 + n])
    weights, biases = [], []
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        weights.append(_read_values(fh, n_out * n_in).reshape(n_out, n_in))
        biases.append(_read_values(fh, n_out))
    return MlpParams(weights, biases, output, scale)


def _read_values(fh: IO[str], count: int) -> np.ndarray:
    vals = np.empty(count)
    for i in range(count):
        line = fh.readline()
        if not line:
            raise ValueError("checkpoint truncated")
        vals[i] = float(line)
    return vals
