"""Small dense networks with hand-derived reverse-mode passes.

No general tape: the architecture is fixed (linear layers, optional layer
normalization, leaky rectifier, residual shortcuts between equal-width
hidden layers) and the backward pass is written out against cached
intermediates.  Parameters live in one flat vector so samplers can treat
them as a single state block.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

LN_EPS = 1e-5


@dataclass(frozen=True)
class MlpSpec:
    """Shape and feature switches for one dense network.

    sizes: (n_in, hidden..., n_out); at least one hidden layer.
    """

    sizes: tuple[int, ...]
    layer_norm: bool = True
    residual: bool = True
    slope: float = 0.01

    def __post_init__(self):
        if len(self.sizes) < 3:
            raise ConfigError("MlpSpec needs at least (in, hidden, out) sizes")
        if any(s < 1 for s in self.sizes):
            raise ConfigError(f"all layer sizes must be positive, got {self.sizes}")

    @property
    def n_hidden(self) -> int:
        return len(self.sizes) - 2


def _shapes(spec: MlpSpec) -> list[tuple[str, tuple[int, ...]]]:
    out = []
    for k in range(spec.n_hidden):
        fan_in, fan_out = spec.sizes[k], spec.sizes[k + 1]
        out.append((f"W{k}", (fan_out, fan_in)))
        out.append((f"b{k}", (fan_out,)))
        if spec.layer_norm:
            out.append((f"g{k}", (fan_out,)))
            out.append((f"c{k}", (fan_out,)))
    out.append(("Wout", (spec.sizes[-1], spec.sizes[-2])))
    out.append(("bout", (spec.sizes[-1],)))
    return out


def param_count(spec: MlpSpec) -> int:
    return sum(int(np.prod(shape)) for _, shape in _shapes(spec))


def unpack(spec: MlpSpec, flat: np.ndarray) -> dict[str, np.ndarray]:
    """Views into the flat vector, keyed by parameter name."""
    params = {}
    offset = 0
    for name, shape in _shapes(spec):
        size = int(np.prod(shape))
        params[name] = flat[offset : offset + size].reshape(shape)
        offset += size
    if offset != len(flat):
        raise ConfigError(f"flat parameter vector has {len(flat)} entries, spec needs {offset}")
    return params


def init_normal(spec: MlpSpec, rng: np.random.Generator, scale: float = 1.0) -> np.ndarray:
    """Independent normal entries; layer-norm gains start at 1 + noise*0."""
    flat = rng.normal(size=param_count(spec)) * scale
    if spec.layer_norm:
        params = unpack(spec, flat)
        for k in range(spec.n_hidden):
            params[f"g{k}"][:] = 1.0
            params[f"c{k}"][:] = 0.0
    return flat


def init_glorot(spec: MlpSpec, rng: np.random.Generator) -> np.ndarray:
    """Fan-scaled init for optimized (not sampled) networks."""
    flat = np.zeros(param_count(spec))
    params = unpack(spec, flat)
    for k in range(spec.n_hidden):
        fan_in, fan_out = spec.sizes[k], spec.sizes[k + 1]
        params[f"W{k}"][:] = rng.normal(size=(fan_out, fan_in)) * np.sqrt(2.0 / (fan_in + fan_out))
        if spec.layer_norm:
            params[f"g{k}"][:] = 1.0
    fan_in, fan_out = spec.sizes[-2], spec.sizes[-1]
    params["Wout"][:] = rng.normal(size=(fan_out, fan_in)) * np.sqrt(2.0 / (fan_in + fan_out))
    return flat


def forward(spec: MlpSpec, flat: np.ndarray, X: np.ndarray) -> tuple[np.ndarray, dict]:
    """Batched forward pass; returns output (N, n_out) and the backward cache."""
    params = unpack(spec, flat)
    z = np.asarray(X, dtype=np.float64)
    layers = []
    for k in range(spec.n_hidden):
        entry: dict = {"z_in": z}
        pre = z @ params[f"W{k}"].T + params[f"b{k}"]
        if spec.layer_norm:
            mu = pre.mean(axis=1, keepdims=True)
            var = pre.var(axis=1, keepdims=True)
            inv_std = 1.0 / np.sqrt(var + LN_EPS)
            xhat = (pre - mu) * inv_std
            act_in = params[f"g{k}"] * xhat + params[f"c{k}"]
            entry["xhat"] = xhat
            entry["inv_std"] = inv_std
        else:
            act_in = pre
        entry["pos"] = act_in > 0
        z_next = np.where(entry["pos"], act_in, spec.slope * act_in)
        skip = spec.residual and k > 0 and spec.sizes[k] == spec.sizes[k + 1]
        if skip:
            z_next = z_next + z
        entry["skip"] = skip
        layers.append(entry)
        z = z_next
    out = z @ params["Wout"].T + params["bout"]
    cache = {"layers": layers, "z_last": z, "params": params}
    return out, cache


def backward(
    spec: MlpSpec, cache: dict, dout: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Reverse pass: returns (d flat params, d input)."""
    params = cache["params"]
    grads = {name: None for name, _ in _shapes(spec)}
    grads["Wout"] = dout.T @ cache["z_last"]
    grads["bout"] = dout.sum(axis=0)
    dz = dout @ params["Wout"]
    for k in reversed(range(spec.n_hidden)):
        entry = cache["layers"][k]
        dskip = dz if entry["skip"] else 0.0
        dact_in = np.where(entry["pos"], dz, spec.slope * dz)
        if spec.layer_norm:
            xhat = entry["xhat"]
            grads[f"g{k}"] = (dact_in * xhat).sum(axis=0)
            grads[f"c{k}"] = dact_in.sum(axis=0)
            dxhat = dact_in * params[f"g{k}"]
            dpre = entry["inv_std"] * (
                dxhat
                - dxhat.mean(axis=1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
            )
        else:
            dpre = dact_in
        grads[f"W{k}"] = dpre.T @ entry["z_in"]
        grads[f"b{k}"] = dpre.sum(axis=0)
        dz = dpre @ params[f"W{k}"] + dskip
    dflat = np.concatenate([np.ravel(grads[name]) for name, _ in _shapes(spec)])
    return dflat, dz


class Adam:
    """Generic adaptive first/second-moment ascent rule for optimized nets."""

    def __init__(self, n: int, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def ascend(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1**self.t)
        vhat = self.v / (1 - self.beta2**self.t)
        return params + self.lr * mhat / (np.sqrt(vhat) + self.eps)
