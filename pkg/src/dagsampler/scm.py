"""Gaussian additive-noise structural causal models.

Two model families share one interface: a linear model (weight matrix plus
per-node noise) and a nonlinear model in which every node's mean is
zeta(u_i, sum_j G_ji * l(u_j, x_j)) with networks zeta and l shared across
nodes and per-node embeddings u_i.  Because each mean uses only parent
columns, the transformation has unit Jacobian and the data log density is a
sum of per-node Gaussian residual terms.

Masks may be soft: entries in [0, 1] scale each parent contribution, which
is what the straight-through gradients differentiate.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nets
from .errors import ConfigError, DataError, NumericError
from .fileio import atomic_write_text
from .graphs import check_adjacency, topological_order

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class NetworkArchitecture:
    """Width/feature switches for the nonlinear model's shared networks."""

    hidden_size: int
    embedding_size: int
    hidden_layers: int = 1
    layer_norm: bool = True
    residual: bool = True

    def __post_init__(self):
        if self.hidden_size < 1 or self.embedding_size < 1 or self.hidden_layers < 1:
            raise ConfigError("architecture sizes must be positive")


def default_architecture(d: int) -> NetworkArchitecture:
    width = max(4 * d, 64)
    return NetworkArchitecture(hidden_size=width, embedding_size=width)


class MlpScm:
    """Shared-network nonlinear model.

    Flat parameter layout: node embeddings (d*e), the parent-feature network
    l, the readout network zeta, then d log noise variances.  The module-level
    residual path adds each node's embedding to its l output.
    """

    kind = "mlp"

    def __init__(self, d: int, arch: NetworkArchitecture | None = None):
        if d < 1:
            raise ConfigError("d must be positive")
        self.d = d
        self.arch = arch or default_architecture(d)
        e, h, n = self.arch.embedding_size, self.arch.hidden_size, self.arch.hidden_layers
        common = dict(layer_norm=self.arch.layer_norm, residual=self.arch.residual)
        self.l_spec = nets.MlpSpec((e + 1, *([h] * n), e), **common)
        self.z_spec = nets.MlpSpec((2 * e, *([h] * n), 1), **common)
        self._n_u = d * e
        self._n_l = nets.param_count(self.l_spec)
        self._n_z = nets.param_count(self.z_spec)
        self.n_params = self._n_u + self._n_l + self._n_z + d

    @property
    def noise_slice(self) -> slice:
        return slice(self.n_params - self.d, self.n_params)

    def split(self, theta: np.ndarray):
        if theta.shape != (self.n_params,):
            raise DataError(f"theta has shape {theta.shape}, expected ({self.n_params},)")
        u = theta[: self._n_u].reshape(self.d, self.arch.embedding_size)
        l_flat = theta[self._n_u : self._n_u + self._n_l]
        z_flat = theta[self._n_u + self._n_l : self._n_u + self._n_l + self._n_z]
        log_noise = theta[self.noise_slice]
        return u, l_flat, z_flat, log_noise

    def init_params(self, rng: np.random.Generator, scale: float = 1.0) -> np.ndarray:
        theta = np.empty(self.n_params)
        theta[: self._n_u] = rng.normal(size=self._n_u) * scale
        theta[self._n_u : self._n_u + self._n_l] = nets.init_normal(self.l_spec, rng, scale)
        theta[self._n_u + self._n_l : self._n_u + self._n_l + self._n_z] = nets.init_normal(
            self.z_spec, rng, scale
        )
        theta[self.noise_slice] = rng.normal(size=self.d) * scale
        return theta

    def predict(self, X: np.ndarray, G: np.ndarray, theta: np.ndarray):
        """Mean of each node given all columns of X, parents selected by G."""
        X = np.asarray(X, dtype=np.float64)
        n, d = X.shape
        e = self.arch.embedding_size
        u, l_flat, z_flat, _ = self.split(theta)
        l_in = np.empty((n, d, e + 1))
        l_in[:, :, :e] = u[None, :, :]
        l_in[:, :, e] = X
        l_out_flat, l_cache = nets.forward(self.l_spec, l_flat, l_in.reshape(n * d, e + 1))
        l_out = l_out_flat.reshape(n, d, e)
        if self.arch.residual:
            l_out = l_out + u[None, :, :]
        m = np.einsum("ji,nje->nie", G, l_out, optimize=True)
        z_in = np.empty((n, d, 2 * e))
        z_in[:, :, :e] = u[None, :, :]
        z_in[:, :, e:] = m
        means_flat, z_cache = nets.forward(self.z_spec, z_flat, z_in.reshape(n * d, 2 * e))
        means = means_flat.reshape(n, d)
        cache = {"l_cache": l_cache, "z_cache": z_cache, "l_out": l_out, "G": G, "shape": (n, d)}
        return means, cache

    def predict_grads(self, cache: dict, dmeans: np.ndarray):
        """Backward from d(loss)/d(means) to (d theta, d mask)."""
        n, d = cache["shape"]
        e = self.arch.embedding_size
        dz_flat, dz_in = nets.backward(self.z_spec, cache["z_cache"], dmeans.reshape(n * d, 1))
        dz_in = dz_in.reshape(n, d, 2 * e)
        du = dz_in[:, :, :e].sum(axis=0)
        dm = dz_in[:, :, e:]
        l_out = cache["l_out"]
        G = cache["G"]
        dmask = np.einsum("nie,nje->ji", dm, l_out, optimize=True)
        dl_out = np.einsum("ji,nie->nje", G, dm, optimize=True)
        if self.arch.residual:
            du += dl_out.sum(axis=0)  # module-level embedding skip
        dl_flat, dl_in = nets.backward(self.l_spec, cache["l_cache"], dl_out.reshape(n * d, e))
        du += dl_in.reshape(n, d, e + 1)[:, :, :e].sum(axis=0)
        dtheta = np.zeros(self.n_params)
        dtheta[: self._n_u] = du.ravel()
        dtheta[self._n_u : self._n_u + self._n_l] = dl_flat
        dtheta[self._n_u + self._n_l : self._n_u + self._n_l + self._n_z] = dz_flat
        return dtheta, dmask


class LinearScm:
    """Linear model: weights[i, j] is the coefficient of x_i in node j's mean."""

    kind = "linear"

    def __init__(self, d: int):
        if d < 1:
            raise ConfigError("d must be positive")
        self.d = d
        self.n_params = d * d + d

    @property
    def noise_slice(self) -> slice:
        return slice(self.n_params - self.d, self.n_params)

    def split(self, theta: np.ndarray):
        if theta.shape != (self.n_params,):
            raise DataError(f"theta has shape {theta.shape}, expected ({self.n_params},)")
        return theta[: self.d * self.d].reshape(self.d, self.d), theta[self.noise_slice]

    def init_params(self, rng: np.random.Generator, scale: float = 1.0) -> np.ndarray:
        return rng.normal(size=self.n_params) * scale

    def predict(self, X: np.ndarray, G: np.ndarray, theta: np.ndarray):
        X = np.asarray(X, dtype=np.float64)
        weights, _ = self.split(theta)
        means = X @ (G * weights)
        return means, {"X": X, "G": G, "weights": weights}

    def predict_grads(self, cache: dict, dmeans: np.ndarray):
        base = cache["X"].T @ dmeans
        dtheta = np.zeros(self.n_params)
        dtheta[: self.d * self.d] = (base * cache["G"]).ravel()
        dmask = base * cache["weights"]
        return dtheta, dmask


def make_model(kind: str, d: int, arch: NetworkArchitecture | None = None):
    if kind == "linear":
        return LinearScm(d)
    if kind == "mlp":
        return MlpScm(d, arch)
    raise ConfigError(f"unknown model kind {kind!r}")


def _check_inputs(model, X: np.ndarray, G: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.d:
        raise DataError(f"data shape {X.shape} does not match d={model.d}")
    G = np.asarray(G, dtype=np.float64)
    if G.shape != (model.d, model.d):
        raise DataError(f"mask shape {G.shape} does not match d={model.d}")
    # relaxed adjacencies overshoot 1 by up to the transport-plan tolerance
    if (G < -1e-9).any() or (G > 1.0 + 1e-2).any():
        raise DataError("mask entries must lie in [0, 1]")
    return X, G


def log_likelihood_per_point(model, X: np.ndarray, G: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Per-observation log density under the model (unit Jacobian)."""
    X, G = _check_inputs(model, X, G)
    means, _ = model.predict(X, G, theta)
    log_var = theta[model.noise_slice]
    var = np.exp(log_var)
    resid = X - means
    point = -0.5 * (LOG_2PI + log_var + resid * resid / var)
    return point.sum(axis=1)


def log_likelihood(model, X, G, theta) -> float:
    return float(log_likelihood_per_point(model, X, G, theta).sum())


def log_likelihood_grads(model, X: np.ndarray, G: np.ndarray, theta: np.ndarray):
    """Value plus gradients with respect to theta and the (possibly soft) mask."""
    X, G = _check_inputs(model, X, G)
    means, cache = model.predict(X, G, theta)
    log_var = theta[model.noise_slice]
    var = np.exp(log_var)
    resid = X - means
    value = float(np.sum(-0.5 * (LOG_2PI + log_var + resid * resid / var)))
    dmeans = resid / var
    dtheta, dmask = model.predict_grads(cache, dmeans)
    dtheta[model.noise_slice] += (-0.5 + resid * resid / (2.0 * var)).sum(axis=0)
    return value, dtheta, dmask


@dataclass
class GroundTruth:
    """A sampled data-generating process: graph, mechanism, noise variances."""

    kind: str
    G: np.ndarray
    noise_var: np.ndarray
    weights: np.ndarray | None = None  # linear
    node_nets: list | None = None  # mlp: per node (W1, b1, w2, b2) or None

    def node_mean(self, i: int, X: np.ndarray) -> np.ndarray:
        parents = np.flatnonzero(self.G[:, i])
        if self.kind == "linear":
            return X[:, parents] @ self.weights[parents, i]
        if len(parents) == 0:
            return np.zeros(X.shape[0])
        W1, b1, w2, b2 = self.node_nets[i]
        hidden = np.maximum(X[:, parents] @ W1.T + b1, 0.0)
        return hidden @ w2 + b2

    def means(self, X: np.ndarray) -> np.ndarray:
        return np.column_stack([self.node_mean(i, X) for i in range(len(self.G))])


def make_ground_truth(G: np.ndarray, kind: str, rng: np.random.Generator) -> GroundTruth:
    """Draw mechanism parameters and noise variances for a fixed graph.

    linear: per-edge weight magnitude uniform on [0.5, 1.5] with independent
    random sign.  mlp: per-node single-hidden-layer rectifier networks with 5
    units and standard-normal parameters.  Noise variances are inverse-gamma
    (shape 1.5, scale 1).
    """
    G = check_adjacency(G)
    d = len(G)
    noise_var = 1.0 / rng.gamma(1.5, 1.0, size=d)
    if kind == "linear":
        mags = rng.uniform(0.5, 1.5, size=(d, d))
        signs = np.where(rng.random((d, d)) < 0.5, -1.0, 1.0)
        return GroundTruth(kind, G, noise_var, weights=mags * signs * G)
    if kind == "mlp":
        node_nets = []
        for i in range(d):
            k = int(G[:, i].sum())
            if k == 0:
                node_nets.append(None)
                continue
            node_nets.append(
                (
                    rng.normal(size=(5, k)),
                    rng.normal(size=5),
                    rng.normal(size=5),
                    float(rng.normal()),
                )
            )
        return GroundTruth(kind, G, noise_var, node_nets=node_nets)
    raise ConfigError(f"unknown ground-truth kind {kind!r}")


def ancestral_sample(truth: GroundTruth, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw n observations by sampling nodes in topological order."""
    d = len(truth.G)
    X = np.zeros((n, d))
    for i in topological_order(truth.G):
        X[:, i] = truth.node_mean(i, X) + np.sqrt(truth.noise_var[i]) * rng.normal(size=n)
    return X


def truth_to_dict(truth: GroundTruth) -> dict:
    obj = {
        "d": int(len(truth.G)),
        "adjacency": truth.G.astype(int).tolist(),
        "model": truth.kind,
        "noise_var": truth.noise_var.tolist(),
    }
    if truth.kind == "linear":
        obj["weights"] = truth.weights.tolist()
    else:
        obj["node_nets"] = [
            None
            if net is None
            else {
                "W1": net[0].tolist(),
                "b1": net[1].tolist(),
                "w2": net[2].tolist(),
                "b2": net[3],
            }
            for net in truth.node_nets
        ]
    return obj


def truth_from_dict(obj: dict) -> GroundTruth:
    try:
        G = check_adjacency(np.asarray(obj["adjacency"]))
        kind = obj["model"]
        noise_var = np.asarray(obj["noise_var"], dtype=np.float64)
    except KeyError as exc:
        raise DataError(f"ground-truth object missing field: {exc}") from exc
    if kind == "linear":
        return GroundTruth(kind, G, noise_var, weights=np.asarray(obj["weights"]))
    node_nets = [
        None
        if net is None
        else (
            np.asarray(net["W1"]),
            np.asarray(net["b1"]),
            np.asarray(net["w2"]),
            float(net["b2"]),
        )
        for net in obj["node_nets"]
    ]
    return GroundTruth(kind, G, noise_var, node_nets=node_nets)


def save_dataset_csv(path: str | Path, X: np.ndarray) -> None:
    """One observation per row under an x0..x{d-1} header."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise DataError(f"dataset must be a matrix, got shape {X.shape}")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow([f"x{i}" for i in range(X.shape[1])])
    for row in X:
        writer.writerow([repr(float(v)) for v in row])
    atomic_write_text(path, buf.getvalue())


def load_dataset_csv(path: str | Path) -> np.ndarray:
    """Parse a delimited dataset; the header row is required, names are free."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if len(header) == 0:
            raise DataError(f"{path}: empty header row")
        try:
            [float(tok) for tok in header]
        except ValueError:
            pass  # non-numeric tokens: a proper header
        else:
            raise DataError(f"{path}: first row parses as numbers; column header row required")
        width = len(header)
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != width:
                raise DataError(f"{path}: line {lineno} has {len(row)} fields, expected {width}")
            try:
                rows.append([float(tok) for tok in row])
            except ValueError as exc:
                raise DataError(f"{path}: line {lineno}: {exc}") from None
    if not rows:
        raise DataError(f"{path}: no data rows")
    X = np.asarray(rows, dtype=np.float64)
    if not np.isfinite(X).all():
        raise NumericError(f"{path}: dataset contains non-finite values")
    return X
