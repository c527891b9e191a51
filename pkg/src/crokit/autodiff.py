"""Reverse-mode differentiation on dense tapes, and the two small networks.

All learnable parameters live in a :class:`ParamVector`, a flat float64
array with named, disjoint slices.  A :class:`Tape` records the primitive
operations of a forward pass (affine maps, elementwise nonlinearities,
matrix-vector products, norms, quadratic forms); :func:`backward` replays
it in reverse, accumulating one adjoint per node, and assembles the
gradient with respect to every parameter slice touched by the tape.

Two networks are built on top of the engine:

* :class:`SetPredictor` maps a covariate vector to the raw parameters of a
  contextual ellipsoid (center, lower-triangular factor entries, log
  scale).
* :class:`CoverageNet` is a small sigmoid-headed regressor estimating a
  conditional membership probability.  It additionally exposes vectorized
  value/gradient/Hessian routines needed by the second-order fitting code.

Hot loops (training, fitting) use the batched numpy paths
(:meth:`MLP.forward_batch` / :meth:`MLP.backward_batch`); the tape path is
the reference implementation and the two are tested against each other.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .exceptions import InputError, StateError

Array = np.ndarray


def sigmoid(z):
    """Numerically stable logistic function."""
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# ---------------------------------------------------------------------------
# Parameter storage


class ParamVector:
    """Flat float64 parameter array with a named slice layout.

    The layout maps each name to ``(offset, shape)``; slices are disjoint
    and cover the whole array, and the total length is fixed after
    construction.
    """

    def __init__(self, values: Array, layout: dict[str, tuple[int, tuple[int, ...]]]):
        values = np.ascontiguousarray(values, dtype=np.float64)
        if values.ndim != 1:
            raise InputError("parameter storage must be a flat array")
        covered = 0
        for name, (offset, shape) in layout.items():
            size = int(np.prod(shape, dtype=int)) if shape else 1
            if offset != covered:
                raise InputError(f"layout slice {name!r} is not contiguous")
            covered += size
        if covered != values.size:
            raise InputError("layout does not cover the parameter array")
        self.values = values
        self.layout = dict(layout)

    @classmethod
    def build(cls, spec: dict[str, tuple[int, ...]], values: Array | None = None) -> "ParamVector":
        layout = {}
        offset = 0
        for name, shape in spec.items():
            layout[name] = (offset, tuple(shape))
            offset += int(np.prod(shape, dtype=int)) if shape else 1
        if values is None:
            values = np.zeros(offset)
        return cls(np.asarray(values, dtype=float), layout)

    def __len__(self) -> int:
        return self.values.size

    def get(self, name: str) -> Array:
        offset, shape = self.layout[name]
        size = int(np.prod(shape, dtype=int)) if shape else 1
        return self.values[offset : offset + size].reshape(shape)

    def set(self, name: str, value: Array) -> None:
        offset, shape = self.layout[name]
        size = int(np.prod(shape, dtype=int)) if shape else 1
        self.values[offset : offset + size] = np.asarray(value, dtype=float).reshape(size)

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)

    def zeros_like(self) -> Array:
        return np.zeros_like(self.values)

    # -- serialization: raw little-endian float64 blob + JSON layout header

    def save(self, prefix: str | Path) -> None:
        prefix = Path(prefix)
        prefix.parent.mkdir(parents=True, exist_ok=True)
        prefix.with_suffix(".bin").write_bytes(self.values.astype("<f8").tobytes())
        header = {
            "dtype": "<f8",
            "length": int(self.values.size),
            "layout": {k: {"offset": off, "shape": list(shape)} for k, (off, shape) in self.layout.items()},
        }
        prefix.with_suffix(".json").write_text(json.dumps(header, indent=2))

    @classmethod
    def load(cls, prefix: str | Path) -> "ParamVector":
        prefix = Path(prefix)
        header = json.loads(prefix.with_suffix(".json").read_text())
        raw = np.frombuffer(prefix.with_suffix(".bin").read_bytes(), dtype="<f8")
        if raw.size != header["length"]:
            raise InputError("parameter blob length does not match its header")
        layout = {k: (v["offset"], tuple(v["shape"])) for k, v in header["layout"].items()}
        return cls(raw.astype(np.float64), layout)


# ---------------------------------------------------------------------------
# Tape engine


@dataclass
class _Node:
    value: Array
    parents: tuple[int, ...]
    vjp: Callable[[Array], tuple[Array, ...]] | None
    param: tuple[int, int] | None = None  # (offset, size) into the flat gradient


@dataclass(frozen=True)
class Var:
    tape: "Tape"
    idx: int

    @property
    def value(self) -> Array:
        return self.tape._nodes[self.idx].value


class Tape:
    """Record of one forward pass; nodes are stored in topological order."""

    def __init__(self):
        self._nodes: list[_Node] = []
        self.n_params: int | None = None

    def __len__(self) -> int:
        return len(self._nodes)

    def _push(self, value, parents=(), vjp=None, param=None) -> Var:
        self._nodes.append(_Node(np.asarray(value, dtype=float), parents, vjp, param))
        return Var(self, len(self._nodes) - 1)

    # -- leaves

    def const(self, x) -> Var:
        return self._push(x)

    def param(self, pv: ParamVector, name: str) -> Var:
        if self.n_params is None:
            self.n_params = len(pv)
        elif self.n_params != len(pv):
            raise InputError("one tape cannot mix parameter vectors of different lengths")
        offset, shape = pv.layout[name]
        size = int(np.prod(shape, dtype=int)) if shape else 1
        return self._push(pv.get(name), param=(offset, size))

    # -- primitive ops

    def affine(self, W: Var, b: Var, x: Var) -> Var:
        Wv, xv = W.value, x.value
        out = Wv @ xv + b.value

        def vjp(adj):
            return np.outer(adj, xv), adj, Wv.T @ adj

        return self._push(out, (W.idx, b.idx, x.idx), vjp)

    def matvec(self, A: Var, x: Var) -> Var:
        Av, xv = A.value, x.value

        def vjp(adj):
            return np.outer(adj, xv), Av.T @ adj

        return self._push(Av @ xv, (A.idx, x.idx), vjp)

    def tanh(self, a: Var) -> Var:
        out = np.tanh(a.value)
        return self._push(out, (a.idx,), lambda adj: (adj * (1.0 - out**2),))

    def sigmoid(self, a: Var) -> Var:
        out = sigmoid(a.value)
        return self._push(out, (a.idx,), lambda adj: (adj * out * (1.0 - out),))

    def exp(self, a: Var) -> Var:
        out = np.exp(a.value)
        return self._push(out, (a.idx,), lambda adj: (adj * out,))

    def log(self, a: Var) -> Var:
        av = a.value
        return self._push(np.log(av), (a.idx,), lambda adj: (adj / av,))

    def add(self, a: Var, b: Var) -> Var:
        return self._push(a.value + b.value, (a.idx, b.idx), lambda adj: (adj, adj))

    def sub(self, a: Var, b: Var) -> Var:
        return self._push(a.value - b.value, (a.idx, b.idx), lambda adj: (adj, -adj))

    def mul(self, a: Var, b: Var) -> Var:
        av, bv = a.value, b.value
        return self._push(av * bv, (a.idx, b.idx), lambda adj: (adj * bv, adj * av))

    def scale(self, a: Var, c: float) -> Var:
        return self._push(c * a.value, (a.idx,), lambda adj: (c * adj,))

    def dot(self, a: Var, b: Var) -> Var:
        av, bv = a.value, b.value
        return self._push(av @ bv, (a.idx, b.idx), lambda adj: (adj * bv, adj * av))

    def sum(self, a: Var) -> Var:
        n = a.value.shape
        return self._push(a.value.sum(), (a.idx,), lambda adj: (np.broadcast_to(adj, n).copy(),))

    def sumsq(self, a: Var) -> Var:
        av = a.value
        return self._push(av @ av, (a.idx,), lambda adj: (2.0 * adj * av,))

    def norm2(self, a: Var) -> Var:
        av = a.value
        out = float(np.linalg.norm(av))

        def vjp(adj):
            if out == 0.0:
                return (np.zeros_like(av),)
            return (adj * av / out,)

        return self._push(out, (a.idx,), vjp)

    def quadform(self, a: Var, A: Array) -> Var:
        A = np.asarray(A, dtype=float)
        av = a.value
        return self._push(av @ A @ av, (a.idx,), lambda adj: (adj * (A + A.T) @ av,))

    def gather(self, a: Var, idx) -> Var:
        idx = np.asarray(idx, dtype=int)
        av = a.value

        def vjp(adj):
            g = np.zeros_like(av)
            np.add.at(g, idx, adj)
            return (g,)

        return self._push(av[idx], (a.idx,), vjp)

    def interleave(self, parts: Sequence[tuple[Var, Array]], size: int) -> Var:
        """Assemble a vector from (variable, target-index) pieces."""
        out = np.zeros(size)
        idxs = []
        for var, idx in parts:
            idx = np.asarray(idx, dtype=int)
            out[idx] = var.value
            idxs.append(idx)

        def vjp(adj):
            return tuple(adj[idx] for idx in idxs)

        return self._push(out, tuple(v.idx for v, _ in parts), vjp)

    def tril_matvec_t(self, t: Var, u: Var, m: int) -> Var:
        """L(t)^T u for the row-major lower-triangular matrix packed in t."""
        rows, cols = np.tril_indices(m)
        L = np.zeros((m, m))
        L[rows, cols] = t.value
        uv = u.value

        def vjp(adj):
            dL = np.outer(uv, adj)
            return dL[rows, cols], L @ adj

        return self._push(L.T @ uv, (t.idx, u.idx), vjp)

    # -- reverse pass

    def backward_multi(self, seeds: Sequence[tuple[Var, Array]]) -> Array:
        """Reverse pass from several seeded nodes; returns the flat gradient."""
        if not self._nodes:
            raise StateError("backward called on an empty tape")
        if self.n_params is None:
            raise StateError("tape has no parameter leaves to differentiate")
        adjoints: list[Array | None] = [None] * len(self._nodes)
        for var, seed in seeds:
            if var.tape is not self:
                raise InputError("seeded variable does not belong to this tape")
            seed = np.asarray(seed, dtype=float)
            node_val = self._nodes[var.idx].value
            if seed.shape != node_val.shape:
                raise InputError(f"seed shape {seed.shape} does not match output shape {node_val.shape}")
            if adjoints[var.idx] is None:
                adjoints[var.idx] = seed.copy()
            else:
                adjoints[var.idx] = adjoints[var.idx] + seed
        grad = np.zeros(self.n_params)
        for i in range(len(self._nodes) - 1, -1, -1):
            adj = adjoints[i]
            if adj is None:
                continue
            node = self._nodes[i]
            if node.param is not None:
                offset, size = node.param
                grad[offset : offset + size] += adj.ravel()
            if node.vjp is not None:
                for parent, contrib in zip(node.parents, node.vjp(adj)):
                    if adjoints[parent] is None:
                        adjoints[parent] = np.asarray(contrib, dtype=float).copy()
                    else:
                        adjoints[parent] = adjoints[parent] + contrib
        return grad


def backward(tape: Tape, seed: Array, output: Var | None = None) -> Array:
    """Gradient of ``seed . output`` with respect to every tape parameter.

    ``output`` defaults to the last node recorded on the tape.  Raises
    :class:`StateError` when no forward pass has been recorded.
    """
    if len(tape) == 0:
        raise StateError("backward called before any forward pass")
    if output is None:
        output = Var(tape, len(tape) - 1)
    return tape.backward_multi([(output, np.asarray(seed, dtype=float))])


# ---------------------------------------------------------------------------
# Feed-forward networks


def _init_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Array:
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


class MLP:
    """Fully connected network with tanh hidden activations.

    Weights live in a :class:`ParamVector` under ``{prefix}W{l}`` /
    ``{prefix}b{l}``.  ``hidden=()`` degenerates to a single affine map.
    """

    def __init__(self, in_dim: int, hidden: Sequence[int], out_dim: int, prefix: str = ""):
        self.sizes = [int(in_dim), *[int(h) for h in hidden], int(out_dim)]
        self.prefix = prefix

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    def param_spec(self) -> dict[str, tuple[int, ...]]:
        spec: dict[str, tuple[int, ...]] = {}
        for layer in range(self.n_layers):
            spec[f"{self.prefix}W{layer}"] = (self.sizes[layer + 1], self.sizes[layer])
            spec[f"{self.prefix}b{layer}"] = (self.sizes[layer + 1],)
        return spec

    def init_values(self, rng: np.random.Generator) -> dict[str, Array]:
        vals = {}
        for layer in range(self.n_layers):
            fan_in = self.sizes[layer]
            vals[f"{self.prefix}W{layer}"] = _init_uniform(rng, (self.sizes[layer + 1], fan_in), fan_in)
            vals[f"{self.prefix}b{layer}"] = _init_uniform(rng, (self.sizes[layer + 1],), fan_in)
        return vals

    def forward(self, tape: Tape, pv: ParamVector, x) -> Var:
        h = x if isinstance(x, Var) else tape.const(x)
        for layer in range(self.n_layers):
            W = tape.param(pv, f"{self.prefix}W{layer}")
            b = tape.param(pv, f"{self.prefix}b{layer}")
            h = tape.affine(W, b, h)
            if layer < self.n_layers - 1:
                h = tape.tanh(h)
        return h

    # -- batched numpy paths (no tape); must agree with forward() exactly

    def forward_batch(self, pv: ParamVector, X: Array) -> tuple[Array, list[Array]]:
        """Batched forward pass.  Returns (outputs, activation cache)."""
        X = np.asarray(X, dtype=float)
        cache = [X]
        h = X
        for layer in range(self.n_layers):
            W = pv.get(f"{self.prefix}W{layer}")
            b = pv.get(f"{self.prefix}b{layer}")
            h = h @ W.T + b
            if layer < self.n_layers - 1:
                h = np.tanh(h)
            cache.append(h)
        return h, cache

    def backward_batch(self, pv: ParamVector, cache: list[Array], seed: Array,
                       grad: Array | None = None) -> Array:
        """Accumulate d(sum_i seed_i . out_i)/d(params) into a flat gradient."""
        if grad is None:
            grad = np.zeros(len(pv))
        delta = np.asarray(seed, dtype=float)
        for layer in range(self.n_layers - 1, -1, -1):
            inp = cache[layer]
            off_w, shape_w = pv.layout[f"{self.prefix}W{layer}"]
            off_b, shape_b = pv.layout[f"{self.prefix}b{layer}"]
            gw = delta.T @ inp
            grad[off_w : off_w + gw.size] += gw.ravel()
            grad[off_b : off_b + delta.shape[1]] += delta.sum(axis=0)
            if layer > 0:
                W = pv.get(f"{self.prefix}W{layer}")
                delta = (delta @ W) * (1.0 - cache[layer] ** 2)
        return grad


def tri_size(m: int) -> int:
    return m * (m + 1) // 2


@dataclass
class SetPredictorOutput:
    """Raw network outputs parameterizing one contextual ellipsoid."""

    mu: Array
    L_raw: Array
    r_raw: float
    tape: Tape | None = field(default=None, repr=False)
    mu_var: Var | None = field(default=None, repr=False)
    l_var: Var | None = field(default=None, repr=False)
    r_var: Var | None = field(default=None, repr=False)


class SetPredictor:
    """Network mapping covariates to ellipsoid parameters (mu, L entries, log r).

    The log-scale output is a standalone learned scalar by default;
    ``psi_dependent_r=True`` makes it an extra head of the network instead.
    """

    def __init__(self, cov_dim: int, set_dim: int, hidden: Sequence[int] = (64, 64),
                 psi_dependent_r: bool = False):
        self.cov_dim = int(cov_dim)
        self.set_dim = int(set_dim)
        self.tri = tri_size(set_dim)
        self.psi_dependent_r = bool(psi_dependent_r)
        out_dim = self.set_dim + self.tri + (1 if psi_dependent_r else 0)
        self.net = MLP(cov_dim, hidden, out_dim, prefix="set_")

    def param_spec(self) -> dict[str, tuple[int, ...]]:
        spec = self.net.param_spec()
        if not self.psi_dependent_r:
            spec["r_raw"] = (1,)
        return spec

    def init_params(self, seed: int = 0) -> ParamVector:
        rng = np.random.default_rng(seed)
        pv = ParamVector.build(self.param_spec())
        for name, value in self.net.init_values(rng).items():
            pv.set(name, value)
        if not self.psi_dependent_r:
            pv.set("r_raw", np.zeros(1))
        return pv

    def _check_psi(self, psi: Array) -> Array:
        psi = np.asarray(psi, dtype=float)
        if psi.shape != (self.cov_dim,):
            raise InputError(f"covariate dimension {psi.shape} does not match {(self.cov_dim,)}")
        return psi

    def forward(self, theta: ParamVector, psi: Array) -> SetPredictorOutput:
        psi = self._check_psi(psi)
        tape = Tape()
        out = self.net.forward(tape, theta, psi)
        m = self.set_dim
        mu_var = tape.gather(out, np.arange(m))
        l_var = tape.gather(out, np.arange(m, m + self.tri))
        if self.psi_dependent_r:
            r_var = tape.gather(out, np.array([m + self.tri]))
        else:
            r_var = tape.param(theta, "r_raw")
        result = SetPredictorOutput(
            mu=mu_var.value.copy(),
            L_raw=l_var.value.copy(),
            r_raw=float(r_var.value[0]),
            tape=tape, mu_var=mu_var, l_var=l_var, r_var=r_var,
        )
        if not np.all(np.isfinite(result.mu)) or not np.all(np.isfinite(result.L_raw)) \
                or not np.isfinite(result.r_raw):
            raise InputError("set predictor produced non-finite outputs")
        return result

    def backward(self, out: SetPredictorOutput, seed_mu: Array, seed_l: Array,
                 seed_r: float) -> Array:
        if out.tape is None:
            raise StateError("backward called on an output without a recorded tape")
        return out.tape.backward_multi([
            (out.mu_var, np.asarray(seed_mu, dtype=float)),
            (out.l_var, np.asarray(seed_l, dtype=float)),
            (out.r_var, np.array([float(seed_r)])),
        ])

    # -- batched paths for training loops

    def forward_batch(self, theta: ParamVector, Psi: Array):
        """Vectorized forward over a batch; returns (mu, l_raw, r_raw, cache)."""
        Psi = np.asarray(Psi, dtype=float)
        out, cache = self.net.forward_batch(theta, Psi)
        m = self.set_dim
        mu = out[:, :m]
        l_raw = out[:, m : m + self.tri]
        if self.psi_dependent_r:
            r_raw = out[:, m + self.tri]
        else:
            r_raw = np.full(Psi.shape[0], float(theta.get("r_raw")[0]))
        return mu, l_raw, r_raw, cache

    def backward_batch(self, theta: ParamVector, cache, seed_mu: Array,
                       seed_l: Array, seed_r: Array) -> Array:
        n = seed_mu.shape[0]
        seed = np.concatenate([seed_mu, seed_l], axis=1)
        if self.psi_dependent_r:
            seed = np.concatenate([seed, seed_r.reshape(n, 1)], axis=1)
        grad = self.net.backward_batch(theta, cache, seed)
        if not self.psi_dependent_r:
            offset, _ = theta.layout["r_raw"]
            grad[offset] += float(np.sum(seed_r))
        return grad


class CoverageNet:
    """Sigmoid-headed regressor for conditional membership probability.

    One tanh hidden layer by default; ``hidden=0`` gives a plain logistic
    model.  Besides the tape forward pass, the class exposes vectorized
    logit values, per-sample logit gradients, and the exact Hessian of the
    ridge-regularized negative log-likelihood, which the second-order
    fitting and the implicit-differentiation code both consume.
    """

    def __init__(self, cov_dim: int, hidden: int = 32):
        self.cov_dim = int(cov_dim)
        self.hidden = int(hidden)
        if self.hidden > 0:
            self.net = MLP(cov_dim, (self.hidden,), 1, prefix="cov_")
        else:
            self.net = MLP(cov_dim, (), 1, prefix="cov_")

    def param_spec(self) -> dict[str, tuple[int, ...]]:
        return self.net.param_spec()

    def init_params(self, seed: int = 0) -> ParamVector:
        rng = np.random.default_rng(seed)
        pv = ParamVector.build(self.param_spec())
        for name, value in self.net.init_values(rng).items():
            pv.set(name, value)
        return pv

    def n_params(self) -> int:
        return sum(int(np.prod(s, dtype=int)) if s else 1 for s in self.param_spec().values())

    def forward(self, phi: ParamVector, psi: Array) -> float:
        """Predicted probability for one covariate vector, strictly in (0, 1)."""
        psi = np.asarray(psi, dtype=float)
        if psi.shape != (self.cov_dim,):
            raise InputError(f"covariate dimension {psi.shape} does not match {(self.cov_dim,)}")
        tape = Tape()
        z = self.net.forward(tape, phi, psi)
        p = tape.sigmoid(z)
        return float(np.clip(p.value[0], 1e-300, 1.0 - 1e-16))

    def forward_tape(self, phi: ParamVector, psi: Array) -> tuple[Var, Tape]:
        tape = Tape()
        z = self.net.forward(tape, phi, np.asarray(psi, dtype=float))
        return tape.sigmoid(z), tape

    # -- vectorized pieces

    def logits(self, phi: ParamVector, Psi: Array) -> Array:
        out, _ = self.net.forward_batch(phi, np.asarray(Psi, dtype=float))
        return out[:, 0]

    def probs(self, phi: ParamVector, Psi: Array) -> Array:
        return np.clip(sigmoid(self.logits(phi, Psi)), 1e-300, 1.0 - 1e-16)

    def logit_grads(self, phi: ParamVector, Psi: Array) -> Array:
        """Per-sample gradient of the logit, shape (n, n_params)."""
        Psi = np.asarray(Psi, dtype=float)
        n = Psi.shape[0]
        G = np.zeros((n, len(phi)))
        if self.hidden == 0:
            off_w, _ = phi.layout["cov_W0"]
            off_b, _ = phi.layout["cov_b0"]
            G[:, off_w : off_w + self.cov_dim] = Psi
            G[:, off_b] = 1.0
            return G
        W1 = phi.get("cov_W0")            # (h, d)
        b1 = phi.get("cov_b0")            # (h,)
        w2 = phi.get("cov_W1")[0]         # (h,)
        H = np.tanh(Psi @ W1.T + b1)      # (n, h)
        dH = 1.0 - H**2
        off_w1, _ = phi.layout["cov_W0"]
        off_b1, _ = phi.layout["cov_b0"]
        off_w2, _ = phi.layout["cov_W1"]
        off_b2, _ = phi.layout["cov_b1"]
        scaled = w2 * dH                  # (n, h)
        G[:, off_w1 : off_w1 + self.hidden * self.cov_dim] = (
            scaled[:, :, None] * Psi[:, None, :]
        ).reshape(n, -1)
        G[:, off_b1 : off_b1 + self.hidden] = scaled
        G[:, off_w2 : off_w2 + self.hidden] = H
        G[:, off_b2] = 1.0
        return G

    def nll(self, phi: ParamVector, Psi: Array, y: Array, ridge: float) -> float:
        p = self.probs(phi, Psi)
        y = np.asarray(y, dtype=float)
        ll = y * np.log(p) + (1.0 - y) * np.log(1.0 - p)
        return float(-np.mean(ll) + 0.5 * ridge * phi.values @ phi.values)

    def nll_grad(self, phi: ParamVector, Psi: Array, y: Array, ridge: float) -> Array:
        p = self.probs(phi, Psi)
        resid = p - np.asarray(y, dtype=float)
        G = self.logit_grads(phi, Psi)
        return G.T @ resid / len(resid) + ridge * phi.values

    def nll_hessian(self, phi: ParamVector, Psi: Array, y: Array, ridge: float) -> Array:
        """Exact Hessian of the ridge-regularized mean NLL at phi."""
        Psi = np.asarray(Psi, dtype=float)
        y = np.asarray(y, dtype=float)
        n = Psi.shape[0]
        p = self.probs(phi, Psi)
        s = p * (1.0 - p)
        G = self.logit_grads(phi, Psi)
        H = (G.T * s) @ G / n
        resid = p - y
        if self.hidden > 0:
            # curvature of the logit itself: z = w2 . tanh(W1 psi + b1) + b2
            W1 = phi.get("cov_W0")
            b1 = phi.get("cov_b0")
            w2 = phi.get("cov_W1")[0]
            Hh = np.tanh(Psi @ W1.T + b1)
            dH = 1.0 - Hh**2
            ddH = -2.0 * Hh * dH
            off_w1, _ = phi.layout["cov_W0"]
            off_b1, _ = phi.layout["cov_b0"]
            off_w2, _ = phi.layout["cov_W1"]
            d, h = self.cov_dim, self.hidden
            w_r = resid / n
            # (W1, W1): block-diagonal per hidden unit, w2_k ddH_k psi psi^T
            coeff = (w_r[:, None] * ddH) * w2          # (n, h)
            for k in range(h):
                block = (Psi * coeff[:, k : k + 1]).T @ Psi
                sl = slice(off_w1 + k * d, off_w1 + (k + 1) * d)
                H[sl, sl] += block
                # (W1_k, b1_k)
                v = Psi.T @ coeff[:, k]
                H[sl, off_b1 + k] += v
                H[off_b1 + k, sl] += v
            # (b1, b1): diagonal
            H[off_b1 : off_b1 + h, off_b1 : off_b1 + h] += np.diag(coeff.sum(axis=0))
            # (w2_k, W1_k rows) and (w2_k, b1_k): d^2 z / dw2_k dW1_kl = dH_k psi_l
            coeff2 = w_r[:, None] * dH                  # (n, h)
            for k in range(h):
                v = Psi.T @ coeff2[:, k]
                sl = slice(off_w1 + k * d, off_w1 + (k + 1) * d)
                H[off_w2 + k, sl] += v
                H[sl, off_w2 + k] += v
                tot = coeff2[:, k].sum()
                H[off_w2 + k, off_b1 + k] += tot
                H[off_b1 + k, off_w2 + k] += tot
        H += ridge * np.eye(len(phi))
        return H
