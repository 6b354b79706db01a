"""Small neural-network core on top of JAX (float64).

Parameters live in one flat vector with a named layout so they can be
checksummed, checkpointed and updated by a plain Adam loop.  Reverse mode,
forward-mode JVPs and gradients of JVP-dependent losses come from JAX.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import jax

jax.config.update("jax_enable_x64", True)

import jax.numpy as jnp  # noqa: E402
import numpy as np  # noqa: E402

from .errors import ContractError, NumericFailure  # noqa: E402
from .io import array_hash, load_array, read_json, save_array, write_json  # noqa: E402

__all__ = [
    "Layout",
    "NetParams",
    "Adam",
    "ACTIVATIONS",
    "dense",
    "mlp",
    "mlp_layout",
    "layer_norm",
    "softmax",
    "causal_mask",
    "attention_block",
    "attention_layout",
    "init_params",
    "forward_eval",
    "grad_params",
    "jvp_input",
    "grad_of_jvp_loss",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_VERSION = 1
MASK_VALUE = -1e30
LN_EPS = 1e-10

ACTIVATIONS: Dict[str, Callable] = {
    "identity": lambda x: x,
    "tanh": jnp.tanh,
    "relu": jax.nn.relu,
    "elu": jax.nn.elu,
    "sigmoid": jax.nn.sigmoid,
}


# -- parameter layout ---------------------------------------------------------
@dataclass
class Layout:
    """Ordered ``name -> (shape, init)`` table describing a flat parameter vector."""

    entries: List[Tuple[str, Tuple[int, ...], str]] = field(default_factory=list)

    def add(self, name: str, shape: Sequence[int], init: str = "zeros") -> "Layout":
        if any(e[0] == name for e in self.entries):
            raise ContractError(f"duplicate parameter name {name!r}")
        self.entries.append((name, tuple(int(s) for s in shape), init))
        return self

    def extend(self, other: "Layout") -> "Layout":
        for e in other.entries:
            self.add(*e)
        return self

    @property
    def size(self) -> int:
        return int(sum(np.prod(s) for _, s, _ in self.entries))

    def slices(self):
        off = 0
        for name, shape, _ in self.entries:
            n = int(np.prod(shape))
            yield name, shape, slice(off, off + n)
            off += n

    def unpack(self, flat) -> dict:
        if flat.shape != (self.size,):
            raise ContractError(f"flat parameter vector has shape {flat.shape}, layout needs ({self.size},)")
        return {name: flat[sl].reshape(shape) for name, shape, sl in self.slices()}

    def pack(self, tree: dict) -> np.ndarray:
        out = np.empty(self.size)
        for name, shape, sl in self.slices():
            a = np.asarray(tree[name], dtype=float)
            if a.shape != shape:
                raise ContractError(f"{name}: expected shape {shape}, got {a.shape}")
            out[sl] = a.ravel()
        return out

    def to_json(self) -> list:
        return [[n, list(s), i] for n, s, i in self.entries]

    @classmethod
    def from_json(cls, data) -> "Layout":
        return cls([(n, tuple(s), i) for n, s, i in data])


@dataclass
class NetParams:
    flat: np.ndarray
    layout: Layout

    def __post_init__(self):
        # private read-only copy so the cached tree cannot go stale
        self.flat = np.array(self.flat, dtype=float)
        self.flat.setflags(write=False)
        if self.flat.shape != (self.layout.size,):
            raise ContractError("parameter vector does not match its layout")
        if not np.all(np.isfinite(self.flat)):
            raise NumericFailure("non-finite network parameters")
        self._tree = None

    def tree(self) -> dict:
        if self._tree is None:
            self._tree = self.layout.unpack(jnp.asarray(self.flat))
        return self._tree

    def replace(self, flat) -> "NetParams":
        return NetParams(np.asarray(flat, dtype=float), self.layout)

    def checksum(self) -> str:
        return array_hash(self.flat)[:16]


def init_params(layout: Layout, seed: int) -> NetParams:
    """Uniform fan-in initialisation: He bounds for ``he``, Xavier bounds for ``xavier``."""
    rng = np.random.default_rng(seed)
    flat = np.zeros(layout.size)
    for (name, shape, init), (_, _, sl) in zip(layout.entries, layout.slices()):
        n = int(np.prod(shape))
        if init == "zeros":
            continue
        if init == "ones":
            flat[sl] = 1.0
            continue
        # stacked per-step weights have shape (steps, fan_in, fan_out)
        fan_in, fan_out = shape[-2], shape[-1]
        if init == "he":
            bound = np.sqrt(6.0 / fan_in)
        elif init == "xavier":
            bound = np.sqrt(6.0 / (fan_in + fan_out))
        else:
            raise ContractError(f"unknown initialiser {init!r}")
        flat[sl] = rng.uniform(-bound, bound, n)
    return NetParams(flat, layout)


# -- layers -------------------------------------------------------------------
def dense(p: dict, name: str, x):
    return x @ p[name + ".W"] + p[name + ".b"]


def dense_layout(name: str, n_in: int, n_out: int, init: str = "xavier") -> Layout:
    return Layout().add(name + ".W", (n_in, n_out), init).add(name + ".b", (n_out,), "zeros")


def mlp_layout(name: str, sizes: Sequence[int], init: str = "he") -> Layout:
    lay = Layout()
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        lay.extend(dense_layout(f"{name}.{i}", a, b, init))
    return lay


def mlp(p: dict, name: str, x, n_layers: int, act: str = "relu", out_act: str = "identity"):
    h = x
    for i in range(n_layers):
        h = dense(p, f"{name}.{i}", h)
        h = ACTIVATIONS[out_act if i == n_layers - 1 else act](h)
    return h


def layer_norm(x, gain=None, bias=None, eps: float = LN_EPS):
    """Row-wise standardisation followed by an optional affine map."""
    mu = jnp.mean(x, axis=-1, keepdims=True)
    var = jnp.mean((x - mu) ** 2, axis=-1, keepdims=True)
    y = (x - mu) / jnp.sqrt(var + eps)
    if gain is not None:
        y = y * gain
    if bias is not None:
        y = y + bias
    return y


def softmax(x, axis: int = -1):
    z = x - jnp.max(x, axis=axis, keepdims=True)
    e = jnp.exp(z)
    return e / jnp.sum(e, axis=axis, keepdims=True)


def causal_mask(k: int) -> np.ndarray:
    """Additive mask: 0 on and below the diagonal, a large negative value above."""
    return np.where(np.tril(np.ones((k, k), dtype=bool)), 0.0, MASK_VALUE)


def attention_layout(name: str, d_z: int, d_a: int) -> Layout:
    lay = Layout()
    for h in ("Wq", "Wk", "Wv"):
        lay.add(f"{name}.{h}", (d_z, d_a), "xavier")
    return lay


def attention_block(p: dict, name: str, Z, mask=None, return_weights: bool = False):
    """Single-head scaled dot-product attention, ``(..., K, d_z) -> (..., K, d_a)``."""
    Q = Z @ p[name + ".Wq"]
    Kt = Z @ p[name + ".Wk"]
    V = Z @ p[name + ".Wv"]
    scores = Q @ jnp.swapaxes(Kt, -1, -2) / jnp.sqrt(Q.shape[-1])
    if mask is not None:
        scores = scores + mask
    W = softmax(scores, axis=-1)
    out = W @ V
    return (out, W) if return_weights else out


# -- differentiation wrappers -----------------------------------------------
def forward_eval(fn: Callable, params: NetParams, *inputs) -> np.ndarray:
    """Evaluate ``fn(tree, *inputs)``."""
    return np.asarray(fn(params.tree(), *inputs))


def grad_params(loss_fn: Callable, params: NetParams, *batch) -> np.ndarray:
    """Gradient over the flat parameter vector of ``loss_fn(tree, *batch)``."""
    lay = params.layout

    def flat_loss(flat):
        return loss_fn(lay.unpack(flat), *batch)

    return np.asarray(jax.grad(flat_loss)(jnp.asarray(params.flat)))


def jvp_input(fn: Callable, params: NetParams, x, tangent) -> np.ndarray:
    """``(d fn / d x) tangent`` for ``fn(tree, x)``."""
    x = jnp.asarray(x, dtype=float)
    t = jnp.asarray(tangent, dtype=float)
    if x.shape != t.shape:
        raise ContractError("tangent must have the shape of the input")
    tree = params.tree()
    _, out = jax.jvp(lambda z: fn(tree, z), (x,), (t,))
    return np.asarray(out)


def grad_of_jvp_loss(
    fn: Callable,
    params: NetParams,
    inputs,
    tangents: Sequence,
    loss_fn: Callable,
) -> np.ndarray:
    """Gradient over parameters of ``loss_fn(outputs, [jvp_1, ...])``.

    ``outputs = fn(tree, inputs)`` and ``jvp_j`` is its directional
    derivative along ``tangents[j]`` with respect to ``inputs``.
    """
    lay = params.layout
    x = jnp.asarray(inputs, dtype=float)
    ts = [jnp.asarray(t, dtype=float) for t in tangents]

    def flat_loss(flat):
        tree = lay.unpack(flat)
        f = lambda z: fn(tree, z)  # noqa: E731
        out = f(x)
        jvps = [jax.jvp(f, (x,), (t,))[1] for t in ts]
        return loss_fn(out, jvps)

    return np.asarray(jax.grad(flat_loss)(jnp.asarray(params.flat)))


# -- optimiser ------------------------------------------------------------------
@dataclass
class Adam:
    """Adam with an optional multiplicative learning-rate decay per step."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay: float = 1.0
    m: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None
    t: int = 0

    def step(self, flat: np.ndarray, grad: np.ndarray, ascent: bool = False) -> np.ndarray:
        grad = np.asarray(grad, dtype=float)
        if not np.all(np.isfinite(grad)):
            raise NumericFailure("non-finite gradient in optimiser step")
        if self.m is None:
            self.m = np.zeros_like(grad)
            self.v = np.zeros_like(grad)
        g = -grad if ascent else grad
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * g
        self.v = self.beta2 * self.v + (1 - self.beta2) * g * g
        mhat = self.m / (1 - self.beta1**self.t)
        vhat = self.v / (1 - self.beta2**self.t)
        new = flat - self.lr * mhat / (np.sqrt(vhat) + self.eps)
        self.lr *= self.decay
        return new

    def state(self) -> dict:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps, "decay": self.decay, "t": self.t}


def save_checkpoint(stem, params: NetParams, optimizer: Optional[Adam] = None, **meta) -> str:
    """Flat parameters (+ Adam moments) as binary arrays with a JSON descriptor."""
    stem = Path(stem)
    digest = save_array(stem.with_name(stem.name + ".params"), params.flat)
    desc = {
        "version": CHECKPOINT_VERSION,
        "layout": params.layout.to_json(),
        "params_sha256": digest,
        **meta,
    }
    if optimizer is not None and optimizer.m is not None:
        desc["optimizer"] = optimizer.state()
        save_array(stem.with_name(stem.name + ".adam_m"), optimizer.m)
        save_array(stem.with_name(stem.name + ".adam_v"), optimizer.v)
    write_json(Path(str(stem) + ".ckpt.json"), desc)
    return digest


def load_checkpoint(stem):
    """Returns ``(params, optimizer_or_None, descriptor)``."""
    stem = Path(stem)
    desc = read_json(Path(str(stem) + ".ckpt.json"))
    if desc.get("version") != CHECKPOINT_VERSION:
        raise ContractError(f"unsupported checkpoint version {desc.get('version')}")
    flat, _ = load_array(stem.with_name(stem.name + ".params"), expect_hash=desc["params_sha256"])
    params = NetParams(flat, Layout.from_json(desc["layout"]))
    opt = None
    if "optimizer" in desc:
        s = desc["optimizer"]
        opt = Adam(s["lr"], s["beta1"], s["beta2"], s["eps"], s["decay"], t=s["t"])
        opt.m, _ = load_array(stem.with_name(stem.name + ".adam_m"))
        opt.v, _ = load_array(stem.with_name(stem.name + ".adam_v"))
    return params, opt, desc
