"""Layers, point-cloud encoders, Adam, and flat-array checkpoints."""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

import numpy as np

from .tensor import Tensor, as_tensor, concat

CHECKPOINT_VERSION = 1


class Module:
    def named_parameters(self, prefix=""):
        out = []
        for name, value in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                out.append((key, value))
            elif isinstance(value, Module):
                out.extend(value.named_parameters(key + "."))
            elif isinstance(value, (list, tuple)):
                for i, v in enumerate(value):
                    if isinstance(v, Module):
                        out.extend(v.named_parameters(f"{key}.{i}."))
        return out

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict:
        return {k: p.data.copy() for k, p in self.named_parameters()}

    def load_state_dict(self, state: dict):
        params = dict(self.named_parameters())
        if set(params) != set(state):
            raise KeyError(f"parameter mismatch: {sorted(set(params) ^ set(state))}")
        for k, p in params.items():
            if p.data.shape != state[k].shape:
                raise ValueError(f"shape mismatch for {k}")
            p.data = np.array(state[k], dtype=np.float64)

    def clone(self):
        return copy.deepcopy(self)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    """Dense layer with fan-in uniform init."""

    def __init__(self, n_in, n_out, rng: np.random.Generator):
        bound = 1.0 / np.sqrt(n_in)
        self.weight = Tensor(rng.uniform(-bound, bound, (n_in, n_out)), requires_grad=True)
        self.bias = Tensor(rng.uniform(-bound, bound, n_out), requires_grad=True)
        self.n_in, self.n_out = n_in, n_out

    def forward(self, x):
        x = as_tensor(x)
        if x.shape[-1] != self.n_in:
            raise ValueError(f"expected last dim {self.n_in}, got {x.shape[-1]}")
        lead = x.shape[:-1]
        y = x.reshape(-1, self.n_in) @ self.weight + self.bias
        return y.reshape(*lead, self.n_out)


_ACTIVATIONS = {
    None: lambda t: t,
    "relu": lambda t: t.relu(),
    "tanh": lambda t: t.tanh(),
}


class MLP(Module):
    """ReLU hidden layers; ``out_act`` in {None, 'relu', 'tanh'}."""

    def __init__(self, widths, rng, out_act=None):
        if len(widths) < 2 or min(widths) <= 0:
            raise ValueError("MLP needs >= 1 layer with positive widths")
        self.layers = [Linear(a, b, rng) for a, b in zip(widths[:-1], widths[1:])]
        self.out_act = out_act

    def forward(self, x):
        for layer in self.layers[:-1]:
            x = layer(x).relu()
        return _ACTIVATIONS[self.out_act](self.layers[-1](x))


class PointEncoder(Module):
    """Segmentation-style encoder: ``(B, N, D) -> (B, N, F)``.

    A shared per-point MLP, a max-pooled global feature broadcast back to
    every point, and a second shared MLP over the concatenation.
    """

    def __init__(self, in_dim, rng, local=(64, 128), decode=(128,), out_dim=64):
        self.local = MLP([in_dim, *local], rng, out_act="relu")
        self.decode = MLP([2 * local[-1], *decode, out_dim], rng, out_act="relu")
        self.in_dim, self.out_dim = in_dim, out_dim

    def forward(self, x):
        x = as_tensor(x)
        if x.ndim != 3 or x.shape[-1] != self.in_dim:
            raise ValueError(f"expected (B, N, {self.in_dim}) input, got {x.shape}")
        b, n, _ = x.shape
        local = self.local(x)
        pooled = local.max(axis=1, keepdims=True).expand(b, n, local.shape[-1])
        return self.decode(concat([local, pooled], axis=-1))


class GlobalEncoder(Module):
    """Classification-style encoder: ``(B, N, D) -> (B, F)``; order-invariant."""

    def __init__(self, in_dim, rng, local=(64, 128), out_dim=64):
        self.local = MLP([in_dim, *local], rng, out_act="relu")
        self.head = MLP([local[-1], out_dim], rng, out_act="relu")
        self.in_dim, self.out_dim = in_dim, out_dim

    def forward(self, x):
        x = as_tensor(x)
        if x.ndim != 3 or x.shape[-1] != self.in_dim:
            raise ValueError(f"expected (B, N, {self.in_dim}) input, got {x.shape}")
        return self.head(self.local(x).max(axis=1))


class Adam:
    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.params = list(params)
        self.lr, self.betas, self.eps = lr, betas, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                g = np.zeros_like(p.data)
            else:
                g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self) -> dict:
        out = {"t": np.array([self.t], dtype=np.float64)}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"m.{i}"] = m.copy()
            out[f"v.{i}"] = v.copy()
        return out

    def load_state_dict(self, state: dict):
        self.t = int(state["t"][0])
        self.m = [np.array(state[f"m.{i}"]) for i in range(len(self.params))]
        self.v = [np.array(state[f"v.{i}"]) for i in range(len(self.params))]


def adam_step(params, grads, lr, state: dict | None = None, betas=(0.9, 0.999), eps=1e-8):
    """Functional Adam on plain arrays. Returns ``(new_params, state)``."""
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    state = state or {"t": 0, "m": [np.zeros_like(p) for p in params],
                      "v": [np.zeros_like(p) for p in params]}
    t = state["t"] + 1
    b1, b2 = betas
    out, ms, vs = [], [], []
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        out.append(p - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps))
        ms.append(m)
        vs.append(v)
    return out, {"t": t, "m": ms, "v": vs}


def soft_update(target: Module, online: Module, tau: float):
    """``target <- (1 - tau) * target + tau * online``, in place."""
    tp, op = target.named_parameters(), online.named_parameters()
    if [k for k, _ in tp] != [k for k, _ in op]:
        raise ValueError("modules do not match")
    for (_, t), (_, o) in zip(tp, op):
        if t.data.shape != o.data.shape:
            raise ValueError("shape mismatch")
        t.data = (1.0 - tau) * t.data + tau * o.data
    return target


# ---------------------------------------------------------------------------
# checkpoints: manifest.json (name, dtype, shape, byte offset) + data.bin

class CheckpointError(RuntimeError):
    pass


def save_arrays(directory, arrays: dict, meta: dict | None = None) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr)
        entries.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape),
                        "offset": offset, "nbytes": a.nbytes})
        blobs.append(a.tobytes())
        offset += a.nbytes
    data = b"".join(blobs)
    manifest = {"version": CHECKPOINT_VERSION, "entries": entries,
                "sha256": hashlib.sha256(data).hexdigest(), "meta": meta or {}}
    (d / "data.bin").write_bytes(data)
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1))


def load_arrays(directory):
    """Returns ``(arrays, meta)``; raises :class:`CheckpointError` before building anything."""
    d = Path(directory)
    try:
        manifest = json.loads((d / "manifest.json").read_text())
        data = (d / "data.bin").read_bytes()
    except (OSError, ValueError) as e:
        raise CheckpointError(f"unreadable checkpoint {d}: {e}") from e
    if not isinstance(manifest, dict) or manifest.get("version") != CHECKPOINT_VERSION:
        got = manifest.get("version") if isinstance(manifest, dict) else None
        raise CheckpointError(f"version mismatch: manifest has {got!r}, "
                              f"loader expects {CHECKPOINT_VERSION}")
    if hashlib.sha256(data).hexdigest() != manifest.get("sha256"):
        raise CheckpointError("data checksum does not match manifest")
    arrays = {}
    try:
        for e in manifest["entries"]:
            buf = data[e["offset"]:e["offset"] + e["nbytes"]]
            arr = np.frombuffer(buf, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
            arrays[e["name"]] = arr
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"corrupt manifest: {e}") from e
    return arrays, manifest.get("meta", {})
