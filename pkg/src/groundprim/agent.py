"""Hybrid actor/critic maps trained with TD3-style updates.

The actor map holds motion parameters for every (point, primitive) pair; the
critic map scores each pair with the critic feature of that point and the
actor's parameters. A discrete action is a cell of the critic map, chosen by
argmax at evaluation and by a temperature softmax (mixed with epsilon-uniform)
during exploration.
"""

from __future__ import annotations

import contextlib
import logging
from dataclasses import dataclass, field

import numpy as np

from .geometry import OBJECT
from .nn import MLP, Adam, Module, PointEncoder, soft_update
from .primitives import (K, MAX_PARAM_DIM, PARAM_DIMS, PrimitiveAction, PrimitiveType,
                         admissible_mask, location_mask)
from .tensor import Tensor, concat, no_grad

log = logging.getLogger(__name__)

OBS_DIM = 7


@dataclass
class AgentConfig:
    gamma: float = 0.99
    beta: float = 0.1  # softmax temperature over the critic map
    epsilon: float = 0.1
    batch_size: int = 64
    actor_interval: int = 4
    target_interval: int = 4
    tau: float = 0.005
    lr: float = 1e-4
    twin: bool = True
    action_noise: float = 0.0
    feature_dim: int = 64
    head_width: int = 128
    local_widths: tuple = (64, 128)
    decode_widths: tuple = (128,)

    def __post_init__(self):
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if self.actor_interval < 1 or self.target_interval < 1:
            raise ValueError("update intervals must be >= 1")


# ---------------------------------------------------------------------------
# replay

@dataclass
class Transition:
    obs: np.ndarray  # (N, 7)
    grasped: bool
    primitive: int
    location: int  # observation index, -1 when not grounded on a point
    params: np.ndarray
    reward: float
    next_obs: np.ndarray
    next_grasped: bool
    done: bool


@dataclass
class Batch:
    obs: np.ndarray
    grasped: np.ndarray
    primitive: np.ndarray
    location: np.ndarray
    params: np.ndarray
    reward: np.ndarray
    next_obs: np.ndarray
    next_grasped: np.ndarray
    done: np.ndarray

    def __len__(self):
        return len(self.reward)

    @classmethod
    def stack(cls, items) -> "Batch":
        return cls(
            obs=np.stack([t.obs for t in items]).astype(np.float64),
            grasped=np.array([t.grasped for t in items]),
            primitive=np.array([t.primitive for t in items], dtype=np.int64),
            location=np.array([t.location for t in items], dtype=np.int64),
            params=np.stack([t.params for t in items]).astype(np.float64),
            reward=np.array([t.reward for t in items], dtype=np.float64),
            next_obs=np.stack([t.next_obs for t in items]).astype(np.float64),
            next_grasped=np.array([t.next_grasped for t in items]),
            done=np.array([t.done for t in items], dtype=np.float64),
        )


class ReplayBuffer:
    """Ring buffer with a seeded uniform sampler.

    Observations are stored by reference, so consecutive transitions of an
    episode share the array for ``next_obs`` / ``obs``.
    """

    def __init__(self, capacity: int = 100_000, seed=0):
        self.capacity = capacity
        self.items: list = []
        self.cursor = 0
        self.rng = np.random.default_rng(seed)

    def __len__(self):
        return len(self.items)

    def add(self, t: Transition):
        if len(self.items) < self.capacity:
            self.items.append(t)
        else:
            self.items[self.cursor] = t
        self.cursor = (self.cursor + 1) % self.capacity

    def sample_indices(self, n: int) -> np.ndarray:
        if not self.items:
            raise ValueError("empty replay buffer")
        return self.rng.integers(0, len(self.items), size=n)

    def sample(self, n: int) -> Batch:
        return Batch.stack([self.items[i] for i in self.sample_indices(n)])

    def state_arrays(self) -> dict:
        if not self.items:
            return {}
        # deduplicate shared observation arrays
        ids, pool = {}, []
        def ref(a):
            if id(a) not in ids:
                ids[id(a)] = len(pool)
                pool.append(a)
            return ids[id(a)]
        obs_ref = [ref(t.obs) for t in self.items]
        next_ref = [ref(t.next_obs) for t in self.items]
        return {
            "pool": np.stack(pool), "obs_ref": np.array(obs_ref), "next_ref": np.array(next_ref),
            "grasped": np.array([t.grasped for t in self.items]),
            "primitive": np.array([t.primitive for t in self.items]),
            "location": np.array([t.location for t in self.items]),
            "params": np.stack([t.params for t in self.items]),
            "reward": np.array([t.reward for t in self.items]),
            "next_grasped": np.array([t.next_grasped for t in self.items]),
            "done": np.array([t.done for t in self.items]),
        }

    def load_state_arrays(self, a: dict, cursor: int):
        items = []
        if a:
            pool = list(a["pool"])
            for j in range(len(a["reward"])):
                items.append(Transition(pool[a["obs_ref"][j]], bool(a["grasped"][j]),
                                        int(a["primitive"][j]), int(a["location"][j]),
                                        a["params"][j], float(a["reward"][j]),
                                        pool[a["next_ref"][j]], bool(a["next_grasped"][j]),
                                        bool(a["done"][j])))
        self.items, self.cursor = items, cursor


# ---------------------------------------------------------------------------
# selection over a critic map

def valid_mask(features: np.ndarray, grasped) -> np.ndarray:
    """``(..., N, K)`` validity from the mask channel and the grasped flag."""
    labels = (features[..., 6] > 0.5).astype(np.int8)
    if labels.ndim == 1:
        return location_mask(labels) & admissible_mask(bool(grasped))[None, :]
    return np.stack([location_mask(lab) & admissible_mask(bool(g))[None, :]
                     for lab, g in zip(labels, np.asarray(grasped))])


def select_eval(q: np.ndarray, mask: np.ndarray):
    """Argmax over valid cells; ties go to the lowest row-major index."""
    if not mask.any():
        raise ValueError("no valid action")
    flat = np.where(mask, q, -np.inf).ravel()
    return np.unravel_index(int(np.argmax(flat)), q.shape)


def explore_probabilities(q: np.ndarray, mask: np.ndarray, beta: float,
                          epsilon: float = 0.0) -> np.ndarray:
    """Selection probability of every cell under the exploration policy."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    if not mask.any():
        raise ValueError("no valid action")
    z = np.where(mask, q / beta, -np.inf)
    z = z - z[mask].max()
    soft = np.where(mask, np.exp(z), 0.0)
    soft /= soft.sum()
    uniform = mask / mask.sum()
    return (1.0 - epsilon) * soft + epsilon * uniform


def select_explore(q: np.ndarray, mask: np.ndarray, beta: float, epsilon: float,
                   rng: np.random.Generator):
    """Epsilon-uniform over valid cells, otherwise softmax(Q / beta) over valid cells."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    if not mask.any():
        raise ValueError("no valid action")
    valid = np.flatnonzero(mask)
    if rng.random() < epsilon:
        flat = valid[rng.integers(len(valid))]
    else:
        z = q.ravel()[valid] / beta
        p = np.exp(z - z.max())
        flat = valid[rng.choice(len(valid), p=p / p.sum())]
    return np.unravel_index(int(flat), q.shape)


def td_values(reward, done, q_next, gamma):
    return np.asarray(reward) + gamma * (1.0 - np.asarray(done, dtype=float)) * np.asarray(q_next)


def random_action(obs, rng: np.random.Generator) -> PrimitiveAction:
    """Uniform admissible primitive, uniform valid point, uniform parameters."""
    mask = valid_mask(obs.features(), obs.grasped)
    prims = np.flatnonzero(mask.any(axis=0))
    k = int(prims[rng.integers(len(prims))])
    pts = np.flatnonzero(mask[:, k])
    i = int(pts[rng.integers(len(pts))])
    params = rng.uniform(-1, 1, PARAM_DIMS[k])
    return PrimitiveAction(k, obs.cloud.points[i], params, i)


@contextlib.contextmanager
def frozen(*modules):
    """Let gradients pass through ``modules`` without accumulating into their weights."""
    params = [p for m in modules for p in m.parameters()]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p in params:
            p.requires_grad = True


# ---------------------------------------------------------------------------
# networks

class MapActor(Module):
    """Per-point actor features, then one tanh head per parameterized primitive."""

    def __init__(self, cfg: AgentConfig, rng, in_dim=OBS_DIM):
        self.encoder = PointEncoder(in_dim, rng, cfg.local_widths, cfg.decode_widths,
                                    cfg.feature_dim)
        self.heads = [MLP([cfg.feature_dim, cfg.head_width, p], rng, out_act="tanh") if p else None
                      for p in PARAM_DIMS]

    def forward(self, x):
        """List of K tensors ``(B, N, P_k)`` (``None`` for parameter-free primitives)."""
        f = self.encoder(x)
        return [h(f) if h is not None else None for h in self.heads]


class MapCritic(Module):
    """Per-point critic features; one head per primitive on ``f_i ⊕ a^m_{i,k}``."""

    def __init__(self, cfg: AgentConfig, rng, in_dim=OBS_DIM):
        self.encoder = PointEncoder(in_dim, rng, cfg.local_widths, cfg.decode_widths,
                                    cfg.feature_dim)
        self.heads = [MLP([cfg.feature_dim + p, cfg.head_width, 1], rng) for p in PARAM_DIMS]

    def head(self, k, feats, params):
        x = feats if PARAM_DIMS[k] == 0 else concat([feats, params], axis=-1)
        return self.heads[k](x)[..., 0]

    def forward(self, x, actor_params, feats=None):
        """``(B, N, K)`` Q-values; ``feats`` may be passed to reuse (or detach) features."""
        f = self.encoder(x) if feats is None else feats
        cols = [self.head(k, f, actor_params[k]) for k in range(K)]
        b, n = f.shape[:2]
        return concat([c.reshape(b, n, 1) for c in cols], axis=-1)


def _pad(v, n) -> np.ndarray:
    out = np.zeros(n)
    out[:len(v)] = v
    return out


def pad_params(parts, n_points) -> np.ndarray:
    """Stack per-primitive parameter arrays into ``(B, N, K, MAX_PARAM_DIM)``."""
    b = next(p.shape[0] for p in parts if p is not None)
    out = np.zeros((b, n_points, K, MAX_PARAM_DIM))
    for k, p in enumerate(parts):
        if p is not None:
            out[:, :, k, :p.shape[-1]] = p.data if isinstance(p, Tensor) else p
    return out


# ---------------------------------------------------------------------------
# learners

class TD3Learner:
    """Update schedule shared by every method: critic each step, delayed actor and targets."""

    name = "base"

    def __init__(self, config: AgentConfig, seed: int = 0, in_dim: int = OBS_DIM):
        self.config = config
        self.in_dim = in_dim
        init_rng = np.random.default_rng([seed, 0])
        self.rng = np.random.default_rng([seed, 1])
        self.build(init_rng)
        self.actor_target = self.actor.clone()
        self.critic_targets = [c.clone() for c in self.critics]
        self.actor_opt = Adam(self.actor.parameters(), lr=config.lr)
        self.critic_opt = Adam([p for c in self.critics for p in c.parameters()], lr=config.lr)
        self.updates = 0

    def build(self, rng):
        raise NotImplementedError

    # subclass hooks
    def td_target(self, batch: Batch) -> np.ndarray:
        raise NotImplementedError

    def q_taken(self, critic, batch: Batch):
        """Q of the stored actions: ``(Tensor (M,), kept sample indices)``."""
        raise NotImplementedError

    def actor_objective(self, batch: Batch) -> Tensor:
        raise NotImplementedError

    def act(self, obs, explore: bool):
        """Returns ``(PrimitiveAction, info)``; ``info['store']`` is what goes into replay."""
        raise NotImplementedError

    def random_act(self, obs, rng):
        """A uniformly random admissible action for warmup, in the same storage format."""
        raise NotImplementedError

    def update_critic(self, batch: Batch, y=None) -> float:
        if y is None:
            y = self.td_target(batch)
        self.critic_opt.zero_grad()
        total = None
        for c in self.critics:
            q, keep = self.q_taken(c, batch)
            if len(keep) == 0:
                return float("nan")
            loss = ((q - y[keep]) ** 2).mean()
            total = loss if total is None else total + loss
        total.backward()
        self.critic_opt.step()
        return total.item() / len(self.critics)

    def update_actor(self, batch: Batch) -> float:
        self.actor_opt.zero_grad()
        with frozen(*self.critics):
            loss = self.actor_objective(batch)
            loss.backward()
        self.actor_opt.step()
        return loss.item()

    def update(self, batch: Batch) -> dict:
        cfg = self.config
        self.updates += 1
        y = self.td_target(batch)
        out = {"critic_loss": self.update_critic(batch, y), "actor_loss": None,
               "mean_target": float(np.mean(y))}
        if self.updates % cfg.actor_interval == 0:
            out["actor_loss"] = self.update_actor(batch)
        if self.updates % cfg.target_interval == 0:
            soft_update(self.actor_target, self.actor, cfg.tau)
            for t, c in zip(self.critic_targets, self.critics):
                soft_update(t, c, cfg.tau)
        return out

    # persistence
    def modules(self) -> dict:
        mods = {"actor": self.actor, "actor_target": self.actor_target}
        for j, (c, t) in enumerate(zip(self.critics, self.critic_targets)):
            mods[f"critic{j}"] = c
            mods[f"critic{j}_target"] = t
        return mods

    def state_arrays(self) -> dict:
        out = {}
        for name, m in self.modules().items():
            for k, v in m.state_dict().items():
                out[f"{name}/{k}"] = v
        for name, opt in (("actor_opt", self.actor_opt), ("critic_opt", self.critic_opt)):
            for k, v in opt.state_dict().items():
                out[f"{name}/{k}"] = v
        return out

    def load_state_arrays(self, arrays: dict):
        staged = {}
        for name, m in self.modules().items():
            prefix = f"{name}/"
            staged[name] = {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}
        for name, m in self.modules().items():
            m.load_state_dict(staged[name])
        for name, opt in (("actor_opt", self.actor_opt), ("critic_opt", self.critic_opt)):
            prefix = f"{name}/"
            opt.load_state_dict({k[len(prefix):]: v for k, v in arrays.items()
                                 if k.startswith(prefix)})
        # parameters were replaced; point the optimizers at the new tensors
        self.actor_opt.params = self.actor.parameters()
        self.critic_opt.params = [p for c in self.critics for p in c.parameters()]

    def meta(self) -> dict:
        return {"updates": self.updates, "rng": self.rng.bit_generator.state}

    def load_meta(self, meta: dict):
        self.updates = meta["updates"]
        self.rng.bit_generator.state = meta["rng"]


class HybridAgent(TD3Learner):
    """Spatially grounded primitives over per-point, per-primitive maps."""

    name = "ours"

    def build(self, rng):
        cfg = self.config
        self.actor = MapActor(cfg, rng, self.in_dim)
        self.critics = [MapCritic(cfg, rng, self.in_dim) for _ in range(2 if cfg.twin else 1)]

    def build_maps(self, features, grasped, target=False):
        """Actor map ``(B, N, K, P)``, critic maps ``[(B, N, K)]`` per critic, validity mask.

        Accepts a single observation ``(N, 7)`` too, returning unbatched arrays.
        """
        single = features.ndim == 2
        x = features[None] if single else features
        g = np.atleast_1d(grasped)
        actor = self.actor_target if target else self.actor
        critics = self.critic_targets if target else self.critics
        with no_grad():
            parts = actor(x)
            qs = [c(x, parts).data for c in critics]
        amap = pad_params(parts, x.shape[1])
        mask = valid_mask(x, g)
        if single:
            return amap[0], [q[0] for q in qs], mask[0]
        return amap, qs, mask

    def act(self, obs, explore: bool = True):
        feats = obs.features()
        amap, qs, mask = self.build_maps(feats, obs.grasped)
        q = qs[0]
        cfg = self.config
        if explore:
            i, k = select_explore(q, mask, cfg.beta, cfg.epsilon, self.rng)
        else:
            i, k = select_eval(q, mask)
        params = amap[i, k, :PARAM_DIMS[k]].copy()
        if explore and cfg.action_noise > 0 and len(params):
            noise = self.rng.normal(0.0, cfg.action_noise, len(params))
            params = np.clip(params + noise, -0.999, 0.999)
        action = PrimitiveAction(int(k), obs.cloud.points[i], params, int(i))
        return action, {"q": q, "mask": mask, "actor_map": amap,
                        "store": (int(k), int(i), _pad(params, MAX_PARAM_DIM))}

    def random_act(self, obs, rng):
        a = random_action(obs, rng)
        return a, {"store": (int(a.primitive), a.location_index, _pad(a.params, MAX_PARAM_DIM))}

    def td_target(self, batch: Batch) -> np.ndarray:
        x = batch.next_obs
        mask = valid_mask(x, batch.next_grasped)
        with no_grad():
            parts = self.actor_target(x)
            q1 = self.critic_targets[0](x, parts).data
            n = len(batch)
            sel = [select_eval(q1[b], mask[b]) for b in range(n)]
            i = np.array([s[0] for s in sel])
            k = np.array([s[1] for s in sel])
            rows = np.arange(n)
            q_next = q1[rows, i, k]
            # the other critics are only needed at the greedy entry
            amap = pad_params(parts, x.shape[1])[rows, i, k]
            for c in self.critic_targets[1:]:
                f = c.encoder(x).data[rows, i]
                q_other = np.empty(n)
                for kk in np.unique(k):
                    idx = np.flatnonzero(k == kk)
                    q_other[idx] = c.head(kk, Tensor(f[idx]),
                                          Tensor(amap[idx, :PARAM_DIMS[kk]])).data
                q_next = np.minimum(q_next, q_other)
        return td_values(batch.reward, batch.done, q_next, self.config.gamma)

    def q_taken(self, critic: MapCritic, batch: Batch):
        mask = valid_mask(batch.obs, batch.grasped)
        rows = np.arange(len(batch))
        ok = mask[rows, batch.location, batch.primitive]
        if not ok.all():
            log.warning("skipping %d transitions invalid under current masking", (~ok).sum())
        feats = critic.encoder(batch.obs)
        qs, keep = [], []
        for k in range(K):
            idx = np.flatnonzero(ok & (batch.primitive == k))
            if len(idx) == 0:
                continue
            f = feats[idx, batch.location[idx]]
            p = Tensor(batch.params[idx, :PARAM_DIMS[k]])
            qs.append(critic.head(k, f, p))
            keep.append(idx)
        if not keep:
            return None, np.array([], dtype=int)
        return concat(qs, axis=0), np.concatenate(keep)

    def actor_objective(self, batch: Batch) -> Tensor:
        critic = self.critics[0]
        with no_grad():
            feats = critic.encoder(batch.obs)
        parts = self.actor(batch.obs)
        q = critic(batch.obs, parts, feats=feats)
        mask = valid_mask(batch.obs, batch.grasped)
        weights = mask / mask.sum(axis=(1, 2), keepdims=True) / len(batch)
        return -(q * weights).sum()
