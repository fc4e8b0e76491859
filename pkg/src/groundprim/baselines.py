"""Comparison policies: P-DQN, RAPS and HACMan(logit).

All three read the same :class:`~groundprim.env.Observation`, emit the same
:class:`~groundprim.primitives.PrimitiveAction`, and train with the shared
TD3 schedule in :class:`~groundprim.agent.TD3Learner`. P-DQN and RAPS regress
a location in ``(-1, 1)^3`` that is mapped onto an area-of-interest box; the
HACMan variant grounds on a point but picks the primitive from per-point logits.
Inadmissible primitives get a score of ``-inf`` before any selection.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from .agent import (OBS_DIM, AgentConfig, Batch, HybridAgent, TD3Learner, _pad, td_values,
                    valid_mask)
from .env import BinGeometry
from .nn import MLP, GlobalEncoder, Module, PointEncoder
from .primitives import (K, PARAM_DIMS, PrimitiveAction, admissible_mask,
                         map_regressed_location)
from .tensor import Tensor, concat, no_grad

LOC_DIM = 3
LOGIT_SCALE = 5.0  # bounded logits keep log-probabilities finite
REGRESSED_DIMS = tuple(p + LOC_DIM for p in PARAM_DIMS)  # params then location, per primitive
RAPS_OFFSETS = tuple(np.concatenate([[0], np.cumsum(REGRESSED_DIMS)]).tolist())
RAPS_DIM = RAPS_OFFSETS[-1] + K
HACMAN_OFFSETS = tuple(np.concatenate([[0], np.cumsum(PARAM_DIMS)]).tolist())
HACMAN_DIM = HACMAN_OFFSETS[-1] + K


def baseline_config(**overrides) -> AgentConfig:
    """Learner settings for the baselines: no update delay, Gaussian action noise 0.1."""
    base = dict(actor_interval=1, target_interval=1, action_noise=0.1, epsilon=0.0)
    base.update(overrides)
    return AgentConfig(**base)


def primitive_probabilities(scores, admissible, temperature=1.0) -> np.ndarray:
    """Softmax over admissible primitives; inadmissible ones get probability 0."""
    s = np.where(admissible, np.asarray(scores, dtype=float) / temperature, -np.inf)
    if not np.isfinite(s).any():
        raise ValueError("no valid action")
    p = np.exp(s - s.max())
    return p / p.sum()


def choose_primitive(scores, admissible, mode: str, temperature: float, rng) -> int:
    if mode == "eval":
        s = np.where(admissible, scores, -np.inf)
        if not np.isfinite(s).any():
            raise ValueError("no valid action")
        return int(np.argmax(s))
    if mode != "explore":
        raise ValueError(f"unknown mode {mode!r}")
    return int(rng.choice(len(scores), p=primitive_probabilities(scores, admissible, temperature)))


def _noisy(u, sigma, rng):
    if sigma <= 0:
        return u
    return np.clip(u + rng.normal(0.0, sigma, u.shape), -1.0, 1.0)


class _RegressedLocationMixin:
    """Shared decoding of a regressed ``(params, raw location)`` vector."""

    workspace: tuple

    def decode(self, k: int, u: np.ndarray, obs) -> PrimitiveAction:
        p = PARAM_DIMS[k]
        loc = map_regressed_location(u[p:p + LOC_DIM], k, obs.object_box(), self.workspace)
        return PrimitiveAction(k, loc, u[:p])


# ---------------------------------------------------------------------------
# P-DQN

class PdqnActor(Module):
    def __init__(self, cfg: AgentConfig, rng, in_dim=OBS_DIM):
        self.encoder = GlobalEncoder(in_dim, rng, cfg.local_widths, cfg.feature_dim)
        self.heads = [MLP([cfg.feature_dim, cfg.head_width, d], rng, out_act="tanh")
                      for d in REGRESSED_DIMS]

    def forward(self, x):
        f = self.encoder(x)
        return [h(f) for h in self.heads]


class PdqnCritic(Module):
    def __init__(self, cfg: AgentConfig, rng, in_dim=OBS_DIM):
        self.encoder = GlobalEncoder(in_dim, rng, cfg.local_widths, cfg.feature_dim)
        self.heads = [MLP([cfg.feature_dim + d, cfg.head_width, 1], rng) for d in REGRESSED_DIMS]

    def head(self, k, f, u):
        return self.heads[k](concat([f, u], axis=-1))[..., 0]

    def forward(self, x, parts, feats=None):
        f = self.encoder(x) if feats is None else feats
        return concat([self.head(k, f, parts[k]).reshape(-1, 1) for k in range(K)], axis=-1)


class PdqnAgent(_RegressedLocationMixin, TD3Learner):
    """Global features; one parameter head and one Q head per primitive."""

    name = "pdqn"
    store_dim = max(REGRESSED_DIMS)

    def __init__(self, config=None, seed=0, workspace=None, in_dim=OBS_DIM):
        self.workspace = workspace or BinGeometry().workspace()
        super().__init__(config or baseline_config(), seed, in_dim)

    def build(self, rng):
        self.actor = PdqnActor(self.config, rng, self.in_dim)
        self.critics = [PdqnCritic(self.config, rng, self.in_dim)
                        for _ in range(2 if self.config.twin else 1)]

    def scores(self, features):
        with no_grad():
            parts = self.actor(features[None])
            q = self.critics[0](features[None], parts).data[0]
        return [p.data[0] for p in parts], q

    def act(self, obs, explore=True, mode=None):
        mode = mode or ("explore" if explore else "eval")
        parts, q = self.scores(obs.features())
        k = choose_primitive(q, admissible_mask(obs.grasped), mode, self.config.beta, self.rng)
        u = parts[k]
        if mode == "explore":
            u = _noisy(u, self.config.action_noise, self.rng)
        return self.decode(k, u, obs), {"q": q, "store": (k, -1, _pad(u, self.store_dim))}

    def random_act(self, obs, rng):
        adm = np.flatnonzero(admissible_mask(obs.grasped))
        k = int(adm[rng.integers(len(adm))])
        u = rng.uniform(-1, 1, REGRESSED_DIMS[k])
        return self.decode(k, u, obs), {"store": (k, -1, _pad(u, self.store_dim))}

    def td_target(self, batch: Batch):
        x = batch.next_obs
        n = len(batch)
        adm = np.stack([admissible_mask(bool(g)) for g in batch.next_grasped])
        with no_grad():
            parts = self.actor_target(x)
            q1 = self.critic_targets[0](x, parts).data
            k = np.argmax(np.where(adm, q1, -np.inf), axis=1)
            q_next = q1[np.arange(n), k]
            for c in self.critic_targets[1:]:
                q_next = np.minimum(q_next, c(x, parts).data[np.arange(n), k])
        return td_values(batch.reward, batch.done, q_next, self.config.gamma)

    def q_taken(self, critic, batch: Batch):
        f = critic.encoder(batch.obs)
        qs, keep = [], []
        for k in range(K):
            idx = np.flatnonzero(batch.primitive == k)
            if len(idx):
                qs.append(critic.head(k, f[idx], Tensor(batch.params[idx, :REGRESSED_DIMS[k]])))
                keep.append(idx)
        return concat(qs, axis=0), np.concatenate(keep)

    def actor_objective(self, batch: Batch):
        critic = self.critics[0]
        with no_grad():
            f = critic.encoder(batch.obs)
        q = critic(batch.obs, self.actor(batch.obs), feats=f)
        adm = np.stack([admissible_mask(bool(g)) for g in batch.grasped]).astype(float)
        w = adm / adm.sum(axis=1, keepdims=True) / len(batch)
        return -(q * w).sum()


# ---------------------------------------------------------------------------
# RAPS

class GlobalActor(Module):
    def __init__(self, cfg, rng, out_dim, in_dim=OBS_DIM):
        self.encoder = GlobalEncoder(in_dim, rng, cfg.local_widths, cfg.feature_dim)
        self.head = MLP([cfg.feature_dim, cfg.head_width, out_dim], rng, out_act="tanh")

    def forward(self, x):
        return self.head(self.encoder(x))


class GlobalCritic(Module):
    def __init__(self, cfg, rng, action_dim, in_dim=OBS_DIM):
        self.encoder = GlobalEncoder(in_dim, rng, cfg.local_widths, cfg.feature_dim)
        self.head = MLP([cfg.feature_dim + action_dim, cfg.head_width, 1], rng)

    def forward(self, x, u, feats=None):
        f = self.encoder(x) if feats is None else feats
        return self.head(concat([f, u], axis=-1))[..., 0]


def raps_logits(u: np.ndarray) -> np.ndarray:
    return LOGIT_SCALE * np.asarray(u)[..., RAPS_OFFSETS[-1]:]


class RapsAgent(_RegressedLocationMixin, TD3Learner):
    """One joint action: every primitive's parameters and location plus K logits."""

    name = "raps"

    def __init__(self, config=None, seed=0, workspace=None, in_dim=OBS_DIM):
        self.workspace = workspace or BinGeometry().workspace()
        super().__init__(config or baseline_config(), seed, in_dim)

    def build(self, rng):
        self.actor = GlobalActor(self.config, rng, RAPS_DIM, self.in_dim)
        self.critics = [GlobalCritic(self.config, rng, RAPS_DIM, self.in_dim)
                        for _ in range(2 if self.config.twin else 1)]

    def _execute(self, u, obs, mode, rng):
        adm = admissible_mask(obs.grasped)
        k = choose_primitive(raps_logits(u), adm, mode, 1.0, rng)
        part = u[RAPS_OFFSETS[k]:RAPS_OFFSETS[k + 1]]
        return self.decode(k, part, obs), k

    def act(self, obs, explore=True, mode=None):
        mode = mode or ("explore" if explore else "eval")
        with no_grad():
            u = self.actor(obs.features()[None]).data[0]
        if mode == "explore":
            u = _noisy(u, self.config.action_noise, self.rng)
        action, k = self._execute(u, obs, mode, self.rng)
        return action, {"logits": raps_logits(u), "store": (k, -1, u.copy())}

    def random_act(self, obs, rng):
        u = rng.uniform(-1, 1, RAPS_DIM)
        action, k = self._execute(u, obs, "explore", rng)
        return action, {"store": (k, -1, u)}

    def td_target(self, batch):
        with no_grad():
            u = self.actor_target(batch.next_obs)
            q = np.min([c(batch.next_obs, u).data for c in self.critic_targets], axis=0)
        return td_values(batch.reward, batch.done, q, self.config.gamma)

    def q_taken(self, critic, batch):
        return critic(batch.obs, Tensor(batch.params)), np.arange(len(batch))

    def actor_objective(self, batch):
        critic = self.critics[0]
        with no_grad():
            f = critic.encoder(batch.obs)
        return -critic(batch.obs, self.actor(batch.obs), feats=f).mean()


# ---------------------------------------------------------------------------
# HACMan(logit)

class PointActor(Module):
    def __init__(self, cfg, rng, out_dim, in_dim=OBS_DIM):
        self.encoder = PointEncoder(in_dim, rng, cfg.local_widths, cfg.decode_widths,
                                    cfg.feature_dim)
        self.head = MLP([cfg.feature_dim, cfg.head_width, out_dim], rng, out_act="tanh")

    def forward(self, x):
        return self.head(self.encoder(x))


class PointCritic(Module):
    def __init__(self, cfg, rng, action_dim, in_dim=OBS_DIM):
        self.encoder = PointEncoder(in_dim, rng, cfg.local_widths, cfg.decode_widths,
                                    cfg.feature_dim)
        self.head = MLP([cfg.feature_dim + action_dim, cfg.head_width, 1], rng)

    def score(self, feats, u):
        return self.head(concat([feats, u], axis=-1))[..., 0]

    def forward(self, x, u, feats=None):
        return self.score(self.encoder(x) if feats is None else feats, u)


def hacman_logits(u: np.ndarray) -> np.ndarray:
    return LOGIT_SCALE * np.asarray(u)[..., HACMAN_OFFSETS[-1]:]


def hacman_params(u: np.ndarray, k: int) -> np.ndarray:
    return np.asarray(u)[HACMAN_OFFSETS[k]:HACMAN_OFFSETS[k + 1]]


class HacmanLogitAgent(TD3Learner):
    """Per-point action holding all primitives' parameters and K logits; one Q per point."""

    name = "hacman_logit"

    def __init__(self, config=None, seed=0, workspace=None, in_dim=OBS_DIM):
        super().__init__(config or baseline_config(), seed, in_dim)

    def build(self, rng):
        self.actor = PointActor(self.config, rng, HACMAN_DIM, self.in_dim)
        self.critics = [PointCritic(self.config, rng, HACMAN_DIM, self.in_dim)
                        for _ in range(2 if self.config.twin else 1)]

    def maps(self, features):
        with no_grad():
            u = self.actor(features[None])
            q = self.critics[0](features[None], u).data[0]
        return u.data[0], q

    def _finish(self, i, u, obs, valid, mode, rng):
        k = choose_primitive(hacman_logits(u), valid[i], mode, 1.0, rng)
        action = PrimitiveAction(k, obs.cloud.points[i], hacman_params(u, k), int(i))
        return action, (k, int(i), u.copy())

    def act(self, obs, explore=True, mode=None):
        mode = mode or ("explore" if explore else "eval")
        feats = obs.features()
        u, q = self.maps(feats)
        valid = valid_mask(feats, obs.grasped)
        i = int(np.argmax(np.where(valid.any(axis=1), q, -np.inf)))
        ui = _noisy(u[i], self.config.action_noise, self.rng) if mode == "explore" else u[i]
        action, store = self._finish(i, ui, obs, valid, mode, self.rng)
        return action, {"q": q, "store": store}

    def random_act(self, obs, rng):
        valid = valid_mask(obs.features(), obs.grasped)
        pts = np.flatnonzero(valid.any(axis=1))
        i = int(pts[rng.integers(len(pts))])
        action, store = self._finish(i, rng.uniform(-1, 1, HACMAN_DIM), obs, valid, "explore", rng)
        return action, {"store": store}

    def td_target(self, batch):
        x = batch.next_obs
        n = len(batch)
        ok = valid_mask(x, batch.next_grasped).any(axis=2)
        with no_grad():
            u = self.actor_target(x)
            q1 = self.critic_targets[0](x, u).data
            i = np.argmax(np.where(ok, q1, -np.inf), axis=1)
            rows = np.arange(n)
            q_next = q1[rows, i]
            for c in self.critic_targets[1:]:
                f = c.encoder(x).data[rows, i]
                q_next = np.minimum(q_next, c.score(Tensor(f), Tensor(u.data[rows, i])).data)
        return td_values(batch.reward, batch.done, q_next, self.config.gamma)

    def q_taken(self, critic, batch):
        f = critic.encoder(batch.obs)
        rows = np.arange(len(batch))
        return critic.score(f[rows, batch.location], Tensor(batch.params)), rows

    def actor_objective(self, batch):
        critic = self.critics[0]
        with no_grad():
            f = critic.encoder(batch.obs)
        q = critic(batch.obs, self.actor(batch.obs), feats=f)
        ok = valid_mask(batch.obs, batch.grasped).any(axis=2).astype(float)
        w = ok / ok.sum(axis=1, keepdims=True) / len(batch)
        return -(q * w).sum()


# ---------------------------------------------------------------------------

METHODS = {"ours": HybridAgent, "pdqn": PdqnAgent, "raps": RapsAgent,
           "hacman_logit": HacmanLogitAgent}


def default_config(method: str, **overrides) -> AgentConfig:
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {sorted(METHODS)}")
    return AgentConfig(**overrides) if method == "ours" else baseline_config(**overrides)


def make_agent(method: str, config: AgentConfig | None = None, seed: int = 0, workspace=None):
    config = config or default_config(method)
    if method == "ours":
        return HybridAgent(config, seed)
    return METHODS[method](config, seed, workspace=workspace)


def pdqn_select(observation, agent: PdqnAgent, mode: str = "eval") -> PrimitiveAction:
    return agent.act(observation, mode=mode)[0]


def raps_select(observation, agent: RapsAgent, mode: str = "eval") -> PrimitiveAction:
    return agent.act(observation, mode=mode)[0]


def hacman_logit_select(observation, agent: HacmanLogitAgent, mode: str = "eval") -> PrimitiveAction:
    return agent.act(observation, mode=mode)[0]
