"""Training and evaluation loops, metrics, checkpoints and figure data.

One environment step is one primitive execution. Training fills the replay
buffer with uniformly random valid actions for ``warmup_steps``, then
alternates exploration steps and learner updates. Every ``eval_interval``
steps the greedy policy is evaluated and a checkpoint is written; resuming
from any checkpoint reproduces the uninterrupted run exactly.
"""

from __future__ import annotations

import ast
import csv
import dataclasses
import hashlib
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .agent import HybridAgent, ReplayBuffer, Transition, select_eval
from .baselines import METHODS, default_config, make_agent
from .env import DoubleBinEnv, EnvConfig, read_trace, write_trace
from .nn import CheckpointError, load_arrays, save_arrays
from .objects import load_library, make_library, simple_objects
from .primitives import PrimitiveAction, PrimitiveType

log = logging.getLogger(__name__)

OUTPUT_ENV_VAR = "GROUNDPRIM_OUT"
METRICS_FIELDS = ["step", "updates", "buffer_size", "success_rate", "success_stderr",
                  "mean_episode_reward", "critic_loss", "actor_loss", "mean_target",
                  "config_hash", "build_id"]
AGENT_FIELDS = ("gamma", "beta", "epsilon", "batch_size", "actor_interval", "target_interval",
                "tau", "lr", "twin", "action_noise", "feature_dim", "head_width",
                "local_widths", "decode_widths")


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ENV_VAR, "runs"))


@dataclass(frozen=True)
class RunConfig:
    method: str = "ours"
    seed: int = 0
    task: str = "doublebin"
    objects: str = "library"  # "library", "simple", or a path to a saved library
    split: str = "train"
    library_seed: int = 0
    n_object_points: int = 400
    n_background_points: int = 1000
    upright_only: bool = False
    total_steps: int = 100_000
    warmup_steps: int = 10_000
    eval_interval: int = 5_000
    eval_episodes: int = 20
    episode_length: int = 10
    eval_lengths: tuple = (10, 20, 30)
    eval_seed: int = 1_000_000
    update_ratio: float = 1.0  # learner updates per env step after warmup
    buffer_capacity: int = 100_000
    target_success: float | None = None  # stop after the first eval reaching this rate
    # learner overrides; None keeps the method's default
    gamma: float | None = None
    beta: float | None = None
    epsilon: float | None = None
    batch_size: int | None = None
    actor_interval: int | None = None
    target_interval: int | None = None
    tau: float | None = None
    lr: float | None = None
    twin: bool | None = None
    action_noise: float | None = None
    feature_dim: int | None = None
    head_width: int | None = None
    local_widths: tuple | None = None
    decode_widths: tuple | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.warmup_steps > self.total_steps:
            raise ValueError("warmup_steps must not exceed total_steps")
        for name in ("eval_interval", "episode_length", "buffer_capacity"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.eval_episodes < 0 or self.update_ratio < 0:
            raise ValueError("eval_episodes and update_ratio must be non-negative")
        for name in ("eval_lengths", "local_widths", "decode_widths"):
            v = getattr(self, name)
            if isinstance(v, list):
                object.__setattr__(self, name, tuple(v))

    def agent_config(self):
        overrides = {k: getattr(self, k) for k in AGENT_FIELDS if getattr(self, k) is not None}
        return default_config(self.method, **overrides)

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v)
                for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


def parse_value(text: str):
    text = text.strip()
    if text.lower() in ("none", "null"):
        return None
    if text.lower() in ("true", "false"):
        return text.lower() == "true"
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def load_config_file(path) -> dict:
    """``key = value`` per line; ``#`` starts a comment; values are Python literals."""
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{n}: expected 'key = value'")
        key, value = line.split("=", 1)
        out[key.strip()] = parse_value(value)
    return out


def write_config_file(path, config: RunConfig) -> None:
    lines = [f"{k} = {v!r}" for k, v in config.to_dict().items()]
    Path(path).write_text("\n".join(lines) + "\n")


def build_id() -> str:
    """Content hash of the package sources, git-style short form."""
    h = hashlib.sha1()
    for p in sorted(Path(__file__).parent.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:12]


def load_objects(config: RunConfig, split: str | None = None) -> list:
    if config.objects == "simple":
        return simple_objects()
    if config.objects == "library":
        return make_library(config.library_seed)[split or config.split]
    return load_library(config.objects)


def make_env(config: RunConfig, episode_length: int | None = None, split: str | None = None):
    env_cfg = EnvConfig(task=config.task, n_object_points=config.n_object_points,
                        n_background_points=config.n_background_points,
                        max_steps=episode_length or config.episode_length,
                        upright_only=config.upright_only)
    return DoubleBinEnv(load_objects(config, split), env_cfg)


def build_agent(config: RunConfig):
    workspace = make_env(config).bins.workspace()
    return make_agent(config.method, config.agent_config(), config.seed, workspace)


# ---------------------------------------------------------------------------
# evaluation

@dataclass
class EvalReport:
    episode_length: int
    n_episodes: int
    success_rate: float
    stderr: float
    mean_reward: float
    per_object: dict = field(default_factory=dict)  # name -> (successes, episodes)
    successes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _rate(s: int, n: int):
    if n == 0:
        return float("nan"), float("nan")
    p = s / n
    return p, math.sqrt(p * (1 - p) / n)


def run_episode(agent, env: DoubleBinEnv, seed, explore=False, trace=None):
    """Greedy (or exploring) rollout. Returns ``(success, total_reward, object_name)``."""
    _, _, obs = env.reset(seed)
    total, success = 0.0, False
    for _ in range(env.config.max_steps):
        action, _ = agent.act(obs, explore)
        obs, r, done, info = env.step(action)
        total += r
        if trace is not None:
            trace.append({"kind": "step", "t": env.t, "action": action.to_dict(), "reward": r,
                          "success": info["success"]})
        if info["success"]:
            success = True
        if done:
            break
    return success, total, env.state.obj.shape.name


def evaluate(agent, config: RunConfig, episode_length: int | None = None,
             n_episodes: int | None = None, split: str | None = None) -> EvalReport:
    """Greedy success statistics over seeded episodes ``(eval_seed, j)``."""
    length = episode_length or config.episode_length
    n = config.eval_episodes if n_episodes is None else n_episodes
    env = make_env(config, length, split)
    per, succ, rewards = {}, [], []
    for j in range(n):
        ok, total, name = run_episode(agent, env, [config.eval_seed, j])
        s, c = per.get(name, (0, 0))
        per[name] = (s + int(ok), c + 1)
        succ.append(bool(ok))
        rewards.append(total)
    rate, se = _rate(sum(succ), n)
    mean_r = float(np.mean(rewards)) if rewards else float("nan")
    return EvalReport(length, n, rate, se, mean_r, per, succ)


# ---------------------------------------------------------------------------
# training

def _fmt(v):
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return repr(v) if isinstance(v, float) else str(v)


class Trainer:
    """Owns env, agent, buffer and every RNG stream of one run."""

    def __init__(self, config: RunConfig, out_dir):
        self.config = config
        self.out = Path(out_dir)
        self.env = make_env(config)
        self.agent = make_agent(config.method, config.agent_config(), config.seed,
                                self.env.bins.workspace())
        self.buffer = ReplayBuffer(config.buffer_capacity, seed=np.random.default_rng([config.seed, 2]))
        self.warm_rng = np.random.default_rng([config.seed, 3])
        self.step = 0
        self.episode = 0
        self.obs = None
        self.feats = None
        self.owed = 0.0
        self.losses = {"critic": [], "actor": [], "target": []}
        self.rows: list = []
        self.timing: list = []
        self.stopped = False
        self.cfg_hash = config.config_hash()
        self.build = build_id()

    # -- loop ----------------------------------------------------------------
    def run(self, until: int | None = None):
        c = self.config
        until = c.total_steps if until is None else min(until, c.total_steps)
        t0 = time.perf_counter()
        while self.step < until and not self.stopped:
            self.env_step()
            if self.step > c.warmup_steps:
                self.owed += c.update_ratio
                while self.owed >= 1.0:
                    self.learn()
                    self.owed -= 1.0
            if self.step % c.eval_interval == 0:
                self.eval_point(time.perf_counter() - t0)
        return self.rows

    def env_step(self):
        c = self.config
        if self.obs is None:
            _, _, self.obs = self.env.reset([c.seed, 4, self.episode])
            self.feats = self.obs.features()
        if self.step < c.warmup_steps:
            action, info = self.agent.random_act(self.obs, self.warm_rng)
        else:
            action, info = self.agent.act(self.obs, explore=True)
        nxt, r, done, step_info = self.env.step(action)
        nfeats = nxt.features()
        k, i, params = info["store"]
        # time-limit ends are not terminal for bootstrapping
        self.buffer.add(Transition(self.feats, self.obs.grasped, k, -1 if i is None else i, params,
                                   r, nfeats, nxt.grasped, bool(step_info["success"])))
        self.step += 1
        if done:
            self.episode += 1
            self.obs = self.feats = None
        else:
            self.obs, self.feats = nxt, nfeats

    def learn(self):
        batch = self.buffer.sample(self.agent.config.batch_size)
        out = self.agent.update(batch)
        vals = [out["critic_loss"], out["actor_loss"]]
        if any(v is not None and not np.isfinite(v) for v in vals):
            self._nan_dump(out, batch)
        self.losses["critic"].append(out["critic_loss"])
        if out["actor_loss"] is not None:
            self.losses["actor"].append(out["actor_loss"])
        self.losses["target"].append(out["mean_target"])

    def _nan_dump(self, out, batch):
        self.out.mkdir(parents=True, exist_ok=True)
        dump = {"step": self.step, "updates": self.agent.updates, "losses": out,
                "reward_range": [float(batch.reward.min()), float(batch.reward.max())],
                "obs_finite": bool(np.isfinite(batch.obs).all())}
        (self.out / "nan_dump.json").write_text(json.dumps(dump, indent=1, default=str))
        raise FloatingPointError(f"non-finite loss at step {self.step}; see {self.out / 'nan_dump.json'}")

    def eval_point(self, wall):
        c = self.config
        rep = evaluate(self.agent, c)
        mean = lambda xs: float(np.mean(xs)) if xs else None
        row = {"step": self.step, "updates": self.agent.updates, "buffer_size": len(self.buffer),
               "success_rate": rep.success_rate, "success_stderr": rep.stderr,
               "mean_episode_reward": rep.mean_reward, "critic_loss": mean(self.losses["critic"]),
               "actor_loss": mean(self.losses["actor"]), "mean_target": mean(self.losses["target"]),
               "config_hash": self.cfg_hash, "build_id": self.build}
        self.losses = {"critic": [], "actor": [], "target": []}
        self.rows.append(row)
        self.timing.append({"step": self.step, "wall_time": wall})
        if c.target_success is not None and rep.success_rate >= c.target_success:
            self.stopped = True
        self.write_metrics()
        self.save_checkpoint(self.out / "checkpoints" / f"step_{self.step:08d}")

    def write_metrics(self):
        self.out.mkdir(parents=True, exist_ok=True)
        with open(self.out / "metrics.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(METRICS_FIELDS)
            for r in self.rows:
                w.writerow([_fmt(r[k]) for k in METRICS_FIELDS])
        # wall-clock lives apart so metrics.csv stays reproducible
        with open(self.out / "timing.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "wall_time"])
            for r in self.timing:
                w.writerow([r["step"], repr(r["wall_time"])])

    # -- checkpoints ---------------------------------------------------------
    def save_checkpoint(self, path):
        arrays = {f"agent/{k}": v for k, v in self.agent.state_arrays().items()}
        arrays.update({f"buffer/{k}": v for k, v in self.buffer.state_arrays().items()})
        meta = {
            "config": self.config.to_dict(), "step": self.step, "episode": self.episode,
            "owed": self.owed, "stopped": self.stopped, "losses": self.losses,
            "rows": self.rows, "timing": self.timing,
            "agent": self.agent.meta(), "buffer_cursor": self.buffer.cursor,
            "buffer_rng": self.buffer.rng.bit_generator.state,
            "warm_rng": self.warm_rng.bit_generator.state,
            "env": self.env.snapshot() if self.obs is not None else None,
            "build_id": self.build,
        }
        save_arrays(path, arrays, meta)
        (Path(path).parent / "latest").write_text(Path(path).name)

    @classmethod
    def from_checkpoint(cls, path, out_dir=None) -> "Trainer":
        arrays, meta = load_arrays(path)
        try:
            config = RunConfig.from_dict(meta["config"])
        except (KeyError, TypeError, ValueError) as e:
            raise CheckpointError(f"bad config in checkpoint: {e}") from e
        tr = cls(config, out_dir or Path(path).parent.parent)
        tr.restore(arrays, meta)
        return tr

    def restore(self, arrays, meta):
        agent_arrays = {k[6:]: v for k, v in arrays.items() if k.startswith("agent/")}
        buf_arrays = {k[7:]: v for k, v in arrays.items() if k.startswith("buffer/")}
        self.agent.load_state_arrays(agent_arrays)
        self.agent.load_meta(meta["agent"])
        self.buffer.load_state_arrays(buf_arrays, meta["buffer_cursor"])
        self.buffer.rng.bit_generator.state = meta["buffer_rng"]
        self.warm_rng.bit_generator.state = meta["warm_rng"]
        self.step, self.episode, self.owed = meta["step"], meta["episode"], meta["owed"]
        self.stopped = meta["stopped"]
        self.losses, self.rows, self.timing = meta["losses"], meta["rows"], meta["timing"]
        if meta["env"] is not None:
            self.env.restore(meta["env"])
            self.obs = self.env.obs
            self.feats = self.obs.features()
        else:
            self.obs = self.feats = None


def train(config: RunConfig, out_dir=None, resume: str | None = None, until=None) -> Trainer:
    out = Path(out_dir) if out_dir is not None else output_root() / f"{config.method}_s{config.seed}"
    if resume:
        tr = Trainer.from_checkpoint(resume, out)
        if tr.config != config:
            log.warning("resuming with the checkpoint's config; the given config is ignored")
    else:
        tr = Trainer(config, out)
        out.mkdir(parents=True, exist_ok=True)
        write_config_file(out / "config.txt", config)
    tr.run(until)
    if not tr.rows:
        tr.write_metrics()
    return tr


def resolve_checkpoint(path) -> Path:
    """Accept a checkpoint dir, a run dir, or a ``checkpoints`` dir (uses ``latest``)."""
    p = Path(path)
    for cand in (p, p / "checkpoints"):
        if (cand / "manifest.json").exists():
            return cand
        if (cand / "latest").exists():
            return cand / (cand / "latest").read_text().strip()
    raise CheckpointError(f"no checkpoint found at {p}")


def load_agent(path):
    """Agent and config from a checkpoint."""
    tr = Trainer.from_checkpoint(resolve_checkpoint(path))
    return tr.agent, tr.config


# ---------------------------------------------------------------------------
# heatmaps

def heat_color(v: float):
    """Blue (0) through green (0.5) to red (1)."""
    v = float(np.clip(v, 0.0, 1.0))
    return (round(255 * v), round(255 * (1 - abs(2 * v - 1))), round(255 * (1 - v)))


INVALID_COLOR = (128, 128, 128)
MARKER_COLOR = (255, 255, 255)


def normalized_q(q: np.ndarray, valid: np.ndarray) -> np.ndarray:
    out = np.full(q.shape, np.nan)
    if valid.any():
        lo, hi = q[valid].min(), q[valid].max()
        out[valid] = 0.5 if hi == lo else (q[valid] - lo) / (hi - lo)
    return out


def write_ppm(path, image: np.ndarray) -> None:
    h, w, _ = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(np.ascontiguousarray(image, dtype=np.uint8).tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w, 3)


def export_heatmap(agent: HybridAgent, obs, out_dir, tag="step", size=128) -> dict:
    """Per-primitive CSV and top-down PPM of normalized Q; marks the greedy choice."""
    if not isinstance(agent, HybridAgent):
        raise ValueError("heatmaps need the per-point, per-primitive critic map")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    feats = obs.features()
    _, qs, mask = agent.build_maps(feats, obs.grasped)
    q = qs[0]
    sel = select_eval(q, mask)
    pts = obs.cloud.points
    lo, hi = pts[:, :2].min(axis=0), pts[:, :2].max(axis=0)
    span = np.maximum(hi - lo, 1e-9)
    pix = np.clip(((pts[:, :2] - lo) / span * (size - 4)).astype(int) + 2, 2, size - 3)
    order = np.argsort(pts[:, 2])  # draw higher points last
    files = {}
    for k in PrimitiveType:
        valid = mask[:, k]
        v = normalized_q(q[:, k], valid)
        csv_path = out / f"{tag}_{k.name.lower()}.csv"
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x", "y", "z", "q", "q_normalized", "valid", "selected"])
            for i in range(len(pts)):
                w.writerow([repr(float(pts[i, 0])), repr(float(pts[i, 1])), repr(float(pts[i, 2])),
                            repr(float(q[i, k])), _fmt(float(v[i])), int(valid[i]),
                            int((i, int(k)) == (int(sel[0]), int(sel[1])))])
        img = np.zeros((size, size, 3), dtype=np.uint8)
        for i in order:
            c = heat_color(v[i]) if valid[i] else INVALID_COLOR
            x, y = pix[i]
            img[size - 1 - y - 1:size - 1 - y + 2, x - 1:x + 2] = c
        if int(sel[1]) == int(k):
            x, y = pix[int(sel[0])]
            r = size - 1 - y
            img[max(r - 2, 0):r + 3, x] = MARKER_COLOR
            img[r, max(x - 2, 0):x + 3] = MARKER_COLOR
        ppm_path = out / f"{tag}_{k.name.lower()}.ppm"
        write_ppm(ppm_path, img)
        files[k.name] = (csv_path, ppm_path)
    return {"selected": (int(sel[0]), int(sel[1])), "files": files}


# ---------------------------------------------------------------------------
# traces

def record_episode(agent, config: RunConfig, seed, path, episode_length=None) -> dict:
    env = make_env(config, episode_length)
    steps: list = []
    ok, total, name = run_episode(agent, env, seed, trace=steps)
    header = {"kind": "header", "config": config.to_dict(), "seed": seed,
              "episode_length": env.config.max_steps, "object": name}
    write_trace(path, [header, *steps])
    return {"success": ok, "total_reward": total, "steps": len(steps)}


def replay_trace(path, tol: float = 1e-12) -> dict:
    """Re-execute a recorded episode and check every reward matches."""
    records = read_trace(path)
    if not records or records[0].get("kind") != "header":
        raise ValueError("trace has no header record")
    head = records[0]
    config = RunConfig.from_dict(head["config"])
    env = make_env(config, head["episode_length"])
    env.reset(head["seed"])
    mismatches, rewards = [], []
    for rec in records[1:]:
        a = rec["action"]
        action = PrimitiveAction(PrimitiveType[a["primitive"]], a["location"], a["params"],
                                 a["location_index"])
        _, r, _, _ = env.step(action)
        rewards.append(r)
        if abs(r - rec["reward"]) > tol:
            mismatches.append({"t": rec["t"], "recorded": rec["reward"], "replayed": r})
    return {"steps": len(rewards), "rewards": rewards, "mismatches": mismatches}
