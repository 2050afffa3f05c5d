"""Synthetic short-video world with a ground-truth watch-time oracle.

Users and items carry latent vectors; the expected watch time of a pair is
``duration(item) * sigmoid(alpha * <u, v> + beta)``. Sessions pick items by a
softmax over affinity within a random candidate sample and draw watch times
from a normal around the oracle value, clamped to ``[0, duration]``.

Item ids are 1-based (id 0 is reserved for padding downstream); user ids are
0-based. The ``step`` of an event is its position in the user's whole log,
so sorting a user's events by step is chronological across sessions.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from crmlab.errors import ConfigError
from crmlab.numerics.checkpoint import load_checkpoint, save_checkpoint


@dataclass(frozen=True)
class WorldConfig:
    n_users: int = 500
    n_items: int = 2000
    latent_dim: int = 16
    alpha: float = 2.0
    beta: float = 0.0
    min_duration: float = 5.0
    max_duration: float = 300.0
    seed: int = 0

    def validate(self):
        if self.n_users <= 0 or self.n_items <= 0 or self.latent_dim <= 0:
            raise ConfigError("n_users, n_items and latent_dim must be positive")
        if not 0 < self.min_duration <= self.max_duration:
            raise ConfigError("durations must satisfy 0 < min_duration <= max_duration")


@dataclass(frozen=True)
class SessionConfig:
    sessions_per_user: int = 4
    session_len: int = 10
    temperature: float = 0.1
    candidate_size: int = 500
    sigma: float = 0.15
    # strength of the time-of-day preference for long items, in logit units
    daily_amplitude: float = 1.0
    # sessions per simulated day; 0 spreads all of a user's sessions over one day
    sessions_per_day: int = 0
    seed: int = 0

    def validate(self):
        if self.session_len < 2:
            raise ConfigError("session_len must be >= 2")
        if self.sessions_per_user < 1:
            raise ConfigError("sessions_per_user must be >= 1")
        if self.temperature <= 0 or self.candidate_size < 1 or self.sigma < 0:
            raise ConfigError("temperature > 0, candidate_size >= 1 and sigma >= 0 required")
        if self.sessions_per_day < 0:
            raise ConfigError("sessions_per_day must be >= 0")

    @property
    def day_length(self) -> int:
        return self.sessions_per_day or self.sessions_per_user


@dataclass(frozen=True)
class InteractionEvent:
    user_id: int
    item_id: int
    watch_time: float
    step: int


@dataclass(eq=False)
class SimWorld:
    config: WorldConfig
    user_latents: np.ndarray  # (n_users, latent_dim) float32
    item_latents: np.ndarray  # (n_items, latent_dim) float32; row i is item id i+1
    item_durations: np.ndarray  # (n_items,) float32 seconds
    _z_log_duration: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        logd = np.log(self.item_durations.astype(np.float64))
        spread = logd.std()
        self._z_log_duration = (logd - logd.mean()) / (spread if spread > 0 else 1.0)

    @property
    def n_users(self) -> int:
        return self.config.n_users

    @property
    def n_items(self) -> int:
        return self.config.n_items

    def duration(self, item_ids) -> np.ndarray:
        return self.item_durations[self._item_rows(item_ids)].astype(np.float64)

    def _item_rows(self, item_ids):
        ids = np.asarray(item_ids)
        if ids.size and (ids.min() < 1 or ids.max() > self.n_items):
            raise IndexError(f"item id out of range [1, {self.n_items}]")
        return ids - 1

    def _user_rows(self, user_ids):
        ids = np.asarray(user_ids)
        if ids.size and (ids.min() < 0 or ids.max() >= self.n_users):
            raise IndexError(f"user id out of range [0, {self.n_users})")
        return ids


def build_world(config: WorldConfig) -> SimWorld:
    config.validate()
    rng = np.random.default_rng(config.seed)
    scale = 1.0 / np.sqrt(config.latent_dim)
    users = (rng.standard_normal((config.n_users, config.latent_dim)) * scale).astype(np.float32)
    items = (rng.standard_normal((config.n_items, config.latent_dim)) * scale).astype(np.float32)
    lo, hi = np.log(config.min_duration), np.log(config.max_duration)
    durations = np.exp(rng.uniform(lo, hi, size=config.n_items)).astype(np.float32)
    np.clip(durations, np.float32(config.min_duration), np.float32(config.max_duration), out=durations)
    return SimWorld(config, users, items, durations)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def affinity(world: SimWorld, user_ids, item_ids) -> np.ndarray:
    """Elementwise <u, v> for broadcastable id arrays, in float64."""
    u = world.user_latents[world._user_rows(user_ids)].astype(np.float64)
    v = world.item_latents[world._item_rows(item_ids)].astype(np.float64)
    return (u * v).sum(axis=-1)


def expected_watch_time(world: SimWorld, user_id, item_id):
    """Ground-truth mean watch time in seconds. Accepts scalars or broadcastable arrays."""
    a = affinity(world, user_id, item_id)
    c = world.config
    out = world.duration(item_id) * _sigmoid(c.alpha * a + c.beta)
    return float(out) if np.ndim(out) == 0 else out


def expected_watch_matrix(world: SimWorld, user_ids, item_ids) -> np.ndarray:
    """(len(user_ids), len(item_ids)) oracle table."""
    u = world.user_latents[world._user_rows(user_ids)].astype(np.float64)
    v = world.item_latents[world._item_rows(item_ids)].astype(np.float64)
    c = world.config
    return world.duration(item_ids)[None, :] * _sigmoid(c.alpha * (u @ v.T) + c.beta)


def session_hour(session_index: int, sessions_per_day: int) -> float:
    """Simulated hour of day at which a session starts."""
    return 24.0 * (session_index % sessions_per_day) / sessions_per_day


def daily_long_preference(hour: float, amplitude: float) -> float:
    # peaks in the evening (21:00), bottoms out in the morning
    return amplitude * np.cos(2 * np.pi * (hour - 21.0) / 24.0)


def user_rng(seed: int, user_id: int) -> np.random.Generator:
    return np.random.default_rng([seed, user_id])


def generate_user_sessions(world: SimWorld, user_id: int, cfg: SessionConfig) -> list[InteractionEvent]:
    rng = user_rng(cfg.seed, user_id)
    u = world.user_latents[user_id].astype(np.float64)
    latents = world.item_latents.astype(np.float64)
    zdur = world._z_log_duration
    durations = world.item_durations.astype(np.float64)
    n = world.n_items
    size = min(cfg.candidate_size, n)
    events = []
    step = 0
    for s in range(cfg.sessions_per_user):
        pref = daily_long_preference(session_hour(s, cfg.day_length), cfg.daily_amplitude)
        for _ in range(cfg.session_len):
            cand = rng.choice(n, size=size, replace=False) if size < n else np.arange(n)
            aff = latents[cand] @ u
            logits = aff / cfg.temperature + pref * zdur[cand]
            # Gumbel-max draws from softmax(logits)
            pick = cand[np.argmax(logits + rng.gumbel(size=size))]
            dur = durations[pick]
            mean = expected_watch_time(world, user_id, int(pick) + 1)
            watch = mean if cfg.sigma == 0 else rng.normal(mean, cfg.sigma * dur)
            watch = float(min(max(watch, 0.0), dur))
            events.append(InteractionEvent(int(user_id), int(pick) + 1, watch, step))
            step += 1
    return events


def generate_sessions(world: SimWorld, cfg: SessionConfig, user_ids=None) -> list[InteractionEvent]:
    """Event log for ``user_ids`` (default: every user), sorted by (user, step).

    Each user draws from its own RNG stream derived from ``(cfg.seed, user_id)``,
    so any subset or ordering of users reproduces the same per-user events.
    """
    cfg.validate()
    users = range(world.n_users) if user_ids is None else sorted(int(u) for u in user_ids)
    events: list[InteractionEvent] = []
    for uid in users:
        world._user_rows(uid)
        events.extend(generate_user_sessions(world, uid, cfg))
    return events


# --- persistence ----------------------------------------------------------------------

def save_world(world: SimWorld, path):
    """Write ``<path>`` (checkpoint) and ``<path>.meta.txt`` (plain key=value block)."""
    path = Path(path)
    meta = {f.name: str(getattr(world.config, f.name)) for f in fields(WorldConfig)}
    save_checkpoint(
        path,
        {
            "user_latents": world.user_latents,
            "item_latents": world.item_latents,
            "item_durations": world.item_durations,
        },
        {"kind": "world", **meta},
    )
    text = "".join(f"{k}={v}\n" for k, v in meta.items())
    Path(f"{path}.meta.txt").write_text(text, encoding="utf-8")


def load_world(path) -> SimWorld:
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "world":
        raise ValueError(f"{path} is not a world checkpoint")
    kwargs = {}
    for f in fields(WorldConfig):
        kwargs[f.name] = (int if f.type in ("int", int) else float)(meta[f.name])
    config = WorldConfig(**kwargs)
    return SimWorld(
        config,
        tensors["user_latents"],
        tensors["item_latents"],
        tensors["item_durations"].reshape(-1),
    )


def world_config_dict(config: WorldConfig) -> dict:
    return asdict(config)
