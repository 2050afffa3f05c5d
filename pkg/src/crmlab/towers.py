"""Two-tower retriever and the condition-feature (DNN) CRM variant.

User tower input is ``mean(item emb of history) ++ mean(watch-bucket emb of
history) ++ condition-bucket emb`` where the condition slot is all zeros when
no condition is supplied. Both towers end in L2 normalisation, so scores are
cosines.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from crmlab.datasets import PAD_ID, Batch
from crmlab.errors import ConfigError, DataError
from crmlab.numerics.layers import (
    Dense,
    Embedding,
    ParamSet,
    l2_normalize,
    l2_normalize_backward,
    mlp_backward,
    mlp_forward,
    mlp_params,
)
from crmlab.numerics.losses import inbatch_softmax_loss
from crmlab.training import LossTrace, fit

N_CONDITION_BUCKETS = 16
CONDITION_MODES = ("off", "teacher_forced")


def log_bucket(seconds, n_buckets: int = N_CONDITION_BUCKETS, tau: float = 1.0):
    """floor(log2(1 + s / tau)) clamped to [0, n_buckets - 1]."""
    s = np.maximum(np.asarray(seconds, dtype=np.float64), 0.0)
    b = np.floor(np.log2(1.0 + s / tau)).astype(np.int64)
    return np.clip(b, 0, n_buckets - 1)


@dataclass(frozen=True)
class ConditionFeature:
    raw_watch_time: float
    bucket_id: int

    @classmethod
    def from_seconds(cls, seconds: float, n_buckets: int = N_CONDITION_BUCKETS, tau: float = 1.0):
        return cls(float(seconds), int(log_bucket(seconds, n_buckets, tau)))


def _mlp(name, dims, rng, dtype):
    layers = []
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        act = "relu" if i < len(dims) - 2 else "identity"
        layers.append(Dense.init(f"{name}.{i}", a, b, act, rng, dtype))
    return layers


class ItemTower:
    """Item id -> embedding -> MLP -> unit vector. Shared by every model variant."""

    def __init__(self, n_items, emb_dim, hidden, output_dim, rng, dtype=np.float32, prefix="item"):
        self.embeddings = Embedding.init(f"{prefix}.embeddings", n_items + 1, emb_dim, rng, pad_index=PAD_ID, dtype=dtype)
        self.mlp = _mlp(f"{prefix}.mlp", [emb_dim, *hidden, output_dim], rng, dtype)

    def params(self):
        return self.embeddings.params() + mlp_params(self.mlp)

    def forward(self, item_ids, cache: dict | None = None):
        ids = np.asarray(item_ids)
        x = self.embeddings.lookup(ids)
        mcache = [] if cache is not None else None
        z = mlp_forward(x, self.mlp, mcache)
        v, norm = l2_normalize(z)
        if cache is not None:
            cache.update(ids=ids, mlp=mcache, v=v, norm=norm)
        return v

    def backward(self, dv, cache):
        dz = l2_normalize_backward(dv, cache["v"], cache["norm"])
        dx = mlp_backward(dz, self.mlp, cache["mlp"])
        self.embeddings.backward(cache["ids"], dx)


@dataclass(frozen=True)
class TowerConfig:
    n_items: int
    emb_dim: int = 32
    hidden: tuple[int, ...] = (64,)
    output_dim: int = 32
    n_buckets: int = N_CONDITION_BUCKETS
    tau: float = 1.0
    temperature: float = 1.0
    condition_mode: str = "off"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.condition_mode not in CONDITION_MODES:
            raise ConfigError(f"condition_mode must be one of {CONDITION_MODES}, got {self.condition_mode!r}")
        if self.n_items < 1 or self.emb_dim < 1 or self.output_dim < 1:
            raise ConfigError("n_items, emb_dim and output_dim must be positive")


class TwoTowerModel:
    """Baseline (``condition_mode='off'``) or DNN CRM (``'teacher_forced'``)."""

    def __init__(self, config: TowerConfig, dtype=np.float32):
        self.config = config
        rng = np.random.default_rng(config.seed)
        e = config.emb_dim
        self.item_tower = ItemTower(config.n_items, e, config.hidden, config.output_dim, rng, dtype)
        # history items are encoded with the item tower's own table
        self.item_embeddings = self.item_tower.embeddings
        self.watch_embeddings = Embedding.init("user.watch_buckets", config.n_buckets, e, rng, dtype=dtype)
        self.condition_embeddings = Embedding.init("user.condition_buckets", config.n_buckets, e, rng, dtype=dtype)
        self.user_mlp = _mlp("user.mlp", [3 * e, *config.hidden, config.output_dim], rng, dtype)
        self.params = ParamSet()
        self.params.add(
            *self.watch_embeddings.params(),
            *self.condition_embeddings.params(),
            *mlp_params(self.user_mlp),
            *self.item_tower.params(),
        )

    @property
    def variant(self) -> str:
        return "crm_dnn" if self.config.condition_mode == "teacher_forced" else "baseline"

    @property
    def uses_condition(self) -> bool:
        return self.config.condition_mode == "teacher_forced"

    @property
    def output_dim(self) -> int:
        return self.config.output_dim

    # --- forward ----------------------------------------------------------------------

    def user_vectors(self, item_ids, watch_times, conditions=None, cache: dict | None = None):
        """Batched user tower over left-padded (B, L) history arrays.

        ``conditions`` holds seconds per row, or ``None`` for the zero slot.
        """
        ids = np.asarray(item_ids)
        watch = np.asarray(watch_times, dtype=np.float32)
        if ids.ndim != 2 or watch.shape != ids.shape:
            raise DataError(f"history arrays must be (B, L) and aligned, got {ids.shape} and {watch.shape}")
        mask = ids != PAD_ID
        counts = mask.sum(axis=1)
        if np.any(counts == 0):
            raise DataError("history contains no real items (all padding)")
        dtype = self.item_embeddings.table.value.dtype
        w = (mask / counts[:, None]).astype(dtype)  # pooling weights
        items = self.item_embeddings.lookup(ids, allow_pad=True)
        wb = log_bucket(watch, self.config.n_buckets, self.config.tau)
        wemb = self.watch_embeddings.lookup(wb)
        pooled_items = np.einsum("bl,bld->bd", w, items)
        pooled_watch = np.einsum("bl,bld->bd", w, wemb)
        if conditions is None:
            cb = None
            cond = np.zeros_like(pooled_items)
        else:
            cb = log_bucket(np.asarray(conditions).reshape(-1), self.config.n_buckets, self.config.tau)
            if cb.shape[0] != ids.shape[0]:
                raise DataError("one condition value per history row is required")
            cond = self.condition_embeddings.lookup(cb)
        feat = np.concatenate([pooled_items, pooled_watch, cond], axis=1)
        mcache = [] if cache is not None else None
        z = mlp_forward(feat, self.user_mlp, mcache)
        u, norm = l2_normalize(z)
        if cache is not None:
            cache.update(ids=ids, wb=wb, w=w, cb=cb, mlp=mcache, u=u, norm=norm)
        return u

    def user_forward(self, item_ids, watch_times, condition: ConditionFeature | float | None = None):
        """User vector for a single history (oldest first)."""
        if len(item_ids) == 0:
            raise DataError("empty history")
        if isinstance(condition, ConditionFeature):
            condition = condition.raw_watch_time
        conds = None if condition is None else np.array([condition], dtype=np.float64)
        return self.user_vectors(np.asarray([item_ids]), np.asarray([watch_times]), conds)[0]

    def item_vectors(self, item_ids=None):
        """Item tower output; default is every real item, row r is item id r+1."""
        if item_ids is None:
            item_ids = np.arange(1, self.config.n_items + 1)
        return self.item_tower.forward(item_ids)

    def item_forward(self, item_id: int):
        return self.item_tower.forward(np.array([item_id]))[0]

    def batch_user_vectors(self, batch: Batch, conditions=None):
        if not self.uses_condition:
            conditions = None
        return self.user_vectors(batch.item_ids, batch.watch_times, conditions)

    # --- training ---------------------------------------------------------------------

    def loss_and_grad(self, batch: Batch) -> float:
        ucache, icache = {}, {}
        conds = batch.target_watch if self.uses_condition else None
        u = self.user_vectors(batch.item_ids, batch.watch_times, conds, ucache)
        v = self.item_tower.forward(batch.targets, icache)
        loss, du, dv = inbatch_softmax_loss(u, v, self.config.temperature)
        self.item_tower.backward(dv, icache)
        self._user_backward(du, ucache)
        return loss

    def _user_backward(self, du, cache):
        e = self.config.emb_dim
        dz = l2_normalize_backward(du, cache["u"], cache["norm"])
        dfeat = mlp_backward(dz, self.user_mlp, cache["mlp"])
        d_items, d_watch, d_cond = dfeat[:, :e], dfeat[:, e:2 * e], dfeat[:, 2 * e:]
        w = cache["w"]
        self.item_embeddings.backward(cache["ids"], w[:, :, None] * d_items[:, None, :])
        self.watch_embeddings.backward(cache["wb"], w[:, :, None] * d_watch[:, None, :])
        if cache["cb"] is not None:
            self.condition_embeddings.backward(cache["cb"], d_cond)

    # --- persistence ------------------------------------------------------------------

    def metadata(self) -> dict[str, str]:
        return {"variant": self.variant, "config": json.dumps(asdict(self.config), sort_keys=True)}

    @classmethod
    def from_metadata(cls, meta: dict[str, str]):
        return cls(TowerConfig(**json.loads(meta["config"])))


def train(model: TwoTowerModel, batches, epochs: int, lr: float, condition_mode: str | None = None,
          optimizer: str = "sgd") -> LossTrace:
    """Train with in-batch softmax. ``condition_mode`` must agree with the model's
    configuration when given; 'teacher_forced' feeds each example's observed
    next watch time as the condition."""
    if condition_mode is not None and condition_mode != model.config.condition_mode:
        raise ConfigError(
            f"condition_mode {condition_mode!r} does not match model configured for {model.config.condition_mode!r}"
        )
    return fit(model, batches, epochs, lr, optimizer)

