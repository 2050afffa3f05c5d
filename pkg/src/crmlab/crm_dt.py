"""Transformer CRM over interleaved watch-time-to-go and item tokens.

Token stream for a history of n events: ``W_1, x_1, W_2, x_2, ..., W_n, x_n, W_{n+1}``
where ``W_i = w_i + ... + w_n + W_{n+1}`` and ``W_{n+1}`` is the condition (the
observed next watch time in training, the policy's value at inference).
The hidden state at the final ``W_{n+1}`` token, concatenated with a user-id
embedding, is projected and L2-normalised into the user vector.

Batches are left-padded: the real tokens of each row form a contiguous block
ending at the last column, so the read-out is always the last column.
Positions count from the first real token; padding keys are masked out.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from fractions import Fraction

import numpy as np

from crmlab.datasets import PAD_ID, Batch
from crmlab.errors import ConfigError, DataError
from crmlab.numerics.attention import TransformerBlock, block_backward, block_forward
from crmlab.numerics.layers import (
    Dense,
    Embedding,
    LayerNorm,
    ParamSet,
    l2_normalize,
    l2_normalize_backward,
    layer_norm_backward,
    layer_norm_forward,
    mlp_backward,
    mlp_forward,
    mlp_params,
)
from crmlab.numerics.losses import inbatch_softmax_loss
from crmlab.towers import ItemTower, log_bucket
from crmlab.training import LossTrace, fit

N_WTG_BUCKETS = 24


@dataclass(frozen=True)
class DecisionSequence:
    """Interleaved W_1, x_1, ..., W_n, x_n, W_{n+1}.

    W values are kept as exact rationals of the float inputs, so the
    differences W_i - W_{i+1} give back every w_i bit for bit.
    """

    wtg: tuple[Fraction, ...]  # W_1 .. W_{n+1}
    items: tuple[int, ...]  # x_1 .. x_n

    def __len__(self):
        return len(self.items)

    def watch_times(self) -> list[float]:
        """Recover w_1..w_n from the telescoping differences."""
        return [float(self.wtg[i] - self.wtg[i + 1]) for i in range(len(self.items))]

    def wtg_seconds(self) -> list[float]:
        return [float(w) for w in self.wtg]

    @property
    def condition(self) -> float:
        return float(self.wtg[-1])

    def tokens(self) -> list[tuple[str, float]]:
        out = []
        for w, x in zip(self.wtg, self.items):
            out += [("W", float(w)), ("x", x)]
        out.append(("W", self.condition))
        return out


def build_decision_sequence(item_ids, watch_times, condition_w_next: float) -> DecisionSequence:
    """W_{n+1} = condition; W_i = W_{i+1} + w_i for i = n..1."""
    if len(item_ids) != len(watch_times):
        raise DataError("item_ids and watch_times must have equal length")
    if len(item_ids) < 1:
        raise DataError("a decision sequence needs at least one event")
    if not all(math.isfinite(w) for w in [*watch_times, condition_w_next]):
        raise DataError("watch times must be finite")
    if condition_w_next < 0 or any(w < 0 for w in watch_times):
        raise DataError("watch times must be non-negative")
    wtg = [Fraction(float(condition_w_next))]
    for w in reversed(watch_times):
        wtg.append(wtg[-1] + Fraction(float(w)))
    return DecisionSequence(tuple(reversed(wtg)), tuple(int(x) for x in item_ids))


def watch_time_to_go(watch: np.ndarray, lengths: np.ndarray, condition: np.ndarray) -> np.ndarray:
    """Batched W for left-padded (B, L) watch arrays: returns (B, L + 1), zeros at padding.

    Column L is W_{n+1}; column j < L holds W for the event in slot j.
    """
    watch = np.asarray(watch, dtype=np.float64)
    b, L = watch.shape
    out = np.zeros((b, L + 1))
    out[:, L] = condition
    # reverse cumulative sum; padded slots contribute zero
    out[:, :L] = np.cumsum(watch[:, ::-1], axis=1)[:, ::-1] + out[:, L:L + 1]
    pad = np.arange(L)[None, :] < (L - np.asarray(lengths))[:, None]
    out[:, :L][pad] = 0.0
    return out


@dataclass(frozen=True)
class DtConfig:
    n_items: int
    n_users: int
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 2
    max_seq_len: int = 32
    n_wtg_buckets: int = N_WTG_BUCKETS
    tau: float = 1.0
    user_dim: int = 8
    output_dim: int = 32
    item_hidden: tuple[int, ...] = (64,)
    share_item_embeddings: bool = False
    temperature: float = 1.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "item_hidden", tuple(int(h) for h in self.item_hidden))
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")

    @property
    def max_context(self) -> int:
        return 2 * self.max_seq_len + 1


class DecisionTransformerCRM:
    variant = "crm_dt"
    uses_condition = True

    def __init__(self, config: DtConfig, dtype=np.float32):
        self.config = config
        c = config
        rng = np.random.default_rng(c.seed)
        self.item_tower = ItemTower(c.n_items, c.d_model, c.item_hidden, c.output_dim, rng, dtype)
        if c.share_item_embeddings:
            self.token_items = self.item_tower.embeddings
        else:
            self.token_items = Embedding.init("dt.items", c.n_items + 1, c.d_model, rng, pad_index=PAD_ID, dtype=dtype)
        self.wtg_embeddings = Embedding.init("dt.wtg_buckets", c.n_wtg_buckets, c.d_model, rng, dtype=dtype)
        self.positions = Embedding.init("dt.positions", c.max_context, c.d_model, rng, dtype=dtype)
        self.blocks = [TransformerBlock.init(f"dt.block{i}", c.d_model, c.n_heads, rng, dtype=dtype)
                       for i in range(c.n_layers)]
        self.ln_f = LayerNorm.init("dt.ln_f", c.d_model, dtype)
        self.user_embeddings = (
            Embedding.init("dt.users", c.n_users, c.user_dim, rng, dtype=dtype) if c.user_dim > 0 else None
        )
        self.projection = [Dense.init("dt.proj", c.d_model + max(c.user_dim, 0), c.output_dim, "identity", rng, dtype)]
        self.params = ParamSet()
        seen = set()
        parts = self.item_tower.params() + self.token_items.params() + self.wtg_embeddings.params()
        parts += self.positions.params()
        for blk in self.blocks:
            parts += blk.params()
        parts += self.ln_f.params() + mlp_params(self.projection)
        if self.user_embeddings is not None:
            parts += self.user_embeddings.params()
        for p in parts:
            if id(p) not in seen:
                seen.add(id(p))
                self.params.add(p)

    @property
    def output_dim(self) -> int:
        return self.config.output_dim

    # --- token assembly ---------------------------------------------------------------

    def _tokens(self, item_ids, watch_times, conditions):
        ids = np.asarray(item_ids)
        b, L = ids.shape
        if L > self.config.max_seq_len:
            raise DataError(
                f"history of {L} events exceeds context: max {self.config.max_seq_len} events "
                f"({self.config.max_context} tokens)"
            )
        mask_events = ids != PAD_ID
        lengths = mask_events.sum(axis=1)
        if np.any(lengths == 0):
            raise DataError("history contains no real items (all padding)")
        if np.any(np.asarray(watch_times) < 0) or np.any(np.asarray(conditions) < 0):
            raise DataError("watch times and conditions must be non-negative")
        # left padding must be contiguous for the position scheme
        if np.any(mask_events[:, :-1] & ~mask_events[:, 1:]):
            raise DataError("histories must be left-padded")
        wtg = watch_time_to_go(watch_times, lengths, np.asarray(conditions, dtype=np.float64).reshape(-1))
        T = 2 * L + 1
        item_cols = np.arange(L) * 2 + 1
        w_cols = np.append(np.arange(L) * 2, 2 * L)
        start = 2 * (L - lengths)  # first real token column per row
        col = np.arange(T)[None, :]
        valid = col >= start[:, None]
        pos = np.where(valid, col - start[:, None], 0)
        wb = log_bucket(wtg, self.config.n_wtg_buckets, self.config.tau)
        return ids, wb, pos, valid, item_cols, w_cols

    def embed_tokens(self, item_ids, watch_times, conditions):
        """Token input matrix (B, 2L+1, d_model) and its validity mask (B, 2L+1)."""
        ids, wb, pos, valid, item_cols, w_cols = self._tokens(item_ids, watch_times, conditions)
        b, L = ids.shape
        x = np.zeros((b, 2 * L + 1, self.config.d_model), dtype=self.positions.table.value.dtype)
        x[:, item_cols] = self.token_items.lookup(ids, allow_pad=True)
        x[:, w_cols] = self.wtg_embeddings.lookup(wb)
        x += self.positions.lookup(pos)
        x[~valid] = 0
        return x, valid, dict(ids=ids, wb=wb, pos=pos, valid=valid, item_cols=item_cols, w_cols=w_cols, T=2 * L + 1)

    def encode_tokens(self, x, valid, cache: dict | None = None, last_only: bool = False):
        """Causal transformer stack plus final layer norm over embedded tokens."""
        bcaches = []
        h = x
        for i, blk in enumerate(self.blocks):
            bc = {} if cache is not None else None
            top = last_only and i == len(self.blocks) - 1
            h = block_forward(h, blk, key_mask=valid, cache=bc, last_only=top)
            bcaches.append(bc)
        lncache = [] if cache is not None else None
        out = layer_norm_forward(h, self.ln_f, lncache)
        if cache is not None:
            cache.update(blocks=bcaches, ln=lncache)
        return out

    def hidden_states(self, item_ids, watch_times, conditions, cache: dict | None = None, last_only: bool = False):
        """Final-layer-normed hidden states, shape (B, 2L+1, d_model).

        ``last_only`` evaluates the top block at the final token only and
        returns shape (B, 1, d_model); lower blocks still see every token.
        """
        x, valid, info = self.embed_tokens(item_ids, watch_times, conditions)
        out = self.encode_tokens(x, valid, cache, last_only)
        if cache is not None:
            cache.update(info)
        return out

    def user_vectors(self, item_ids, watch_times, conditions, user_ids=None, cache: dict | None = None):
        if conditions is None:
            raise DataError("the transformer CRM always needs a condition value")
        hcache = {} if cache is not None else None
        hid = self.hidden_states(item_ids, watch_times, conditions, hcache, last_only=True)
        readout = hid[:, -1]
        if self.user_embeddings is not None:
            if user_ids is None:
                raise DataError("user ids are required when user_dim > 0")
            feat = np.concatenate([readout, self.user_embeddings.lookup(np.asarray(user_ids))], axis=1)
        else:
            feat = readout
        mcache = [] if cache is not None else None
        z = mlp_forward(feat, self.projection, mcache)
        u, norm = l2_normalize(z)
        if cache is not None:
            cache.update(h=hcache, hid_shape=hid.shape, user_ids=user_ids, mlp=mcache, u=u, norm=norm)
        return u

    def user_forward(self, sequence: DecisionSequence, user_id: int | None = None):
        """User vector for one decision sequence (``dt_user_forward``)."""
        watch = sequence.watch_times()
        uids = None if user_id is None else np.array([user_id])
        return self.user_vectors(np.array([sequence.items]), np.array([watch]),
                                 np.array([sequence.condition]), uids)[0]

    def sequence_hidden(self, sequence: DecisionSequence) -> np.ndarray:
        """(2n+1, d_model) hidden states for one sequence."""
        return self.hidden_states(np.array([sequence.items]), np.array([sequence.watch_times()]),
                                  np.array([sequence.condition]))[0]

    def item_vectors(self, item_ids=None):
        if item_ids is None:
            item_ids = np.arange(1, self.config.n_items + 1)
        return self.item_tower.forward(item_ids)

    def item_forward(self, item_id: int):
        return self.item_tower.forward(np.array([item_id]))[0]

    def batch_user_vectors(self, batch: Batch, conditions):
        return self.user_vectors(batch.item_ids, batch.watch_times, conditions, batch.user_ids)

    # --- training ---------------------------------------------------------------------

    def loss_and_grad(self, batch: Batch) -> float:
        ucache, icache = {}, {}
        u = self.user_vectors(batch.item_ids, batch.watch_times, batch.target_watch, batch.user_ids, ucache)
        v = self.item_tower.forward(batch.targets, icache)
        loss, du, dv = inbatch_softmax_loss(u, v, self.config.temperature)
        self.item_tower.backward(dv, icache)
        self._user_backward(du, ucache)
        return loss

    def _user_backward(self, du, cache):
        d = self.config.d_model
        dz = l2_normalize_backward(du, cache["u"], cache["norm"])
        dfeat = mlp_backward(dz, self.projection, cache["mlp"])
        if self.user_embeddings is not None:
            self.user_embeddings.backward(np.asarray(cache["user_ids"]), dfeat[:, d:])
        dhid = np.zeros(cache["hid_shape"], dtype=dfeat.dtype)
        dhid[:, -1] = dfeat[:, :d]
        hc = cache["h"]
        dh = layer_norm_backward(dhid, self.ln_f, hc["ln"])
        for blk, bc in zip(reversed(self.blocks), reversed(hc["blocks"])):
            dh = block_backward(dh, blk, bc)
        dh[~hc["valid"]] = 0
        self.positions.backward(hc["pos"][hc["valid"]], dh[hc["valid"]])
        self.token_items.backward(hc["ids"], dh[:, hc["item_cols"]])
        self.wtg_embeddings.backward(hc["wb"], dh[:, hc["w_cols"]])

    # --- persistence ------------------------------------------------------------------

    def metadata(self) -> dict[str, str]:
        return {"variant": self.variant, "config": json.dumps(asdict(self.config), sort_keys=True)}

    @classmethod
    def from_metadata(cls, meta: dict[str, str]):
        return cls(DtConfig(**json.loads(meta["config"])))


def dt_train(model: DecisionTransformerCRM, batches, epochs: int, lr: float, optimizer: str = "sgd") -> LossTrace:
    """Teacher-forced training: each example's observed next watch time is W_{n+1}."""
    return fit(model, batches, epochs, lr, optimizer)
