"""Variant registry: construct, train, save and load the three retrievers."""

from __future__ import annotations

from crmlab.crm_dt import DecisionTransformerCRM, DtConfig, dt_train
from crmlab.datasets import make_batches
from crmlab.errors import ConfigError
from crmlab.numerics.checkpoint import load_checkpoint, save_checkpoint
from crmlab.towers import TowerConfig, TwoTowerModel, train

VARIANTS = ("baseline", "crm_dnn", "crm_dt")


def build_model(variant: str, model_cfg: dict, n_items: int, n_users: int, max_seq_len: int, seed: int):
    if variant in ("baseline", "crm_dnn"):
        return TwoTowerModel(TowerConfig(
            n_items=n_items,
            emb_dim=model_cfg["dim"],
            hidden=tuple(model_cfg["hidden"]),
            output_dim=model_cfg["output_dim"],
            temperature=model_cfg["temperature"],
            condition_mode="teacher_forced" if variant == "crm_dnn" else "off",
            seed=seed,
        ))
    if variant == "crm_dt":
        return DecisionTransformerCRM(DtConfig(
            n_items=n_items,
            n_users=n_users,
            d_model=model_cfg["dim"],
            n_layers=model_cfg["n_layers"],
            n_heads=model_cfg["n_heads"],
            max_seq_len=max_seq_len,
            user_dim=model_cfg["user_dim"],
            output_dim=model_cfg["output_dim"],
            item_hidden=tuple(model_cfg["hidden"]),
            share_item_embeddings=model_cfg["share_item_embeddings"],
            temperature=model_cfg["temperature"],
            seed=seed,
        ))
    raise ConfigError(f"unknown variant {variant!r}; expected one of {VARIANTS}")


def train_model(model, train_examples, batch_size: int, max_seq_len: int, epochs: int, lr: float,
                optimizer: str, seed: int):
    def epoch_batches(epoch):
        return make_batches(train_examples, batch_size, seed + epoch, max_seq_len)

    if isinstance(model, DecisionTransformerCRM):
        return dt_train(model, epoch_batches, epochs, lr, optimizer)
    return train(model, epoch_batches, epochs, lr, model.config.condition_mode, optimizer)


def save_model(model, path):
    save_checkpoint(path, model.params.state(), model.metadata())


def load_model(path):
    tensors, meta = load_checkpoint(path)
    variant = meta.get("variant")
    if variant in ("baseline", "crm_dnn"):
        model = TwoTowerModel.from_metadata(meta)
    elif variant == "crm_dt":
        model = DecisionTransformerCRM.from_metadata(meta)
    else:
        raise ValueError(f"{path}: checkpoint has no known variant tag (got {variant!r})")
    model.params.load_state(tensors)
    return model
