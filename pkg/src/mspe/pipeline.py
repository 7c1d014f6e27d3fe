"""Desk-scale experiment wiring shared by the CLI and the acceptance suite:
model initialisation, train/test splits of the shapes data, and the
pretrain -> multi-scale fine-tune -> evaluate chain."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import SyntheticShapesSpec, generate_synthetic
from .evaluate import ModelState
from .patch_embed import bank_from_pretrained
from .train import TrainConfig, mspe_train, pretrain
from .vit import ViTParams


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 32
    depth: int = 2
    heads: int = 4
    grid: int = 4
    num_classes: int = 4
    channels: int = 1
    base_resolution: int = 32

    @property
    def patch(self) -> int:
        if self.base_resolution % self.grid:
            raise ValueError("base resolution must be a multiple of the token grid")
        return self.base_resolution // self.grid


# pretraining a transformer from scratch needs a far larger step than the
# 1e-3 used for fine-tuning the bank
PRETRAIN = TrainConfig(learning_rate=0.05, epochs=80)
MSPE = TrainConfig(learning_rate=0.01, epochs=5)
TRAIN_SAMPLES_PER_CLASS = 1000
TEST_SAMPLES_PER_CLASS = 250


def init_model(model: ModelConfig, seed: int, dtype=np.float32):
    """Random encoder plus a single (patch x patch x C x D) embedding kernel."""
    rng = np.random.default_rng((seed, 0))
    params = ViTParams.init(rng, model.dim, model.depth, model.heads, model.grid, model.num_classes, dtype=dtype)
    fan_in = model.patch * model.patch * model.channels
    kernel = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(model.patch, model.patch, model.channels, model.dim))
    return params, kernel.astype(dtype), np.zeros(model.dim, dtype=dtype)


def synthetic_split(data_seed: int, split: str, samples_per_class: int, num_classes: int = 4, **spec_kw):
    """Train and test splits use disjoint generator seeds derived from ``data_seed``."""
    offset = {"train": 0, "test": 1}[split]
    spec = SyntheticShapesSpec(num_classes=num_classes, samples_per_class=samples_per_class,
                               seed=2 * int(data_seed) + offset, **spec_kw)
    return generate_synthetic(spec)


def run_pipeline(seed: int, model: ModelConfig = ModelConfig(), pretrain_cfg: TrainConfig = PRETRAIN,
                 mspe_cfg: TrainConfig = MSPE, train_samples: int = TRAIN_SAMPLES_PER_CLASS):
    """Pretrain, initialise the bank from the pretrained kernel, fine-tune it.

    Returns (ModelState with the trained bank, initial bank, pretrain history,
    mspe history).
    """
    train = synthetic_split(seed, "train", train_samples, model.num_classes)
    params, kernel, bias = init_model(model, seed)
    params, kernel, bias, h_pre = pretrain(
        params, kernel, bias, train, pretrain_cfg.with_(seed=seed, base_resolution=model.base_resolution))
    bank0 = bank_from_pretrained(kernel, bias, model.grid, mspe_cfg.K)
    bank, h_mspe = mspe_train(params, bank0, train, mspe_cfg.with_(seed=seed, base_resolution=model.base_resolution))
    return ModelState(params, kernel, bias, bank, model.base_resolution), bank0, h_pre, h_mspe
