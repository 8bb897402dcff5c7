"""Per-seed experiment pipeline: pretrain once, then run each phase-2 method."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .data import Dataset, FewShotBudget, SyntheticSpec, generate_synthetic, split_pair, subsample_labeled
from .nn import EncoderConfig, YNetwork, init_parameters
from .training import (
    Aggregate,
    TrainConfig,
    baseline_finetune,
    baseline_target_only,
    evaluate,
    pretrain_source,
    run_seed_sweep,
    train_transfer,
)

logger = logging.getLogger(__name__)

METHODS = ("transfer", "target-only", "finetune")


@dataclass
class DataSplits:
    """Modality A (source) and B (target) datasets per split."""

    source: dict  # split -> Dataset
    target: dict

    @property
    def num_classes(self) -> int:
        return self.source["train"].num_classes

    @classmethod
    def from_synthetic(cls, spec: SyntheticSpec) -> "DataSplits":
        a, b = generate_synthetic(spec)
        parts = split_pair(a, b, spec.seed)
        return cls({s: p[0] for s, p in parts.items()}, {s: p[1] for s, p in parts.items()})


@dataclass
class ExperimentConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    budget: FewShotBudget = field(default_factory=lambda: FewShotBudget(32))
    methods: tuple = METHODS
    tied_init: bool = True


def pretrained_network(data: DataSplits, exp: ExperimentConfig, seed: int) -> tuple[YNetwork, list]:
    cfg = replace(exp.train, seed=seed)
    net = init_parameters(exp.encoder, data.num_classes, seed, tied=exp.tied_init)
    return pretrain_source(net, data.source["train"], data.source["val"], cfg)


def run_methods(
    data: DataSplits,
    exp: ExperimentConfig,
    seed: int,
    pretrained: Optional[YNetwork] = None,
) -> dict:
    """Final test accuracies of each requested method for one seed."""
    cfg = replace(exp.train, seed=seed)
    out: dict = {}
    needs_pretrain = any(m in ("transfer", "finetune") for m in exp.methods)
    if needs_pretrain and pretrained is None:
        pretrained, _ = pretrained_network(data, exp, seed)
    if pretrained is not None:
        out["source_test_accuracy"] = evaluate(pretrained, data.source["test"], "source").accuracy
    target_train = data.target["train"]
    labeled, unlabeled = subsample_labeled(target_train, exp.budget, seed)
    pool = len(target_train)
    test = data.target["test"]
    for method in exp.methods:
        if method == "transfer":
            net = pretrained.clone()
            if exp.tied_init:
                net.copy_source_to_target()
            net, _ = train_transfer(net, labeled, unlabeled, data.source["train"], cfg)
        elif method == "finetune":
            net, _ = baseline_finetune(pretrained.clone(), labeled, cfg, n_target_pool=pool)
        elif method == "target-only":
            fresh = init_parameters(exp.encoder, data.num_classes, seed)
            net, _ = baseline_target_only(fresh, labeled, cfg, n_target_pool=pool)
        else:
            raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
        out[f"{method}_test_accuracy"] = evaluate(net, test, "target").accuracy
        logger.info("seed %d %s accuracy %.4f", seed, method, out[f"{method}_test_accuracy"])
    return out


def sweep(data: DataSplits, exp: ExperimentConfig, seeds: Sequence[int], out_dir=None) -> Aggregate:
    return run_seed_sweep(lambda s: run_methods(data, exp, s), seeds, out_dir)
