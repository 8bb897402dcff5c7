"""Source pretraining, few-shot transfer, the baselines, evaluation and seed sweeps."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tape, Tensor
from .data import BatchStream, Dataset, class_complete_batches, make_multiviewed_batch
from .losses import (
    ObjectiveWeights,
    SupConConfig,
    cross_entropy,
    sample_projections,
    supcon_loss,
    transfer_objective,
)
from .nn import YNetwork, classifier_forward, encoder_forward

logger = logging.getLogger(__name__)

# sub-stream tags for np.random.SeedSequence([seed, tag, ...])
_BATCHES, _PROJECTIONS, _PAIRING, _AUGMENT, _SUPCON_BATCHES = 1, 2, 3, 4, 5


@dataclass
class TrainConfig:
    alpha: float = 1.0
    cond_weight: float = 1.0
    num_projections: int = 50
    temperature: float = 0.1
    supcon_weight: float = 0.0
    lr: float = 1e-3
    optimizer: str = "adam"
    momentum: float = 0.9
    batch_source: int = 64
    batch_target: int = 64
    batch_unlabeled: int = 64
    epochs_pretrain: int = 30
    epochs_transfer: int = 30
    pseudo_threshold: float = 0.8
    normalize_target_ce: bool = False
    augment_policy: str = "translate(1),gaussian-noise(0.1)"
    seed: int = 0
    deterministic: bool = True

    def __post_init__(self):
        if self.optimizer not in ("adam", "sgd-momentum"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if min(self.batch_source, self.batch_target, self.batch_unlabeled) < 2:
            raise ValueError("batch sizes must be >= 2")
        if not self.lr > 0 or not self.temperature > 0:
            raise ValueError("lr and temperature must be positive")
        if min(self.alpha, self.cond_weight, self.supcon_weight) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.num_projections < 1:
            raise ValueError("num_projections must be >= 1")
        if not 0 <= self.pseudo_threshold <= 1:
            raise ValueError("pseudo_threshold must lie in [0, 1]")
        if self.epochs_pretrain < 0 or self.epochs_transfer < 0:
            raise ValueError("epoch counts must be >= 0")

    def weights(self) -> ObjectiveWeights:
        return ObjectiveWeights(self.alpha, self.cond_weight, self.normalize_target_ce)


# ---------------------------------------------------------------------------
# optimizers


@dataclass
class OptimizerState:
    kind: str
    lr: float
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "OptimizerState":
        return cls(kind=cfg.optimizer, lr=cfg.lr, momentum=cfg.momentum)


def optimizer_step(params: Sequence[Parameter], state: OptimizerState) -> None:
    """In-place SGD-momentum or Adam update; gradients are left untouched."""
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise FloatingPointError(f"non-finite gradient in parameter {p.name!r}")
    state.step += 1
    t = state.step
    for p in params:
        key = id(p)
        g = p.grad
        if state.kind == "sgd-momentum":
            buf = state.m.get(key)
            buf = g.copy() if buf is None or state.momentum == 0 else state.momentum * buf + g
            state.m[key] = buf
            p.assign(p.data - state.lr * buf)
        elif state.kind == "adam":
            m = state.m.get(key, np.zeros_like(g))
            v = state.v.get(key, np.zeros_like(g))
            m = state.beta1 * m + (1 - state.beta1) * g
            v = state.beta2 * v + (1 - state.beta2) * g * g
            state.m[key], state.v[key] = m, v
            mhat = m / (1 - state.beta1**t)
            vhat = v / (1 - state.beta2**t)
            p.assign(p.data - state.lr * mhat / (np.sqrt(vhat) + state.eps))
        else:
            raise ValueError(f"unknown optimizer {state.kind!r}")


# ---------------------------------------------------------------------------
# metrics


@dataclass
class MetricsRecord:
    phase: str
    epoch: int
    split: str
    total_loss: float
    terms: dict
    weights: dict
    accuracy: Optional[float] = None
    per_class_accuracy: Optional[list] = None
    seconds: float = 0.0
    cond_skipped_steps: int = 0

    def check(self, tol: float = 1e-6) -> None:
        expected = sum(self.weights.get(k, 0.0) * v for k, v in self.terms.items())
        if abs(expected - self.total_loss) > tol * max(1.0, abs(self.total_loss)):
            raise AssertionError(f"metrics record total {self.total_loss} != weighted terms {expected}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def write_metrics(records: Iterable[MetricsRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def read_metrics(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


@dataclass
class EvalResult:
    accuracy: float
    per_class_accuracy: np.ndarray
    confusion: np.ndarray  # rows: true class, cols: predicted


def predict_logits(net: YNetwork, images: np.ndarray, branch: str, chunk: int = 256) -> np.ndarray:
    out = []
    for i in range(0, len(images), chunk):
        x = Tensor(images[i : i + chunk], dtype=net.dtype)
        out.append(classifier_forward(net, encoder_forward(net, x, branch, "eval")).data)
    return np.concatenate(out) if out else np.zeros((0, net.num_classes))


def confusion_from_predictions(labels, preds, num_classes: int) -> EvalResult:
    labels = np.asarray(labels, dtype=np.int64)
    preds = np.asarray(preds, dtype=np.int64)
    if labels.size == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    conf = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(conf, (labels, preds), 1)
    rows = conf.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.where(rows > 0, np.diag(conf) / np.maximum(rows, 1), np.nan)
    return EvalResult(float(np.trace(conf) / conf.sum()), per_class, conf)


def evaluate(net: YNetwork, dataset: Dataset, branch: str) -> EvalResult:
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    preds = predict_logits(net, dataset.images, branch).argmax(axis=1)
    return confusion_from_predictions(dataset.labels, preds, net.num_classes)


# ---------------------------------------------------------------------------
# training loops


def _stream_rng(seed: int, tag: int, *extra: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, tag, *extra]))


BATCH_ROLES = {"pretrain": 0, "source": 1, "target": 2, "unlabeled": 3}


def batch_stream(seed: int, role: str, n: int, batch_size: int) -> BatchStream:
    """The index stream a training loop draws ``role`` batches from.

    Public so that reference implementations can replay identical batches.
    """
    return BatchStream(n, batch_size, _stream_rng(seed, _BATCHES, BATCH_ROLES[role]))


def _clock(cfg: TrainConfig, start: float) -> float:
    # wall clock would break bit-identical metrics files
    return 0.0 if cfg.deterministic else time.perf_counter() - start


def _val_record(net, phase, epoch, dataset, branch, cfg, start) -> Optional[MetricsRecord]:
    if dataset is None or len(dataset) == 0:
        return None
    res = evaluate(net, dataset, branch)
    return MetricsRecord(
        phase, epoch, dataset.split, float("nan"), {}, {}, res.accuracy,
        [None if math.isnan(a) else float(a) for a in res.per_class_accuracy], _clock(cfg, start),
    )


def _batch(ds: Dataset, idx: np.ndarray, dtype) -> tuple[Tensor, np.ndarray]:
    return Tensor(ds.images[idx], dtype=dtype), ds.labels[idx]


def pretrain_source(
    net: YNetwork,
    train: Dataset,
    val: Optional[Dataset],
    cfg: TrainConfig,
    on_step: Optional[Callable[[int, float], None]] = None,
) -> tuple[YNetwork, list[MetricsRecord]]:
    """Fit the source encoder and classifier with CE (+ supcon_weight * SupCon)."""
    params = net.parameters("src", "cls")
    opt = OptimizerState.from_config(cfg)
    records: list[MetricsRecord] = []
    stream = batch_stream(cfg.seed, "pretrain", len(train), cfg.batch_source)
    batch_rng = stream.rng
    supcon_cfg = SupConConfig(cfg.temperature)
    use_supcon = cfg.supcon_weight > 0
    steps_per_epoch = math.ceil(len(train) / stream.batch_size)
    start = time.perf_counter()
    step = 0
    for epoch in range(1, cfg.epochs_pretrain + 1):
        if use_supcon:
            batches = list(class_complete_batches(train.labels, cfg.batch_source, batch_rng))
        else:
            batches = [stream.next() for _ in range(steps_per_epoch)]
        sums = {"ce_src": 0.0, "supcon": 0.0}
        total = 0.0
        for idx in batches:
            x, y = _batch(train, idx, net.dtype)
            net.zero_grad()
            with Tape() as tape:
                if use_supcon:
                    mv = make_multiviewed_batch(
                        train.images[idx], y, cfg.augment_policy, np.random.SeedSequence([cfg.seed, _AUGMENT, step])
                    )
                    both = encoder_forward(net, ad.concat([x, Tensor(mv.images, dtype=net.dtype)]), "source")
                    z = ad.index_select(both, np.arange(len(idx)))
                    zv = ad.index_select(both, np.arange(len(idx), both.shape[0]))
                    ce = cross_entropy(classifier_forward(net, z), y)
                    sc = supcon_loss(zv, mv.labels, supcon_cfg)
                    loss = ce + sc * float(cfg.supcon_weight)
                    sums["supcon"] += sc.item()
                else:
                    z = encoder_forward(net, x, "source")
                    ce = cross_entropy(classifier_forward(net, z), y)
                    loss = ce
            _abort_nonfinite(loss, {"ce_src": ce.item(), "supcon": sums["supcon"]})
            tape.backward(loss)
            optimizer_step(params, opt)
            sums["ce_src"] += ce.item()
            total += loss.item()
            if on_step is not None:
                on_step(step, loss.item())
            step += 1
        nb = len(batches)
        terms = {"ce_src": sums["ce_src"] / nb}
        weights = {"ce_src": 1.0}
        if use_supcon:
            terms["supcon"] = sums["supcon"] / nb
            weights["supcon"] = cfg.supcon_weight
        rec = MetricsRecord("pretrain", epoch, "train", total / nb, terms, weights, seconds=_clock(cfg, start))
        records.append(rec)
        val_rec = _val_record(net, "pretrain", epoch, val, "source", cfg, start)
        if val_rec is not None:
            records.append(val_rec)
        logger.debug("pretrain epoch %d loss %.4f", epoch, rec.total_loss)
    return net, records


def _abort_nonfinite(loss: Tensor, terms: dict) -> None:
    if not np.isfinite(loss.item()):
        bad = [k for k, v in terms.items() if not np.isfinite(v)]
        raise FloatingPointError(f"training diverged: non-finite loss (terms {bad or list(terms)})")


def pseudo_labels(net: YNetwork, images: np.ndarray, threshold: float) -> np.ndarray:
    """argmax class of h(psi(x)) where its probability >= threshold, else -1."""
    if len(images) == 0:
        return np.zeros(0, dtype=np.int64)
    logits = predict_logits(net, images, "target")
    z = logits - logits.max(axis=1, keepdims=True)
    prob = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    out = prob.argmax(axis=1)
    return np.where(prob.max(axis=1) >= threshold, out, -1).astype(np.int64)


def phase2_steps_per_epoch(n_target_pool: int, batch: int) -> int:
    """All phase-2 methods take the same number of steps: one pass over the target train pool."""
    return max(1, math.ceil(n_target_pool / batch))


def train_transfer(
    net: YNetwork,
    labeled_target: Dataset,
    unlabeled_target: Optional[Dataset],
    source: Dataset,
    cfg: TrainConfig,
    target_val: Optional[Dataset] = None,
    on_step: Optional[Callable[[int, float], None]] = None,
) -> tuple[YNetwork, list[MetricsRecord]]:
    """Optimize the full transfer objective over both encoders and the classifier."""
    params = net.parameters()
    opt = OptimizerState.from_config(cfg)
    weights = cfg.weights()
    n_unl = 0 if unlabeled_target is None else len(unlabeled_target)
    use_unlabeled = n_unl > 0 and (cfg.alpha > 0 or cfg.cond_weight > 0)
    src_stream = batch_stream(cfg.seed, "source", len(source), cfg.batch_source)
    tgt_stream = batch_stream(cfg.seed, "target", len(labeled_target), cfg.batch_target)
    unl_stream = batch_stream(cfg.seed, "unlabeled", n_unl, cfg.batch_unlabeled) if use_unlabeled else None
    steps = phase2_steps_per_epoch(len(labeled_target) + n_unl, cfg.batch_target)
    records: list[MetricsRecord] = []
    start = time.perf_counter()
    step = 0
    w_dict = {"ce_src": 1.0, "ce_tgt": 1.0, "swd": cfg.alpha, "cond_swd": cfg.cond_weight}
    for epoch in range(1, cfg.epochs_transfer + 1):
        pl_all = None
        if use_unlabeled and cfg.cond_weight > 0:
            pl_all = pseudo_labels(net, unlabeled_target.images, cfg.pseudo_threshold)
        sums = dict.fromkeys(w_dict, 0.0)
        total, skipped = 0.0, 0
        for _ in range(steps):
            xs, ys = _batch(source, src_stream.next(), net.dtype)
            xt, yt = _batch(labeled_target, tgt_stream.next(), net.dtype)
            xu, pl = None, None
            if unl_stream is not None:
                ui = unl_stream.next()
                xu = Tensor(unlabeled_target.images[ui], dtype=net.dtype)
                pl = pl_all[ui] if pl_all is not None else None
            proj = sample_projections(
                cfg.num_projections, net.config.embed_dim, np.random.SeedSequence([cfg.seed, _PROJECTIONS, step]), net.dtype
            )
            net.zero_grad()
            with Tape() as tape:
                terms = transfer_objective(
                    net, (xs, ys), (xt, yt), xu, proj, weights, pl, _stream_rng(cfg.seed, _PAIRING, step)
                )
            _abort_nonfinite(terms.total, {"ce_src": terms.ce_src, "ce_tgt": terms.ce_tgt, "swd": terms.swd, "cond_swd": terms.cond_swd})
            tape.backward(terms.total)
            optimizer_step(params, opt)
            for k in sums:
                sums[k] += getattr(terms, k)
            total += terms.total.item()
            skipped += int(cfg.cond_weight > 0 and terms.cond_skipped)
            if on_step is not None:
                on_step(step, terms.total.item())
            step += 1
        rec = MetricsRecord(
            "transfer", epoch, "train", total / steps, {k: v / steps for k, v in sums.items()}, dict(w_dict),
            seconds=_clock(cfg, start), cond_skipped_steps=skipped,
        )
        records.append(rec)
        val_rec = _val_record(net, "transfer", epoch, target_val, "target", cfg, start)
        if val_rec is not None:
            records.append(val_rec)
    return net, records


def _target_ce_loop(
    net: YNetwork,
    labeled_target: Dataset,
    cfg: TrainConfig,
    phase: str,
    n_target_pool: Optional[int],
    target_val: Optional[Dataset],
    on_step,
) -> tuple[YNetwork, list[MetricsRecord]]:
    params = net.parameters("tgt", "cls")
    opt = OptimizerState.from_config(cfg)
    stream = batch_stream(cfg.seed, "target", len(labeled_target), cfg.batch_target)
    steps = phase2_steps_per_epoch(n_target_pool or len(labeled_target), cfg.batch_target)
    reduction = "mean" if cfg.normalize_target_ce else "sum"
    records: list[MetricsRecord] = []
    start = time.perf_counter()
    step = 0
    for epoch in range(1, cfg.epochs_transfer + 1):
        total = 0.0
        for _ in range(steps):
            x, y = _batch(labeled_target, stream.next(), net.dtype)
            net.zero_grad()
            with Tape() as tape:
                loss = cross_entropy(classifier_forward(net, encoder_forward(net, x, "target")), y, reduction)
            _abort_nonfinite(loss, {"ce_tgt": loss.item()})
            tape.backward(loss)
            optimizer_step(params, opt)
            total += loss.item()
            if on_step is not None:
                on_step(step, loss.item())
            step += 1
        records.append(
            MetricsRecord(phase, epoch, "train", total / steps, {"ce_tgt": total / steps}, {"ce_tgt": 1.0}, seconds=_clock(cfg, start))
        )
        val_rec = _val_record(net, phase, epoch, target_val, "target", cfg, start)
        if val_rec is not None:
            records.append(val_rec)
    return net, records


def baseline_target_only(
    net: YNetwork,
    labeled_target: Dataset,
    cfg: TrainConfig,
    n_target_pool: Optional[int] = None,
    target_val: Optional[Dataset] = None,
    on_step=None,
) -> tuple[YNetwork, list[MetricsRecord]]:
    """Plain CE on the target encoder and classifier from a fresh network."""
    return _target_ce_loop(net, labeled_target, cfg, "target-only", n_target_pool, target_val, on_step)


def baseline_finetune(
    net: YNetwork,
    labeled_target: Dataset,
    cfg: TrainConfig,
    n_target_pool: Optional[int] = None,
    target_val: Optional[Dataset] = None,
    on_step=None,
) -> tuple[YNetwork, list[MetricsRecord]]:
    """Copy the pretrained source encoder into the target branch, then CE on target data."""
    net.copy_source_to_target()
    return _target_ce_loop(net, labeled_target, cfg, "finetune", n_target_pool, target_val, on_step)


# ---------------------------------------------------------------------------
# seed sweeps


@dataclass
class Aggregate:
    seeds: list
    mean: dict
    stderr: dict
    per_seed: dict

    def to_dict(self) -> dict:
        return asdict(self)


def aggregate_metrics(per_seed: dict) -> Aggregate:
    """Mean and standard error (sample std / sqrt(n)) per metric across seeds."""
    seeds = sorted(per_seed)
    if len(seeds) < 2:
        raise ValueError("aggregation needs at least two seeds")
    keys = sorted(set.intersection(*(set(per_seed[s]) for s in seeds)))
    mean, se = {}, {}
    for k in keys:
        vals = np.array([per_seed[s][k] for s in seeds], dtype=np.float64)
        mean[k] = float(vals.mean())
        se[k] = float(vals.std(ddof=1) / math.sqrt(len(vals)))
    return Aggregate(seeds, mean, se, {str(s): dict(per_seed[s]) for s in seeds})


def run_seed_sweep(
    experiment: Callable[[int], dict], seeds: Sequence[int], out_dir=None
) -> Aggregate:
    """Run ``experiment(seed) -> {metric: value}`` per seed and aggregate.

    With ``out_dir`` each result is persisted as ``seed_<s>.json`` as soon as it
    finishes, so a failing seed leaves earlier results on disk.
    """
    if len(seeds) < 2:
        raise ValueError("a seed sweep needs at least two seeds")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    results = {}
    for s in seeds:
        res = experiment(s)
        results[s] = res
        if out is not None:
            (out / f"seed_{s}.json").write_text(json.dumps(res, sort_keys=True), encoding="utf-8")
    agg = aggregate_metrics(results)
    if out is not None:
        (out / "aggregate.json").write_text(json.dumps(agg.to_dict(), sort_keys=True, indent=1), encoding="utf-8")
    return agg
