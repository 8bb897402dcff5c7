"""Scalar objectives: cross-entropy, sliced Wasserstein distance, SupCon."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import YNetwork, classifier_forward, encoder_forward


@dataclass(frozen=True)
class ProjectionSet:
    vectors: np.ndarray  # [L, d], unit rows
    seed: Optional[int] = None

    @property
    def count(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


@dataclass(frozen=True)
class SwdConfig:
    num_projections: int = 50
    tie_policy: str = "stable"
    pairing_policy: str = "subsample"

    def __post_init__(self):
        if self.num_projections < 1:
            raise ValueError("need at least one projection")
        if self.tie_policy != "stable":
            raise ValueError(f"unsupported tie policy {self.tie_policy!r}")
        if self.pairing_policy != "subsample":
            raise ValueError(f"unsupported pairing policy {self.pairing_policy!r}")


@dataclass(frozen=True)
class SupConConfig:
    temperature: float = 0.1
    normalize: bool = True

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("SupCon temperature must be positive")


def sample_projections(num: int, dim: int, seed, dtype=np.float64) -> ProjectionSet:
    """Directions uniform on the unit sphere: normalized standard-normal draws."""
    if dim < 1:
        raise ValueError("projection dimension must be >= 1")
    if num < 1:
        raise ValueError("need at least one projection")
    rng = np.random.default_rng(seed)
    g = rng.standard_normal((num, dim))
    norms = np.linalg.norm(g, axis=1, keepdims=True)
    # a zero draw has probability zero; redraw defensively
    while np.any(norms == 0):
        bad = norms[:, 0] == 0
        g[bad] = rng.standard_normal((int(bad.sum()), dim))
        norms = np.linalg.norm(g, axis=1, keepdims=True)
    vec = (g / norms).astype(dtype)
    vec.setflags(write=False)
    return ProjectionSet(vec, seed if isinstance(seed, int) else None)


def swd_distance(source: Tensor, target: Tensor, proj: ProjectionSet) -> Tensor:
    """(1/L) * sum over projections of the sorted-pairing squared 1-D transport cost.

    No 1/M factor: the sum runs over all M matched pairs.
    """
    if source.ndim != 2 or target.ndim != 2:
        raise ValueError(f"swd: expected [M,d] inputs, got {source.shape} and {target.shape}")
    if source.shape[0] != target.shape[0]:
        raise ValueError(f"swd: sample counts differ ({source.shape[0]} vs {target.shape[0]}); pair them first")
    if source.shape[1] != proj.dim or target.shape[1] != proj.dim:
        raise ValueError(f"swd: embedding dims {source.shape[1]}/{target.shape[1]} do not match projections ({proj.dim})")
    gamma_t = Tensor(proj.vectors.T, dtype=source.dtype)
    ps, _ = ad.sort_with_indices(source @ gamma_t, axis=0)
    pt, _ = ad.sort_with_indices(target @ gamma_t, axis=0)
    return ad.square(ps - pt).sum() / float(proj.count)


def pair_indices(n_source: int, n_target: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Equalize counts by sampling min(n_s, n_t) from the larger side without replacement."""
    m = min(n_source, n_target)
    src = np.arange(n_source) if n_source == m else np.sort(rng.choice(n_source, m, replace=False))
    tgt = np.arange(n_target) if n_target == m else np.sort(rng.choice(n_target, m, replace=False))
    return src, tgt


def swd_paired(source: Tensor, target: Tensor, proj: ProjectionSet, rng: np.random.Generator) -> Tensor:
    if source.shape[0] == target.shape[0]:
        return swd_distance(source, target, proj)
    si, ti = pair_indices(source.shape[0], target.shape[0], rng)
    return swd_distance(ad.index_select(source, si), ad.index_select(target, ti), proj)


def class_conditional_swd(
    source: Tensor,
    source_labels,
    target: Tensor,
    target_labels,
    proj: ProjectionSet,
    num_classes: int,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Sum over classes present on both sides of the per-class SWD."""
    ys = np.asarray(source_labels, dtype=np.int64)
    yt = np.asarray(target_labels, dtype=np.int64)
    for name, y in (("source", ys), ("target", yt)):
        if y.size and (y.min() < 0 or y.max() >= num_classes):
            raise ValueError(f"class-conditional swd: {name} labels outside [0, {num_classes})")
    if ys.size != source.shape[0] or yt.size != target.shape[0]:
        raise ValueError("class-conditional swd: label count does not match embedding count")
    rng = rng if rng is not None else np.random.default_rng(0)
    total = None
    for j in range(num_classes):
        si = np.flatnonzero(ys == j)
        ti = np.flatnonzero(yt == j)
        if si.size == 0 or ti.size == 0:
            continue
        ps, pt = pair_indices(si.size, ti.size, rng)
        term = swd_distance(ad.index_select(source, si[ps]), ad.index_select(target, ti[pt]), proj)
        total = term if total is None else total + term
    if total is None:
        raise ValueError("class-conditional swd: no overlapping classes between source and target")
    return total


def _check_labels(labels, n: int, num_classes: int, what: str) -> np.ndarray:
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.size != n:
        raise ValueError(f"{what}: {y.size} labels for {n} rows")
    if y.size and (y.min() < 0 or y.max() >= num_classes):
        raise ValueError(f"{what}: label outside [0, {num_classes})")
    return y


def cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Softmax cross-entropy; ``reduction`` is 'mean' or 'sum' over samples."""
    if logits.ndim != 2:
        raise ValueError(f"cross-entropy expects [N,k] logits, got {logits.shape}")
    n, k = logits.shape
    y = _check_labels(labels, n, k, "cross-entropy")
    onehot = np.zeros((n, k), dtype=logits.dtype)
    onehot[np.arange(n), y] = 1
    picked = (ad.log_softmax(logits, axis=1) * Tensor(onehot, dtype=logits.dtype)).sum()
    loss = -picked / float(n) if reduction == "mean" else -picked
    return ad.no_nonfinite(loss, "cross-entropy")


def supcon_loss(embeddings: Tensor, labels, cfg: SupConConfig = SupConConfig()) -> Tensor:
    """Supervised contrastive loss summed over every anchor of a multiviewed batch.

    Returned with the sign that makes minimization pull positives together.
    """
    if embeddings.ndim != 2:
        raise ValueError(f"supcon expects [2B,d] embeddings, got {embeddings.shape}")
    n = embeddings.shape[0]
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.size != n:
        raise ValueError(f"supcon: {y.size} labels for {n} embeddings")
    same = y[:, None] == y[None, :]
    np.fill_diagonal(same, False)
    npos = same.sum(axis=1)
    if np.any(npos == 0):
        bad = int(np.flatnonzero(npos == 0)[0])
        raise ValueError(
            f"supcon: anchor {bad} (label {y[bad]}) has no positive; sample class-complete batches"
        )
    z = embeddings
    if cfg.normalize:
        # the tiny floor only guards 0/0; anything larger biases short embeddings
        z = z / ad.sqrt(ad.square(z).sum(axis=1, keepdims=True) + 1e-30)
    sim = (z @ ad.transpose(z)) / float(cfg.temperature)
    # drop each anchor from its own denominator
    self_mask = np.zeros((n, n), dtype=embeddings.dtype)
    np.fill_diagonal(self_mask, -1e9)
    log_prob = ad.log_softmax(sim + Tensor(self_mask, dtype=embeddings.dtype), axis=1)
    weights = (same / npos[:, None]).astype(embeddings.dtype)
    loss = -(log_prob * Tensor(weights, dtype=embeddings.dtype)).sum()
    return ad.no_nonfinite(loss, "supcon")


# ---------------------------------------------------------------------------
# full transfer objective


@dataclass(frozen=True)
class ObjectiveWeights:
    alpha: float = 1.0
    cond_weight: float = 1.0
    normalize_target_ce: bool = False


@dataclass
class ObjectiveTerms:
    total: Tensor
    ce_src: float
    ce_tgt: float
    swd: float
    cond_swd: float
    cond_skipped: bool
    weights: ObjectiveWeights

    def weighted(self) -> dict[str, float]:
        w = self.weights
        return {
            "ce_src": self.ce_src,
            "ce_tgt": self.ce_tgt,
            "swd": w.alpha * self.swd,
            "cond_swd": w.cond_weight * self.cond_swd,
        }


def transfer_objective(
    net: YNetwork,
    labeled_src: tuple,
    labeled_tgt: tuple,
    unlabeled_tgt,
    proj: ProjectionSet,
    weights: ObjectiveWeights,
    pseudo_labels=None,
    rng: Optional[np.random.Generator] = None,
    mode: str = "train",
) -> ObjectiveTerms:
    """CE_src + CE_tgt + alpha * SWD(phi(src), psi(unlabeled)) + cond_weight * sum_j SWD_j.

    ``labeled_src`` and ``labeled_tgt`` are ``(images, labels)`` pairs. The
    class-conditional target side pools the labeled target batch with the
    unlabeled samples whose ``pseudo_labels`` entry is >= 0.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    xs, ys = labeled_src
    xt, yt = labeled_tgt
    xu = unlabeled_tgt
    ys = np.asarray(ys, dtype=np.int64)
    yt = np.asarray(yt, dtype=np.int64)
    if len(ys) == 0 or len(yt) == 0:
        raise ValueError("transfer objective needs non-empty labeled source and target batches")
    xs = xs if isinstance(xs, Tensor) else Tensor(xs, dtype=net.dtype)
    xt = xt if isinstance(xt, Tensor) else Tensor(xt, dtype=net.dtype)
    nt = xt.shape[0]
    need_unlabeled = xu is not None and len(xu) > 0 and (weights.alpha != 0 or weights.cond_weight != 0)
    if need_unlabeled:
        xu = xu if isinstance(xu, Tensor) else Tensor(xu, dtype=net.dtype)
        z_all = encoder_forward(net, ad.concat([xt, xu]), "target", mode)
        zt = ad.index_select(z_all, np.arange(nt))
        zu = ad.index_select(z_all, np.arange(nt, z_all.shape[0]))
    else:
        zt = encoder_forward(net, xt, "target", mode)
        zu = None
    zs = encoder_forward(net, xs, "source", mode)

    ce_src = cross_entropy(classifier_forward(net, zs), ys)
    ce_tgt = cross_entropy(
        classifier_forward(net, zt), yt, reduction="mean" if weights.normalize_target_ce else "sum"
    )
    total = ce_src + ce_tgt
    swd_val, cond_val, skipped = 0.0, 0.0, True
    if weights.alpha != 0 and zu is not None:
        swd = swd_paired(zs, zu, proj, rng)
        swd_val = swd.item()
        total = total + swd * float(weights.alpha)
    if weights.cond_weight != 0:
        tgt_emb, tgt_lab = zt, yt
        if zu is not None and pseudo_labels is not None:
            pl = np.asarray(pseudo_labels, dtype=np.int64)
            keep = np.flatnonzero(pl >= 0)
            if keep.size:
                tgt_emb = ad.concat([zt, ad.index_select(zu, keep)])
                tgt_lab = np.concatenate([yt, pl[keep]])
        if np.intersect1d(ys, tgt_lab).size:
            cond = class_conditional_swd(zs, ys, tgt_emb, tgt_lab, proj, net.num_classes, rng)
            cond_val = cond.item()
            skipped = False
            total = total + cond * float(weights.cond_weight)
    ad.no_nonfinite(total, "transfer objective")
    return ObjectiveTerms(total, ce_src.item(), ce_tgt.item(), swd_val, cond_val, skipped, weights)
