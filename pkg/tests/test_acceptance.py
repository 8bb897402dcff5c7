"""Acceptance suite: each test checks one criterion and prints a PASS/FAIL line.

The three trend criteria share one cached 5-seed sweep on the default
synthetic data (module fixture ``sweep``); the whole module runs in a few
minutes on one CPU core.
"""

import itertools
import json
import math
import time
from dataclasses import replace

import numpy as np
import pytest

from wassalign.autodiff import Parameter, Tape, Tensor, finite_difference_check
from wassalign.cli import main
from wassalign.data import (
    ContainerError,
    FewShotBudget,
    SyntheticSpec,
    decode_container,
    encode_container,
    subsample_labeled,
    write_container,
)
from wassalign.experiments import DataSplits, ExperimentConfig, pretrained_network
from wassalign.losses import (
    ObjectiveWeights,
    ProjectionSet,
    SupConConfig,
    class_conditional_swd,
    cross_entropy,
    sample_projections,
    supcon_loss,
    swd_distance,
    transfer_objective,
)
from wassalign.nn import (
    BatchNormState,
    EncoderConfig,
    InstanceNormParams,
    batch_norm_forward,
    classifier_forward,
    encoder_forward,
    init_parameters,
    instance_norm_forward,
)
from wassalign.training import (
    OptimizerState,
    TrainConfig,
    baseline_finetune,
    baseline_target_only,
    batch_stream,
    evaluate,
    optimizer_step,
    phase2_steps_per_epoch,
    pretrain_source,
    train_transfer,
)

SEEDS = (0, 1, 2, 3, 4)
SUPCON_WEIGHT = 0.002


# ---------------------------------------------------------------------------
# 1-2: sliced Wasserstein exactness


def brute_force_transport(a, b):
    return min(sum((a[i] - b[p]) ** 2 for i, p in enumerate(perm)) for perm in itertools.permutations(range(len(a))))


def test_criterion_01_one_dimensional_transport(acceptance):
    rng = np.random.default_rng(2024)
    one_d = ProjectionSet(np.array([[1.0]]), seed=None)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(500):
        m = int(rng.integers(1, 7))
        a, b = rng.standard_normal(m), rng.standard_normal(m)
        got = swd_distance(Tensor(a.reshape(-1, 1)), Tensor(b.reshape(-1, 1)), one_d).item()
        worst = max(worst, abs(got - brute_force_transport(a, b)))
    elapsed = time.perf_counter() - start
    ok = acceptance(1, worst <= 1e-10 and elapsed < 10, f"max |swd - brute force| = {worst:.2e}, {elapsed:.1f}s")
    assert ok


def test_criterion_02_hand_values(acceptance):
    one_d = ProjectionSet(np.array([[1.0]]), seed=None)
    eight = swd_distance(Tensor(np.array([[0.0], [1.0]])), Tensor(np.array([[2.0], [3.0]])), one_d).item()
    x = Tensor(np.array([[0.5], [-1.0], [2.0]]))
    zero = swd_distance(x, x, one_d).item()
    ok = acceptance(2, eight == 8.0 and zero == 0.0, f"{{0,1}} vs {{2,3}} -> {eight!r}; identical -> {zero!r}")
    assert ok


# ---------------------------------------------------------------------------
# 3: gradient suite


def tie_free(rng, shape, proj, gap=1e-3):
    """Random points whose projections are separated by at least ``gap``."""
    while True:
        x = rng.standard_normal(shape)
        p = np.sort(x @ proj.vectors.T, axis=0)
        if np.diff(p, axis=0).min() > gap:
            return x


def small_network(seed):
    cfg = EncoderConfig(image_size=8, stages=((3, 4, 2), (3, 4, 1)), norm="instance", embed_dim=4)
    return init_parameters(cfg, 3, seed, dtype=np.float64)


def gradient_cases(rng):
    proj = sample_projections(4, 3, int(rng.integers(1 << 31)))
    tgt = Tensor(tie_free(rng, (6, 3), proj))
    yield "swd_distance", (lambda s: swd_distance(s, tgt, proj)), tie_free(rng, (6, 3), proj)

    ys, yt = np.array([0, 0, 1, 1, 2, 2]), np.array([1, 0, 1, 2, 0, 2])
    tgt2 = Tensor(rng.standard_normal((6, 3)))
    yield "class_conditional_swd", (
        lambda s: class_conditional_swd(s, ys, tgt2, yt, proj, 3, np.random.default_rng(0))
    ), tie_free(rng, (6, 3), proj)

    labels = rng.integers(0, 4, 5)
    yield "cross_entropy", (lambda l: cross_entropy(l, labels)), rng.standard_normal((5, 4))

    mv_labels = np.repeat(rng.integers(0, 3, 3), 2)
    yield "supcon_loss", (lambda z: supcon_loss(z, mv_labels, SupConConfig(0.5))), rng.standard_normal((6, 3))

    net = small_network(int(rng.integers(1 << 31)))
    xs, xt, xu = (rng.standard_normal((n, 1, 8, 8)) for n in (4, 3, 4))
    src, tgt_b = (xs, np.array([0, 1, 2, 0])), (xt, np.array([0, 2, 1]))
    pl = np.array([1, -1, 0, 2])
    p4 = sample_projections(5, 4, 0)
    layer = net.classifier if rng.random() < 0.5 else net.target.fc

    def objective(w):
        layer.weight = w
        return transfer_objective(net, src, tgt_b, xu, p4, ObjectiveWeights(0.5, 0.5), pl, np.random.default_rng(0)).total

    yield "transfer_objective", objective, layer.weight.data.astype(np.float64)


def test_criterion_03_gradient_suite(acceptance):
    rng = np.random.default_rng(3)
    start = time.perf_counter()
    worst = {}
    for _ in range(20):
        for name, f, at in gradient_cases(rng):
            rep = finite_difference_check(f, at, step=1e-5, tolerance=1e-4)
            worst[name] = max(worst.get(name, 0.0), rep.max_error)
    elapsed = time.perf_counter() - start
    ok = all(v < 1e-4 for v in worst.values()) and elapsed < 60
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    assert acceptance(3, ok, f"max relative error: {detail}; {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 4: SupCon oracle


def naive_supcon(z, labels, tau):
    z = [v / np.linalg.norm(v) for v in z]
    total = 0.0
    for i in range(len(z)):
        denom = sum(math.exp(float(z[i] @ z[a]) / tau) for a in range(len(z)) if a != i)
        pos = [p for p in range(len(z)) if p != i and labels[p] == labels[i]]
        total -= sum(math.log(math.exp(float(z[i] @ z[p]) / tau) / denom) for p in pos) / len(pos)
    return total


def test_criterion_04_supcon_oracle(acceptance):
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(100):
        b = int(rng.integers(2, 9))
        k = int(rng.integers(1, 5))
        labels = np.repeat(rng.integers(0, k, b), 2)
        z = rng.standard_normal((2 * b, int(rng.integers(2, 8))))
        tau = float(rng.uniform(0.05, 1.0))
        worst = max(worst, abs(supcon_loss(Tensor(z), labels, SupConConfig(tau)).item() - naive_supcon(z, labels, tau)))
    degenerate = supcon_loss(Tensor(np.ones((4, 3))), [0, 0, 1, 1]).item()
    ok = worst <= 1e-10 and abs(degenerate - 4 * math.log(3)) <= 1e-9
    assert acceptance(4, ok, f"max |tape - naive| = {worst:.1e}; identical embeddings -> {degenerate:.9f}")


# ---------------------------------------------------------------------------
# 5: normalization layers


def test_criterion_05_normalization(acceptance):
    rng = np.random.default_rng(5)
    worst_mu = worst_var = worst_scale = 0.0
    for _ in range(100):
        n, c = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        hw = int(rng.integers(3, 9))
        x = rng.standard_normal((n, c, hw, hw)) * rng.uniform(1, 100) + rng.uniform(-50, 50)
        params = InstanceNormParams(Parameter(np.ones(c)), Parameter(np.zeros(c)))
        out = instance_norm_forward(Tensor(x), params).data
        worst_mu = max(worst_mu, np.abs(out.mean(axis=(2, 3))).max())
        worst_var = max(worst_var, np.abs(out.var(axis=(2, 3)) - 1).max())
        # per-sample rescaling; the epsilon floor is shrunk so it does not dominate at c = 1e-2
        exact = InstanceNormParams(Parameter(np.ones(c)), Parameter(np.zeros(c)), eps=1e-12)
        ref = instance_norm_forward(Tensor(x), exact).data
        for scale in (1e-2, 1e3):
            per_sample = scale * rng.uniform(0.5, 2.0, (n, 1, 1, 1))
            got = instance_norm_forward(Tensor(x * per_sample), exact).data
            worst_scale = max(worst_scale, np.abs(got - ref).max())

    bn = BatchNormState(Parameter(rng.uniform(0.5, 2, 3)), Parameter(rng.standard_normal(3)),
                        rng.standard_normal(3), rng.uniform(0.5, 2, 3), mode="eval")
    x = rng.standard_normal((10, 3, 4, 4))
    full = batch_norm_forward(Tensor(x), bn).data
    perm = rng.permutation(10)
    bn_ok = np.array_equal(batch_norm_forward(Tensor(x[perm]), bn).data, full[perm]) and all(
        np.array_equal(batch_norm_forward(Tensor(x[i : i + 1]), bn).data, full[i : i + 1]) for i in range(10)
    )
    ok = worst_mu < 1e-5 and worst_var < 1e-4 and worst_scale < 1e-6 and bn_ok
    detail = f"|mu| {worst_mu:.1e}, |var-1| {worst_var:.1e}, scale drift {worst_scale:.1e}, batch-norm eval independent {bn_ok}"
    assert acceptance(5, ok, detail)


# ---------------------------------------------------------------------------
# 6: objective reduction


def reference_ce_run(net, batches_fn, loss_fn, groups, cfg, steps):
    """Plain CE training loop: draw batches, CE loss, backward, optimizer step."""
    params = net.parameters(*groups)
    opt = OptimizerState.from_config(cfg)
    losses = []
    for _ in range(steps):
        batch = batches_fn()
        net.zero_grad()
        with Tape() as tape:
            loss = loss_fn(batch)
        tape.backward(loss)
        optimizer_step(params, opt)
        losses.append(loss.item())
    return losses


def ce(net, ds, idx, branch, reduction="mean"):
    x = Tensor(ds.images[idx], dtype=net.dtype)
    return cross_entropy(classifier_forward(net, encoder_forward(net, x, branch)), ds.labels[idx], reduction)


def trajectory_gap(pipeline, reference, steps):
    if len(pipeline) < steps:
        return math.inf
    return float(np.abs(np.array(pipeline[:steps]) - np.array(reference)).max())


@pytest.fixture(scope="module")
def default_data():
    return DataSplits.from_synthetic(SyntheticSpec())


def test_criterion_06_objective_reduction(default_data, acceptance):
    steps = 200
    cfg = TrainConfig(alpha=0.0, cond_weight=0.0, supcon_weight=0.0, seed=6)
    src = default_data.source["train"]
    pool = default_data.target["train"]
    labeled, unlabeled = subsample_labeled(pool, FewShotBudget(128), 6)
    epochs = math.ceil(steps / phase2_steps_per_epoch(len(pool), cfg.batch_target))
    cfg = replace(cfg, epochs_pretrain=math.ceil(steps / math.ceil(len(src) / cfg.batch_source)), epochs_transfer=epochs)
    base = init_parameters(EncoderConfig(), 4, 6)
    gaps = {}

    # phase 1
    got = []
    pretrained, _ = pretrain_source(base.clone(), src, None, cfg, on_step=lambda i, l: got.append(l))
    stream = batch_stream(cfg.seed, "pretrain", len(src), cfg.batch_source)
    ref_net = base.clone()
    ref = reference_ce_run(ref_net, stream.next, lambda i: ce(ref_net, src, i, "source"), ("src", "cls"), cfg, steps)
    gaps["pretrain"] = trajectory_gap(got, ref, steps)

    # phase 2: the full objective with zero alignment weights
    got = []
    train_transfer(pretrained.clone(), labeled, unlabeled, src, cfg, on_step=lambda i, l: got.append(l))
    s_stream = batch_stream(cfg.seed, "source", len(src), cfg.batch_source)
    t_stream = batch_stream(cfg.seed, "target", len(labeled), cfg.batch_target)
    ref_net = pretrained.clone()
    ref = reference_ce_run(
        ref_net, lambda: (s_stream.next(), t_stream.next()),
        lambda b: ce(ref_net, src, b[0], "source") + ce(ref_net, labeled, b[1], "target", "sum"),
        ("src", "tgt", "cls"), cfg, steps,
    )
    gaps["transfer"] = trajectory_gap(got, ref, steps)

    # baselines
    for name, run, start in (
        ("target-only", baseline_target_only, base),
        ("finetune", baseline_finetune, pretrained),
    ):
        got = []
        run(start.clone(), labeled, cfg, len(pool), on_step=lambda i, l: got.append(l))
        ref_net = start.clone()
        if name == "finetune":
            ref_net.copy_source_to_target()
        t_stream = batch_stream(cfg.seed, "target", len(labeled), cfg.batch_target)
        ref = reference_ce_run(ref_net, t_stream.next, lambda i: ce(ref_net, labeled, i, "target", "sum"), ("tgt", "cls"), cfg, steps)
        gaps[name] = trajectory_gap(got, ref, steps)

    ok = all(g <= 1e-6 for g in gaps.values())
    assert acceptance(6, ok, "max per-step loss gap over 200 steps: " + ", ".join(f"{k} {v:.1e}" for k, v in gaps.items()))


# ---------------------------------------------------------------------------
# 7-9: trends on the default synthetic data, 5 seeds


def transfer_accuracy(data, exp, pretrained, budget, seed, records=None):
    cfg = replace(exp.train, seed=seed)
    labeled, unlabeled = subsample_labeled(data.target["train"], FewShotBudget(budget), seed)
    net = pretrained.clone()
    net.copy_source_to_target()
    net, recs = train_transfer(net, labeled, unlabeled, data.source["train"], cfg)
    if records is not None:
        records.extend(recs)
    return evaluate(net, data.target["test"], "target").accuracy


@pytest.fixture(scope="module")
def sweep(default_data):
    data = default_data
    plain = ExperimentConfig()
    batch = ExperimentConfig(encoder=EncoderConfig(norm="batch"))
    supcon = ExperimentConfig(train=replace(TrainConfig(), supcon_weight=SUPCON_WEIGHT))
    out = {k: [] for k in ("transfer32", "transfer128", "target_only32", "batch32", "supcon32", "supcon128", "swd_drop")}
    start = time.perf_counter()
    for seed in SEEDS:
        net, _ = pretrained_network(data, plain, seed)
        records = []
        out["transfer32"].append(transfer_accuracy(data, plain, net, 32, seed, records))
        swd = [r.terms["swd"] for r in records if r.split == "train"]
        out["swd_drop"].append(1.0 - swd[-1] / swd[0])
        out["transfer128"].append(transfer_accuracy(data, plain, net, 128, seed))
        labeled, _ = subsample_labeled(data.target["train"], FewShotBudget(32), seed)
        fresh = init_parameters(plain.encoder, data.num_classes, seed)
        fresh, _ = baseline_target_only(fresh, labeled, replace(plain.train, seed=seed), len(data.target["train"]))
        out["target_only32"].append(evaluate(fresh, data.target["test"], "target").accuracy)

        net, _ = pretrained_network(data, batch, seed)
        out["batch32"].append(transfer_accuracy(data, batch, net, 32, seed))

        net, _ = pretrained_network(data, supcon, seed)
        out["supcon32"].append(transfer_accuracy(data, supcon, net, 32, seed))
        out["supcon128"].append(transfer_accuracy(data, supcon, net, 128, seed))
    out = {k: np.array(v) for k, v in out.items()}
    out["seconds"] = time.perf_counter() - start
    print("trend sweep:", json.dumps({k: np.round(v, 4).tolist() for k, v in out.items()}))
    return out


def test_criterion_07_few_shot_transfer_beats_target_only(sweep, acceptance):
    gap = sweep["transfer32"].mean() - sweep["target_only32"].mean()
    ok = gap >= 0.05 and sweep["seconds"] < 15 * 60
    detail = (
        f"n=32 transfer {sweep['transfer32'].mean():.4f} vs target-only {sweep['target_only32'].mean():.4f} "
        f"(gap {100 * gap:+.1f} points); sweep {sweep['seconds'] / 60:.1f} min"
    )
    assert acceptance(7, ok, detail)


def test_criterion_08_instance_norm_stabilizes(sweep, acceptance):
    inst, bn = sweep["transfer32"], sweep["batch32"]
    ok = inst.mean() >= bn.mean() and bn.var(ddof=1) > inst.var(ddof=1)
    detail = (
        f"instance {inst.mean():.4f} (var {inst.var(ddof=1):.2e}) vs batch {bn.mean():.4f} (var {bn.var(ddof=1):.2e})"
    )
    assert acceptance(8, ok, detail)


def test_criterion_09_supcon_pretraining(sweep, acceptance):
    diffs = {b: sweep[f"supcon{b}"].mean() - sweep[f"transfer{b}"].mean() for b in (32, 128)}
    ties = sum(abs(d) < 1e-12 for d in diffs.values())
    ok = all(d >= -1e-12 for d in diffs.values()) and ties <= 1
    detail = ", ".join(
        f"n={b}: supcon {sweep[f'supcon{b}'].mean():.4f} vs plain {sweep[f'transfer{b}'].mean():.4f}" for b in diffs
    )
    assert acceptance(9, ok, detail)


def test_alignment_term_shrinks_during_transfer(sweep):
    """Tied-init transfer: the logged SWD term falls by half from the first to the last epoch in 4 of 5 seeds."""
    drops = sweep["swd_drop"]
    print("relative drop of the SWD term per seed:", np.round(drops, 3).tolist())
    assert (drops >= 0.5).sum() >= 4, drops


# ---------------------------------------------------------------------------
# 10: infrastructure


def tree_bytes(root):
    out = {}
    for p in sorted(root.rglob("*")):
        if p.is_file():
            data = p.read_bytes()
            if p.name == "resolved_spec.txt":
                data = b"\n".join(l for l in data.splitlines() if not l.startswith(b"out = "))
            out[str(p.relative_to(root))] = data
    return out


def run_all_commands(root, capsys):
    """Every CLI command once on a tiny dataset; returns the output trees and printed text."""
    root.mkdir()
    spec = root / "spec.txt"
    spec.write_text("per_class = 20\n")
    det = ["--deterministic"]
    assert main(["synth", "--spec", str(spec), "--out", str(root / "data"), *det]) == 0
    train = "epochs_pretrain = 2\nepochs_transfer = 1\nnum_projections = 8\n"
    (root / "p.txt").write_text(f"data = {root / 'data'}\n{train}")
    assert main(["pretrain", "--spec", str(root / "p.txt"), "--out", str(root / "pre"), *det]) == 0
    (root / "t.txt").write_text(f"data = {root / 'data'}\ncheckpoint = {root / 'pre'}\n{train}")
    assert main(["transfer", "--spec", str(root / "t.txt"), "--out", str(root / "tr"), *det]) == 0
    for kind in ("target-only", "finetune"):
        (root / f"{kind}.txt").write_text(f"data = {root / 'data'}\ncheckpoint = {root / 'pre'}\nbaseline = {kind}\n{train}")
        assert main(["baseline", "--spec", str(root / f"{kind}.txt"), "--out", str(root / kind), *det]) == 0
    (root / "e.txt").write_text(f"data = {root / 'data' / 'B'}\ncheckpoint = {root / 'tr'}\n")
    assert main(["eval", "--spec", str(root / "e.txt"), "--out", str(root / "ev"), *det]) == 0
    rng = np.random.default_rng(0)
    write_container(root / "xa.tnsr", {"x": rng.standard_normal((8, 3))})
    write_container(root / "xb.tnsr", {"x": rng.standard_normal((8, 3))})
    assert main(["swd", str(root / "xa.tnsr"), str(root / "xb.tnsr"), "--seed", "2", *det]) == 0
    (root / "s.txt").write_text(f"data = {root / 'data'}\nseeds = 1,2\nmethods = transfer,target-only,finetune\n{train}")
    assert main(["sweep", "--spec", str(root / "s.txt"), "--out", str(root / "sw"), *det]) == 0
    return tree_bytes(root), capsys.readouterr().out


def test_criterion_10_infrastructure(tmp_path, capsys, acceptance):
    rng = np.random.default_rng(10)
    dtypes = (np.float32, np.float64, np.uint8, np.int64)
    round_trip = True
    for i in range(50):
        tensors = {}
        for j in range(int(rng.integers(0, 4))):
            shape = tuple(int(s) for s in rng.integers(0, 4, int(rng.integers(0, 4))))
            dt = dtypes[int(rng.integers(4))]
            tensors[f"t{j}"] = (rng.standard_normal(shape) * 100).astype(dt)
        back = decode_container(encode_container(tensors))
        round_trip &= list(back) == list(tensors) and all(
            back[k].dtype == v.dtype and back[k].shape == v.shape and back[k].tobytes() == v.tobytes()
            for k, v in tensors.items()
        )

    base = encode_container({"images": np.arange(12, dtype=np.float32).reshape(3, 4), "labels": np.arange(3)})
    header_end = 10 + 2 + 6 + 2 + 16
    structured = crashes = 0
    for _ in range(1000):
        buf = bytearray(base)
        for _ in range(int(rng.integers(1, 4))):
            buf[int(rng.integers(0, header_end))] = int(rng.integers(0, 256))
        try:
            decode_container(bytes(buf))
        except ContainerError:
            structured += 1
        except Exception:  # noqa: BLE001 - any other exception is a crash
            crashes += 1

    first, out1 = run_all_commands(tmp_path / "one", capsys)
    second, out2 = run_all_commands(tmp_path / "two", capsys)
    strip = lambda tree: {k: v.replace(str(tmp_path / "one").encode(), b"").replace(str(tmp_path / "two").encode(), b"") for k, v in tree.items()}
    reproducible = strip(first) == strip(second) and out1 == out2
    ok = round_trip and crashes == 0 and reproducible
    detail = (
        f"round trip {round_trip}; fuzzing {structured} structured errors, {crashes} crashes; "
        f"commands bit-identical {reproducible} ({len(first)} files)"
    )
    assert acceptance(10, ok, detail)
