"""Acceptance gate: one test per criterion, run with -v for one line each.

Criteria 6-8 share a module-scoped cache of full preset runs so the whole
gate stays within its time budgets.
"""

import time
from dataclasses import replace

import numpy as np
import pytest

from cdsl_lab import diffcore as dc
from cdsl_lab import labeler, memory, nets, objective, protocol, randmix, synthdata
from cdsl_lab.protocol import RunConfig

from conftest import max_rel_err

SEEDS = (2022, 2023, 2024)


@pytest.fixture(scope="module")
def rot5_runs():
    runs, seconds = {}, {}
    for seed in SEEDS:
        start = time.perf_counter()
        runs[("full", seed)] = protocol.run_cdsl(RunConfig(seed=seed))
        seconds[("full", seed)] = time.perf_counter() - start
        runs[("no_randmix", seed)] = protocol.ablate(RunConfig(seed=seed),
                                                     "no_randmix")
    start = time.perf_counter()
    runs[("repeat", 2022)] = protocol.run_cdsl(RunConfig(seed=2022))
    seconds[("repeat", 2022)] = time.perf_counter() - start
    return runs, seconds


# -------------------------------------------------------------- criterion 1

def _loss_value(kind, net, prev, x, labels):
    mode = "representation" if kind == "dis_repr" else "logits"
    ctx = objective.build_context(net, prev, x, labels, distill_on=mode)
    if kind == "ce":
        return objective.ce_loss(ctx)
    if kind == "pca":
        return objective.pca_loss(ctx)
    if kind == "source_pca":
        return objective.source_pca_loss(ctx)
    return objective.distill_loss(ctx)


def test_criterion_01_loss_gradients_match_finite_differences():
    start = time.perf_counter()
    h = 1e-5
    kinds = ("ce", "pca", "source_pca", "dis_logits", "dis_repr")
    for trial in range(10):
        rng = np.random.default_rng(100 + trial)
        classes = int(rng.integers(2, 5))
        d_in = int(rng.integers(3, 7))
        neck = (8, int(rng.integers(4, 9)))
        net = nets.build_network(d_in, classes, rng, hidden=(6,), bottleneck=neck)
        prev = nets.snapshot(nets.build_network(d_in, classes, rng, hidden=(6,),
                                                bottleneck=neck))
        n = int(rng.integers(3, 9))
        x = rng.normal(size=(n, d_in))
        labels = rng.integers(0, classes, size=n)
        kind = kinds[trial % len(kinds)]
        if kind in ("dis_logits", "dis_repr") and classes < 2:
            continue

        with dc.Tape() as tape:
            loss = _loss_value(kind, net, prev, x, labels)
        params = nets.parameters(net)
        dc.zero_grads(params)
        dc.backward(tape, loss, params=params)

        for p in params:
            numeric = np.zeros_like(p.values)
            flat = p.values.reshape(-1)
            for i in range(flat.size):
                keep = flat[i]
                flat[i] = keep + h
                up = _loss_value(kind, net, prev, x, labels).values.item()
                flat[i] = keep - h
                down = _loss_value(kind, net, prev, x, labels).values.item()
                flat[i] = keep
                numeric.reshape(-1)[i] = (up - down) / (2.0 * h)
            assert max_rel_err(p.grad, numeric) < 1e-4, (trial, kind)
    assert time.perf_counter() - start < 30.0


# -------------------------------------------------------------- criterion 2

def _oracle_t2pl(net, x, cfg, classes):
    feats = nets.feature_values(net, x)
    probs = nets.predict_probs(net, x)
    n = x.shape[0]
    m = max(1, int(n // (cfg.r_top * classes)))

    per_class = [sorted(range(n), key=lambda i: (-probs[i, k], i))[:m]
                 for k in range(classes)]
    union = sorted({i for members in per_class for i in members})

    centroids = []
    for k in range(classes):
        total = sum(probs[i, k] for i in union)
        centroids.append(sum(probs[i, k] * feats[i] for i in union) / total)

    member_idx, member_lab = [], []
    for k in range(classes):
        def cosine(i, k=k):
            scale = np.linalg.norm(feats[i]) * np.linalg.norm(centroids[k])
            return float(feats[i] @ centroids[k] / scale) if scale > 0 else 0.0
        ranked = sorted(range(n), key=lambda i: (-cosine(i), i))[:m]
        member_idx.extend(ranked)
        member_lab.extend([k] * m)

    kappa = int(n // (cfg.r_top_prime * classes))
    kappa = min(kappa, len(member_idx))
    out = []
    for i in range(n):
        order = sorted(range(len(member_idx)),
                       key=lambda e: (np.linalg.norm(feats[i] - feats[member_idx[e]]), e))
        picked = order[:kappa]
        votes = {k: 0 for k in range(classes)}
        dist = {k: 0.0 for k in range(classes)}
        for e in picked:
            k = member_lab[e]
            votes[k] += 1
            dist[k] += float(np.linalg.norm(feats[i] - feats[member_idx[e]]))
        top = max(votes.values())
        tied = [k for k in range(classes) if votes[k] == top]
        out.append(min(tied, key=lambda k: (dist[k], k)))
    return np.array(out)


def test_criterion_02_t2pl_matches_bruteforce_oracle():
    start = time.perf_counter()
    cfg = labeler.LabelerConfig()
    for trial in range(100):
        rng = np.random.default_rng(1000 + trial)
        classes = int(rng.integers(2, 6))
        n = int(rng.integers(20 * classes, 201))
        d_in = int(rng.integers(2, 5))
        net = nets.build_network(d_in, classes, rng, hidden=(8,),
                                 bottleneck=(6, 5))
        x = rng.normal(size=(n, d_in))
        got = labeler.t2pl(net, x, cfg, stage=1).labels
        want = _oracle_t2pl(net, x, cfg, classes)
        assert np.array_equal(got, want), trial
    assert time.perf_counter() - start < 60.0


# -------------------------------------------------------------- criterion 3

def test_criterion_03_metric_definitions_on_hand_matrix():
    rep = protocol.compute_metrics(np.array([[0.9, 0.5, 0.4],
                                             [0.8, 0.7, 0.5],
                                             [0.7, 0.6, 0.8]]))
    assert rep.tdg[2] == 0.45
    assert rep.tda[1] == 0.7
    assert rep.fa[0] == 0.75


# -------------------------------------------------------------- criterion 4

def _oracle_round_robin(distances, labels, quota):
    queues = {k: sorted((i for i in range(len(labels)) if labels[i] == k),
                        key=lambda i: (distances[i], i))
              for k in sorted(set(labels.tolist()))}
    chosen = []
    while len(chosen) < quota and any(queues.values()):
        for k in sorted(queues):
            if queues[k] and len(chosen) < quota:
                chosen.append(queues[k].pop(0))
    return chosen


def test_criterion_04_memory_invariants_and_selection_audit(rot5_runs):
    runs, _ = rot5_runs
    result = runs[("full", 2022)]
    assert result.config.memory_capacity == 200
    for entry in result.logs["stage_log"]:
        t = entry["stage"] + 1  # domains admitted so far
        assert entry["memory_total"] <= 200
        for size in entry["bucket_sizes"].values():
            assert size <= 200 // t
    assert result.memory.total() <= 200
    for record in result.logs["admissions"]:
        want = _oracle_round_robin(record["distances"], record["labels"],
                                   record["quota"])
        assert record["chosen"] == want, record["stage"]


# -------------------------------------------------------------- criterion 5

def test_criterion_05_randmix_structural_checks():
    rng = np.random.default_rng(7)
    cfg = randmix.RandMixConfig()
    x = rng.normal(size=(40, 6)) * 50.0  # drives the sigmoid toward saturation
    ensemble, weights = randmix.draw_ensemble(6, cfg, rng)
    encoded = [randmix.autoencode(ae, x) for ae in ensemble]
    mixed = randmix.mix(x, encoded, weights)
    assert np.all(mixed > 0.0) and np.all(mixed < 1.0)

    net = nets.build_network(6, 3, np.random.default_rng(0), hidden=(8,),
                             bottleneck=None)
    kept = [int(randmix.gate(net, mixed, r).sum())
            for r in (0.0, 0.3, 0.5, 0.7, 0.9, 1.0)]
    assert kept == sorted(kept, reverse=True)
    assert kept[0] == 40  # every sample clears a zero threshold

    only_x = np.zeros(cfg.n_aug + 1)
    only_x[0] = 1.7
    collapse = randmix.mix(x / 50.0, encoded, only_x)
    direct = 1.0 / (1.0 + np.exp(-(x / 50.0)))
    assert np.max(np.abs(collapse - direct)) < 1e-12

    again, _ = randmix.draw_ensemble(6, cfg, rng)
    assert any(not np.array_equal(a.enc, b.enc)
               for a, b in zip(ensemble, again))
    labels = np.zeros(40, dtype=int)
    aug_a, _ = randmix.augment_batch(net, x, labels, cfg, "source", rng)
    aug_b, _ = randmix.augment_batch(net, x, labels, cfg, "source", rng)
    assert not np.array_equal(aug_a, aug_b)


# -------------------------------------------------------------- criterion 6

def test_criterion_06_preset_determinism_byte_identical(rot5_runs, tmp_path):
    runs, seconds = rot5_runs
    assert seconds[("full", 2022)] < 120.0
    assert seconds[("repeat", 2022)] < 120.0
    protocol.write_results(runs[("full", 2022)], tmp_path / "a")
    protocol.write_results(runs[("repeat", 2022)], tmp_path / "b")
    first = (tmp_path / "a" / "matrix.csv").read_bytes()
    second = (tmp_path / "b" / "matrix.csv").read_bytes()
    assert first == second


# -------------------------------------------------------------- criterion 7

def test_criterion_07_randmix_ablation_hurts_mean_tdg(rot5_runs):
    runs, _ = rot5_runs
    full = np.mean([runs[("full", s)].metrics.tdg_avg for s in SEEDS])
    ablated = np.mean([runs[("no_randmix", s)].metrics.tdg_avg for s in SEEDS])
    assert full > ablated


# -------------------------------------------------------------- criterion 8

def test_criterion_08_t2pl_labels_beat_softmax_on_third_domain(rot5_runs):
    runs, _ = rot5_runs
    t2pl_accs, softmax_accs = [], []
    for seed in SEEDS:
        log = runs[("full", seed)].logs["label_log"]
        entry = {row["method"]: row["accuracy"]
                 for row in log if row["stage"] == 2 and row["epoch"] == 0}
        t2pl_accs.append(entry["t2pl"])
        softmax_accs.append(entry["softmax_baseline"])
    assert np.mean(t2pl_accs) >= np.mean(softmax_accs)


# -------------------------------------------------------------- criterion 9

def test_criterion_09_stationary_mode_equivalence():
    specs = synthdata.standard_sequences()["rot5"].specs
    cfg = RunConfig(epochs=4, steps_per_epoch=6, batch_size=24, replay_n=6,
                    hidden=(16,), bottleneck=(12, 8), seed=2022)
    helper = protocol.run_stationary(cfg, specs[0], specs[2])
    direct = protocol.run_cdsl(
        replace(cfg, stationary=True),
        sequence=synthdata.DomainSequence("pair", [specs[0], specs[2]]))
    assert abs(helper - direct.matrix.values[1, 1]) <= 1e-12
    # the three removals are observable: no memory, no distillation signal
    assert direct.memory is None
    assert all(row["dis"] == 0.0 for row in direct.logs["train_log"])


# -------------------------------------------------------------- criterion 10

def test_criterion_10_loss_decomposition_nonnegative(rot5_runs):
    runs, _ = rot5_runs
    inspected = 0
    for key in (("full", 2022), ("full", 2023), ("full", 2024),
                ("no_randmix", 2022)):
        for row in runs[key].logs["train_log"]:
            assert row["ce"] >= 0.0
            assert row["pca"] >= 0.0
            assert row["dis"] >= 0.0
            assert abs(row["total"] - (row["ce"] + row["pca"] + row["dis"])) <= 1e-12
            if row["stage"] == 0:
                assert row["dis"] == 0.0
            inspected += 1
    assert inspected > 0
