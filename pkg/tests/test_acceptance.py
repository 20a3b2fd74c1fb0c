"""Acceptance criteria 1 to 9, one test each, each printing a PASS/FAIL line."""

import math
import time

import numpy as np
import pytest

from _support import blob_dataset, cos_values, tiny_setup, total_loss_fn
from cleannet import autograd as ag
from cleannet.autograd import Graph
from cleannet.bench import run_classification_experiment, run_detection_experiment, bench_hyperparams
from cleannet.checkpoint import Checkpoint, dumps, loads
from cleannet.classifier import ClassifierConfig, alternating_train, weight_hard, weighted_nll
from cleannet.data import (
    Hyperparams,
    ReferenceSet,
    load_features,
    parse_labels,
    save_features,
    save_labels,
    split_dataset,
)
from cleannet.detection import THRESHOLD_GRID, detect, make_report, read_report
from cleannet.model import CleanNet, encode_reference, init_params, supervised_cos_loss, unsup_cos_loss
from cleannet.references import build_reference_sets, kmeans
from cleannet.synthetic import SyntheticSpec, choose_held_out, generate_dataset
from conftest import ACCEPTANCE_LINES
from test_references import brute_force_two_means, random_instance

pytestmark = pytest.mark.filterwarnings("ignore::RuntimeWarning")

SEEDS = range(5)

# first blessed run of the default generator settings at seed 0, pinned
PINNED_DETECTION = {"cleannet": 0.044506, "classification_filtering": 0.060294,
                    "average_baseline": 0.067063, "naive": 0.230659}


def verdict(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


def test_criterion_1_gradient_integrity():
    start = time.perf_counter()
    worst = 0.0
    for seed in range(3):
        p, hp, refs, batch = tiny_setup(seed=seed)
        kink_gap = np.min(np.abs(cos_values(p, hp, refs, batch) - hp.rho))
        assert kink_gap > 1e-3
        assert sorted(set(batch.verification.tolist())) == [-1, 0, 1]
        worst = max(worst, ag.grad_check(total_loss_fn(hp, refs, batch), p))
    elapsed = time.perf_counter() - start
    verdict(1, worst < 1e-4 and elapsed < 10, f"max rel err {worst:.2e}, {elapsed:.2f}s")


def test_criterion_2_loss_case_table():
    X = np.zeros((1, 5))
    b = math.log((math.e ** 2 - math.e) / 2)  # logits (1, b, b) give p(true) = 1/e
    nll_cases = [
        (weighted_nll(np.zeros((2, 5)), [1, 2], [0.0, 0.0], {"W1": np.ones((5, 3)), "b1": np.ones(3)}), 0.0),
        (weighted_nll(X, [1], [1.0], {"W1": np.zeros((5, 3)), "b1": np.array([40.0, 0.0, 0.0])}), 0.0),
        (weighted_nll(X, [1], [0.5], {"W1": np.zeros((5, 3)), "b1": np.array([1.0, b, b])}), 0.5),
    ]
    cases = [
        (supervised_cos_loss(1.0, 1, 1.0, 0.1), 0.0),
        (supervised_cos_loss(0.5, 0, 1.0, 0.1), 0.4),
        (supervised_cos_loss(-0.37, -1, 1.0, 0.1), 0.0),
        (unsup_cos_loss(0.1, 0.1), 0.9),
        (unsup_cos_loss(0.05, 0.1), 0.0),
        (unsup_cos_loss(1.0, 0.1), 0.0),
        *nll_cases,
    ]
    errs = [abs(float(v.data) - want) for v, want in cases]
    # all-zero weights also give a zero gradient
    g = Graph()
    q = g.params_from({"W1": np.ones((5, 3)), "b1": np.ones(3)})
    grads = ag.backward(g, weighted_nll(np.ones((2, 5)), [1, 2], [0.0, 0.0], q))
    zero_grad = all(not v.any() for v in grads.values())
    verdict(2, len(cases) == 9 and max(errs) <= 1e-12 and zero_grad,
            f"{len(cases)} cases, max abs err {max(errs):.1e}")


def test_criterion_3_set_encoder_invariance():
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        d = int(rng.integers(2, 10))
        p = init_params(d, Hyperparams(hidden=8, embed=4, ae_hidden=8), seed)
        V = rng.standard_normal((int(rng.integers(1, 20)), d))
        phi = encode_reference(V, p).data
        perm = encode_reference(V[rng.permutation(len(V))], p).data
        dup = encode_reference(np.concatenate([V, V]), p).data
        worst = max(worst, np.abs(perm - phi).max(), np.abs(dup - phi).max())
    verdict(3, worst < 1e-10, f"100 sets, max change {worst:.1e}")


def test_criterion_4_detection_consistency():
    rng = np.random.default_rng(0)
    d, L = 6, 5
    hp = Hyperparams(hidden=8, embed=4, ae_hidden=8)
    model = CleanNet(init_params(d, hp, 0), hp)
    refs = {c: ReferenceSet(c, rng.standard_normal((4, d))) for c in range(1, L + 1)}
    X, y = rng.standard_normal((1000, d)), rng.integers(1, L + 1, 1000)
    scores = model.score(X, y, refs)
    equal = all(np.array_equal(weight_hard(X, y, model, refs, delta), detect(scores, delta))
                for delta in (-1.0, -0.3, 0.0, 0.1, float(np.median(scores)), 0.9, 1.0))
    nested = True
    prev = detect(scores, THRESHOLD_GRID[0]).astype(bool)
    for delta in THRESHOLD_GRID[1:]:
        cur = detect(scores, delta).astype(bool)
        nested &= not np.any(cur & ~prev)
        prev = cur
    verdict(4, equal and nested, f"weight_hard == detect on 1000 samples: {equal}; nested over grid: {nested}")


def test_criterion_5_detection_ordering():
    start = time.perf_counter()
    rep = run_detection_experiment(SyntheticSpec(seed=0))
    elapsed = time.perf_counter() - start
    e = {k: v["overall"] for k, v in rep.detection.items()}
    ordered = e["cleannet"] < e["classification_filtering"] < e["naive"] and e["cleannet"] < e["average_baseline"]
    pinned = all(abs(e[k] - v) < 5e-4 for k, v in PINNED_DETECTION.items())
    detail = ", ".join(f"{k} {100 * v:.2f}%" for k, v in e.items())
    verdict(5, ordered and pinned and abs(e["naive"] - 0.25) < 0.05 and elapsed < 300,
            f"{detail}, {elapsed:.1f}s")


def test_criterion_6_transfer():
    held, verified, naive = [], [], []
    for seed in SEEDS:
        spec = SyntheticSpec(seed=seed, held_out_classes=tuple(choose_held_out(20, 10, seed)))
        d = run_detection_experiment(spec).detection
        held.append(d["cleannet"]["held_out"])
        verified.append(d["cleannet"]["verified_classes"])
        naive.append(d["naive"]["held_out"])
    h, v, n = np.mean(held), np.mean(verified), np.mean(naive)
    verdict(6, h <= 0.7 * n and h <= 2 * v,
            f"held-out {100 * h:.2f}% vs naive {100 * n:.2f}% and verified {100 * v:.2f}%")


def test_criterion_7_classification_gain():
    accs = []
    for seed in SEEDS:
        a = run_classification_experiment(SyntheticSpec(seed=seed)).accuracies
        accs.append((a["soft"], a["hard"], a["unweighted"]))
    accs = np.array(accs)
    ordered = int(np.sum((accs[:, 0] >= accs[:, 1]) & (accs[:, 1] >= accs[:, 2])))
    gain = float(np.mean(accs[:, 0] - accs[:, 2]))
    means = " / ".join(f"{100 * m:.2f}" for m in accs.mean(0))
    verdict(7, ordered >= 4 and gain > 0,
            f"soft>=hard>=unweighted in {ordered}/5 seeds, mean soft/hard/unweighted {means}%")


def test_criterion_8_alternating_training():
    ds, _ = generate_dataset(SyntheticSpec(seed=0))
    train, val, _ = split_dataset(ds, (0.6, 0.2, 0.2), seed=0)
    res = alternating_train(train, val, bench_hyperparams(seed=0), ClassifierConfig(seed=0),
                            patience=1, max_rounds=2)
    r1, r2 = res.rounds[0]["step1_accuracy"], res.rounds[1]["accuracy"]
    verdict(8, len(res.rounds) == 2 and r2 >= r1, f"round-2 {100 * r2:.2f}% vs round-1 unweighted {100 * r1:.2f}%")


def _format_round_trips(tmp_path):
    rng = np.random.default_rng(0)
    ok = True
    for i in range(20):
        n, d = int(rng.integers(0, 30)), int(rng.integers(1, 8))
        X = rng.standard_normal((n, d)).astype(np.float32).astype(np.float64)
        save_features(tmp_path / f"f{i}.bin", X)
        ok &= load_features(tmp_path / f"f{i}.bin").tobytes() == X.tobytes()
        y = rng.integers(1, 6, n)
        lab = rng.integers(-1, 2, n)
        save_labels(tmp_path / f"l{i}.tsv", y, lab)
        y2, lab2 = parse_labels((tmp_path / f"l{i}.tsv").read_text(), n, 5)
        ok &= np.array_equal(y, y2) and np.array_equal(lab, lab2)
        ck = Checkpoint("t", {"a": rng.standard_normal((n, d))}, {"K": i})
        ok &= dumps(loads(dumps(ck))) == dumps(ck)
        if n:
            rep = make_report(rng.uniform(-1, 1, n), y, lab, 0.1)
            rep.save(tmp_path / f"r{i}.tsv")
            ok &= read_report(tmp_path / f"r{i}.tsv").to_tsv() == rep.to_tsv()
    return bool(ok)


def test_criterion_9_determinism_and_formats(tmp_path):
    spec = SyntheticSpec(classes=6, dim=12, per_class=60, held_out_classes=(1, 2))
    hp = bench_hyperparams(epochs=4)
    runs = [run_detection_experiment(spec, hp, ClassifierConfig(epochs=4)).to_tsv() for _ in range(2)]
    g1, g2 = generate_dataset(SyntheticSpec(seed=3))[0], generate_dataset(SyntheticSpec(seed=3))[0]
    ds, _ = blob_dataset(seed=1)
    r1, r2 = (build_reference_sets(ds, 5, seed=4) for _ in range(2))
    deterministic = (runs[0] == runs[1] and g1.features.tobytes() == g2.features.tobytes()
                     and all(r1[c].vectors.tobytes() == r2[c].vectors.tobytes() for c in r1))
    formats = _format_round_trips(tmp_path)
    monotone = all(np.all(np.diff(kmeans(*random_instance(s), seed=s, n_init=1).history) <= 0) for s in range(100))
    oracle = True
    for s in range(20):
        X = np.sort(np.random.default_rng(s).uniform(-5, 5, 8))[:, None]
        oracle &= abs(kmeans(X, 2, seed=s).inertia - brute_force_two_means(X)) <= 1e-12 * max(1.0, X.var())
    verdict(9, deterministic and formats and monotone and bool(oracle),
            f"deterministic {deterministic}, round trips {formats}, inertia monotone {monotone}, "
            f"2-means oracle {bool(oracle)}")
