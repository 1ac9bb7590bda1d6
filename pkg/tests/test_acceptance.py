"""Acceptance criteria 1-10.

Each test records one PASS/FAIL line; the lines are printed together at the
end of the pytest run (see ``pytest_terminal_summary`` in conftest.py).

Criteria 2-4 (and the trained models used by 5 and 6) come from the synthetic
ordering experiment.  Its checkpoints and results are cached under
``$MULTIPIVOT_CACHE`` (default ``<repo>/.multipivot-cache``).  With a cold
cache the first run trains all models, which takes hours on one CPU core;
``python -m multipivot.experiment`` fills the same cache.
"""
import os
import time
from pathlib import Path

import numpy as np
import pytest

from multipivot import autograd as ag
from multipivot.autograd import Tensor
from multipivot.corpus import SynthSpec, generate_synthetic_nway, load_or_generate, oracle_accuracy
from multipivot.evaluation import run_grid
from multipivot.experiment import ExperimentConfig, run_experiment, summarize, train_models
from multipivot.inference import decode_step, encode, translate
from multipivot.model import GateParams, fuse_attention
from multipivot.training import TrainConfig, average_checkpoints, train
from multipivot.waitk import multi_source_simultaneous_decode, simultaneous_greedy_decode, visible_prefix

from conftest import random_ids, tiny_model

RESULTS: dict[int, tuple[bool, str]] = {}
CACHE = Path(os.environ.get("MULTIPIVOT_CACHE", Path(__file__).resolve().parents[1] / ".multipivot-cache"))
CONFIG = ExperimentConfig()


def record(n: int, ok: bool, detail: str) -> None:
    RESULTS[n] = (bool(ok), detail)
    assert ok, f"criterion {n}: {detail}"


@pytest.fixture(scope="module")
def experiment():
    results = run_experiment(CONFIG, CACHE)
    return results, summarize(results, CONFIG.spec(0).pivots, CONFIG.direct_k)


@pytest.fixture(scope="module")
def trained():
    seed = CONFIG.seeds[0]
    return seed, train_models(CONFIG, seed, CACHE)


def _majority(rows):
    wins = sum(ok for ok, _ in rows)
    return wins >= 2 and len(rows) == 3, wins


# -- 1: absolute BLEU is out of reach; the substitute is criteria 2-4 ------------------------
def test_criterion_01_ordering_substitute(experiment):
    results, _ = experiment
    needed = {"full", "4,4", "2,6", "6,2"}
    labels = set(CONFIG.spec(0).pivots) | {"multi"}
    ok = len(results) == 3 and all(
        set(r["pivot"]) == labels and all(needed <= set(r["pivot"][p]) for p in labels)
        and {"full", str(CONFIG.direct_k)} <= set(r["direct"]) for r in results)
    record(1, ok, "absolute BLEU is not reproduced; the synthetic ordering analogue has every cell "
                  f"criteria 2-4 need for {len(results)} seeds")


# -- 2-4: ordering on the synthetic corpus ---------------------------------------------------
def test_criterion_02_full_sentence_ordering(experiment):
    ok, wins = _majority(experiment[1]["full_sentence"])
    record(2, ok, f"{wins}/3 seeds; " + " | ".join(d for _, d in experiment[1]["full_sentence"]))


def test_criterion_03_simultaneous_ordering(experiment):
    ok, wins = _majority(experiment[1]["simultaneous"])
    record(3, ok, f"{wins}/3 seeds; " + " | ".join(d for _, d in experiment[1]["simultaneous"]))


def test_criterion_04_p2t_dominance(experiment):
    ok, wins = _majority(experiment[1]["p2t_dominance"])
    record(4, ok, f"{wins}/3 seeds; " + " | ".join(d for _, d in experiment[1]["p2t_dominance"]))


# -- 5: k >= source length is full-sentence decoding ----------------------------------------
def test_criterion_05_policy_exactness(trained):
    seed, models = trained
    spec = CONFIG.spec(seed)
    test = load_or_generate(spec, CACHE)["test"]
    direct, multi = models["direct"], models["p2t_multi"]
    mismatches = checked = 0
    for ex in test.examples[:1000]:
        x = direct.src_vocab.encode(ex[0])
        full = translate(direct, [x], CONFIG.max_steps)
        for k in (len(x), len(x) + 3):
            sim, _ = simultaneous_greedy_decode(direct, x, k, CONFIG.max_steps)
            mismatches += sim != full
            checked += 1
        pivots = [multi.src_vocab.encode(ex[1 + i]) for i in range(len(spec.pivots))]
        full = translate(multi, pivots, CONFIG.max_steps)
        sim, _ = multi_source_simultaneous_decode(multi, pivots, max(map(len, pivots)), CONFIG.max_steps)
        mismatches += sim != full
        checked += 1
    record(5, mismatches == 0 and len(test) >= 1000,
           f"{mismatches} mismatches in {checked} decodes over {min(len(test), 1000)} test sentences")


# -- 6: causality by suffix perturbation ----------------------------------------------------
def test_criterion_06_causality(trained):
    seed, models = trained
    m = models["direct"]
    probe_spec = CONFIG.spec(seed + 1000)
    probe_spec.sizes = {"train": 0, "dev": 0, "test": 500}
    probe = generate_synthetic_nway(probe_spec)["test"]
    sources = [m.src_vocab.encode(ex[0]) for ex in probe.examples if len(ex[0]) <= 8]
    rng = np.random.default_rng(seed)
    hi = len(m.src_vocab)
    violations = checks = 0
    for x in sources:
        for k in (1, 2, 3, 4, 6):
            out, _ = simultaneous_greedy_decode(m, x, k, CONFIG.max_steps)
            for i in range(1, len(out) + 1):
                v = visible_prefix(k, i, len(x))
                if v == len(x):
                    break
                variants = [x[:v] + random_ids(rng, len(x) - v, hi=hi)]
                for pos in range(v, len(x)):
                    y = list(x)
                    y[pos] = int(rng.integers(4, hi - 1))
                    y[pos] += y[pos] >= x[pos]          # always a different token
                    variants.append(y)
                for y in variants:
                    other, _ = simultaneous_greedy_decode(m, y, k, i)
                    violations += len(other) < i or other[:i] != out[:i]
                    checks += 1
    record(6, violations == 0 and checks > 0,
           f"{violations} violations in {checks} perturbations over {len(sources)} sources of length <= 8")


# -- 7: gradient suite ------------------------------------------------------------------------
def test_criterion_07_gradients():
    from gradcheck import check_op
    from test_autograd import OPS, _case
    from test_model import end_to_end_gradient_errors
    t0 = time.time()
    failures = []
    for name in OPS:
        for seed in range(4):
            build, inputs = _case(name, np.random.default_rng([seed, OPS.index(name)]))
            try:
                check_op(build, inputs, seed=seed, rtol=1e-4)
            except AssertionError as e:
                failures.append(f"{name}/{seed}: {e}")
    errs, picks = end_to_end_gradient_errors()
    gate = sum(".gate" in n for n, _ in picks)
    elapsed = time.time() - t0
    ok = not failures and len(errs) >= 200 and gate > 0 and errs.max() < 1e-3 and elapsed < 300
    record(7, ok, f"{len(OPS) * 4} op checks ({len(failures)} failed); end-to-end {len(errs)} coordinates "
                  f"({gate} gate), max rel err {errs.max():.2e}; {elapsed:.0f}s")


# -- 8: fusion properties ---------------------------------------------------------------------
def test_criterion_08_fusion():
    rng = np.random.default_rng(8)
    h = 16
    zero = GateParams(Tensor(np.zeros((2 * h, h))), Tensor(np.zeros(h)))
    mean_err = 0.0
    for _ in range(100):
        a1, a2 = rng.standard_normal((2, 4, h)) * rng.choice([1e-3, 1, 1e3])
        out = fuse_attention([Tensor(a1), Tensor(a2)], zero).data
        mean_err = max(mean_err, float(np.abs(out - (a1 + a2) / 2).max()))
    outside = 0
    for _ in range(10_000):
        g = GateParams(Tensor(rng.standard_normal((2 * h, h)) * rng.choice([0.1, 1, 10])),
                       Tensor(rng.standard_normal(h) * 3))
        a1, a2 = rng.standard_normal((2, 1, h)) * rng.choice([0.01, 1, 100])
        out = fuse_attention([Tensor(a1), Tensor(a2)], g).data
        outside += int(np.any(out < np.minimum(a1, a2)) or np.any(out > np.maximum(a1, a2)))
    m2 = tiny_model(2, seed=11)
    for l in range(2):
        m2.params[f"dec.layer{l}.gate.W"].data = rng.standard_normal((2 * 16, 16))
        m2.params[f"dec.layer{l}.gate.b"].data = rng.standard_normal(16)
    m1 = m2.single_source()
    dup_err = 0.0
    with ag.no_grad():
        for _ in range(50):
            x = random_ids(rng, int(rng.integers(1, 12)))
            prefix = [1] + random_ids(rng, int(rng.integers(0, 8)))
            e = encode(m2, x)
            dup_err = max(dup_err, float(np.abs(decode_step(m2, [e, e], prefix) - decode_step(m1, [e], prefix)).max()))
    ok = mean_err < 1e-12 and outside == 0 and dup_err < 1e-10
    record(8, ok, f"zero gate |mean error| {mean_err:.1e}; {outside}/10000 outside the convex bound; "
                  f"duplicate-source logit error {dup_err:.1e}")


# -- 9: protocol fidelity -----------------------------------------------------------------------
def test_criterion_09_protocol():
    from test_training import _data, _model
    data, sv, tv = _data(16)
    stops = []
    for patience in (1, 2, 4):
        res = train(_model(sv, tv), data, data, TrainConfig(lr=0.0, eval_every=2, patience=patience,
                                                            max_steps=200, batch_size=8))
        stops.append(res.stopped_early and len(res.checkpoints) == patience + 1)
    rng = np.random.default_rng(9)
    snaps = [{"w": rng.standard_normal((6, 5)), "b": rng.standard_normal(5)} for _ in range(7)]
    avg = average_checkpoints(snaps)
    avg_err = max(abs(avg[key][idx] - sum(s[key][idx] for s in snaps) / len(snaps))
                  for key in snaps[0] for idx in np.ndindex(snaps[0][key].shape))
    s2p = [tiny_model(1, seed=i, tgt=18, tgt_prefix="p") for i in range(2)]
    p2t = tiny_model(2, seed=5, src=18, src_prefix="p")
    srcs = [random_ids(rng, int(rng.integers(1, 9))) for _ in range(4)]
    refs = [random_ids(rng, int(rng.integers(1, 9))) for _ in range(4)]
    grid = run_grid("multi", {"s2p": s2p, "p2t": p2t}, srcs, refs, [1, 2, 4, 6, 8], max_steps=10)
    ok = all(stops) and avg_err < 1e-12 and grid.num_cells == 25
    record(9, ok, f"early stopping exact for patience 1/2/4: {all(stops)}; averaging error {avg_err:.1e}; "
                  f"grid cells {grid.num_cells}")


# -- 10: synthetic ground truth ---------------------------------------------------------------------
def test_criterion_10_oracle():
    specs = [CONFIG.spec(s) for s in CONFIG.seeds]
    for spec in specs:
        spec.sizes = {"train": 0, "dev": 0, "test": 2000}
    specs += [SynthSpec.default(seed=s, vocab_size=v, confused=c, reorder_window=w,
                                sizes={"train": 0, "dev": 0, "test": 1000})
              for s, (v, c, w) in enumerate([(24, 12, 0), (32, 8, 2), (48, 24, 3), (16, 16, 4)])]
    joint, single_max = 1.0, 0.0
    for spec in specs:
        test = generate_synthetic_nway(spec)["test"]
        joint = min(joint, oracle_accuracy(spec, test, list(range(len(spec.pivots)))))
        for p in range(len(spec.pivots)):
            single_max = max(single_max, oracle_accuracy(spec, test, [p]))
    record(10, joint == 1.0 and single_max < 1.0,
           f"{len(specs)} corpora: two-pivot oracle exact match {joint:.3f}; best single-pivot {single_max:.3f}")
