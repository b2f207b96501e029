"""End-to-end acceptance checks, one test (or class) per criterion.

Each test carries a ``criterion`` marker; conftest prints one PASS/FAIL line
per criterion at the end of the run. The training criteria are marked slow.
"""

import dataclasses
import hashlib
import time
from pathlib import Path

import numpy as np
import pytest

from coat import ablation as AB
from coat import attention as A
from coat import cascade as C
from coat import checks
from coat import config as CF
from coat import evaluation as E
from coat import geometry as G
from coat import losses as Lo
from coat import toybench as tb
from coat import train as TR
from coat.tensor import Tensor
from test_evaluation import brute_ap, brute_query, make_gallery
from test_geometry import naive_nms, random_boxes


def criterion(n, title):
    return pytest.mark.criterion(n, title)


# ---------------------------------------------------------------------------
# 1


@criterion(1, "full-model gradient check")
def test_full_gradcheck():
    t0 = time.perf_counter()
    report = checks.run_gradcheck("full", seed=0, tol=1e-4, eps=1e-5)
    elapsed = time.perf_counter() - t0
    print(report.table())
    print(f"max rel err {report.max_rel_err:.2e}, {elapsed:.0f} s")
    assert report.passed
    assert elapsed < 300


# ---------------------------------------------------------------------------
# 2


def valid_token_configs(n, rng):
    found = []
    while len(found) < n:
        h, w = (int(v) for v in rng.integers(3, 15, size=2))
        k = int(rng.integers(1, 6))
        s = int(rng.integers(1, 4))
        p = int(rng.integers(0, k // 2 + 1))
        d = int(rng.integers(1, 4))
        hh, ww = (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1
        if hh < 1 or ww < 1 or hh % d or ww % d:
            continue
        found.append((h, w, k, s, p, d))
    return found


@criterion(2, "token count formula")
def test_token_count_matches_tokenizer():
    rng = np.random.default_rng(2)
    configs = valid_token_configs(50, rng)
    assert len(set(configs)) == 50
    for h, w, k, s, p, d in configs:
        block = A.OccludedAttention(
            3,
            (h, w),
            rng,
            tokenizer=A.TokenizerConfig(scales=(A.ScaleSpec(k, s, p),), patch=d),
            attention=A.AttentionConfig(heads=1),
        )
        tokens = block.tokenize(Tensor(rng.normal(size=(2, h, w, 3))))[0]
        assert A.token_count(h, w, k, s, p, d) == tokens.shape[1], (h, w, k, s, p, d)


# ---------------------------------------------------------------------------
# 3


def row_bag(a):
    rows = sorted(r.tobytes() for r in a.reshape(-1, a.shape[-1]))
    return hashlib.sha256(b"".join(rows)).hexdigest()


@criterion(3, "token exchange semantics")
def test_exchange_semantics():
    rng = np.random.default_rng(3)
    for _ in range(100):
        p = int(rng.integers(2, 9))
        grid = tuple(int(v) for v in rng.integers(1, 7, size=2))
        d = int(rng.integers(1, 6))
        x = Tensor(rng.normal(size=(p, grid[0] * grid[1], d)))
        partner = A.cyclic_partner(p, rng)

        empty = A.ExchangePlan(np.zeros(grid, bool), partner)
        assert A.exchange_tokens(x, empty).data.tobytes() == x.data.tobytes()

        full = A.ExchangePlan(np.ones(grid, bool), partner)
        assert A.exchange_tokens(x, full).data.tobytes() == x.data[partner].tobytes()

        plan = A.plan_exchange(p, grid, rng)
        y = A.exchange_tokens(x, plan).data
        pos = plan.positions
        assert row_bag(y[:, pos]) == row_bag(x.data[:, pos])
        assert y[:, plan.kept].tobytes() == x.data[:, plan.kept].tobytes()


# ---------------------------------------------------------------------------
# 4


@criterion(4, "infer equals train with empty mask")
def test_infer_matches_train_without_exchange():
    rng = np.random.default_rng(4)
    for scales in [(A.ScaleSpec(1, 1, 0),), (A.ScaleSpec(1, 1, 0), A.ScaleSpec(3, 1, 1)), (A.ScaleSpec(3, 2, 1),)]:
        for p in (2, 3, 5):
            block = A.OccludedAttention(
                8, (6, 6), rng, tokenizer=A.TokenizerConfig(scales=scales), attention=A.AttentionConfig(heads=2)
            )
            x = Tensor(rng.normal(size=(p, 6, 6, 8)))
            plan = A.ExchangePlan(np.zeros(block.grid, bool), A.cyclic_partner(p, rng))
            assert block(x, "infer").data.tobytes() == block(x, "train", plan).data.tobytes()


# ---------------------------------------------------------------------------
# 5


class TestOracleEquivalence:
    pytestmark = criterion(5, "NMS and AP against brute force")

    def test_nms(self):
        rng = np.random.default_rng(50)
        for _ in range(1000):
            n = int(rng.integers(0, 51))
            boxes = random_boxes(rng, n, size=60.0)
            if rng.random() < 0.3:
                scores = rng.integers(0, 4, size=n).astype(float)  # force ties
            else:
                scores = rng.uniform(size=n)
            thr = float(rng.uniform(0.1, 0.9))
            got = G.nms(boxes, scores, thr).tolist()
            assert got == naive_nms(boxes.tolist(), scores.tolist(), thr)

    def test_detection_ap(self):
        rng = np.random.default_rng(51)
        for _ in range(1000):
            n = int(rng.integers(0, 11))
            flags = rng.random(n) < 0.5
            scores = rng.integers(0, 5, size=n) / 4 if rng.random() < 0.3 else rng.uniform(size=n)
            n_gt = int(flags.sum() + rng.integers(0, 3))
            ranked = [f for _, _, f in sorted(zip(-scores, range(n), flags))]
            got = E.detection_ap(flags, scores, n_gt)["ap"]
            assert abs(got - brute_ap(ranked, n_gt)) <= 1e-9

    def test_search_map(self):
        rng = np.random.default_rng(52)
        for _ in range(1000):
            gallery = make_gallery(rng, n_scenes=int(rng.integers(1, 6)))
            queries = [E.QueryItem(i, rng.normal(size=4)) for i in range(3)]
            got = E.search_map(queries, gallery)
            want = [
                brute_query(q.embedding, q.identity, gallery)
                for q in queries
                if any(q.identity in g.gt_ids for g in gallery)
            ]
            if not want:
                assert got["n_queries"] == 0
                continue
            assert abs(got["map"] - np.mean([w[0] for w in want])) <= 1e-9
            assert abs(got["top1"] - np.mean([w[1] for w in want])) <= 1e-9


# ---------------------------------------------------------------------------
# 6


class TestOimHygiene:
    pytestmark = criterion(6, "OIM buffer hygiene")

    def test_unit_rows_after_many_updates(self):
        rng = np.random.default_rng(6)
        state = Lo.OimState.create(n_ids=10, dim=16, capacity=32, rng=rng)
        for _ in range(1000):
            k = int(rng.integers(1, 9))
            emb = rng.normal(size=(k, 16)) * rng.uniform(1e-3, 1e3)
            ids = rng.integers(-1, 10, size=k)
            ids[ids == -1] = Lo.UNLABELED
            state.update(emb, ids)
        assert state.cq_count == state.capacity
        np.testing.assert_allclose(np.linalg.norm(state.lut, axis=1), 1.0, atol=1e-6)
        np.testing.assert_allclose(np.linalg.norm(state.cq, axis=1), 1.0, atol=1e-6)

    def test_fifo_eviction_exhaustive(self):
        cap = 8
        for total in range(0, 4 * cap + 1):
            for batch in range(1, cap + 1):
                state = Lo.OimState.create(2, 3, cap, np.random.default_rng(0))
                rows = np.eye(3)[np.zeros(total, int)] * np.arange(1, total + 1)[:, None]
                rows[:, 1] = np.arange(total)  # distinct directions so order is visible after normalisation
                for start in range(0, total, batch):
                    state.push(rows[start : start + batch])
                want = rows[max(0, total - cap) :]
                want = want / np.linalg.norm(want, axis=1, keepdims=True)
                np.testing.assert_array_equal(state.queue(), want)


# ---------------------------------------------------------------------------
# 7


@criterion(7, "cascade positive-set monotonicity")
def test_positive_sets_nest():
    spec = tb.SplitSpec(n_train_scenes=100, n_test_scenes=16, n_identities=16, n_unlabeled=4, rng_seed=7)
    bench = tb.generate(spec)
    rng = np.random.default_rng(7)
    assert len(bench.train) == 100
    for sc in bench.train:
        props = G.make_proposals(sc.boxes, sc.hw, 64, rng, jitter=0.4, min_jitter=0.0)
        boxes = np.concatenate([props.boxes, random_boxes(rng, 16, size=90.0)])
        sets = {u: set(np.flatnonzero(C.assign_labels(boxes, sc.boxes, sc.labels, u).positive)) for u in (0.5, 0.6, 0.7)}
        assert sets[0.6] <= sets[0.5]
        assert sets[0.7] <= sets[0.6]
        assert sets[0.5]  # the inclusion is not vacuous


# ---------------------------------------------------------------------------
# 10


def tree_bytes(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.mark.slow
@criterion(10, "bit-identical checkpoints")
def test_same_seed_same_checkpoints(tmp_path):
    cfg = dataclasses.replace(CF.RunConfig(), precision=64, epochs=2)
    bench = tb.generate(cfg.data)
    for name in ("a", "b"):
        TR.train(cfg, bench, tmp_path / name)
    a = tree_bytes(tmp_path / "a")
    b = tree_bytes(tmp_path / "b")
    assert sorted(a) == sorted(b)
    assert any(k.endswith("weights.bin") for k in a)
    for k in a:
        assert a[k] == b[k], k


# ---------------------------------------------------------------------------
# 8 and 9: full toy training runs


SEEDS = (0, 1, 2, 3, 4)
# every directional comparison is (better, worse, metric); the shared baseline
# is the default model, which is 3-stage, rising, occluded and ReID-free at stage 1
COMPARISONS = {
    "3-stage >= 1-stage mAP": (("stages", "3-stage"), ("stages", "1-stage"), "map"),
    "rising >= flat-0.7 mAP": (("iou-schedule", "rising"), ("iou-schedule", "flat-0.7"), "map"),
    "occluded >= vanilla top-1": (("attention", "occluded"), ("attention", "vanilla"), "top1"),
    "no stage-1 ReID >= stage-1 ReID mAP": (("reid-stage1", "off"), ("reid-stage1", "on"), "map"),
}


@pytest.fixture(scope="session")
def toy_runs(tmp_path_factory):
    """Train-and-evaluate cache keyed by the full run config, so identical variants train once."""
    base = CF.RunConfig()
    bench = tb.generate(base.data)
    root = tmp_path_factory.mktemp("toy")
    cache = {}

    def run(cfg):
        key = CF.dumps(cfg)
        if key not in cache:
            t0 = time.perf_counter()
            res = AB.run_variant(cfg, bench, root / hashlib.sha1(key.encode()).hexdigest()[:12])
            cache[key] = dict(res, seconds=time.perf_counter() - t0)
        return cache[key]

    run.base = base
    run.bench = bench
    return run


@pytest.mark.slow
@criterion(8, "toy end-to-end convergence")
def test_toy_convergence(toy_runs):
    base = toy_runs.base
    assert (base.data.n_identities, base.data.n_train_scenes, base.epochs, base.seed) == (16, 64, 30, 0)
    assert len(toy_runs.bench.gallery) == 16

    trained = toy_runs(base)
    state = TR.build_state(base, base.data.n_identities)
    random_report, _ = TR.evaluate_model(state.model, toy_runs.bench, [16], base.eval_seed, base.precision)
    random = random_report.retrieval
    print(f"trained: mAP {trained['map']:.3f} top-1 {trained['top1']:.3f} in {trained['seconds']:.0f} s")
    print(f"random weights: mAP {random['map']:.3f} top-1 {random['top1']:.3f}")
    verdicts = {
        f"trained top-1 {trained['top1']:.4f} >= 0.80": trained["top1"] >= 0.80,
        f"trained mAP {trained['map']:.4f} >= 0.60": trained["map"] >= 0.60,
        f"random-weight top-1 {random['top1']:.4f} <= 0.25": random["top1"] <= 0.25,
        f"runtime {trained['seconds']:.0f} s < 900 s": trained["seconds"] < 15 * 60,
    }
    assert all(verdicts.values()), [k for k, ok in verdicts.items() if not ok]


@pytest.mark.slow
@criterion(9, "directional ablations over 5 seeds")
def test_directional_ablations(toy_runs):
    failures = []
    for name, (better, worse, metric) in COMPARISONS.items():
        a = [toy_runs(AB.variant_config(toy_runs.base, *better, s))[metric] for s in SEEDS]
        b = [toy_runs(AB.variant_config(toy_runs.base, *worse, s))[metric] for s in SEEDS]
        diff = float(np.mean(a) - np.mean(b))
        print(f"{name}: {np.round(a, 3).tolist()} vs {np.round(b, 3).tolist()} mean diff {diff:+.4f}")
        if diff < 0:
            failures.append(f"{name} ({diff:+.4f})")
    assert not failures, failures
