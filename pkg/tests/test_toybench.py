import hashlib

import numpy as np
import pytest

from coat import toybench as tb
from coat.geometry import box_iou


def small_spec(**kw):
    base = dict(n_train_scenes=6, n_test_scenes=32, n_identities=16, n_unlabeled=4, gallery_size=16, rng_seed=7)
    base.update(kw)
    return tb.SplitSpec(**base)


def digest(bench: tb.Benchmark) -> str:
    h = hashlib.sha256()
    for sc in bench.train + bench.test + [q.scene for q in bench.queries]:
        h.update(sc.scene_id.encode())
        h.update(sc.image.tobytes())
        h.update(sc.boxes.tobytes())
        h.update(sc.labels.tobytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def bench():
    return tb.generate(small_spec())


def test_deterministic(bench):
    assert digest(tb.generate(small_spec())) == digest(bench)


def test_seed_changes_output(bench):
    assert digest(tb.generate(small_spec(rng_seed=8))) != digest(bench)


def test_every_query_identity_in_gallery(bench):
    gallery_ids = set()
    for sc in bench.gallery:
        gallery_ids.update(sc.labels.tolist())
    for q in bench.queries:
        assert q.identity in gallery_ids
    assert {q.identity for q in bench.queries} == set(range(16))


def test_unlabeled_count(bench):
    assert sum(not i.labeled for i in bench.identities) == 4
    seen = set()
    for sc in bench.train + bench.test:
        seen.update(sc.labels.tolist())
    assert tb.UNLABELED in seen
    assert all(l == tb.UNLABELED or 0 <= l < 16 for l in seen)


def test_ids_unique(bench):
    ids = [i.id for i in bench.identities]
    assert len(ids) == len(set(ids))


def test_scene_invariants(bench):
    for sc in bench.train + bench.test:
        H, W = sc.hw
        assert sc.image.shape == (96, 160, 3)
        assert sc.image.min() >= 0 and sc.image.max() <= 1
        b = sc.boxes
        assert 1 <= len(b) <= 5
        assert np.all((0 <= b[:, 0]) & (b[:, 0] < b[:, 2]) & (b[:, 2] <= W))
        assert np.all((0 <= b[:, 1]) & (b[:, 1] < b[:, 3]) & (b[:, 3] <= H))


def test_some_scenes_have_occlusion():
    bench = tb.generate(small_spec(n_train_scenes=60))
    hits = 0
    for sc in bench.train:
        if len(sc.boxes) > 1:
            m = box_iou(sc.boxes, sc.boxes)
            np.fill_diagonal(m, 0)
            hits += m.max() >= 0.2
    assert 5 <= hits <= 40


def test_texture_is_pure_and_noise_bounded(bench):
    """Visible pixels of a person equal its rendered texture up to the noise."""
    ident = {i.id: i for i in bench.identities}
    checked = 0
    for sc in bench.train + bench.test:
        if len(sc.boxes) != 1:
            continue
        x1, y1, x2, y2 = sc.boxes[0].astype(int)
        ref = tb.render_identity(ident[_true_id(bench, sc)].texture_seed, y2 - y1, x2 - x1)
        resid = sc.image[y1:y2, x1:x2] - ref
        assert abs(resid.mean()) < 0.02
        assert resid.std() < 0.06
        checked += 1
    assert checked > 0
    np.testing.assert_array_equal(tb.render_identity(123, 20, 10), tb.render_identity(123, 20, 10))


def _true_id(bench, scene):
    lab = int(scene.labels[0])
    if lab != tb.UNLABELED:
        return lab
    # unlabeled: find the identity whose texture fits best
    x1, y1, x2, y2 = scene.boxes[0].astype(int)
    crop = scene.image[y1:y2, x1:x2]
    errs = {
        i.id: np.abs(crop - tb.render_identity(i.texture_seed, y2 - y1, x2 - x1)).mean()
        for i in bench.identities
        if not i.labeled
    }
    return min(errs, key=errs.get)


def test_infeasible_gallery():
    with pytest.raises(tb.InfeasibleSpec):
        tb.generate(small_spec(gallery_size=40))
    with pytest.raises(tb.InfeasibleSpec):
        tb.generate(small_spec(n_identities=30, gallery_size=4, n_test_scenes=8))
    with pytest.raises(tb.InfeasibleSpec):
        tb.generate(small_spec(n_identities=1))


class TestGallerySubsets:
    def test_full_size(self, bench):
        subs = tb.gallery_subsets(bench.gallery, bench.queries, [16])
        for s in subs[16]:
            assert s == list(range(16))

    def test_nested(self, bench):
        subs = tb.gallery_subsets(bench.gallery, bench.queries, [4, 8, 16], seed=3)
        for a, b, c in zip(subs[4], subs[8], subs[16]):
            assert len(a) == 4 and len(b) == 8
            assert set(a) <= set(b) <= set(c)

    def test_positive_in_every_subset(self, bench):
        sizes = [1, 2, 4, 8, 16]
        subs = tb.gallery_subsets(bench.gallery, bench.queries, sizes, seed=1)
        for size in sizes:
            for q, scenes in zip(bench.queries, subs[size]):
                assert any((bench.gallery[i].labels == q.identity).any() for i in scenes)

    def test_too_large(self, bench):
        with pytest.raises(ValueError):
            tb.gallery_subsets(bench.gallery, bench.queries, [17])


def test_disk_round_trip(tmp_path, bench):
    tb.save(bench, tmp_path / "b")
    back = tb.load(tmp_path / "b")
    assert digest(back) == digest(bench)
    assert back.gallery_size == 16
    for q, q2 in zip(bench.queries, back.queries):
        np.testing.assert_array_equal(q.box, q2.box)
        assert q.identity == q2.identity


def test_disk_bytes_deterministic(tmp_path):
    def tree_hash(root):
        h = hashlib.sha256()
        for p in sorted(root.rglob("*")):
            if p.is_file():
                h.update(str(p.relative_to(root)).encode())
                h.update(p.read_bytes())
        return h.hexdigest()

    spec = small_spec(n_train_scenes=3, n_test_scenes=16, gallery_size=16)
    tb.save(tb.generate(spec), tmp_path / "a")
    tb.save(tb.generate(spec), tmp_path / "b")
    assert tree_hash(tmp_path / "a") == tree_hash(tmp_path / "b")
