import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from oracles import brute_propagate, brute_vote, naive_transform
from protoseg import tensor_io
from protoseg.consistency4d import (
    LabeledScan,
    export_pseudolabels,
    load_scan_manifest,
    propagate,
    transform_to_world,
    vote,
)
from protoseg.tensor_io import DEFAULT_IGNORE_ID as IGN
from protoseg.tensor_io import LabelArray, PoseSE3


def random_scans(seed, n_scans=3, n_points=1000, K=4, ignore_frac=0.1, extent=0.5):
    r = np.random.default_rng(seed)
    scans = []
    for s in range(n_scans):
        pose = PoseSE3(Rotation.random(random_state=(seed * 31 + s) % 2**32).as_matrix(), r.normal(size=3))
        pos = r.uniform(-extent, extent, size=(n_points, 3))
        lab = r.integers(0, K, size=n_points).astype(np.uint32)
        lab[r.random(n_points) < ignore_frac] = IGN
        scans.append(LabeledScan(pos, LabelArray(lab), pose, f"{s:03d}"))
    return scans


def scan(positions, labels, pose=None, sid="0"):
    return LabeledScan(np.asarray(positions, float), LabelArray(labels), pose or PoseSE3(), sid)


class TestTransform:
    def test_identity(self, rng):
        pts = rng.normal(size=(10, 3))
        np.testing.assert_array_equal(transform_to_world(scan(pts, [0] * 10)), pts)

    def test_translation(self):
        out = transform_to_world(scan([[0, 0, 0]], [0], PoseSE3(np.eye(3), [1, 2, 3])))
        np.testing.assert_array_equal(out, [[1, 2, 3]])

    def test_vs_scalar_loop(self, rng):
        R = Rotation.random(random_state=3).as_matrix()
        t = rng.normal(size=3) * 10
        pts = rng.normal(size=(100, 3)) * 20
        out = transform_to_world(scan(pts, [0] * 100, PoseSE3(R, t)))
        assert np.abs(out - naive_transform(pts, R, t)).max() <= 1e-9


class TestVote:
    def test_direct_count(self):
        t = vote([scan([[0.01, 0.01, 0.01], [0.02, 0.05, 0.03], [0.09, 0.0, 0.0]], [0, 0, 1])], 0.1)
        assert t.as_dict() == {(0, 0, 0): {0: 2, 1: 1}}

    def test_boundary_floor(self):
        ks = range(-1000, 1001)
        pts = [[k * 0.1, -k * 0.1, 0.0] for k in ks]
        t = vote([scan(pts, [k + 1000 for k in ks])], 0.1)
        d = t.as_dict()
        for k in ks:
            assert d[(k, -k, 0)] == {k + 1000: 1}

    def test_ignore_casts_no_vote(self):
        t = vote([scan([[0, 0, 0], [0, 0, 0]], [IGN, 2])], 0.1)
        assert t.as_dict() == {(0, 0, 0): {2: 1}}
        assert t.total_votes == 1

    def test_brute_force(self):
        scans = random_scans(0)
        t = vote(scans, 0.1)
        world = [transform_to_world(s) for s in scans]
        assert t.as_dict() == brute_vote(world, [s.labels.labels for s in scans], 0.1, IGN)

    def test_weighted(self):
        s = LabeledScan(np.zeros((3, 3)), LabelArray([0, 1, 1]), PoseSE3(), "a", np.array([0.9, 0.2, 0.3]))
        t = vote([s], 0.1, weighted=True)
        assert t.as_dict()[(0, 0, 0)] == pytest.approx({0: 0.9, 1: 0.5})
        (out,) = propagate([s], t)
        np.testing.assert_array_equal(out.labels.labels, [0, 0, 0])
        (out,) = propagate([s], vote([s], 0.1))
        np.testing.assert_array_equal(out.labels.labels, [1, 1, 1])

    def test_threads_identical(self):
        scans = random_scans(4)
        a, b = vote(scans, 0.1), vote(scans, 0.1, threads=8)
        assert a.keys.tobytes() == b.keys.tobytes() and a.counts.tobytes() == b.counts.tobytes()

    def test_bad_voxel(self):
        with pytest.raises(ValueError):
            vote([], 0.0)


class TestPropagate:
    def test_majority(self):
        s = scan([[0.01] * 3, [0.02] * 3, [0.03] * 3], [0, 0, 1])
        (out,) = propagate([s], vote([s], 0.1))
        np.testing.assert_array_equal(out.labels.labels, [0, 0, 0])

    def test_tie_lowest(self):
        s = scan([[0.01] * 3] * 4, [3, 1, 3, 1])
        (out,) = propagate([s], vote([s], 0.1))
        np.testing.assert_array_equal(out.labels.labels, [1, 1, 1, 1])

    def test_voteless_voxel_keeps_ignore(self):
        s = scan([[0.01] * 3, [5.0] * 3], [2, IGN])
        (out,) = propagate([s], vote([s], 0.1))
        np.testing.assert_array_equal(out.labels.labels, [2, IGN])

    def test_voxel_mismatch(self):
        s = scan([[0.0] * 3], [0])
        with pytest.raises(ValueError):
            propagate([s], vote([s], 0.1), voxel_size=0.2)

    def test_pipeline_vs_oracle(self):
        scans = random_scans(1)
        out = propagate(scans, vote(scans, 0.1))
        world = [transform_to_world(s) for s in scans]
        table = brute_vote(world, [s.labels.labels for s in scans], 0.1, IGN)
        for got, want in zip(out, brute_propagate(world, table, 0.1, IGN)):
            np.testing.assert_array_equal(got.labels.labels.astype(np.int64), want)

    def test_idempotent(self):
        scans = random_scans(2)
        once = propagate(scans, vote(scans, 0.1))
        twice = propagate(once, vote(once, 0.1))
        for a, b in zip(once, twice):
            np.testing.assert_array_equal(a.labels.labels, b.labels.labels)

    def test_voxels_become_pure(self):
        scans = random_scans(3)
        out = propagate(scans, vote(scans, 0.1))
        t = vote(out, 0.1)
        assert all(len(c) == 1 for c in t.as_dict().values())

    def test_huge_voxel_is_global_majority(self, rng):
        lab = rng.integers(0, 3, 500).astype(np.uint32)
        lab[:50] = IGN
        s = scan(rng.uniform(0, 1, size=(500, 3)), lab)
        (out,) = propagate([s], vote([s], 1e9))
        counts = np.bincount(lab[50:], minlength=3)
        expect = int(np.flatnonzero(counts == counts.max())[0])
        assert (out.labels.labels[50:] == expect).all()
        assert (out.labels.labels[:50] == expect).all()  # ignore points share the voxel

    def test_order_independence(self, rng):
        scans = random_scans(5)
        ref = propagate(scans, vote(scans, 0.1))
        perms = [rng.permutation(len(s.labels)) for s in scans]
        shuffled = [
            LabeledScan(s.positions[p], LabelArray(s.labels.labels[p]), s.pose, s.scan_id) for s, p in zip(scans, perms)
        ]
        shuffled = shuffled[::-1]
        out = propagate(shuffled, vote(shuffled, 0.1))[::-1]
        for r, o, p in zip(ref, out, perms):
            np.testing.assert_array_equal(r.labels.labels[p], o.labels.labels)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_conservation_fuzz(seed):
    scans = random_scans(seed, n_scans=3, n_points=200, ignore_frac=0.3)
    t = vote(scans, 0.1)
    assert t.total_votes == sum(int((s.labels.labels != IGN).sum()) for s in scans)
    assert (t.counts > 0).all()


class TestExport:
    def test_files(self, tmp_path):
        scans = random_scans(6, n_scans=2, n_points=50)
        out = propagate(scans, vote(scans, 0.1))
        paths = export_pseudolabels(out, tmp_path / "a")
        assert [p.name for p in paths] == ["000.igl", "001.igl"]
        for p, s in zip(paths, out):
            np.testing.assert_array_equal(tensor_io.read_labels(p).labels, s.labels.labels)
        paths2 = export_pseudolabels(propagate(scans, vote(scans, 0.1)), tmp_path / "b")
        assert [p.read_bytes() for p in paths] == [p.read_bytes() for p in paths2]

    def test_ignore_only(self, tmp_path):
        s = scan(np.zeros((4, 3)), [IGN] * 4, sid="x")
        (p,) = export_pseudolabels(propagate([s], vote([s], 0.1)), tmp_path)
        assert (tensor_io.read_labels(p).labels == IGN).all()


def test_manifest_loading(tmp_path):
    scans = random_scans(7, n_scans=2, n_points=20)
    tensor_io.write_poses([s.pose for s in scans], tmp_path / "p.poses")
    entries = []
    for i, s in enumerate(scans):
        tensor_io.write_feature_matrix(s.positions.astype(np.float32), tmp_path / f"{i}.igft")
        tensor_io.write_labels(s.labels, tmp_path / f"{i}.igl")
        entries.append({"id": s.scan_id, "points": f"{i}.igft", "labels": f"{i}.igl", "pose": i})
    import json

    (tmp_path / "m.json").write_text(json.dumps({"poses": "p.poses", "scans": entries}))
    loaded = load_scan_manifest(tmp_path / "m.json")
    assert [s.scan_id for s in loaded] == ["000", "001"]
    np.testing.assert_array_equal(loaded[1].labels.labels, scans[1].labels.labels)
