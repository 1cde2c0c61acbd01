import json

import numpy as np
import pytest

import oracles
from tessellate import store
from tessellate.cli import main
from tessellate.curate import CurationReport
from tessellate.geometry import PatchPlan, TensorLayout, WindowSpec, build_plan
from tessellate.volume import open_volume, write_raw

SENTINEL = -1.0


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def empty_store(path, shape, chunks, fill=0.0):
    return store.create(path, store.ArrayMetadata(shape, chunks, fill))


@pytest.fixture
def volume(tmp_path):
    x = np.random.default_rng(3).random((1, 2, 20, 18, 15), dtype=np.float32)
    write_raw(tmp_path / "vol.raw", x)
    return tmp_path / "vol.raw", x


# plan


def test_plan_reference_geometry(tmp_path, capsys):
    empty_store(tmp_path / "in", (1, 1, 236, 720, 510), (1, 1, 64, 64, 64))
    code, out, _ = run(capsys, "plan", tmp_path / "in", "--window", "64", "--step", "32")
    assert code == 0
    assert "placements: 2310" in out
    assert "7 x 22 x 15" in out


def test_plan_window_equals_extent(volume, capsys, tmp_path):
    path, _ = volume
    code, out, _ = run(capsys, "plan", path, "--window", "20,18,15", "--out", tmp_path / "p.json")
    assert code == 0 and "placements: 1" in out
    assert len(PatchPlan.load(tmp_path / "p.json")) == 1


def test_plan_step_larger_than_window_rejected_before_writing(volume, capsys, tmp_path):
    path, _ = volume
    code, _, err = run(capsys, "plan", path, "--window", "8", "--step", "9", "--out", tmp_path / "p.json")
    assert code == 2 and "step" in err
    assert not (tmp_path / "p.json").exists()


def test_plan_missing_window(volume, capsys):
    code, _, err = run(capsys, "plan", volume[0])
    assert code == 2 and "window" in err


def test_plan_wrong_rank_flag(volume, capsys):
    code, _, _ = run(capsys, "plan", volume[0], "--window", "8,8")
    assert code == 2


def test_plan_missing_input(tmp_path, capsys):
    code, _, err = run(capsys, "plan", tmp_path / "nope", "--window", "8")
    assert code == 3 and "nope" in err


# config files


def test_json_config_with_flag_override(volume, capsys, tmp_path):
    path, _ = volume
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"window": [10, 9, 5], "step": 5, "border": 1}))
    code, out, _ = run(capsys, "plan", path, "--config", cfg)
    assert code == 0
    expected = [len(oracles.positions(e, w, s)) for e, w, s in zip((20, 18, 15), (10, 9, 5), (5, 5, 5))]
    assert "x".join(map(str, expected)) in out.replace(" ", "")
    code, out, _ = run(capsys, "plan", path, "--config", cfg, "--step", "4")
    expected = [len(oracles.positions(e, w, s)) for e, w, s in zip((20, 18, 15), (10, 9, 5), (4, 4, 4))]
    assert "x".join(map(str, expected)) in out.replace(" ", "")


def test_toml_config(volume, capsys, tmp_path):
    path, _ = volume
    cfg = tmp_path / "cfg.toml"
    cfg.write_text(f'input = "{path}"\nwindow = [20, 18, 15]\nborder_weight = 0.5\n')
    code, out, _ = run(capsys, "plan", "--config", cfg)
    assert code == 0 and "placements: 1" in out


def test_config_unknown_key(volume, capsys, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"window": 8, "stepp": 4}))
    code, _, err = run(capsys, "plan", volume[0], "--config", cfg)
    assert code == 2 and "stepp" in err


# subsample


def test_subsample_unlabeled_writes_every_patch(volume, capsys, tmp_path):
    path, x = volume
    code, out, _ = run(capsys, "subsample", path, "--window", "8,8,6", "--step", "6,5,4", "--out", tmp_path / "p")
    assert code == 0
    plan = build_plan(TensorLayout.from_shape(x.shape), WindowSpec((8, 8, 6), (6, 5, 4)))
    arr = store.open_array(tmp_path / "p" / "data")
    assert arr.shape == (len(plan), 2, 8, 8, 6)
    assert not (tmp_path / "p" / "report.json").exists()
    for i in (0, len(plan) // 2, len(plan) - 1):
        sl = plan[i].slices(plan.spec)
        np.testing.assert_array_equal(arr[i], x[(0, slice(None), *sl)])


def test_subsample_refuses_to_overwrite(volume, capsys, tmp_path):
    args = ("subsample", volume[0], "--window", "10", "--out", tmp_path / "p")
    assert run(capsys, *args)[0] == 0
    assert run(capsys, *args)[0] == 3


def sparse_labels(shape, seed=0, count=6):
    rng = np.random.default_rng(seed)
    labels = np.full(shape, SENTINEL, np.float32)
    for _ in range(count):
        idx = tuple(int(rng.integers(0, s)) for s in shape)
        labels[idx] = float(rng.integers(0, 3))
    return labels


def test_subsample_with_labels_matches_oracles(volume, capsys, tmp_path):
    path, x = volume
    labels = sparse_labels((1, 1, 20, 18, 15), seed=11)
    write_raw(tmp_path / "lab.raw", labels)
    window, step, border = (8, 8, 6), (4, 5, 3), (1, 2, 1)
    code, out, _ = run(capsys, "subsample", path, "--labels", tmp_path / "lab.raw", "--window", "8,8,6",
                       "--step", "4,5,3", "--border", "1,2,1", "--out", tmp_path / "p")
    assert code == 0
    report = CurationReport.from_dict(json.loads((tmp_path / "p" / "report.json").read_text()))

    # brute force: a window is kept when a labeled voxel sits in its unmasked interior
    starts = oracles.starts((20, 18, 15), window, step)
    marked = np.argwhere(labels[0, 0] != SENTINEL)
    counts = []
    for s in starts:
        inside = [v for v in marked if all(a + b <= c < a + w - b for a, b, c, w in zip(s, border, v, window))]
        counts.append(len(inside))
    expected = [i for i, n in enumerate(counts) if n]
    assert report.total_patches == len(starts)
    assert report.retained_indices == expected
    unique = {tuple(v) for s in starts for v in marked
              if all(a + b <= c < a + w - b for a, b, c, w in zip(s, border, v, window))}
    assert report.annotated_voxels_unique == len(unique)
    assert report.duplication_rate == sum(counts) / len(unique)

    d = store.open_array(tmp_path / "p" / "data")
    lab = store.open_array(tmp_path / "p" / "labels")
    assert d.shape[0] == lab.shape[0] == len(expected)
    for j, i in enumerate(expected):
        sl = tuple(slice(a, a + w) for a, w in zip(starts[i], window))
        np.testing.assert_array_equal(d[j], x[(0, slice(None), *sl)])
        # masked shell is written as the sentinel
        assert lab[j, 0, 0, 0, 0] == SENTINEL


def test_subsample_reference_geometry_sparse(tmp_path, capsys):
    shape = (1, 1, 236, 720, 510)
    empty_store(tmp_path / "data", shape, (1, 1, 128, 128, 128))
    lab = empty_store(tmp_path / "labels", shape, (1, 1, 128, 128, 128), fill=SENTINEL)
    lab.write_region((0, 0, 100, 300, 200), np.ones((1, 1, 4, 4, 4), np.float32))
    code, out, _ = run(capsys, "subsample", tmp_path / "data", "--labels", tmp_path / "labels",
                       "--window", "64", "--step", "32", "--out", tmp_path / "p")
    assert code == 0
    report = json.loads((tmp_path / "p" / "report.json").read_text())
    assert report["total_patches"] == 2310
    starts = oracles.starts(shape[2:], (64,) * 3, (32,) * 3)
    expected = [i for i, st in enumerate(starts) if oracles.intersects(st, (64,) * 3, (100, 300, 200), (104, 304, 204))]
    assert expected
    assert report["retained_indices"] == expected
    assert report["annotated_voxels_unique"] == 64
    assert store.open_array(tmp_path / "p" / "data").shape[0] == len(expected)


# stitch


def test_stitch_identity_results(volume, capsys, tmp_path):
    path, x = volume
    assert run(capsys, "subsample", path, "--window", "8,8,6", "--step", "5,5,4", "--border", "1",
               "--border-weight", "0.25", "--out", tmp_path / "p")[0] == 0
    code, out, _ = run(capsys, "stitch", tmp_path / "p" / "data", "--out", tmp_path / "s", "--chunk", "7,6,5")
    assert code == 0 and "zero-weight voxels 0" in out
    got = store.open_array(tmp_path / "s" / "output").read()
    assert got.shape == x.shape
    np.testing.assert_allclose(got, x, atol=1e-6, rtol=0)


def test_stitch_with_explicit_plan(volume, capsys, tmp_path):
    path, x = volume
    run(capsys, "plan", path, "--window", "10,9,8", "--step", "5", "--out", tmp_path / "plan.json")
    run(capsys, "subsample", path, "--plan", tmp_path / "plan.json", "--out", tmp_path / "p")
    code, _, _ = run(capsys, "stitch", tmp_path / "p" / "data", "--plan", tmp_path / "plan.json",
                     "--out", tmp_path / "s")
    assert code == 0
    np.testing.assert_allclose(store.open_array(tmp_path / "s" / "output").read(), x, atol=1e-6)


def truncated_results(tmp_path, x, keep):
    plan = build_plan(TensorLayout.from_shape(x.shape), WindowSpec((10, 9, 8), 5))
    from tessellate.subsample import create_stack_store

    arr = create_stack_store(tmp_path / "r", plan, keep, 2)
    for i in range(keep):
        sl = plan[i].slices(plan.spec)
        arr.write_chunk((i, 0, 0, 0, 0), x[(0, slice(None), *sl)][None])
    return plan, arr


def test_stitch_missing_results_exit_incomplete(volume, capsys, tmp_path):
    _, x = volume
    plan, _ = truncated_results(tmp_path, x, 5)
    code, _, err = run(capsys, "stitch", tmp_path / "r", "--out", tmp_path / "s")
    assert code == 5 and str(len(plan)) in err
    assert not (tmp_path / "s" / "output").exists()


def test_stitch_resume_after_interrupt(volume, capsys, tmp_path, monkeypatch):
    path, x = volume
    run(capsys, "subsample", path, "--window", "10,9,8", "--step", "5", "--out", tmp_path / "p")
    from tessellate import cli

    real = cli._StoredResults.__getitem__
    calls = {"n": 0}

    def flaky(self, i):
        calls["n"] += 1
        if calls["n"] == 7:
            raise OSError("device went away")
        return real(self, i)

    monkeypatch.setattr(cli._StoredResults, "__getitem__", flaky)
    code, _, _ = run(capsys, "stitch", tmp_path / "p" / "data", "--out", tmp_path / "s")
    assert code == 3
    monkeypatch.setattr(cli._StoredResults, "__getitem__", real)
    code, _, _ = run(capsys, "info", tmp_path / "s")
    assert code == 0
    code, _, _ = run(capsys, "stitch", tmp_path / "p" / "data", "--out", tmp_path / "s", "--resume")
    assert code == 0
    np.testing.assert_allclose(store.open_array(tmp_path / "s" / "output").read(), x, atol=1e-6)


def test_stitch_zero_coverage_exit_and_fill(tmp_path, capsys):
    # hand-written plan with a gap: two 4-wide windows on an 10-wide axis
    layout = TensorLayout(1, 1, (4, 10))
    spec = WindowSpec((4, 4), (4, 4))
    full = build_plan(layout, spec)
    gap = full.subset([0, 2])
    gap.save(tmp_path / "gap.json")
    from tessellate.subsample import create_stack_store

    arr = create_stack_store(tmp_path / "r", gap, 2, 1)
    arr.write_region((0, 0, 0, 0), np.ones((2, 1, 4, 4), np.float32))
    code, _, err = run(capsys, "stitch", tmp_path / "r", "--plan", tmp_path / "gap.json", "--out", tmp_path / "s")
    assert code == 4 and "zero" in err
    code, out, _ = run(capsys, "stitch", tmp_path / "r", "--plan", tmp_path / "gap.json", "--out", tmp_path / "s2",
                       "--on-zero-coverage", "fill:-3")
    assert code == 0
    got = store.open_array(tmp_path / "s2" / "output").read()[0, 0]
    assert np.all(got[:, 4:6] == -3) and np.all(got[:, :4] == 1) and np.all(got[:, 6:] == 1)


def test_stitch_bad_policy(volume, capsys, tmp_path):
    run(capsys, "subsample", volume[0], "--window", "10", "--out", tmp_path / "p")
    code, _, _ = run(capsys, "stitch", tmp_path / "p" / "data", "--out", tmp_path / "s", "--on-zero-coverage", "nan")
    assert code == 2
    assert not (tmp_path / "s").exists()


# roundtrip


@pytest.mark.parametrize("bw", ["0.5", "0"])
def test_roundtrip_passes(volume, capsys, bw):
    code, out, _ = run(capsys, "roundtrip", volume[0], "--window", "8", "--step", "6,6,4", "--border", "1",
                       "--border-weight", bw)
    assert code == 0, out
    assert out.strip().endswith("PASS")


def test_roundtrip_is_deterministic(volume, capsys, tmp_path):
    args = ("roundtrip", volume[0], "--window", "9,7,6", "--step", "4", "--border", "2", "--border-weight", "0.3")
    assert run(capsys, *args, "--out", tmp_path / "a")[0] == 0
    assert run(capsys, *args, "--out", tmp_path / "b")[0] == 0
    a = store.open_array(tmp_path / "a" / "stitched" / "output")
    b = store.open_array(tmp_path / "b" / "stitched" / "output")
    for idx in a.iter_chunk_indices():
        assert a.chunk_path(idx).read_bytes() == b.chunk_path(idx).read_bytes()


def test_roundtrip_invalid_spec(volume, capsys):
    code, _, _ = run(capsys, "roundtrip", volume[0], "--window", "8", "--step", "9")
    assert code == 2


def test_roundtrip_2d_axes_permuted(tmp_path, capsys):
    x = np.random.default_rng(8).random((33, 21), dtype=np.float32)
    write_raw(tmp_path / "img.raw", x.T, axes="XY")
    vol = open_volume(tmp_path / "img.raw")
    assert vol.shape == (1, 1, 33, 21)
    np.testing.assert_array_equal(vol[0, 0], x)
    code, out, _ = run(capsys, "roundtrip", tmp_path / "img.raw", "--window", "10", "--step", "7")
    assert code == 0 and "PASS" in out


# info


def test_info_store_plan_report(volume, capsys, tmp_path):
    path, _ = volume
    labels = sparse_labels((1, 1, 20, 18, 15), seed=2, count=20)
    write_raw(tmp_path / "lab.raw", labels)
    run(capsys, "plan", path, "--window", "10", "--step", "5", "--out", tmp_path / "plan.json")
    run(capsys, "subsample", path, "--labels", tmp_path / "lab.raw", "--plan", tmp_path / "plan.json",
        "--out", tmp_path / "p")
    code, out, _ = run(capsys, "info", tmp_path / "p" / "data")
    assert code == 0 and "chunked array" in out and "placements" in out
    code, out, _ = run(capsys, "info", tmp_path / "plan.json")
    assert code == 0 and "3 x 3 x 2" in out
    code, out, _ = run(capsys, "info", tmp_path / "p" / "report.json")
    assert code == 0 and "curation report" in out
    code, out, _ = run(capsys, "info", path)
    assert code == 0 and "(1, 2, 20, 18, 15)" in out


def test_info_unrecognized(tmp_path, capsys):
    (tmp_path / "empty").mkdir()
    assert run(capsys, "info", tmp_path / "empty")[0] == 3
    (tmp_path / "x.json").write_text("[1, 2]")
    assert run(capsys, "info", tmp_path / "x.json")[0] == 3
    (tmp_path / "y.json").write_text('{"format": "something-else"}')
    assert run(capsys, "info", tmp_path / "y.json")[0] == 3
    assert run(capsys, "info", tmp_path / "missing")[0] == 3
