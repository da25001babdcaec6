import json

import numpy as np
import pytest
from scipy import ndimage

from flowmag.core import Frame, load_frame, read_flo, save_frame
from flowmag.data import (
    NOISE_K,
    CurationRecord,
    FilterThresholds,
    SyntheticSpec,
    add_photon_noise,
    build_benchmark,
    curate,
    failed_tests,
    foreground_centroid,
    load_benchmark,
    noise_factors,
    sample_pairs,
    subpixel_levels,
    synthesize,
    translating_pairs,
)
from flowmag.flow import FixedFlow
from flowmag.warp import backward_warp

TH = FilterThresholds()


@pytest.fixture(scope="module")
def bench(tmp_path_factory):
    root = tmp_path_factory.mktemp("bench")
    return root, build_benchmark(root, size=64, pairs_per_group=1, seed=0)


def test_levels_and_groups():
    lv = subpixel_levels()
    assert len(lv) == 15 and lv[0] == pytest.approx(0.04) and lv[-1] == pytest.approx(1.0)
    nf = noise_factors()
    assert len(nf) == 21 and nf[0] == pytest.approx(0.01) and nf[-1] == pytest.approx(100)


def test_benchmark_manifest(bench):
    root, recs = bench
    sub = [r for r in recs if r["suite"] == "subpixel"]
    noise = [r for r in recs if r["suite"] == "noise"]
    assert len({r["group"] for r in sub}) == 15
    assert len({r["group"] for r in noise}) == 21
    by_motion = {round(r["motion_px"], 6): r["alpha"] for r in sub}
    assert by_motion[0.04] == pytest.approx(250)
    assert by_motion[1.0] == pytest.approx(10)
    assert all(r["motion_px"] <= 2 for r in noise)
    assert all(r["noise_k"] == NOISE_K for r in recs)
    lines = (root / "manifest.jsonl").read_text().strip().splitlines()
    assert [json.loads(x) for x in lines] == recs


def test_benchmark_files_round_trip(bench):
    root, recs = bench
    pairs = load_benchmark(root)
    assert len(pairs) == len(recs)
    rec, pair = pairs[0]
    again = synthesize(SyntheticSpec(rec["suite"], rec["motion_px"], 10.0, rec["noise_factor"], 64,
                                     rec["texture_seed"], rec["angle_deg"]))
    np.testing.assert_allclose(pair.ref.data, again.ref.data, atol=1 / 65535)
    np.testing.assert_array_equal(read_flo(root / rec["gt_flow"]).data, again.gt_flow.data)
    assert pair.gt_alpha == rec["alpha"]


def test_null_motion():
    p = synthesize(SyntheticSpec(motion_px=0.0, size=32))
    assert p.ref.data.tobytes() == p.tgt.data.tobytes()
    assert np.all(p.gt_flow.data == 0)
    assert p.gt_magnified is None


def test_spec_validation():
    with pytest.raises(ValueError):
        SyntheticSpec(kind="blur")
    with pytest.raises(ValueError):
        SyntheticSpec(motion_px=-1)
    with pytest.raises(ValueError):
        SyntheticSpec(size=8)


@pytest.mark.parametrize("motion", list(subpixel_levels()))
def test_centroid_tracks_subpixel_motion(motion):
    for angle in (0.0, 37.0, 270.0):
        spec = SyntheticSpec(motion_px=float(motion), angle_deg=angle, texture_seed=int(motion * 1e4) + int(angle))
        p = synthesize(spec)
        d = foreground_centroid(p.tgt) - foreground_centroid(p.ref)
        assert np.abs(d - np.array(spec.motion_vector)).max() < 0.01
        dm = foreground_centroid(p.gt_magnified) - foreground_centroid(p.ref)
        assert np.abs(dm - spec.alpha * np.array(spec.motion_vector)).max() < 0.01


def test_backward_warp_consistency():
    for seed, (m, a) in enumerate([(0.04, 0.0), (0.3, 45.0), (1.0, 200.0), (0.7, 300.0)]):
        p = synthesize(SyntheticSpec(motion_px=m, angle_deg=a, texture_seed=seed))
        back = backward_warp(p.tgt, p.gt_flow)[0].permute(1, 2, 0).numpy()
        # fully covered pixels, shrunk by one so the bilinear footprint in tgt stays inside too;
        # partially covered edge pixels mix in static background and cannot warp consistently
        fg = ndimage.binary_erosion(p.fg_matte >= 1.0)
        assert fg.sum() > 50
        assert np.abs(back - p.ref.data)[fg].mean() < 0.01


def test_noise_calibration():
    rng = np.random.default_rng(0)
    gray = np.full((200, 200, 3), 0.5)
    assert np.array_equal(add_photon_noise(gray, 0.0, rng), gray)
    std = (add_photon_noise(gray, 1.0, rng) - gray).std()
    assert std * 255 == pytest.approx(1.0, rel=0.2)


def test_noise_mean_preserved():
    rng = np.random.default_rng(1)
    clean = rng.uniform(0.2, 0.8, size=(20, 20, 3))
    factor = 5.0
    draws = np.stack([add_photon_noise(clean, factor, rng) for _ in range(1000)])
    sem = factor * NOISE_K * np.sqrt(clean + 1e-3) / np.sqrt(1000)
    z = np.abs(draws.mean(0) - clean) / sem
    assert np.mean(z <= 2) > 0.93
    assert z.max() < 5


def test_translating_pairs():
    ps = translating_pairs(5, seed=3, size=32)
    assert len(ps) == 5
    again = translating_pairs(5, seed=3, size=32)
    assert all(a.ref.data.tobytes() == b.ref.data.tobytes() for a, b in zip(ps, again))
    for p in ps:
        m = p.gt_flow.magnitude()
        assert 0.25 <= m.max() <= 1.0 and m.min() == 0


# -- curation ----------------------------------------------------------------------------------


@pytest.mark.parametrize("name,kw,expect", [
    ("p999", dict(p999=20.0), []),
    ("p999", dict(p999=20.0 + 1e-9), ["p999"]),
    ("p80", dict(p80=2.0), []),
    ("p80", dict(p80=2.0 + 1e-9), ["p80"]),
    ("p001", dict(p001=0.1), []),
    ("p001", dict(p001=0.1 + 1e-9), ["p001"]),
    ("mse", dict(mse=10.0), []),
    ("mse", dict(mse=10.0 - 1e-9), ["mse_too_low"]),
])
def test_threshold_boundaries(name, kw, expect):
    vals = dict(p001=0.0, p80=1.0, p999=5.0, mse=50.0)
    vals.update(kw)
    assert failed_tests(vals["p001"], vals["p80"], vals["p999"], vals["mse"], TH) == expect


def test_thresholds_validation():
    with pytest.raises(ValueError):
        FilterThresholds(mse_min=0)


def test_sample_pairs():
    assert sample_pairs(5, 1) == [(0, 1), (2, 3)]
    assert sample_pairs(12, 5) == [(0, 5), (5, 10)]
    with pytest.raises(ValueError):
        sample_pairs(5, 7)
    with pytest.raises(ValueError):
        sample_pairs(5, 5)


def _flow(p001, p80, p999):
    """100x100 field whose magnitude percentiles (linear interpolation) are exactly the arguments."""
    m = np.full(10_000, p80, np.float32)
    m[:10] = p001
    m[-20:] = p999
    f = np.zeros((100, 100, 2), np.float32)
    f[..., 0] = m.reshape(100, 100)
    return f


def _dir(tmp_path, step):
    """Two 16-bit frames whose MSE (0-255 scale) is (255 * step / 65535)^2."""
    d = tmp_path / f"frames{step}"
    d.mkdir()
    base = 32768 / 65535
    save_frame(np.full((100, 100, 3), base), d / "f000.png", bits=16)
    save_frame(np.full((100, 100, 3), base + step / 65535), d / "f001.png", bits=16)
    return d


# step 813 gives MSE 10.006, step 812 gives 9.982
@pytest.mark.parametrize("flow,step,accepted,reason", [
    ((0.0, 1.0, 5.0), 2000, True, ""),
    ((0.0, 1.0, 25.0), 2000, False, "p999"),
    ((0.0, 1.0, 20.0), 813, True, ""),
    ((0.0, 1.0, 20.01), 813, False, "p999"),
    ((0.0, 2.0, 5.0), 813, True, ""),
    ((0.0, 2.001, 5.0), 813, False, "p80"),
    ((0.0999, 1.0, 5.0), 813, True, ""),  # 0.1 itself is not representable in float32
    ((0.1001, 1.0, 5.0), 813, False, "p001"),
    ((0.0, 1.0, 5.0), 812, False, "mse_too_low"),
    ((0.0, 1.0, 5.0), 0, False, "mse_too_low"),
])
def test_curate_end_to_end(tmp_path, flow, step, accepted, reason):
    d = _dir(tmp_path, step)
    recs = curate(d, 1, TH, FixedFlow(_flow(*flow)), manifest_path=tmp_path / "m.jsonl")
    assert len(recs) == 1
    r = recs[0]
    assert (r.accepted, r.reject_reason) == (accepted, reason)
    assert r.p999 == pytest.approx(flow[2], rel=1e-6) and r.p80 == pytest.approx(flow[1], rel=1e-6)
    line = json.loads((tmp_path / "m.jsonl").read_text())
    assert line["accepted"] == accepted and line["reject_reason"] == reason


def test_curate_identical_frames_with_builtin_flow(tmp_path):
    d = tmp_path / "same"
    d.mkdir()
    img = np.random.default_rng(0).random((32, 32, 3))
    for i in range(4):
        save_frame(img, d / f"{i:03d}.png")
    recs = curate(d, 1)
    assert [r.reject_reason for r in recs] == ["mse_too_low", "mse_too_low"]
    assert all(r.mse == 0 for r in recs)
    assert recs == curate(d, 1)


def test_curate_errors(tmp_path):
    d = tmp_path / "few"
    d.mkdir()
    save_frame(np.zeros((8, 8, 3)), d / "a.png")
    with pytest.raises(ValueError):
        curate(d, 1)
    with pytest.raises(FileNotFoundError):
        curate(tmp_path / "missing", 1)
