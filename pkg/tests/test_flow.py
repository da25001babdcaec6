import sys
import textwrap

import numpy as np
import pytest
import torch

from conftest import textured
from flowmag.core import FlowField, Frame, write_flo
from flowmag.flow import (
    VariationalFlowConfig,
    builtin_variational,
    estimate,
    external_adapter,
    flow_percentiles,
)


def _epe(flow: FlowField, u, v, interior=0):
    a = flow.data[interior:flow.data.shape[0] - interior, interior:flow.data.shape[1] - interior]
    return float(np.hypot(a[..., 0] - u, a[..., 1] - v).mean())


def test_zero_motion_fixed_point():
    f = Frame(textured(64, seed=3))
    flow = estimate(builtin_variational(), f, f)
    assert flow.magnitude().mean() < 0.05


def test_uniform_shift_recovered(shifted_pair):
    ref, tgt = shifted_pair(64, (2.0, 0.0))
    assert _epe(estimate(builtin_variational(), ref, tgt), 2.0, 0.0) < 0.5


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        estimate(builtin_variational(), Frame(np.zeros((8, 8, 3))), Frame(np.zeros((8, 9, 3))))


def test_config_validation():
    with pytest.raises(ValueError):
        VariationalFlowConfig(iterations=0)
    with pytest.raises(ValueError):
        VariationalFlowConfig(smoothness_weight=0)
    with pytest.raises(ValueError):
        VariationalFlowConfig(pyramid_levels=0)


def test_constant_images_give_zero_flow():
    a = Frame(np.full((32, 32, 3), 0.3))
    b = Frame(np.full((32, 32, 3), 0.7))
    assert np.all(estimate(builtin_variational(), a, b).data == 0)


def test_more_iterations_do_not_hurt(shifted_pair):
    ref, tgt = shifted_pair(64, (2.0, 0.0))
    prev = None
    for it in (25, 50, 100, 200):
        e = _epe(estimate(builtin_variational(iterations=it), ref, tgt), 2.0, 0.0)
        if prev is not None:
            assert e <= 1.1 * prev
        prev = e


def test_deterministic(shifted_pair):
    ref, tgt = shifted_pair(32, (0.5, 0.25))
    est = builtin_variational()
    assert estimate(est, ref, tgt).data.tobytes() == estimate(est, ref, tgt).data.tobytes()


def _fd_check(fn, x, idx, h=1e-3):
    x = x.clone().requires_grad_(True)
    fn(x).backward()
    analytic = x.grad[idx].item()
    xp, xm = x.detach().clone(), x.detach().clone()
    xp[idx] += h
    xm[idx] -= h
    numeric = (fn(xp).item() - fn(xm).item()) / (2 * h)
    return analytic, numeric


@pytest.mark.parametrize("idx", [(0, 0, 3, 4), (0, 1, 5, 2), (0, 2, 1, 6)])
def test_gradient_of_flow_sum_matches_finite_differences(idx):
    ref = torch.from_numpy(textured(8, seed=5)).permute(2, 0, 1)[None]
    tgt = torch.from_numpy(textured(8, seed=5, shift=(0.6, -0.3))).permute(2, 0, 1)[None]
    est = builtin_variational()
    analytic, numeric = _fd_check(lambda t: est(ref, t).sum(), tgt, idx)
    assert analytic == pytest.approx(numeric, rel=1e-2, abs=1e-6)


def test_gradient_of_mean_magnitude_matches_finite_differences():
    ref = torch.from_numpy(textured(8, seed=7)).permute(2, 0, 1)[None]
    tgt = torch.from_numpy(textured(8, seed=7, shift=(0.4, 0.7))).permute(2, 0, 1)[None]
    est = builtin_variational()

    def fn(t):
        return torch.linalg.vector_norm(est(ref, t), dim=1).mean()

    for idx in [(0, 0, 2, 2), (0, 1, 6, 3), (0, 2, 4, 5)]:
        analytic, numeric = _fd_check(fn, tgt, idx)
        assert analytic == pytest.approx(numeric, rel=1e-2, abs=1e-6)


def test_shift_equivariance(shifted_pair):
    ref, tgt = shifted_pair(64, (0.7, -0.4), seed=2)
    est = builtin_variational()
    base = estimate(est, ref, tgt).data
    dx, dy = 5, 3
    roll = lambda a: np.roll(a, (dy, dx), axis=(0, 1))
    moved = estimate(est, Frame(roll(ref.data)), Frame(roll(tgt.data))).data
    b = 12
    diff = (roll(base) - moved)[b:-b, b:-b]
    assert np.hypot(diff[..., 0], diff[..., 1]).mean() < 0.2


def test_percentiles():
    assert flow_percentiles(FlowField(np.zeros((10, 10, 2))), [99.9]) == [0.0]
    a = np.zeros((10, 10, 2), np.float32)
    a.reshape(-1, 2)[:1, 0] = 30.0  # 1% of pixels at magnitude 30
    assert flow_percentiles(FlowField(a), [80]) == [0.0]
    c = FlowField.constant(6, 6, 3.0, 4.0)
    assert flow_percentiles(c, [0, 12.5, 50, 99.9, 100]) == pytest.approx([5.0] * 5)
    with pytest.raises(ValueError):
        flow_percentiles(c, [101])
    with pytest.raises(ValueError):
        flow_percentiles(np.zeros((0, 0, 2), np.float32), [50])


def _script(tmp_path, body):
    p = tmp_path / "flowcmd.py"
    p.write_text(textwrap.dedent(body))
    return f"{sys.executable} {p} {{ref}} {{tgt}} {{out}}"


def test_external_adapter_zero_passthrough(tmp_path):
    cmd = _script(tmp_path, """
        import sys, numpy as np
        from flowmag.core import load_frame, write_flo
        f = load_frame(sys.argv[1])
        write_flo(np.zeros(f.data.shape[:2] + (2,), np.float32), sys.argv[3])
    """)
    est = external_adapter(cmd)
    assert not est.differentiable
    f = Frame(np.full((8, 8, 3), 0.5))
    assert np.all(estimate(est, f, f).data == 0)


def test_external_adapter_rejects_differentiable():
    with pytest.raises(ValueError):
        external_adapter("x {ref} {tgt} {out}", differentiable=True)


def test_external_adapter_matches_builtin(tmp_path, shifted_pair):
    cmd = _script(tmp_path, """
        import sys
        from flowmag.core import load_frame, write_flo
        from flowmag.flow import builtin_variational, estimate
        write_flo(estimate(builtin_variational(), load_frame(sys.argv[1]), load_frame(sys.argv[2])), sys.argv[3])
    """)
    ref, tgt = shifted_pair(32, (1.0, 0.5))
    # keep the frames on the 8-bit grid so the PNG hop is lossless
    ref = Frame(np.round(ref.data * 255) / 255)
    tgt = Frame(np.round(tgt.data * 255) / 255)
    direct = estimate(builtin_variational(), ref, tgt)
    via = estimate(external_adapter(cmd), ref, tgt)
    np.testing.assert_array_equal(via.data, direct.data)


def test_external_adapter_failures(tmp_path):
    f = Frame(np.zeros((8, 8, 3)))
    with pytest.raises(RuntimeError):
        estimate(external_adapter(_script(tmp_path, "import sys; sys.exit(3)")), f, f)
    with pytest.raises(RuntimeError):
        estimate(external_adapter(_script(tmp_path, "pass")), f, f)
    bad = _script(tmp_path, "import sys; open(sys.argv[3], 'wb').write(b'XXXX')")
    with pytest.raises(Exception):
        estimate(external_adapter(bad), f, f)
