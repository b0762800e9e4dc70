import json
import math
import os
import subprocess

import numpy as np
import pytest

import tipnet


@pytest.fixture(scope="module")
def ops():
    return tipnet.Operators("desk")


def test_operator_shapes(ops):
    nz, ny, nx = ops.grid_shape
    assert ops.n_voxels == nz * ny * nx
    assert ops.n_bins(four=True) == 4 * ops.n_bins()
    y = ops.forward(np.ones(ops.grid_shape, np.float32))
    assert y.ndim == 4 and y.shape[0] == 1
    assert y.size == ops.n_bins()
    assert (y >= 0).all() and y.sum() > 0


def test_forward_and_back_are_adjoint(ops):
    rng = np.random.default_rng(3)
    x = rng.random(ops.grid_shape, dtype=np.float32)
    for four in (False, True):
        y = rng.random(ops.n_bins(four), dtype=np.float32)
        lhs = np.dot(ops.forward(x, four).ravel().astype(np.float64), y)
        rhs = np.dot(x.ravel().astype(np.float64), ops.back(y, four).ravel())
        assert abs(lhs - rhs) <= 1e-5 * max(abs(lhs), abs(rhs))
    assert ops.adjoint_residual(pairs=4, seed=2) <= 1e-5


def test_mlem_on_a_phantom(ops):
    p = ops.phantom(seed=5, defect=True)
    labels = p["labels"]
    assert set(np.unique(labels)) <= {0.0, 1.0, 2.0, 3.0}
    assert (labels == 3).any()
    y = ops.forward(p["activity"], four=True)
    x = ops.mlem(y, n_iters=20, four=True)
    assert x.shape == ops.grid_shape
    assert (x >= 0).all()
    err = np.linalg.norm(x - p["activity"]) / np.linalg.norm(p["activity"])
    assert err < 1.0


def test_metrics():
    rng = np.random.default_rng(1)
    x = rng.random((16, 24, 24), dtype=np.float32)
    assert tipnet.ssim(x, x) == pytest.approx(1.0, abs=1e-12)
    assert tipnet.rmse(x, x) == 0.0
    assert math.isinf(tipnet.psnr(x, x, 1.0))
    z = np.zeros_like(x)
    e = np.full_like(x, 0.125)
    assert tipnet.rmse(z, e) == 0.125
    assert tipnet.psnr(z, e, 1.0) == pytest.approx(20 * math.log10(8.0), abs=1e-12)
    assert tipnet.ssim(x, x[::-1].copy()) == pytest.approx(tipnet.ssim(x[::-1].copy(), x, peak=float(x.max())))

    sigma, dx = 2.0, 0.1
    t = np.arange(-150, 151) * dx
    width = tipnet.fwhm(np.exp(-t * t / (2 * sigma * sigma)), dx)
    assert width == pytest.approx(2 * math.sqrt(2 * math.log(2)) * sigma, rel=0.02)


def test_volume_round_trip(tmp_path):
    v = np.arange(2 * 3 * 4, dtype=np.float32).reshape(2, 3, 4)
    tipnet.write_volume(tmp_path / "v", v, voxel_size=(2.0, 2.0, 3.0))
    back, meta = tipnet.read_volume(tmp_path / "v")
    assert back.shape == (2, 3, 4)
    np.testing.assert_array_equal(back, v)
    assert list(meta["voxel_size"]) == [2.0, 2.0, 3.0]


def test_errors_carry_their_kind(tmp_path):
    with pytest.raises(tipnet.Error, match="^io"):
        tipnet.read_volume(tmp_path / "absent")
    with pytest.raises(tipnet.Error, match="^shape"):
        tipnet.rmse(np.zeros((2, 2, 2), np.float32), np.zeros((2, 2, 3), np.float32))
    with pytest.raises(tipnet.Error, match="^config"):
        tipnet.Operators("huge")


def test_dataset_and_model(tmp_path):
    data = tmp_path / "data"
    manifest = tipnet.make_dataset(data, n_subjects=2, seed=4, mlem_iters=3)
    assert [s["id"] for s in manifest["subjects"]] == ["s000", "s001"]
    ref, _ = tipnet.read_volume(data / "s000" / "mlem_four")
    assert ref.shape == tipnet.Operators("desk").grid_shape
    projections, angles = tipnet.read_projections(data / "s000" / "proj_four")
    assert projections.shape[0] == len(angles) == 4

    cli = os.environ.get("TIPNET_CLI")
    if not cli:
        pytest.skip("TIPNET_CLI not set")
    config = tmp_path / "run.json"
    config.write_text(json.dumps({"dataset": {"holdout": 1}, "train": {"steps": 1, "batch_size": 1, "critic_steps_per_gen": 1}}))
    subprocess.run([cli, "--config", str(config), "--out", str(tmp_path / "model"), "train", "--data", str(data)],
                   check=True, capture_output=True)
    model = tipnet.Model(tmp_path / "model" / "final")
    assert model.n_params > 0
    assert model.metadata["phase"] == "final"
    out = model.infer(data, "s001")
    assert out["final"].shape == ref.shape
    assert np.isfinite(out["final"]).all()
