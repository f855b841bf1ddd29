import math

import numpy as np
import pytest

from uwsplat import _threads, dataio
from uwsplat.diff import Targets
from uwsplat.errors import ArgumentError, NumericalFailure
from uwsplat.optics import render_dual
from uwsplat.optim import (
    INIT_OPACITY,
    LOG_COLUMNS,
    Adam,
    TrainConfig,
    densify_and_prune,
    init_from_points,
    initial_log_scales,
    load_checkpoint,
    new_state,
    position_lr,
    save_checkpoint,
    scene_extent,
    should_densify,
    train,
)
from uwsplat.scene import PARAM_NAMES, GaussianCloud
from uwsplat.synth import SynthSpec, generate


@pytest.fixture(scope="module")
def tiny_scene():
    return generate(SynthSpec(count=10, cameras=6, width=24, height=24, holdout=3))


def zero_grads(cloud):
    return {k: np.zeros_like(v) for k, v in cloud.params().items()}


def test_position_lr_schedule():
    cfg = TrainConfig(iterations=100)
    assert position_lr(cfg, 0, 1.0) == pytest.approx(1.6e-4)
    assert position_lr(cfg, 100, 1.0) == pytest.approx(1.6e-6)
    assert position_lr(cfg, 50, 1.0) == pytest.approx(1.6e-5)
    assert position_lr(cfg, 50, 3.0) == pytest.approx(4.8e-5)
    assert position_lr(TrainConfig(iterations=100, scale_position_lr=False), 0, 3.0) == pytest.approx(1.6e-4)


def test_scene_extent():
    from uwsplat.scene import Camera

    cams = [Camera.look_at([2 * math.cos(a), 2 * math.sin(a), 0], [0, 0, 0], width=8, height=8)
            for a in np.linspace(0, 2 * math.pi, 4, endpoint=False)]
    assert scene_extent(cams) == pytest.approx(2.2)


def test_initial_scales_from_three_neighbours():
    pts = np.array([[0, 0, 0], [1, 0, 0], [0, 2, 0], [0, 0, 3], [10, 10, 10]], dtype=float)
    ls = initial_log_scales(pts)
    assert math.exp(ls[0]) == pytest.approx(2.0)
    assert initial_log_scales(pts[:1])[0] == pytest.approx(math.log(0.01))


def test_init_from_points():
    pts = np.random.default_rng(0).normal(size=(8, 3))
    cloud = init_from_points(pts, np.full((8, 3), 1.3), [np.full((4, 4, 3), 0.25)])
    np.testing.assert_allclose(cloud.opacities, INIT_OPACITY)
    assert np.all(cloud.base_colors == 1.0)
    np.testing.assert_allclose(cloud.veil, 0.25)
    assert np.all(cloud.beta_d < 0.02)
    np.testing.assert_array_equal(cloud.log_scales[:, 0], cloud.log_scales[:, 2])
    with pytest.raises(ArgumentError):
        init_from_points(np.zeros((0, 3)), np.zeros((0, 3)))


def test_adam_first_step_is_lr_sized():
    cloud = GaussianCloud.from_decoded(np.zeros((2, 3)), beta_d=0.3)
    cfg = TrainConfig(iterations=10, scale_position_lr=False)
    adam = Adam(cloud, cfg)
    grads = zero_grads(cloud)
    grads["positions"][:] = [[1.0, -2.0, 0.0], [3.0, 0.0, -1e-3]]
    grads["atten_raw"][:] = 0.7
    before_pos = cloud.positions.copy()
    adam.step(cloud, grads, 0)
    # bias-corrected first step moves each nonzero entry by exactly lr against the gradient sign
    expect = -1.6e-4 * np.sign(grads["positions"])
    np.testing.assert_allclose(cloud.positions - before_pos, expect, rtol=1e-9)
    # medium groups step in decoded units
    np.testing.assert_allclose(cloud.beta_d, 0.3 - 1e-4, rtol=1e-9)


def test_adam_raw_medium_space():
    cloud = GaussianCloud.from_decoded(np.zeros((1, 3)), beta_d=0.3)
    raw = cloud.atten_raw.copy()
    adam = Adam(cloud, TrainConfig(medium_space="raw"))
    grads = zero_grads(cloud)
    grads["atten_raw"][:] = 0.7
    adam.step(cloud, grads, 0)
    np.testing.assert_allclose(cloud.atten_raw, raw - 1e-4, rtol=1e-12)


def test_adam_clamps_colors_and_rejects_nan():
    cloud = GaussianCloud.from_decoded(np.zeros((1, 3)), colors=[[0.99995, 0.5, 0.00005]])
    adam = Adam(cloud, TrainConfig())
    grads = zero_grads(cloud)
    grads["base_colors"][:] = [[-1.0, 0.0, 1.0]]
    adam.step(cloud, grads, 0)
    np.testing.assert_array_equal(cloud.base_colors, [[1.0, 0.5, 0.0]])
    grads["opacity_logits"][0] = np.nan
    with pytest.raises(NumericalFailure) as info:
        adam.step(cloud, grads, 1)
    assert info.value.term == "opacity_logits"


def test_densify_schedule():
    cfg = TrainConfig(iterations=3000, densify_interval=500)
    hits = [i for i in range(3000) if should_densify(cfg, i)]
    assert hits == [499, 999]


def _state_with_grads(n=6, scale=0.05):
    rng = np.random.default_rng(0)
    cloud = GaussianCloud.from_decoded(rng.normal(size=(n, 3)), scales=scale, opacities=0.5,
                                       beta_d=[0.3, 0.2, 0.1])
    from uwsplat.scene import Camera

    cams = [Camera.look_at([4, 0, 0], [0, 0, 0], width=8, height=8),
            Camera.look_at([-4, 0, 0], [0, 0, 0], width=8, height=8)]
    state = new_state(cloud, TrainConfig(), cams)
    state.grad_accum[:] = 1.0
    state.grad_count[:] = 1
    return state


def test_densify_clone_split_prune():
    state = _state_with_grads(6)
    extent = state.extent
    state.cloud.log_scales[:3] = math.log(0.001 * extent)  # small: clone
    state.cloud.log_scales[3:] = math.log(0.05 * extent)  # large: split
    state.cloud.opacity_logits[5] = -10.0  # pruned after densification (with its split children)
    state.grad_accum[2] = 0.0  # below threshold: untouched
    parent = state.cloud.copy()
    stats = densify_and_prune(state)
    assert (stats.cloned, stats.split) == (2, 3)
    cloud = state.cloud
    # 3 unsplit + 2 clones + 6 children, minus the 2 transparent children
    assert cloud.count == 3 + 2 + 6 - 2 and stats.pruned == 2
    np.testing.assert_array_equal(cloud.positions[:3], parent.positions[:3])
    np.testing.assert_array_equal(cloud.positions[3:5], parent.positions[:2])
    children = cloud.subset(np.arange(5, cloud.count))
    np.testing.assert_allclose(children.scales, 0.05 * extent / 1.6, rtol=1e-12)
    np.testing.assert_allclose(children.beta_d, np.broadcast_to([0.3, 0.2, 0.1], (4, 3)), rtol=1e-9)
    for k in PARAM_NAMES:
        assert state.adam.m[k].shape == getattr(cloud, k).shape
        assert not state.adam.m[k][3:].any()
    assert state.grad_accum.shape == (cloud.count,) and not state.grad_accum.any()


def test_densify_respects_budget():
    state = _state_with_grads(6)
    state.cloud.log_scales[:] = math.log(1e-4)
    state.grad_accum[:] = [1, 5, 2, 4, 3, 6]
    state.config = TrainConfig(max_gaussians=8)
    stats = densify_and_prune(state)
    assert stats.cloned == 2 and state.cloud.count == 8
    np.testing.assert_array_equal(state.cloud.positions[6:], state.cloud.positions[[1, 5]])


def test_config_validation_and_digest():
    with pytest.raises(ArgumentError):
        TrainConfig(lr_atten=0)
    with pytest.raises(ArgumentError):
        TrainConfig(medium_space="log")
    with pytest.raises(ArgumentError):
        TrainConfig(lambda_ssim=2)
    assert TrainConfig().digest() == TrainConfig().digest() != TrainConfig(seed=1).digest()


@pytest.mark.xfail(strict=False, reason="tone-mapped photometric loss fades the oversized initial "
                   "Gaussians before shrinking them; linear L2 reaches ~0.57x at 500 steps, ~0.31x at 2000")
def test_photometric_only_single_view_fit():
    _, bundle = generate(SynthSpec(count=10, layout="grid", seed=0))
    v = bundle.train[0]
    bundle.train = [v]
    cfg = TrainConfig(iterations=500, lambda_depth=0, lambda_spatial=0, lambda_spectral=0, lambda_exposure=0,
                      densify_interval=10**6)
    cloud = init_from_points(*bundle.init_points, [bundle.images[v]])
    cam, target = bundle.cameras[v], bundle.images[v]
    before = np.mean((render_dual(cloud, cam).water.color - target) ** 2)
    result = train(bundle, cfg, cloud=cloud)
    after = np.mean((render_dual(result.cloud, cam).water.color - target) ** 2)
    assert after <= 0.25 * before


def test_initial_scales_on_unit_grid():
    g = np.stack(np.meshgrid(np.arange(4), np.arange(4), np.arange(4), indexing="ij"), -1).reshape(-1, 3) * 0.5
    np.testing.assert_allclose(initial_log_scales(g.astype(float)), math.log(0.5), atol=1e-12)


def test_train_outputs_and_checkpoint(tiny_scene, tmp_path):
    truth, bundle = tiny_scene
    cfg = TrainConfig(iterations=30, checkpoint_interval=20, densify_interval=10)
    result = train(bundle, cfg, tmp_path)
    for name in ("loss_log.tsv", "final.ply", "final.state.npz", "train_psnr.tsv",
                 "checkpoints/iter_000000.ply", "checkpoints/iter_000020.ply"):
        assert (tmp_path / name).is_file(), name
    lines = (tmp_path / "loss_log.tsv").read_text().splitlines()
    assert lines[0].split("\t") == list(LOG_COLUMNS) and len(lines) == 31
    # regularizers run every 10th iteration, otherwise logged as nan
    assert lines[1].split("\t")[6] != "nan" and lines[2].split("\t")[6] == "nan"
    cloud, meta = load_checkpoint(tmp_path / "final.ply")
    assert cloud.count == result.cloud.count
    assert int(meta["iteration"]) == 30 and int(meta["adam_step"]) == 30
    assert str(meta["config_hash"]) == cfg.digest()
    for k in PARAM_NAMES:
        np.testing.assert_array_equal(meta[f"m_{k}"], result.state.adam.m[k])
    assert set(result.train_psnr) == {bundle.cameras[i].name for i in bundle.train}


def test_zero_iterations_writes_no_final(tiny_scene, tmp_path):
    _, bundle = tiny_scene
    train(bundle, TrainConfig(iterations=0), tmp_path)
    assert (tmp_path / "checkpoints" / "iter_000000.ply").is_file()
    assert not (tmp_path / "final.ply").exists()


def test_save_checkpoint_without_sidecar(tmp_path):
    cloud = GaussianCloud.from_decoded(np.zeros((2, 3)))
    dataio.write_ply(cloud, tmp_path / "c.ply")
    back, meta = load_checkpoint(tmp_path / "c.ply")
    assert meta is None and back.count == 2


def test_training_is_deterministic_across_thread_counts(tiny_scene, tmp_path):
    _, bundle = tiny_scene
    cfg = TrainConfig(iterations=120, densify_interval=50, seed=3)
    outputs = []
    prev = _threads.get_threads()
    try:
        for n in (1, 8, 1):
            _threads.set_threads(n)
            out = tmp_path / f"run{len(outputs)}"
            train(bundle, cfg, out)
            outputs.append((out / "final.ply").read_bytes())
    finally:
        _threads.set_threads(prev)
    assert outputs[0] == outputs[1] == outputs[2]


def test_checkpoint_state_roundtrip(tiny_scene, tmp_path):
    truth, bundle = tiny_scene
    state = new_state(truth.copy(), TrainConfig(), bundle.cameras)
    state.iteration = 7
    save_checkpoint(state, tmp_path / "x.ply")
    cloud, meta = load_checkpoint(tmp_path / "x.ply")
    assert int(meta["iteration"]) == 7
    assert float(meta["extent"]) == state.extent
    np.testing.assert_allclose(cloud.positions, truth.positions, atol=1e-6)
    assert Targets(bundle.images[0]).pseudo_depth is None
