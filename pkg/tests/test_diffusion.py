from __future__ import annotations

import json

import numpy as np
import pytest

from anchor_policy.config import PolicyConfig
from anchor_policy.dataset import FrameRecord, Trajectory
from anchor_policy.diffusion import (
    BUNDLE_VERSION,
    DenoiserUNet1D,
    DiffusionPolicy,
    LabelNormalizer,
    NoiseSchedule,
    Observation,
    PolicyBundle,
    act,
    bundle_tensors,
    collate,
    cosine_schedule,
    flatten_frames,
    load_bundle,
    load_checkpoint,
    q_sample,
    sample_anchors,
    save_bundle,
    split_trajectories,
    supervision_mask,
    supervision_study,
    train_policy,
)
from anchor_policy.errors import CorruptWeights, EmptyBatch, EmptyDataset, ShapeMismatch
from anchor_policy.geometry import GRIPPER_INDICES
from anchor_policy.nn import Adam, relative_error
from anchor_policy.router import Router

N_POINTS = 16
TINY = PolicyConfig(epochs=2, batch_size=4, lr=1e-3, horizon=8, diffusion_steps=5, checkpoint_every=1)


def _frame(rng: np.random.Generator, timestep: int) -> FrameRecord:
    labels = rng.standard_normal((8, 32)) * 0.3
    labels[:, list(GRIPPER_INDICES)] = rng.uniform(0.0, 1.0, size=(8, len(GRIPPER_INDICES)))
    return FrameRecord(
        points=rng.standard_normal((N_POINTS, 12)),
        proprio=rng.standard_normal(32) * 0.3,
        labels=labels,
        dagger=False,
        timestep=timestep,
        instruction="put the ball on the pad",
    )


def _trajectories(n: int, frames: int = 3, seed: int = 0) -> list[Trajectory]:
    rng = np.random.default_rng(seed)
    return [
        Trajectory(traj_id=i, task_id=i % 3, scene_seed=100 + i, frames=tuple(_frame(rng, t) for t in range(frames)))
        for i in range(n)
    ]


def _policy(seed: int = 0, steps: int = 5) -> DiffusionPolicy:
    samples = flatten_frames(_trajectories(4, seed=seed))
    policy = DiffusionPolicy(np.random.default_rng(seed), steps=steps)
    policy.bank.fit_normalization(np.stack([f.points for _, f in samples]))
    policy.normalizer = LabelNormalizer.fit(np.stack([f.labels for _, f in samples]))
    return policy


def test_cosine_schedule_shape() -> None:
    sched = cosine_schedule(100)
    assert sched.betas.shape == (101,)
    assert sched.betas[0] == 0.0
    assert sched.alpha_bars[0] == 1.0
    assert np.all(np.diff(sched.alpha_bars) < 0)
    assert np.all(sched.betas <= 0.999)
    np.testing.assert_allclose(sched.alpha_bars, np.cumprod(1.0 - sched.betas))
    with pytest.raises(ValueError):
        cosine_schedule(0)


def test_schedule_json_round_trip() -> None:
    sched = NoiseSchedule.from_json(cosine_schedule(20).to_json())
    np.testing.assert_array_equal(sched.alpha_bars, cosine_schedule(20).alpha_bars)
    with pytest.raises(CorruptWeights):
        NoiseSchedule.from_json({"kind": "linear", "steps": 20, "s": 0.008})


def test_q_sample_endpoints() -> None:
    sched = cosine_schedule(10)
    rng = np.random.default_rng(0)
    x0 = rng.standard_normal((2, 8, 32))
    noise = rng.standard_normal(x0.shape)
    np.testing.assert_allclose(q_sample(sched, x0, 0, noise), x0)
    np.testing.assert_allclose(q_sample(sched, x0, 7, np.zeros_like(x0)), np.sqrt(sched.alpha_bars[7]) * x0)
    per_row = q_sample(sched, x0, np.array([0, 7]), np.zeros_like(x0))
    np.testing.assert_allclose(per_row[0], x0[0])
    np.testing.assert_allclose(per_row[1], np.sqrt(sched.alpha_bars[7]) * x0[1])
    with pytest.raises(ShapeMismatch):
        q_sample(sched, x0, 1, noise[:1])
    with pytest.raises(ValueError):
        q_sample(sched, x0, 11, noise)


def test_q_sample_moments() -> None:
    sched = cosine_schedule(100)
    rng = np.random.default_rng(1)
    x0 = np.full(100_000, 0.7)
    t = 40
    xt = q_sample(sched, x0, t, rng.standard_normal(x0.shape))
    ab = sched.alpha_bars[t]
    assert xt.mean() == pytest.approx(np.sqrt(ab) * 0.7, abs=0.01)
    assert xt.var() == pytest.approx(1.0 - ab, rel=0.03)


def test_label_normalizer_round_trip() -> None:
    labels = np.random.default_rng(2).standard_normal((10, 8, 32)) * 3.0 + 1.0
    norm = LabelNormalizer.fit(labels)
    z = norm.normalize(labels)
    np.testing.assert_allclose(z.reshape(-1, 32).mean(axis=0), 0.0, atol=1e-9)
    np.testing.assert_allclose(norm.denormalize(z), labels)
    constant = LabelNormalizer.fit(np.ones((3, 8, 32)))
    assert np.all(constant.std > 0)


def test_supervision_masks() -> None:
    assert supervision_mask("full").sum() == 8 * 32
    executed = supervision_mask("executed")
    assert executed.sum() == 14
    assert np.all(executed[0, :14] == 1.0)
    assert np.all(executed[1:] == 0.0)
    with pytest.raises(ValueError):
        supervision_mask("anchors")


def test_denoiser_shapes() -> None:
    rng = np.random.default_rng(3)
    net = DenoiserUNet1D(rng, horizon=8)
    x = rng.standard_normal((2, 8, 32))
    out = net(x, np.array([1, 3]), rng.standard_normal((2, 224)))
    assert out.shape == x.shape
    with pytest.raises(ValueError):
        DenoiserUNet1D(rng, horizon=6)


def test_collate_rejects_empty() -> None:
    with pytest.raises(EmptyBatch):
        collate([])
    batch = collate(flatten_frames(_trajectories(2)))
    assert batch.points.shape == (6, N_POINTS, 12)
    assert batch.labels.shape == (6, 8, 32)
    assert list(batch.tasks) == [0, 0, 0, 1, 1, 1]


def test_absent_task_encoders_get_no_gradient() -> None:
    policy = _policy()
    rng = np.random.default_rng(4)
    batch = collate([(k % 2, f) for k, (_, f) in enumerate(flatten_frames(_trajectories(2)))])
    policy.zero_grad()
    policy.forward_loss(batch, rng.integers(1, 6, size=len(batch)), rng.standard_normal(batch.labels.shape))
    policy.backward_loss()
    for k, enc in enumerate(policy.bank.encoders):
        if k < 2:
            assert any(p.touched for p in enc.parameters())
        else:
            assert not any(p.touched for p in enc.parameters())
            assert all(np.all(p.grad == 0.0) for p in enc.parameters())


def test_full_policy_gradients_match_finite_differences() -> None:
    policy = _policy(seed=5)
    rng = np.random.default_rng(6)
    for name, p in policy.named_parameters():
        if "film" in name:
            p.value = rng.standard_normal(p.value.shape) * 0.05
    frames = flatten_frames(_trajectories(2, frames=1, seed=5))
    batch = collate(frames)
    t = np.array([2, 4])
    noise = rng.standard_normal(batch.labels.shape)

    policy.zero_grad()
    policy.forward_loss(batch, t, noise)
    policy.backward_loss()

    analytic, numeric = [], []
    h = 1e-6
    for name, p in policy.named_parameters():
        if name.startswith("bank.encoders.") and not name.startswith(("bank.encoders.0.", "bank.encoders.1.")):
            continue
        flat = p.value.reshape(-1)
        for i in rng.choice(flat.size, size=min(3, flat.size), replace=False):
            old = flat[i]
            flat[i] = old + h
            up = policy.forward_loss(batch, t, noise)
            flat[i] = old - h
            down = policy.forward_loss(batch, t, noise)
            flat[i] = old
            analytic.append(p.grad.reshape(-1)[i])
            numeric.append((up - down) / (2 * h))
    assert relative_error(np.array(analytic), np.array(numeric)) < 1e-4


def test_executed_supervision_scores_only_the_first_anchor_joints() -> None:
    policy = _policy(seed=7)
    rng = np.random.default_rng(8)
    batch = collate(flatten_frames(_trajectories(2, frames=2, seed=7)))
    t = rng.integers(1, 6, size=len(batch))
    noise = rng.standard_normal(batch.labels.shape)

    xt = q_sample(policy.schedule, policy.normalizer.normalize(batch.labels), t, noise)
    eps_hat = policy.denoiser(xt, t, policy.condition(batch.points, batch.proprio, batch.tasks))
    sq = (eps_hat - noise) ** 2

    executed = policy.forward_loss(batch, t, noise, supervision_mask("executed"))
    full = policy.forward_loss(batch, t, noise, supervision_mask("full"))
    assert executed == pytest.approx(sq[:, 0, :14].mean())
    assert full == pytest.approx(sq.mean())
    assert policy.forward_loss(batch, t, noise) == pytest.approx(full)


def test_sampling_is_deterministic_and_bounded() -> None:
    policy = _policy(seed=9)
    rng = np.random.default_rng(10)
    cloud = rng.standard_normal((N_POINTS, 12))
    proprio = rng.standard_normal(32)
    a = sample_anchors(policy, cloud, proprio, task=2, seed=11)
    b = sample_anchors(policy, cloud, proprio, task=2, seed=11)
    assert a.shape == (8, 32)
    np.testing.assert_array_equal(a, b)
    for g in GRIPPER_INDICES:
        assert np.all((a[:, g] >= 0.0) & (a[:, g] <= 1.0))
    assert np.all(np.isfinite(a))
    with pytest.raises(ShapeMismatch):
        sample_anchors(policy, cloud[:, :11], proprio, task=2)


def test_act_depends_only_on_the_current_observation() -> None:
    bundle = PolicyBundle(policy=_policy(seed=12), router=Router(np.random.default_rng(12)))
    rng = np.random.default_rng(13)
    first = Observation(points=rng.standard_normal((N_POINTS, 12)), proprio=rng.standard_normal(32))
    second = Observation(points=rng.standard_normal((N_POINTS, 12)), proprio=rng.standard_normal(32))
    a = act(bundle, first, "put the mouse on the pad", seed=3)
    act(bundle, second, "put the mouse on the pad", seed=3)
    again = act(bundle, first, "put the mouse on the pad", seed=3)
    assert a.shape == (14,)
    np.testing.assert_array_equal(a, again)


def test_bundle_round_trip(tmp_path) -> None:
    bundle = PolicyBundle(policy=_policy(seed=14), router=Router(np.random.default_rng(14)))
    root = save_bundle(bundle, tmp_path / "bundle")
    assert (root / "VERSION").read_text().strip() == str(BUNDLE_VERSION)
    assert not (root / "segmenter.adpw").exists()

    loaded = load_bundle(root)
    assert loaded.segmenter is None
    assert loaded.policy.schedule.steps == 5
    np.testing.assert_allclose(loaded.policy.normalizer.std, bundle.policy.normalizer.std)
    obs = Observation(points=np.random.default_rng(15).standard_normal((N_POINTS, 12)), proprio=np.zeros(32))
    np.testing.assert_allclose(act(loaded, obs, "pick up the stapler", seed=1), act(bundle, obs, "pick up the stapler", seed=1), atol=1e-3)

    shapes = bundle_tensors(root)
    assert set(shapes) == {"encoders", "denoiser", "router"}


def test_bundle_rejects_bad_contents(tmp_path) -> None:
    bundle = PolicyBundle(policy=_policy(seed=16), router=Router(np.random.default_rng(16)))
    root = save_bundle(bundle, tmp_path / "bundle")

    (root / "VERSION").write_text(f"{BUNDLE_VERSION + 1}\n")
    with pytest.raises(CorruptWeights):
        load_bundle(root)
    (root / "VERSION").write_text(f"{BUNDLE_VERSION}\n")

    meta = json.loads((root / "schedule.json").read_text())
    del meta["horizon"]
    (root / "schedule.json").write_text(json.dumps(meta))
    with pytest.raises(CorruptWeights):
        load_bundle(root)

    (root / "denoiser.adpw").unlink()
    with pytest.raises(CorruptWeights):
        load_bundle(root)
    with pytest.raises(CorruptWeights):
        load_bundle(tmp_path)


def test_split_holds_out_whole_trajectories() -> None:
    trajs = _trajectories(10)
    train, val = split_trajectories(trajs, 0.2, seed=1)
    assert len(train) == 8 and len(val) == 2
    assert {t.traj_id for t in train}.isdisjoint({t.traj_id for t in val})
    assert split_trajectories(trajs, 0.2, seed=1)[1][0].traj_id == val[0].traj_id
    train, val = split_trajectories(_trajectories(2), 0.01)
    assert len(train) == 1 and len(val) == 1
    train, val = split_trajectories(trajs, 0.0)
    assert len(train) == 10 and not val


def test_train_policy_reports_history() -> None:
    trajs = _trajectories(4)
    policy, history = train_policy(trajs, TINY, seed=0, validation=_trajectories(1, seed=9), max_val_samples=2)
    assert [h["epoch"] for h in history] == [1, 2]
    assert all(np.isfinite(h["loss"]) and h["val_error"] >= 0 for h in history)
    assert policy.schedule.steps == 5
    with pytest.raises(EmptyDataset):
        train_policy([], TINY)


def test_resumed_training_matches_uninterrupted(tmp_path) -> None:
    trajs = _trajectories(4)
    full, history = train_policy(trajs, TINY, seed=3, checkpoint_dir=tmp_path)
    assert (tmp_path / "policy_epoch_0001.npz").exists()
    assert (tmp_path / "policy_epoch_0002.npz").exists()

    resumed, resumed_history = train_policy(trajs, TINY, seed=3, resume_from=tmp_path / "policy_epoch_0001.npz")
    assert resumed_history == history
    a, b = full.arrays(), resumed.arrays()
    assert a.keys() == b.keys()
    for name in a:
        np.testing.assert_array_equal(a[name], b[name])


def test_checkpoint_rejects_garbage(tmp_path) -> None:
    policy = _policy()
    opt = Adam(policy.parameters(), lr=1e-3, only_touched=True)
    bad = tmp_path / "bad.npz"
    bad.write_bytes(b"PK\x03\x04 not really a zip")
    with pytest.raises(CorruptWeights):
        load_checkpoint(bad, policy, opt)
    other = tmp_path / "other.npz"
    np.savez(other, x=np.zeros(3))
    with pytest.raises(CorruptWeights):
        load_checkpoint(other, policy, opt)


def test_supervision_study_needs_validation() -> None:
    with pytest.raises(EmptyDataset):
        supervision_study(_trajectories(2), [], TINY)


@pytest.mark.slow
def test_supervision_study_curves() -> None:
    curves = supervision_study(_trajectories(4), _trajectories(1, seed=8), TINY, epochs=2, max_val_samples=2)
    assert set(curves) == {"full", "executed"}
    assert all(len(v) == 2 for v in curves.values())
