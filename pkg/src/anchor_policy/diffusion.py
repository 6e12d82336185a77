"""The keypose action expert: a DDPM over the H x 32 anchor block.

One denoiser is shared by all tasks. It is conditioned through FiLM on the
embedding of the current point cloud (from the encoder of the instructed
task), the normalized proprioception and a sinusoidal embedding of the
diffusion step. There is no history: a prediction is a function of the
current frame only. Of the sampled block only row 0, elements 0..13 (both
arms' joints and grippers) are ever executed.
"""

from __future__ import annotations

from dataclasses import dataclass
import json
import logging
import math
from pathlib import Path
from typing import Any, Sequence
import zipfile

import numpy as np

from .config import PolicyConfig
from .dataset import FrameRecord, Trajectory
from .errors import CorruptWeights, EmptyBatch, EmptyDataset, ShapeMismatch
from .geometry import EXECUTED_DIM, GRIPPER_INDICES, STATE_DIM
from .keypose import DEFAULT_HORIZON
from .nn import (
    Adam,
    AvgPool2,
    Conv1D,
    FiLM,
    GroupNorm,
    Module,
    ReLU,
    SinusoidalTimeEmbed,
    Upsample2,
    load_weights,
    masked_mse,
    save_weights,
)
from .router import EMBED_DIM, ENCODER_IN, EncoderBank, Router, classify, load_router, save_router
from .segmentation import Segmenter, load_segmenter, save_segmenter
from .telemetry import EventPublisher, NoopEventPublisher

logger = logging.getLogger(__name__)

BUNDLE_VERSION = 1
DEFAULT_STEPS = 100
COSINE_S = 0.008
MAX_BETA = 0.999
TIME_EMBED_DIM = 64
COND_DIM = EMBED_DIM + STATE_DIM + TIME_EMBED_DIM
LABEL_STD_FLOOR = 1e-3
GROUPS = 8

SUPERVISION_KINDS = ("full", "executed")


# ---------------------------------------------------------------------------
# Noise schedule


@dataclass(frozen=True, slots=True, eq=False)
class NoiseSchedule:
    """Per-step arrays indexed ``0..T``; step 0 is the clean sample (ᾱ_0 = 1)."""

    steps: int
    s: float
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def to_json(self) -> dict[str, Any]:
        return {"kind": "cosine", "steps": self.steps, "s": self.s}

    @staticmethod
    def from_json(data: dict[str, Any]) -> "NoiseSchedule":
        if data.get("kind") != "cosine":
            raise CorruptWeights(f"unsupported noise schedule {data.get('kind')!r}")
        return cosine_schedule(int(data["steps"]), float(data["s"]))


def cosine_schedule(steps: int = DEFAULT_STEPS, s: float = COSINE_S) -> NoiseSchedule:
    if steps < 1:
        raise ValueError("a noise schedule needs at least one step")
    t = np.arange(steps + 1, dtype=np.float64)
    f = np.cos((t / steps + s) / (1.0 + s) * math.pi / 2.0) ** 2
    ratio = f[1:] / f[:-1]
    betas = np.concatenate([[0.0], np.clip(1.0 - ratio, 0.0, MAX_BETA)])
    alphas = 1.0 - betas
    return NoiseSchedule(steps=steps, s=s, betas=betas, alphas=alphas, alpha_bars=np.cumprod(alphas))


def q_sample(schedule: NoiseSchedule, x0: np.ndarray, t: int | np.ndarray, noise: np.ndarray) -> np.ndarray:
    """``sqrt(ᾱ_t) x0 + sqrt(1 - ᾱ_t) noise``; ``t`` is a step or one step per batch row."""

    if x0.shape != noise.shape:
        raise ShapeMismatch(f"x0 {x0.shape} vs noise {noise.shape}")
    t_arr = np.asarray(t)
    if np.any((t_arr < 0) | (t_arr > schedule.steps)):
        raise ValueError(f"diffusion step outside 0..{schedule.steps}")
    ab = schedule.alpha_bars[t_arr]
    if t_arr.ndim:
        ab = ab.reshape((-1,) + (1,) * (x0.ndim - 1))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise


# ---------------------------------------------------------------------------
# Label normalization


@dataclass(frozen=True, slots=True, eq=False)
class LabelNormalizer:
    """Per-channel z-score over the 32-dim state layout, shared by labels and proprio."""

    mean: np.ndarray
    std: np.ndarray

    @staticmethod
    def identity() -> "LabelNormalizer":
        return LabelNormalizer(mean=np.zeros(STATE_DIM), std=np.ones(STATE_DIM))

    @staticmethod
    def fit(labels: np.ndarray) -> "LabelNormalizer":
        flat = np.asarray(labels, dtype=np.float64).reshape(-1, STATE_DIM)
        return LabelNormalizer(mean=flat.mean(axis=0), std=np.maximum(flat.std(axis=0), LABEL_STD_FLOOR))

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std

    def denormalize(self, x: np.ndarray) -> np.ndarray:
        return x * self.std + self.mean


def supervision_mask(kind: str, horizon: int = DEFAULT_HORIZON) -> np.ndarray:
    """Loss mask over the label block: all elements, or only the executed slice."""

    if kind == "full":
        return np.ones((horizon, STATE_DIM))
    if kind == "executed":
        mask = np.zeros((horizon, STATE_DIM))
        mask[0, :EXECUTED_DIM] = 1.0
        return mask
    raise ValueError(f"unknown supervision '{kind}' (expected one of {SUPERVISION_KINDS})")


# ---------------------------------------------------------------------------
# Denoiser


class Block(Module):
    """Conv1D -> GroupNorm -> ReLU -> FiLM."""

    def __init__(self, in_ch: int, out_ch: int, cond_dim: int, rng: np.random.Generator) -> None:
        self.conv = Conv1D(in_ch, out_ch, rng)
        self.norm = GroupNorm(GROUPS, out_ch)
        self.act = ReLU()
        self.film = FiLM(out_ch, cond_dim)

    def forward(self, x: np.ndarray, cond: np.ndarray) -> np.ndarray:
        return self.film(self.act(self.norm(self.conv(x))), cond)

    def backward(self, dy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        dh, dcond = self.film.backward(dy)
        return self.conv.backward(self.norm.backward(self.act.backward(dh))), dcond


class DenoiserUNet1D(Module):
    """Noise prediction for a (B, H, 32) block, treated as a length-H sequence of 32 channels.

    Two resolution levels with skip connections; every block is modulated by
    the same condition vector (observation embedding, proprio, step embedding).
    """

    def __init__(self, rng: np.random.Generator, horizon: int = DEFAULT_HORIZON, obs_dim: int = EMBED_DIM + STATE_DIM) -> None:
        if horizon % 4:
            raise ValueError(f"horizon must be a multiple of 4, got {horizon}")
        self.horizon = horizon
        self.obs_dim = obs_dim
        cond = obs_dim + TIME_EMBED_DIM
        self.time = SinusoidalTimeEmbed(TIME_EMBED_DIM)
        self.stem = Conv1D(STATE_DIM, 64, rng)
        self.down1 = Block(64, 64, cond, rng)
        self.pool1 = AvgPool2()
        self.down2 = Block(64, 128, cond, rng)
        self.pool2 = AvgPool2()
        self.mid = Block(128, 128, cond, rng)
        self.upsample2 = Upsample2()
        self.up2 = Block(256, 64, cond, rng)
        self.upsample1 = Upsample2()
        self.up1 = Block(128, 64, cond, rng)
        self.head = Conv1D(64, STATE_DIM, rng)

    def forward(self, x: np.ndarray, t: np.ndarray, obs: np.ndarray) -> np.ndarray:
        if x.ndim != 3 or x.shape[1:] != (self.horizon, STATE_DIM):
            raise ShapeMismatch(f"denoiser expects (B, {self.horizon}, {STATE_DIM}), got {x.shape}")
        if obs.shape != (x.shape[0], self.obs_dim):
            raise ShapeMismatch(f"denoiser condition must be ({x.shape[0]}, {self.obs_dim}), got {obs.shape}")
        cond = np.concatenate([obs, self.time(np.asarray(t))], axis=1)

        h = self.stem(x.transpose(0, 2, 1))
        skip1 = self.down1(h, cond)
        skip2 = self.down2(self.pool1(skip1), cond)
        h = self.mid(self.pool2(skip2), cond)
        h = self.up2(np.concatenate([self.upsample2(h), skip2], axis=1), cond)
        h = self.up1(np.concatenate([self.upsample1(h), skip1], axis=1), cond)
        return self.head(h).transpose(0, 2, 1)

    def backward(self, dy: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Gradients for ``(x, t, obs)``; the step gets zeros."""

        d = self.head.backward(dy.transpose(0, 2, 1))
        d, dcond = self.up1.backward(d)
        dskip1 = d[:, 64:]
        d, dc = self.up2.backward(self.upsample1.backward(d[:, :64]))
        dcond = dcond + dc
        dskip2 = d[:, 128:]
        d, dc = self.mid.backward(self.upsample2.backward(d[:, :128]))
        dcond = dcond + dc
        d, dc = self.down2.backward(self.pool2.backward(d) + dskip2)
        dcond = dcond + dc
        d, dc = self.down1.backward(self.pool1.backward(d) + dskip1)
        dcond = dcond + dc
        dx = self.stem.backward(d).transpose(0, 2, 1)
        return dx, np.zeros(dy.shape[0]), dcond[:, : self.obs_dim]


# ---------------------------------------------------------------------------
# Policy


@dataclass(frozen=True, slots=True, eq=False)
class PolicyBatch:
    points: np.ndarray  # (B, N, 12)
    proprio: np.ndarray  # (B, 32)
    labels: np.ndarray  # (B, H, 32)
    tasks: np.ndarray  # (B,)

    def __len__(self) -> int:
        return int(self.tasks.shape[0])


def collate(samples: Sequence[tuple[int, FrameRecord]]) -> PolicyBatch:
    """Stack ``(task_id, frame)`` pairs into float64 arrays."""

    if not samples:
        raise EmptyBatch("cannot collate an empty batch")
    return PolicyBatch(
        points=np.stack([np.asarray(f.points, dtype=np.float64) for _, f in samples]),
        proprio=np.stack([np.asarray(f.proprio, dtype=np.float64) for _, f in samples]),
        labels=np.stack([np.asarray(f.labels, dtype=np.float64) for _, f in samples]),
        tasks=np.array([task for task, _ in samples], dtype=np.int64),
    )


def flatten_frames(trajectories: Sequence[Trajectory]) -> list[tuple[int, FrameRecord]]:
    return [(traj.task_id, frame) for traj in trajectories for frame in traj.frames]


class DiffusionPolicy(Module):
    """Encoder bank plus shared denoiser, with the schedule and label statistics."""

    def __init__(
        self,
        rng: np.random.Generator,
        *,
        horizon: int = DEFAULT_HORIZON,
        steps: int = DEFAULT_STEPS,
    ) -> None:
        self.bank = EncoderBank(rng)
        self.denoiser = DenoiserUNet1D(rng, horizon)
        self.schedule = cosine_schedule(steps)
        self.normalizer = LabelNormalizer.identity()
        self.horizon = horizon
        self._dloss: np.ndarray | None = None

    def condition(self, points: np.ndarray, proprio: np.ndarray, tasks: np.ndarray) -> np.ndarray:
        f = self.bank(points, tasks)
        return np.concatenate([f, self.normalizer.normalize(proprio)], axis=1)

    def forward_loss(
        self,
        batch: PolicyBatch,
        t: np.ndarray,
        noise: np.ndarray,
        mask: np.ndarray | None = None,
    ) -> float:
        """Masked MSE between predicted and true noise; caches what ``backward_loss`` needs."""

        x0 = self.normalizer.normalize(batch.labels)
        xt = q_sample(self.schedule, x0, t, noise)
        eps_hat = self.denoiser(xt, t, self.condition(batch.points, batch.proprio, batch.tasks))
        loss, self._dloss = masked_mse(eps_hat, noise, mask)
        return loss

    def backward_loss(self) -> None:
        assert self._dloss is not None, "backward before forward"
        _, _, dobs = self.denoiser.backward(self._dloss)
        self.bank.backward(dobs[:, :EMBED_DIM])

    def arrays(self) -> dict[str, np.ndarray]:
        """Every tensor needed to restore the policy exactly, float64."""

        out = {f"bank.{k}": v for k, v in self.bank.state_dict().items()}
        out.update({f"denoiser.{k}": v for k, v in self.denoiser.state_dict().items()})
        out["norm.mean"] = self.normalizer.mean.copy()
        out["norm.std"] = self.normalizer.std.copy()
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        try:
            self.bank.load_state_dict({k[5:]: v for k, v in arrays.items() if k.startswith("bank.")})
            self.denoiser.load_state_dict({k[9:]: v for k, v in arrays.items() if k.startswith("denoiser.")})
            self.normalizer = LabelNormalizer(
                mean=np.asarray(arrays["norm.mean"], dtype=np.float64),
                std=np.asarray(arrays["norm.std"], dtype=np.float64),
            )
        except KeyError as e:
            raise CorruptWeights(f"policy tensor {e} missing") from e


def train_step(
    policy: DiffusionPolicy,
    opt: Adam,
    batch: PolicyBatch,
    rng: np.random.Generator,
    mask: np.ndarray | None = None,
) -> float:
    """One update on a mixed-task batch; encoders of absent tasks get no gradient."""

    if len(batch) == 0:
        raise EmptyBatch("train_step needs at least one record")
    t = rng.integers(1, policy.schedule.steps + 1, size=len(batch))
    noise = rng.standard_normal(batch.labels.shape)
    opt.zero_grad()
    loss = policy.forward_loss(batch, t, noise, mask)
    policy.backward_loss()
    opt.step()
    return loss


def sample_batch(
    policy: DiffusionPolicy,
    points: np.ndarray,
    proprio: np.ndarray,
    tasks: np.ndarray,
    rng: np.random.Generator,
) -> np.ndarray:
    """Ancestral sampling from N(0, I) down to step 0; returns de-normalized blocks."""

    sched = policy.schedule
    obs = policy.condition(points, proprio, np.asarray(tasks, dtype=np.int64))
    b = obs.shape[0]
    x = rng.standard_normal((b, policy.horizon, STATE_DIM))
    for t in range(sched.steps, 0, -1):
        eps = policy.denoiser(x, np.full(b, t), obs)
        beta, alpha, ab = sched.betas[t], sched.alphas[t], sched.alpha_bars[t]
        x = (x - beta / math.sqrt(1.0 - ab) * eps) / math.sqrt(alpha)
        if t > 1:
            var = beta * (1.0 - sched.alpha_bars[t - 1]) / (1.0 - ab)
            x = x + math.sqrt(var) * rng.standard_normal(x.shape)
    out = policy.normalizer.denormalize(x)
    for g in GRIPPER_INDICES:
        out[:, :, g] = np.clip(out[:, :, g], 0.0, 1.0)
    return out


def sample_anchors(policy: DiffusionPolicy, cloud12: np.ndarray, proprio: np.ndarray, task: int, seed: int = 0) -> np.ndarray:
    """One H x 32 anchor block for a single observation; deterministic given ``seed``."""

    if cloud12.ndim != 2 or cloud12.shape[1] != ENCODER_IN:
        raise ShapeMismatch(f"expected an (N, {ENCODER_IN}) cloud, got {cloud12.shape}")
    rng = np.random.default_rng(seed)
    return sample_batch(policy, cloud12[None], np.asarray(proprio, dtype=np.float64)[None], np.array([task]), rng)[0]


def first_anchor_errors(
    policy: DiffusionPolicy,
    samples: Sequence[tuple[int, FrameRecord]],
    *,
    seed: int = 0,
    chunk: int = 32,
) -> np.ndarray:
    """Per-sample L2 error of the executed slice (row 0, elements 0..13)."""

    rng = np.random.default_rng(seed)
    errors = []
    for start in range(0, len(samples), chunk):
        batch = collate(samples[start : start + chunk])
        pred = sample_batch(policy, batch.points, batch.proprio, batch.tasks, rng)
        diff = pred[:, 0, :EXECUTED_DIM] - batch.labels[:, 0, :EXECUTED_DIM]
        errors.append(np.linalg.norm(diff, axis=1))
    return np.concatenate(errors) if errors else np.zeros(0)


# ---------------------------------------------------------------------------
# Training


def split_trajectories(
    trajectories: Sequence[Trajectory], fraction: float, seed: int = 0
) -> tuple[list[Trajectory], list[Trajectory]]:
    """Hold out whole trajectories, so validation frames come from unseen scenes."""

    n_val = int(round(len(trajectories) * fraction))
    if fraction > 0 and len(trajectories) > 1:
        n_val = min(max(n_val, 1), len(trajectories) - 1)
    order = np.random.default_rng(np.random.SeedSequence([seed, 2])).permutation(len(trajectories))
    held = set(order[:n_val].tolist())
    train = [t for i, t in enumerate(trajectories) if i not in held]
    val = [t for i, t in enumerate(trajectories) if i in held]
    return train, val


def _normalization_sample(samples: Sequence[tuple[int, FrameRecord]], limit: int = 64) -> np.ndarray:
    idx = np.linspace(0, len(samples) - 1, num=min(limit, len(samples))).round().astype(int)
    return np.stack([np.asarray(samples[i][1].points, dtype=np.float64) for i in np.unique(idx)])


def init_policy(samples: Sequence[tuple[int, FrameRecord]], cfg: PolicyConfig, seed: int) -> DiffusionPolicy:
    """Fresh policy with encoder input and label statistics fitted on ``samples``."""

    policy = DiffusionPolicy(np.random.default_rng(seed), horizon=cfg.horizon, steps=cfg.diffusion_steps)
    policy.bank.fit_normalization(_normalization_sample(samples))
    policy.normalizer = LabelNormalizer.fit(np.stack([np.asarray(f.labels) for _, f in samples]))
    return policy


def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, epoch]))


def train_policy(
    trajectories: Sequence[Trajectory],
    cfg: PolicyConfig | None = None,
    *,
    seed: int = 0,
    supervision: str | None = None,
    epochs: int | None = None,
    validation: Sequence[Trajectory] = (),
    max_val_samples: int = 32,
    checkpoint_dir: str | Path | None = None,
    resume_from: str | Path | None = None,
    publisher: EventPublisher | None = None,
) -> tuple[DiffusionPolicy, list[dict[str, Any]]]:
    """Train the shared denoiser and the task encoders on mixed-task batches.

    The task id of each trajectory routes its frames during training. Every
    epoch draws its shuffle, steps and noise from a stream seeded by
    ``(seed, epoch)``, so a run resumed from a checkpoint ends with the same
    weights as an uninterrupted one.

    Returns the policy and one history entry per epoch (``loss`` and, when
    ``validation`` is given, ``val_error``: the median executed-slice error).
    """

    cfg = cfg or PolicyConfig()
    supervision = supervision or cfg.supervision
    epochs = cfg.epochs if epochs is None else epochs
    publisher = publisher or NoopEventPublisher()
    samples = flatten_frames(trajectories)
    if not samples:
        raise EmptyDataset("policy training needs at least one frame")
    val_samples = flatten_frames(validation)[:max_val_samples]
    mask = supervision_mask(supervision, cfg.horizon)

    policy = init_policy(samples, cfg, seed)
    opt = Adam(policy.parameters(), lr=cfg.lr, only_touched=True)
    history: list[dict[str, Any]] = []
    start_epoch = 0
    if resume_from is not None:
        start_epoch, history = load_checkpoint(resume_from, policy, opt)
        logger.info("resumed policy training from %s at epoch %d", resume_from, start_epoch)

    for epoch in range(start_epoch, epochs):
        rng = epoch_rng(seed, epoch)
        order = rng.permutation(len(samples))
        total = 0.0
        for start in range(0, order.size, cfg.batch_size):
            batch = collate([samples[i] for i in order[start : start + cfg.batch_size]])
            total += train_step(policy, opt, batch, rng, mask) * len(batch)
        entry: dict[str, Any] = {"epoch": epoch + 1, "loss": total / order.size}
        if val_samples:
            entry["val_error"] = float(np.median(first_anchor_errors(policy, val_samples, seed=seed)))
        history.append(entry)
        logger.info("policy epoch %d/%d %s", epoch + 1, epochs, " ".join(f"{k}={v:.5f}" for k, v in entry.items() if k != "epoch"))
        publisher.publish("loss", step=epoch + 1, data={"target": "policy", "supervision": supervision, **entry})
        if checkpoint_dir is not None and cfg.checkpoint_every > 0 and (epoch + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(Path(checkpoint_dir) / f"policy_epoch_{epoch + 1:04d}.npz", policy, opt, epoch + 1, history)
    return policy, history


def supervision_study(
    train: Sequence[Trajectory],
    validation: Sequence[Trajectory],
    cfg: PolicyConfig | None = None,
    *,
    seed: int = 0,
    epochs: int | None = None,
    max_val_samples: int = 32,
    publisher: EventPublisher | None = None,
) -> dict[str, list[float]]:
    """Validation curves for full-block vs executed-slice supervision, same seeds and budget."""

    if not validation:
        raise EmptyDataset("the supervision study needs validation trajectories")
    curves: dict[str, list[float]] = {}
    for kind in SUPERVISION_KINDS:
        _, history = train_policy(
            train,
            cfg,
            seed=seed,
            supervision=kind,
            epochs=epochs,
            validation=validation,
            max_val_samples=max_val_samples,
            publisher=publisher,
        )
        curves[kind] = [h["val_error"] for h in history]
    return curves


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(
    path: str | Path, policy: DiffusionPolicy, opt: Adam, epoch: int, history: Sequence[dict[str, Any]]
) -> None:
    """Parameters, Adam moments, epoch and history as float64 ``.npz``."""

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {f"policy.{k}": v for k, v in policy.arrays().items()}
    arrays.update(opt.state_arrays())
    arrays["epoch"] = np.array(epoch)
    arrays["history"] = np.array(json.dumps(list(history)))
    with open(path, "wb") as fp:
        np.savez(fp, **arrays)
    logger.info("checkpoint written to %s", path)


def load_checkpoint(path: str | Path, policy: DiffusionPolicy, opt: Adam) -> tuple[int, list[dict[str, Any]]]:
    try:
        with np.load(path) as data:
            arrays = {k: data[k] for k in data.files}
    except (OSError, ValueError, EOFError, zipfile.BadZipFile) as e:
        raise CorruptWeights(f"cannot read checkpoint {path}: {e}") from e
    if "epoch" not in arrays or "history" not in arrays:
        raise CorruptWeights(f"{path} is not a policy checkpoint")
    policy.load_arrays({k[7:]: v for k, v in arrays.items() if k.startswith("policy.")})
    opt.load_state_arrays({k: v for k, v in arrays.items() if k.startswith("adam.")})
    return int(arrays["epoch"]), list(json.loads(str(arrays["history"])))


# ---------------------------------------------------------------------------
# Bundle


@dataclass(frozen=True, slots=True, eq=False)
class Observation:
    points: np.ndarray  # (N, 12)
    proprio: np.ndarray  # (32,)


@dataclass(frozen=True, slots=True, eq=False)
class PolicyBundle:
    policy: DiffusionPolicy
    router: Router
    segmenter: Segmenter | None = None


BUNDLE_FILES = {
    "encoders": "encoders.adpw",
    "denoiser": "denoiser.adpw",
    "router": "router.adpw",
    "segmenter": "segmenter.adpw",
}


def act(bundle: PolicyBundle, observation: Observation, instruction: str, *, seed: int = 0) -> np.ndarray:
    """Joints and grippers of the first predicted anchor: 14 values, left then right arm."""

    route = classify(bundle.router, instruction)
    block = sample_anchors(bundle.policy, observation.points, observation.proprio, route.task, seed)
    return block[0, :EXECUTED_DIM].copy()


def save_bundle(bundle: PolicyBundle, out_dir: str | Path) -> Path:
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    policy = bundle.policy
    save_weights(policy.bank, root / BUNDLE_FILES["encoders"])
    save_weights(policy.denoiser, root / BUNDLE_FILES["denoiser"])
    save_router(bundle.router, root / BUNDLE_FILES["router"])
    if bundle.segmenter is not None:
        save_segmenter(bundle.segmenter, root / BUNDLE_FILES["segmenter"])
    meta = {
        "schedule": policy.schedule.to_json(),
        "horizon": policy.horizon,
        "label_mean": policy.normalizer.mean.tolist(),
        "label_std": policy.normalizer.std.tolist(),
    }
    (root / "schedule.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (root / "VERSION").write_text(f"{BUNDLE_VERSION}\n", encoding="utf-8")
    logger.info("bundle written to %s", root)
    return root


def load_bundle(bundle_dir: str | Path) -> PolicyBundle:
    root = Path(bundle_dir)
    version_file = root / "VERSION"
    if not version_file.exists():
        raise CorruptWeights(f"{root} is not a policy bundle (no VERSION file)")
    version = version_file.read_text(encoding="utf-8").strip()
    if version != str(BUNDLE_VERSION):
        raise CorruptWeights(f"bundle version {version!r} does not match {BUNDLE_VERSION}")
    for key in ("encoders", "denoiser", "router"):
        if not (root / BUNDLE_FILES[key]).exists():
            raise CorruptWeights(f"bundle is missing {BUNDLE_FILES[key]}")
    try:
        meta = json.loads((root / "schedule.json").read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise CorruptWeights(f"cannot read schedule.json: {e}") from e

    try:
        schedule = NoiseSchedule.from_json(meta["schedule"])
        horizon = int(meta["horizon"])
        label_mean, label_std = meta["label_mean"], meta["label_std"]
    except (KeyError, TypeError, ValueError) as e:
        raise CorruptWeights(f"schedule.json is incomplete: {e}") from e
    policy = DiffusionPolicy(np.random.default_rng(0), horizon=horizon, steps=schedule.steps)
    policy.bank.load_state_dict(load_weights(root / BUNDLE_FILES["encoders"]))
    policy.denoiser.load_state_dict(load_weights(root / BUNDLE_FILES["denoiser"]))
    policy.normalizer = LabelNormalizer(
        mean=np.asarray(label_mean, dtype=np.float64), std=np.asarray(label_std, dtype=np.float64)
    )
    segmenter = None
    if (root / BUNDLE_FILES["segmenter"]).exists():
        segmenter = load_segmenter(root / BUNDLE_FILES["segmenter"])
    return PolicyBundle(policy=policy, router=load_router(root / BUNDLE_FILES["router"]), segmenter=segmenter)


def bundle_tensors(bundle_dir: str | Path) -> dict[str, dict[str, tuple[int, ...]]]:
    """Tensor shapes per weight file of a bundle, without building any model."""

    root = Path(bundle_dir)
    out = {}
    for key, name in BUNDLE_FILES.items():
        path = root / name
        if path.exists():
            out[key] = {tensor: tuple(value.shape) for tensor, value in load_weights(path).items()}
    return out
