"""Critical-object labels from differential depth rendering, and the
per-point segmenter trained on them.

Labels need no annotation: a scene is rendered twice, once as is and once
with every critical object hidden. Pixels whose depth changes belong to a
critical object; fused points inherit the label of the pixel they came from.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
import logging
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import PerceptionConfig, SceneConfig, SegmentationConfig
from .errors import ChannelMismatch, CorruptWeights, EmptyDataset, MissingProvenance, ResolutionMismatch
from .nn import Adam, Linear, Module, ReLU, Sequential, bce_with_logits, load_weights, save_weights, sigmoid
from .pointcloud import AUG_CHANNELS, PointCloud, augment, fps, fuse_views
from .scene import Scene, raycast_views

logger = logging.getLogger(__name__)


def occluded_render(scene: Scene) -> list[np.ndarray]:
    """Depth maps of ``scene`` with every critical object hidden."""

    hidden = scene.with_objects([replace(o, visible=False) if o.critical else o for o in scene.objects])
    return [depth for depth, _ in raycast_views(hidden)]


def depth_diff_mask(
    d_full: np.ndarray,
    d_occluded: np.ndarray,
    delta: float = 1e-5,
    direction: str = "occluded_farther",
) -> np.ndarray:
    """Boolean mask of pixels covered by hidden objects.

    ``occluded_farther`` marks ``D_occluded - D_full > delta``. The
    alternative ``below_delta`` marks ``D_occluded - D_full < delta``.
    """

    if d_full.shape != d_occluded.shape:
        raise ResolutionMismatch(f"depth maps differ in shape: {d_full.shape} vs {d_occluded.shape}")
    diff = np.asarray(d_occluded, dtype=np.float64) - np.asarray(d_full, dtype=np.float64)
    if direction == "occluded_farther":
        return diff > delta
    if direction == "below_delta":
        return diff < delta
    raise ValueError(f"unknown mask direction '{direction}'")


def project_labels(masks: Sequence[np.ndarray], cloud: PointCloud) -> np.ndarray:
    """Per-point 0/1 labels read from the mask pixel each point came from."""

    if cloud.provenance is None:
        raise MissingProvenance("labels can only be projected onto clouds with provenance")
    view, u, v = cloud.provenance[:, 0], cloud.provenance[:, 1], cloud.provenance[:, 2]
    if np.any((view < 0) | (view >= len(masks))):
        raise MissingProvenance("provenance refers to a view without a mask")
    labels = np.empty(len(cloud))
    for i, mask in enumerate(masks):
        sel = view == i
        labels[sel] = mask[v[sel], u[sel]]
    return labels


@dataclass(frozen=True, slots=True, eq=False)
class LabeledCloud:
    cloud: PointCloud  # 11 channels
    labels: np.ndarray


def observe(
    scene: Scene,
    scene_cfg: SceneConfig | None = None,
    perception: PerceptionConfig | None = None,
    *,
    seed: int = 0,
    views: list[tuple[np.ndarray, np.ndarray]] | None = None,
) -> PointCloud:
    """Render, fuse, augment and downsample one observation (11 channels)."""

    scene_cfg = scene_cfg or SceneConfig()
    perception = perception or PerceptionConfig()
    rendered = views if views is not None else raycast_views(scene)
    cloud = fuse_views(
        [(cam, depth, rgb) for cam, (depth, rgb) in zip(scene.cameras, rendered)],
        far_clip=scene_cfg.far_clip_m,
    )
    return fps(augment(cloud, perception.knn_k), perception.n_points, seed)


def label_scene(
    scene: Scene,
    scene_cfg: SceneConfig | None = None,
    perception: PerceptionConfig | None = None,
    seg_cfg: SegmentationConfig | None = None,
    *,
    seed: int = 0,
) -> LabeledCloud:
    """Observation cloud of ``scene`` with its differential-render labels."""

    seg_cfg = seg_cfg or SegmentationConfig()
    full = raycast_views(scene)
    occluded = occluded_render(scene)
    masks = [
        depth_diff_mask(depth, d_occ, seg_cfg.delta, seg_cfg.direction)
        for (depth, _), d_occ in zip(full, occluded)
    ]
    cloud = observe(scene, scene_cfg, perception, seed=seed, views=full)
    return LabeledCloud(cloud=cloud, labels=project_labels(masks, cloud))


# ---------------------------------------------------------------------------
# Segmenter


class Segmenter(Module):
    """Per-point MLP 11 -> hidden -> hidden -> 1 logit on standardized inputs."""

    def __init__(self, rng: np.random.Generator, hidden: int = 64) -> None:
        self.net = Sequential(
            Linear(AUG_CHANNELS, hidden, rng),
            ReLU(),
            Linear(hidden, hidden, rng),
            ReLU(),
            Linear(hidden, 1, rng),
        )
        self.input_mean = np.zeros(AUG_CHANNELS)
        self.input_std = np.ones(AUG_CHANNELS)

    def fit_normalization(self, features: np.ndarray) -> None:
        self.input_mean = features.mean(axis=0)
        self.input_std = np.maximum(features.std(axis=0), 1e-6)

    def forward(self, features: np.ndarray) -> np.ndarray:
        """Logits, shape (M,)."""

        x = (features - self.input_mean) / self.input_std
        return self.net(x)[:, 0]

    def backward(self, dlogits: np.ndarray) -> np.ndarray:
        return self.net.backward(dlogits[:, None])

    def state_dict(self) -> dict[str, np.ndarray]:
        state = super().state_dict()
        state["input.mean"] = self.input_mean.copy()
        state["input.std"] = self.input_std.copy()
        return state

    def load_state_dict(self, state) -> None:
        state = dict(state)
        if "input.mean" not in state or "input.std" not in state:
            raise CorruptWeights("segmenter weights carry no input normalization")
        self.input_mean = np.asarray(state.pop("input.mean"), dtype=np.float64)
        self.input_std = np.asarray(state.pop("input.std"), dtype=np.float64)
        super().load_state_dict(state)


def train_segmenter(
    data: Sequence[LabeledCloud],
    *,
    epochs: int = 20,
    seed: int = 0,
    lr: float = 1e-3,
    batch_points: int = 4096,
    hidden: int = 64,
) -> tuple[Segmenter, list[float]]:
    """Fit a :class:`Segmenter` with per-point BCE and Adam.

    Returns the model and the mean training loss per epoch; the first entry
    is the loss before any update.
    """

    if not data:
        raise EmptyDataset("segmenter training needs at least one labeled cloud")
    features = np.concatenate([d.cloud.features[:, :AUG_CHANNELS] for d in data], axis=0)
    labels = np.concatenate([d.labels for d in data]).astype(np.float64)
    if features.shape[0] == 0:
        raise EmptyDataset("labeled clouds contain no points")

    rng = np.random.default_rng(seed)
    model = Segmenter(rng, hidden=hidden)
    model.fit_normalization(features)
    opt = Adam(model.parameters(), lr=lr, only_touched=False)

    history = [bce_with_logits(model(features), labels)[0]]
    for epoch in range(epochs):
        order = rng.permutation(features.shape[0])
        total = 0.0
        for start in range(0, order.size, batch_points):
            batch = order[start : start + batch_points]
            opt.zero_grad()
            loss, dlogits = bce_with_logits(model(features[batch]), labels[batch])
            model.backward(dlogits)
            opt.step()
            total += loss * batch.size
        history.append(total / order.size)
        logger.info("segmenter epoch %d/%d loss=%.5f", epoch + 1, epochs, history[-1])
    return model, history


def predict_labels(model: Segmenter, cloud: PointCloud) -> np.ndarray:
    """Soft labels in [0, 1] for an 11-channel cloud."""

    if cloud.n_channels != AUG_CHANNELS:
        raise ChannelMismatch(f"segmenter expects {AUG_CHANNELS} channels, got {cloud.n_channels}")
    return sigmoid(model(cloud.features))


def with_labels(cloud: PointCloud, labels: np.ndarray) -> PointCloud:
    """Append the label as channel 12."""

    if cloud.n_channels != AUG_CHANNELS:
        raise ChannelMismatch(f"expected an {AUG_CHANNELS}-channel cloud, got {cloud.n_channels}")
    return cloud.with_channels(labels)


def save_segmenter(model: Segmenter, path: str | Path) -> None:
    save_weights(model, path)


def load_segmenter(path: str | Path) -> Segmenter:
    state = load_weights(path)
    hidden = int(state["net.layers.0.weight"].shape[0]) if "net.layers.0.weight" in state else 64
    model = Segmenter(np.random.default_rng(0), hidden=hidden)
    model.load_state_dict(state)
    return model


def accuracy(model: Segmenter, data: Sequence[LabeledCloud]) -> float:
    hits = 0
    total = 0
    for d in data:
        pred = predict_labels(model, d.cloud) >= 0.5
        hits += int(np.sum(pred == (d.labels >= 0.5)))
        total += len(d.labels)
    return hits / max(total, 1)
