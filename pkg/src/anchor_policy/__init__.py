"""anchor_policy

Desk-scale keypose diffusion policy:

- tabletop simulator, scripted expert and differential-depth labels
  (see :mod:`anchor_policy.scene`, :mod:`anchor_policy.segmentation`)
- point-cloud fusion, augmentation and sampling (see :mod:`anchor_policy.pointcloud`)
- action anchors and sparse trajectory datasets (see :mod:`anchor_policy.keypose`,
  :mod:`anchor_policy.dataset`)
- instruction routing, task encoders and the diffusion action expert
  (see :mod:`anchor_policy.router`, :mod:`anchor_policy.diffusion`)
- YAML/.env configuration (see :mod:`anchor_policy.config`)
"""

from .config import RunConfig, load_config
from .diffusion import DiffusionPolicy, Observation, PolicyBundle, act, load_bundle, sample_anchors, save_bundle
from .errors import AnchorPolicyError, ConfigError, CorruptDataset, CorruptWeights
from .keypose import AnchorType, future_anchor_window, tag_anchors_symbolic
from .pointcloud import PointCloud, augment, fps, fuse_views, knn
from .router import classify, train_router
from .scene import execute_anchor, expert_rollout, make_task_scene, task_spec

__all__ = [
	"RunConfig",
	"load_config",
	"DiffusionPolicy",
	"Observation",
	"PolicyBundle",
	"act",
	"load_bundle",
	"sample_anchors",
	"save_bundle",
	"AnchorPolicyError",
	"ConfigError",
	"CorruptDataset",
	"CorruptWeights",
	"AnchorType",
	"future_anchor_window",
	"tag_anchors_symbolic",
	"PointCloud",
	"augment",
	"fps",
	"fuse_views",
	"knn",
	"classify",
	"train_router",
	"execute_anchor",
	"expert_rollout",
	"make_task_scene",
	"task_spec",
]
