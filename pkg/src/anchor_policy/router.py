"""Instruction routing and the task-conditioned point-cloud encoders.

A templated instruction corpus trains a hashed bag-of-words classifier whose
argmax picks one of eight encoders. Only that encoder sees the observation,
and during training only that encoder receives gradient.
"""

from __future__ import annotations

from dataclasses import dataclass
import json
import logging
from pathlib import Path
import re
from typing import Iterable, Sequence

import numpy as np

from .config import TASK_NAMES
from .errors import ChannelMismatch, CorruptWeights, EmptyDataset, ShapeMismatch
from .nn import Adam, Linear, MaxPoolPoints, Module, ReLU, load_weights, save_weights, softmax, softmax_cross_entropy

logger = logging.getLogger(__name__)

N_TASKS = len(TASK_NAMES)
HASH_DIM = 1024
ENCODER_IN = 12
ENCODER_HIDDEN = 128
EMBED_DIM = 192

_FNV_OFFSET = 0x811C9DC5
_FNV_PRIME = 0x01000193


# ---------------------------------------------------------------------------
# Instruction corpus

_FRAMES: tuple[str, ...] = (
    "{verb} the {obj} {prep} the {tgt}",
    "please {verb} the {obj} {prep} the {tgt}",
    "could you {verb} the {obj} {prep} the {tgt}",
    "the {obj} should go {prep} the {tgt}",
    "{verb} the {obj} and leave it {prep} the {tgt}",
    "i want the {obj} {prep} the {tgt}",
    "pick up the {obj} then {verb} it {prep} the {tgt}",
    "robot {verb} the {obj} {prep} the {tgt} now",
)

_PLACE_VERBS = ("place", "put", "move", "set", "carry")
_PREPS = ("on", "onto", "to", "over")

# Object and target phrases carry at least one token unique to their task.
_TASK_PHRASES: dict[str, tuple[tuple[str, ...], tuple[str, ...], tuple[str, ...]]] = {
    "place_mouse": (("mouse", "computer mouse", "red mouse"), ("pad", "mouse pad", "mousepad"), _PLACE_VERBS),
    "place_stapler": (("stapler", "blue stapler", "office stapler"), ("tray", "paper tray", "inbox"), _PLACE_VERBS),
    "place_bell": (("bell", "yellow bell", "service bell"), ("coaster", "bell mat", "counter"), _PLACE_VERBS),
    "place_block": (("block", "green block", "cube"), ("square", "marked square", "tile"), _PLACE_VERBS),
    "place_ball": (("ball", "pink ball", "sphere"), ("bowl", "round bowl", "dish"), _PLACE_VERBS),
    "stack_blocks": (
        ("small block", "green cube", "little block"),
        ("top of the base block", "big block", "large base block"),
        ("stack", "pile", "place", "put"),
    ),
    "place_two_blocks": (
        ("two blocks", "both blocks", "pair of blocks"),
        ("two squares", "matching squares", "marked squares"),
        _PLACE_VERBS,
    ),
    "sort_balls": (
        ("two balls", "both balls", "colored balls"),
        ("bins", "matching bins", "sorting bins"),
        ("sort", "distribute", "drop"),
    ),
}


@dataclass(frozen=True, slots=True)
class Instruction:
    text: str
    task: int
    frame: int = -1


def gen_instructions(n: int, seed: int = 0) -> list[Instruction]:
    """``n`` templated paraphrases, cycling through the eight tasks."""

    if n < N_TASKS:
        raise ValueError(f"need at least {N_TASKS} instructions to cover every task")
    rng = np.random.default_rng(seed)
    return [sample_instruction(i % N_TASKS, rng) for i in range(n)]


def sample_instruction(task: int, rng: np.random.Generator) -> Instruction:
    objs, tgts, verbs = _TASK_PHRASES[TASK_NAMES[task]]
    frame = int(rng.integers(len(_FRAMES)))
    text = _FRAMES[frame].format(
        verb=verbs[int(rng.integers(len(verbs)))],
        obj=objs[int(rng.integers(len(objs)))],
        prep=_PREPS[int(rng.integers(len(_PREPS)))],
        tgt=tgts[int(rng.integers(len(tgts)))],
    )
    return Instruction(text=text, task=task, frame=frame)


def split_by_frame(corpus: Sequence[Instruction], holdout_fraction: float = 0.2) -> tuple[list[Instruction], list[Instruction]]:
    """Train/test split where test sentences use sentence frames never seen in training."""

    n_hold = max(1, round(len(_FRAMES) * holdout_fraction))
    held = set(range(len(_FRAMES) - n_hold, len(_FRAMES)))
    train = [s for s in corpus if s.frame not in held]
    test = [s for s in corpus if s.frame in held]
    return train, test


def write_corpus(corpus: Iterable[Instruction], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fp:
        for s in corpus:
            fp.write(json.dumps({"text": s.text, "task": s.task}) + "\n")


def read_corpus(path: str | Path) -> list[Instruction]:
    out = []
    with open(path, "r", encoding="utf-8") as fp:
        for line in fp:
            if line.strip():
                row = json.loads(line)
                out.append(Instruction(text=str(row["text"]), task=int(row["task"])))
    return out


# ---------------------------------------------------------------------------
# Router


def tokenize(text: str) -> list[str]:
    return [t for t in re.split(r"[^a-z0-9]+", text.lower()) if t]


def fnv1a32(token: str) -> int:
    h = _FNV_OFFSET
    for byte in token.encode("utf-8"):
        h ^= byte
        h = (h * _FNV_PRIME) & 0xFFFFFFFF
    return h


def featurize(text: str) -> np.ndarray:
    """Hashed bag-of-words token counts."""

    x = np.zeros(HASH_DIM)
    for token in tokenize(text):
        x[fnv1a32(token) % HASH_DIM] += 1.0
    return x


class Router(Module):
    def __init__(self, rng: np.random.Generator) -> None:
        self.linear = Linear(HASH_DIM, N_TASKS, rng)

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self.linear(x)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        return self.linear.backward(dy)


@dataclass(frozen=True, slots=True, eq=False)
class Route:
    logits: np.ndarray
    task: int
    empty_text: bool = False

    @property
    def task_name(self) -> str:
        return TASK_NAMES[self.task]

    @property
    def probabilities(self) -> np.ndarray:
        return softmax(self.logits)


def train_router(
    corpus: Sequence[Instruction],
    *,
    epochs: int = 20,
    seed: int = 0,
    lr: float = 0.05,
    batch_size: int = 256,
) -> tuple[Router, list[float]]:
    if not corpus:
        raise EmptyDataset("router training needs a non-empty corpus")
    rng = np.random.default_rng(seed)
    model = Router(rng)
    x = np.stack([featurize(s.text) for s in corpus])
    y = np.array([s.task for s in corpus], dtype=np.int64)
    opt = Adam(model.parameters(), lr=lr, only_touched=False)

    history = []
    for epoch in range(epochs):
        order = rng.permutation(len(corpus))
        total = 0.0
        for start in range(0, order.size, batch_size):
            batch = order[start : start + batch_size]
            opt.zero_grad()
            loss, dlogits = softmax_cross_entropy(model(x[batch]), y[batch])
            model.backward(dlogits)
            opt.step()
            total += loss * batch.size
        history.append(total / order.size)
        logger.info("router epoch %d/%d loss=%.5f", epoch + 1, epochs, history[-1])
    return model, history


def classify(model: Router, text: str) -> Route:
    """Logits and argmax task (lowest index on ties) for one instruction.

    Text without tokens routes to task 0 with ``empty_text`` set.
    """

    if not tokenize(text):
        logger.warning("empty instruction; routing to task 0")
        return Route(logits=np.zeros(N_TASKS), task=0, empty_text=True)
    logits = model(featurize(text)[None, :])[0]
    return Route(logits=logits, task=int(np.argmax(logits)))


def router_accuracy(model: Router, corpus: Sequence[Instruction]) -> float:
    if not corpus:
        raise EmptyDataset("accuracy over an empty corpus")
    x = np.stack([featurize(s.text) for s in corpus])
    pred = np.argmax(model(x), axis=1)
    return float(np.mean(pred == np.array([s.task for s in corpus])))


def save_router(model: Router, path: str | Path) -> None:
    save_weights(model, path)


def load_router(path: str | Path) -> Router:
    model = Router(np.random.default_rng(0))
    model.load_state_dict(load_weights(path))
    return model


# ---------------------------------------------------------------------------
# Task encoders


class TaskEncoder(Module):
    """Per-point MLP, max-pool over points, linear projection: (B, N, 12) -> (B, 192)."""

    def __init__(self, rng: np.random.Generator) -> None:
        self.point_mlp = Linear(ENCODER_IN, ENCODER_HIDDEN, rng)
        self.act = ReLU()
        self.pool = MaxPoolPoints()
        self.head = Linear(ENCODER_HIDDEN, EMBED_DIM, rng)

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self.head(self.pool(self.act(self.point_mlp(x))))

    def backward(self, dy: np.ndarray) -> np.ndarray:
        return self.point_mlp.backward(self.act.backward(self.pool.backward(self.head.backward(dy))))


class EncoderBank(Module):
    """Eight independent encoders sharing one fixed input standardization."""

    def __init__(self, rng: np.random.Generator, n_tasks: int = N_TASKS) -> None:
        self.encoders = [TaskEncoder(rng) for _ in range(n_tasks)]
        self.input_mean = np.zeros(ENCODER_IN)
        self.input_std = np.ones(ENCODER_IN)
        self._groups: list[tuple[int, np.ndarray]] = []

    def fit_normalization(self, points: np.ndarray) -> None:
        flat = points.reshape(-1, ENCODER_IN)
        self.input_mean = flat.mean(axis=0)
        self.input_std = np.maximum(flat.std(axis=0), 1e-6)

    def forward(self, clouds: np.ndarray, tasks: np.ndarray) -> np.ndarray:
        """Embeddings (B, 192); sample ``i`` goes through encoder ``tasks[i]`` only."""

        if clouds.ndim != 3 or clouds.shape[2] != ENCODER_IN:
            raise ChannelMismatch(f"encoders expect (B, N, {ENCODER_IN}) clouds, got {clouds.shape}")
        tasks = np.asarray(tasks, dtype=np.int64)
        if tasks.shape != (clouds.shape[0],):
            raise ShapeMismatch("one task id per cloud is required")
        x = (clouds - self.input_mean) / self.input_std
        out = np.zeros((clouds.shape[0], EMBED_DIM))
        self._groups = []
        for k in np.unique(tasks):
            rows = np.flatnonzero(tasks == k)
            out[rows] = self.encoders[int(k)](x[rows])
            self._groups.append((int(k), rows))
        return out

    def backward(self, dy: np.ndarray) -> None:
        for k, rows in self._groups:
            self.encoders[k].backward(dy[rows])

    def state_dict(self) -> dict[str, np.ndarray]:
        state = super().state_dict()
        state["input.mean"] = self.input_mean.copy()
        state["input.std"] = self.input_std.copy()
        return state

    def load_state_dict(self, state) -> None:
        state = dict(state)
        if "input.mean" not in state or "input.std" not in state:
            raise CorruptWeights("encoder weights carry no input normalization")
        self.input_mean = np.asarray(state.pop("input.mean"), dtype=np.float64)
        self.input_std = np.asarray(state.pop("input.std"), dtype=np.float64)
        super().load_state_dict(state)


def encode_obs(bank: EncoderBank, k: int, cloud12: np.ndarray) -> np.ndarray:
    """Embedding of one (N, 12) cloud by encoder ``k``; no other encoder runs."""

    if not 0 <= k < len(bank.encoders):
        raise ValueError(f"encoder index {k} out of range")
    if cloud12.ndim != 2 or cloud12.shape[1] != ENCODER_IN:
        raise ChannelMismatch(f"expected an (N, {ENCODER_IN}) cloud, got {cloud12.shape}")
    x = (cloud12[None, :, :] - bank.input_mean) / bank.input_std
    return bank.encoders[k](x)[0]
