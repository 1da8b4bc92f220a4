"""Patch-based Adam training of the residual encoder-decoder under the joint loss."""

from __future__ import annotations

import dataclasses
import hashlib
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import save_checkpoint
from .errors import DivergedError, InvalidConfig, PatchTooLarge
from .fileio import load_image, read_manifest
from .model import RedConfig, RedModel, apply_update, build, forward, parameters
from .perceptual import FeatureExtractor, joint_loss, load_extractor, make_extractor

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("iteration", "total", "mse", "perceptual", "lambda_p")


@dataclass(frozen=True)
class TrainConfig:
    manifest: Optional[Path] = None
    patch_size: int = 32
    patches_per_image: int = 16
    batch_size: int = 8
    iterations: int = 2000
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lambda_p: float = 0.1
    seed: int = 0
    checkpoint_every: int = 500
    warmup_iterations: int = 0
    extractor_seed: int = 0
    extractor_weights: Optional[Path] = None
    red: RedConfig = field(default_factory=RedConfig)

    def __post_init__(self):
        if self.patch_size < self.red.kernel_size:
            raise InvalidConfig("patch_size must be >= kernel_size")
        if self.batch_size < 1 or self.iterations < 1 or self.patches_per_image < 1:
            raise InvalidConfig("batch_size, iterations and patches_per_image must be >= 1")
        if not self.learning_rate > 0:
            raise InvalidConfig("learning_rate must be positive")
        if self.lambda_p < 0:
            raise InvalidConfig("lambda_p must be non-negative")
        if self.checkpoint_every < 0 or self.warmup_iterations < 0:
            raise InvalidConfig("checkpoint_every and warmup_iterations must be >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise InvalidConfig("adam betas must lie in [0, 1) and eps > 0")

    def items(self) -> list[tuple[str, object]]:
        """Flattened ``(key, value)`` pairs, the key=value file vocabulary."""
        out = []
        for f in dataclasses.fields(self):
            if f.name == "red":
                continue
            out.append((f.name, getattr(self, f.name)))
        out += [("num_layers", self.red.num_layers), ("channels", self.red.channels), ("kernel_size", self.red.kernel_size)]
        return out

    def to_text(self) -> str:
        return "".join(f"{k}={'' if v is None else v}\n" for k, v in self.items())

    def replace(self, **changes) -> "TrainConfig":
        red_keys = {k: changes.pop(k) for k in ("num_layers", "channels", "kernel_size") if k in changes}
        red = dataclasses.replace(self.red, **red_keys) if red_keys else self.red
        if "seed" in changes:
            red = dataclasses.replace(red, seed=changes["seed"])
        return dataclasses.replace(self, red=red, **changes)


_INT_KEYS = {
    "patch_size", "patches_per_image", "batch_size", "iterations", "seed",
    "checkpoint_every", "warmup_iterations", "extractor_seed",
    "num_layers", "channels", "kernel_size",
}
_FLOAT_KEYS = {"learning_rate", "beta1", "beta2", "eps", "lambda_p"}
_PATH_KEYS = {"manifest", "extractor_weights"}
_ALIASES = {"layers": "num_layers", "lr": "learning_rate"}


def parse_config(text: str, base_dir: Path | str = ".") -> TrainConfig:
    """Parse a key=value config.  Relative paths resolve against ``base_dir``.

    Raises:
        InvalidConfig: unknown keys, bad values, or violated constraints.
    """
    base_dir = Path(base_dir)
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key, value = _ALIASES.get(key.strip(), key.strip()), value.strip()
        if not sep:
            raise InvalidConfig(f"line {lineno}: expected key=value, got {raw!r}")
        try:
            if key in _INT_KEYS:
                values[key] = int(value)
            elif key in _FLOAT_KEYS:
                values[key] = float(value)
            elif key in _PATH_KEYS:
                values[key] = (base_dir / value) if value else None
            else:
                raise InvalidConfig(f"line {lineno}: unknown key {key!r}")
        except ValueError as exc:
            if isinstance(exc, InvalidConfig):
                raise
            raise InvalidConfig(f"line {lineno}: bad value for {key}: {value!r}") from None
    red = RedConfig(
        num_layers=values.pop("num_layers", RedConfig.num_layers),
        channels=values.pop("channels", RedConfig.channels),
        kernel_size=values.pop("kernel_size", RedConfig.kernel_size),
        seed=values.get("seed", 0),
    )
    return TrainConfig(red=red, **values)


def load_config(path) -> TrainConfig:
    path = Path(path)
    return parse_config(path.read_text(encoding="utf-8"), path.parent)


# ---------------------------------------------------------------------------


def patch_positions(shape: tuple, patch_size: int, count: int, rng: np.random.Generator) -> np.ndarray:
    """``count x 2`` array of top-left corners drawn uniformly from valid positions."""
    h, w = shape[-2:]
    if patch_size > h or patch_size > w:
        raise PatchTooLarge(f"patch {patch_size} does not fit in image {h}x{w}")
    rows = rng.integers(0, h - patch_size + 1, size=count)
    cols = rng.integers(0, w - patch_size + 1, size=count)
    return np.stack([rows, cols], axis=1)


def extract_patches(pair, patch_size: int, count: int, seed) -> list[tuple[np.ndarray, np.ndarray]]:
    """Co-located ``(noisy_patch, clean_patch)`` crops from a ``(clean, noisy)`` pair.

    ``seed`` may be an int or a ``numpy.random.Generator``.
    """
    clean, noisy = (np.asarray(x, dtype=np.float64) for x in pair)
    if clean.shape != noisy.shape:
        raise ValueError(f"pair shapes differ: {clean.shape} vs {noisy.shape}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    out = []
    for r, c in patch_positions(clean.shape, patch_size, count, rng):
        sl = (..., slice(r, r + patch_size), slice(c, c + patch_size))
        out.append((noisy[sl].copy(), clean[sl].copy()))
    return out


class PatchStream:
    """Endless, seeded sequence of training batches.

    Each epoch draws ``patches_per_image`` fresh positions per image and
    shuffles the resulting pool; batches are consecutive slices of it.  The
    running SHA-256 of every (image, row, col) served is kept in
    :attr:`digest` so that runs can prove they saw identical data.
    """

    def __init__(self, pairs, patch_size, patches_per_image, batch_size, seed):
        self.pairs = pairs
        self.patch_size = patch_size
        self.per_image = patches_per_image
        self.batch_size = batch_size
        self.rng = np.random.default_rng([seed, 0x5041544348])
        self._pool = np.empty((0, 3), dtype=np.int64)
        self._hash = hashlib.sha256()

    def _refill(self):
        parts = []
        for idx, (clean, _) in enumerate(self.pairs):
            pos = patch_positions(clean.shape, self.patch_size, self.per_image, self.rng)
            parts.append(np.column_stack([np.full(len(pos), idx), pos]))
        pool = np.concatenate(parts)
        self._pool = np.concatenate([self._pool, pool[self.rng.permutation(len(pool))]])

    def next(self) -> tuple[np.ndarray, np.ndarray]:
        while len(self._pool) < self.batch_size:
            self._refill()
        take, self._pool = self._pool[: self.batch_size], self._pool[self.batch_size :]
        self._hash.update(np.ascontiguousarray(take, dtype="<i8").tobytes())
        p = self.patch_size
        noisy = np.stack([self.pairs[i][1][:, r : r + p, c : c + p] for i, r, c in take])
        clean = np.stack([self.pairs[i][0][:, r : r + p, c : c + p] for i, r, c in take])
        return noisy, clean

    @property
    def digest(self) -> str:
        return self._hash.hexdigest()


class Adam:
    def __init__(self, shapes, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0

    def deltas(self, grads) -> list[np.ndarray]:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr1 = 1.0 - b1**self.t
        corr2 = 1.0 - b2**self.t
        out = []
        for i, g in enumerate(grads):
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * (g * g)
            m_hat = self.m[i] / corr1
            v_hat = self.v[i] / corr2
            out.append(-self.lr * m_hat / (np.sqrt(v_hat) + self.eps))
        return out


@dataclass(frozen=True)
class HistoryRecord:
    iteration: int
    total: float
    mse: float
    perceptual: float
    lambda_p: float


@dataclass
class RunHistory:
    records: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)  # (iteration, seconds, path)
    patch_digest: str = ""

    def append(self, rec: HistoryRecord) -> None:
        if self.records and rec.iteration <= self.records[-1].iteration:
            raise ValueError("history iterations must increase")
        self.records.append(rec)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    def to_tsv(self) -> str:
        lines = ["\t".join(HISTORY_COLUMNS)]
        for r in self.records:
            lines.append(f"{r.iteration}\t{r.total!r}\t{r.mse!r}\t{r.perceptual!r}\t{r.lambda_p!r}")
        lines.append(f"#patch_sha256\t{self.patch_digest}")
        return "\n".join(lines) + "\n"

    def checkpoints_tsv(self) -> str:
        lines = ["iteration\tseconds\tpath"]
        lines += [f"{it}\t{sec:.3f}\t{Path(p).name}" for it, sec, p in self.checkpoints]
        return "\n".join(lines) + "\n"


def load_pairs(manifest) -> list[tuple[np.ndarray, np.ndarray]]:
    entries = read_manifest(manifest)
    return [(load_image(e.clean), load_image(e.noisy)) for e in entries]


def _extractor(config: TrainConfig) -> FeatureExtractor:
    if config.extractor_weights is not None:
        return load_extractor(config.extractor_weights)
    return make_extractor(config.extractor_seed)


def train(
    config: TrainConfig,
    out_dir=None,
    pairs=None,
    progress=None,
) -> tuple[RedModel, RunHistory]:
    """Optimise a freshly built model on patches from the manifest pairs.

    Args:
        config: training settings; ``config.red`` defines the network.
        out_dir: where checkpoints, ``history.tsv`` and ``checkpoints.tsv``
            go.  Nothing is written when None.
        pairs: pre-loaded ``(clean, noisy)`` arrays, overriding the manifest.
        progress: optional callable receiving each :class:`HistoryRecord`.

    Returns:
        The trained model and its run history.

    Raises:
        ValueError: empty manifest.
        DivergedError: the loss became non-finite; the last checkpoint on disk
            is the last good state.
    """
    if pairs is None:
        if config.manifest is None:
            raise InvalidConfig("no manifest configured")
        pairs = load_pairs(config.manifest)
    if not pairs:
        raise ValueError("training manifest is empty")
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    model = build(config.red)
    phi = _extractor(config)
    stream = PatchStream(pairs, config.patch_size, config.patches_per_image, config.batch_size, config.seed)
    adam = Adam([p.shape for p in parameters(model)], config.learning_rate, config.beta1, config.beta2, config.eps)
    history = RunHistory()
    start = time.perf_counter()
    last_ckpt = None

    def checkpoint(it, name):
        nonlocal last_ckpt
        if out_dir is None:
            return
        path = out_dir / name
        save_checkpoint(model, path)
        last_ckpt = path
        history.checkpoints.append((it, time.perf_counter() - start, path))

    for it in range(1, config.iterations + 1):
        noisy, clean = stream.next()
        lam = 0.0 if it <= config.warmup_iterations else config.lambda_p
        params = parameters(model)
        with ad.Tape() as tape:
            _, denoised = forward(model, Tensor(noisy))
            total, mse, per = joint_loss(phi, denoised, Tensor(clean), lam)
        rec = HistoryRecord(it, total.item(), mse.item(), per.item(), lam)
        if not all(math.isfinite(v) for v in (rec.total, rec.mse, rec.perceptual)):
            raise DivergedError(f"non-finite loss at iteration {it}", iteration=it, checkpoint=last_ckpt)
        ad.backward(tape, total)
        grads = [p.grad if p.grad is not None else np.zeros(p.shape) for p in params]
        model = apply_update(model, adam.deltas(grads))
        history.append(rec)
        if progress is not None:
            progress(rec)
        if config.checkpoint_every and it % config.checkpoint_every == 0 and it != config.iterations:
            checkpoint(it, f"checkpoint_{it:06d}.rdck")

    history.patch_digest = stream.digest
    checkpoint(config.iterations, "model.rdck")
    if out_dir is not None:
        (out_dir / "history.tsv").write_text(history.to_tsv(), encoding="utf-8", newline="\n")
        (out_dir / "checkpoints.tsv").write_text(history.checkpoints_tsv(), encoding="utf-8", newline="\n")
    log.info("trained %d iterations in %.1fs", config.iterations, time.perf_counter() - start)
    return model, history
