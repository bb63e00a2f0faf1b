"""Mini-batch training: Adam updates, in-plane rotation augmentation, records.

Everything is driven by one seeded generator, so a (seed, config, dataset)
triple fully determines the trained parameters.  Rotation angles are
quantized to a configurable step; the penalty map for an augmented sample is
rebuilt from the rotated ground truth (never rotated itself) and cached per
(sample, quantized angle), keeping the map consistent with its labels.
"""

from __future__ import annotations

import contextlib
import math
import time
from dataclasses import dataclass, field

import numpy as np

try:
    from threadpoolctl import threadpool_limits
except ImportError:  # pragma: no cover - optional speedup only
    threadpool_limits = None


def _single_threaded_blas():
    """BLAS worker wake-ups dwarf the small per-tap matrix products here."""
    if threadpool_limits is None:
        return contextlib.nullcontext()
    return threadpool_limits(limits=1, user_api="blas")

from .grid import LabelVolume, ScalarVolume
from .losses import LossConfig, LossInput, compute_loss
from .metrics import MetricReport, evaluate
from .net import GradientSet, SegNet, Workspace, backward, forward, predict, save_checkpoint
from .penalty import PenaltyMap, build_penalty

__all__ = [
    "AdamParams",
    "AdamState",
    "TrainConfig",
    "TrainRecord",
    "TrainingDiverged",
    "adam_step",
    "rotate_inplane",
    "train",
]


@dataclass(frozen=True)
class AdamParams:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamState:
    """Step count plus first/second-moment accumulators, one pair per tensor."""

    params: AdamParams
    t: int
    m: list[np.ndarray]
    v: list[np.ndarray]
    names: list[str]

    @classmethod
    def for_net(cls, net: SegNet, params: AdamParams = AdamParams()) -> "AdamState":
        named = net.parameters()
        return cls(
            params=params,
            t=0,
            m=[np.zeros_like(a) for _, a in named],
            v=[np.zeros_like(a) for _, a in named],
            names=[n for n, _ in named],
        )


def adam_step(state: AdamState, params: list[tuple[str, np.ndarray]], grads: GradientSet) -> None:
    """One bias-corrected Adam update, applied to the parameter arrays in place."""
    hp = state.params
    named_grads = grads.arrays()
    if [n for n, _ in params] != state.names or [n for n, _ in named_grads] != state.names:
        raise ValueError("parameter/gradient tensors do not match the optimizer state")
    for (name, g) in named_grads:
        if not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient in {name}")
    state.t += 1
    bc1 = 1.0 - hp.beta1**state.t
    bc2 = 1.0 - hp.beta2**state.t
    for i, ((_, p), (_, g)) in enumerate(zip(params, named_grads)):
        state.m[i] = hp.beta1 * state.m[i] + (1.0 - hp.beta1) * g
        state.v[i] = hp.beta2 * state.v[i] + (1.0 - hp.beta2) * (g * g)
        m_hat = state.m[i] / bc1
        v_hat = state.v[i] / bc2
        p -= hp.lr * m_hat / (np.sqrt(v_hat) + hp.eps)


def rotate_inplane(
    image: ScalarVolume, labels: LabelVolume, degrees: float
) -> tuple[ScalarVolume, LabelVolume]:
    """Rotate both volumes about the z axis around the volume center.

    The image is resampled bilinearly within each axial slice, labels by
    nearest neighbor; voxels that map outside the field become image 0 /
    background.  degrees == 0 returns exact copies.
    """
    if abs(degrees) > 180.0:
        raise ValueError(f"rotation angle must lie in [-180, 180], got {degrees}")
    if image.shape != labels.shape:
        raise ValueError("image/label shapes differ")
    if degrees == 0.0:
        return image, labels

    nz, ny, nx = image.shape.zyx
    cx, cy = (nx - 1) / 2.0, (ny - 1) / 2.0
    theta = math.radians(degrees)
    ct, st = math.cos(theta), math.sin(theta)
    xs = np.arange(nx) - cx
    ys = (np.arange(ny) - cy)[:, None]
    # inverse mapping: source coordinates that land on each output voxel
    sx = ct * xs + st * ys + cx
    sy = -st * xs + ct * ys + cy

    x0 = np.floor(sx).astype(np.intp)
    y0 = np.floor(sy).astype(np.intp)
    fx = sx - x0
    fy = sy - y0
    img = np.zeros(image.shape.zyx)
    for dy, dx, w in (
        (0, 0, (1 - fy) * (1 - fx)),
        (0, 1, (1 - fy) * fx),
        (1, 0, fy * (1 - fx)),
        (1, 1, fy * fx),
    ):
        xi, yi = x0 + dx, y0 + dy
        valid = (xi >= 0) & (xi < nx) & (yi >= 0) & (yi < ny)
        vals = image.data[:, np.clip(yi, 0, ny - 1), np.clip(xi, 0, nx - 1)]
        img += (w * valid) * vals

    xn = np.rint(sx).astype(np.intp)
    yn = np.rint(sy).astype(np.intp)
    valid = (xn >= 0) & (xn < nx) & (yn >= 0) & (yn < ny)
    lab = np.where(
        valid,
        labels.labels[:, np.clip(yn, 0, ny - 1), np.clip(xn, 0, nx - 1)],
        0,
    ).astype(np.uint8)
    return ScalarVolume(image.shape, img), LabelVolume(labels.shape, lab, labels.num_classes)


@dataclass(frozen=True)
class TrainConfig:
    loss: LossConfig = field(default_factory=LossConfig)
    iterations: int = 300
    batch_size: int = 2
    augment_max_degrees: float = 15.0
    augment_angle_step: float = 1.0  # rotation angles snap to this grid
    rng_seed: int = 0
    eval_every: int = 0  # 0 disables in-training evaluation
    checkpoint_path: str | None = None
    adam: AdamParams = field(default_factory=AdamParams)

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not (0.0 <= self.augment_max_degrees <= 180.0):
            raise ValueError("augment_max_degrees must lie in [0, 180]")
        if self.augment_angle_step <= 0:
            raise ValueError("augment_angle_step must be > 0")


@dataclass
class TrainRecord:
    losses: list[float] = field(default_factory=list)
    evals: list[tuple[int, MetricReport]] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)

    def csv_rows(self) -> list[str]:
        """iteration, loss, then foreground-mean metric columns at eval rows."""
        rows = ["iteration,loss,g_dsc,b_dsc,rb_dsc_1,rb_dsc_2,rb_dsc_3,rb_dsc_4"]
        by_iter = {it: rep for it, rep in self.evals}
        for i, loss in enumerate(self.losses, start=1):
            cells = [str(i), f"{loss:.6f}"]
            rep = by_iter.get(i)
            if rep is None:
                cells += [""] * 6
            else:
                cells += [
                    f"{v:.6f}"
                    for v in (rep.mean_g_dsc, rep.mean_b_dsc, *rep.mean_relaxed_b_dsc)
                ]
            rows.append(",".join(cells))
        return rows


class TrainingDiverged(RuntimeError):
    """Loss or gradients became non-finite; carries the record up to that point."""

    def __init__(self, message: str, record: TrainRecord):
        super().__init__(message)
        self.record = record


Sample = tuple[ScalarVolume, LabelVolume, PenaltyMap | None]


def train(net: SegNet, dataset: list[Sample], cfg: TrainConfig) -> tuple[SegNet, TrainRecord]:
    """Optimize the network in place; returns it with the full training record."""
    if not dataset:
        raise ValueError("dataset is empty")
    needs_phi = cfg.loss.kind == "penalized_ce"
    if needs_phi and any(phi is None for _, _, phi in dataset):
        raise ValueError("penalized loss requires a precomputed penalty map per sample")

    rng = np.random.default_rng(cfg.rng_seed)
    state = AdamState.for_net(net, cfg.adam)
    record = TrainRecord()
    ws = Workspace()  # per-sample passes run strictly in sequence
    cache: dict[tuple[int, int], tuple[ScalarVolume, LabelVolume, PenaltyMap | None]] = {}

    def augmented(i: int, angle_key: int) -> tuple[ScalarVolume, LabelVolume, PenaltyMap | None]:
        key = (i, angle_key)
        if key not in cache:
            image, gt, phi = dataset[i]
            if angle_key == 0:
                cache[key] = (image, gt, phi)
            else:
                img_r, gt_r = rotate_inplane(image, gt, angle_key * cfg.augment_angle_step)
                phi_r = build_penalty(gt_r) if needs_phi else None
                cache[key] = (img_r, gt_r, phi_r)
        return cache[key]

    with _single_threaded_blas():
        for it in range(1, cfg.iterations + 1):
            t0 = time.perf_counter()
            idxs = rng.integers(0, len(dataset), size=cfg.batch_size)
            angles = rng.uniform(
                -cfg.augment_max_degrees, cfg.augment_max_degrees, size=cfg.batch_size
            )
            total: GradientSet | None = None
            batch_loss = 0.0
            for i, raw_angle in zip(idxs, angles):
                angle_key = int(round(raw_angle / cfg.augment_angle_step))
                image, gt, phi = augmented(int(i), angle_key)
                try:
                    logits, tape = forward(net, image, ws)
                    outcome = compute_loss(LossInput(logits, gt, phi), cfg.loss)
                except ValueError as e:
                    if "non-finite" in str(e):
                        raise TrainingDiverged(
                            f"diverged at iteration {it}: {e}", record
                        ) from e
                    raise
                grads = backward(net, tape, outcome.grad, ws)
                batch_loss += outcome.value
                total = grads if total is None else total.add(grads)
            mean_loss = batch_loss / cfg.batch_size
            if not math.isfinite(mean_loss):
                raise TrainingDiverged(f"non-finite loss at iteration {it}", record)
            try:
                adam_step(state, net.parameters(), total.scale(1.0 / cfg.batch_size))
            except ValueError as e:
                if "non-finite" in str(e):
                    raise TrainingDiverged(f"diverged at iteration {it}: {e}", record) from e
                raise
            record.losses.append(mean_loss)
            record.seconds.append(time.perf_counter() - t0)
            if cfg.eval_every and it % cfg.eval_every == 0:
                image, gt, _ = dataset[0]
                record.evals.append((it, evaluate(predict(net, image, ws), gt)))

    if cfg.checkpoint_path:
        save_checkpoint(net, cfg.checkpoint_path)
    return net, record
