"""Multi-view training loop: gradient accumulation, updates, refinement, metrics."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .assets import ImageBuffer
from .backward import GradientBuffer, backward_render, loss_and_adjoint
from .forward import DEFAULT_NSUB, composite_background, render_states
from .regularizer import RegularizerConfig, count_degenerate, regularization_loss
from .subdivide import RefineError, refine
from .tetmesh import TetMesh, build_regular_grid

log = logging.getLogger(__name__)

PHASES = ("color", "joint", "refine")
METRICS_FIELDS = ("epoch", "step", "loss", "psnr", "tets", "vertices", "degenerate", "seconds")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr_color: float = 0.08
    lr_opacity: float | None = None  # defaults to lr_color
    lr_position: float = 1e-6
    reg: RegularizerConfig = field(default_factory=RegularizerConfig)
    n_sub: int = DEFAULT_NSUB
    loss: str = "l2"
    batch: int = 1
    schedule: tuple = ("color",)
    rule: str = "adam"
    refine_fraction: float = 0.05
    refine_target_tets: int | None = None
    holdout: float = 0.1
    background: tuple = (0.0, 0.0, 0.0, 1.0)
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.lr_opacity is None:
            self.lr_opacity = self.lr_color
        for name in ("lr_color", "lr_opacity", "lr_position"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.loss not in ("l1", "l2"):
            raise ValueError("loss must be 'l1' or 'l2'")
        if self.rule not in ("adam", "sgd"):
            raise ValueError("rule must be 'adam' or 'sgd'")
        if self.batch < 1 or self.n_sub < 1:
            raise ValueError("batch and n_sub must be >= 1")
        if not 0.0 <= self.holdout < 1.0:
            raise ValueError("holdout must lie in [0, 1)")
        self.schedule = parse_schedule(self.schedule)

    @property
    def epochs(self) -> int:
        return len(self.schedule)


def parse_schedule(schedule) -> tuple:
    """Normalize a schedule such as ``"color*2,joint,refine,color"`` to phase tokens."""
    if isinstance(schedule, str):
        schedule = [s for s in schedule.replace(" ", "").split(",") if s]
    out = []
    for tok in schedule:
        name, _, rep = str(tok).partition("*")
        if name not in PHASES:
            raise ValueError(f"unknown schedule phase {name!r}; expected one of {PHASES}")
        out.extend([name] * (int(rep) if rep else 1))
    return tuple(out)


def coarse_to_fine_schedule(rounds: int) -> tuple:
    """``rounds`` x (color, joint, refine) followed by a final color epoch."""
    return ("color", "joint", "refine") * rounds + ("color",)


@dataclass
class Dataset:
    cameras: list
    images: list

    def __post_init__(self):
        if len(self.cameras) != len(self.images):
            raise ValueError("cameras and images differ in length")
        if not self.cameras:
            raise ValueError("dataset is empty")

    def __len__(self):
        return len(self.cameras)

    def split(self, holdout: float):
        """Training views and the held-out tail (last ``holdout`` fraction)."""
        n_test = int(math.floor(holdout * len(self) + 1e-9))
        if n_test == 0 or n_test >= len(self):
            return self, self
        k = len(self) - n_test
        return (Dataset(self.cameras[:k], self.images[:k]),
                Dataset(self.cameras[k:], self.images[k:]))


def psnr(a: ImageBuffer, b: ImageBuffer, peak: float = 1.0) -> float:
    """PSNR over RGB with values clamped to ``[0, peak]``; ``inf`` if identical."""
    if a.data.shape != b.data.shape:
        raise ValueError("image size mismatch")
    if peak <= 0:
        raise ValueError("peak must be > 0")
    mse = float(np.mean((np.clip(a.rgb, 0, peak) - np.clip(b.rgb, 0, peak)) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


class OptimizerState:
    """Per-class Adam moments and step counters."""

    CLASSES = ("color", "opacity", "position")

    def __init__(self, n_vertices: int, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        shapes = {"color": (n_vertices, 3), "opacity": (n_vertices,),
                  "position": (n_vertices, 3)}
        self.m = {k: np.zeros(s) for k, s in shapes.items()}
        self.v = {k: np.zeros(s) for k, s in shapes.items()}
        self.steps = dict.fromkeys(self.CLASSES, 0)

    def resize(self, n_vertices: int):
        """Grow (zero-filled) or truncate moments to a new vertex count."""
        for d in (self.m, self.v):
            for k, a in d.items():
                new = np.zeros((n_vertices,) + a.shape[1:])
                n = min(n_vertices, len(a))
                new[:n] = a[:n]
                d[k] = new

    def update(self, name, param, grad, lr, rule):
        if lr == 0.0:
            return
        if rule == "sgd":
            param -= lr * grad
            return
        self.steps[name] += 1
        t = self.steps[name]
        m, v = self.m[name], self.v[name]
        m *= self.beta1
        m += (1 - self.beta1) * grad
        v *= self.beta2
        v += (1 - self.beta2) * grad * grad
        m_hat = m / (1 - self.beta1 ** t)
        v_hat = v / (1 - self.beta2 ** t)
        param -= lr * m_hat / (np.sqrt(v_hat) + self.eps)


def initial_mesh(dims, bbox, color=0.5, extinction=None) -> TetMesh:
    """Regular grid for reconstruction: mid-gray, extinction ``1 / diagonal``."""
    mesh = build_regular_grid(dims, bbox, color=color)
    mesh.opacities[:] = 1.0 / mesh.diagonal if extinction is None else extinction
    return mesh


def view_gradients(mesh, camera, target, config: TrainConfig, positions=True):
    """Image loss of one view and its GradientBuffer (``None`` if the loss is not finite)."""
    states, _ = render_states(mesh, camera, config.n_sub, config.workers)
    img = composite_background(states, config.background, camera.width, camera.height)
    with np.errstate(invalid="ignore", over="ignore"):
        loss, adj = loss_and_adjoint(img, target, config.loss)
    if not math.isfinite(loss):
        return loss, None
    grads = backward_render(mesh, camera, adj, states, config.n_sub, config.background,
                            config.workers, positions)
    return loss, grads


def train_step(mesh: TetMesh, views, config: TrainConfig, state: OptimizerState,
               phase: str = "color"):
    """One update from a batch of ``(camera, target)`` views.

    Per-view gradients are summed; the objective is the sum of per-view mean
    image losses plus, when positions are optimized, the shape regularizer.
    Returns ``(objective, summed GradientBuffer)``.
    """
    if not views:
        raise ValueError("empty batch")
    train_pos = phase == "joint" and config.lr_position > 0
    total = GradientBuffer(mesh.n_vertices)
    objective = 0.0
    for k, (cam, target) in enumerate(views):
        loss, g = view_gradients(mesh, cam, target, config, positions=train_pos)
        if not math.isfinite(loss):
            raise TrainingError(f"non-finite loss on view {cam.name or k}")
        objective += loss
        total.add(g)
    if train_pos:
        reg_loss, reg_grad = regularization_loss(mesh, config.reg)
        objective += reg_loss
        total.grad_position += reg_grad
    state.update("color", mesh.colors, total.grad_color, config.lr_color, config.rule)
    state.update("opacity", mesh.opacities, total.grad_opacity, config.lr_opacity,
                 config.rule)
    if train_pos:
        state.update("position", mesh.positions, total.grad_position, config.lr_position,
                     config.rule)
    np.maximum(mesh.opacities, 0.0, out=mesh.opacities)
    return objective, total


def evaluate(mesh: TetMesh, dataset: Dataset, config: TrainConfig) -> float:
    """Mean PSNR over a dataset."""
    vals = []
    for cam, target in zip(dataset.cameras, dataset.images):
        states, _ = render_states(mesh, cam, config.n_sub, config.workers)
        img = composite_background(states, config.background, cam.width, cam.height)
        vals.append(psnr(img, target))
    return float(np.mean(vals))


@dataclass
class TrainResult:
    mesh: TetMesh
    metrics: list
    state: OptimizerState
    refine_failures: list = field(default_factory=list)

    @property
    def final_psnr(self) -> float:
        return self.metrics[-1]["psnr"] if self.metrics else float("nan")


def train(mesh: TetMesh, dataset: Dataset, config: TrainConfig, on_epoch=None,
          clock=time.perf_counter) -> TrainResult:
    """Run the configured schedule; the input mesh is not modified.

    ``on_epoch(epoch, mesh, row)`` is called after each epoch.
    """
    mesh = mesh.copy()
    train_set, test_set = dataset.split(config.holdout)
    rng = np.random.default_rng(config.seed)
    state = OptimizerState(mesh.n_vertices)
    metrics, failures = [], []
    step = 0
    t0 = clock()
    for epoch, phase in enumerate(config.schedule):
        order = rng.permutation(len(train_set))
        losses = []
        if phase == "refine":
            target = config.refine_target_tets
            if target is not None and mesh.n_tets >= target:
                log.info("epoch %d: tet target reached, refinement skipped", epoch)
            else:
                acc = np.zeros(mesh.n_vertices)
                for i in order:
                    cam = train_set.cameras[i]
                    loss, g = view_gradients(mesh, cam, train_set.images[i], config,
                                             positions=False)
                    if g is None:
                        raise TrainingError(f"non-finite loss on view {cam.name or i}")
                    losses.append(loss)
                    acc += g.abs_grad_color
                try:
                    mesh = refine(mesh, acc, config.refine_fraction)
                    state.resize(mesh.n_vertices)
                except RefineError as exc:
                    log.warning("epoch %d: refinement failed: %s", epoch, exc)
                    failures.append((epoch, str(exc)))
        else:
            for b in range(0, len(order), config.batch):
                views = [(train_set.cameras[i], train_set.images[i])
                         for i in order[b:b + config.batch]]
                loss, _ = train_step(mesh, views, config, state, phase)
                losses.append(loss / len(views))
                step += 1
        row = {
            "epoch": epoch + 1,
            "step": step,
            "loss": float(np.mean(losses)) if losses else float("nan"),
            "psnr": evaluate(mesh, test_set, config),
            "tets": mesh.n_tets,
            "vertices": mesh.n_vertices,
            "degenerate": count_degenerate(mesh),
            "seconds": clock() - t0,
        }
        metrics.append(row)
        log.info("epoch %d (%s): loss %.6g psnr %.3f tets %d", epoch + 1, phase,
                 row["loss"], row["psnr"], row["tets"])
        if on_epoch is not None:
            on_epoch(epoch + 1, mesh, row)
    return TrainResult(mesh, metrics, state, failures)


def write_metrics_csv(path, metrics):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRICS_FIELDS)
        w.writeheader()
        for row in metrics:
            w.writerow({k: (f"{row[k]:.10g}" if isinstance(row[k], float) else row[k])
                        for k in METRICS_FIELDS})


def read_metrics_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (int(v) if k in ("epoch", "step", "tets", "vertices", "degenerate")
                 else float(v)) for k, v in r.items()} for r in rows]
