"""Training loops, optimizers, and the data-fraction / label-noise sweeps."""

from __future__ import annotations

import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .datasets import LabeledDataset, inject_label_noise, subsample
from .graph import ADAPTER_VARIANTS, ATTENTION_VARIANTS, Graph, Scheme, apply_scheme, forward, param_tensors, \
    replace_head

log = logging.getLogger(__name__)

FRACTION_GRID = (10, 25, 50, 100)
NOISE_GRID = (0, 5, 10, 15, 25)


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "sgd"
    learning_rate: float = 0.01
    weight_decay: float = 1e-4
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 75
    batch_size: int = 64
    seed: int = 0
    lr_schedule: str = "constant"
    milestones: tuple[int, ...] = ()
    decay_factor: float = 0.1
    patience: int | None = 10

    def __post_init__(self):
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.lr_schedule not in ("constant", "step"):
            raise ValueError(f"lr_schedule must be 'constant' or 'step', got {self.lr_schedule!r}")
        object.__setattr__(self, "milestones", tuple(self.milestones))

    def lr_at(self, epoch: int) -> float:
        if self.lr_schedule == "constant":
            return self.learning_rate
        return self.learning_rate * self.decay_factor ** sum(epoch >= m for m in self.milestones)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["milestones"] = list(self.milestones)
        return d


def default_learning_rate(variant: str, optimizer: str = "sgd") -> float:
    if optimizer == "adam":
        return 1e-4 if variant == "finetune" else 1e-3 if variant in ADAPTER_VARIANTS else 1e-2
    if variant == "finetune":
        return 1e-2
    if variant in ADAPTER_VARIANTS:
        return 1e-1
    if variant in ATTENTION_VARIANTS:
        return 5e-1
    return 1e-1


@dataclass
class History:
    train_loss: list[float] = field(default_factory=list)
    train_acc: list[float] = field(default_factory=list)
    val_acc: list[float] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)
    best_epoch: int = -1
    checkpoint: str | None = None

    def to_dict(self, include_timing: bool = False) -> dict:
        d = asdict(self)
        if not include_timing:
            d.pop("epoch_seconds")
        return d


# --------------------------------------------------------------------------
# loss and optimizers


def cross_entropy(logits: T.Tensor, labels) -> T.Tensor:
    """Mean negative log-softmax of the true class, max-shifted for stability."""
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must lie in [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    loss = -logp[np.arange(n), labels].mean()

    def backward_fn(g):
        grad = np.exp(logp)
        grad[np.arange(n), labels] -= 1
        return (grad * (g / n),)

    return T.custom_op(np.asarray(loss, dtype=logits.dtype), [logits], backward_fn, "cross_entropy")


class Optimizer:
    """SGD with classical momentum, or Adam with bias correction; L2 decay enters the gradient."""

    def __init__(self, params: dict[str, T.Tensor], cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.t = 0
        self.state = {k: {} for k in params}

    def step(self, lr: float | None = None) -> None:
        cfg = self.cfg
        lr = cfg.learning_rate if lr is None else lr
        self.t += 1
        for key, p in self.params.items():
            if p.grad is None:
                raise RuntimeError(f"no gradient for trainable parameter {key!r}")
            g = p.grad + cfg.weight_decay * p.data if cfg.weight_decay else p.grad
            st = self.state[key]
            if cfg.optimizer == "sgd":
                if cfg.momentum:
                    v = st.get("v")
                    v = g.copy() if v is None else cfg.momentum * v + g
                    st["v"] = v
                    g = v
                p.data -= (lr * g).astype(p.data.dtype)
            else:
                m = st.get("m", np.zeros_like(p.data))
                v = st.get("v", np.zeros_like(p.data))
                m = cfg.beta1 * m + (1 - cfg.beta1) * g
                v = cfg.beta2 * v + (1 - cfg.beta2) * g * g
                st["m"], st["v"] = m, v
                mhat = m / (1 - cfg.beta1 ** self.t)
                vhat = v / (1 - cfg.beta2 ** self.t)
                p.data -= (lr * mhat / (np.sqrt(vhat) + cfg.eps)).astype(p.data.dtype)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


# --------------------------------------------------------------------------
# loops


def _normalize(g: Graph, images: np.ndarray) -> np.ndarray:
    if not g.input_norm:
        return images
    mean = np.asarray(g.input_norm["mean"], dtype=images.dtype).reshape(1, -1, 1, 1)
    std = np.asarray(g.input_norm["std"], dtype=images.dtype).reshape(1, -1, 1, 1)
    return (images - mean) / std


def predict(g: Graph, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = []
    tensors = param_tensors(g, requires_grad=False)
    for i in range(0, len(images), batch_size):
        x = _normalize(g, images[i:i + batch_size])
        out.append(forward(g, x, "eval", tensors).data)
    return np.concatenate(out) if out else np.zeros((0, g.head().hyper["out_features"]))


def evaluate(g: Graph, ds: LabeledDataset, batch_size: int = 256) -> float:
    """Top-1 accuracy; argmax ties go to the lowest class index."""
    k = g.head().hyper["out_features"]
    if k != ds.classes:
        raise ValueError(f"head predicts {k} classes but the dataset has {ds.classes}")
    logits = predict(g, ds.images, batch_size)
    return float((logits.argmax(axis=1) == ds.labels).mean())


def _snapshot(g: Graph) -> dict[str, np.ndarray]:
    snap = {}
    for n in g.nodes:
        if n.trainable:
            for k, v in n.params.items():
                snap[f"{n.id}/p/{k}"] = v.copy()
            for k, v in n.buffers.items():
                snap[f"{n.id}/b/{k}"] = v.copy()
    return snap


def _restore(g: Graph, snap: dict[str, np.ndarray]) -> None:
    for n in g.nodes:
        if n.trainable:
            for k in n.params:
                n.params[k][...] = snap[f"{n.id}/p/{k}"]
            for k in n.buffers:
                n.buffers[k][...] = snap[f"{n.id}/b/{k}"]


def train(g: Graph, train_ds: LabeledDataset, val_ds: LabeledDataset | None, cfg: TrainConfig,
          set_norm: bool = True) -> tuple[Graph, History]:
    """Train the trainable parameters of a copy of ``g``; frozen ones are never written.

    Keeps the weights of the best validation epoch and stops after
    ``cfg.patience`` epochs without improvement.
    """
    g = g.copy()
    k = g.head().hyper["out_features"]
    if k != train_ds.classes:
        raise ValueError(f"head predicts {k} classes but the training set has {train_ds.classes}")
    if tuple(train_ds.images.shape[1:]) != tuple(g.input_shape):
        raise ValueError(f"dataset images {train_ds.images.shape[1:]} do not match graph input {g.input_shape}")
    if set_norm:
        g.input_norm = {"mean": train_ds.mean.tolist(), "std": train_ds.std.tolist()}
    tensors = param_tensors(g)
    trainable = {f"{nid}/{name}": t for nid, ps in tensors.items() for name, t in ps.items() if t.requires_grad}
    opt = Optimizer(trainable, cfg)
    rng = np.random.default_rng(cfg.seed)
    hist = History()
    best = -1.0
    best_snap = None
    stale = 0
    images = _normalize(g, train_ds.images)
    n = len(train_ds)
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        losses, correct = [], 0
        lr = cfg.lr_at(epoch)
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            try:
                logits = forward(g, images[idx], "train", tensors)
                loss = cross_entropy(logits, train_ds.labels[idx])
            except FloatingPointError as e:
                raise FloatingPointError(f"non-finite values at epoch {epoch}, batch {b}: {e}") from e
            if not np.isfinite(loss.data):
                raise FloatingPointError(f"NaN loss at epoch {epoch}, batch {b}")
            T.backward(loss)
            opt.step(lr)
            opt.zero_grad()
            losses.append(float(loss.data) * len(idx))
            correct += int((logits.data.argmax(axis=1) == train_ds.labels[idx]).sum())
        hist.train_loss.append(sum(losses) / n)
        hist.train_acc.append(correct / n)
        if val_ds is not None:
            acc = evaluate(g, val_ds)
            hist.val_acc.append(acc)
            if acc > best:
                best, best_snap, stale = acc, _snapshot(g), 0
                hist.best_epoch = epoch
            else:
                stale += 1
        hist.epoch_seconds.append(time.perf_counter() - t0)
        log.debug("epoch %d loss %.4f train %.3f val %s", epoch, hist.train_loss[-1], hist.train_acc[-1],
                  hist.val_acc[-1] if hist.val_acc else "-")
        if cfg.patience is not None and val_ds is not None and stale >= cfg.patience:
            break
    if best_snap is not None:
        _restore(g, best_snap)
    else:
        hist.best_epoch = len(hist.train_loss) - 1
    return g, hist


# --------------------------------------------------------------------------
# sweeps


@dataclass
class SweepResult:
    kind: str
    x: list[int]
    schemes: list[str]
    mean: dict[str, list[float]]  # scheme -> mean accuracy per x
    per_seed: dict[str, list[list[float]]]  # scheme -> [x][seed]
    seeds: list[int]
    configs: dict[str, dict]
    seconds: dict[str, list[list[float]]] = field(default_factory=dict)  # same layout as per_seed

    def to_dat(self) -> str:
        """Whitespace table, header ``x y1 y2 ...``, accuracy in percent."""
        cols = ["x"] + [f"y{i + 1}" for i in range(len(self.schemes))]
        lines = [" ".join(cols)]
        for i, xv in enumerate(self.x):
            lines.append(" ".join([str(xv)] + [f"{100 * self.mean[s][i]:.2f}" for s in self.schemes]))
        return "\n".join(lines) + "\n"

    def manifest(self) -> dict:
        return {"kind": self.kind, "x": self.x, "columns": {f"y{i + 1}": s for i, s in enumerate(self.schemes)},
                "seeds": self.seeds, "configs": self.configs, "mean_accuracy": self.mean,
                "per_seed_accuracy": self.per_seed}


def _run_point(args) -> tuple[float, float]:
    kind, xv, backbone, scheme, cfg, seed, train_ds, val_ds, test_ds = args
    t0 = time.perf_counter()
    if kind == "fraction":
        ds = subsample(train_ds, xv / 100.0, seed)
    else:
        ds = inject_label_noise(train_ds, xv / 100.0, seed)
    g = apply_scheme(replace_head(backbone, ds.classes), scheme, seed=seed)
    trained, _ = train(g, ds, val_ds, replace(cfg, seed=seed))
    return evaluate(trained, test_ds), time.perf_counter() - t0


def run_experiment(kind: str, backbone: Graph, schemes, base_cfg: TrainConfig, seeds, train_ds: LabeledDataset,
                   val_ds: LabeledDataset | None, test_ds: LabeledDataset, grid=None,
                   scheme_cfgs: dict[str, TrainConfig] | None = None, workers: int | None = 1) -> SweepResult:
    """Train every (x, scheme, seed) point and average test accuracy over seeds.

    ``kind`` is ``fraction`` (percent of training data kept) or ``noise``
    (percent of labels corrupted). Points are independent, so they may run
    in a process pool; results are assembled in grid order.
    """
    if kind not in ("fraction", "noise"):
        raise ValueError(f"kind must be 'fraction' or 'noise', got {kind!r}")
    seeds = list(seeds)
    if not seeds:
        raise ValueError("at least one seed is required")
    grid = list(grid if grid is not None else (FRACTION_GRID if kind == "fraction" else NOISE_GRID))
    schemes = [Scheme.parse(s) if isinstance(s, str) else s for s in schemes]
    scheme_cfgs = scheme_cfgs or {}
    cfgs = {s.variant: scheme_cfgs.get(s.variant, base_cfg) for s in schemes}
    jobs = [(kind, xv, backbone, s, cfgs[s.variant], seed, train_ds, val_ds, test_ds)
            for xv in grid for s in schemes for seed in seeds]
    workers = workers or os.cpu_count() or 1
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_run_point, jobs))
    else:
        results = [_run_point(j) for j in jobs]
    it = iter(results)
    per_seed = {s.variant: [] for s in schemes}
    seconds = {s.variant: [] for s in schemes}
    for _ in grid:
        for s in schemes:
            pts = [next(it) for _ in seeds]
            per_seed[s.variant].append([a for a, _ in pts])
            seconds[s.variant].append([t for _, t in pts])
    mean = {k: [float(np.mean(v)) for v in rows] for k, rows in per_seed.items()}
    return SweepResult(kind, grid, [s.variant for s in schemes], mean, per_seed, seeds,
                       {k: c.to_dict() for k, c in cfgs.items()}, seconds)


def write_sweep(result: SweepResult, dat_path, manifest_path=None, extra: dict | None = None) -> None:
    """Write the ``.dat`` table and, optionally, the JSON manifest.

    Wall-clock timings go to ``<manifest>.timing.json`` so the manifest itself
    is byte-identical across repeated runs.
    """
    Path(dat_path).write_text(result.to_dat(), encoding="utf-8")
    if manifest_path:
        doc = dict(result.manifest(), **(extra or {}))
        Path(manifest_path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        timing = Path(str(manifest_path) + ".timing.json")
        timing.write_text(json.dumps({"point_seconds": result.seconds}, indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")
