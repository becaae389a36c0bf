"""Loss, Rectified Adam, metrics, and the train / evaluate loops."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .data import Manifest, load_image
from .imaging import heat_colormap, to_uint8, write_image
from .tensor import NonFiniteError, ShapeError, Tape, Tensor, backward, make_node

log = logging.getLogger(__name__)

PRED_CLAMP = 1e-7


class TrainingError(RuntimeError):
    pass


class NonFiniteGradientError(TrainingError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 718
    epochs: int = 100
    seed: int = 0
    dropconnect_rate: float | None = None
    class_weights: str | list[float] | None = None
    restore_best: bool = True

    def __post_init__(self):
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.learning_rate <= 0 or self.eps <= 0:
            raise ValueError("learning_rate and eps must be positive")
        if self.dropconnect_rate is not None and not 0 <= self.dropconnect_rate < 1:
            raise ValueError("dropconnect_rate must be in [0, 1)")
        cw = self.class_weights
        if cw is not None and cw != "balanced":
            if not (isinstance(cw, (list, tuple)) and len(cw) == 2 and all(w > 0 for w in cw)):
                raise ValueError("class_weights must be 'balanced' or two positive numbers [fake, real]")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TrainConfig":
        if not isinstance(d, dict):
            raise ValueError("train config must be a JSON object")
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


# loss --------------------------------------------------------------------------


def bce_loss(pred: Tensor, target, weights=None) -> Tensor:
    """Mean binary cross-entropy with predictions clamped to [1e-7, 1 - 1e-7].

    ``weights`` optionally scales each element's term; the mean is still
    taken over the element count. Terms are summed in index order.
    """
    y = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=pred.dtype)
    if y.shape != pred.shape:
        raise ShapeError(f"prediction shape {pred.shape} does not match target {y.shape}")
    w = np.ones_like(y) if weights is None else np.asarray(weights, dtype=pred.dtype)
    if w.shape != y.shape:
        raise ShapeError(f"weight shape {w.shape} does not match target {y.shape}")
    p = np.clip(pred.data, PRED_CLAMP, 1 - PRED_CLAMP)
    terms = -(y * np.log(p) + (1 - y) * np.log(1 - p)) * w
    n = terms.size
    total = np.cumsum(terms.ravel(), dtype=np.float64)[-1]
    inside = (pred.data >= PRED_CLAMP) & (pred.data <= 1 - PRED_CLAMP)

    def _bw(g):
        return (g * w * (-(y / p) + (1 - y) / (1 - p)) * inside / n,)

    return make_node(np.asarray(total / n, dtype=pred.dtype), (pred,), _bw, "bce")


def class_weight_vector(cfg: TrainConfig, targets: np.ndarray) -> np.ndarray | None:
    """Per-class weights [fake, real]; 'balanced' uses inverse class frequency."""
    if cfg.class_weights is None:
        return None
    if cfg.class_weights == "balanced":
        counts = np.bincount(targets, minlength=2).astype(np.float64)
        counts[counts == 0] = 1.0
        return len(targets) / (2.0 * counts)
    return np.asarray(cfg.class_weights, dtype=np.float64)


# optimizer ---------------------------------------------------------------------


@dataclass
class OptimState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    rho_inf: float | None = None


def rho_infinity(beta2: float) -> float:
    return 2.0 / (1.0 - beta2) - 1.0


def rho_t(beta2: float, t: int) -> float:
    """Length of the approximated simple moving average after ``t`` steps."""
    b = beta2**t
    return rho_infinity(beta2) - 2.0 * t * b / (1.0 - b)


def rectification(beta2: float, t: int) -> float:
    rho, rinf = rho_t(beta2, t), rho_infinity(beta2)
    num = (rho - 4.0) * (rho - 2.0) * rinf
    den = (rinf - 4.0) * (rinf - 2.0) * rho
    if num / den < 0:
        raise ValueError(f"rectification undefined at step {t} (rho_t={rho:.4f})")
    return math.sqrt(num / den)


def radam_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: OptimState,
    cfg: TrainConfig,
    rectify: bool | None = None,
) -> tuple[dict[str, Tensor], OptimState]:
    """One Rectified Adam update, applied in place.

    While the variance estimate is unreliable (rho_t <= 4) the step uses
    bias-corrected momentum only. ``rectify`` forces one branch: False for
    momentum-only, True for the rectified adaptive step.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for parameter {name!r}")
    b1, b2 = cfg.beta1, cfg.beta2
    state.t += 1
    t = state.t
    state.rho_inf = rho_infinity(b2)
    adaptive = rho_t(b2, t) > 4.0 if rectify is None else rectify
    r = rectification(b2, t) if adaptive else 0.0
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        g = g.astype(np.float64)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros(p.shape, np.float64)
            v = np.zeros(p.shape, np.float64)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / bc1
        if adaptive:
            step = cfg.learning_rate * r * m_hat / (np.sqrt(v / bc2) + cfg.eps)
        else:
            step = cfg.learning_rate * m_hat
        p.data[...] = (p.data.astype(np.float64) - step).astype(p.dtype)
    return params, state


# metrics -----------------------------------------------------------------------


@dataclass(frozen=True)
class MetricsReport:
    """Confusion counts with "real" (label 1) as the positive class."""

    tp: int
    fp: int
    fn: int
    tn: int
    accuracy: float
    precision: float
    recall: float
    f1: float

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def confusion_text(self) -> str:
        rows = [
            ("", "pred_real", "pred_fake"),
            ("true_real", str(self.tp), str(self.fn)),
            ("true_fake", str(self.fp), str(self.tn)),
        ]
        widths = [max(len(r[i]) for r in rows) for i in range(3)]
        lines = ["  ".join(cell.rjust(w) if i else cell.ljust(w) for i, (cell, w) in enumerate(zip(r, widths))) for r in rows]
        summary = (
            f"accuracy={self.accuracy:.6f} precision={self.precision:.6f} "
            f"recall={self.recall:.6f} f1={self.f1:.6f}"
        )
        return "\n".join(lines + [summary]) + "\n"

    def confusion_image(self, cell: int = 32) -> np.ndarray:
        counts = np.array([[self.tp, self.fn], [self.fp, self.tn]], dtype=np.float64)
        scale = counts / counts.max() if counts.max() > 0 else counts
        rgb = heat_colormap(np.kron(scale, np.ones((cell, cell))))
        return to_uint8(rgb)

    def write_artifacts(self, prefix: str | Path) -> tuple[Path, Path]:
        prefix = Path(prefix)
        txt = prefix.with_name(prefix.name + ".confusion.txt")
        img = prefix.with_name(prefix.name + ".confusion.ppm")
        txt.write_text(self.confusion_text(), encoding="utf-8")
        write_image(img, self.confusion_image())
        return txt, img


def _ratio(num: int, den: int) -> float:
    return num / den if den else 0.0


def compute_metrics(pred_labels: Sequence[int], true_labels: Sequence[int]) -> MetricsReport:
    pred = np.asarray(pred_labels)
    true = np.asarray(true_labels)
    if pred.ndim != 1 or pred.shape != true.shape:
        raise ValueError(f"label arrays must be 1-D and equal length, got {pred.shape} and {true.shape}")
    if pred.size == 0:
        raise ValueError("cannot compute metrics on empty input")
    if not (np.isin(pred, (0, 1)).all() and np.isin(true, (0, 1)).all()):
        raise ValueError("labels must be 0 (fake) or 1 (real)")
    tp = int(np.sum((pred == 1) & (true == 1)))
    fp = int(np.sum((pred == 1) & (true == 0)))
    fn = int(np.sum((pred == 0) & (true == 1)))
    tn = int(np.sum((pred == 0) & (true == 0)))
    precision = _ratio(tp, tp + fp)
    recall = _ratio(tp, tp + fn)
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return MetricsReport(tp, fp, fn, tn, (tp + tn) / pred.size, precision, recall, f1)


# loops -------------------------------------------------------------------------


def _targets_for(probs_width: int, labels: np.ndarray, dtype) -> np.ndarray:
    if probs_width == 1:
        return labels.reshape(-1, 1).astype(dtype)
    onehot = np.zeros((labels.size, 2), dtype=dtype)
    onehot[np.arange(labels.size), labels.astype(int)] = 1
    return onehot


def predict_labels(probs: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Label 1 (real) wherever P(real) >= threshold.

    P(real) is the sigmoid output of a one-unit model or column 1 of a
    two-way softmax.
    """
    p_real = probs[:, 0] if probs.shape[1] == 1 else probs[:, 1]
    return (p_real >= threshold).astype(np.int64)


def _load_all(model, manifest: Manifest) -> tuple[np.ndarray, np.ndarray]:
    h, w, _ = model.spec.input_shape
    images = np.stack([load_image(manifest, r, (h, w)) for r in manifest.records]).astype(np.float32)
    return images, manifest.targets()


def _predict(model, images: np.ndarray, batch_size: int) -> np.ndarray:
    out = []
    for start in range(0, len(images), batch_size):
        out.append(model.forward(Tensor(images[start : start + batch_size]), mode="infer").data)
    return np.concatenate(out)


def _mean_loss(probs: np.ndarray, labels: np.ndarray, weights: np.ndarray | None) -> float:
    targets = _targets_for(probs.shape[1], labels, np.float64)
    w = None if weights is None else np.broadcast_to(weights[labels][:, None], targets.shape)
    return float(bce_loss(Tensor(probs, dtype=np.float64), targets, w).item())


@dataclass
class TrainResult:
    history: list[dict[str, float]]
    best_epoch: int | None
    best_val_f1: float | None
    best_state: dict[str, np.ndarray] | None


def train(
    model,
    train_manifest: Manifest,
    val_manifest: Manifest,
    cfg: TrainConfig,
    test_manifest: Manifest | None = None,
    eval_batch_size: int = 256,
) -> TrainResult:
    """Fit ``model`` with RAdam on binary cross-entropy.

    Everything random (shuffling, dropconnect masks) draws from one
    generator seeded by ``cfg.seed``, so a rerun is bitwise identical. The
    parameters with the best validation F1 are kept and, when
    ``cfg.restore_best`` is set, loaded back into the model at the end.
    """
    if len(train_manifest) == 0 or len(val_manifest) == 0:
        raise TrainingError("train and validation manifests must be non-empty")
    if test_manifest is not None:
        shared = (train_manifest.subjects | val_manifest.subjects) & test_manifest.subjects
        if shared:
            raise TrainingError(f"test subjects overlap training data: {sorted(shared)}")
    history: list[dict[str, float]] = []
    if cfg.epochs == 0:
        return TrainResult(history, None, None, None)

    x_train, y_train = _load_all(model, train_manifest)
    x_val, y_val = _load_all(model, val_manifest)
    cw = class_weight_vector(cfg, y_train)
    rng = np.random.default_rng(cfg.seed)
    params = model.params
    state = OptimState()
    best = (None, -1.0, None)

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(x_train))
        loss_sum = 0.0
        preds = np.empty(len(x_train), dtype=np.int64)
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            xb = Tensor(x_train[idx])
            yb = y_train[idx]
            try:
                with Tape() as tape:
                    probs = model.forward(xb, mode="train", rng=rng, dropconnect_rate=cfg.dropconnect_rate)
                    targets = _targets_for(probs.shape[1], yb, probs.dtype)
                    weights = None if cw is None else np.broadcast_to(cw[yb][:, None], targets.shape)
                    loss = bce_loss(probs, targets, weights)
                    grads = backward(loss, tape)
            except NonFiniteError as exc:
                raise TrainingError(f"non-finite value at epoch {epoch}, batch {b}: {exc}") from exc
            radam_step(params, {n: grads[p] for n, p in params.items() if p in grads}, state, cfg)
            loss_sum += loss.item() * len(idx)
            preds[idx] = predict_labels(probs.data)

        val_probs = _predict(model, x_val, eval_batch_size)
        record = {
            "epoch": epoch,
            "train_loss": loss_sum / len(x_train),
            "val_loss": _mean_loss(val_probs, y_val, cw),
            "train_f1": compute_metrics(preds, y_train).f1,
            "val_f1": compute_metrics(predict_labels(val_probs), y_val).f1,
        }
        history.append(record)
        log.info("epoch %d %s", epoch, record)
        if record["val_f1"] > best[1]:
            best = (epoch, record["val_f1"], model.snapshot())

    if cfg.restore_best and best[2] is not None:
        model.set_arrays(best[2])
    return TrainResult(history, best[0], best[1], best[2])


def evaluate(model, manifest: Manifest, threshold: float = 0.5, batch_size: int = 256,
             artifact_prefix: str | Path | None = None) -> MetricsReport:
    """Score a manifest; optionally write the confusion matrix as text and PPM."""
    if len(manifest) == 0:
        raise ValueError("cannot evaluate an empty manifest")
    images, labels = _load_all(model, manifest)
    report = compute_metrics(predict_labels(_predict(model, images, batch_size), threshold), labels)
    if artifact_prefix is not None:
        report.write_artifacts(artifact_prefix)
    return report


HISTORY_COLUMNS = ("epoch", "train_loss", "val_loss", "train_f1", "val_f1")


def write_history_csv(history: list[dict[str, float]], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=HISTORY_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in history:
            writer.writerow({k: repr(row[k]) if isinstance(row[k], float) else row[k] for k in HISTORY_COLUMNS})
