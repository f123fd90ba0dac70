"""Object-presence classifier trained on image-level labels."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from scipy import ndimage

from .autodiff import Adam, Tensor, clip, log, sigmoid, trilinear_resize
from .autodiff.tensor import mean
from .errors import NumericalError, ParameterError
from .network import DEFAULT_CHANNELS, DEFAULT_FC, ConvNet

log_ = logging.getLogger(__name__)

BCE_EPS = 1e-7
DECISION_THRESHOLD = 0.5
DEFAULT_INPUT_DIMS = (32, 32, 16)
# Gaussian pre-filter (voxels) applied to every region before resizing
DEFAULT_SMOOTHING = 1.5


@dataclass
class TrainConfig:
    epochs: int = 40
    batch_size: int = 8
    learning_rate: float = 1e-3
    seed: int = 0
    n_samples: int = 24
    input_dims: tuple = DEFAULT_INPUT_DIMS
    weight_decay: float = 0.0
    smoothing: float = DEFAULT_SMOOTHING

    def __post_init__(self):
        self.input_dims = tuple(self.input_dims)
        if self.smoothing < 0:
            raise ParameterError("TrainConfig.smoothing must be non-negative")
        for name in ("epochs", "batch_size", "n_samples"):
            if getattr(self, name) < 1:
                raise ParameterError(f"TrainConfig.{name} must be positive")
        if self.learning_rate <= 0:
            raise ParameterError("TrainConfig.learning_rate must be positive")


@dataclass
class ClassifierMetrics:
    accuracy: float
    sensitivity: float | None  # None: undefined (no positives)
    specificity: float | None  # None: undefined (no negatives)
    auc: float | None

    def to_dict(self):
        return asdict(self)


class ClassifierNet(ConvNet):
    """Conv trunk with a single sigmoid output.

    ``smoothing`` is the pre-filter width every input region receives, so
    whole images and window crops share the same noise level.
    """

    def __init__(self, input_dims=DEFAULT_INPUT_DIMS, seed=0, channels=DEFAULT_CHANNELS,
                 fc_widths=DEFAULT_FC, dtype=np.float32, smoothing=DEFAULT_SMOOTHING):
        super().__init__(input_dims, 1, channels, fc_widths, seed=seed, dtype=dtype)
        self.smoothing = float(smoothing)

    def probabilities(self, x, train=False) -> Tensor:
        return sigmoid(self.forward(x, train=train)).reshape(-1)


def bce_loss(predictions, labels) -> Tensor:
    """Mean binary cross-entropy with predictions clamped to [1e-7, 1-1e-7]."""
    p = predictions if isinstance(predictions, Tensor) else Tensor(np.asarray(predictions, dtype=np.float64))
    y = np.asarray(labels, dtype=p.dtype).reshape(-1)
    p = p.reshape(-1)
    if p.shape[0] == 0:
        raise ParameterError("bce_loss of an empty batch")
    if p.shape != y.shape:
        raise ParameterError(f"bce_loss: {p.shape[0]} predictions but {y.shape[0]} labels")
    pc = clip(p, BCE_EPS, 1.0 - BCE_EPS)
    per = log(pc) * y + log(1.0 - pc) * (1.0 - y)
    return -mean(per)


def smooth(region, sigma):
    region = np.asarray(region, dtype=np.float32)
    if sigma <= 0:
        return region
    return ndimage.gaussian_filter(region, sigma, mode="nearest")


def prepare_inputs(volumes, input_dims, smoothing=0.0):
    """Pre-filter each region, then resize it to ``input_dims``."""
    return np.stack([trilinear_resize(smooth(v, smoothing), input_dims) for v in volumes]).astype(np.float32)


def select_training_cases(cases, n_samples, seed):
    """Take ``n_samples`` cases, stratified by label, deterministically."""
    if n_samples >= len(cases):
        return list(cases)
    rng = np.random.default_rng(seed)
    pos = [c for c in cases if c.label == 1]
    neg = [c for c in cases if c.label == 0]
    n_pos = min(len(pos), max(1, round(n_samples * len(pos) / len(cases))))
    n_neg = min(len(neg), n_samples - n_pos)
    n_pos = n_samples - n_neg
    pick_pos = [pos[i] for i in sorted(rng.permutation(len(pos))[:n_pos])]
    pick_neg = [neg[i] for i in sorted(rng.permutation(len(neg))[:n_neg])]
    return pick_pos + pick_neg


def train_classifier(cases, cfg: TrainConfig, net: ClassifierNet | None = None):
    """Minibatch Adam on full images resized to ``cfg.input_dims``.

    Every minibatch holds equal numbers of positive and negative images,
    drawn with replacement.  Returns ``(net, per-epoch mean losses)``.
    """
    chosen = select_training_cases(cases, cfg.n_samples, cfg.seed)
    labels = np.array([c.label for c in chosen], dtype=np.float32)
    if labels.min() == labels.max():
        raise ParameterError("training set contains a single label class; BCE training is degenerate")
    rng = np.random.default_rng(cfg.seed)
    if net is None:
        net = ClassifierNet(cfg.input_dims, seed=int(rng.integers(2 ** 31)), smoothing=cfg.smoothing)
    x = prepare_inputs([c.volume for c in chosen], net.input_dims, net.smoothing)
    opt = Adam(net.params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    pos_idx = np.flatnonzero(labels == 1)
    neg_idx = np.flatnonzero(labels == 0)
    batch = max(2, cfg.batch_size)
    n_batches = max(1, len(chosen) // batch)
    losses = []
    for epoch in range(cfg.epochs):
        total = 0.0
        for _ in range(n_batches):
            half = batch // 2
            idx = np.concatenate([rng.choice(pos_idx, half), rng.choice(neg_idx, batch - half)])
            opt.zero_grad()
            loss = bce_loss(net.probabilities(x[idx], train=True), labels[idx])
            if not np.isfinite(loss.item()):
                raise NumericalError(f"classifier loss became non-finite at epoch {epoch}")
            loss.backward()
            opt.step()
            total += loss.item()
        losses.append(total / n_batches)
        log_.debug("classifier epoch %d loss %.4f", epoch, losses[-1])
    return net, losses


def predict_scores(net: ClassifierNet, regions, batch_size=32):
    """Presence scores for a list of regions (eval mode, resized to the net input)."""
    out = []
    for i in range(0, len(regions), batch_size):
        chunk = regions[i:i + batch_size]
        for r in chunk:
            if np.asarray(r).size == 0:
                raise ParameterError("cannot score an empty region")
        x = prepare_inputs(chunk, net.input_dims, net.smoothing)
        out.append(net.probabilities(x, train=False).data.astype(np.float64))
    return np.concatenate(out) if out else np.zeros(0)


def predict_presence(net: ClassifierNet, region) -> float:
    region = np.asarray(region)
    if region.size == 0 or region.ndim != 3:
        raise ParameterError(f"region must be a non-empty 3-d array, got shape {region.shape}")
    return float(predict_scores(net, [region])[0])


def roc_auc(scores, labels):
    """Area under the ROC curve, trapezoidal over unique score cutoffs."""
    scores = np.asarray(scores, float)
    labels = np.asarray(labels).astype(bool)
    n_pos, n_neg = labels.sum(), (~labels).sum()
    if n_pos == 0 or n_neg == 0:
        return None
    cutoffs = np.unique(scores)[::-1]
    tpr = [0.0] + [np.sum(labels & (scores >= c)) / n_pos for c in cutoffs]
    fpr = [0.0] + [np.sum(~labels & (scores >= c)) / n_neg for c in cutoffs]
    return float(np.trapezoid(tpr, fpr))


def metrics_from_scores(scores, labels, threshold=DECISION_THRESHOLD) -> ClassifierMetrics:
    scores = np.asarray(scores, float)
    labels = np.asarray(labels).astype(bool)
    pred = scores >= threshold
    n_pos, n_neg = labels.sum(), (~labels).sum()
    return ClassifierMetrics(
        accuracy=float(np.mean(pred == labels)),
        sensitivity=float(np.sum(pred & labels) / n_pos) if n_pos else None,
        specificity=float(np.sum(~pred & ~labels) / n_neg) if n_neg else None,
        auc=roc_auc(scores, labels),
    )


def evaluate_classifier(net: ClassifierNet, cases) -> ClassifierMetrics:
    scores = predict_scores(net, [c.volume for c in cases])
    return metrics_from_scores(scores, [c.label for c in cases])
