"""Dice-loss training with Adam, gradient accumulation and deep supervision.

The loop is bitwise-deterministic for a fixed seed: sample order,
augmentation draws and parameter updates all derive from one seeded
generator consumed in a fixed order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import LabelVolume, Volume, augment, normalize_intensity
from .errors import ConfigurationError, DimensionError, NumericalError, TrainingDiverged
from .metrics import dsc
from .tensor import Tensor
from .unet import Network, forward

__all__ = [
    "AdamState",
    "TrainConfig",
    "TrainingLog",
    "init_adam",
    "adam_step",
    "dice_loss",
    "combined_loss",
    "one_hot",
    "train",
    "predict_labels",
]

DICE_SMOOTH = 1e-5


def one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    """(B,D,H,W) integer labels to a (B,C,D,H,W) float64 indicator array."""
    if labels.min() < 0 or labels.max() >= n_classes:
        raise DimensionError(f"labels outside [0, {n_classes})")
    out = np.zeros((labels.shape[0], n_classes) + labels.shape[1:])
    for c in range(n_classes):
        out[:, c] = labels == c
    return out


def dice_loss(pred: Tensor, target: Tensor | np.ndarray, smooth: float = DICE_SMOOTH) -> Tensor:
    """1 minus the mean soft Dice coefficient over all classes.

    pred must already be channel-softmaxed; target is a one-hot array of
    the same shape.  Sums run over batch and all spatial axes, so the
    result is a scalar in [0, 1].
    """
    tgt = target if isinstance(target, Tensor) else Tensor(target)
    if tgt.shape != pred.shape:
        raise DimensionError(f"prediction {pred.shape} vs target {tgt.shape}")
    axes = (0, 2, 3, 4)
    inter = T.tsum(pred * tgt, axes=axes)
    denom = T.tsum(pred, axes=axes) + T.tsum(tgt, axes=axes)
    dice = (2.0 * inter + smooth) / (denom + smooth)
    return 1.0 - T.tmean(dice)


def combined_loss(main: Tensor, aux: list[Tensor], target: Tensor | np.ndarray) -> Tensor:
    """Mean Dice loss over the main output and every deep-supervision head."""
    total = dice_loss(main, target)
    for a in aux:
        total = total + dice_loss(a, target)
    return total * (1.0 / (1 + len(aux)))


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def init_adam(params: list[Tensor], learning_rate: float = 1e-3) -> AdamState:
    return AdamState(
        learning_rate=learning_rate,
        m=[np.zeros_like(p.data) for p in params],
        v=[np.zeros_like(p.data) for p in params],
    )


def adam_step(state: AdamState, params: list[Tensor], grads: list[np.ndarray] | None = None) -> None:
    """One bias-corrected Adam update; grads default to each param's .grad."""
    if grads is None:
        grads = [p.grad for p in params]
    if len(grads) != len(params) or len(params) != len(state.m):
        raise ConfigurationError("optimizer state does not match the parameter list")
    for i, g in enumerate(grads):
        if g is None:
            raise NumericalError(f"parameter {i} has no gradient")
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient in parameter {i}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        p.data -= state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)


@dataclass
class TrainConfig:
    batch_size: int = 2
    accumulation_steps: int = 1
    epochs: int = 10
    seed: int = 0
    learning_rate: float = 1e-3
    augment: bool = True
    crop: int | None = None  # training extent; None trains on full volumes

    def validate(self) -> None:
        if min(self.batch_size, self.accumulation_steps) < 1 or self.epochs < 0:
            raise ConfigurationError("batch_size and accumulation_steps must be >= 1, epochs >= 0")
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be positive")
        if self.crop is not None and self.crop < 1:
            raise ConfigurationError("crop must be >= 1 when set")


@dataclass
class TrainingLog:
    records: list[dict] = field(default_factory=list)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)

    def write(self, path) -> None:
        with open(path, "w") as f:
            f.write(self.to_jsonl())

    @classmethod
    def read(cls, path) -> "TrainingLog":
        with open(path) as f:
            return cls(records=[json.loads(line) for line in f if line.strip()])


def _prepare(pairs: list[tuple[Volume, LabelVolume]]) -> list[tuple[Volume, LabelVolume]]:
    return [(normalize_intensity(v), l) for v, l in pairs]


def predict_labels(net: Network, vol: Volume) -> np.ndarray:
    """Inference-mode argmax class map for a normalized or raw volume."""
    x = Tensor(normalize_intensity(vol).data[None, None])
    with T.no_grad():
        main, _, _ = forward(net, x, training=False)
    return np.argmax(main.data[0], axis=0).astype(np.uint8)


def _validation_dsc(net: Network, pairs, n_classes: int) -> dict[str, float]:
    scores: dict[int, list[float]] = {c: [] for c in range(1, n_classes)}
    for vol, lab in pairs:
        pred = predict_labels(net, vol)
        for c in range(1, n_classes):
            scores[c].append(dsc(pred, lab.labels, c))
    return {str(c): float(np.mean(v)) for c, v in scores.items()}


def train(
    net: Network,
    train_pairs: list[tuple[Volume, LabelVolume]],
    cfg: TrainConfig,
    val_pairs: list[tuple[Volume, LabelVolume]] | None = None,
    adam: AdamState | None = None,
) -> TrainingLog:
    """Run the full loop and return the per-epoch log.

    Shuffling, augmentation and updates are driven by cfg.seed only.  If
    the loss turns non-finite the parameters are rolled back to the end
    of the last finite epoch and TrainingDiverged is raised (the log so
    far is attached to the exception).
    """
    cfg.validate()
    if not train_pairs:
        raise ConfigurationError("training requires at least one sample")
    n_classes = net.config.n_classes
    samples = _prepare(train_pairs)
    val_samples = _prepare(val_pairs) if val_pairs else None
    params = net.parameters()
    if adam is None:
        adam = init_adam(params, cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed)
    log = TrainingLog()
    snapshot = [p.data.copy() for p in params]

    for epoch in range(cfg.epochs):
        order = rng.permutation(len(samples))
        losses: list[float] = []
        pos = 0
        try:
            while pos < len(order):
                T.zero_grads(params)
                micro_batches = 0
                for _ in range(cfg.accumulation_steps):
                    idx = order[pos : pos + cfg.batch_size]
                    if idx.size == 0:
                        break
                    pos += idx.size
                    xs, ys = [], []
                    for i in idx:
                        vol, lab = samples[i]
                        if cfg.augment:
                            seed = int(rng.integers(0, 2**31 - 1))
                            vol, lab = augment(vol, lab, seed, crop_size=cfg.crop)
                        xs.append(vol.data)
                        ys.append(lab.labels)
                    x = Tensor(np.stack(xs)[:, None])
                    target = one_hot(np.stack(ys), n_classes)
                    main, aux, _ = forward(net, x, training=True)
                    loss = combined_loss(main, aux, target)
                    value = loss.item()
                    if not np.isfinite(value):
                        raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
                    losses.append(value)
                    T.backward(loss)
                    micro_batches += 1
                if micro_batches == 0:
                    break
                if micro_batches > 1:
                    for p in params:
                        p.grad *= 1.0 / micro_batches
                adam_step(adam, params)
        except NumericalError as err:
            for p, saved in zip(params, snapshot):
                p.data[...] = saved
            diverged = err if isinstance(err, TrainingDiverged) else TrainingDiverged(str(err))
            diverged.log = log
            raise diverged from None
        record = {"epoch": epoch, "loss": float(np.mean(losses))}
        if val_samples is not None:
            record["val_dsc"] = _validation_dsc(net, val_samples, n_classes)
        log.records.append(record)
        snapshot = [p.data.copy() for p in params]

    return log
