"""Two-stage training: masked self-supervised pretraining with best-loss
checkpointing and patience-based early stopping, then classifier training
on frozen-encoder context vectors.

Reported epoch losses are aggregated from per-trial squared-error/count
pairs in trial order, so the recorded value does not depend on how the
shuffled batches partition the epoch.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .model import (
    ClassifierModel,
    EncoderDecoderModel,
    build_classifier,
    encoder_features,
    freeze_encoder,
    head_probs,
    reconstruct,
)
from .nn import (
    AdamState,
    CyclicalLr,
    Tensor,
    adam_step,
    cyclical_lr,
    global_avg_pool_masked,
    l1l2_penalty,
    masked_mse,
    weighted_cross_entropy,
)

__all__ = [
    "Batch",
    "TrainConfig",
    "TrainReport",
    "TrainingDiverged",
    "make_batches",
    "compute_contexts",
    "pretrain",
    "train_classifier",
    "train_head",
    "infer_labels",
]

_DOM_SHUFFLE = 11
_DOM_DROPOUT = 12
_DOM_HEAD_INIT = 13

MIN_TRIAL_LEN = 17


def _rng(seed: int, domain: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence((seed, domain))))


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    max_epochs: int = 6000
    patience: int = 250
    base_lr: float = 5e-4
    max_lr: float = 1e-2
    lr_step_size: int = 200
    loss_window: int = 25
    classifier_epochs: int = 1500
    minority_weight: float = 0.7

    def schedule(self) -> CyclicalLr:
        return CyclicalLr(self.base_lr, self.max_lr, self.lr_step_size)


@dataclass
class TrainReport:
    epoch_losses: list[float]
    best_epoch: int
    best_loss: float
    stop_reason: str  # "max_epochs" | "early_stop"
    wall_time_s: float
    seed: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1)

    @classmethod
    def from_json(cls, text: str) -> "TrainReport":
        return cls(**json.loads(text))


class TrainingDiverged(RuntimeError):
    """Raised when the loss goes non-finite; carries the partial report."""

    def __init__(self, message: str, report: TrainReport):
        super().__init__(message)
        self.report = report


@dataclass
class Batch:
    """Padded inputs/targets plus validity mask and per-example lengths."""

    inputs: np.ndarray              # (B, T_max, C)
    targets: np.ndarray | None      # (B, T_max, C) for reconstruction
    labels: np.ndarray | None       # (B,) for classification
    mask: np.ndarray                # (B, T_max) in {0, 1}, prefix-valid
    lengths: np.ndarray             # (B,)
    indices: np.ndarray             # positions in the original trial list


def make_batches(
    inputs: list[np.ndarray],
    targets: list[np.ndarray] | np.ndarray | None,
    batch_size: int,
    rng: np.random.Generator,
    shuffle: bool = True,
) -> list[Batch]:
    """Shuffle, chunk, and pad each chunk to its own longest sequence."""
    n = len(inputs)
    if n == 0:
        raise ValueError("no trials to batch")
    n_cols = inputs[0].shape[1]
    for i, x in enumerate(inputs):
        if x.shape[1] != n_cols:
            raise ValueError(f"trial {i} has {x.shape[1]} columns, expected {n_cols}")
        if x.shape[0] < MIN_TRIAL_LEN:
            raise ValueError(f"trial {i} shorter than {MIN_TRIAL_LEN} timepoints")
    seq_targets = isinstance(targets, list)
    labels = None if (targets is None or seq_targets) else np.asarray(targets)
    order = rng.permutation(n) if shuffle else np.arange(n)
    batches = []
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        lens = np.array([inputs[i].shape[0] for i in idx])
        t_max = int(lens.max())
        xs = np.zeros((len(idx), t_max, n_cols))
        ts = np.zeros_like(xs) if seq_targets else None
        mask = np.zeros((len(idx), t_max))
        for row, i in enumerate(idx):
            ln = inputs[i].shape[0]
            xs[row, :ln] = inputs[i]
            mask[row, :ln] = 1.0
            if seq_targets:
                ts[row, :ln] = targets[i]
        batches.append(
            Batch(
                inputs=xs,
                targets=ts,
                labels=None if labels is None else labels[idx],
                mask=mask,
                lengths=lens,
                indices=idx,
            )
        )
    return batches


def _per_trial_se(out: np.ndarray, target: np.ndarray, mask: np.ndarray, window: int):
    t_len = out.shape[1]
    w = mask * (np.arange(t_len) < window)
    diff = (out - target) * w[:, :, None]
    se = (diff * diff).sum(axis=(1, 2))
    cnt = w.sum(axis=1) * out.shape[2]
    return se, cnt


def pretrain(
    model: EncoderDecoderModel,
    inputs: list[np.ndarray],
    targets: list[np.ndarray],
    cfg: TrainConfig,
    seed: int,
) -> tuple[EncoderDecoderModel, TrainReport]:
    """Minimize the windowed masked MSE; return the best-checkpoint weights.

    Stops at max_epochs, or early once the epoch loss has not improved for
    more than `patience` epochs. Non-finite loss aborts with the partial
    report attached to the raised TrainingDiverged.
    """
    if not inputs:
        raise ValueError("empty training set")
    if len(inputs) != len(targets):
        raise ValueError("inputs and targets differ in length")
    t0 = time.perf_counter()
    shuffle_rng = _rng(seed, _DOM_SHUFFLE)
    dropout_rng = _rng(seed, _DOM_DROPOUT)
    state = AdamState.for_params(model.params)
    sched = cfg.schedule()
    n = len(inputs)

    losses: list[float] = []
    best_loss = np.inf
    best_epoch = -1
    snapshot: dict[str, np.ndarray] = {}
    stop_reason = "max_epochs"
    step = 0

    def report() -> TrainReport:
        return TrainReport(
            epoch_losses=losses,
            best_epoch=best_epoch,
            best_loss=float(best_loss) if np.isfinite(best_loss) else float("nan"),
            stop_reason=stop_reason,
            wall_time_s=time.perf_counter() - t0,
            seed=seed,
        )

    for epoch in range(cfg.max_epochs):
        batches = make_batches(inputs, targets, cfg.batch_size, shuffle_rng, shuffle=True)
        se_by_trial = np.zeros(n)
        cnt_by_trial = np.zeros(n)
        for batch in batches:
            for p in model.params.values():
                p.zero_grad()
            out = reconstruct(model, batch.inputs, batch.mask, training=True, rng=dropout_rng)
            loss = masked_mse(out, batch.targets, batch.mask, cfg.loss_window)
            if not np.isfinite(loss.item()):
                stop_reason = "diverged"
                raise TrainingDiverged(
                    f"non-finite reconstruction loss at epoch {epoch}", report()
                )
            loss.backward()
            adam_step(model.params, state, cyclical_lr(step, sched))
            step += 1
            se, cnt = _per_trial_se(out.data, batch.targets, batch.mask, cfg.loss_window)
            se_by_trial[batch.indices] = se
            cnt_by_trial[batch.indices] = cnt
        epoch_loss = float(se_by_trial.sum() / cnt_by_trial.sum())
        losses.append(epoch_loss)
        if epoch_loss < best_loss:
            best_loss = epoch_loss
            best_epoch = epoch
            snapshot = {k: p.data.copy() for k, p in model.params.items()}
        elif epoch - best_epoch > cfg.patience:
            stop_reason = "early_stop"
            break

    best_model = EncoderDecoderModel(
        config=model.config,
        params={k: Tensor(v, requires_grad=True) for k, v in snapshot.items()},
    )
    return best_model, report()


def compute_contexts(
    encoder: EncoderDecoderModel, inputs: list[np.ndarray], chunk: int = 64
) -> np.ndarray:
    """Context vectors for a trial list, computed in fixed-order chunks."""
    frozen = freeze_encoder(encoder)
    out = np.empty((len(inputs), encoder.config.encoder_filters[2]))
    order_rng = np.random.Generator(np.random.Philox(0))  # unused: shuffle off
    for batch in make_batches(inputs, None, chunk, order_rng, shuffle=False):
        feats = encoder_features(frozen, batch.inputs, batch.mask)
        ctx = global_avg_pool_masked(feats, batch.mask).data
        out[batch.indices] = ctx
    return out


def _class_weights(labels: np.ndarray, minority_weight: float) -> tuple[float, float]:
    counts = np.bincount(labels, minlength=2)
    if counts[0] == counts[1]:
        return (0.5, 0.5)
    minority = int(np.argmin(counts))
    w = [0.0, 0.0]
    w[minority] = minority_weight
    w[1 - minority] = 1.0 - minority_weight
    return (w[0], w[1])


def train_head(
    clf: ClassifierModel,
    contexts: np.ndarray,
    labels: np.ndarray,
    cfg: TrainConfig,
    seed: int,
) -> tuple[ClassifierModel, TrainReport]:
    """Train the 1NN head on fixed contexts for cfg.classifier_epochs."""
    labels = np.asarray(labels, dtype=np.int64)
    if np.unique(labels).size < 2:
        raise ValueError("classifier training needs both classes present")
    t0 = time.perf_counter()
    weights = _class_weights(labels, cfg.minority_weight)
    shuffle_rng = _rng(seed, _DOM_SHUFFLE)
    dropout_rng = _rng(seed, _DOM_DROPOUT)
    state = AdamState.for_params(clf.params)
    sched = cfg.schedule()
    reg_params = [clf.params["cls.w1"], clf.params["cls.w2"]]
    n = len(labels)
    losses = []
    step = 0
    for _epoch in range(cfg.classifier_epochs):
        order = shuffle_rng.permutation(n)
        wce_num = 0.0
        wce_den = 0.0
        pen_val = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            for p in clf.params.values():
                p.zero_grad()
            probs = head_probs(clf, contexts[idx], training=True, rng=dropout_rng)
            wce = weighted_cross_entropy(probs, labels[idx], weights)
            pen = l1l2_penalty(reg_params, clf.config.classifier_l1, clf.config.classifier_l2)
            loss = wce + pen
            if not np.isfinite(loss.item()):
                raise TrainingDiverged(
                    "non-finite classifier loss",
                    TrainReport(losses, -1, float("nan"), "diverged",
                                time.perf_counter() - t0, seed),
                )
            loss.backward()
            adam_step(clf.params, state, cyclical_lr(step, sched))
            step += 1
            batch_w = float(np.asarray(weights)[labels[idx]].sum())
            wce_num += wce.item() * batch_w
            wce_den += batch_w
            pen_val = pen.item()
        losses.append(wce_num / wce_den + pen_val)
    best = int(np.argmin(losses)) if losses else -1
    report = TrainReport(
        epoch_losses=losses,
        best_epoch=best,
        best_loss=float(losses[best]) if losses else float("nan"),
        stop_reason="max_epochs",
        wall_time_s=time.perf_counter() - t0,
        seed=seed,
    )
    return clf, report


def train_classifier(
    encoder: EncoderDecoderModel,
    inputs: list[np.ndarray],
    labels: np.ndarray,
    cfg: TrainConfig,
    seed: int,
) -> tuple[ClassifierModel, TrainReport]:
    """Freeze the encoder, extract contexts, and train the head on them."""
    contexts = compute_contexts(encoder, inputs)
    clf = build_classifier(encoder.config, encoder, rng=_rng(seed, _DOM_HEAD_INIT))
    return train_head(clf, contexts, labels, cfg, seed)


def infer_labels(
    clf: ClassifierModel,
    inputs: list[np.ndarray],
    threshold: float = 0.5,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-trial (score, label): score is p_positive, positive iff >= threshold."""
    contexts = compute_contexts(clf.encoder, inputs)
    probs = head_probs(clf, contexts).data
    scores = probs[:, 1]
    return scores, (scores >= threshold).astype(np.int64)
