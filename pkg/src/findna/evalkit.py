"""Downstream evaluation: frozen-backbone linear probing, fine-tuning, metrics.

Features come from an unaugmented forward pass in inference mode. The head is
a linear layer or a two-layer MLP trained by cross-entropy; linear probing
never touches the backbone, fine-tuning trains a private copy of it.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import ndiff as nd
from .distill import Network, Pretrained, load_pretrained, warmup_cosine_lr
from .ndiff import AdamW, Parameter, Tape, Tensor
from .seqcore import LabeledDataset, NucleotideSequence, encode_one_hot, write_labeled_csv

MODES = ("linear_probe", "finetune")
HEADS = ("linear", "mlp2")
REPRESENTATIONS = ("cls_mean", "pos_mean", "concat_both")
NETWORKS = ("teacher", "student")
SPLITS = ("train", "val", "test")


class EvalError(ValueError):
    pass


@dataclass(frozen=True)
class ProbeConfig:
    mode: str = "linear_probe"
    head: str = "linear"
    representation: str = "cls_mean"
    network: str = "teacher"
    epochs: int = 50
    batch: int = 1024
    lr: float = 0.01
    weight_decay: float = 0.1
    hidden: int = 64  # mlp2 only
    warmup_fraction: float = 0.3
    seed: int = 0
    standardize: bool = True
    # fine-tuning only: start from a probe-trained head instead of a random one
    head_init: str = "random"
    head_init_epochs: int = 50
    head_init_lr: float = 0.01

    def __post_init__(self):
        if self.mode not in MODES:
            raise EvalError(f"mode must be one of {MODES}")
        if self.head not in HEADS:
            raise EvalError(f"head must be one of {HEADS}")
        if self.representation not in REPRESENTATIONS:
            raise EvalError(f"representation must be one of {REPRESENTATIONS}")
        if self.network not in NETWORKS:
            raise EvalError(f"network must be one of {NETWORKS}")
        if self.head == "mlp2" and self.hidden < 1:
            raise EvalError("mlp2 hidden width must be >= 1")
        if self.epochs < 0 or self.batch < 1:
            raise EvalError("epochs must be >= 0 and batch >= 1")
        if self.lr < 0 or self.weight_decay < 0:
            raise EvalError("lr and weight_decay must be nonnegative")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise EvalError("warmup_fraction must be in [0, 1)")
        if self.head_init not in ("random", "probe"):
            raise EvalError("head_init must be random or probe")
        if self.head_init_epochs < 0 or self.head_init_lr < 0:
            raise EvalError("head_init_epochs and head_init_lr must be nonnegative")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# metrics


def confusion_matrix(targets: np.ndarray, predictions: np.ndarray, num_classes: int) -> np.ndarray:
    """Rows are true classes, columns predicted classes."""
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(targets, dtype=np.int64), np.asarray(predictions, dtype=np.int64)), 1)
    return cm


def metrics(confusion) -> tuple[float, float, float]:
    """Top-1 accuracy, multiclass MCC and macro F1 from a confusion matrix."""
    cm = np.asarray(confusion)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1] or cm.size == 0:
        raise EvalError("confusion matrix must be square and non-empty")
    if np.any(cm < 0) or not np.all(np.equal(np.mod(cm, 1), 0)):
        raise EvalError("confusion matrix must hold nonnegative integers")
    cm = cm.astype(np.float64)
    total = cm.sum()
    if total == 0:
        raise EvalError("confusion matrix is empty")
    correct = np.trace(cm)
    top1 = correct / total

    true_counts = cm.sum(axis=1)
    pred_counts = cm.sum(axis=0)
    cov_tp = correct * total - pred_counts @ true_counts
    cov_pp = total**2 - pred_counts @ pred_counts
    cov_tt = total**2 - true_counts @ true_counts
    denom = math.sqrt(cov_pp * cov_tt)
    mcc = float(cov_tp / denom) if denom > 0 else 0.0

    tp = np.diag(cm)
    f1_den = true_counts + pred_counts  # 2TP + FP + FN
    f1 = np.divide(2.0 * tp, f1_den, out=np.zeros_like(tp), where=f1_den > 0)
    return float(top1), mcc, float(f1.mean())


@dataclass
class ProbeReport:
    top1_accuracy: float
    mcc: float
    f1_macro: float
    confusion: list[list[int]]
    majority_baseline: float
    mode: str = "linear_probe"
    network: str = "teacher"
    representation: str = "cls_mean"
    num_train: int = 0
    num_test: int = 0
    seed: int = 0
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_predictions(cls, targets, predictions, num_classes: int, majority: float, **kw) -> ProbeReport:
        cm = confusion_matrix(targets, predictions, num_classes)
        top1, mcc, f1 = metrics(cm)
        return cls(top1, mcc, f1, cm.tolist(), majority, **kw)

    def to_dict(self) -> dict:
        return asdict(self)

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    CSV_FIELDS = ("mode", "network", "representation", "top1_accuracy", "mcc", "f1_macro", "majority_baseline",
                  "num_train", "num_test", "seed")

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.CSV_FIELDS)
            w.writerow([getattr(self, k) for k in self.CSV_FIELDS])


REPORT_SCHEMA = {
    "top1_accuracy": float,
    "mcc": float,
    "f1_macro": float,
    "confusion": list,
    "majority_baseline": float,
    "mode": str,
    "network": str,
    "representation": str,
    "num_train": int,
    "num_test": int,
    "seed": int,
    "extra": dict,
}


def validate_report(data: dict) -> None:
    """Check a report dict (e.g. parsed JSON) against the documented layout."""
    missing = set(REPORT_SCHEMA) - set(data)
    if missing:
        raise EvalError(f"report is missing {sorted(missing)}")
    for key, typ in REPORT_SCHEMA.items():
        value = data[key]
        ok = isinstance(value, (int, float)) and not isinstance(value, bool) if typ is float else isinstance(value, typ)
        if not ok:
            raise EvalError(f"report field {key!r} should be {typ.__name__}")
    for key in ("top1_accuracy", "f1_macro", "majority_baseline"):
        if not 0.0 <= data[key] <= 1.0:
            raise EvalError(f"{key} outside [0, 1]")
    if not -1.0 <= data["mcc"] <= 1.0:
        raise EvalError("mcc outside [-1, 1]")
    cm = np.asarray(data["confusion"])
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise EvalError("confusion must be a square matrix")
    if data["num_test"] != int(cm.sum()):
        raise EvalError("confusion total differs from num_test")


# ---------------------------------------------------------------------------
# splits


def random_split(n: int, seed: int, fractions=(0.8, 0.1, 0.1)) -> list[str]:
    """Seeded 80/10/10 assignment of ``n`` records to train/val/test."""
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    labels = np.empty(n, dtype=object)
    labels[order[:n_train]] = "train"
    labels[order[n_train : n_train + n_val]] = "val"
    labels[order[n_train + n_val :]] = "test"
    return labels.tolist()


def ensure_splits(dataset: LabeledDataset, seed: int, persist_to: str | Path | None = None) -> LabeledDataset:
    """Attach a seeded split when the data has none; optionally write it back out."""
    if dataset.splits is not None:
        bad = set(dataset.splits) - set(SPLITS)
        if bad:
            raise EvalError(f"unknown split names {sorted(bad)}")
        return dataset
    out = replace(dataset, splits=random_split(len(dataset), seed))
    if persist_to is not None:
        write_labeled_csv(persist_to, out)
    return out


def _split_indices(dataset: LabeledDataset) -> dict[str, np.ndarray]:
    names = np.asarray(dataset.splits)
    return {s: np.flatnonzero(names == s) for s in SPLITS}


# ---------------------------------------------------------------------------
# representations


def _encode_batch(seqs: Sequence[NucleotideSequence]) -> np.ndarray:
    return np.stack([encode_one_hot(s) for s in seqs]).astype(nd.DTYPE)


def _pool(U, P, representation: str, differentiable: bool):
    if differentiable:
        cls = nd.mean(P, axis=1)
        pos = nd.mean(U, axis=1)
        if representation == "cls_mean":
            return cls
        if representation == "pos_mean":
            return pos
        return nd.concat([cls, pos], axis=-1)
    cls, pos = P.value.mean(axis=1), U.value.mean(axis=1)
    if representation == "cls_mean":
        return cls
    if representation == "pos_mean":
        return pos
    return np.concatenate([cls, pos], axis=-1)


def _check_fits(network: Network, length: int) -> None:
    if length + network.num_cls > network.config.max_length:
        raise EvalError(
            f"sequence length {length} plus {network.num_cls} CLS tokens exceeds the checkpoint's "
            f"max_length {network.config.max_length}"
        )


def extract_representation(seq: NucleotideSequence | str, network: Network, representation: str = "cls_mean") -> np.ndarray:
    """Feature vector of one unaugmented sequence, inference mode."""
    return extract_features([seq], network, representation)[0]


def extract_features(
    seqs: Sequence[NucleotideSequence | str], network: Network, representation: str = "cls_mean", batch: int = 64
) -> np.ndarray:
    if representation not in REPRESENTATIONS:
        raise EvalError(f"representation must be one of {REPRESENTATIONS}")
    seqs = [s if isinstance(s, NucleotideSequence) else NucleotideSequence("", s) for s in seqs]
    width = network.config.channels * (2 if representation == "concat_both" else 1)
    out = np.empty((len(seqs), width), dtype=nd.DTYPE)
    by_length: dict[int, list[int]] = {}
    for i, s in enumerate(seqs):
        by_length.setdefault(len(s), []).append(i)
    for length, idx in by_length.items():
        _check_fits(network, length)
        for start in range(0, len(idx), batch):
            chunk = idx[start : start + batch]
            U, P = network.forward(Tape(record=False), _encode_batch([seqs[i] for i in chunk]), training=False)
            out[chunk] = _pool(U, P, representation, differentiable=False)
    return out


# ---------------------------------------------------------------------------
# heads


def init_head(in_width: int, num_classes: int, config: ProbeConfig, rng: np.random.Generator) -> dict[str, Parameter]:
    if config.head == "linear":
        return {
            "probe.w": Parameter("probe.w", rng.normal(0.0, 1.0 / math.sqrt(in_width), (in_width, num_classes))),
            "probe.b": Parameter("probe.b", np.zeros(num_classes)),
        }
    H = config.hidden
    return {
        "probe.w1": Parameter("probe.w1", rng.normal(0.0, 1.0 / math.sqrt(in_width), (in_width, H))),
        "probe.b1": Parameter("probe.b1", np.zeros(H)),
        "probe.w2": Parameter("probe.w2", rng.normal(0.0, 1.0 / math.sqrt(H), (H, num_classes))),
        "probe.b2": Parameter("probe.b2", np.zeros(num_classes)),
    }


def head_logits(tape: Tape, feats: Tensor, head: dict[str, Parameter]) -> Tensor:
    if "probe.w" in head:
        return nd.linear(feats, tape.param(head["probe.w"]), tape.param(head["probe.b"]))
    h = nd.gelu(nd.linear(feats, tape.param(head["probe.w1"]), tape.param(head["probe.b1"])))
    return nd.linear(h, tape.param(head["probe.w2"]), tape.param(head["probe.b2"]))


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    onehot = np.zeros(logits.shape)
    onehot[np.arange(len(labels)), labels] = 1.0
    picked = nd.multiply(nd.log_softmax(logits, axis=-1), Tensor(onehot))
    return nd.scale(nd.sum_(picked), -1.0 / len(labels))


@dataclass
class _Standardizer:
    mu: np.ndarray
    inv_sd: np.ndarray

    @classmethod
    def fit(cls, feats: np.ndarray, enabled: bool) -> _Standardizer:
        if not enabled:
            return cls(np.zeros(feats.shape[1]), np.ones(feats.shape[1]))
        sd = feats.std(axis=0)
        return cls(feats.mean(axis=0), 1.0 / np.where(sd > 1e-12, sd, 1.0))

    def apply(self, feats: np.ndarray) -> np.ndarray:
        return (feats - self.mu) * self.inv_sd

    def apply_tensor(self, feats: Tensor) -> Tensor:
        B = feats.shape[0]
        shift = Tensor(np.broadcast_to(self.mu, feats.shape).copy())
        scale = Tensor(np.broadcast_to(self.inv_sd, (B, len(self.inv_sd))).copy())
        return nd.multiply(nd.sub(feats, shift), scale)


def _predict_head(feats: np.ndarray, head: dict[str, Parameter]) -> np.ndarray:
    return head_logits(Tape(record=False), Tensor(feats), head).value.argmax(axis=1)


def _train_head(feats: np.ndarray, labels: np.ndarray, head: dict[str, Parameter], config: ProbeConfig) -> None:
    rng = np.random.default_rng([config.seed, 1])
    opt = AdamW(head.values(), lr=config.lr, weight_decay=config.weight_decay)
    per_epoch = math.ceil(len(labels) / config.batch)
    total = config.epochs * per_epoch
    step = 0
    for _ in range(config.epochs):
        order = rng.permutation(len(labels))
        for start in range(0, len(labels), config.batch):
            idx = order[start : start + config.batch]
            tape = Tape()
            loss = cross_entropy(head_logits(tape, tape.constant(feats[idx]), head), labels[idx])
            opt.zero_grad()
            tape.backward(loss)
            opt.step(warmup_cosine_lr(step, total, config.lr, config.warmup_fraction))
            step += 1


# ---------------------------------------------------------------------------
# probing and fine-tuning


def _resolve(checkpoint: str | Path | Pretrained) -> Pretrained:
    if isinstance(checkpoint, Pretrained):
        return checkpoint
    path = Path(checkpoint)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return load_pretrained(path)


def _prepare(dataset: LabeledDataset, config: ProbeConfig):
    if len(np.unique(dataset.labels)) < 2:
        raise EvalError("dataset has a single class; nothing to discriminate")
    dataset = ensure_splits(dataset, config.seed)
    idx = _split_indices(dataset)
    if idx["train"].size == 0 or idx["test"].size == 0:
        raise EvalError("train and test splits must both be non-empty")
    labels = dataset.labels
    if len(np.unique(labels[idx["train"]])) < 2:
        raise EvalError("training split has a single class")
    counts = np.bincount(labels[idx["train"]], minlength=dataset.num_classes)
    majority = float(np.mean(labels[idx["test"]] == counts.argmax()))
    return dataset, idx, labels, majority


def linear_probe(
    dataset: LabeledDataset, checkpoint: str | Path | Pretrained, config: ProbeConfig | None = None
) -> tuple[ProbeReport, dict[str, Parameter]]:
    """Train a head on frozen features; returns the test-split report and the head."""
    config = config or ProbeConfig()
    pre = _resolve(checkpoint)
    network = pre.network(config.network)
    dataset, idx, labels, majority = _prepare(dataset, config)
    feats = extract_features(dataset.sequences, network, config.representation)
    std = _Standardizer.fit(feats[idx["train"]], config.standardize)
    feats = std.apply(feats)
    head = init_head(feats.shape[1], dataset.num_classes, config, np.random.default_rng([config.seed, 0]))
    _train_head(feats[idx["train"]], labels[idx["train"]], head, config)
    preds = _predict_head(feats[idx["test"]], head)
    report = ProbeReport.from_predictions(
        labels[idx["test"]], preds, dataset.num_classes, majority,
        mode="linear_probe", network=config.network, representation=config.representation,
        num_train=int(idx["train"].size), num_test=int(idx["test"].size), seed=config.seed,
    )
    return report, head


def finetune(
    dataset: LabeledDataset, checkpoint: str | Path | Pretrained, config: ProbeConfig | None = None
) -> ProbeReport:
    """Train a copy of the chosen backbone jointly with the head."""
    config = replace(config or ProbeConfig(), mode="finetune")
    pre = _resolve(checkpoint)
    network = pre.network(config.network).clone()
    dataset, idx, labels, majority = _prepare(dataset, config)
    seqs = dataset.sequences
    tr, te = idx["train"], idx["test"]

    feats0 = extract_features([seqs[i] for i in tr], network, config.representation)
    std = _Standardizer.fit(feats0, config.standardize)
    if config.head_init == "probe":
        head = init_head(feats0.shape[1], dataset.num_classes, config, np.random.default_rng([config.seed, 0]))
        probe_cfg = replace(config, mode="linear_probe", epochs=config.head_init_epochs, lr=config.head_init_lr)
        _train_head(std.apply(feats0), labels[tr], head, probe_cfg)
    else:
        head = init_head(feats0.shape[1], dataset.num_classes, config, np.random.default_rng([config.seed, 0]))

    params = list(network.params.values()) + list(head.values())
    opt = AdamW(params, lr=config.lr, weight_decay=config.weight_decay)
    rng = np.random.default_rng([config.seed, 2])
    per_epoch = math.ceil(len(tr) / config.batch)
    total = config.epochs * per_epoch
    step = 0
    for _ in range(config.epochs):
        order = tr[rng.permutation(len(tr))]
        for start in range(0, len(order), config.batch):
            chunk = order[start : start + config.batch]
            x = _encode_batch([seqs[i] for i in chunk])
            _check_fits(network, x.shape[1])
            tape = Tape()
            U, P = network.forward(tape, x, training=True, rng=rng)
            f = std.apply_tensor(_pool(U, P, config.representation, differentiable=True))
            loss = cross_entropy(head_logits(tape, f, head), labels[chunk])
            opt.zero_grad()
            tape.backward(loss)
            opt.step(warmup_cosine_lr(step, total, config.lr, config.warmup_fraction))
            step += 1

    feats = std.apply(extract_features([seqs[i] for i in te], network, config.representation))
    preds = _predict_head(feats, head)
    return ProbeReport.from_predictions(
        labels[te], preds, dataset.num_classes, majority,
        mode="finetune", network=config.network, representation=config.representation,
        num_train=int(tr.size), num_test=int(te.size), seed=config.seed,
    )
