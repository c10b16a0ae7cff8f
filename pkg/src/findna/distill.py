"""Student/teacher self-distillation pretraining.

The student sees the masked ``u`` view and is trained by gradients on

    total = alpha * mnm + (1 - alpha) * cl

where ``mnm`` is the masked-nucleotide cross-entropy summed over masked
positions and ``cl`` is the cross-entropy between the teacher's centered,
sharpened CLS distribution and the student's. Both CLS softmaxes normalize
across the K CLS tokens of each channel by default. The teacher sees the
``v`` view, never receives gradients, and follows the student by EMA.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import ndiff as nd
from .augment import EncodedView, ViewPipeline, default_u_pipeline, default_v_pipeline
from .mixer import ChordMixer, MixerConfig, init_mixer_params
from .ndiff import AdamW, Parameter, Tape, Tensor
from .seqcore import ALPHABET, WIDTH, NucleotideSequence

log = logging.getLogger(__name__)

_N_COLUMN = ALPHABET.index("N")


class DistillConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DistillConfig:
    alpha: float = 0.5
    tau_s: float = 0.1
    tau_t: float = 0.04
    num_cls: int = 10
    beta: float = 0.996
    lambda_start: float = 0.996
    lambda_end: float = 1.0
    epochs: int = 50
    warmup_fraction: float = 0.3
    lr: float = 1e-3
    weight_decay: float = 0.04
    adam_betas: tuple[float, float] = (0.9, 0.999)
    batch_size: int = 32
    seed: int = 0
    mnm_reduction: str = "sum"  # over masked positions: sum | mean
    batch_reduction: str = "mean"  # over sequences: mean | sum
    cl_softmax_axis: str = "tokens"  # tokens | channels
    include_n_targets: bool = True
    centering: bool = True
    contrastive: bool = True

    def __post_init__(self):
        object.__setattr__(self, "adam_betas", tuple(self.adam_betas))
        if self.contrastive:
            if not 0.0 < self.alpha < 1.0:
                raise DistillConfigError("alpha must be in (0, 1)")
        elif self.alpha != 1.0:
            raise DistillConfigError("alpha must be 1 when the contrastive branch is disabled")
        if not (self.tau_s > 0 and self.tau_t > 0):
            raise DistillConfigError("temperatures must be positive")
        if not self.tau_t < self.tau_s:
            raise DistillConfigError("teacher temperature must be below student temperature")
        if self.num_cls < 1:
            raise DistillConfigError("num_cls must be >= 1")
        if not 0.0 <= self.beta <= 1.0:
            raise DistillConfigError("beta must be in [0, 1]")
        for lam in (self.lambda_start, self.lambda_end):
            if not 0.0 < lam <= 1.0:
                raise DistillConfigError("lambda schedule must lie in (0, 1]")
        if self.epochs < 0:
            raise DistillConfigError("epochs must be >= 0")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise DistillConfigError("warmup_fraction must be in [0, 1)")
        if self.lr < 0 or self.weight_decay < 0:
            raise DistillConfigError("lr and weight_decay must be nonnegative")
        if self.batch_size < 1:
            raise DistillConfigError("batch_size must be >= 1")
        if self.mnm_reduction not in ("sum", "mean"):
            raise DistillConfigError("mnm_reduction must be sum or mean")
        if self.batch_reduction not in ("sum", "mean"):
            raise DistillConfigError("batch_reduction must be sum or mean")
        if self.cl_softmax_axis not in ("tokens", "channels"):
            raise DistillConfigError("cl_softmax_axis must be tokens or channels")

    def to_dict(self) -> dict:
        return asdict(self)


def cm_mnm(config: DistillConfig) -> DistillConfig:
    """Masked-modeling-only ablation: alpha=1, no teacher branch."""
    return replace(config, alpha=1.0, contrastive=False)


# ---------------------------------------------------------------------------
# equation-level pieces


def append_cls(view: EncodedView | np.ndarray, num_cls: int) -> np.ndarray:
    if num_cls < 1:
        raise DistillConfigError("num_cls must be >= 1")
    m = view.matrix if isinstance(view, EncodedView) else np.asarray(view, dtype=np.float64)
    return np.concatenate([m, np.zeros((num_cls, m.shape[1]))], axis=0)


def _cls_axis(axis: str) -> int:
    # CLS outputs are (..., K, I): "tokens" normalizes over K
    return -2 if axis == "tokens" else -1


def student_cls_softmax(P: np.ndarray, tau_s: float, axis: str = "tokens") -> np.ndarray:
    z = np.asarray(P, dtype=np.float64) / tau_s
    ax = _cls_axis(axis)
    z = z - z.max(axis=ax, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=ax, keepdims=True)


def teacher_cls_softmax(Q: np.ndarray, center: np.ndarray, tau_t: float, axis: str = "tokens") -> np.ndarray:
    """Centered, sharpened teacher distribution; plain numpy, so never differentiated."""
    return student_cls_softmax(np.asarray(Q) - center, tau_t, axis)


def cl_loss_value(p_hat: np.ndarray, q_hat: np.ndarray) -> float:
    p_hat = np.asarray(p_hat)
    q_hat = np.asarray(q_hat)
    if p_hat.shape != q_hat.shape:
        raise nd.DimensionError(f"cl_loss: shapes {p_hat.shape} and {q_hat.shape} differ")
    return float(-np.sum(q_hat * np.log(p_hat)))


def total_loss(mnm, cl, alpha: float):
    if not 0.0 <= alpha <= 1.0:
        raise DistillConfigError("alpha must be in [0, 1]")
    if isinstance(mnm, Tensor) or isinstance(cl, Tensor):
        return nd.add(nd.scale(mnm, alpha), nd.scale(cl, 1.0 - alpha))
    return alpha * mnm + (1.0 - alpha) * cl


@dataclass
class CenterState:
    xi: np.ndarray
    beta: float = 0.996

    def update(self, Q_batch: np.ndarray) -> CenterState:
        return update_center(self, Q_batch)


def update_center(center: CenterState, Q_batch: np.ndarray) -> CenterState:
    """``xi <- beta * xi + (1 - beta) * mean_batch(Q)``."""
    Q_batch = np.asarray(Q_batch, dtype=np.float64)
    if Q_batch.ndim != 3 or Q_batch.shape[0] == 0:
        raise DistillConfigError("update_center needs a nonempty (batch, K, I) array")
    if Q_batch.shape[1:] != center.xi.shape:
        raise nd.DimensionError(f"center shape {center.xi.shape} vs batch {Q_batch.shape[1:]}")
    c = Q_batch.mean(axis=0)
    return CenterState(center.beta * center.xi + (1.0 - center.beta) * c, center.beta)


def ema_update(teacher: dict[str, Parameter], student: dict[str, Parameter], lam: float) -> None:
    """In place: ``theta_t <- lam * theta_t + (1 - lam) * theta_s`` for every name."""
    if not 0.0 <= lam <= 1.0:
        raise DistillConfigError("EMA factor must be in [0, 1]")
    if teacher.keys() != student.keys():
        raise DistillConfigError("teacher and student parameter names differ")
    for name, t in teacher.items():
        s = student[name]
        if t.shape != s.shape:
            raise DistillConfigError(f"{name}: shape {t.shape} vs {s.shape}")
        if lam == 1.0:
            continue
        t.value *= lam
        t.value += (1.0 - lam) * s.value


def warmup_cosine_lr(step: int, total_steps: int, peak: float, warmup_fraction: float) -> float:
    """Linear warmup from 0 over ``int(warmup_fraction * total)`` steps, then cosine decay to 0."""
    warmup = int(warmup_fraction * total_steps)
    if step < warmup:
        return peak * step / warmup
    progress = (step - warmup) / max(1, total_steps - warmup)
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))


def cosine_schedules(step: int, total_steps: int, config: DistillConfig) -> tuple[float, float]:
    """Learning rate (linear warmup then cosine decay to 0) and EMA factor."""
    if not 0 <= step < total_steps:
        raise DistillConfigError(f"step {step} outside [0, {total_steps})")
    lr = warmup_cosine_lr(step, total_steps, config.lr, config.warmup_fraction)
    lam = config.lambda_end + (config.lambda_start - config.lambda_end) * (
        1.0 + math.cos(math.pi * step / total_steps)
    ) / 2.0
    return lr, lam


# ---------------------------------------------------------------------------
# network


def init_head_params(channels: int, rng: np.random.Generator) -> dict[str, Parameter]:
    return {
        "head.mnm.w": Parameter("head.mnm.w", rng.normal(0.0, 1.0 / math.sqrt(channels), (channels, WIDTH))),
        "head.mnm.b": Parameter("head.mnm.b", np.zeros(WIDTH)),
    }


class Network:
    """Projector + mixer + masked-modeling head, sharing one parameter dict."""

    def __init__(self, config: MixerConfig, params: dict[str, Parameter], num_cls: int):
        self.config = config
        self.params = params
        self.num_cls = num_cls
        self.mixer = ChordMixer(config, params)

    @classmethod
    def create(cls, config: MixerConfig, num_cls: int, rng: np.random.Generator) -> Network:
        params = init_mixer_params(config, rng)
        params.update(init_head_params(config.channels, rng))
        return cls(config, params, num_cls)

    def clone(self) -> Network:
        params = {n: Parameter(n, p.value.copy()) for n, p in self.params.items()}
        return Network(self.config, params, self.num_cls)

    def forward(
        self, tape: Tape, views: np.ndarray, training: bool = False, rng: np.random.Generator | None = None
    ) -> tuple[Tensor, Tensor]:
        """``(B, L, 5)`` views to position outputs ``(B, L, I)`` and CLS outputs ``(B, K, I)``."""
        views = np.asarray(views, dtype=nd.DTYPE)
        if views.ndim == 2:
            views = views[None]
        B, L, _ = views.shape
        x = np.concatenate([views, np.zeros((B, self.num_cls, views.shape[2]), dtype=views.dtype)], axis=1)
        h = self.mixer(tape, tape.constant(x), training, rng)
        return nd.slice_(h, 0, L, axis=1), nd.slice_(h, L, L + self.num_cls, axis=1)

    def mnm_log_probs(self, tape: Tape, U: Tensor) -> Tensor:
        logits = nd.linear(U, tape.param(self.params["head.mnm.w"]), tape.param(self.params["head.mnm.b"]))
        return nd.log_softmax(logits, axis=-1)


def mnm_loss(
    log_probs: Tensor, targets: np.ndarray, position_reduction: str = "sum", batch_reduction: str = "mean"
) -> Tensor:
    """Cross-entropy at masked rows.

    ``targets`` is ``(B, L, 5)`` with the pre-mask one-hot row at each masked
    position and zeros elsewhere, so unmasked rows contribute nothing.
    """
    targets = np.asarray(targets, dtype=nd.DTYPE)
    if targets.shape != log_probs.shape:
        raise nd.DimensionError(f"mnm_loss: targets {targets.shape} vs predictions {log_probs.shape}")
    per = nd.multiply(log_probs, Tensor(targets))
    if position_reduction == "mean":
        counts = targets.sum(axis=(-1, -2), keepdims=True)
        weights = np.where(counts > 0, 1.0 / np.maximum(counts, 1.0), 0.0)
        per = nd.multiply(per, Tensor(np.broadcast_to(weights, targets.shape).copy()))
    total = nd.scale(nd.sum_(per), -1.0)
    if batch_reduction == "mean" and targets.ndim == 3:
        total = nd.scale(total, 1.0 / targets.shape[0])
    return total


def cl_loss(student_cls: Tensor, q_hat: np.ndarray, tau_s: float, axis: str = "tokens", batch_reduction: str = "mean") -> Tensor:
    """``-sum q_hat * log p_hat`` with gradients through the student CLS only."""
    q_hat = np.asarray(q_hat, dtype=nd.DTYPE)
    if q_hat.shape != student_cls.shape:
        raise nd.DimensionError(f"cl_loss: shapes {student_cls.shape} and {q_hat.shape} differ")
    log_p = nd.log_softmax(nd.scale(student_cls, 1.0 / tau_s), axis=_cls_axis(axis))
    total = nd.scale(nd.sum_(nd.multiply(log_p, Tensor(q_hat))), -1.0)
    if batch_reduction == "mean" and q_hat.ndim == 3:
        total = nd.scale(total, 1.0 / q_hat.shape[0])
    return total


# ---------------------------------------------------------------------------
# trainer


@dataclass
class StepRecord:
    step: int
    lr: float
    lam: float
    mnm: float
    cl: float
    total: float
    teacher_std: float = float("nan")

    def row(self) -> list:
        return [self.step, self.lr, self.lam, self.mnm, self.cl, self.total]


LOSS_CSV_HEADER = ["step", "lr", "lambda", "mnm", "cl", "total"]


@dataclass
class StudentTeacherState:
    student: Network
    teacher: Network
    step: int = 0


@dataclass
class _Shard:
    x_u: np.ndarray
    targets: np.ndarray
    x_v: np.ndarray | None
    seed: int


class Distiller:
    """Owns student, teacher, center and optimizer for one pretraining run."""

    def __init__(
        self,
        mixer_config: MixerConfig,
        config: DistillConfig,
        u_pipeline: ViewPipeline | None = None,
        v_pipeline: ViewPipeline | None = None,
        workers: int = 1,
    ):
        self.mixer_config = mixer_config
        self.config = config
        self.u_pipeline = u_pipeline if u_pipeline is not None else default_u_pipeline()
        self.v_pipeline = v_pipeline if v_pipeline is not None else default_v_pipeline()
        self.workers = max(1, int(workers))
        rng = np.random.default_rng(config.seed)
        student = Network.create(mixer_config, config.num_cls, rng)
        self.state = StudentTeacherState(student, student.clone())
        self.center = CenterState(np.zeros((config.num_cls, mixer_config.channels)), config.beta)
        self.optimizer = AdamW(
            student.params.values(), lr=config.lr, betas=config.adam_betas, weight_decay=config.weight_decay
        )
        self.empty_mask_count = 0

    @property
    def student(self) -> Network:
        return self.state.student

    @property
    def teacher(self) -> Network:
        return self.state.teacher

    def _seed(self, *keys: int) -> int:
        ss = np.random.SeedSequence([self.config.seed & 0xFFFFFFFF, *keys])
        return int(ss.generate_state(1, np.uint64)[0] >> 1)

    def make_views(self, batch: Sequence[NucleotideSequence], step: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        lengths = {len(s) for s in batch}
        if len(lengths) != 1:
            raise DistillConfigError(f"batch sequences must share one length, got {sorted(lengths)}")
        xu, tg, xv = [], [], []
        for i, seq in enumerate(batch):
            u = self.u_pipeline(seq, self._seed(1, step, i))
            v = self.v_pipeline(seq, self._seed(2, step, i))
            if u.masked_positions.size == 0:
                self.empty_mask_count += 1
            targets = u.target_matrix()
            if not self.config.include_n_targets:
                targets[targets[:, _N_COLUMN] == 1.0] = 0.0
            xu.append(u.matrix)
            tg.append(targets)
            xv.append(v.matrix)
        return np.stack(xu), np.stack(tg), np.stack(xv)

    def batch_losses(
        self, tape: Tape, x_u: np.ndarray, targets: np.ndarray, x_v: np.ndarray | None,
        batch_total: int, training: bool, rng: np.random.Generator | None,
    ) -> tuple[Tensor, Tensor | None, np.ndarray | None]:
        """Student-side MNM and CL losses on one (sub)batch, normalized by ``batch_total``."""
        cfg = self.config
        U, P = self.student.forward(tape, x_u, training, rng)
        mnm = mnm_loss(self.student.mnm_log_probs(tape, U), targets, cfg.mnm_reduction, "sum")
        norm = 1.0 / batch_total if cfg.batch_reduction == "mean" else 1.0
        mnm = nd.scale(mnm, norm)
        if not cfg.contrastive:
            return mnm, None, None
        _, Qt = self.teacher.forward(Tape(record=False), x_v, training=False)
        Q = Qt.value
        center = self.center.xi if cfg.centering else np.zeros_like(self.center.xi)
        q_hat = teacher_cls_softmax(Q, center, cfg.tau_t, cfg.cl_softmax_axis)
        cl = nd.scale(cl_loss(P, q_hat, cfg.tau_s, cfg.cl_softmax_axis, "sum"), norm)
        return mnm, cl, Q

    def _run_shard(self, shard: _Shard, batch_total: int):
        tape = Tape()
        rng = np.random.default_rng(shard.seed)
        mnm, cl, Q = self.batch_losses(tape, shard.x_u, shard.targets, shard.x_v, batch_total, True, rng)
        loss = mnm if cl is None else total_loss(mnm, cl, self.config.alpha)
        grads = tape.backward(loss, accumulate=False)
        return float(mnm.value), (float(cl.value) if cl is not None else 0.0), float(loss.value), grads, Q

    def train_step(self, batch: Sequence[NucleotideSequence], step: int, total_steps: int) -> StepRecord:
        cfg = self.config
        lr, lam = cosine_schedules(step, total_steps, cfg)
        x_u, targets, x_v = self.make_views(batch, step)
        B = len(batch)
        bounds = np.array_split(np.arange(B), min(self.workers, B))
        shards = [
            _Shard(x_u[idx], targets[idx], x_v[idx] if cfg.contrastive else None, self._seed(3, step, k))
            for k, idx in enumerate(bounds)
        ]
        if len(shards) == 1:
            results = [self._run_shard(shards[0], B)]
        else:
            with ThreadPoolExecutor(len(shards)) as pool:
                results = list(pool.map(lambda s: self._run_shard(s, B), shards))

        self.optimizer.zero_grad()
        for *_, grads, _ in results:
            # blocks beyond the sequence length are never touched and have no entry
            for name, g in grads.items():
                self.student.params[name].grad += g
        mnm = sum(r[0] for r in results)
        cl = sum(r[1] for r in results)
        total = sum(r[2] for r in results)
        if not math.isfinite(total):
            raise FloatingPointError(f"non-finite loss at step {step}")
        self.optimizer.step(lr)
        teacher_std = float("nan")
        if cfg.contrastive:
            ema_update(self.teacher.params, self.student.params, lam)
            Q = np.concatenate([r[4] for r in results], axis=0)
            teacher_std = float(Q.std(axis=0).mean())
            if cfg.centering:
                self.center = update_center(self.center, Q)
        self.state.step += 1
        return StepRecord(step, lr, lam, mnm, cl, total, teacher_std)

    def fit(
        self,
        corpus: Sequence[NucleotideSequence],
        epochs: int | None = None,
        callback=None,
    ) -> list[StepRecord]:
        epochs = self.config.epochs if epochs is None else epochs
        bs = self.config.batch_size
        per_epoch = math.ceil(len(corpus) / bs) if corpus else 0
        total_steps = epochs * per_epoch
        history: list[StepRecord] = []
        step = 0
        for epoch in range(epochs):
            order = np.random.default_rng(self._seed(4, epoch)).permutation(len(corpus))
            for start in range(0, len(corpus), bs):
                batch = [corpus[i] for i in order[start : start + bs]]
                rec = self.train_step(batch, step, total_steps)
                history.append(rec)
                if callback is not None:
                    callback(epoch, rec)
                step += 1
        if self.empty_mask_count:
            log.warning("%d views had no masked positions (MNM term was zero)", self.empty_mask_count)
        return history

    # -- persistence ---------------------------------------------------------

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {f"student.{n}": p.value for n, p in self.student.params.items()}
        out.update({f"teacher.{n}": p.value for n, p in self.teacher.params.items()})
        out["center.xi"] = self.center.xi
        out["state.step"] = np.array([float(self.state.step)])
        return out

    def save(self, path: str | Path, extra_meta: dict | None = None) -> None:
        meta = {"mixer": self.mixer_config.to_dict(), "distill": self.config.to_dict(), "format": "findna"}
        meta.update(extra_meta or {})
        nd.save_checkpoint(path, self.state_tensors(), meta)


@dataclass
class Pretrained:
    """Networks restored from a checkpoint."""

    mixer_config: MixerConfig
    distill_config: DistillConfig
    student: Network
    teacher: Network
    center: np.ndarray
    step: int
    meta: dict = field(default_factory=dict)

    def network(self, which: str = "teacher") -> Network:
        if which not in ("teacher", "student"):
            raise ValueError("network must be teacher or student")
        return self.teacher if which == "teacher" else self.student


def load_pretrained(path: str | Path) -> Pretrained:
    tensors, meta = nd.load_checkpoint(path)
    if meta.get("format") != "findna":
        raise nd.CheckpointError(f"{path}: not a pretraining checkpoint")
    mcfg = MixerConfig(**meta["mixer"])
    dcfg = DistillConfig(**meta["distill"])
    nets = {}
    for role in ("student", "teacher"):
        prefix = f"{role}."
        params = {
            n[len(prefix):]: Parameter(n[len(prefix):], v) for n, v in tensors.items() if n.startswith(prefix)
        }
        try:
            nets[role] = Network(mcfg, params, dcfg.num_cls)
        except Exception as exc:
            raise nd.CheckpointError(f"{path}: {role} parameters do not match the stored config ({exc})") from None
    return Pretrained(
        mcfg, dcfg, nets["student"], nets["teacher"], tensors["center.xi"], int(tensors["state.step"][0]), meta
    )


def micro_configs(length: int = 16) -> tuple[MixerConfig, DistillConfig]:
    """Tiny model used for gradient checks: K=2, I=8, H=16, one layer, no dropout."""
    mcfg = MixerConfig(channels=8, hidden=16, num_layers=1, max_length=length + 2, dropout_rate=0.0)
    return mcfg, DistillConfig(num_cls=2, batch_size=2, seed=0)


def gradient_check(
    mixer_config: MixerConfig,
    config: DistillConfig,
    length: int = 16,
    batch: int = 2,
    tolerance: float = 1e-4,
    h: float = 1e-4,
) -> nd.GradCheckReport:
    """Finite-difference check of the full combined loss w.r.t. every student parameter.

    The teacher is perturbed away from the student and the center is set to a
    nonzero value first, so every term of the loss is exercised.
    """
    distiller = Distiller(mixer_config, config)
    rng = np.random.default_rng(config.seed + 1)
    for p in distiller.teacher.params.values():
        p.value += rng.normal(0.0, 0.05, p.value.shape)
    distiller.center = CenterState(rng.normal(0.0, 0.1, distiller.center.xi.shape), config.beta)
    seqs = [
        NucleotideSequence(f"g{i}", "".join(rng.choice(list("ACGT"), length))) for i in range(batch)
    ]
    x_u, targets, x_v = distiller.make_views(seqs, 0)
    if not targets.any():
        raise DistillConfigError("gradient check batch has no masked positions")

    def forward(tape: Tape) -> Tensor:
        mnm, cl, _ = distiller.batch_losses(tape, x_u, targets, x_v, batch, False, None)
        return mnm if cl is None else total_loss(mnm, cl, config.alpha)

    return nd.grad_check(forward, distiller.student.params.values(), tolerance=tolerance, h=h)
