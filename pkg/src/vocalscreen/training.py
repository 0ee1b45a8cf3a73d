"""Focal loss, rectified AdaBelief, and the subject-level epoch loop.

The loss gradient is taken with respect to the pre-sigmoid logit in
closed form, so no log(sigmoid) cancellation ever occurs.  Training
re-draws each speaker's fragment bag every epoch from a seeded stream,
tracks validation PR-AUC, and keeps the best-validation parameters.
"""

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .corpus import NoFragmentsError
from .evaluation import ScoredSubject, pr_auc
from .model import Checkpoint, ScreeningModel, predict_subject
from .neuralkit import sigmoid

PROB_CLAMP = 1e-7


class TrainingError(Exception):
    pass


class NonFiniteGradientError(TrainingError):
    """A gradient turned NaN/Inf; the step is aborted."""

    def __init__(self, param_name: str):
        self.param_name = param_name
        super().__init__(f"non-finite gradient for parameter {param_name!r}")


@dataclass(frozen=True)
class TrainConfig:
    seed: int
    lr: float = 1e-4
    adabelief_eps: float = 1e-7
    rectify: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    batch_size: int = 8
    max_epochs: int = 50
    early_stop_patience: int = 10
    val_repeats: int = 3

    def __post_init__(self):
        # lr = 0 stays constructible so the optimizer's no-op identity
        # is testable; train() itself rejects it
        if self.lr < 0:
            raise ValueError("lr must be nonnegative")
        if not 0.0 < self.focal_alpha < 1.0:
            raise ValueError("focal_alpha must be in (0,1)")
        if self.focal_gamma < 0:
            raise ValueError("focal_gamma must be >= 0")
        if min(self.batch_size, self.max_epochs, self.val_repeats) < 1:
            raise ValueError("batch_size, max_epochs, val_repeats must be >= 1")


def focal_loss(probs, labels, alpha: float = 0.25, gamma: float = 2.0):
    """Per-example focal cross-entropy and its gradient w.r.t. the logit.

    probs are sigmoid outputs (clamped into [1e-7, 1-1e-7] before any
    log); labels are 0/1.  For y=1 the loss is -alpha*(1-p)^g*log(p),
    for y=0 it is -(1-alpha)*p^g*log(1-p).  Returns (loss, dlogit),
    both shaped like the inputs.
    """
    p = np.clip(np.asarray(probs, dtype=np.float64), PROB_CLAMP,
                1.0 - PROB_CLAMP)
    y = np.asarray(labels)
    logp = np.log(p)
    log1mp = np.log1p(-p)
    loss_pos = -alpha * (1.0 - p) ** gamma * logp
    loss_neg = -(1.0 - alpha) * p ** gamma * log1mp
    # d/dlogit via dp/dlogit = p(1-p), collapsed analytically:
    grad_pos = alpha * (1.0 - p) ** gamma * (gamma * p * logp - (1.0 - p))
    grad_neg = (1.0 - alpha) * p ** gamma * (p - gamma * (1.0 - p) * log1mp)
    loss = np.where(y == 1, loss_pos, loss_neg)
    grad = np.where(y == 1, grad_pos, grad_neg)
    return loss, grad


class AdaBelief:
    """Rectified AdaBelief over a flat name -> array parameter dict.

    Tracks the first moment m and the belief variance s of (g - m);
    while the rectification degrees-of-freedom term is <= 4 the update
    is a bias-corrected momentum step, afterwards the adaptive step is
    scaled by the variance-rectification factor.
    """

    def __init__(self, params: dict, config: TrainConfig):
        self.params = params
        self.cfg = config
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.s = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def state_dict(self) -> dict:
        return {"step": self.t, "m": self.m, "s": self.s}

    def load_state_dict(self, state: dict) -> None:
        self.t = int(state["step"])
        for k in self.params:
            self.m[k][:] = state["m"][k]
            self.s[k][:] = state["s"][k]

    def step(self, grads: dict) -> None:
        for name in self.params:
            if not np.all(np.isfinite(grads[name])):
                raise NonFiniteGradientError(name)
        cfg = self.cfg
        self.t += 1
        t = self.t
        b1, b2 = cfg.beta1, cfg.beta2
        bc1 = 1.0 - b1 ** t
        bc2 = 1.0 - b2 ** t
        rho_inf = 2.0 / (1.0 - b2) - 1.0
        rho_t = rho_inf - 2.0 * t * b2 ** t / bc2
        if cfg.rectify and rho_t > 4.0:
            r_t = math.sqrt(((rho_t - 4.0) * (rho_t - 2.0) * rho_inf)
                            / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t))
        else:
            r_t = None
        for name, p in self.params.items():
            g = grads[name].astype(p.dtype, copy=False)
            m = self.m[name]
            s = self.s[name]
            m += (1.0 - b1) * (g - m)
            diff = g - m
            s += (1.0 - b2) * (diff * diff - s) + cfg.adabelief_eps
            mhat = m / bc1
            if cfg.rectify and r_t is None:
                p -= cfg.lr * mhat  # low-variance regime: momentum step
                continue
            shat = s / bc2
            scale = r_t if r_t is not None else 1.0
            p -= cfg.lr * scale * mhat / (np.sqrt(shat) + cfg.adabelief_eps)


@dataclass
class TrainHistory:
    """Per-epoch log with monotone best-so-far bookkeeping."""

    rows: list = field(default_factory=list)  # (epoch, loss, val, best)

    def append(self, epoch: int, train_loss: float, val_pr_auc: float) -> None:
        best = val_pr_auc if not self.rows else max(self.rows[-1][3], val_pr_auc)
        self.rows.append((epoch, float(train_loss), float(val_pr_auc), best))

    def best_epoch(self) -> int:
        vals = [r[2] for r in self.rows]
        return self.rows[int(np.argmax(vals))][0]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_pr_auc", "best_so_far"])
            for epoch, loss, val, best in self.rows:
                w.writerow([epoch, repr(loss), repr(val), repr(best)])

    @staticmethod
    def from_csv(path) -> "TrainHistory":
        hist = TrainHistory()
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            for row in reader:
                hist.rows.append((int(row["epoch"]), float(row["train_loss"]),
                                  float(row["val_pr_auc"]),
                                  float(row["best_so_far"])))
        return hist


def _epoch_rng(seed: int, fold: int, epoch: int, lane: int):
    return np.random.default_rng([seed, fold, epoch, lane])


def train_step(model: ScreeningModel, optimizer: AdaBelief,
               batch: np.ndarray, labels: np.ndarray,
               config: TrainConfig, rng) -> float:
    """One optimizer update on a (B, N, n_mels, width) stack.

    Returns the summed per-example loss (caller averages per epoch).
    """
    logit, cache = model.forward(batch, "train", rng)
    probs = sigmoid(logit[:, 0].astype(np.float64))
    loss, dlogit = focal_loss(probs, labels, config.focal_alpha,
                              config.focal_gamma)
    B = batch.shape[0]
    dlogit = (dlogit / B).astype(np.float32)[:, None]
    _, grads = model.backward(dlogit, cache)
    optimizer.step(grads)
    return float(loss.sum())


def validation_scores(model, index, records, repeats, rng):
    """predict_subject over records -> ScoredSubject list."""
    out = []
    for rec in records:
        score = predict_subject(model, index, rec, repeats=repeats, rng=rng)
        out.append(ScoredSubject(rec.speaker_id, score, rec.label, rec.phq8))
    return out


def train(model: ScreeningModel, index, fold_plan, fold_index: int,
          config: TrainConfig):
    """Fit one fold; returns (Checkpoint, TrainHistory).

    Every epoch draws a fresh N-fragment bag per training speaker from
    a stream seeded by (seed, fold, epoch), shuffles speakers, and
    updates in batches of ``batch_size`` subjects.  Validation PR-AUC
    on the held-out fold drives best-checkpoint retention and early
    stopping.
    """
    if not 0 <= fold_index < fold_plan.k:
        raise ValueError(f"fold_index {fold_index} out of range")
    if config.lr == 0:
        raise ValueError("training requires a positive lr")
    train_recs, val_recs = fold_plan.split(index.records, fold_index)
    train_recs = [r for r in train_recs if index.pool_size(r) > 0]
    usable_val = [r for r in val_recs if index.pool_size(r) > 0]
    if not train_recs:
        raise NoFragmentsError("no training speakers with usable fragments")
    n_frag = model.config.n_fragments

    optimizer = AdaBelief(model.p, config)
    history = TrainHistory()
    best_val = -1.0
    best_params = {k: v.copy() for k, v in model.p.items()}
    best_epoch = 0
    stale = 0

    for epoch in range(1, config.max_epochs + 1):
        draw_rng = _epoch_rng(config.seed, fold_index, epoch, 0)
        order = draw_rng.permutation(len(train_recs))
        bags = []
        labels = []
        for i in order:
            rec = train_recs[int(i)]
            bags.append(index.sample_fragments(rec, n_frag, draw_rng).values)
            labels.append(rec.label)
        total_loss = 0.0
        drop_rng = _epoch_rng(config.seed, fold_index, epoch, 1)
        for start in range(0, len(bags), config.batch_size):
            stack = np.stack(bags[start:start + config.batch_size])
            y = np.asarray(labels[start:start + config.batch_size])
            total_loss += train_step(model, optimizer, stack, y, config,
                                     drop_rng)
        train_loss = total_loss / len(bags)

        val_rng = _epoch_rng(config.seed, fold_index, epoch, 2)
        scored = validation_scores(model, index, usable_val,
                                   config.val_repeats, val_rng)
        val = pr_auc(scored)
        history.append(epoch, train_loss, val)

        if val > best_val:
            best_val = val
            best_epoch = epoch
            for k, v in model.p.items():
                best_params[k][:] = v
            stale = 0
        else:
            stale += 1
            if stale >= config.early_stop_patience:
                break

    for k, v in model.p.items():
        v[:] = best_params[k]
    metadata = {
        "seed": config.seed,
        "fold": fold_index,
        "epoch": best_epoch,
        "val_pr_auc": best_val,
        "corpus": index.fingerprint(),
    }
    ckpt = Checkpoint(config=model.config, model=model, metadata=metadata,
                      trainer_state=optimizer.state_dict())
    return ckpt, history
