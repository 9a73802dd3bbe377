"""Target-side training objective and the per-round adaptation loop.

Loss = CE(labeled) + beta1 * anchor-entropy(unlabeled vs. vault) + beta2 * entropy(unlabeled)

The unlabeled path only ever sees features and softmax outputs; no hard
labels are built for unlabeled samples.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .model import MlpModel, OptimizerState, lr_at, sgd_step
from .numcore import ShapeError, Tensor
from .pool import PoolStateError, TargetPool

log = logging.getLogger(__name__)


class VaultStateError(RuntimeError):
    pass


@dataclass
class LossWeights:
    beta1: float = 10.0
    beta2: float = 0.9

    def __post_init__(self):
        if self.beta1 < 0 or self.beta2 < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class AdaptConfig:
    epochs_per_round: int = 40
    batch_size: int = 64
    unlabeled_batch_size: int | None = None
    mixup_enabled: bool = False
    mixup_beta: float = 0.3
    vault_cadence: str = "epoch"
    anchor_source: str = "vault"
    tau: float = 1.0
    gamma: float = 0.9

    def __post_init__(self):
        if self.epochs_per_round < 1:
            raise ValueError("epochs_per_round must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.vault_cadence not in ("epoch", "step"):
            raise ValueError("vault_cadence must be 'epoch' or 'step'")
        if self.anchor_source not in ("vault", "current"):
            raise ValueError("anchor_source must be 'vault' or 'current'")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")


# ---------------------------------------------------------------------------
# losses


def _row_entropy(p: Tensor) -> Tensor:
    return nc.scale(nc.sum_rows(nc.mul(p, nc.log_clamped(p))), -1.0)


def ce_loss(probs: Tensor, q) -> Tensor:
    """Mean of -q^T log p over rows; q may be one-hot or a soft (mixup) target."""
    q = q if isinstance(q, Tensor) else Tensor(q)
    if probs.shape != q.shape:
        raise ShapeError(f"probs {probs.shape} and targets {q.shape} differ")
    return nc.scale(nc.mean_all(nc.sum_rows(nc.mul(q, nc.log_clamped(probs)))), -1.0)


def entropy_loss(probs_u: Tensor) -> Tensor:
    return nc.mean_all(_row_entropy(probs_u))


def anchor_assignment(features_u: Tensor, anchor_feats, tau: float = 1.0) -> Tensor:
    """Row-softmax of cosine similarity to each anchor, divided by ``tau``."""
    anchors = anchor_feats if isinstance(anchor_feats, Tensor) else Tensor(anchor_feats)
    if anchors.shape[0] == 0:
        raise VaultStateError("no anchors before first query round")
    if anchors.shape[1] != features_u.shape[1]:
        raise ShapeError(f"feature width {features_u.shape[1]} != anchor width {anchors.shape[1]}")
    return nc.softmax_rows(nc.scale(nc.cosine_sim_matrix(features_u, anchors), 1.0 / tau))


def vpa_loss(features_u: Tensor, vault: "PersistenceVault", tau: float = 1.0) -> Tensor:
    if len(vault) == 0:
        raise VaultStateError("persistence vault is empty")
    # vault entries enter as constants, so no gradient reaches them
    return entropy_loss(anchor_assignment(features_u, Tensor(vault.matrix()), tau))


def total_loss(ce, vpa, ent, weights: LossWeights):
    """ce + beta1 * vpa + beta2 * ent, for Tensors or plain floats."""
    if isinstance(ce, Tensor):
        out = ce
        if weights.beta1:
            out = nc.add(out, nc.scale(vpa, weights.beta1))
        if weights.beta2:
            out = nc.add(out, nc.scale(ent, weights.beta2))
        return out
    return ce + weights.beta1 * vpa + weights.beta2 * ent


# ---------------------------------------------------------------------------
# persistence vault


class PersistenceVault:
    """EMA feature memory for the labeled anchors.

    ``update`` applies f~ <- gamma * f + (1 - gamma) * f~ entry-wise, where f
    is the current extractor output for that anchor.
    """

    def __init__(self, gamma: float = 0.9):
        if not 0.0 <= gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        self.gamma = gamma
        self.entries: dict[int, np.ndarray] = {}

    def __len__(self):
        return len(self.entries)

    def __contains__(self, i):
        return int(i) in self.entries

    @property
    def ids(self) -> np.ndarray:
        return np.array(sorted(self.entries), dtype=np.int64)

    def matrix(self) -> np.ndarray:
        """Entries stacked in ascending id order."""
        if not self.entries:
            return np.zeros((0, 0))
        return np.stack([self.entries[i] for i in sorted(self.entries)])

    def admit(self, new_ids, feats) -> "PersistenceVault":
        new_ids = [int(i) for i in new_ids]
        feats = np.asarray(feats, dtype=np.float64)
        if feats.shape[0] != len(new_ids):
            raise ShapeError("one feature row per admitted id is required")
        if len(set(new_ids)) != len(new_ids):
            raise VaultStateError("duplicate ids in one admission")
        for i in new_ids:
            if i in self.entries:
                raise VaultStateError(f"anchor {i} is already in the vault")
        for i, f in zip(new_ids, feats):
            self.entries[i] = f.copy()
        return self

    def update(self, ids, current_feats) -> "PersistenceVault":
        ids = [int(i) for i in ids]
        if sorted(ids) != sorted(self.entries) or len(ids) != len(self.entries):
            raise VaultStateError("update ids must equal the vault's id set")
        g = self.gamma
        for i, f in zip(ids, np.asarray(current_feats, dtype=np.float64)):
            self.entries[i] = g * f + (1.0 - g) * self.entries[i]
        return self


def vault_update(vault: PersistenceVault, ids, current_anchor_feats) -> PersistenceVault:
    return vault.update(ids, current_anchor_feats)


def vault_admit(vault: PersistenceVault, new_ids, features_at_selection) -> PersistenceVault:
    return vault.admit(new_ids, features_at_selection)


def mixup_batch(x, q, beta_param: float, rng: np.random.Generator, lam: float | None = None):
    """Convex mix of a batch with a random permutation of itself.

    ``lam`` forces the mixing weight (otherwise drawn from Beta(beta, beta)).
    Batches of one row pass through unchanged.
    """
    x = np.asarray(x, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if x.shape[0] < 2:
        return x, q
    if lam is None:
        lam = rng.beta(beta_param, beta_param)
    perm = rng.permutation(x.shape[0])
    return lam * x + (1 - lam) * x[perm], lam * q + (1 - lam) * q[perm]


def one_hot(labels, n_classes: int) -> np.ndarray:
    out = np.zeros((len(labels), n_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


# ---------------------------------------------------------------------------
# training loop


class LrSchedule:
    """Step counter feeding :func:`lr_at`; progress is step / total_steps."""

    def __init__(self, eta0: float, total_steps: int):
        self.eta0 = eta0
        self.total_steps = max(int(total_steps), 1)
        self.step = 0

    def next_lr(self) -> float:
        p = min(self.step / self.total_steps, 1.0)
        self.step += 1
        return lr_at(self.eta0, p)


def steps_per_round(n_labeled: int, config: AdaptConfig) -> int:
    return config.epochs_per_round * math.ceil(n_labeled / config.batch_size)


@dataclass
class RoundStats:
    trace: list = field(default_factory=list)  # (step, lr, ce, vpa, ent, total)

    def last(self) -> dict:
        step, lr, ce, vpa, ent, tot = self.trace[-1]
        return {"step": step, "lr": lr, "ce": ce, "vpa": vpa, "ent": ent, "total": tot}

    def epoch_means(self, steps_per_epoch: int) -> list[float]:
        tot = [row[5] for row in self.trace]
        return [float(np.mean(tot[k:k + steps_per_epoch])) for k in range(0, len(tot), steps_per_epoch)]


def _check_bounds(ce, vpa, ent, n_anchors, n_classes):
    tol = 1e-9
    if ce < -tol:
        raise AssertionError(f"ce loss negative: {ce}")
    if not -tol <= ent <= math.log(n_classes) + tol:
        raise AssertionError(f"entropy loss {ent} outside [0, log C]")
    if n_anchors and not -tol <= vpa <= math.log(n_anchors) + tol:
        raise AssertionError(f"vpa loss {vpa} outside [0, log n_l]")


def adapt_round(model: MlpModel, pool: TargetPool, vault: PersistenceVault,
                config: AdaptConfig, weights: LossWeights, eta0: float = 0.01,
                *, optimizer: OptimizerState | None = None,
                schedule: LrSchedule | None = None,
                rng: np.random.Generator | None = None):
    """Train on the current labeled/unlabeled split for ``epochs_per_round`` epochs.

    The labeled set defines the epoch; each labeled batch is paired with a
    random unlabeled batch. Returns ``(model, vault, RoundStats)``.
    """
    lab_ids = pool.labeled_ids
    if lab_ids.size == 0:
        raise PoolStateError("adaptation needs at least one labeled sample")
    if config.anchor_source == "vault" and sorted(vault.entries) != list(lab_ids):
        raise VaultStateError("vault ids must equal the labeled id set")
    rng = np.random.default_rng(0) if rng is None else rng
    optimizer = OptimizerState() if optimizer is None else optimizer
    if schedule is None:
        schedule = LrSchedule(eta0, steps_per_round(lab_ids.size, config))

    C = model.n_classes
    x_lab = pool.x(lab_ids)
    q_lab = one_hot(pool.y(lab_ids), C)
    unl_ids = pool.unlabeled_ids
    x_unl = pool.x(unl_ids)
    use_unlabeled = (weights.beta1 > 0 or weights.beta2 > 0) and unl_ids.size > 0
    ub = config.unlabeled_batch_size or config.batch_size
    stats = RoundStats()

    def refresh_vault():
        if weights.beta1 > 0 and config.anchor_source == "vault":
            vault.update(lab_ids, model.features(x_lab))

    for _ in range(config.epochs_per_round):
        order = rng.permutation(lab_ids.size)
        unl_order = rng.permutation(unl_ids.size) if use_unlabeled else None
        cursor = 0
        for start in range(0, lab_ids.size, config.batch_size):
            idx = order[start:start + config.batch_size]
            xb, qb = x_lab[idx], q_lab[idx]
            if config.mixup_enabled:
                xb, qb = mixup_batch(xb, qb, config.mixup_beta, rng)
            model.zero_grad()
            ce = ce_loss(model.probs_t(xb), qb)
            vpa_v = ent_v = 0.0
            loss = ce
            n_anchor = 0
            if use_unlabeled:
                if cursor + ub > unl_ids.size:
                    unl_order = rng.permutation(unl_ids.size)
                    cursor = 0
                ub_idx = unl_order[cursor:cursor + ub]
                cursor += ub
                f_u = model.features_t(x_unl[ub_idx])
                p_u = nc.softmax_rows(model.logits_from_features(f_u))
                ent = entropy_loss(p_u)
                if weights.beta1 > 0:
                    anchors = vault.matrix() if config.anchor_source == "vault" else model.features(x_lab)
                    n_anchor = anchors.shape[0]
                    vpa = entropy_loss(anchor_assignment(f_u, Tensor(anchors), config.tau))
                    vpa_v = vpa.item()
                else:
                    vpa = None
                ent_v = ent.item()
                loss = total_loss(ce, vpa, ent, weights)
            _check_bounds(ce.item(), vpa_v, ent_v, n_anchor, C)
            nc.backward(loss)
            lr = schedule.next_lr()
            sgd_step(model, optimizer, lr)
            stats.trace.append((schedule.step - 1, lr, ce.item(), vpa_v, ent_v, loss.item()))
            if config.vault_cadence == "step":
                refresh_vault()
        if config.vault_cadence == "epoch":
            refresh_vault()
    log.debug("round done: %d steps, last total %.4f", len(stats.trace), stats.trace[-1][5])
    return model, vault, stats
