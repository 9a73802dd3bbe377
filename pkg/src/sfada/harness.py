"""End-to-end experiment runner: source pretraining, query/adapt rounds, metrics."""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numcore as nc
from .adaptation import (AdaptConfig, LossWeights, LrSchedule, PersistenceVault,
                         adapt_round, ce_loss, one_hot, steps_per_round)
from .domains import (CsvSchema, DomainSpec, LabeledSet, gen_gaussian_ring,
                      gen_two_moons_shift, load_csv)
from .model import (MlpModel, OptimizerState, load_checkpoint, lr_at,
                    save_checkpoint, sgd_step)
from .pool import TargetPool
from .sampling import (STRATEGIES, CasConfig, HypothesisLog, baseline_select,
                       cas_scores, select_queries)

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class SplitError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# configuration


@dataclass
class DatasetConfig:
    kind: str = "gaussian_ring"
    n_classes: int = 8
    n_source: int = 2000
    n_target: int = 2000
    rotation: float = 0.0
    noise_scale_source: float = 0.15
    noise_scale_target: float = 0.15
    class_priors_target: list | None = None
    shift: list = field(default_factory=lambda: [0.0, 0.0])
    source_csv: str | None = None
    target_csv: str | None = None
    csv_header: bool = False


@dataclass
class ModelConfig:
    hidden: list = field(default_factory=lambda: [32])
    bottleneck: int = 16
    activation: str = "tanh"
    freeze_classifier: bool = True


@dataclass
class PretrainConfig:
    epochs: int = 40
    batch_size: int = 64
    eta0: float = 0.05
    val_fraction: float = 0.1
    max_split_attempts: int = 20


@dataclass
class CasSettings:
    alpha: float = 0.03
    lam: float = 0.1
    kappa: int = 100


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    cas: CasSettings = field(default_factory=CasSettings)
    loss: LossWeights = field(default_factory=LossWeights)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    strategy: str = "cas"
    budget: float = 0.05
    rounds: int = 10
    eta0: float = 0.01
    seed: int = 0
    test_fraction: float = 0.2
    eval_on_pool: bool = False
    lr_reset_per_round: bool = False
    keep_checkpoints: bool = False
    export_embeddings: bool = False
    source_checkpoint: str | None = None

    def validate(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1")
        if self.budget <= 0:
            raise ConfigError("budget must be positive")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError("test_fraction must lie in (0, 1)")
        if self.dataset.kind not in ("gaussian_ring", "two_moons", "csv"):
            raise ConfigError(f"unknown dataset kind {self.dataset.kind!r}")
        if self.dataset.kind == "csv" and not (self.dataset.source_csv and self.dataset.target_csv):
            raise ConfigError("csv datasets need source_csv and target_csv")

    def cas_config(self, b: int = 1) -> CasConfig:
        return CasConfig(alpha=self.cas.alpha, lam=self.cas.lam, kappa=self.cas.kappa, b=b)


_SECTIONS = {
    "dataset": DatasetConfig,
    "model": ModelConfig,
    "pretrain": PretrainConfig,
    "cas": CasSettings,
    "loss": LossWeights,
    "adapt": AdaptConfig,
}


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def config_from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    data = dict(data)
    sections = {}
    for key, cls in _SECTIONS.items():
        if key in data:
            sections[key] = _build(cls, data.pop(key), key)
    cfg = _build(ExperimentConfig, data, "config")
    for key, value in sections.items():
        setattr(cfg, key, value)
    cfg.validate()
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return config_from_dict(data)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return dataclasses.asdict(cfg)


def benchmark_config(seed: int = 0, strategy: str = "cas", **overrides) -> ExperimentConfig:
    """The desk-scale ring benchmark: 8 classes, 35 degree rotation, 10:1 prior skew,
    5% budget over 10 rounds."""
    from .domains import skewed_priors

    cfg = ExperimentConfig(seed=seed, strategy=strategy, budget=0.05, rounds=10)
    cfg.dataset = DatasetConfig(kind="gaussian_ring", n_classes=8, n_source=2000, n_target=2000,
                                rotation=math.radians(35.0),
                                class_priors_target=skewed_priors(8, 10.0))
    for key, value in overrides.items():
        target = cfg
        *path, last = key.split(".")
        for part in path:
            target = getattr(target, part)
        if not hasattr(target, last):
            raise ConfigError(f"unknown override {key!r}")
        setattr(target, last, value)
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# data


def make_domains(cfg: ExperimentConfig) -> tuple[LabeledSet, LabeledSet]:
    d = cfg.dataset
    if d.kind == "csv":
        schema = CsvSchema(n_classes=d.n_classes, has_header=d.csv_header)
        return load_csv(d.source_csv, schema), load_csv(d.target_csv, schema)
    spec = DomainSpec(
        n_classes=d.n_classes, n_source=d.n_source, n_target=d.n_target,
        rotation=d.rotation, noise_scale_source=d.noise_scale_source,
        noise_scale_target=d.noise_scale_target,
        class_priors_target=d.class_priors_target, shift=tuple(d.shift), seed=cfg.seed,
    )
    gen = gen_gaussian_ring if d.kind == "gaussian_ring" else gen_two_moons_shift
    try:
        return gen(spec)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def split_target(target: LabeledSet, test_fraction: float, seed: int,
                 eval_on_pool: bool = False) -> tuple[LabeledSet, LabeledSet]:
    """Seeded pool/test split; with ``eval_on_pool`` both are the full target."""
    if eval_on_pool:
        return target, target
    rng = np.random.default_rng([seed, 1])
    perm = rng.permutation(len(target))
    n_test = int(round(test_fraction * len(target)))
    test_idx = np.sort(perm[:n_test])
    pool_idx = np.sort(perm[n_test:])
    return target.subset(pool_idx), target.subset(test_idx)


def resolve_budget(budget: float, pool_size: int) -> int:
    """Integer budgets pass through; fractions in (0, 1) round half up."""
    if budget < 1:
        return int(math.floor(budget * pool_size + 0.5))
    if budget != int(budget):
        raise ConfigError("budgets >= 1 must be whole counts")
    return int(budget)


def budget_schedule(B: int, R: int) -> list[int]:
    """Per-round query counts; the first ``B mod R`` rounds get one extra."""
    if R < 1 or B < R:
        raise ValueError(f"need B >= R >= 1, got B={B}, R={R}")
    base, extra = divmod(B, R)
    return [base + 1 if k < extra else base for k in range(R)]


# ---------------------------------------------------------------------------
# source side


def evaluate(model: MlpModel, test: LabeledSet) -> tuple[float, np.ndarray]:
    """Class-averaged accuracy and per-class accuracy (nan for absent classes)."""
    if len(test) == 0:
        raise ValueError("empty evaluation set")
    return evaluate_predictions(model.predict(test.features), test.labels, model.n_classes)


def evaluate_predictions(pred, labels, n_classes: int) -> tuple[float, np.ndarray]:
    pred = np.asarray(pred)
    labels = np.asarray(labels)
    counts = np.bincount(labels, minlength=n_classes)
    correct = np.bincount(labels[pred == labels], minlength=n_classes)
    per_class = np.full(n_classes, np.nan)
    present = counts > 0
    per_class[present] = correct[present] / counts[present]
    return float(per_class[present].mean()), per_class


def pretrain_source(source: LabeledSet, cfg: ExperimentConfig) -> MlpModel:
    """CE + SGD on a 90/10 seeded split; returns the best-validation snapshot."""
    if len(source) == 0:
        raise ValueError("empty source set")
    C = source.n_classes
    pc = cfg.pretrain
    rng = np.random.default_rng([cfg.seed, 2])
    n_val = max(1, int(round(pc.val_fraction * len(source))))
    for _ in range(pc.max_split_attempts):
        perm = rng.permutation(len(source))
        val_idx, train_idx = perm[:n_val], perm[n_val:]
        if np.all(np.bincount(source.labels[train_idx], minlength=C) > 0):
            break
    else:
        raise SplitError("could not draw a training split containing every class")

    mc = cfg.model
    model = MlpModel(source.input_dim, C, hidden=mc.hidden, bottleneck=mc.bottleneck,
                     activation=mc.activation, seed=cfg.seed)
    x_tr, y_tr = source.features[train_idx], source.labels[train_idx]
    q_tr = one_hot(y_tr, C)
    val = source.subset(np.sort(val_idx))
    opt = OptimizerState()
    steps_per_epoch = math.ceil(len(train_idx) / pc.batch_size)
    total = pc.epochs * steps_per_epoch
    best_acc, best_flat = -1.0, model.get_flat()
    step = 0
    for _ in range(pc.epochs):
        order = rng.permutation(len(train_idx))
        for start in range(0, len(order), pc.batch_size):
            idx = order[start:start + pc.batch_size]
            model.zero_grad()
            loss = ce_loss(model.probs_t(x_tr[idx]), q_tr[idx])
            nc.backward(loss)
            sgd_step(model, opt, lr_at(pc.eta0, min(step / total, 1.0)), params=model.parameters())
            step += 1
        acc = float(np.mean(model.predict(val.features) == val.labels))
        if acc > best_acc:
            best_acc, best_flat = acc, model.get_flat()
    model.set_flat(best_flat)
    model.val_accuracy = best_acc
    return model


# ---------------------------------------------------------------------------
# experiment


@dataclass
class RoundMetrics:
    round: int
    mean_acc: float
    per_class_acc: np.ndarray
    labeled_count: int
    duration: float


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    metrics: list[RoundMetrics]
    selections: list[dict]
    losses: list[tuple]
    source_acc: float
    model: MlpModel
    pool: TargetPool
    vault: PersistenceVault
    prob_snapshots: list[dict] = field(default_factory=list)
    checkpoints: list[MlpModel] = field(default_factory=list)

    @property
    def final_acc(self) -> float:
        return self.metrics[-1].mean_acc


def score_pool(model, pool, strategy, cfg, b, round_idx, prev_cache, rng_seed):
    """Return (selected ids, per-id diagnostic dict) for one query round."""
    unl = pool.unlabeled_ids
    x_unl = pool.x(unl)
    probs = model.probs(x_unl)
    prev = None
    if round_idx > 0:
        prev = np.stack([prev_cache[int(i)] for i in unl])
    hyp = HypothesisLog(round_idx, unl, probs, prev)
    cas_cfg = cfg.cas_config(b)
    scores = cas_scores(hyp, cas_cfg)
    if strategy == "cas":
        chosen = select_queries(scores.ids, scores.u, b, pool.labels)
    else:
        feats = labeled_feats = None
        if strategy in ("kcenter_greedy", "kmeans"):
            feats = model.features(x_unl)
            if len(pool.labels):
                labeled_feats = model.features(pool.x(pool.labeled_ids))
        chosen = baseline_select(strategy, unl, b, probs=probs, features=feats,
                                 labeled_features=labeled_feats, seed=rng_seed)
    diag = {}
    ct = scores.u_ct_of_ya
    for k, i in enumerate(scores.ids):
        diag[int(i)] = (scores.u_cm[k], ct[k], scores.u[k], int(scores.y_a[k]))
    return chosen, diag, {int(i): probs[k] for k, i in enumerate(unl)}


def run_experiment(cfg: ExperimentConfig, out_dir=None,
                   source_model: MlpModel | None = None) -> ExperimentResult:
    """Pretrain (or reuse) a source model, then alternate queries and adaptation."""
    cfg.validate()
    source, target = make_domains(cfg)
    if source.input_dim != target.input_dim:
        raise ConfigError("source and target feature widths differ")
    pool_set, test_set = split_target(target, cfg.test_fraction, cfg.seed, cfg.eval_on_pool)

    if source_model is not None:
        model = source_model.copy()
    elif cfg.source_checkpoint:
        model = load_checkpoint(cfg.source_checkpoint, n_classes=source.n_classes,
                                input_dim=source.input_dim)
    else:
        model = pretrain_source(source, cfg)

    result = query_adapt(model, pool_set, cfg, test_set)
    if out_dir is not None:
        write_artifacts(result, out_dir, sets={"pool": pool_set, "test": test_set}
                        if cfg.export_embeddings else None)
    return result


def query_adapt(model: MlpModel, pool_set: LabeledSet, cfg: ExperimentConfig,
                test_set: LabeledSet | None = None) -> ExperimentResult:
    """The R-round loop on a target pool whose labels act as the oracle.

    ``model`` is adapted in place. Without ``test_set`` the per-round
    accuracies are nan.
    """
    B = resolve_budget(cfg.budget, len(pool_set))
    if B > len(pool_set):
        raise ConfigError(f"budget {B} exceeds pool size {len(pool_set)}")
    if B < cfg.rounds:
        raise ConfigError(f"budget {B} is smaller than rounds {cfg.rounds}")
    schedule_b = budget_schedule(B, cfg.rounds)
    model.freeze_classifier = cfg.model.freeze_classifier
    C = model.n_classes

    def score_test():
        if test_set is None:
            return math.nan, np.full(C, np.nan)
        return evaluate(model, test_set)

    source_acc, _ = score_test()
    pool = TargetPool(pool_set.ids, pool_set.features)
    oracle = {int(i): int(y) for i, y in zip(pool_set.ids, pool_set.labels)}
    vault = PersistenceVault(cfg.adapt.gamma)
    opt = OptimizerState()
    rng = np.random.default_rng([cfg.seed, 3])

    if cfg.lr_reset_per_round:
        lr_sched = None
    else:
        total = sum(steps_per_round(int(n), cfg.adapt) for n in np.cumsum(schedule_b))
        lr_sched = LrSchedule(cfg.eta0, total)

    metrics, selections, losses = [], [], []
    snapshots, checkpoints = [], []
    prev_cache: dict = {}
    for r, b in enumerate(schedule_b):
        t0 = time.perf_counter()
        chosen, diag, cur_probs = score_pool(model, pool, cfg.strategy, cfg, b, r,
                                             prev_cache, rng_seed=cfg.seed * 1000 + r)
        if cfg.keep_checkpoints:
            checkpoints.append(model.copy())
        snapshots.append(cur_probs)
        # features from the model that made the query, i.e. before this round's adaptation
        vault.admit(chosen, model.features(pool.x(chosen)))
        pool.label(chosen, oracle)
        for i in chosen:
            u_cm, u_ct, u, y_a = diag[i]
            selections.append({"round": r + 1, "id": i, "u_cm": u_cm, "u_ct": u_ct,
                               "u": u, "y_a": y_a, "true_label": oracle[i]})
        sched = lr_sched if lr_sched is not None else LrSchedule(
            cfg.eta0, steps_per_round(len(pool.labels), cfg.adapt))
        model, vault, stats = adapt_round(model, pool, vault, cfg.adapt, cfg.loss, cfg.eta0,
                                          optimizer=opt, schedule=sched, rng=rng)
        for row in stats.trace:
            losses.append((len(losses),) + tuple(row[1:]))
        # this round's query-time hypotheses become the previous-round probs next time
        prev_cache = {i: p for i, p in cur_probs.items() if i not in pool.labels}
        mean_acc, per_class = score_test()
        metrics.append(RoundMetrics(r + 1, mean_acc, per_class, len(pool.labels),
                                    time.perf_counter() - t0))
        pool.check_partition()
        log.info("round %d/%d acc=%.4f labeled=%d", r + 1, cfg.rounds, mean_acc, len(pool.labels))

    return ExperimentResult(cfg, metrics, selections, losses, source_acc, model, pool,
                            vault, snapshots, checkpoints)


# ---------------------------------------------------------------------------
# artifacts


def _fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return "nan" if np.isnan(x) else repr(float(x))
    return str(x)


def write_metrics_csv(metrics: list[RoundMetrics], path, n_classes: int) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["round", "mean_acc"] + [f"acc_class_{c}" for c in range(n_classes)]
                   + ["labeled_count"])
        for m in metrics:
            w.writerow([m.round, _fmt(m.mean_acc)] + [_fmt(a) for a in m.per_class_acc]
                       + [m.labeled_count])


def write_selections_csv(selections: list[dict], path) -> None:
    cols = ["round", "id", "u_cm", "u_ct", "u", "y_a", "true_label"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for row in selections:
            w.writerow([_fmt(row[c]) for c in cols])


def write_losses_csv(losses: list[tuple], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "lr", "L_ce", "L_vpa", "L_ent", "L_total"])
        for row in losses:
            w.writerow([row[0]] + [_fmt(v) for v in row[1:]])


def export_embeddings(model: MlpModel, sets: dict, path) -> Path:
    """CSV of id, split, true_label and the bottleneck features of every sample."""
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "split", "true_label"] + [f"f{j}" for j in range(model.bottleneck)])
        for name, data in sets.items():
            feats = model.features(data.features)
            for i, y, f in zip(data.ids, data.labels, feats):
                w.writerow([int(i), name, int(y)] + [_fmt(v) for v in f])
    return path


def write_artifacts(result: ExperimentResult, out_dir, sets=None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(result.metrics, out / "metrics.csv", result.model.n_classes)
    write_selections_csv(result.selections, out / "selections.csv")
    write_losses_csv(result.losses, out / "losses.csv")
    save_checkpoint(result.model, out / "model.ckpt")
    if sets is not None:
        export_embeddings(result.model, sets, out / "embeddings.csv")
    return out
