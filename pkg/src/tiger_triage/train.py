"""Training loop, learning-rate schedule and the two experimental protocols."""

from __future__ import annotations

import copy
import csv
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch.utils.data import DataLoader, Dataset, TensorDataset

from . import dataset as ds
from .errors import DivergenceDetected
from .metrics import ConfusionCounts, MetricsReport, ci95, confusion, eq4_metrics
from .model import BackboneSpec, ClassifierNet, build, save_checkpoint
from .preprocess import IMAGENET_STATS, INPUT_SIZE, NormStats, fit_norm_stats, load_resized, prepare

log = logging.getLogger(__name__)

PROTOCOLS = ("cv5", "confirmed_vs_unconfirmed")
HISTORY_COLUMNS = ("epoch", "fold", "phase", "accuracy", "loss", "lr")


@dataclass
class TrainConfig:
    lr0: float = 0.001
    momentum: float = 0.7
    gamma: float = 0.1
    step_size_epochs: int = 7
    batch_size: int = 64
    epochs: int = 25
    seed: int = 42
    backbone: BackboneSpec = field(default_factory=BackboneSpec)
    protocol: str = "cv5"
    folds: int = 5
    dropout_p: float = 0.5
    hidden: int = 512
    image_size: tuple[int, int] = INPUT_SIZE
    include_probable: bool = False
    norm_source: str = "dataset"  # or "imagenet"
    scalar_norm: bool = False
    t_interval: bool = False
    cache_features: bool = True

    def __post_init__(self):
        if isinstance(self.backbone, dict):
            self.backbone = BackboneSpec(**self.backbone)
        self.image_size = tuple(self.image_size)
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"protocol must be one of {PROTOCOLS}, got {self.protocol!r}")
        if self.norm_source not in ("dataset", "imagenet"):
            raise ValueError(f"norm_source must be 'dataset' or 'imagenet', got {self.norm_source!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone"] = self.backbone.to_dict()
        d["image_size"] = list(self.image_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training option(s): {sorted(unknown)}")
        return cls(**d)

    def overrides(self) -> dict:
        """Settings that differ from the defaults."""
        base = TrainConfig().to_dict()
        return {k: v for k, v in self.to_dict().items() if base[k] != v}


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Step decay: ``lr0 * gamma ** (epoch // step_size)``."""
    return cfg.lr0 * cfg.gamma ** (epoch // cfg.step_size_epochs)


def make_optimizer(params, cfg: TrainConfig) -> torch.optim.SGD:
    return torch.optim.SGD(params, lr=cfg.lr0, momentum=cfg.momentum, dampening=0.0,
                           weight_decay=0.0, nesterov=False)


def _derived_seed(*parts) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


class RecordDataset(Dataset):
    """Manifest records as normalized tensors with integer class targets."""

    def __init__(self, records: Sequence[ds.ImageRecord], stats: NormStats, size=INPUT_SIZE):
        self.records = list(records)
        self.stats = stats
        self.size = tuple(size)

    @property
    def ids(self) -> list[str]:
        return [r.id for r in self.records]

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i):
        r = self.records[i]
        return prepare(r.path, self.stats, self.size, r.id), r.target


def fit_stats_for(records: Sequence[ds.ImageRecord], cfg: TrainConfig) -> NormStats:
    if cfg.norm_source == "imagenet":
        return IMAGENET_STATS
    return fit_norm_stats((load_resized(r.path, cfg.image_size, r.id) for r in records),
                          scalar=cfg.scalar_norm)


@dataclass
class EpochRecord:
    epoch: int
    fold: int
    train_acc: float
    train_loss: float
    val_acc: float | None
    val_loss: float | None
    lr: float

    def rows(self) -> list[dict]:
        out = [{"epoch": self.epoch, "fold": self.fold, "phase": "train",
                "accuracy": self.train_acc, "loss": self.train_loss, "lr": self.lr}]
        if self.val_acc is not None:
            out.append({"epoch": self.epoch, "fold": self.fold, "phase": "val",
                        "accuracy": self.val_acc, "loss": self.val_loss, "lr": self.lr})
        return out


def write_history_csv(history: Sequence[EpochRecord], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=HISTORY_COLUMNS)
        writer.writeheader()
        for rec in history:
            writer.writerows(rec.rows())


def read_history_csv(path) -> list[EpochRecord]:
    merged: dict[tuple[int, int], dict] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            key = (int(row["fold"]), int(row["epoch"]))
            entry = merged.setdefault(key, {"lr": float(row["lr"])})
            entry[row["phase"]] = (float(row["accuracy"]), float(row["loss"]))
    out = []
    for (fold, epoch), e in sorted(merged.items()):
        val = e.get("val", (None, None))
        out.append(EpochRecord(epoch, fold, *e["train"], *val, e["lr"]))
    return out


@dataclass
class EvalResult:
    probs: np.ndarray
    targets: np.ndarray
    mean_loss: float

    @property
    def preds(self) -> np.ndarray:
        # argmax with ties going to index 0
        return (self.probs[:, 1] > self.probs[:, 0]).astype(int)

    @property
    def accuracy(self) -> float:
        return float((self.preds == self.targets).mean()) if len(self.targets) else float("nan")

    @property
    def counts(self) -> ConfusionCounts:
        return confusion(self.preds.tolist(), self.targets.tolist())

    def report(self, source: str | None = None) -> MetricsReport:
        rep = eq4_metrics(self.counts, self.mean_loss)
        rep.source = source
        return rep


def _loader(data: Dataset, batch_size: int, generator=None, shuffle: bool = False) -> DataLoader:
    return DataLoader(data, batch_size=batch_size, shuffle=shuffle, drop_last=False,
                      generator=generator, num_workers=0)


def _run_eval(model: torch.nn.Module, data: Dataset, batch_size: int) -> EvalResult:
    model.eval()
    probs, targets, loss_sum = [], [], 0.0
    with torch.no_grad():
        for x, y in _loader(data, batch_size):
            logits = model(x)
            loss_sum += float(F.cross_entropy(logits, y, reduction="sum"))
            probs.append(torch.softmax(logits, dim=1).double().numpy())
            targets.append(np.asarray(y))
    n = sum(len(t) for t in targets)
    if n == 0:
        return EvalResult(np.zeros((0, 2)), np.zeros(0, dtype=int), float("nan"))
    return EvalResult(np.concatenate(probs), np.concatenate(targets).astype(int), loss_sum / n)


def evaluate(net: ClassifierNet, data: Dataset, batch_size: int = 64) -> EvalResult:
    """Probabilities, targets and sample-mean cross-entropy over a dataset."""
    return _run_eval(net, data, batch_size)


def _embed(net: ClassifierNet, data: Dataset, batch_size: int) -> TensorDataset:
    net.eval()
    feats, targets = [], []
    with torch.no_grad():
        for x, y in _loader(data, batch_size):
            feats.append(net.embed(x))
            targets.append(torch.as_tensor(y))
    return TensorDataset(torch.cat(feats), torch.cat(targets))


@dataclass
class FoldResult:
    net: ClassifierNet
    history: list[EpochRecord]
    best_epoch: int
    best_val_accuracy: float | None
    best_state: dict
    checkpoints: dict[str, str] = field(default_factory=dict)
    wall_clock: float = 0.0


def train_fold(net: ClassifierNet, train_set: Dataset, val_set: Dataset | None,
               cfg: TrainConfig, fold: int = 0, checkpoint_dir=None,
               norm_stats: NormStats | None = None, config_hash: str = "") -> FoldResult:
    """Train for exactly ``cfg.epochs`` epochs with momentum SGD and step decay.

    When the whole trunk is frozen its outputs are computed once and only the
    head is optimized; this is exact because frozen parts run in eval mode.
    """
    if val_set is not None and hasattr(train_set, "ids") and hasattr(val_set, "ids"):
        overlap = set(train_set.ids) & set(val_set.ids)
        if overlap:
            raise ValueError(f"train and validation sets share {len(overlap)} record(s)")
    start = time.perf_counter()
    cached = cfg.cache_features and net.features_frozen
    if cached:
        model: torch.nn.Module = net.head
        train_data = _embed(net, train_set, cfg.batch_size)
        val_data = _embed(net, val_set, cfg.batch_size) if val_set is not None else None
    else:
        model, train_data, val_data = net, train_set, val_set

    optimizer = make_optimizer([p for p in net.parameters() if p.requires_grad], cfg)
    history: list[EpochRecord] = []
    best_epoch, best_acc, best_state = cfg.epochs - 1, None, None
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(_derived_seed(cfg.seed, fold, 1))
        for epoch in range(cfg.epochs):
            lr = lr_at(epoch, cfg)
            for group in optimizer.param_groups:
                group["lr"] = lr
            gen = torch.Generator().manual_seed(_derived_seed(cfg.seed, fold, 2, epoch))
            net.train()
            seen = correct = 0
            loss_sum = 0.0
            for b, (x, y) in enumerate(_loader(train_data, cfg.batch_size, gen, shuffle=True)):
                optimizer.zero_grad(set_to_none=True)
                logits = model(x)
                loss = F.cross_entropy(logits, y)
                if not torch.isfinite(loss):
                    raise DivergenceDetected(
                        f"non-finite loss at fold {fold}, epoch {epoch}, batch {b} (lr={lr})",
                        fold=fold, epoch=epoch, batch=b, lr=lr)
                loss.backward()
                optimizer.step()
                seen += len(y)
                correct += int((logits.argmax(dim=1) == y).sum())
                loss_sum += float(loss.detach()) * len(y)
            val_acc = val_loss = None
            if val_data is not None:
                ev = _run_eval(model, val_data, cfg.batch_size)
                val_acc, val_loss = ev.accuracy, ev.mean_loss
                if best_acc is None or val_acc > best_acc:
                    best_epoch, best_acc = epoch, val_acc
                    best_state = copy.deepcopy(net.state_dict())
            rec = EpochRecord(epoch, fold, correct / seen, loss_sum / seen, val_acc, val_loss, lr)
            history.append(rec)
            log.info("fold %d epoch %d: train acc %.4f loss %.4f | val acc %s loss %s | lr %g",
                     fold, epoch, rec.train_acc, rec.train_loss, val_acc, val_loss, lr)
    net.eval()
    if best_state is None:
        best_state = copy.deepcopy(net.state_dict())
    result = FoldResult(net, history, best_epoch, best_acc, best_state)
    if checkpoint_dir is not None:
        stats = norm_stats or IMAGENET_STATS
        checkpoint_dir = Path(checkpoint_dir)
        final_path = checkpoint_dir / "final.pt"
        save_checkpoint(net, final_path, norm_stats=stats, config_hash=config_hash,
                        epoch=cfg.epochs - 1, val_accuracy=history[-1].val_acc, seed=cfg.seed,
                        fold=fold)
        best_net = copy.deepcopy(net)
        best_net.load_state_dict(best_state)
        best_path = checkpoint_dir / "best.pt"
        save_checkpoint(best_net, best_path, norm_stats=stats, config_hash=config_hash,
                        epoch=best_epoch, val_accuracy=best_acc, seed=cfg.seed, fold=fold)
        result.checkpoints = {"final": str(final_path), "best": str(best_path)}
    result.wall_clock = time.perf_counter() - start
    return result


@dataclass
class FoldOutcome:
    fold: int
    n_train: int
    n_val: int
    train_accuracy: float
    train_loss: float
    val_accuracy: float
    val_loss: float
    counts: ConfusionCounts
    best_epoch: int
    best_val_accuracy: float | None
    norm_stats: NormStats
    checkpoints: dict[str, str] = field(default_factory=dict)
    history: list[EpochRecord] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("history")
        d["norm_stats"] = self.norm_stats.to_dict()
        return d


@dataclass
class CVSummary:
    folds: list[FoldOutcome]
    train_accuracy: float
    train_accuracy_ci: float
    train_loss: float
    val_accuracy: float
    val_accuracy_ci: float
    val_loss: float
    pooled: MetricsReport
    plan: ds.FoldPlan
    ci_method: str = "normal"
    config_hash: str = ""

    @property
    def history(self) -> list[EpochRecord]:
        return [rec for f in self.folds for rec in f.history]

    def to_dict(self) -> dict:
        return {
            "protocol": "cv5",
            "config_hash": self.config_hash,
            "k": self.plan.k,
            "seed": self.plan.seed,
            "ci_method": self.ci_method,
            "train": {"accuracy": self.train_accuracy, "accuracy_ci": self.train_accuracy_ci,
                      "loss": self.train_loss},
            "test": {"accuracy": self.val_accuracy, "accuracy_ci": self.val_accuracy_ci,
                     "loss": self.val_loss},
            "pooled": self.pooled.to_dict(),
            "folds": [f.to_dict() for f in self.folds],
        }


def _weighted(values, sizes) -> float:
    return sum(v * n for v, n in zip(values, sizes)) / sum(sizes)


BuildFn = Callable[..., ClassifierNet]


def _cv_fold(pool, plan, fold, cfg, run_dir, config_hash, build_fn) -> FoldOutcome:
    train_recs, val_recs = plan.split(pool, fold)
    stats = fit_stats_for(train_recs, cfg)
    train_set = RecordDataset(train_recs, stats, cfg.image_size)
    val_set = RecordDataset(val_recs, stats, cfg.image_size)
    net = build_fn(cfg.backbone, dropout_p=cfg.dropout_p, seed=cfg.seed + fold,
                   hidden=cfg.hidden, input_size=cfg.image_size)
    ckpt_dir = Path(run_dir) / "checkpoints" / f"fold{fold}" if run_dir else None
    res = train_fold(net, train_set, val_set, cfg, fold, ckpt_dir, stats, config_hash)
    ev = evaluate(res.net, val_set, cfg.batch_size)
    last = res.history[-1]
    return FoldOutcome(fold, len(train_recs), len(val_recs), last.train_acc, last.train_loss,
                       ev.accuracy, ev.mean_loss, ev.counts, res.best_epoch,
                       res.best_val_accuracy, stats, res.checkpoints, res.history)


def run_cv(records: Sequence[ds.ImageRecord], cfg: TrainConfig, run_dir=None, jobs: int = 1,
           config_hash: str = "", build_fn: BuildFn = build) -> CVSummary:
    """k-fold cross-validation; a fresh network (seed + fold) is trained per fold."""
    pool = ds.eligible(ds.relabel(records, cfg.include_probable))
    plan = ds.make_folds(pool, cfg.folds, cfg.seed)
    args = [(pool, plan, f, cfg, run_dir, config_hash, build_fn) for f in range(cfg.folds)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            outcomes = list(ex.map(_cv_fold, *zip(*args)))
    else:
        outcomes = [_cv_fold(*a) for a in args]

    n_val = [o.n_val for o in outcomes]
    n_train = [o.n_train for o in outcomes]
    tr_mean, tr_ci = ci95([o.train_accuracy for o in outcomes], n_train, cfg.t_interval)
    va_mean, va_ci = ci95([o.val_accuracy for o in outcomes], n_val, cfg.t_interval)
    pooled_counts = sum((o.counts for o in outcomes), ConfusionCounts())
    pooled = eq4_metrics(pooled_counts, _weighted([o.val_loss for o in outcomes], n_val))
    pooled.source = "pooled_cv"
    summary = CVSummary(outcomes, tr_mean, tr_ci, _weighted([o.train_loss for o in outcomes], n_train),
                        va_mean, va_ci, _weighted([o.val_loss for o in outcomes], n_val), pooled,
                        plan, "t" if cfg.t_interval else "normal", config_hash)
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "folds.json").write_text(plan.to_json())
        (run_dir / "normstats.json").write_text(json.dumps(
            {f"fold{o.fold}": o.norm_stats.to_dict() for o in outcomes}, indent=2))
        write_history_csv(summary.history, run_dir / "history.csv")
        (run_dir / "summary.json").write_text(json.dumps(summary.to_dict(), indent=2))
    return summary


@dataclass
class ProtocolBResult:
    train_accuracy: float
    train_loss: float
    test: MetricsReport
    history: list[EpochRecord]
    n_train: int
    norm_stats: NormStats
    checkpoints: dict[str, str] = field(default_factory=dict)
    config_hash: str = ""

    def to_dict(self) -> dict:
        return {
            "protocol": "confirmed_vs_unconfirmed",
            "config_hash": self.config_hash,
            "train": {"accuracy": self.train_accuracy, "loss": self.train_loss, "n": self.n_train},
            "test": self.test.to_dict(),
            "norm_stats": self.norm_stats.to_dict(),
            "checkpoints": self.checkpoints,
        }


def run_protocol_b(records: Sequence[ds.ImageRecord], cfg: TrainConfig, run_dir=None,
                   config_hash: str = "", build_fn: BuildFn = build) -> ProtocolBResult:
    """Train once on expert-labelled data, score the not-classified records.

    The test set is tracked every epoch for the curves only; the reported
    model is the final-epoch one, never a test-selected checkpoint.
    """
    train_recs, test_recs = ds.split_protocol_b(ds.relabel(records, cfg.include_probable))
    stats = fit_stats_for(train_recs, cfg)
    train_set = RecordDataset(train_recs, stats, cfg.image_size)
    test_set = RecordDataset(test_recs, stats, cfg.image_size)
    net = build_fn(cfg.backbone, dropout_p=cfg.dropout_p, seed=cfg.seed, hidden=cfg.hidden,
                   input_size=cfg.image_size)
    ckpt_dir = Path(run_dir) / "checkpoints" if run_dir else None
    res = train_fold(net, train_set, test_set, cfg, 0, ckpt_dir, stats, config_hash)
    test = evaluate(res.net, test_set, cfg.batch_size).report("single_split")
    last = res.history[-1]
    result = ProtocolBResult(last.train_acc, last.train_loss, test, res.history, len(train_recs),
                             stats, res.checkpoints, config_hash)
    if run_dir is not None:
        run_dir = Path(run_dir)
        stats.save(run_dir / "normstats.json")
        write_history_csv(res.history, run_dir / "history.csv")
        (run_dir / "summary.json").write_text(json.dumps(result.to_dict(), indent=2))
    return result
