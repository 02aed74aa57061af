"""Training loop: mine, differentiate, step both manifolds, checkpoint."""
from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import stiefel
from .data_model import Dataset, split_by_individual, standardize
from .metric import (OPML_NLL, LossConfig, MetricParams, default_head_assignment,
                     grad_total_loss, orthonormality_residual, total_loss)
from .miner import InadmissibleError, MinerConfig, admissible_pair_count, sample_triplets, triplet_arrays
from .stiefel import OptimizerState, StiefelError

CHECKPOINT_FORMAT = "mtmetric-checkpoint/1"


class DivergenceError(RuntimeError):
    def __init__(self, epoch: int, batch: int, reason: str):
        self.epoch = epoch
        self.batch = batch
        super().__init__(f"training diverged at epoch {epoch}, batch {batch}: {reason}")


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    triplets_per_batch: int | None = None
    lr: float = 0.05
    lr_decay: float = 1.0
    optimizer: str = stiefel.RSGD
    loss: LossConfig = field(default_factory=LossConfig)
    miner: MinerConfig = field(default_factory=MinerConfig)
    l: int = 128
    seed: int = 0
    checkpoint_every: int = 0
    train_fraction: float = 0.8
    constrain_R: bool = True

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        if isinstance(self.miner, dict):
            self.miner = MinerConfig(**self.miner)
        if self.epochs < 0 or self.batch_size < 3 or self.l < 1:
            raise ValueError("epochs >= 0, batch_size >= 3 and l >= 1 are required")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.optimizer not in (stiefel.RSGD, stiefel.RCG):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.triplets_per_batch is not None and self.triplets_per_batch < 1:
            raise ValueError("triplets_per_batch must be positive")
        if not 0 < self.train_fraction <= 1:
            raise ValueError("train_fraction must lie in (0, 1]")

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        d["loss"] = self.loss.to_dict()
        d["miner"] = dataclasses.asdict(self.miner)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class TrainHistory:
    """One entry per completed epoch. Wall times are kept apart so that the
    entries themselves are reproducible bit for bit."""

    entries: list = field(default_factory=list)
    wall_times: list = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def losses(self) -> np.ndarray:
        return np.array([e["loss"] for e in self.entries])


@dataclass
class TrainResult:
    params: MetricParams
    history: TrainHistory
    config: TrainConfig
    epoch: int
    opt_L: OptimizerState
    opt_R: OptimizerState
    schema_hash: str
    test_individuals: list


def initial_params(d: int, l: int, seed: int) -> MetricParams:
    rng = np.random.default_rng(seed)
    L = stiefel.random_point(d, l, rng)
    R = stiefel.random_point(d, l, rng)
    return MetricParams(L, R)


def _centred_targets(labels, offsets: dict) -> np.ndarray:
    Y = np.array(labels, dtype=float)
    for t, v in offsets.items():
        Y[:, t] -= v
    return Y


def resolved_loss_config(config: TrainConfig, schema) -> LossConfig:
    loss = config.loss
    if loss.head_assignment is None:
        loss = dataclasses.replace(loss, head_assignment=default_head_assignment(schema, config.l))
    loss.heads(config.l)
    return loss


def train(dataset: Dataset, config: TrainConfig, *, resume: TrainResult | None = None,
          checkpoint_dir=None, log: Callable[[dict], None] | None = None) -> TrainResult:
    """Fit ``L`` (and ``R`` in ``opml_nll`` mode) on the training split.

    ``dataset`` should already be imputed and carry gradient labels. The
    split is by individual and depends only on ``config.seed``. With
    ``resume`` the run continues from a checkpoint up to ``config.epochs``
    and finishes exactly as an uninterrupted run would.
    """
    if config.l >= dataset.d:
        raise ValueError(f"embedding size l={config.l} must be smaller than d={dataset.d}")
    loss_cfg = resolved_loss_config(config, dataset.schema)
    heads = loss_cfg.heads(config.l)
    train_raw, test_raw = split_by_individual(dataset, config.train_fraction, config.seed)
    train_ds, scaler = standardize(train_raw)

    n = config.miner.n
    pairs = admissible_pair_count(train_ds, n, config.miner.allow_same_individual)
    if pairs == 0:
        raise InadmissibleError(n, pairs)

    if resume is None:
        params = initial_params(dataset.d, config.l, config.seed)
        params.scaler_mean, params.scaler_scale = scaler.mean, scaler.scale
        for t in heads:
            col = train_ds.labels[:, t]
            col = col[~np.isnan(col)]
            params.head_offsets[t] = float(col.mean()) if len(col) else 0.0
        history = TrainHistory()
        opt_L = OptimizerState(config.optimizer, config.lr)
        opt_R = OptimizerState(config.optimizer, config.lr)
        start = 0
    else:
        if resume.schema_hash != dataset.schema_hash:
            raise CheckpointError("checkpoint schema does not match the dataset")
        if resume.params.L.shape != (dataset.d, config.l):
            raise CheckpointError("checkpoint shape does not match the config")
        params = resume.params.copy()
        history = TrainHistory(list(resume.history.entries), list(resume.history.wall_times))
        opt_L, opt_R = resume.opt_L, resume.opt_R
        start = resume.epoch

    Y_centred = _centred_targets(train_ds.labels, params.head_offsets)
    update_R = loss_cfg.mode == OPML_NLL
    result = TrainResult(params, history, config, start, opt_L, opt_R,
                         dataset.schema_hash, test_raw.individuals())

    for epoch in range(start, config.epochs):
        t0 = time.perf_counter()
        rng = np.random.default_rng([config.seed, epoch])
        lr = config.lr * config.lr_decay ** epoch
        opt_L = dataclasses.replace(opt_L, learning_rate=lr)
        opt_R = dataclasses.replace(opt_R, learning_rate=lr)
        perm = rng.permutation(len(train_ds))
        n_batches = max(1, int(np.ceil(len(perm) / config.batch_size)))
        sums = np.zeros(3)
        used = 0
        res_L = res_R = 0.0
        for b, idx in enumerate(np.array_split(perm, n_batches)):
            batch_seed = int(rng.integers(2**63))
            if len(idx) < 3:
                continue
            sub = train_ds.subset(idx)
            mconf = dataclasses.replace(config.miner, batch_size=len(sub), seed=batch_seed)
            try:
                triplets = sample_triplets(sub, params, mconf)
            except InadmissibleError:
                continue
            if not triplets:
                continue
            if config.triplets_per_batch and len(triplets) > config.triplets_per_batch:
                keep = np.sort(np.random.default_rng(batch_seed).choice(
                    len(triplets), config.triplets_per_batch, replace=False))
                triplets = [triplets[i] for i in keep]
            trip = triplet_arrays(sub, triplets)
            samples = (sub.features, Y_centred[np.sort(idx)])
            br = total_loss(params, trip, samples, loss_cfg)
            dL, dR = grad_total_loss(params, trip, samples, loss_cfg)
            if not (np.isfinite(br.total) and np.all(np.isfinite(dL)) and np.all(np.isfinite(dR))):
                raise DivergenceError(epoch + 1, b, "non-finite loss or gradient")
            try:
                opt_L, L = stiefel.step(opt_L, params.L, dL)
                if update_R:
                    if config.constrain_R:
                        opt_R, R = stiefel.step(opt_R, params.R, dR)
                    else:
                        R = params.R - lr * dR
                else:
                    R = params.R
            except StiefelError as exc:
                raise DivergenceError(epoch + 1, b, str(exc)) from exc
            if not (np.all(np.isfinite(L)) and np.all(np.isfinite(R))):
                raise DivergenceError(epoch + 1, b, "non-finite parameters")
            params.L, params.R = L, R
            res_L = max(res_L, orthonormality_residual(L))
            res_R = max(res_R, orthonormality_residual(R))
            sums += (br.total, br.metric, br.mse)
            used += 1
        means = sums / used if used else np.full(3, np.nan)
        entry = {"epoch": epoch + 1, "loss": float(means[0]), "metric_loss": float(means[1]),
                 "mse_loss": float(means[2]), "batches": used, "admissible_pairs": pairs,
                 "residual_L": res_L, "residual_R": res_R}
        history.entries.append(entry)
        history.wall_times.append(time.perf_counter() - t0)
        result = TrainResult(params, history, config, epoch + 1, opt_L, opt_R,
                             dataset.schema_hash, test_raw.individuals())
        if log is not None:
            log(entry)
        if (checkpoint_dir is not None and config.checkpoint_every
                and (epoch + 1) % config.checkpoint_every == 0):
            save_checkpoint(result, Path(checkpoint_dir) / "checkpoint.json")
    return result


def finite_diff_audit(params: MetricParams, triplets, samples, config: LossConfig,
                      h: float = 1e-5) -> float:
    """Largest gradient discrepancy against central differences.

    The error is ``max|g - fd| / max(max|g|, max|fd|)`` over both ``dL`` and
    ``dR``, so entries near zero are judged on the gradient's own scale. Two
    all-zero gradients give 0.
    """
    dL, dR = grad_total_loss(params, triplets, samples, config)
    worst = 0.0
    for name, g in (("L", dL), ("R", dR)):
        fd = np.zeros_like(g)
        base = getattr(params, name)
        for idx in np.ndindex(g.shape):
            vals = []
            for sign in (1.0, -1.0):
                M = base.copy()
                M[idx] += sign * h
                p = params.copy()
                setattr(p, name, M)
                vals.append(total_loss(p, triplets, samples, config).total)
            fd[idx] = (vals[0] - vals[1]) / (2 * h)
        scale = max(np.abs(g).max(), np.abs(fd).max())
        if scale > 0:
            worst = max(worst, float(np.abs(g - fd).max() / scale))
    return worst


def _enc(a) -> list | None:
    return None if a is None else np.asarray(a, dtype=float).ravel().tolist()


def save_checkpoint(result: TrainResult, path) -> None:
    """JSON checkpoint; floats use Python's shortest round-trip repr."""
    p = result.params
    doc = {
        "format": CHECKPOINT_FORMAT,
        "d": p.d,
        "l": p.l,
        "L": _enc(p.L),
        "R": _enc(p.R),
        "schema_hash": result.schema_hash,
        "config": result.config.to_dict(),
        "scaler_mean": _enc(p.scaler_mean),
        "scaler_scale": _enc(p.scaler_scale),
        "head_offsets": {str(t): v for t, v in p.head_offsets.items()},
        "epoch": result.epoch,
        "optimizer": {"L": result.opt_L.to_dict(), "R": result.opt_R.to_dict()},
        "history": result.history.entries,
        "wall_times": result.history.wall_times,
        "test_individuals": list(result.test_individuals),
    }
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(doc) + "\n")
    tmp.replace(path)


def load_checkpoint(path) -> TrainResult:
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint at byte offset "
                              f"{len(text[:exc.pos].encode())}: {exc.msg}") from None
    try:
        if doc.get("format") != CHECKPOINT_FORMAT:
            raise CheckpointError(f"{path}: not a checkpoint file")
        d, l = int(doc["d"]), int(doc["l"])
        dec = (lambda v, shape: None if v is None else np.array(v, dtype=float).reshape(shape))
        params = MetricParams(dec(doc["L"], (d, l)), dec(doc["R"], (d, l)),
                              dec(doc["scaler_mean"], (d,)), dec(doc["scaler_scale"], (d,)),
                              {int(t): float(v) for t, v in doc["head_offsets"].items()})
        return TrainResult(
            params, TrainHistory(doc["history"], doc.get("wall_times", [])),
            TrainConfig.from_dict(doc["config"]), int(doc["epoch"]),
            OptimizerState.from_dict(doc["optimizer"]["L"]),
            OptimizerState.from_dict(doc["optimizer"]["R"]),
            doc["schema_hash"], list(doc.get("test_individuals", [])))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: malformed checkpoint: {exc}") from None

