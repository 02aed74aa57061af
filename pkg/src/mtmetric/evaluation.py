"""Retrieval and regression metrics, plus the n / alpha sensitivity sweep."""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data_model import EXPERT, Dataset, split_by_individual
from .metric import MetricParams, angular_factor, mahalanobis_sq, total_loss
from .miner import (RANDOM, InadmissibleError, admissible_pair_count, match_matrix,
                    sample_triplets, triplet_arrays)
from .trainer import (DivergenceError, TrainConfig, TrainResult, _centred_targets,
                      resolved_loss_config, save_checkpoint, train)

TABLE1_CORNER = "Network \\ n"
TABLE2_CORNER = "loss \\ α"
TOO_STRICT = "n too strict"


def _pairwise_sq(E):
    sq = np.sum(E * E, axis=1)
    return np.maximum(sq[:, None] + sq[None, :] - 2.0 * E @ E.T, 0.0)


def knn_indices(embeddings, k: int) -> np.ndarray:
    """The ``k`` nearest other rows of each row; ties go to the lower index."""
    E = np.asarray(embeddings, dtype=float)
    if k >= len(E):
        raise ValueError(f"k={k} needs at least {k + 1} records, got {len(E)}")
    D = _pairwise_sq(E)
    np.fill_diagonal(D, np.inf)
    return np.argsort(D, axis=1, kind="stable")[:, :k]


def knn_precision(embeddings, dataset: Dataset, k: int, n: int) -> float:
    """Mean fraction of each record's ``k`` nearest neighbours that match it
    on at least ``n`` label slots."""
    nn = knn_indices(embeddings, k)
    C = match_matrix(dataset.labels, dataset.schema)
    hits = np.take_along_axis(C, nn, axis=1) >= n
    return float(hits.mean())


def shuffled_precision(embeddings, dataset: Dataset, k: int, n: int, seed: int = 0) -> float:
    """Precision after permuting label rows: the chance level for ``k``, ``n``."""
    perm = np.random.default_rng(seed).permutation(len(dataset))
    shuffled = dataset.replace(labels=dataset.labels[perm])
    # replace() keeps row order because ids/timestamps are unchanged
    return knn_precision(embeddings, shuffled, k, n)


def _head_predictions(params: MetricParams, dataset: Dataset, heads: dict):
    E = params.transform(dataset.features)
    return {t: E[:, k] + params.head_offsets.get(t, 0.0) for t, k in heads.items()}


def score_regression_eval(params: MetricParams, dataset: Dataset, head_assignment: dict,
                          targets: dict | None = None) -> dict:
    """Per-head MSE/MAE over present labels.

    ``targets`` optionally maps a task index to a full target vector (for
    example ground-truth scores) that replaces the dataset labels. Heads with
    nothing to evaluate map to None.
    """
    preds = _head_predictions(params, dataset, head_assignment)
    out = {}
    for t, pred in preds.items():
        y = dataset.labels[:, t] if targets is None or t not in targets else np.asarray(targets[t])
        ok = ~np.isnan(y)
        name = dataset.schema[t].name
        if not ok.any():
            out[name] = None
            continue
        err = pred[ok] - y[ok]
        out[name] = {"mse": float(np.mean(err ** 2)), "mae": float(np.mean(np.abs(err))),
                     "count": int(ok.sum())}
    return out


def consecutive_pairs(dataset: Dataset) -> np.ndarray:
    """(i, j) index pairs of time-consecutive records of the same individual."""
    pairs = [np.column_stack([idx[:-1], idx[1:]]) for idx in dataset.groups() if len(idx) > 1]
    if not pairs:
        return np.empty((0, 2), dtype=int)
    return np.vstack(pairs)


@dataclass
class ChangeEval:
    mse: float
    pairs: np.ndarray
    predicted: np.ndarray
    actual: np.ndarray


def predicted_change(params: MetricParams, x_i, x_j, k: int):
    """Change of head coordinate ``k`` from ``x_i`` to ``x_j``."""
    return params.transform(np.atleast_2d(x_j))[:, k] - params.transform(np.atleast_2d(x_i))[:, k]


def change_eval(params: MetricParams, dataset: Dataset, task: int, k: int,
                true_score=None) -> ChangeEval:
    """MSE of the predicted change over consecutive same-individual pairs.

    The reference change is the delta of ``true_score`` when given, else of
    the task's labels (pairs with a missing label are dropped).
    """
    pairs = consecutive_pairs(dataset)
    y = dataset.labels[:, task] if true_score is None else np.asarray(true_score, dtype=float)
    if len(pairs):
        pairs = pairs[~np.isnan(y[pairs[:, 0]]) & ~np.isnan(y[pairs[:, 1]])]
    if len(pairs) == 0:
        raise ValueError("no consecutive record pairs to evaluate")
    X = dataset.features
    pred = predicted_change(params, X[pairs[:, 0]], X[pairs[:, 1]], k)
    actual = y[pairs[:, 1]] - y[pairs[:, 0]]
    return ChangeEval(float(np.mean((pred - actual) ** 2)), pairs, pred, actual)


@dataclass
class EvalReport:
    precision_at_k: dict
    heads: dict
    change_mse: float | None
    triplet_satisfaction: float | None
    mean_test_loss: float | None
    n_records: int
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


def _test_triplets(dataset_std: Dataset, config: TrainConfig):
    mconf = dataclasses.replace(config.miner, strategy=RANDOM,
                                batch_size=max(len(dataset_std), 3), seed=config.seed)
    return sample_triplets(dataset_std, None, mconf)


def heldout_loss(params: MetricParams, dataset: Dataset, config: TrainConfig):
    """Mean loss and angular-constraint satisfaction rate on triplets mined
    (uniformly, seeded) from ``dataset``. Returns (None, None) when no
    triplet can be formed."""
    loss_cfg = resolved_loss_config(config, dataset.schema)
    std = dataset.replace(features=params.standardize(dataset.features))
    try:
        triplets = _test_triplets(std, config)
    except InadmissibleError:
        return None, None
    if not triplets:
        return None, None
    A, P, N = triplet_arrays(std, triplets)
    samples = (std.features, _centred_targets(std.labels, params.head_offsets))
    loss = total_loss(params, (A, P, N), samples, loss_cfg).total
    k4 = angular_factor(loss_cfg.alpha)
    ok = mahalanobis_sq(params.L, A, P) <= k4 * mahalanobis_sq(params.L, N, 0.5 * (A + P))
    return float(loss), float(np.mean(ok))


def evaluate(result: TrainResult, dataset: Dataset, ks=(1, 5, 10), change_task: int | None = None,
             truth=None) -> EvalReport:
    """Evaluate a trained model on ``dataset`` (typically the test split).

    ``truth`` is an optional synthgen ground truth aligned with ``dataset``;
    when given, head and change errors are measured against true scores.
    """
    params, config = result.params, result.config
    loss_cfg = resolved_loss_config(config, dataset.schema)
    heads = loss_cfg.heads(params.l)
    E = params.transform(dataset.features)
    n = config.miner.n
    prec = {str(k): knn_precision(E, dataset, k, n) for k in ks if k < len(dataset)}
    targets = None
    expert = [t for t, s in enumerate(dataset.schema) if s.kind == EXPERT]
    if truth is not None:
        targets = {t: truth.true_score[:, i] for i, t in enumerate(expert) if t in heads}
    head_eval = score_regression_eval(params, dataset, heads, targets)
    if change_task is None:
        change_task = next((t for t in expert if t in heads), None)
    change = None
    if change_task is not None:
        ref = None
        if truth is not None and change_task in expert:
            ref = truth.true_score[:, expert.index(change_task)]
        try:
            change = change_eval(params, dataset, change_task, heads[change_task], ref).mse
        except ValueError:
            change = None
    loss, sat = heldout_loss(params, dataset, config)
    return EvalReport(prec, head_eval, change, sat, loss, len(dataset), config.to_dict())


@dataclass
class SweepCell:
    table: int
    row: str
    column: str
    config: TrainConfig
    loss: float | None = None
    precision_at_5: float | None = None
    status: str = "ok"


def _cell_filename(cell: SweepCell) -> str:
    slug = re.sub(r"[^A-Za-z0-9]+", "_", f"{cell.row}_{cell.column}").strip("_")
    return f"table{cell.table}_{slug}.json"


def _run_cell(args):
    dataset, cell, out_dir = args
    try:
        result = train(dataset, cell.config)
    except InadmissibleError:
        cell.status = TOO_STRICT
        return cell
    except DivergenceError:
        cell.status = "diverged"
        return cell
    _, test = split_by_individual(dataset, cell.config.train_fraction, cell.config.seed)
    cell.loss, _ = heldout_loss(result.params, test, cell.config)
    if len(test) > 5:
        E = result.params.transform(test.features)
        cell.precision_at_5 = knn_precision(E, test, 5, cell.config.miner.n)
    if out_dir is not None:
        save_checkpoint(result, Path(out_dir) / _cell_filename(cell))
    return cell


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return format(v, ".6g")


@dataclass
class SweepResult:
    n_values: list
    alpha_values: list
    cells: list
    admissible_pairs: dict

    def _cell(self, table, row, column):
        for c in self.cells:
            if c.table == table and c.row == row and c.column == column:
                return c
        return None

    def _table(self, table: int, metric: str) -> str:
        if table == 1:
            corner = TABLE1_CORNER
            columns = [str(n) for n in self.n_values]
        else:
            corner = TABLE2_CORNER
            columns = [f"{_fmt(a)}°" for a in self.alpha_values]
        rows = list(dict.fromkeys(c.row for c in self.cells if c.table == table))
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([corner] + columns)
        for row in rows:
            vals = []
            for col in columns:
                c = self._cell(table, row, col)
                vals.append(c.status if c.status != "ok" else _fmt(getattr(c, metric)))
            w.writerow([row] + vals)
        if table == 1:
            w.writerow(["admissible pairs"] + [str(self.admissible_pairs[n]) for n in self.n_values])
        return buf.getvalue()

    def table1_csv(self, metric: str = "loss") -> str:
        return self._table(1, metric)

    def table2_csv(self, metric: str = "loss") -> str:
        return self._table(2, metric)

    def write(self, out_dir) -> dict:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        files = {}
        for table in (1, 2):
            for metric, suffix in (("loss", "loss"), ("precision_at_5", "precision")):
                path = out / f"table{table}_{suffix}.csv"
                path.write_text(self._table(table, metric), encoding="utf-8")
                files[f"table{table}_{suffix}"] = path
        return files


def sweep(dataset: Dataset, base_config: TrainConfig, n_values=(2, 3, 4, 5, 6, 7),
          alpha_values=(35, 40, 45, 50, 55, 60), table2_n: int = 5,
          mse_weight: float | None = None, jobs: int = 1, out_dir=None) -> SweepResult:
    """Train one model per grid cell and collect test loss and precision@5.

    The ``table1_*`` files vary ``n`` for the OPML loss without regression
    heads. The ``table2_*`` files vary ``alpha`` at ``n = table2_n`` with and without the MSE heads
    (weight ``mse_weight``, defaulting to the base config's non-zero weight
    or 0.1).
    """
    if mse_weight is None:
        mse_weight = base_config.loss.lambda_mse or 0.1
    cells = []
    for n in n_values:
        cfg = dataclasses.replace(
            base_config,
            loss=dataclasses.replace(base_config.loss, mode="opml_nll", lambda_mse=0.0),
            miner=dataclasses.replace(base_config.miner, n=int(n)))
        cells.append(SweepCell(1, "OPML", str(n), cfg))
    for row, lam in (("Multi-task/ OPML", 0.0), ("Multi-task/ OPML+MSE", mse_weight)):
        for a in alpha_values:
            cfg = dataclasses.replace(
                base_config,
                loss=dataclasses.replace(base_config.loss, mode="opml_nll", alpha=float(a),
                                         lambda_mse=lam),
                miner=dataclasses.replace(base_config.miner, n=int(table2_n)))
            cells.append(SweepCell(2, row, f"{_fmt(a)}°", cfg))
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    work = [(dataset, c, out_dir) for c in cells]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            done = list(pool.map(_run_cell, work))
    else:
        done = [_run_cell(w) for w in work]
    train_ds, _ = split_by_individual(dataset, base_config.train_fraction, base_config.seed)
    pairs = {n: admissible_pair_count(train_ds, n, base_config.miner.allow_same_individual)
             for n in n_values}
    return SweepResult(list(n_values), list(alpha_values), done, pairs)
