"""Multi-task triplet mining.

Two records form a positive pair when at least ``n`` label slots agree within
their task resolution; otherwise they are a negative pair. Slots missing on
either side never agree.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .data_model import Dataset

RANDOM = "random"
SEMI_HARD = "semi_hard"
HARD = "hard"
STRATEGIES = (RANDOM, SEMI_HARD, HARD)


class InadmissibleError(ValueError):
    """No anchor-positive pair exists at the requested match count."""

    def __init__(self, n: int, pair_count: int):
        self.n = n
        self.pair_count = pair_count
        super().__init__(
            f"n too strict: n={n} admits {pair_count} anchor-positive pairs")


@dataclass(frozen=True)
class Triplet:
    anchor: int
    positive: int
    negative: int
    match_pos: int
    match_neg: int


@dataclass(frozen=True)
class MinerConfig:
    n: int = 5
    strategy: str = SEMI_HARD
    batch_size: int = 64
    triplets_per_anchor: int = 1
    seed: int = 0
    allow_same_individual: bool = True

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.n < 0:
            raise ValueError("n must be non-negative")
        if self.batch_size < 3:
            raise ValueError("batch_size must be at least 3")
        if self.triplets_per_anchor < 1:
            raise ValueError("triplets_per_anchor must be at least 1")


def _match_arrays(schema):
    res = np.array([t.resolution for t in schema], dtype=float)
    inc = np.array([t.include_in_match for t in schema], dtype=bool)
    return res, inc


def match_count(y_a, y_b, schema) -> int:
    y_a = np.asarray(y_a, dtype=float)
    y_b = np.asarray(y_b, dtype=float)
    res, inc = _match_arrays(schema)
    with np.errstate(invalid="ignore"):
        hit = np.abs(y_a - y_b) <= res
    return int(np.sum(hit & inc))


def classify_pair(y_a, y_b, n: int, schema) -> str:
    return "positive" if match_count(y_a, y_b, schema) >= n else "negative"


def match_matrix(labels, schema, other=None) -> np.ndarray:
    """Pairwise match counts between the rows of ``labels`` (and ``other``)."""
    Y = np.asarray(labels, dtype=float)
    Z = Y if other is None else np.asarray(other, dtype=float)
    res, inc = _match_arrays(schema)
    counts = np.zeros((len(Y), len(Z)), dtype=int)
    for t in np.flatnonzero(inc):
        with np.errstate(invalid="ignore"):
            counts += np.abs(Y[:, t, None] - Z[None, :, t]) <= res[t]
    return counts


def admissible_pair_count(dataset: Dataset, n: int, allow_same_individual: bool = True) -> int:
    """Number of unordered record pairs with at least ``n`` matching slots."""
    if len(dataset) < 2:
        return 0
    C = match_matrix(dataset.labels, dataset.schema)
    ok = C >= n
    if not allow_same_individual:
        ok &= dataset.individual_ids[:, None] != dataset.individual_ids[None, :]
    return int(np.sum(np.triu(ok, k=1)))


def sample_triplets(dataset: Dataset, params, config: MinerConfig) -> list[Triplet]:
    """Mine triplets from one batch of ``dataset``.

    A batch of ``config.batch_size`` records is drawn without replacement
    (the whole dataset when it is smaller). Every batch record with at least
    one in-batch positive and negative serves as an anchor.

    ``random`` draws uniform positives and negatives. ``semi_hard`` pairs each
    sampled positive with the nearest negative lying farther from the anchor
    than the positive, or the farthest negative when none does. ``hard`` takes
    the farthest positive and the nearest negative. Distances use
    ``params.L`` on ``dataset.features``.

    Returns indices into ``dataset``.
    """
    N = len(dataset)
    if N < 2:
        raise InadmissibleError(config.n, 0)
    C_all = match_matrix(dataset.labels, dataset.schema)
    pos_all = np.triu(C_all >= config.n, k=1)
    if not config.allow_same_individual:
        pos_all &= dataset.individual_ids[:, None] != dataset.individual_ids[None, :]
    if not pos_all.any():
        raise InadmissibleError(config.n, 0)
    if config.strategy != RANDOM and params is None:
        raise ValueError(f"{config.strategy} mining needs metric params")

    rng = np.random.default_rng(config.seed)
    if N > config.batch_size:
        batch = np.sort(rng.choice(N, size=config.batch_size, replace=False))
    else:
        batch = np.arange(N)
    C = C_all[np.ix_(batch, batch)]
    eye = np.eye(len(batch), dtype=bool)
    pos = (C >= config.n) & ~eye
    if not config.allow_same_individual:
        ids = dataset.individual_ids[batch]
        pos &= ids[:, None] != ids[None, :]
    neg = (C < config.n) & ~eye

    D = None
    if config.strategy != RANDOM:
        E = dataset.features[batch] @ params.L
        sq = np.sum(E * E, axis=1)
        D = np.maximum(sq[:, None] + sq[None, :] - 2.0 * E @ E.T, 0.0)

    out = []
    for i in range(len(batch)):
        p_idx = np.flatnonzero(pos[i])
        n_idx = np.flatnonzero(neg[i])
        if len(p_idx) == 0 or len(n_idx) == 0:
            continue
        picks = []
        if config.strategy == HARD:
            p = p_idx[np.argmax(D[i, p_idx])]
            picks.append((p, n_idx[np.argmin(D[i, n_idx])]))
        else:
            k = min(config.triplets_per_anchor, len(p_idx))
            for p in rng.choice(p_idx, size=k, replace=False):
                if config.strategy == RANDOM:
                    picks.append((p, rng.choice(n_idx)))
                    continue
                dn = D[i, n_idx]
                beyond = dn > D[i, p]
                if beyond.any():
                    cand = n_idx[beyond]
                    q = cand[np.argmin(dn[beyond])]
                else:
                    q = n_idx[np.argmax(dn)]
                picks.append((p, q))
        for p, q in picks:
            out.append(Triplet(int(batch[i]), int(batch[p]), int(batch[q]),
                               int(C[i, p]), int(C[i, q])))
    return out


def triplet_arrays(dataset: Dataset, triplets) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    X = dataset.features
    idx = np.array([(t.anchor, t.positive, t.negative) for t in triplets], dtype=int)
    idx = idx.reshape(-1, 3)
    return X[idx[:, 0]], X[idx[:, 1]], X[idx[:, 2]]


def dump_triplets(triplets, path) -> None:
    """Write one JSON object per line."""
    with open(path, "w") as fh:
        for t in triplets:
            fh.write(json.dumps(asdict(t)) + "\n")
