"""Synthetic longitudinal datasets with known ground truth.

Each individual carries a latent state that follows a reflected random walk.
Automated labels read the state every step, expert scores are quantised
readouts observed on a fixed cadence, and features mix the state through a
fixed orthonormal matrix plus an individual offset that lives in the
orthogonal complement. With zero noise the centred true score is therefore
an exact linear function of the features.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .data_model import Dataset, default_schema, save_dataset, save_schema

QUANTUM = 0.25


class SynthConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    individuals: int = 40
    steps: int = 20
    step_days: int = 1
    feature_dim: int = 16
    latent_dim: int = 4
    expert_period_days: int = 21
    observer_noise_sd: float = 0.0
    feature_noise_sd: float = 0.0
    drift_fraction: float = 0.25
    seed: int = 0
    n_automated: int = 3
    n_expert: int = 2
    walk_sd: float = 0.02
    latent_bound: float = 1.0
    drift_rate: float = 0.05
    offset_sd: float = 1.0
    score_center: float = 3.0
    gradients_in_match: bool = True

    def __post_init__(self):
        counts = ("individuals", "steps", "step_days", "feature_dim", "latent_dim",
                  "expert_period_days", "n_automated", "n_expert")
        for name in counts:
            if getattr(self, name) < 1:
                raise SynthConfigError(f"{name} must be positive")
        if self.latent_dim > self.feature_dim:
            raise SynthConfigError("latent_dim must not exceed feature_dim")
        if not 0 <= self.drift_fraction <= 1:
            raise SynthConfigError("drift_fraction must lie in [0, 1]")
        for name in ("observer_noise_sd", "feature_noise_sd", "walk_sd", "drift_rate",
                     "offset_sd"):
            if getattr(self, name) < 0:
                raise SynthConfigError(f"{name} must be non-negative")
        if self.latent_bound <= 0:
            raise SynthConfigError("latent_bound must be positive")
        if not 0 <= self.seed < 2**64:
            raise SynthConfigError("seed must be a 64-bit unsigned integer")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise SynthConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise SynthConfigError(str(exc)) from None


@dataclass
class GroundTruth:
    """Per-record truth aligned with the generated dataset's row order."""

    individual_ids: np.ndarray
    timestamps: np.ndarray
    true_score: np.ndarray   # (N, n_expert)
    true_change: np.ndarray  # (N, n_expert), forward difference per day
    drift_sign: np.ndarray   # (N,), 0 outside a drift segment

    def to_json(self) -> str:
        rows = []
        for i in range(len(self.individual_ids)):
            rows.append({
                "individual_id": str(self.individual_ids[i]),
                "timestamp": int(self.timestamps[i]),
                "true_score": self.true_score[i].tolist(),
                "true_change": self.true_change[i].tolist(),
                "drift_sign": int(self.drift_sign[i]),
            })
        return json.dumps(rows) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "GroundTruth":
        rows = json.loads(text)
        return cls(np.array([r["individual_id"] for r in rows], dtype=str),
                   np.array([r["timestamp"] for r in rows], dtype=np.int64),
                   np.array([r["true_score"] for r in rows], dtype=float),
                   np.array([r["true_change"] for r in rows], dtype=float),
                   np.array([r["drift_sign"] for r in rows], dtype=int))

    def align(self, dataset: Dataset) -> "GroundTruth":
        """Rows matching ``dataset`` (same individual and timestamp)."""
        key = {(i, int(t)): r for r, (i, t) in
               enumerate(zip(self.individual_ids.tolist(), self.timestamps.tolist()))}
        idx = np.array([key[(i, int(t))] for i, t in
                        zip(dataset.individual_ids.tolist(), dataset.timestamps.tolist())],
                       dtype=int)
        return GroundTruth(self.individual_ids[idx], self.timestamps[idx],
                           self.true_score[idx], self.true_change[idx], self.drift_sign[idx])


def _reflect(x, bound):
    # fold onto [-bound, bound]
    period = 4.0 * bound
    y = np.mod(x + bound, period)
    return np.where(y > 2.0 * bound, period - y, y) - bound


def _unit_rows(rng, k, dim):
    W = rng.standard_normal((k, dim))
    return W / np.linalg.norm(W, axis=1, keepdims=True)


def generate_with_truth(config: SynthConfig):
    c = config
    rng = np.random.default_rng(c.seed)
    basis = np.linalg.qr(rng.standard_normal((c.feature_dim, c.feature_dim)))[0]
    mixing = basis[:, :c.latent_dim]
    n_off = min(c.latent_dim, c.feature_dim - c.latent_dim)
    offset_basis = basis[:, c.latent_dim:c.latent_dim + n_off]
    auto_w = _unit_rows(rng, c.n_automated, c.latent_dim)
    score_w = _unit_rows(rng, c.n_expert, c.latent_dim)
    n_drift = int(round(c.drift_fraction * c.individuals))
    drifted = set(rng.permutation(c.individuals)[:n_drift].tolist())

    days = np.arange(c.steps) * c.step_days
    width = len(str(c.individuals - 1))
    ids, ts, feats, labels = [], [], [], []
    scores, changes, signs = [], [], []
    for ind in range(c.individuals):
        s0 = rng.uniform(-c.latent_bound, c.latent_bound, c.latent_dim)
        steps = rng.normal(0.0, c.walk_sd * np.sqrt(c.step_days), (c.steps, c.latent_dim))
        steps[0] = 0.0
        state = _reflect(s0 + np.cumsum(steps, axis=0), c.latent_bound)
        sign = np.zeros(c.steps, dtype=int)
        if ind in drifted:
            start = int(rng.integers(0, max(c.steps // 2, 1)))
            stop = int(rng.integers(start + 1, c.steps + 1))
            direction = 1 if rng.random() < 0.5 else -1
            elapsed = np.clip(days - days[start], 0, days[stop - 1] - days[start])
            state = state + direction * c.drift_rate * elapsed[:, None] * score_w[0]
            sign[start:stop - 1] = direction
        offset = offset_basis @ rng.normal(0.0, c.offset_sd, n_off)
        X = state @ mixing.T + offset
        X = X + rng.normal(0.0, c.feature_noise_sd, X.shape)
        true_score = c.score_center + state @ score_w.T
        auto = state @ auto_w.T
        expert = np.round(true_score / QUANTUM) * QUANTUM
        expert = expert + rng.normal(0.0, c.observer_noise_sd, expert.shape)
        expert[days % c.expert_period_days != 0] = np.nan
        grads = np.full((c.steps, 2 * c.n_expert), np.nan)
        change = np.zeros_like(true_score)
        if c.steps > 1:
            change[:-1] = np.diff(true_score, axis=0) / np.diff(days)[:, None]

        ids += [f"ind_{ind:0{width}d}"] * c.steps
        ts.append(days)
        feats.append(X)
        labels.append(np.hstack([auto, expert, grads]))
        scores.append(true_score)
        changes.append(change)
        signs.append(sign)

    schema = default_schema(c.n_automated, c.n_expert,
                            gradients_in_match=c.gradients_in_match)
    ds = Dataset(np.array(ids), np.concatenate(ts), np.vstack(feats), np.vstack(labels), schema)
    truth = GroundTruth(np.array(ids), np.concatenate(ts), np.vstack(scores),
                        np.vstack(changes), np.concatenate(signs))
    # Dataset sorts by (id, timestamp); ids are zero-padded so order is unchanged
    return ds, truth.align(ds)


def generate(config: SynthConfig) -> Dataset:
    return generate_with_truth(config)[0]


def write_synthetic(config: SynthConfig, out_dir) -> dict:
    """Write ``dataset.csv``, ``schema.json``, ``ground_truth.json`` and
    ``synth_config.json`` into ``out_dir``; returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds, truth = generate_with_truth(config)
    paths = {"dataset": out / "dataset.csv", "schema": out / "schema.json",
             "ground_truth": out / "ground_truth.json", "config": out / "synth_config.json"}
    save_dataset(ds, paths["dataset"])
    save_schema(ds.schema, paths["schema"])
    paths["ground_truth"].write_text(truth.to_json())
    paths["config"].write_text(json.dumps(asdict(config), indent=2) + "\n")
    return paths
