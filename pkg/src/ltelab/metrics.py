"""Mean@k / Pass@k evaluation, pass-class counters and EMA smoothing."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .env import Query, generate_task, render_prompt
from .lte import PassClass, score_rollouts
from .policy import PolicyParams, SampleConfig, sample_batch


def _matrix(correct) -> np.ndarray:
    m = np.asarray(correct, dtype=np.float64)
    if m.ndim != 2 or m.size == 0:
        raise ValueError("correctness matrix must be a non-empty queries x k table")
    return m


def mean_at_k(correct) -> float:
    return float(_matrix(correct).mean())


def pass_at_k(correct) -> float:
    """Fraction of queries with at least one correct sample (direct estimator)."""
    return float((_matrix(correct) > 0).any(axis=1).mean())


def ema(series: Sequence[float], alpha: float = 0.1) -> list[float]:
    if not 0 < alpha <= 1:
        raise ValueError("alpha must lie in (0, 1]")
    xs = list(series)
    if not xs:
        raise ValueError("empty series")
    out = [float(xs[0])]
    for x in xs[1:]:
        out.append(alpha * float(x) + (1 - alpha) * out[-1])
    return out


def group_status_counts(statuses: Iterable) -> tuple[int, int, int]:
    """``(none_pass, some_pass, all_pass)`` for a batch of group statuses."""
    counts = {PassClass.NONE: 0, PassClass.SOME: 0, PassClass.ALL: 0}
    for s in statuses:
        pc = getattr(s, "pass_class", s)
        counts[PassClass(pc)] += 1
    return counts[PassClass.NONE], counts[PassClass.SOME], counts[PassClass.ALL]


@dataclass
class TierResult:
    difficulty: int
    n_queries: int
    n_samples: int
    mean_at_k: float
    pass_at_k: float


@dataclass
class EvalReport:
    k: int
    temperature: float
    top_k: int
    top_p: float
    tiers: list[TierResult] = field(default_factory=list)

    @property
    def n_samples(self) -> int:
        return sum(t.n_samples for t in self.tiers)

    @property
    def mean_at_k(self) -> float:
        n = sum(t.n_queries for t in self.tiers)
        return sum(t.mean_at_k * t.n_queries for t in self.tiers) / n

    @property
    def pass_at_k(self) -> float:
        n = sum(t.n_queries for t in self.tiers)
        return sum(t.pass_at_k * t.n_queries for t in self.tiers) / n

    def to_dict(self) -> dict:
        d = asdict(self)
        d["overall"] = {
            "mean_at_k": self.mean_at_k,
            "pass_at_k": self.pass_at_k,
            "n_samples": self.n_samples,
        }
        return d

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def heldout_queries(modulus: int, difficulties: Sequence[int], per_tier: int,
                    seed_offset: int) -> list[Query]:
    return [
        generate_task(seed_offset + i, d, modulus)
        for d in difficulties
        for i in range(per_tier)
    ]


def correctness_matrix(params: PolicyParams, queries: Sequence[Query], k: int,
                       config: SampleConfig, rng: np.random.Generator,
                       backend: Optional[str] = None) -> np.ndarray:
    """``(len(queries), k)`` 0/1 table from plain-prompt decodes."""
    prompts = [render_prompt(q) for q in queries for _ in range(k)]
    rollouts = sample_batch(params, prompts, config, rng, backend=backend)
    out = np.zeros((len(queries), k))
    for i, q in enumerate(queries):
        chunk = score_rollouts(q, rollouts[i * k:(i + 1) * k])
        out[i] = [r.reward for r in chunk]
    return out


def evaluate(params: PolicyParams, queries: Sequence[Query], k: int, config: SampleConfig,
             seed: int, backend: Optional[str] = None) -> EvalReport:
    if k < 1:
        raise ValueError("k must be >= 1")
    if not queries:
        raise ValueError("empty evaluation set")
    rng = np.random.default_rng(seed)
    table = correctness_matrix(params, queries, k, config, rng, backend)
    report = EvalReport(k=k, temperature=config.temperature, top_k=config.top_k, top_p=config.top_p)
    diffs = np.array([q.difficulty for q in queries])
    for d in sorted(set(diffs.tolist())):
        rows = table[diffs == d]
        report.tiers.append(TierResult(
            difficulty=int(d),
            n_queries=int(rows.shape[0]),
            n_samples=int(rows.size),
            mean_at_k=mean_at_k(rows),
            pass_at_k=pass_at_k(rows),
        ))
    return report


def read_jsonl(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def export_csv(records: Sequence[dict], path, alpha: float = 0.1,
               smooth: Sequence[str] = ("none_pass", "some_pass", "all_pass")) -> None:
    """Flat CSV of metric records plus ``<key>_ema`` columns for ``smooth`` keys."""
    rows = [dict(r) for r in records]
    keys: list[str] = []
    for r in rows:
        for k in r:
            if k not in keys:
                keys.append(k)
    for k in smooth:
        if rows and all(k in r for r in rows):
            for r, y in zip(rows, ema([r[k] for r in rows], alpha)):
                r[f"{k}_ema"] = y
            keys.append(f"{k}_ema")
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        for r in rows:
            w.writerow({k: _cell(r.get(k, "")) for k in keys})


def _cell(v):
    if isinstance(v, (dict, list)):
        return json.dumps(v, sort_keys=True)
    return "" if v is None else v
