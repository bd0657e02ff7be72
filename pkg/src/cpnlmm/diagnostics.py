"""Convergence diagnostics and posterior summaries.

Conventions: split-R-hat on half chains; ESS from the multi-chain
autocorrelation estimate truncated at the first negative sum of an
autocorrelation pair; quantiles by linear interpolation of order statistics
(numpy's default ``"linear"`` method).
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "DegenerateError",
    "ParamSummary",
    "ChainDiagnostics",
    "split_rhat",
    "effective_sample_size",
    "quantile_interval",
    "hpd_interval",
    "summarize",
]


class DegenerateError(ValueError):
    """Draws carry no variance, so the diagnostic is undefined."""


def _as_chains(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2:
        raise ValueError("expected draws shaped (chain, iteration)")
    return x


def _split(x: np.ndarray) -> np.ndarray:
    half = x.shape[1] // 2
    # with an odd length the middle draw is dropped
    return np.concatenate([x[:, :half], x[:, x.shape[1] - half :]], axis=0)


def split_rhat(x, split: bool = True) -> float:
    """Potential scale reduction ``sqrt(((n-1)/n W + B/n) / W)``.

    With ``split`` each chain is halved first. When the between-chain
    variance is zero the structural floor ``sqrt((n-1)/n)`` is returned.
    """
    x = _as_chains(x)
    if x.shape[0] < 2 and not split:
        raise ValueError("need at least 2 chains")
    if x.shape[1] < 4:
        raise ValueError("need at least 4 iterations per chain")
    if split:
        x = _split(x)
    n = x.shape[1]
    w = float(np.mean(np.var(x, axis=1, ddof=1)))
    if w == 0.0:
        raise DegenerateError("within-chain variance is zero in every chain")
    b = n * float(np.var(np.mean(x, axis=1), ddof=1))
    var_plus = (n - 1) / n * w + b / n
    return math.sqrt(var_plus / w)


def _autocovariance(x: np.ndarray) -> np.ndarray:
    """Biased autocovariance of each row via FFT."""
    n = x.shape[1]
    centered = x - x.mean(axis=1, keepdims=True)
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(centered, n=size, axis=1)
    acov = np.fft.irfft(f * np.conj(f), n=size, axis=1)[:, :n]
    return acov / n


def effective_sample_size(x, split: bool = True) -> float:
    """Effective number of independent draws, capped at the total count."""
    x = _as_chains(x)
    if x.shape[1] < 4:
        raise ValueError("need at least 4 iterations per chain")
    total = x.size
    if split:
        x = _split(x)
    m, n = x.shape
    acov = _autocovariance(x)
    chain_var = acov[:, 0] * n / (n - 1)
    w = float(chain_var.mean())
    if w == 0.0:
        raise DegenerateError("draws have zero variance")
    b = n * float(np.var(x.mean(axis=1), ddof=1)) if m > 1 else 0.0
    var_plus = (n - 1) / n * w + b / n
    rho = 1.0 - (w - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0
    tau_sum = 0.0
    t = 0
    while t + 1 < n:
        pair = rho[t] + rho[t + 1]
        if pair < 0:
            break
        tau_sum += pair
        t += 2
    tau = -1.0 + 2.0 * tau_sum
    tau = max(tau, 1.0 / math.log10(max(m * n, 10)))
    return float(min(m * n / tau, total))


def quantile_interval(x, level: float = 0.95) -> tuple[float, float]:
    x = np.asarray(x, dtype=float).ravel()
    lo, hi = np.quantile(x, [(1 - level) / 2, (1 + level) / 2])
    return float(lo), float(hi)


def hpd_interval(x, level: float = 0.95) -> tuple[float, float]:
    """Shortest interval ``[Q(p), Q(p + level)]`` over ``p``, where ``Q`` is the
    interpolated empirical quantile function used by :func:`quantile_interval`.

    ``Q(p + level) - Q(p)`` is piecewise linear in ``p`` so its minimum lies on
    a knot, and the central interval is always a candidate.
    """
    x = np.sort(np.asarray(x, dtype=float).ravel())
    n = x.size
    if n == 1:
        return float(x[0]), float(x[0])
    knots = np.arange(n) / (n - 1)
    candidates = np.concatenate([knots, knots - level, [(1 - level) / 2, 0.0, 1 - level]])
    candidates = np.unique(np.clip(candidates, 0.0, 1.0 - level))
    lo = np.quantile(x, candidates)
    hi = np.quantile(x, np.minimum(candidates + level, 1.0))
    best = int(np.argmin(hi - lo))
    return float(lo[best]), float(hi[best])


@dataclass(frozen=True)
class ParamSummary:
    param: str
    median: float
    lo: float
    hi: float
    rhat: float
    ess: float
    mcse: float
    degenerate: bool = False


class ChainDiagnostics:
    """Per-parameter summary table with CSV and JSON mirrors."""

    columns = ("param", "median", "lo", "hi", "rhat", "ess", "mcse")

    def __init__(self, rows: list[ParamSummary], level: float, kind: str):
        self.rows = list(rows)
        self.level = level
        self.kind = kind
        self._by_name = {r.param: r for r in self.rows}

    def __getitem__(self, name: str) -> ParamSummary:
        return self._by_name[name]

    def __iter__(self):
        return iter(self.rows)

    def __len__(self):
        return len(self.rows)

    def __eq__(self, other):
        if not isinstance(other, ChainDiagnostics):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    @property
    def max_rhat(self) -> float:
        values = [r.rhat for r in self.rows if np.isfinite(r.rhat)]
        return max(values) if values else float("nan")

    def to_dict(self) -> dict:
        return {
            "level": self.level,
            "interval": self.kind,
            "rows": [asdict(r) for r in self.rows],
        }

    def to_json(self, path) -> None:
        _atomic_write(path, json.dumps(_json_safe(self.to_dict()), indent=2) + "\n")

    def to_csv(self, path) -> None:
        lines = [",".join(self.columns + ("degenerate",))]
        for r in self.rows:
            vals = [r.param] + [repr(float(getattr(r, c))) for c in self.columns[1:]]
            lines.append(",".join(vals + [str(int(r.degenerate))]))
        _atomic_write(path, "\n".join(lines) + "\n")

    @classmethod
    def from_csv(cls, path, level: float = 0.95, kind: str = "quantile") -> "ChainDiagnostics":
        rows = []
        with open(path, newline="", encoding="utf-8") as fh:
            for rec in csv.DictReader(fh):
                rows.append(ParamSummary(
                    rec["param"], *(float(rec[c]) for c in cls.columns[1:]),
                    degenerate=bool(int(rec.get("degenerate", 0)))))
        return cls(rows, level, kind)

    @classmethod
    def from_json(cls, path) -> "ChainDiagnostics":
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        rows = [ParamSummary(**{k: (float("nan") if v is None else v) for k, v in r.items()})
                for r in doc["rows"]]
        return cls(rows, doc["level"], doc["interval"])


def _json_safe(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_json_safe(v) for v in obj]
    return obj


def _atomic_write(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _summarize_one(name: str, x: np.ndarray, level: float, kind: str) -> ParamSummary:
    flat = x.ravel()
    median = float(np.median(flat))
    lo, hi = hpd_interval(flat, level) if kind == "hpd" else quantile_interval(flat, level)
    degenerate = False
    try:
        rhat = split_rhat(x) if x.shape[1] >= 4 else float("nan")
        ess = effective_sample_size(x) if x.shape[1] >= 4 else float("nan")
    except DegenerateError:
        rhat = ess = float("nan")
        degenerate = True
    if not np.isfinite(ess):
        degenerate = True
    sd = float(np.std(flat, ddof=1)) if flat.size > 1 else 0.0
    mcse = sd / math.sqrt(ess) if np.isfinite(ess) and ess > 0 else float("nan")
    return ParamSummary(name, median, lo, hi, float(rhat), float(ess), mcse, degenerate)


def summarize(draws, level: float = 0.95, kind: str = "quantile",
              params: list[str] | None = None) -> ChainDiagnostics:
    """Median, credible interval, split-R-hat, ESS and MCSE per parameter.

    ``draws`` is a :class:`~cpnlmm.sampler.PosteriorDraws` or a mapping of name
    to ``(chain, iteration)`` arrays. Degenerate diagnostics become NaN cells
    with ``degenerate=True`` rather than errors.
    """
    if kind not in ("quantile", "hpd"):
        raise ValueError("interval kind must be 'quantile' or 'hpd'")
    if not 0 < level < 1:
        raise ValueError("level must be in (0, 1)")
    if hasattr(draws, "names"):
        names = params if params is not None else draws.names
        items = [(n, draws.param(n)) for n in names]
    else:
        names = params if params is not None else list(draws)
        items = [(n, _as_chains(draws[n])) for n in names]
    rows = []
    for name, x in items:
        if x.size == 0:
            raise ValueError("no draws to summarize")
        rows.append(_summarize_one(name, x, level, kind))
    return ChainDiagnostics(rows, level, kind)
