"""Generation-time model, step-policy savings report and FID evaluation."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .metrics import accumulate_stats, frechet_distance, load_image, read_feature_file, toy_features

__all__ = [
    "TimingSample",
    "LinearTimeModel",
    "Policy",
    "PolicyRow",
    "SavingsReport",
    "fit_time_model",
    "parse_policy",
    "savings_report",
    "render_report",
    "seconds_to_hours",
    "read_step_table",
    "FidResult",
    "load_features",
    "fid_eval",
    "IMAGE_SUFFIXES",
]

IMAGE_SUFFIXES = (".png", ".bmp")
_CENT = Decimal("0.01")


@dataclass(frozen=True)
class TimingSample:
    steps: int
    seconds_per_image: float

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if not (math.isfinite(self.seconds_per_image) and self.seconds_per_image > 0):
            raise ValueError(f"seconds_per_image must be finite and positive, got {self.seconds_per_image}")


@dataclass(frozen=True)
class LinearTimeModel:
    intercept_seconds: float
    seconds_per_step: float
    residual_rmse: float

    def __call__(self, steps: float) -> float:
        return self.intercept_seconds + self.seconds_per_step * steps


def fit_time_model(samples: Sequence[TimingSample]) -> LinearTimeModel:
    """Ordinary least squares of seconds-per-image against step count."""
    if len(samples) < 2:
        raise ValueError(f"need at least 2 timing samples, got {len(samples)}")
    s = np.array([x.steps for x in samples], dtype=np.float64)
    t = np.array([x.seconds_per_image for x in samples], dtype=np.float64)
    if np.all(s == s[0]):
        raise ValueError("all timing samples share one step value; the fit is singular")
    design = np.column_stack([np.ones_like(s), s])
    (intercept, slope), *_ = np.linalg.lstsq(design, t, rcond=None)
    rmse = float(np.sqrt(np.mean((design @ [intercept, slope] - t) ** 2)))
    if slope <= 0:
        raise ValueError(f"fitted seconds_per_step is not positive ({slope:.6g})")
    return LinearTimeModel(float(intercept), float(slope), rmse)


@dataclass(frozen=True)
class Policy:
    """A step policy: fixed at ``steps``, or flexible when ``steps`` is None."""

    name: str
    steps: int | None = None

    @property
    def flexible(self) -> bool:
        return self.steps is None


def parse_policy(text: str) -> Policy:
    """``fixed-<N>`` or ``flexi``."""
    text = text.strip()
    if text in ("flexi", "flexible"):
        return Policy(text)
    prefix, _, n = text.partition("-")
    if prefix == "fixed" and n.isdigit() and int(n) > 0:
        return Policy(text, int(n))
    raise ValueError(f"unknown policy {text!r}; expected fixed-<steps> or flexi")


DEFAULT_POLICIES = ("fixed-50", "fixed-100", "flexi")


@dataclass(frozen=True)
class PolicyRow:
    policy: str
    total_seconds: Decimal
    counts: dict[int, int]

    @property
    def total_hours(self) -> Decimal:
        return seconds_to_hours(self.total_seconds)


@dataclass(frozen=True)
class SavingsReport:
    rows: tuple[PolicyRow, ...]
    baseline: str
    corpus_size: int

    def row(self, policy: str) -> PolicyRow:
        for r in self.rows:
            if r.policy == policy:
                return r
        raise KeyError(policy)

    def to_dict(self) -> dict:
        base = self.row(self.baseline).total_seconds
        return {
            "baseline": self.baseline,
            "corpus_size": self.corpus_size,
            "policies": [
                {
                    "policy": r.policy,
                    "total_seconds": str(r.total_seconds.quantize(_CENT, ROUND_HALF_UP)),
                    "total_hours": str(r.total_hours),
                    "vs_baseline_percent": _percent(r.total_seconds, base),
                    "counts": {str(k): v for k, v in sorted(r.counts.items())},
                }
                for r in self.rows
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def seconds_to_hours(seconds: Decimal | float) -> Decimal:
    return (Decimal(str(seconds)) / Decimal(3600)).quantize(_CENT, ROUND_HALF_UP)


def _percent(value: Decimal, base: Decimal) -> str:
    if base == 0:
        return "n/a"
    return str(((value - base) / base * 100).quantize(Decimal("0.1"), ROUND_HALF_UP))


def _time_for(steps: int, times: Mapping[int, Decimal], fallback: LinearTimeModel | None) -> Decimal:
    if steps in times:
        return times[steps]
    if fallback is not None:
        return Decimal(repr(fallback(steps)))
    raise KeyError(f"no generation time for {steps} steps")


def savings_report(
    class_counts: Mapping[int, int],
    per_step_times: Mapping[int, float | str | Decimal],
    policies: Iterable[str | Policy] = DEFAULT_POLICIES,
    baseline: str = "fixed-50",
    fallback: LinearTimeModel | None = None,
) -> SavingsReport:
    """Total generation time of one prompt corpus under several step policies.

    ``class_counts`` is the flexible policy's per-step prompt tally. A fixed-N
    policy runs every prompt at N steps. Arithmetic is exact decimal, so
    ``2337 * 2.25 + 420 * 3.72`` is exactly ``6820.65``. Step values missing
    from ``per_step_times`` use ``fallback`` if given, otherwise raise.
    """
    times = {int(k): Decimal(str(v)) for k, v in per_step_times.items()}
    counts = {int(k): int(v) for k, v in class_counts.items()}
    if any(v < 0 for v in counts.values()):
        raise ValueError("class counts must be non-negative")
    corpus = sum(counts.values())
    rows = []
    for pol in policies:
        pol = parse_policy(pol) if isinstance(pol, str) else pol
        try:
            if pol.flexible:
                total = sum((n * _time_for(s, times, fallback) for s, n in sorted(counts.items())), Decimal(0))
                per_class = dict(sorted(counts.items()))
            else:
                total = corpus * _time_for(pol.steps, times, fallback)
                per_class = {pol.steps: corpus}
        except KeyError as exc:
            raise ValueError(f"policy {pol.name}: {exc.args[0]}") from None
        rows.append(PolicyRow(pol.name, total, per_class))
    if baseline not in {r.policy for r in rows}:
        raise ValueError(f"baseline policy {baseline!r} is not among the reported policies")
    return SavingsReport(tuple(rows), baseline, corpus)


def render_report(report: SavingsReport) -> str:
    """Aligned text table; seconds and hours rounded to 2 decimals."""
    d = report.to_dict()
    header = ("policy", "seconds", "hours", "vs " + report.baseline, "prompts per step")
    lines = []
    for p in d["policies"]:
        counts = ", ".join(f"{k}:{v}" for k, v in p["counts"].items())
        pct = p["vs_baseline_percent"]
        pct = pct if pct == "n/a" else (pct if pct.startswith("-") else "+" + pct) + "%"
        lines.append((p["policy"], f"{Decimal(p['total_seconds']):,}", p["total_hours"], pct, counts))
    widths = [max(len(r[i]) for r in [header, *lines]) for i in range(len(header))]
    fmt = lambda r: "  ".join(c.ljust(w) if i in (0, 4) else c.rjust(w)
                              for i, (c, w) in enumerate(zip(r, widths))).rstrip()
    out = [fmt(header), fmt(tuple("-" * w for w in widths))]
    out.extend(fmt(r) for r in lines)
    out.append(f"corpus: {report.corpus_size} prompts")
    return "\n".join(out)


def read_step_table(path: str | Path, value_type=int) -> dict[int, object]:
    """Read ``steps TAB value`` lines (counts or seconds files)."""
    table = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.split("\t")
            if len(fields) != 2:
                raise ValueError(f"{path}:{lineno}: expected 'steps<TAB>value'")
            try:
                table[int(fields[0])] = value_type(fields[1])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    return table


@dataclass(frozen=True)
class FidResult:
    value: float
    dim: int
    generated_count: int
    reference_count: int


def load_features(source: str | Path) -> list[np.ndarray]:
    """Feature vectors from a feature file, or toy features of every image in a directory."""
    source = Path(source)
    if source.is_dir():
        images = sorted(p for p in source.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        return [toy_features(load_image(p)) for p in images]
    return read_feature_file(source)


def fid_eval(generated: str | Path, reference: str | Path) -> FidResult:
    gen = load_features(generated)
    ref = load_features(reference)
    for name, vecs in (("generated", gen), ("reference", ref)):
        if len(vecs) < 2:
            raise ValueError(f"{name} side yields {len(vecs)} feature vectors; need at least 2")
    p, q = accumulate_stats(gen), accumulate_stats(ref)
    if p.dim != q.dim:
        raise ValueError(f"feature dimension mismatch: generated {p.dim} vs reference {q.dim}")
    return FidResult(frechet_distance(p, q), p.dim, p.count, q.count)
