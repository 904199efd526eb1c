"""Step-sweep analysis: consecutive SSIM scores and the first-decline label.

A sweep is one prompt rendered at an increasing grid of step counts. Each
adjacent pair of images gets an SSIM score; the optimal step count is the low
step of the first pair whose score drops below the previous pair's.
"""

from __future__ import annotations

import enum
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence, Union

from . import _tsv
from .metrics import GrayImage, SsimParams, load_image, ssim

__all__ = [
    "DEFAULT_STEP_GRID",
    "StepSweep",
    "PairScore",
    "SsimSeries",
    "Rule",
    "OptimalStepLabel",
    "LabelError",
    "SweepError",
    "consecutive_ssim",
    "detect_optimal",
    "label_corpus",
    "label_histogram",
    "read_manifest",
    "write_manifest",
    "write_labels",
    "read_labels",
]

DEFAULT_STEP_GRID = tuple(range(10, 101, 10))

ImageRef = Union[GrayImage, str, Path]


class SweepError(ValueError):
    """A sweep could not be scored; ``pair`` names the offending step pair."""

    def __init__(self, message: str, pair: tuple[int, int] | None = None):
        super().__init__(message)
        self.pair = pair


@dataclass(frozen=True)
class StepSweep:
    prompt: str
    entries: tuple[tuple[int, ImageRef], ...]

    def __post_init__(self):
        entries = tuple((int(s), img) for s, img in self.entries)
        object.__setattr__(self, "entries", entries)
        if len(entries) < 3:
            raise SweepError(f"a sweep needs at least 3 entries, got {len(entries)}")
        steps = self.steps
        if steps[0] < 1:
            raise SweepError(f"step counts must be positive, got {steps[0]}")
        for lo, hi in zip(steps, steps[1:]):
            if hi <= lo:
                raise SweepError(f"sweep steps must be strictly increasing ({lo} then {hi})", (lo, hi))

    @property
    def steps(self) -> tuple[int, ...]:
        return tuple(s for s, _ in self.entries)


@dataclass(frozen=True)
class PairScore:
    low_step: int
    high_step: int
    ssim: float


@dataclass(frozen=True)
class SsimSeries:
    pair_scores: tuple[PairScore, ...]

    @classmethod
    def from_scores(cls, steps: Sequence[int], scores: Sequence[float]) -> "SsimSeries":
        """Build a series from a step grid and one score per adjacent pair."""
        if len(scores) != len(steps) - 1:
            raise ValueError(f"{len(steps)} steps need {len(steps) - 1} scores, got {len(scores)}")
        return cls(tuple(PairScore(lo, hi, float(s)) for lo, hi, s in zip(steps, steps[1:], scores)))

    @property
    def scores(self) -> list[float]:
        return [p.ssim for p in self.pair_scores]

    def __len__(self):
        return len(self.pair_scores)


class Rule(str, enum.Enum):
    FIRST_DECLINE = "first_decline"
    FALLBACK_MAX = "fallback_max"


@dataclass(frozen=True)
class OptimalStepLabel:
    prompt: str
    steps: int
    rule: Rule


@dataclass(frozen=True)
class LabelError:
    index: int
    prompt: str
    cause: str


def _resolve(ref: ImageRef) -> GrayImage:
    return ref if isinstance(ref, GrayImage) else load_image(ref)


def consecutive_ssim(sweep: StepSweep, params: SsimParams = SsimParams()) -> SsimSeries:
    # only the current pair of decoded images is held at any time
    scores = []
    prev_step, prev_ref = sweep.entries[0]
    try:
        prev = _resolve(prev_ref)
    except Exception as exc:
        lo, hi = sweep.entries[0][0], sweep.entries[1][0]
        raise SweepError(f"steps {lo}->{hi}: cannot decode image for step {lo}: {exc}", (lo, hi)) from exc
    for step, ref in sweep.entries[1:]:
        pair = (prev_step, step)
        try:
            cur = _resolve(ref)
        except Exception as exc:
            raise SweepError(f"steps {prev_step}->{step}: cannot decode image for step {step}: {exc}", pair) from exc
        try:
            score = ssim(prev, cur, params)
        except ValueError as exc:
            raise SweepError(f"steps {prev_step}->{step}: {exc}", pair) from exc
        scores.append(PairScore(prev_step, step, score))
        prev_step, prev = step, cur
    return SsimSeries(tuple(scores))


def detect_optimal(series: SsimSeries, prompt: str = "") -> OptimalStepLabel:
    """Apply the first-decline rule to a series of consecutive-pair scores.

    Returns the low step of the first pair scoring strictly below its
    predecessor. A series that never declines is labeled with its highest step
    and ``Rule.FALLBACK_MAX``.
    """
    pairs = series.pair_scores
    if len(pairs) < 2:
        raise ValueError(f"need at least 2 pair scores, got {len(pairs)}")
    for prev, cur in zip(pairs, pairs[1:]):
        if cur.ssim < prev.ssim:
            return OptimalStepLabel(prompt, cur.low_step, Rule.FIRST_DECLINE)
    return OptimalStepLabel(prompt, pairs[-1].high_step, Rule.FALLBACK_MAX)


def _label_one(item: tuple[int, StepSweep], params: SsimParams) -> OptimalStepLabel | LabelError:
    index, sweep = item
    try:
        return detect_optimal(consecutive_ssim(sweep, params), sweep.prompt)
    except Exception as exc:
        return LabelError(index, getattr(sweep, "prompt", ""), str(exc))


def label_corpus(
    sweeps: Iterable[StepSweep],
    params: SsimParams = SsimParams(),
    workers: int | None = None,
) -> Iterator[OptimalStepLabel | LabelError]:
    """Label every sweep, yielding results in input order.

    Failures become ``LabelError`` records instead of aborting the run.
    With ``workers > 1`` sweeps are scored on a thread pool.
    """
    items = enumerate(sweeps)
    if workers is None or workers <= 1:
        for item in items:
            yield _label_one(item, params)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        yield from pool.map(lambda it: _label_one(it, params), items)


def label_histogram(labels: Iterable[OptimalStepLabel]) -> dict[int, int]:
    return dict(sorted(Counter(lab.steps for lab in labels).items()))


def read_manifest(path: str | Path) -> Iterator[StepSweep | LabelError]:
    """Parse ``prompt TAB steps:path[,steps:path...]`` lines.

    Relative image paths resolve against the manifest's directory. Malformed
    lines are yielded as ``LabelError`` so a corpus run can record them.
    """
    path = Path(path)
    base = path.parent
    with open(path, encoding="utf-8") as fh:
        index = 0
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            prompt = ""
            try:
                prompt_field, sep, entries_field = line.partition("\t")
                if not sep:
                    raise ValueError("missing TAB between prompt and entries")
                prompt = _tsv.unescape(prompt_field)
                entries = []
                for token in entries_field.split(","):
                    step, colon, img = token.strip().partition(":")
                    if not colon or not img:
                        raise ValueError(f"bad entry {token!r}, expected steps:path")
                    img_path = Path(img)
                    entries.append((int(step), img_path if img_path.is_absolute() else base / img_path))
                yield StepSweep(prompt, tuple(entries))
            except ValueError as exc:
                yield LabelError(index, prompt, f"{path}:{lineno}: {exc}")
            index += 1


def write_manifest(path: str | Path, sweeps: Iterable[StepSweep]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for sw in sweeps:
            parts = []
            for step, ref in sw.entries:
                if isinstance(ref, GrayImage):
                    raise TypeError("manifest entries must reference image files")
                parts.append(f"{step}:{ref}")
            fh.write(f"{_tsv.escape(sw.prompt)}\t{','.join(parts)}\n")


def write_labels(path: str | Path, labels: Iterable[OptimalStepLabel]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for lab in labels:
            fh.write(f"{_tsv.escape(lab.prompt)}\t{lab.steps}\t{lab.rule.value}\n")
            n += 1
    return n


def read_labels(path: str | Path) -> list[OptimalStepLabel]:
    labels = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 TAB-separated fields, got {len(fields)}")
            try:
                labels.append(OptimalStepLabel(_tsv.unescape(fields[0]), int(fields[1]), Rule(fields[2])))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    return labels
