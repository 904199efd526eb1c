"""Turn labeled prompts into a balanced, stratified train/validation/test set."""

from __future__ import annotations

import hashlib
import random
from collections import Counter, defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from . import _tsv

__all__ = [
    "LabeledPrompt",
    "BalanceConfig",
    "DatasetSplit",
    "DatasetFormatError",
    "ChecksumError",
    "MAX_PROMPT_BYTES",
    "is_english",
    "filter_english",
    "balance",
    "split",
    "write_dataset",
    "read_dataset",
    "class_counts",
]

MAX_PROMPT_BYTES = 2048
PART_NAMES = ("train", "validation", "test")

_ALLOWED = frozenset(chr(c) for c in range(0x20, 0x7F)) | frozenset("\t\n\r")


class DatasetFormatError(ValueError):
    def __init__(self, path, lineno: int | None, message: str):
        where = f"{path}:{lineno}" if lineno is not None else str(path)
        super().__init__(f"{where}: {message}")
        self.path = path
        self.lineno = lineno


class ChecksumError(ValueError):
    pass


@dataclass(frozen=True)
class LabeledPrompt:
    prompt: str
    steps: int

    def __post_init__(self):
        if not self.prompt.strip():
            raise ValueError("prompt is empty")
        if len(self.prompt.encode("utf-8")) > MAX_PROMPT_BYTES:
            raise ValueError(f"prompt exceeds {MAX_PROMPT_BYTES} bytes")
        if isinstance(self.steps, bool) or int(self.steps) != self.steps or self.steps < 1:
            raise ValueError(f"steps must be a positive integer, got {self.steps!r}")


@dataclass(frozen=True)
class BalanceConfig:
    keep_classes: frozenset[int] = frozenset({30, 50})
    strategy: str = "undersample_to_min"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "keep_classes", frozenset(self.keep_classes))
        if not self.keep_classes:
            raise ValueError("keep_classes must not be empty")
        if self.strategy != "undersample_to_min":
            raise ValueError(f"unknown balancing strategy {self.strategy!r}")


@dataclass
class DatasetSplit:
    train: list[LabeledPrompt]
    validation: list[LabeledPrompt]
    test: list[LabeledPrompt]
    seed: int | None = None

    def parts(self) -> dict[str, list[LabeledPrompt]]:
        return {"train": self.train, "validation": self.validation, "test": self.test}

    def __len__(self):
        return len(self.train) + len(self.validation) + len(self.test)


def class_counts(rows: Iterable[LabeledPrompt]) -> dict[int, int]:
    return dict(sorted(Counter(r.steps for r in rows).items()))


def is_english(prompt: str) -> bool:
    """True when every character is printable ASCII or common whitespace."""
    return all(ch in _ALLOWED for ch in prompt)


def filter_english(rows: Iterable[LabeledPrompt]) -> tuple[list[LabeledPrompt], int]:
    """Keep rows whose prompts are plain ASCII; return ``(kept, dropped_count)``."""
    kept, dropped = [], 0
    for row in rows:
        if is_english(row.prompt):
            kept.append(row)
        else:
            dropped += 1
    return kept, dropped


def balance(rows: Sequence[LabeledPrompt], cfg: BalanceConfig = BalanceConfig()) -> list[LabeledPrompt]:
    """Drop classes outside ``cfg.keep_classes`` and undersample the rest to the
    smallest kept class, uniformly and without replacement.
    """
    if not rows:
        raise ValueError("cannot balance an empty dataset")
    by_class: dict[int, list[LabeledPrompt]] = defaultdict(list)
    for row in rows:
        if row.steps in cfg.keep_classes:
            by_class[row.steps].append(row)
    missing = sorted(cfg.keep_classes - by_class.keys())
    if missing:
        raise ValueError(f"class {missing[0]} is absent from the input")

    rng = random.Random(cfg.seed)
    target = min(len(v) for v in by_class.values())
    out = []
    for label in sorted(by_class):
        members = by_class[label]
        out.extend(members if len(members) == target else rng.sample(members, target))
    rng.shuffle(out)
    return out


def _allocate(sizes: dict[int, int], total: int) -> dict[int, int]:
    # largest-remainder apportionment of `total` proportional to class sizes
    n = sum(sizes.values())
    if n == 0:
        return {k: 0 for k in sizes}
    quotas = {k: total * v / n for k, v in sizes.items()}
    alloc = {k: int(q) for k, q in quotas.items()}
    short = total - sum(alloc.values())
    for k in sorted(quotas, key=lambda k: (alloc[k] - quotas[k], k))[:short]:
        alloc[k] += 1
    return alloc


def split(
    rows: Sequence[LabeledPrompt],
    test_count: int,
    seed: int = 0,
    train_val_ratio: tuple[int, int] = (9, 1),
) -> DatasetSplit:
    """Stratified, seeded split into test, train and validation parts.

    ``test_count`` rows go to test; of the rest, ``floor(n * 9 / 10)`` go to
    train and the remainder to validation (for the default 9:1 ratio).
    """
    n = len(rows)
    if not 0 <= test_count < n:
        raise ValueError(f"test_count must be in [0, {n}), got {test_count}")
    tr, va = train_val_ratio
    if tr < 0 or va < 0 or tr + va == 0:
        raise ValueError(f"invalid train:validation ratio {train_val_ratio}")

    rng = random.Random(seed)
    by_class: dict[int, list[int]] = defaultdict(list)
    for i, row in enumerate(rows):
        by_class[row.steps].append(i)
    for label in sorted(by_class):
        rng.shuffle(by_class[label])

    sizes = {k: len(v) for k, v in by_class.items()}
    test_alloc = _allocate(sizes, test_count)
    remaining = n - test_count
    train_total = remaining * tr // (tr + va)
    rest = {k: sizes[k] - test_alloc[k] for k in sizes}
    train_alloc = _allocate(rest, train_total)

    parts = {"train": [], "validation": [], "test": []}
    for label in sorted(by_class):
        idx = by_class[label]
        t, r = test_alloc[label], train_alloc[label]
        parts["test"].extend(idx[:t])
        parts["train"].extend(idx[t:t + r])
        parts["validation"].extend(idx[t + r:])
    for name in PART_NAMES:
        rng.shuffle(parts[name])
    return DatasetSplit(*([rows[i] for i in parts[name]] for name in PART_NAMES), seed=seed)


def _encode_part(rows: Iterable[LabeledPrompt]) -> bytes:
    return "".join(f"{r.steps}\t{_tsv.escape(r.prompt)}\n" for r in rows).encode("utf-8")


def write_dataset(ds: DatasetSplit, directory: str | Path) -> Path:
    """Write ``train.tsv``, ``validation.tsv``, ``test.tsv`` and ``manifest.txt``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = [f"seed\t{'' if ds.seed is None else ds.seed}"]
    for name, rows in ds.parts().items():
        payload = _encode_part(rows)
        (directory / f"{name}.tsv").write_bytes(payload)
        counts = ",".join(f"{k}:{v}" for k, v in class_counts(rows).items())
        lines.append(f"rows\t{name}\t{len(rows)}")
        lines.append(f"classes\t{name}\t{counts}")
        lines.append(f"sha256\t{name}\t{hashlib.sha256(payload).hexdigest()}")
    (directory / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return directory


def _parse_part(path: Path, payload: bytes) -> list[LabeledPrompt]:
    rows = []
    try:
        text = payload.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise DatasetFormatError(path, None, f"not valid UTF-8: {exc}") from None
    for lineno, line in enumerate(text.split("\n"), 1):
        if not line:
            continue
        fields = line.split("\t")
        if len(fields) != 2:
            raise DatasetFormatError(path, lineno, f"expected 2 TAB-separated fields, got {len(fields)}")
        try:
            rows.append(LabeledPrompt(_tsv.unescape(fields[1]), int(fields[0])))
        except ValueError as exc:
            raise DatasetFormatError(path, lineno, str(exc)) from None
    return rows


def read_dataset(directory: str | Path, verify: bool = True) -> DatasetSplit:
    directory = Path(directory)
    manifest = directory / "manifest.txt"
    checksums, seed = {}, None
    for lineno, line in enumerate(manifest.read_text(encoding="utf-8").splitlines(), 1):
        fields = line.split("\t")
        if fields[0] == "seed" and len(fields) == 2:
            seed = int(fields[1]) if fields[1] else None
        elif fields[0] == "sha256" and len(fields) == 3:
            checksums[fields[1]] = fields[2]
        elif fields[0] not in ("rows", "classes") or len(fields) != 3:
            raise DatasetFormatError(manifest, lineno, "unrecognized manifest record")

    parts = {}
    for name in PART_NAMES:
        path = directory / f"{name}.tsv"
        payload = path.read_bytes()
        if verify:
            if name not in checksums:
                raise ChecksumError(f"{manifest}: no checksum recorded for {name}")
            digest = hashlib.sha256(payload).hexdigest()
            if digest != checksums[name]:
                raise ChecksumError(f"{path}: checksum mismatch (expected {checksums[name]}, got {digest})")
        parts[name] = _parse_part(path, payload)
    return DatasetSplit(parts["train"], parts["validation"], parts["test"], seed=seed)
