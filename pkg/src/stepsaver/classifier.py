"""Prompt -> step-class prediction with hashed n-gram features and logistic regression.

The reference backend is deliberately small: signed feature hashing over word
unigrams and bigrams, an optional IDF table, and a linear model trained by
mini-batch SGD on binary cross-entropy. Anything implementing ``StepPredictor``
can replace it behind the service.
"""

from __future__ import annotations

import hashlib
import math
import re
import struct
import zlib
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np
import scipy.sparse as sp

from .dataset import LabeledPrompt

__all__ = [
    "FeatureExtractor",
    "LinearModel",
    "TrainConfig",
    "EvalReport",
    "EpochLog",
    "TrainResult",
    "StepPredictor",
    "LinearStepClassifier",
    "ModelFormatError",
    "UnsupportedVersionError",
    "fit_features",
    "featurize",
    "featurize_many",
    "batch_loss_and_grad",
    "train",
    "predict",
    "evaluate",
    "save_model",
    "load_model",
    "format_epoch_log",
]

WEIGHTINGS = ("binary", "tf", "tfidf")
_TOKEN = re.compile(r"[^\W_]+")
_SIGN_BIT = 0x80000000
BCE_EPS = 1e-7


@lru_cache(maxsize=1 << 16)
def _hash(gram: str) -> int:
    return zlib.crc32(gram.encode("utf-8"))


def _tokens(prompt: str) -> list[str]:
    return _TOKEN.findall(prompt.lower())


@dataclass(frozen=True, eq=False)
class FeatureExtractor:
    hash_dim: int = 1 << 16
    ngram_orders: tuple[int, ...] = (1, 2)
    weighting: str = "binary"
    idf_table: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.hash_dim < 1 << 8 or self.hash_dim > 1 << 24 or self.hash_dim & (self.hash_dim - 1):
            raise ValueError(f"hash_dim must be a power of two in [2^8, 2^24], got {self.hash_dim}")
        orders = tuple(sorted(set(int(n) for n in self.ngram_orders)))
        if not orders or orders[0] < 1:
            raise ValueError(f"invalid n-gram orders {self.ngram_orders}")
        object.__setattr__(self, "ngram_orders", orders)
        if self.weighting not in WEIGHTINGS:
            raise ValueError(f"weighting must be one of {WEIGHTINGS}, got {self.weighting!r}")
        if self.idf_table is not None:
            if self.weighting != "tfidf":
                raise ValueError("idf_table is only meaningful for tfidf weighting")
            idf = np.asarray(self.idf_table, dtype=np.float64).copy()
            if idf.shape != (self.hash_dim,):
                raise ValueError(f"idf_table must have length {self.hash_dim}")
            idf.flags.writeable = False
            object.__setattr__(self, "idf_table", idf)

    @property
    def fitted(self) -> bool:
        return self.weighting != "tfidf" or self.idf_table is not None

    def grams(self, prompt: str) -> list[str]:
        toks = _tokens(prompt)
        out = []
        for n in self.ngram_orders:
            if n == 1:
                out.extend(toks)
            else:
                out.extend(" ".join(toks[i:i + n]) for i in range(len(toks) - n + 1))
        return out

    def slot_counts(self, prompt: str) -> dict[int, float]:
        """Signed hashed counts per slot, before weighting and normalization."""
        grams = self.grams(prompt)
        if self.weighting == "binary":
            grams = set(grams)
        mask = self.hash_dim - 1
        acc: dict[int, float] = {}
        for g in grams:
            h = _hash(g)
            slot = h & mask
            acc[slot] = acc.get(slot, 0.0) + (-1.0 if h & _SIGN_BIT else 1.0)
        return acc

    def __eq__(self, other):
        if not isinstance(other, FeatureExtractor):
            return NotImplemented
        same_idf = (self.idf_table is None and other.idf_table is None) or (
            self.idf_table is not None and other.idf_table is not None
            and np.array_equal(self.idf_table, other.idf_table))
        return (self.hash_dim, self.ngram_orders, self.weighting) == (
            other.hash_dim, other.ngram_orders, other.weighting) and same_idf

    __hash__ = None


def fit_features(corpus: Sequence[str], extractor: FeatureExtractor = FeatureExtractor()) -> FeatureExtractor:
    """Return a fitted copy of ``extractor``.

    For tfidf, ``idf = ln((1 + N) / (1 + df)) + 1`` per hashed slot, where df
    counts documents touching the slot. Other weightings need no fitting.
    """
    if len(corpus) == 0:
        raise ValueError("cannot fit features on an empty corpus")
    if extractor.weighting != "tfidf":
        return replace(extractor, idf_table=None)
    df = np.zeros(extractor.hash_dim)
    counter = replace(extractor, weighting="tf", idf_table=None)
    for doc in corpus:
        slots = list(counter.slot_counts(doc))
        df[slots] += 1
    idf = np.log((1.0 + len(corpus)) / (1.0 + df)) + 1.0
    return replace(extractor, idf_table=idf)


def _weighted(extractor: FeatureExtractor, prompt: str) -> dict[int, float]:
    if not extractor.fitted:
        raise ValueError("tfidf extractor must be fitted before use")
    acc = extractor.slot_counts(prompt)
    if extractor.weighting == "tfidf":
        idf = extractor.idf_table
        acc = {k: v * float(idf[k]) for k, v in acc.items()}
    acc = {k: v for k, v in sorted(acc.items()) if v != 0.0}
    norm = math.sqrt(math.fsum(v * v for v in acc.values()))
    if norm == 0.0:
        return {}
    return {k: v / norm for k, v in acc.items()}


def featurize(extractor: FeatureExtractor, prompt: str) -> tuple[np.ndarray, np.ndarray]:
    """L2-normalized sparse feature vector as sorted ``(indices, values)``.

    An empty prompt (or one whose hashed features cancel) maps to the zero
    vector.
    """
    feats = _weighted(extractor, prompt)
    return (np.fromiter(feats.keys(), dtype=np.int64, count=len(feats)),
            np.fromiter(feats.values(), dtype=np.float64, count=len(feats)))


def featurize_many(extractor: FeatureExtractor, prompts: Iterable[str]) -> sp.csr_matrix:
    indptr, indices, values = [0], [], []
    for p in prompts:
        feats = _weighted(extractor, p)
        indices.extend(feats.keys())
        values.extend(feats.values())
        indptr.append(len(indices))
    return sp.csr_matrix(
        (np.array(values, dtype=np.float64), np.array(indices, dtype=np.int64), np.array(indptr)),
        shape=(len(indptr) - 1, extractor.hash_dim),
    )


@dataclass(eq=False)
class LinearModel:
    weights: np.ndarray
    bias: float = 0.0
    positive_class: int = 50
    negative_class: int = 30

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 1:
            raise ValueError("weights must be a vector")
        if self.positive_class == self.negative_class:
            raise ValueError("positive and negative classes must differ")

    @classmethod
    def zeros(cls, dim: int, positive_class: int = 50, negative_class: int = 30) -> "LinearModel":
        return cls(np.zeros(dim), 0.0, positive_class, negative_class)

    @property
    def classes(self) -> tuple[int, int]:
        return (self.negative_class, self.positive_class)

    def check_finite(self) -> None:
        if not (np.all(np.isfinite(self.weights)) and math.isfinite(self.bias)):
            raise ValueError("model parameters are not finite")

    def __eq__(self, other):
        if not isinstance(other, LinearModel):
            return NotImplemented
        return (np.array_equal(self.weights, other.weights) and self.bias == other.bias
                and self.classes == other.classes)

    __hash__ = None


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 2e-3
    train_batch: int = 16
    eval_batch: int = 32
    epochs: int = 5
    seed: int = 0
    l2: float = 1e-5

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if self.train_batch < 1 or self.eval_batch < 1:
            raise ValueError("batch sizes must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.l2 < 0:
            raise ValueError("l2 must be >= 0")


@dataclass(frozen=True)
class EvalReport:
    bce_loss: float
    accuracy: float
    f1: float
    confusion: tuple[tuple[int, int], tuple[int, int]]
    """``((tn, fp), (fn, tp))`` with the positive class as "positive"."""

    @property
    def size(self) -> int:
        return sum(map(sum, self.confusion))


@dataclass(frozen=True)
class EpochLog:
    epoch: int
    train_loss: float
    validation: EvalReport


@dataclass
class TrainResult:
    model: LinearModel
    history: list[EpochLog]


def format_epoch_log(log: EpochLog) -> str:
    v = log.validation
    return f"{log.epoch}\t{log.train_loss:.6f}\t{v.bce_loss:.6f}\t{v.accuracy:.6f}\t{v.f1:.6f}"


def _sigmoid(z):
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))


def batch_loss_and_grad(w: np.ndarray, b: float, X, y: np.ndarray, l2: float):
    """Summed BCE over the batch plus ``l2/2 * |w|^2``, with its gradient.

    Returns ``(loss, grad_w, grad_b)``. The SGD step is ``-lr * grad``, so
    every example in a batch contributes a full per-example update.
    """
    z = X @ w + b
    loss = float(np.sum(np.logaddexp(0.0, z) - y * z)) + 0.5 * l2 * float(w @ w)
    r = _sigmoid(z) - y
    return loss, X.T @ r + l2 * w, float(np.sum(r))


def _encode_labels(rows: Sequence[LabeledPrompt], model: LinearModel) -> np.ndarray:
    y = np.empty(len(rows))
    for i, row in enumerate(rows):
        if row.steps == model.positive_class:
            y[i] = 1.0
        elif row.steps == model.negative_class:
            y[i] = 0.0
        else:
            raise ValueError(f"label {row.steps} is outside the class set {model.classes}")
    return y


def train(
    train_rows: Sequence[LabeledPrompt],
    validation_rows: Sequence[LabeledPrompt],
    extractor: FeatureExtractor,
    cfg: TrainConfig = TrainConfig(),
    classes: tuple[int, int] = (30, 50),
) -> TrainResult:
    """Fit a logistic-regression model by seeded mini-batch SGD.

    ``extractor`` must already be fitted. The model starts at zero; batch order
    is reshuffled each epoch from ``cfg.seed``. After every epoch the model is
    evaluated on ``validation_rows``.
    """
    if not train_rows or not validation_rows:
        raise ValueError("training and validation sets must be non-empty")
    model = LinearModel.zeros(extractor.hash_dim, positive_class=classes[1], negative_class=classes[0])
    y = _encode_labels(train_rows, model)
    _encode_labels(validation_rows, model)
    X = featurize_many(extractor, (r.prompt for r in train_rows))

    rng = np.random.default_rng(cfg.seed)
    w, b = model.weights, model.bias
    lr, n = cfg.learning_rate, len(train_rows)
    history = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.train_batch):
            idx = order[start:start + cfg.train_batch]
            loss, gw, gb = batch_loss_and_grad(w, b, X[idx], y[idx], cfg.l2)
            total += loss
            if lr:
                w = w - lr * gw
                b = b - lr * gb
        model = LinearModel(w, b, model.positive_class, model.negative_class)
        report = evaluate(model, extractor, validation_rows, batch_size=cfg.eval_batch)
        history.append(EpochLog(epoch, total / n, report))
    return TrainResult(model, history)


def predict(model: LinearModel, extractor: FeatureExtractor, prompt: str) -> tuple[int, float]:
    feats = _weighted(extractor, prompt)
    w = model.weights
    logit = math.fsum([w[k] * v for k, v in feats.items()]) + model.bias
    if logit >= 0:
        p = 1.0 / (1.0 + math.exp(-logit))
    else:
        e = math.exp(logit)
        p = e / (1.0 + e)
    return (model.positive_class if p >= 0.5 else model.negative_class), p


def evaluate(
    model: LinearModel,
    extractor: FeatureExtractor,
    rows: Sequence[LabeledPrompt],
    batch_size: int = 32,
) -> EvalReport:
    """BCE (probabilities clamped to [1e-7, 1 - 1e-7]), accuracy and positive-class F1."""
    if not rows:
        raise ValueError("cannot evaluate on an empty set")
    y = _encode_labels(rows, model)
    probs = []
    for start in range(0, len(rows), batch_size):
        X = featurize_many(extractor, (r.prompt for r in rows[start:start + batch_size]))
        probs.append(_sigmoid(X @ model.weights + model.bias))
    p = np.concatenate(probs)
    pc = np.clip(p, BCE_EPS, 1.0 - BCE_EPS)
    bce = float(-np.mean(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc)))
    pred = p >= 0.5
    truth = y == 1.0
    tp = int(np.sum(pred & truth))
    fp = int(np.sum(pred & ~truth))
    fn = int(np.sum(~pred & truth))
    tn = int(np.sum(~pred & ~truth))
    f1 = 2 * tp / (2 * tp + fp + fn) if tp else 0.0
    return EvalReport(bce, (tp + tn) / len(rows), f1, ((tn, fp), (fn, tp)))


class StepPredictor(Protocol):
    classes: tuple[int, ...]
    version: str

    def predict(self, prompt: str) -> tuple[int, float]: ...


@dataclass(eq=False)
class LinearStepClassifier:
    """A trained model and its extractor, usable as a ``StepPredictor``."""

    model: LinearModel
    extractor: FeatureExtractor
    version: str = "unsaved"

    @property
    def classes(self) -> tuple[int, int]:
        return self.model.classes

    def predict(self, prompt: str) -> tuple[int, float]:
        return predict(self.model, self.extractor, prompt)

    def evaluate(self, rows: Sequence[LabeledPrompt], batch_size: int = 32) -> EvalReport:
        return evaluate(self.model, self.extractor, rows, batch_size)

    @classmethod
    def load(cls, path: str | Path) -> "LinearStepClassifier":
        model, extractor = load_model(path)
        digest = hashlib.sha256(Path(path).read_bytes()).hexdigest()[:12]
        return cls(model, extractor, version=f"linear-{digest}")


# Model file layout, little-endian:
#   magic(8) version(u16) hash_dim(u32) weighting(u8) n_orders(u8) orders(u8 * n)
#   has_idf(u8) negative_class(i32) positive_class(i32) bias(f64)
#   [idf(f64 * hash_dim)] weights(f64 * hash_dim) sha256(32) of everything before
MAGIC = b"STPSVLM\x00"
FORMAT_VERSION = 1


class ModelFormatError(ValueError):
    pass


class UnsupportedVersionError(ModelFormatError):
    pass


def save_model(model: LinearModel, extractor: FeatureExtractor, path: str | Path) -> None:
    model.check_finite()
    if model.weights.size != extractor.hash_dim:
        raise ValueError("model and extractor dimensions differ")
    orders = extractor.ngram_orders
    has_idf = extractor.idf_table is not None
    parts = [
        MAGIC,
        struct.pack("<HIBB", FORMAT_VERSION, extractor.hash_dim, WEIGHTINGS.index(extractor.weighting), len(orders)),
        bytes(orders),
        struct.pack("<Biid", has_idf, model.negative_class, model.positive_class, model.bias),
    ]
    if has_idf:
        parts.append(extractor.idf_table.astype("<f8").tobytes())
    parts.append(model.weights.astype("<f8").tobytes())
    body = b"".join(parts)
    Path(path).write_bytes(body + hashlib.sha256(body).digest())


def load_model(path: str | Path) -> tuple[LinearModel, FeatureExtractor]:
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + 2 or data[:len(MAGIC)] != MAGIC:
        raise ModelFormatError(f"{path}: not a step-classifier model file (bad magic)")
    (version,) = struct.unpack_from("<H", data, len(MAGIC))
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported model format version {version} (expected {FORMAT_VERSION})")
    try:
        off = len(MAGIC)
        _, hash_dim, weighting, n_orders = struct.unpack_from("<HIBB", data, off)
        off += struct.calcsize("<HIBB")
        orders = tuple(data[off:off + n_orders])
        if len(orders) != n_orders:
            raise struct.error("truncated header")
        off += n_orders
        has_idf, neg, pos, bias = struct.unpack_from("<Biid", data, off)
        off += struct.calcsize("<Biid")
        expected = off + 8 * hash_dim * (2 if has_idf else 1) + 32
    except struct.error as exc:
        raise ModelFormatError(f"{path}: truncated model file ({exc})") from None
    if len(data) != expected:
        raise ModelFormatError(f"{path}: truncated or oversized model file ({len(data)} bytes, expected {expected})")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ModelFormatError(f"{path}: checksum mismatch")
    idf = None
    if has_idf:
        idf = np.frombuffer(data, dtype="<f8", count=hash_dim, offset=off).astype(np.float64)
        off += 8 * hash_dim
    weights = np.frombuffer(data, dtype="<f8", count=hash_dim, offset=off).astype(np.float64)
    try:
        extractor = FeatureExtractor(hash_dim, orders, WEIGHTINGS[weighting], idf)
        model = LinearModel(weights, bias, positive_class=pos, negative_class=neg)
    except (IndexError, ValueError) as exc:
        raise ModelFormatError(f"{path}: invalid model parameters ({exc})") from None
    model.check_finite()
    return model, extractor
