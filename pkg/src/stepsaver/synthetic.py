"""Procedural fixtures: step sweeps with a planted label and toy prompt corpora."""

from __future__ import annotations

import random
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import LabeledPrompt
from .metrics import GrayImage
from .sweep import DEFAULT_STEP_GRID, StepSweep

__all__ = ["planted_sweep_images", "planted_sweep", "write_sweep_images", "sentinel_corpus", "skewed_label_rows"]


def planted_sweep_images(
    planted_step: int,
    grid: Sequence[int] = DEFAULT_STEP_GRID,
    size: int = 32,
    seed: int = 0,
    start_delta: float = 0.08,
    decay: float = 0.8,
    jump: float = 4.0,
) -> list[GrayImage]:
    """Images whose consecutive-pair SSIM rises, then first drops at ``planted_step``.

    Image ``j + 1`` is image ``j`` plus white noise of amplitude ``delta_j``.
    The amplitudes shrink geometrically up to the planted pair, whose amplitude
    jumps by ``jump``; smaller perturbations mean higher SSIM, so the series
    increases until the planted pair and declines there.
    """
    grid = list(grid)
    if planted_step not in grid[1:-1]:
        raise ValueError(f"planted step {planted_step} must be an interior grid value of {grid}")
    k = grid.index(planted_step)
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / size
    base = 0.5 + 0.2 * np.sin(2 * np.pi * (xx + rng.random())) * np.cos(2 * np.pi * (yy + rng.random()))

    deltas = []
    for j in range(len(grid) - 1):
        if j < k:
            deltas.append(start_delta * decay ** j)
        elif j == k:
            deltas.append(deltas[-1] * jump)
        else:
            deltas.append(start_delta * decay ** (j - k))
    images = [base]
    for d in deltas:
        images.append(np.clip(images[-1] + d * rng.standard_normal((size, size)), 0.0, 1.0))
    return [GrayImage.from_array(im) for im in images]


def planted_sweep(prompt: str, planted_step: int, grid: Sequence[int] = DEFAULT_STEP_GRID,
                  size: int = 32, seed: int = 0) -> StepSweep:
    images = planted_sweep_images(planted_step, grid, size, seed)
    return StepSweep(prompt, tuple(zip(grid, images)))


def write_sweep_images(images: Sequence[GrayImage], grid: Sequence[int], directory: str | Path,
                       stem: str) -> list[tuple[int, Path]]:
    """Save a sweep as 8-bit grayscale PNGs; returns ``(steps, path)`` entries."""
    from PIL import Image

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for steps, img in zip(grid, images):
        path = directory / f"{stem}_{steps:03d}.png"
        Image.fromarray(np.round(img.data * 255).astype(np.uint8), mode="L").save(path)
        entries.append((steps, path))
    return entries


def sentinel_corpus(n: int = 2000, seed: int = 0, token: str = "alpha", vocab_size: int = 1000,
                    classes: tuple[int, int] = (30, 50)) -> list[LabeledPrompt]:
    """Balanced, linearly separable prompts: ``token`` appears exactly in the positive rows."""
    rng = random.Random(seed)
    vocab = [f"word{i}" for i in range(vocab_size)]
    rows = []
    for i in range(n):
        words = rng.choices(vocab, k=rng.randint(3, 8))
        positive = i % 2 == 0
        if positive:
            words.insert(rng.randint(0, len(words)), token)
        rows.append(LabeledPrompt(" ".join(words), classes[1] if positive else classes[0]))
    rng.shuffle(rows)
    return rows


def skewed_label_rows(counts: dict[int, int]) -> list[LabeledPrompt]:
    """Synthetic rows with the given per-class counts (prompt text is a row id)."""
    rows = []
    for steps, n in sorted(counts.items()):
        rows.extend(LabeledPrompt(f"prompt {steps} {i}", steps) for i in range(n))
    return rows
