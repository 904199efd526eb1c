"""Per-prompt minimum denoising steps for diffusion image generation.

Label step sweeps by the first SSIM decline, train a prompt classifier on the
labels, serve step recommendations, and report quality and time savings.
"""

from .classifier import (
    EvalReport,
    FeatureExtractor,
    LinearModel,
    LinearStepClassifier,
    TrainConfig,
    evaluate,
    featurize,
    fit_features,
    load_model,
    predict,
    save_model,
    train,
)
from .dataset import BalanceConfig, DatasetSplit, LabeledPrompt, balance, class_counts, filter_english, read_dataset, split, write_dataset
from .metrics import FeatureStats, GrayImage, SsimParams, accumulate_stats, frechet_distance, ssim, to_luminance
from .report import LinearTimeModel, TimingSample, fid_eval, fit_time_model, render_report, savings_report
from .sweep import OptimalStepLabel, Rule, SsimSeries, StepSweep, consecutive_ssim, detect_optimal, label_corpus, label_histogram

__version__ = "0.1.0"
