# %% [markdown]
# Labeling a step sweep
# =====================
#
# A sweep renders one prompt at 10, 20, ... 100 steps. Consecutive images
# become more alike as the sampler converges, so SSIM between neighbours
# climbs. The label is the lower step of the first pair whose SSIM falls
# below the pair before it.

# %%
from stepsaver import SsimSeries, detect_optimal

series = SsimSeries.from_scores([20, 30, 40, 50, 60], [0.5261, 0.6762, 0.6769, 0.4103])
for pair in series.pair_scores:
    print(f"{pair.low_step:>3} -> {pair.high_step:<3} ssim {pair.ssim:.4f}")
print("label:", detect_optimal(series))

# %% [markdown]
# A series that never declines falls back to the largest step.

# %%
flat = SsimSeries.from_scores([10, 20, 30, 40], [0.7, 0.8, 0.9])
print(detect_optimal(flat))

# %% [markdown]
# The same rule on real pixels. `planted_sweep` fakes a sampler whose output
# stops settling at a chosen step, so we know the right answer in advance.

# %%
from stepsaver.sweep import consecutive_ssim
from stepsaver.synthetic import planted_sweep

sweep = planted_sweep("a lighthouse at dusk", planted_step=40, size=48, seed=3)
scores = consecutive_ssim(sweep)
print([round(s, 4) for s in scores.scores])
print("recovered:", detect_optimal(scores, sweep.prompt).steps)
