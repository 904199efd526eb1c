# %% [markdown]
# What do per-prompt step counts save?
# ====================================
#
# Given how many prompts landed in each class and the mean seconds per image
# at each step count, compare fixed policies with the per-prompt one.

# %%
from stepsaver import render_report, savings_report

counts = {30: 2337, 50: 420}
times = {30: 2.25, 50: 3.72, 100: 7.36}
print(render_report(savings_report(counts, times)))

# %% [markdown]
# Timing is close to linear in the step count, which lets us price step
# counts that were never measured.

# %%
from stepsaver.report import TimingSample, fit_time_model

fit = fit_time_model([TimingSample(s, t) for s, t in times.items()])
print(f"{fit.seconds_per_step:.4f} s/step, intercept {fit.intercept_seconds:.4f} s, rmse {fit.residual_rmse:.4f}")
rep = savings_report({20: 500, 30: 2337, 50: 420}, times, ["flexi", "fixed-50"], fallback=fit)
print(render_report(rep))
