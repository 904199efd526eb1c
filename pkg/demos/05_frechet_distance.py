# %% [markdown]
# Fréchet distance between image sets
# ===================================
#
# Summarise each set of feature vectors by mean and covariance and compare
# the two Gaussians. In one dimension the distance is just the squared
# mean gap plus the squared gap between standard deviations.

# %%
import numpy as np

from stepsaver import FeatureStats, accumulate_stats, frechet_distance

print(frechet_distance(FeatureStats([0.0], [[1.0]], 2), FeatureStats([1.0], [[1.0]], 2)))
print(frechet_distance(FeatureStats([0.0], [[1.0]], 2), FeatureStats([0.0], [[4.0]], 2)))

# %% [markdown]
# With samples the estimate converges towards the population value as the
# sets grow.

# %%
rng = np.random.default_rng(0)
for n in (50, 500, 5000):
    p = accumulate_stats(rng.normal(0.0, 1.0, (n, 4)))
    q = accumulate_stats(rng.normal(0.5, 1.0, (n, 4)))
    print(n, round(frechet_distance(p, q), 4), "(population 1.0)")

# %% [markdown]
# Images go through `toy_features`, an 8x8 grid of mean luminance. It is a
# stand-in for a learned embedding, good for relative comparisons only.

# %%
from stepsaver.metrics import GrayImage, toy_features

sharp = [toy_features(GrayImage.from_array(rng.random((32, 32)))) for _ in range(40)]
smooth = [toy_features(GrayImage.from_array(np.full((32, 32), rng.random()))) for _ in range(40)]
print("sharp vs smooth:", round(frechet_distance(accumulate_stats(sharp), accumulate_stats(smooth)), 4))
