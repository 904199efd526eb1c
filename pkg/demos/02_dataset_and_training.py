# %% [markdown]
# From labels to a step classifier
# ================================
#
# Labels are skewed towards low step counts. We keep two classes, undersample
# the larger one, carve out a test set and train a hashed bag-of-ngrams
# logistic regression.

# %%
from stepsaver import BalanceConfig, balance, class_counts, split
from stepsaver.synthetic import skewed_label_rows

rows = skewed_label_rows({20: 4834, 30: 16278, 50: 7621})
print("raw:", class_counts(rows))
balanced = balance(rows, BalanceConfig(keep_classes={30, 50}, seed=0))
ds = split(balanced, test_count=275, seed=0)
print({name: len(part) for name, part in ds.parts().items()})

# %% [markdown]
# Those prompts carry no signal, so instead train on a corpus where one token
# decides the class. Accuracy should be perfect within an epoch or two.

# %%
from stepsaver import FeatureExtractor, TrainConfig, fit_features, predict, train
from stepsaver.classifier import format_epoch_log
from stepsaver.synthetic import sentinel_corpus

corpus = sentinel_corpus(2000, seed=0)
ds = split(corpus, test_count=200, seed=0)
extractor = fit_features([r.prompt for r in ds.train], FeatureExtractor(hash_dim=1 << 14))
result = train(ds.train, ds.validation, extractor, TrainConfig(epochs=3, seed=0))
print("epoch\ttrain_loss\tval_bce\tval_acc\tval_f1")
for h in result.history:
    print(format_epoch_log(h))

# %%
for prompt in ("alpha a castle on a hill", "a castle on a hill"):
    print(prompt, "->", predict(result.model, extractor, prompt))
