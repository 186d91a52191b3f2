# # Which hidden units matter?
#
# On the planted-relevance task only 8 of 32 input coordinates decide the
# label. We train a 64-unit teacher, score every last-layer unit by the mean
# absolute gradient of the loss, and check that the top units are the ones
# wired to the planted inputs.

# +
import numpy as np

from flexkd.attribution import aggregate_importance, input_sensitivity, select_top
from flexkd.datasets import PlantedRelevanceSpec, gen_planted_task
from flexkd.models import MLPConfig
from flexkd.training import TrainConfig, evaluate, train_teacher

spec = PlantedRelevanceSpec(d_input=32, num_relevant=8, seed=0)
data, relevant = gen_planted_task(spec, n_train=2000, n_test=500)
print("planted coordinates:", relevant)
# -

# A strongly regularised teacher leans on the planted coordinates.

# +
train = TrainConfig(epochs=30, learning_rate=1e-3, weight_decay=1e-2)
teacher = train_teacher(MLPConfig(32, [64], 2), data, seed=0, train=train).to_model().freeze()
print("teacher test accuracy", evaluate(teacher, data.subset("test")))
# -

# ## Scores and ranking

# +
profile = aggregate_importance(teacher, data.subset("train"))
top = select_top(profile, 8).as_array()
print("top-8 units:", top)
print("scores:", np.round(profile.scores[top], 4))
rest = np.setdiff1d(np.arange(64), top)
print("mean score, selected / rest: %.2f" % (profile.scores[top].mean() / profile.scores[rest].mean()))
# -

# How much of each unit's input sensitivity sits on planted coordinates?

# +
sens = input_sensitivity(teacher, data.subset("train").features)
share = sens[relevant].sum(axis=0) / sens.sum(axis=0)
print("planted share, selected units: %.2f" % share[top].mean())
print("planted share, other units:    %.2f" % share[rest].mean())
# -

# Five percent of the data already gives the same selection here.

# +
small = aggregate_importance(teacher, data.subset("train"), calibration_fraction=0.05, seed=0)
print("N =", small.num_samples, "top-8:", select_top(small, 8).as_array())
