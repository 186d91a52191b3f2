# # How small are the activations?
#
# Counting activation magnitudes below a few thresholds shows how much of a
# hidden layer is close to silent. The table is the same one `flexkd inspect`
# prints.

# +
import numpy as np

from flexkd.attribution import activation_sparsity_profile
from flexkd.datasets import PlantedRelevanceSpec, gen_planted_task, gen_seq_task
from flexkd.models import MLPConfig, TinySeqConfig, init_model
from flexkd.training import TrainConfig, train_teacher

data, _ = gen_planted_task(PlantedRelevanceSpec(32, 8, seed=0), n_train=2000, n_test=0)
# -

# A freshly initialised MLP against a trained one.

# +
fresh = init_model(MLPConfig(32, [64, 64], 2), seed=0)
trained = train_teacher(MLPConfig(32, [64, 64], 2), data, seed=0, train=TrainConfig(epochs=5, learning_rate=1e-3)).to_model()
for name, model in (("init", fresh), ("trained", trained)):
    print(name)
    print(activation_sparsity_profile(model, data, [0.5, 1.0, 2.0]).to_text())
# -

# Sequence models are profiled over every position.

# +
seq = gen_seq_task(vocab=6, context_len=12, rule="majority-token", seed=0, n_train=300, n_test=0)
lm = init_model(TinySeqConfig(6, 8, 2, 32, 12, num_classes=6), seed=0)
table = activation_sparsity_profile(lm, seq, [0.05, 0.1, 0.5])
print(table.to_text())
print("entries per layer:", table.totals)
