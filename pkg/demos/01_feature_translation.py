# Feature translation on one client, step by step.
# Train an extractor on two classes, then fake features for one of them
# by shifting features of a new class.

import numpy as np

from fedprok import (DatasetSpec, LocalHyper, ClientState, Samples, compute_prototypes, generate_dataset,
                     init_params, local_train_round, select_base_class, translate_features)
from fedprok.data import Task
from fedprok.nn import forward_features

train, test = generate_dataset(DatasetSpec(num_classes=4, input_dim=8, train_per_class=100, seed=3))
old, new = train.of_classes([0, 1]), train.of_classes([2, 3])

params = init_params(8, [32], 8, 2, seed=0)
state = ClientState(0, params, {})
state, _ = local_train_round(state, Task(1, (0, 1), old), None, LocalHyper(epochs=5), np.random.default_rng(0))

# prototypes = class means in feature space
protos = compute_prototypes(state.params, old)
fresh = compute_prototypes(state.params, new, task_index=2)
for c, e in {**protos, **fresh}.items():
    print(f"class {c}: n={e.sample_count:3d}  |mu|={np.linalg.norm(e.prototype):.3f}")

# nearest new class (cosine) for each old class
for p in protos:
    n = select_base_class(protos[p].prototype, fresh)
    f_n = forward_features(state.params, new.of_classes([n]).X)
    pseudo = translate_features(f_n, fresh[n].prototype, protos[p].prototype)
    real = forward_features(state.params, old.of_classes([p]).X)
    print(f"old class {p} <- base {n}: pseudo mean err {np.abs(pseudo.mean(0) - protos[p].prototype).max():.1e}, "
          f"spread pseudo {pseudo.std(0).mean():.3f} vs real {real.std(0).mean():.3f}")

# the translated set keeps the base class geometry; only its centre moves
