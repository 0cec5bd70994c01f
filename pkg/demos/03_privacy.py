# What leaks: a single-sample gradient or a shared class prototype?
# Replay a run, attack client 0 at the last round through both channels.

import numpy as np

from fedprok import ExperimentConfig, privacy_score
from fedprok.experiment import PrivacySpec, attack_round
from fedprok.metrics import save_array

cfg = ExperimentConfig(privacy=PrivacySpec(attack_iters=300)).with_seed(7)
res = attack_round(cfg, cfg.rounds, client=0)

for channel, a in res.items():
    print(f"{channel:9s} mse {a.mse:.4f}  P {privacy_score(a.mse):.3f}  "
          f"loss {a.losses[0]:.3g} -> {a.losses[-1]:.3g} in {a.iterations_used} steps")

g = res["gradient"]
print("truth        ", np.round(g.ground_truth[:6], 2))
print("from gradient", np.round(g.reconstructed_input[:6], 2))
print("from proto   ", np.round(res["prototype"].reconstructed_input[:6], 2))

# a prototype is a class mean, so at best it recovers something class-typical
save_array("reconstruction.bin", g.reconstructed_input)  # u32 ndim, u32 shape, f64 values
