# Four tasks, three clients, and how much of the old classes survives.
# FedProK replays translated features, w/o FT does not, FedAvg does nothing extra.

import dataclasses

from fedprok import ExperimentConfig
from fedprok.experiment import PrivacySpec, run_experiment

base = ExperimentConfig(privacy=PrivacySpec(targets_per_client=0))
runs = {v: run_experiment(dataclasses.replace(base, variant=v)) for v in ("fedprok", "wo_ft", "wo_pkf", "fedavg")}

print("round task " + " ".join(f"{v:>8s}" for v in runs))
for i in range(base.rounds):
    s = runs["fedprok"].snapshots[i]
    print(f"{s.round:5d} {s.task:4d} " + " ".join(f"{r.snapshots[i].acc_all:8.3f}" for r in runs.values()))

print()
for v, r in runs.items():
    last = r.snapshots[-1]
    print(f"{v:8s} final acc_all {last.acc_all:.3f}  acc_prev {last.acc_previous:.3f}  U {r.trust.U:.3f}  "
          f"E {1e3 * r.trust.E:.1f} ms/round")

# without translation the old classes drop to ~0 as soon as a new task starts
