"""Train a bailout policy at desk scale and compare it against doing nothing.

A short Adam run on a coarse grid is usually enough to find a policy
that beats zero control once contagion is strong.

    python demos/train_bailout.py [alpha]
"""
import sys

from mfcontagion.fem import mc_cost
from mfcontagion.model import scenario_bailout
from mfcontagion.policy import policy_eval
from mfcontagion.train import TrainConfig, train

alpha = float(sys.argv[1]) if len(sys.argv) > 1 else 2.5
bundle = scenario_bailout(alpha=alpha)
config = TrainConfig(stages=((60, 32, 32, 32),), lr=0.003, optimizer="adam", seed=1)

result = train(bundle, config)
for h in result.history[::10]:
    print(f"epoch {h['epoch']:3d}  cost {h['cost']:.4f}")

grid = bundle.grid(64)
trained, se = mc_cost(bundle, result.params, 64, 64, grid, seed=99)
idle, se0 = mc_cost(bundle, None, 64, 64, grid, seed=99)
print(f"\nalpha={alpha}: trained {trained:.4f} ± {se:.4f}, zero control {idle:.4f} ± {se0:.4f}")

# The policy reacts to the state: how much drift it injects near and far from default.
nu = bundle.init(bundle.grid(64))
for x in (-0.05, 0.05, 0.2, 0.5):
    print(f"  g(0, {x:+.2f}) = {float(policy_eval(0.0, [x], nu, result.params)[0]):.3f}")
