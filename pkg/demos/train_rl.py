"""Closed-loop training of NeuroMHE on the figure-8 task (a few episodes)."""
import sys
import warnings

from neuromhe.neuro import init_weight_net
from neuromhe.sim import make_scenario
from neuromhe.train import NeuroLearner, TrainConfig, run_episode_rl, train_rl
from neuromhe.weights import WeightLayout

warnings.simplefilter("ignore", RuntimeWarning)
seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
episodes = int(sys.argv[2]) if len(sys.argv) > 2 else 3
sc = make_scenario("fig8", duration=10.0)
cfg = TrainConfig(lr=1e-4)
learner = NeuroLearner(init_weight_net(WeightLayout(24, 18, 6, 100.0), seed=seed), lr=cfg.lr)
base = run_episode_rl(sc, learner, cfg, seed=seed, learn=False).mean_loss
print(f"untrained L_mean {base:.5f}")
for e, L in enumerate(train_rl(sc, learner, episodes, cfg, seed=seed)):
    print(f"episode {e}: L_mean {L:.5f} ({L / base:.2f} of untrained)")
