"""
Two goals, one policy
=====================

The expert picks one of two mirrored goals at random. A policy that averages
the demonstrations would stall between them; this looks at where rollouts end.
Training takes about ten minutes on one core.
"""

# %%
import numpy as np

from cfmpolicy import benchcli as bc
from cfmpolicy import policy as pol
from cfmpolicy.simenv import midpoint_stall

cfg = bc.load_config("configs/two_goal.json")
demos = bc.generate_demos(cfg)
print(len(demos), "demos, goal index counts", np.bincount([d.goal for d in demos]))

# %%
trained = pol.train_policy(demos, cfg.policy, seed=0,
                           on_checkpoint=lambda p: print("epoch", p.epoch))

# %%
res = pol.evaluate(trained, cfg.task, 200, seed=cfg.eval_seed)
eps = res["episodes"]
side = [np.sign(e.final_ee[1] * e.targets[0, 1]) for e in eps if e.success]
print("success", res["success"], "%")
print("stalls", sum(midpoint_stall(e) for e in eps), "of", len(eps))
print("successful rollouts ending on the first goal's side:", int(np.sum(np.array(side) > 0)),
      "of", len(side))

# %% where the failures end, relative to the goal midpoint
for e in [e for e in eps if not e.success][:10]:
    print(np.round(e.final_ee - e.targets.mean(0), 3), np.round(e.targets, 2).tolist())
