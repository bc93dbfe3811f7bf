"""
Training a point-cloud policy on the reach task
================================================

Expert demos, a short training run, and evaluation with the one-step and
Euler samplers. A few minutes on one core; the full comparison is
``cfmpolicy bench --config configs/reach_bench.json``.
"""

# %%
import numpy as np

from cfmpolicy import policy as pol
from cfmpolicy.numcore import Rng
from cfmpolicy.simenv import TaskSpec, expert_policy, run_episode

task = TaskSpec()
demos = [run_episode(expert_policy(task), task, Rng(1000).child(i)) for i in range(10)]
print("demo lengths", [len(d) for d in demos])
print("cloud", demos[0].clouds.shape, "state", demos[0].states.shape)

# %% what the encoder sees: the cloud in the end-effector frame, downsampled
cfg = pol.PolicyConfig(lr=1e-3, epochs=300, eval_every=100)
clouds, states = pol.to_frame(cfg.frame, demos[0].clouds[None, :2], demos[0].states[None, :2])
print("newest state in the ee frame:", states[0, -1].round(3))

# %%
trained = pol.train_policy(demos, cfg, seed=0,
                           on_checkpoint=lambda p: print("epoch", p.epoch, "loss", round(p.losses[-1], 4)))

# %% success and timing
for sampler in ("onestep", "segments", "euler-10"):
    r = pol.evaluate(trained, task, 40, seed=7, sampler=sampler)
    t = pol.time_sampler(trained, task, sampler, n_calls=100)
    print(f"{sampler:<9} NFE {r['nfe']:>2}  success {r['success']:5.1f}%  "
          f"sampler {t['time_ms_median']:.3f} ms")

# %% one rollout, step by step
rec = pol.evaluate(trained, task, 1, seed=3)["episodes"][0]
print("steps", rec.steps, "success", rec.success,
      "final distance", np.linalg.norm(rec.final_ee - rec.targets[0]).round(3))
