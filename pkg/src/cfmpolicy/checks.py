"""Self-checks shared by the ``gradcheck`` and ``oracle-tests`` commands."""

from __future__ import annotations

import numpy as np

from . import flowmatch as fm
from .numcore import Rng, grad_check
from .perception import fps
from .policy import PolicyConfig, PolicyModel, WindowSet, policy_loss
from .simenv import TaskSpec, expert_policy, run_episode


def _field_check(loss_fn, field, cond, h=1e-5):
    """Max relative error over field parameters and the condition input."""
    _, grads, g_cond = loss_fn()
    err = grad_check(field.params(), lambda: loss_fn()[0], grads, h)
    if cond is not None:
        err = max(err, grad_check([cond], lambda: loss_fn()[0], [g_cond], h))
    return err


def gradcheck_suite(seed: int = 0, h: float = 1e-5) -> dict:
    rng = Rng(seed)
    n, dim, cdim = 6, 3, 4
    x0 = rng.normal((n, dim))
    x1 = rng.normal((n, dim))
    cond = rng.normal((n, cdim))
    field = fm.VelocityNet(dim, cdim, (16, 16), rng.child(1))
    out = {}
    t = rng.uniform(0.0, 1.0, n)
    out["cfm_loss"] = _field_check(lambda: fm.cfm_loss(field, x0, x1, t, cond), field, cond, h)
    for K in (1, 2):
        sched = fm.SegmentSchedule(K=K, delta_t=0.05, alpha=0.5, lambdas=[1.0, 2.0][:K])
        target = field.copy()
        for p in target.params():
            p += 0.05 * rng.normal(p.shape)
        ts, seg = sched.sample(rng, n)
        # the target branch is stop-gradient, so its condition stays fixed
        # while the live one is perturbed
        frozen = cond.copy()
        out[f"consistency_fm_loss K={K}"] = _field_check(
            lambda: fm.consistency_fm_loss(field, target, sched, x0, x1, ts, seg, cond, frozen),
            field, cond, h)

    # encoder + velocity field through the policy loss
    model = PolicyModel(6, pred_horizon=2, act_dim=2, hidden=(8,), visual_dim=4, rng=rng.child(2))
    model.encoder = type(model.encoder)(rng.child(3), point_sizes=(3, 5, 6), out_dim=4)
    target = model.copy()
    b = 3
    batch = WindowSet(rng.uniform(-1, 1, (b, 2, 5, 3)), rng.uniform(-1, 1, (b, 2, 6)),
                      rng.uniform(-1, 1, (b, 4)))
    xs = rng.normal((b, 4))
    for objective in ("consistency", "cfm"):
        cfg = PolicyConfig(objective=objective, pred_horizon=2, exec_horizon=1,
                           schedule=fm.SegmentSchedule(K=2, delta_t=0.05, alpha=0.5))
        ts, seg = cfg.schedule.sample(rng, b)
        frozen = model.condition(batch.clouds, batch.states)[0]

        def f():
            for m in model.mlps():
                m.mark_modified()
            return policy_loss(model, target, cfg, batch, xs, ts, seg, target_cond=frozen)

        _, grads = f()
        out[f"policy_loss {objective}"] = grad_check(model.params(), lambda: f()[0], grads, h)
    return out


def fps_bruteforce(points, m: int, start: int = 0) -> list[int]:
    """Greedy max-min selection recomputed from scratch at every step."""
    pts = np.asarray(points, dtype=np.float64)
    chosen = [start]
    while len(chosen) < m:
        best, best_i = -1.0, -1
        for i in range(len(pts)):
            if i in chosen:
                continue
            d = min(float(np.sum((pts[i] - pts[j]) ** 2)) for j in chosen)
            if d > best:
                best, best_i = d, i
        chosen.append(best_i)
    return chosen


def oracle_suite(seed: int = 0) -> dict:
    rng = Rng(seed)
    res = {}
    x_star = np.array([0.5, -0.3])
    oracle = fm.PointTargetField(x_star)
    worst = 0.0
    for K in (1, 2):
        sched = fm.SegmentSchedule(K=K)
        x0 = rng.normal((64, 2))
        x1 = np.tile(x_star, (64, 1))
        t, seg = sched.sample(rng, 64)
        worst = max(worst, fm.consistency_fm_loss(oracle, oracle, sched, x0, x1, t, seg)[0])
    res["oracle zero loss"] = (worst <= 1e-10, f"max loss {worst:.1e}")

    x0 = rng.normal((32, 2))
    errs = {"euler-10": np.abs(fm.sample_euler(oracle, x0, None, 10) - x_star).max(),
            "segments K=2": np.abs(fm.sample_segments(oracle, x0, None, 2) - x_star).max()}
    res["point-target samplers"] = (max(errs.values()) <= 1e-9,
                                    ", ".join(f"{k} {v:.1e}" for k, v in errs.items()))

    c = rng.normal(2)
    const = lambda t, x, cond=None: np.broadcast_to(c, x.shape)
    outs = [fm.sample_onestep(const, x0), fm.sample_segments(const, x0, None, 3),
            fm.sample_euler(const, x0, None, 7)]
    err = max(np.abs(o - (x0 + c)).max() for o in outs)
    res["constant-field transport"] = (err <= 1e-12, f"max err {err:.1e}")

    mismatches = 0
    for k in range(200):
        n = int(rng.integers(1, 65))
        pts = rng.normal((n, 3))
        if k % 4 == 0:  # coarse grid to force exact distance ties
            pts = np.round(pts)
        m = int(rng.integers(1, n + 1))
        mismatches += list(fps(pts, m)) != fps_bruteforce(pts, m)
    res["fps vs brute force"] = (mismatches == 0, f"{mismatches}/200 mismatches")

    task = TaskSpec()
    wins = sum(run_episode(expert_policy(task), task, rng.child(100 + i)).success
               for i in range(100))
    res["expert success"] = (wins >= 99, f"{wins}/100 episodes")
    return res
