"""Command-line harness: run configuration, dataset and checkpoint files,
training/evaluation/benchmark commands and result emission.

Subcommands::

    demo-gen      expert demonstrations -> dataset file
    train         dataset -> checkpoint + training log
    eval          checkpoint -> result row (success, NFE, timing)
    bench         full comparison: consistency policy vs CFM baseline
    gradcheck     finite-difference checks of every loss
    oracle-tests  closed-form and brute-force oracle checks

Exit codes: 0 success, 1 validation error, 2 runtime or numeric error.
Logs go to standard error; results go to files and standard output.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import struct
import sys
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from . import flowmatch as fm
from . import policy as pol
from .numcore import (ContractError, Mlp, NumericError, OptimizerState, Rng, read_mlp,
                      write_mlp)
from .perception import CloudEncoder, Normalizer
from .simenv import STATE_DIM, EpisodeRecord, TaskSpec, expert_policy, run_episode

log = logging.getLogger("cfmpolicy")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2

DATASET_MAGIC = b"CFMDEMO\x00"
CHECKPOINT_MAGIC = b"CFMCKPT\x00"
FORMAT_VERSION = 1

# fields that depend on the wall clock; ignored when comparing runs
WALL_TIME_FIELDS = ("time_ms_mean", "time_ms_std", "speedup")


class ConfigError(ValueError):
    pass


class FormatError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------


def _check_keys(d: dict, allowed, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object")
    unknown = sorted(set(d) - set(allowed))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")


@dataclass
class RunConfig:
    task: TaskSpec = field(default_factory=TaskSpec)
    policy: pol.PolicyConfig = field(default_factory=pol.PolicyConfig)
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    sampler: str = "onestep"
    out_dir: str = "runs/default"
    demo_seed: int = 1000
    eval_seed: int = 7
    max_expert_retries: int = 50
    timing_calls: int = 200
    timing_warmup: int = 20

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not self.seeds:
            raise ConfigError("seeds must be a non-empty list")
        self.seeds = [int(s) for s in self.seeds]
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be distinct")
        try:
            pol.parse_sampler(self.sampler)
        except ValueError as e:
            raise ConfigError(str(e)) from None
        if self.policy.n_demos < 1:
            raise ConfigError("demo count must be at least 1")
        if self.timing_calls < 1 or self.timing_warmup < 0 or self.max_expert_retries < 0:
            raise ConfigError("timing and retry counts must be non-negative")

    @property
    def schedule(self) -> fm.SegmentSchedule:
        return self.policy.schedule

    def to_dict(self) -> dict:
        return {
            "task": self.task.to_dict(),
            "policy": self.policy.to_dict(),
            "seeds": list(self.seeds),
            "sampler": self.sampler,
            "out_dir": self.out_dir,
            "demo_seed": self.demo_seed,
            "eval_seed": self.eval_seed,
            "max_expert_retries": self.max_expert_retries,
            "timing_calls": self.timing_calls,
            "timing_warmup": self.timing_warmup,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        _check_keys(d, [f.name for f in fields(cls)], "config")
        d = dict(d)
        try:
            if "task" in d:
                _check_keys(d["task"], [f.name for f in fields(TaskSpec)], "config.task")
                d["task"] = TaskSpec(**d["task"])
            if "policy" in d:
                p = dict(d["policy"])
                _check_keys(p, [f.name for f in fields(pol.PolicyConfig)], "config.policy")
                if "schedule" in p:
                    _check_keys(p["schedule"], [f.name for f in fields(fm.SegmentSchedule)],
                                "config.policy.schedule")
                d["policy"] = pol.PolicyConfig(**p)
            return cls(**d)
        except ConfigError:
            raise
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from None

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"invalid JSON: {e}") from None
        return cls.from_dict(d)

    def hash(self) -> str:
        return config_hash(self.to_dict())

    def data_hash(self) -> str:
        """Hash of the settings a demo dataset depends on."""
        return config_hash({"task": self.task.to_dict(), "n_demos": self.policy.n_demos,
                            "demo_seed": self.demo_seed})


def config_hash(d: dict) -> str:
    blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def load_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    with open(path, encoding="utf-8") as fh:
        return RunConfig.from_json(fh.read())


# --------------------------------------------------------------------------
# result rows
# --------------------------------------------------------------------------


@dataclass
class ResultRow:
    task: str
    method: str
    sampler: str
    nfe: int | None
    success_mean: float | None
    success_std: float | None
    time_ms_mean: float | None
    time_ms_std: float | None
    epochs: int
    n_demos: int
    n_seeds: int
    status: str = "ok"

    def to_dict(self) -> dict:
        return asdict(self)


def aggregate(values: Sequence[float]) -> tuple[float | None, float | None]:
    """Mean and population std; the std is only defined with two or more values."""
    if not values:
        return None, None
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), (float(arr.std()) if len(arr) >= 2 else None)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(round(v, 6))
    return str(v)


def write_results(rows: Sequence[ResultRow], out_dir: str, stem: str = "results",
                  extra: dict | None = None) -> tuple[str, str]:
    """One JSON record per row (``.jsonl``) plus a CSV summary."""
    os.makedirs(out_dir, exist_ok=True)
    jpath = os.path.join(out_dir, stem + ".jsonl")
    cpath = os.path.join(out_dir, stem + ".csv")
    with open(jpath, "w", encoding="utf-8") as fh:
        for r in rows:
            fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")
        if extra:
            fh.write(json.dumps(extra, sort_keys=True) + "\n")
    names = [f.name for f in fields(ResultRow)]
    with open(cpath, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for r in rows:
            w.writerow([_fmt(getattr(r, n)) for n in names])
    return jpath, cpath


def strip_wall_time(record: dict) -> dict:
    return {k: v for k, v in record.items()
            if not any(k.startswith(w) for w in WALL_TIME_FIELDS)}


def format_table(rows: Sequence[ResultRow]) -> str:
    head = f"{'task':<16}{'method':<22}{'NFE':>4}  {'success %':>14}  {'ms/call':>14}"
    lines = [head, "-" * len(head)]
    for r in rows:
        if r.success_mean is None:
            succ = r.status
        else:
            succ = f"{r.success_mean:6.1f}" + (f" ± {r.success_std:4.1f}" if r.success_std is not None else "")
        ms = "" if r.time_ms_mean is None else f"{r.time_ms_mean:6.3f} ± {r.time_ms_std or 0:5.3f}"
        lines.append(f"{r.task:<16}{r.method:<22}{_fmt(r.nfe):>4}  {succ:>14}  {ms:>14}")
    return "\n".join(lines)


# --------------------------------------------------------------------------
# binary containers
# --------------------------------------------------------------------------
#
# layout (little endian):
#   magic[8] | u32 version | u32 header_bytes | header | payload
# the header is UTF-8 "key=value" lines sorted by key.


def _write_container(fh, magic: bytes, header: dict):
    text = "".join(f"{k}={header[k]}\n" for k in sorted(header)).encode("utf-8")
    fh.write(magic)
    fh.write(struct.pack("<II", FORMAT_VERSION, len(text)))
    fh.write(text)


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError("truncated file")
    return buf


def _read_container(fh, magic: bytes, what: str) -> dict:
    if _read_exact(fh, len(magic)) != magic:
        raise FormatError(f"not a {what} file (bad magic)")
    version, n = struct.unpack("<II", _read_exact(fh, 8))
    if version != FORMAT_VERSION:
        raise FormatError(f"{what} format version {version}, expected {FORMAT_VERSION}")
    header = {}
    for line in _read_exact(fh, n).decode("utf-8").splitlines():
        k, _, v = line.partition("=")
        header[k] = v
    return header


def _check_hash(header: dict, expected: str | None, what: str):
    if expected is not None and header.get("config_hash") != expected:
        log.warning("%s was written under config %s, current config is %s",
                    what, header.get("config_hash"), expected)


def _f32(fh, n: int) -> np.ndarray:
    return np.frombuffer(_read_exact(fh, 4 * n), "<f4").astype(np.float64)


def _f64(fh, n: int) -> np.ndarray:
    return np.frombuffer(_read_exact(fh, 8 * n), "<f8").astype(np.float64)


def save_dataset(path: str, demos: Sequence[EpisodeRecord], task: TaskSpec, cfg_hash: str):
    """Clouds, states and actions stored as float32; targets as float64."""
    header = {"config_hash": cfg_hash, "n_demos": len(demos), "cloud_points": task.cloud_size,
              "state_dim": STATE_DIM, "act_dim": 2}
    header.update({f"task.{k}": v for k, v in task.to_dict().items()})
    buf = io.BytesIO()
    _write_container(buf, DATASET_MAGIC, header)
    for d in demos:
        buf.write(struct.pack("<IBBB", len(d), int(d.success), int(d.goal), d.targets.shape[0]))
        buf.write(np.ascontiguousarray(d.targets, "<f8").tobytes())
        buf.write(np.ascontiguousarray(d.final_ee, "<f8").tobytes())
        for arr in (d.clouds, d.states, d.actions):
            buf.write(np.ascontiguousarray(arr, "<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_dataset(path: str, expected_hash: str | None = None) -> tuple[list[EpisodeRecord], dict]:
    with open(path, "rb") as fh:
        header = _read_container(fh, DATASET_MAGIC, "dataset")
        _check_hash(header, expected_hash, "dataset")
        n_pts = int(header["cloud_points"])
        s_dim, a_dim = int(header["state_dim"]), int(header["act_dim"])
        demos = []
        for _ in range(int(header["n_demos"])):
            L, success, goal, n_goals = struct.unpack("<IBBB", _read_exact(fh, 7))
            targets = _f64(fh, 2 * n_goals).reshape(n_goals, 2)
            final_ee = _f64(fh, 2)
            clouds = _f32(fh, L * n_pts * 3).reshape(L, n_pts, 3)
            states = _f32(fh, L * s_dim).reshape(L, s_dim)
            actions = _f32(fh, L * a_dim).reshape(L, a_dim)
            demos.append(EpisodeRecord(states, clouds, actions, bool(success), L, targets,
                                       goal, final_ee))
        if fh.read(1):
            raise FormatError("trailing bytes in dataset file")
    return demos, header


def _task_from_header(header: dict) -> TaskSpec:
    kw = {}
    for f in fields(TaskSpec):
        raw = header.get(f"task.{f.name}")
        if raw is not None:
            kw[f.name] = raw if f.type in ("str", str) else json.loads(raw)
    return TaskSpec(**kw)


def _write_normalizer(buf, norm: Normalizer):
    buf.write(struct.pack("<I", norm.dim))
    buf.write(np.ascontiguousarray(norm.lo, "<f8").tobytes())
    buf.write(np.ascontiguousarray(norm.hi, "<f8").tobytes())


def _read_normalizer(fh) -> Normalizer:
    (n,) = struct.unpack("<I", _read_exact(fh, 4))
    return Normalizer(_f64(fh, n), _f64(fh, n))


def save_checkpoint(path: str, trained: pol.TrainedPolicy, run_cfg: RunConfig):
    """Live and EMA parameters, normalizers, optimizer moments and the config echo.

    The file is written to a temporary name and renamed, so an existing
    checkpoint survives a crash mid-write.
    """
    model = trained.model
    opt = trained.opt_state or OptimizerState()
    header = {
        "config_hash": run_cfg.hash(),
        "config": json.dumps(run_cfg.to_dict(), sort_keys=True),
        "epoch": trained.epoch,
        "state_dim": model.state_dim,
        "pred_horizon": model.pred_horizon,
        "act_dim": model.act_dim,
        "n_freq": model.field.n_freq,
        "ema_decay": repr(trained.ema.decay),
        "losses": json.dumps(trained.losses),
        "checkpoints": json.dumps(trained.report.checkpoints),
        "optimizer": json.dumps({"lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2,
                                 "eps": opt.eps, "weight_decay": opt.weight_decay,
                                 "step_count": opt.step_count, "has_moments": bool(opt.m)}),
    }
    buf = io.BytesIO()
    _write_container(buf, CHECKPOINT_MAGIC, header)
    for m in model.mlps() + trained.ema.model.mlps():
        write_mlp(m, buf)
    _write_normalizer(buf, trained.state_norm)
    _write_normalizer(buf, trained.action_norm)
    for arr in opt.m + opt.v:
        buf.write(np.ascontiguousarray(arr, "<f8").tobytes())
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(buf.getvalue())
    os.replace(tmp, path)


def _policy_model(mlps: list[Mlp], state_dim: int, pred_horizon: int, act_dim: int,
                  n_freq: int) -> pol.PolicyModel:
    point, head, net = mlps
    enc = CloudEncoder(point_mlp=point, head=head)
    field = fm.VelocityNet(pred_horizon * act_dim, 2 * (enc.out_dim + state_dim),
                           n_freq=n_freq, mlp=net)
    return pol.PolicyModel(state_dim, pred_horizon, act_dim, encoder=enc, field=field)


def load_checkpoint(path: str, expected_hash: str | None = None) -> tuple[pol.TrainedPolicy, RunConfig]:
    with open(path, "rb") as fh:
        header = _read_container(fh, CHECKPOINT_MAGIC, "checkpoint")
        _check_hash(header, expected_hash, "checkpoint")
        try:
            run_cfg = RunConfig.from_dict(json.loads(header["config"]))
            dims = [int(header[k]) for k in ("state_dim", "pred_horizon", "act_dim", "n_freq")]
            mlps = [read_mlp(fh) for _ in range(6)]
        except (KeyError, ValueError) as e:
            raise FormatError(f"corrupt checkpoint: {e}") from None
        model = _policy_model(mlps[:3], *dims)
        ema_model = _policy_model(mlps[3:], *dims)
        state_norm = _read_normalizer(fh)
        action_norm = _read_normalizer(fh)
        o = json.loads(header["optimizer"])
        opt = OptimizerState(o["lr"], o["beta1"], o["beta2"], o["eps"], o["weight_decay"],
                             o["step_count"])
        if o["has_moments"]:
            shapes = [p.shape for p in model.params()]
            opt.m = [_f64(fh, int(np.prod(s))).reshape(s) for s in shapes]
            opt.v = [_f64(fh, int(np.prod(s))).reshape(s) for s in shapes]
        if fh.read(1):
            raise FormatError("trailing bytes in checkpoint file")
    ema = fm.EmaParams(model, float(header["ema_decay"]))
    ema.model = ema_model
    report = pol.EvalReport(checkpoints=[tuple(c) for c in json.loads(header["checkpoints"])])
    trained = pol.TrainedPolicy(model, ema, state_norm, action_norm, run_cfg.policy,
                                epoch=int(header["epoch"]), opt_state=opt, report=report,
                                losses=[float(x) for x in json.loads(header["losses"])])
    return trained, run_cfg


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def generate_demos(cfg: RunConfig) -> list[EpisodeRecord]:
    """Expert rollouts from ``Rng(demo_seed)``; failed episodes are skipped and
    replaced, up to ``max_expert_retries`` times."""
    task = cfg.task
    root = Rng(cfg.demo_seed)
    expert = expert_policy(task)
    demos, failures, i = [], 0, 0
    while len(demos) < cfg.policy.n_demos:
        rec = run_episode(expert, task, root.child(i))
        i += 1
        if rec.success:
            demos.append(rec)
            log.info("demo %d: success in %d steps", len(demos) - 1, rec.steps)
        else:
            failures += 1
            log.warning("expert episode %d failed (%s); retrying", i - 1, rec.error or "timeout")
            if failures > cfg.max_expert_retries:
                raise RuntimeError(f"expert failed {failures} times, above the retry budget")
    return demos


def cmd_demo_gen(cfg: RunConfig, out: str | None = None) -> str:
    os.makedirs(cfg.out_dir, exist_ok=True)
    path = out or os.path.join(cfg.out_dir, "demos.cfmd")
    demos = generate_demos(cfg)
    save_dataset(path, demos, cfg.task, cfg.data_hash())
    for k, d in enumerate(demos):
        print(f"demo {k}: success={d.success} steps={d.steps}")
    return path


def _checkpoint_eval(task: TaskSpec, cfg: RunConfig, samplers: Sequence[str], store: dict):
    def hook(trained: pol.TrainedPolicy):
        for s in samplers:
            r = pol.evaluate(trained, task, trained.cfg.eval_episodes, cfg.eval_seed, s)
            store.setdefault(s, []).append((trained.epoch, r["success"]))
        first = store[samplers[0]][-1]
        trained.report.checkpoints.append(first)
        log.info("epoch %d: success %s", trained.epoch,
                 ", ".join(f"{s} {store[s][-1][1]:.0f}%" for s in samplers))
    return hook


def cmd_train(cfg: RunConfig, dataset: str, out: str | None = None, seed: int | None = None,
              resume: str | None = None, epochs: int | None = None) -> str:
    """Train on a dataset; writes a checkpoint and ``train_log.jsonl``.

    A checkpoint is saved at every evaluation point, so a numeric failure
    leaves the last good one in place.
    """
    demos, header = load_dataset(dataset, cfg.data_hash())
    task = _task_from_header(header)
    seed = cfg.seeds[0] if seed is None else seed
    os.makedirs(cfg.out_dir, exist_ok=True)
    path = out or os.path.join(cfg.out_dir, "policy.ckpt")
    log_path = os.path.splitext(path)[0] + ".log.jsonl"
    trained = None
    if resume:
        trained, old_cfg = load_checkpoint(resume, cfg.hash())
        log.info("resuming from epoch %d", trained.epoch)
    store: dict = {}
    hook = _checkpoint_eval(task, cfg, [cfg.sampler], store)

    def on_checkpoint(p):
        hook(p)
        save_checkpoint(path, p, cfg)

    try:
        trained = pol.train_policy(demos, cfg.policy, seed, epochs=epochs, policy=trained,
                                   on_checkpoint=on_checkpoint, log=log.info)
    except NumericError as e:
        log.error("training aborted: %s (last good checkpoint kept at %s)", e, path)
        raise
    save_checkpoint(path, trained, cfg)
    with open(log_path, "w", encoding="utf-8") as fh:
        for k, loss in enumerate(trained.losses):
            fh.write(json.dumps({"epoch": k + 1, "loss": loss}) + "\n")
        for ep, rate in trained.report.checkpoints:
            fh.write(json.dumps({"epoch": ep, "success": rate}) + "\n")
    print(f"checkpoint {path} epoch {trained.epoch} final score {trained.report.final_score}")
    return path


def timing_row(trained: pol.TrainedPolicy, task: TaskSpec, sampler: str, cfg: RunConfig) -> dict:
    return pol.time_inference(trained, task, sampler, cfg.timing_calls, cfg.timing_warmup,
                              seed=cfg.eval_seed)


def cmd_eval(cfg: RunConfig, checkpoint: str, sampler: str | None = None,
             seeds: Sequence[int] | None = None, out_dir: str | None = None) -> ResultRow:
    """Evaluate one checkpoint over a list of evaluation seeds."""
    trained, _ = load_checkpoint(checkpoint, cfg.hash())
    sampler = sampler or cfg.sampler
    pol.parse_sampler(sampler)
    task = cfg.task
    seeds = list(seeds or cfg.seeds)
    rates, nfe = [], None
    for s in seeds:
        r = pol.evaluate(trained, task, trained.cfg.eval_episodes, s, sampler)
        rates.append(r["success"])
        nfe = r["nfe"]
        log.info("seed %d: success %.1f%%", s, r["success"])
    t = timing_row(trained, task, sampler, cfg)
    mean, std = aggregate(rates)
    row = ResultRow(task.variant, "checkpoint", sampler, t["nfe"] if nfe is None else nfe,
                    mean, std, t["time_ms_mean"], t["time_ms_std"], trained.epoch,
                    cfg.policy.n_demos, len(seeds))
    write_results([row], out_dir or cfg.out_dir, "eval")
    print(format_table([row]))
    return row


METHODS = {
    # method tag -> (objective, samplers evaluated at every checkpoint)
    # the baseline runs first: its score is the reference for the flow policy
    "cfm": ("cfm", ("euler-10",)),
    "flowpolicy": ("consistency", ("onestep", "segments")),
}
ROWS = (("flowpolicy-onestep", "flowpolicy", "onestep"),
        ("flowpolicy-segments", "flowpolicy", "segments"),
        ("cfm-euler10", "cfm", "euler-10"))


def run_cell(cfg: RunConfig, demos, method: str, seed: int, cell_dir: str) -> dict:
    """Train one (method, seed) cell; returns per-sampler final scores and timings."""
    objective, samplers = METHODS[method]
    pcfg = pol.PolicyConfig(**{**cfg.policy.to_dict(), "objective": objective,
                               "sampler": samplers[0]})
    store: dict = {}
    hook = _checkpoint_eval(cfg.task, cfg, samplers, store)
    trained = pol.train_policy(demos, pcfg, seed, on_checkpoint=hook)
    os.makedirs(cell_dir, exist_ok=True)
    save_checkpoint(os.path.join(cell_dir, f"{method}-seed{seed}.ckpt"), trained, cfg)
    out = {}
    for s in samplers:
        rates = [r for _, r in store.get(s, [])]
        t = timing_row(trained, cfg.task, s, cfg)
        out[s] = {"score": pol.top_k_mean(rates, 5), "checkpoints": store.get(s, []),
                  "nfe": t["nfe"], "times": t}
    if method == "flowpolicy":
        # same weights, multi-step sampler: the speedup reference
        out["euler-10"] = {"times": timing_row(trained, cfg.task, "euler-10", cfg)}
        out["sampler-only"] = {
            s: pol.time_sampler(trained, cfg.task, s, cfg.timing_calls, cfg.timing_warmup,
                                seed=cfg.eval_seed)
            for s in ("onestep", "euler-10")}
    return out


def cmd_bench(cfg: RunConfig, out_dir: str | None = None) -> list[ResultRow]:
    out_dir = out_dir or cfg.out_dir
    os.makedirs(out_dir, exist_ok=True)
    demo_path = os.path.join(out_dir, "demos.cfmd")
    save_dataset(demo_path, generate_demos(cfg), cfg.task, cfg.data_hash())
    demos, _ = load_dataset(demo_path, cfg.data_hash())
    cells: dict = {}
    failures: dict = {}
    for method in METHODS:
        for seed in cfg.seeds:
            log.info("training %s seed %d", method, seed)
            try:
                cells[(method, seed)] = run_cell(cfg, demos, method, seed,
                                                 os.path.join(out_dir, "cells"))
            except (NumericError, ContractError, RuntimeError) as e:
                log.error("%s seed %d failed: %s", method, seed, e)
                failures[(method, seed)] = str(e)
    rows = []
    for tag, method, sampler in ROWS:
        got = [cells[(method, s)][sampler] for s in cfg.seeds if (method, s) in cells]
        scores = [g["score"] for g in got if g["score"] is not None]
        times = [g["times"]["time_ms_mean"] for g in got]
        mean, std = aggregate(scores)
        tmean, tstd = aggregate(times)
        n_failed = sum((method, s) in failures for s in cfg.seeds)
        status = "ok" if not n_failed else f"failed seeds: {n_failed}"
        rows.append(ResultRow(cfg.task.variant, tag, sampler, got[0]["nfe"] if got else None,
                              mean, std, tmean, tstd if tstd is not None else (0.0 if times else None),
                              cfg.policy.epochs, cfg.policy.n_demos, len(scores), status))
    extra = {"record": "per_seed"}
    for (method, seed), res in sorted(cells.items()):
        for s, v in res.items():
            if "score" in v:
                extra[f"{method}/{s}/seed{seed}"] = {"score": v["score"],
                                                     "checkpoints": v["checkpoints"]}
    speedups, sampler_speedups = [], []
    for seed in cfg.seeds:
        res = cells.get(("flowpolicy", seed))
        if res:
            speedups.append(res["euler-10"]["times"]["time_ms_mean"]
                            / res["onestep"]["times"]["time_ms_mean"])
            only = res["sampler-only"]
            sampler_speedups.append(only["euler-10"]["time_ms_mean"]
                                    / only["onestep"]["time_ms_mean"])
    summary = {"record": "summary", "speedup_euler10_over_onestep": aggregate(speedups)[0],
               "speedup_sampler_euler10_over_onestep": aggregate(sampler_speedups)[0]}
    write_results(rows, out_dir, "results", extra)
    with open(os.path.join(out_dir, "summary.json"), "w", encoding="utf-8") as fh:
        fh.write(json.dumps(summary, sort_keys=True) + "\n")
    print(format_table(rows))
    if summary["speedup_euler10_over_onestep"] is not None:
        print(f"speedup (euler-10 / onestep, same weights): "
              f"{summary['speedup_euler10_over_onestep']:.2f}x per act call, "
              f"{summary['speedup_sampler_euler10_over_onestep']:.2f}x sampler only")
    return rows


def cmd_gradcheck(seed: int = 0) -> dict:
    """Finite-difference checks (h = 1e-5) of every training loss."""
    from .checks import gradcheck_suite

    res = gradcheck_suite(seed)
    for k, v in res.items():
        print(f"{k:<40} max rel err {v:.2e}")
    return res


def cmd_oracle_tests(seed: int = 0) -> dict:
    from .checks import oracle_suite

    res = oracle_suite(seed)
    for k, (ok, detail) in res.items():
        print(f"{'PASS' if ok else 'FAIL'}  {k:<36} {detail}")
    return res


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cfmpolicy", description=__doc__.split("\n")[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config (JSON)")
    common.add_argument("--seed", type=int, help="override the seed")
    common.add_argument("--out", help="output path or directory")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("demo-gen", parents=[common], help="write expert demonstrations")
    t = sub.add_parser("train", parents=[common], help="train a policy on a dataset")
    t.add_argument("--dataset", required=True)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--epochs", type=int, help="stop at this epoch")
    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--sampler")
    sub.add_parser("bench", parents=[common], help="full method comparison")
    sub.add_parser("gradcheck", parents=[common], help="gradient checks")
    sub.add_parser("oracle-tests", parents=[common], help="oracle checks")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        stream=sys.stderr, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None and args.command not in ("train", "eval"):
            cfg.seeds = [args.seed]
            if args.command == "demo-gen":
                cfg.demo_seed = args.seed
        if args.command == "demo-gen":
            cmd_demo_gen(cfg, args.out)
        elif args.command == "train":
            cmd_train(cfg, args.dataset, args.out, args.seed, args.resume, args.epochs)
        elif args.command == "eval":
            seeds = [args.seed] if args.seed is not None else None
            cmd_eval(cfg, args.checkpoint, args.sampler, seeds, args.out)
        elif args.command == "bench":
            cmd_bench(cfg, args.out)
        elif args.command == "gradcheck":
            res = cmd_gradcheck(args.seed or 0)
            return EXIT_OK if max(res.values()) <= 1e-4 else EXIT_RUNTIME
        elif args.command == "oracle-tests":
            res = cmd_oracle_tests(args.seed or 0)
            return EXIT_OK if all(ok for ok, _ in res.values()) else EXIT_RUNTIME
    except (ConfigError, ValueError) as e:
        log.error("%s", e)
        return EXIT_VALIDATION
    except (FormatError, NumericError, ContractError, RuntimeError, OSError) as e:
        log.error("%s", e)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
