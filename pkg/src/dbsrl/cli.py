"""Command-line workflow: collect, train, finetune, distill, train-dlsm, ope, compare, timing.

Every subcommand reads optional ``key = value`` defaults from ``--config``,
lets explicit flags override them, writes its main output to ``--out`` and a
``<out>.manifest.json`` next to it holding the resolved config and the
SHA-256 of every input file. Exit codes: 0 success, 1 runtime failure,
2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import re
import sys
import warnings
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import dlsm, ope
from .actor_critic import CriticNet, TrainConfig, TrainingError, behavior_policy_uniform, load_agent, load_policy, save_agent, train_offline
from .config import ConfigError, read_kv
from .diffnum.checkpoint import CheckpointError
from .distill import DistillConfig, distill, fidelity_report, split_holdout, states_of
from .env import PatientProfile, SessionError, run_session
from .replay import ReplayBuffer, ReplayError, Trajectory, load_many
from .replay import save as save_buffer

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
COMPARE_METRICS = ("energy", "mean_beta", "grasp", "rating", "tremor")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found or unreadable: {path}")
    return p


def _resolve(args, defaults: dict) -> dict:
    """defaults < config file < explicit flags."""
    resolved = dict(defaults)
    if args.config:
        try:
            values = read_kv(_require_file(args.config, "config file"))
        except ConfigError as exc:
            raise UsageError(str(exc)) from exc
        unknown = set(values) - set(defaults)
        if unknown:
            raise UsageError(f"unknown config keys for {args.command}: {sorted(unknown)}")
        resolved.update(values)
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            resolved[key] = value
    return resolved


def _as_list(value) -> list:
    if value is None:
        return []
    if isinstance(value, (list, tuple)):
        return list(value)
    return [value]


PATH_KEYS = ("buffer", "source", "teacher", "student", "dlsm", "policy", "profile")


def _portable(config: dict) -> dict:
    """Config with file paths cut to base names, so manifests do not depend on the working directory."""
    out = dict(config)
    for key in PATH_KEYS:
        value = out.get(key)
        if isinstance(value, (list, tuple)):
            out[key] = [Path(v).name for v in value]
        elif isinstance(value, str):
            out[key] = Path(value).name
    controller = out.get("controller")
    if isinstance(controller, str):
        kind, arg = parse_controller(controller)
        if kind == "checkpoint":
            out["controller"] = f"checkpoint({Path(arg).name})"
    return out


def _write_manifest(out: Path, command: str, config: dict, inputs: list, outputs: list) -> None:
    """Inputs are identified by file name and content hash, never by timestamps."""
    doc = {
        "command": command,
        "config": _portable(config),
        "inputs": [{"name": Path(p).name, "sha256": sha256_file(p)} for p in inputs],
        "outputs": [{"name": Path(p).name, "sha256": sha256_file(p)} for p in outputs],
    }
    Path(f"{out}.manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _write_csv(path: Path, header: list, rows: list) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    Path(path).write_text(buf.getvalue())


def _fmt(x) -> str:
    if x is None:
        return "NA"
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (float, np.floating)):
        return "NA" if np.isnan(x) else repr(float(x))
    return str(x)


def _load_buffers(paths) -> ReplayBuffer:
    paths = _as_list(paths)
    if not paths:
        raise UsageError("at least one --buffer is required")
    for p in paths:
        _require_file(p, "buffer")
    return load_many(paths)


def _load_profile(path) -> PatientProfile:
    if not path:
        return PatientProfile()
    try:
        return PatientProfile.from_file(_require_file(path, "profile"))
    except (ConfigError, ValueError, TypeError) as exc:
        raise UsageError(f"invalid profile {path}: {exc}") from exc


def _session_seeds(seed: int, n: int) -> list[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


_SPEC = re.compile(r"^\s*(random|constant|checkpoint)\s*[(:]\s*([^)]*?)\s*\)?\s*$")


def parse_controller(spec: str):
    """``random(B)``, ``constant(a)`` or ``checkpoint(path)``; ``kind:arg`` also accepted."""
    m = _SPEC.match(spec or "")
    if not m:
        raise UsageError(f"invalid controller spec {spec!r}; expected random(B), constant(a) or checkpoint(path)")
    kind, arg = m.groups()
    if kind == "checkpoint":
        return kind, str(_require_file(arg, "controller checkpoint"))
    try:
        value = float(arg)
    except ValueError:
        raise UsageError(f"invalid number in controller spec {spec!r}") from None
    if kind == "random" and not 0.0 <= value < 1.0:
        raise UsageError(f"random(B) needs 0 <= B < 1, got {value}")
    if kind == "constant" and not 0.0 <= value <= 1.0:
        raise UsageError(f"constant(a) needs 0 <= a <= 1, got {value}")
    return kind, value


def _controller_id(kind: str, arg) -> str:
    if kind == "checkpoint":
        return Path(arg).stem
    if kind == "constant" and arg == 1.0:
        return "cdbs"
    return f"{kind}{arg:g}"


# ---------------------------------------------------------------------------
# subcommands


def cmd_collect(args) -> int:
    cfg = _resolve(args, {"profile": None, "controller": "random(0.3)", "sessions": 10, "horizon": 150, "seed": 0, "controller_id": None, "window": 10})
    kind, arg = parse_controller(cfg["controller"])
    profile = _load_profile(cfg["profile"])
    cid = cfg["controller_id"] or _controller_id(kind, arg)
    out = Path(args.out)
    existing = load_many([out]) if out.exists() else ReplayBuffer()
    policy = load_policy(arg)[0] if kind == "checkpoint" else None
    inputs = [p for p in (cfg["profile"], arg if kind == "checkpoint" else None) if p]
    if out.exists():
        inputs.append(out)
    manifest_inputs = [(p, sha256_file(p)) for p in inputs]

    for i, s in enumerate(_session_seeds(int(cfg["seed"]), int(cfg["sessions"]))):
        if kind == "random":
            controller = behavior_policy_uniform(arg, s)
        elif kind == "constant":
            controller = lambda state, a=arg: a
        else:
            controller = policy
        traj = run_session(
            controller, profile, int(cfg["horizon"]), s,
            session_id=f"{profile.profile_id}-{cid}-{cfg['seed']}-{i:04d}",
            controller_id=cid, window=int(cfg["window"]),
        )
        existing.append(traj)
    save_buffer(existing, out)
    doc = {
        "command": "collect",
        "config": _portable(cfg),
        "inputs": [{"name": Path(p).name, "sha256": h} for p, h in manifest_inputs],
        "outputs": [{"name": out.name, "sha256": sha256_file(out)}],
    }
    Path(f"{out}.manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def _train_defaults(mode: str) -> dict:
    d = {f.name: f.default for f in fields(TrainConfig)}
    d["hidden"] = list(d["hidden"])
    d["mode"] = mode
    if mode == "finetune":
        d["actor_lr"] = 1e-6
        d["critic_lr"] = 1e-6
    return d


def _run_training(args, mode: str) -> int:
    defaults = _train_defaults(mode)
    defaults.update({"buffer": None, "source": None})
    cfg = _resolve(args, defaults)
    buffer = _load_buffers(cfg["buffer"])
    cfg["hidden"] = _as_list(cfg["hidden"])
    tc = TrainConfig(**{k: v for k, v in cfg.items() if k not in ("buffer", "source")})
    actor = critic = None
    inputs = list(_as_list(cfg["buffer"]))
    if mode == "finetune":
        if not cfg["source"]:
            raise UsageError("finetune needs --source <checkpoint>")
        actor, critic, _ = load_agent(_require_file(cfg["source"], "source checkpoint"))
        if critic is None:
            critic = CriticNet(actor.state_dim, tc.hidden, tc.seed)
        inputs.append(cfg["source"])
    for msg in tc.lr_warnings():
        print(f"warning: {msg}", file=sys.stderr)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        actor, critic, log = train_offline(buffer, tc, actor, critic)
    out = Path(args.out)
    save_agent(out, actor, critic, {"train_config": tc.to_dict()})
    log_path = Path(f"{out}.log.csv")
    _write_csv(log_path, ["step", "critic_loss", "actor_q", "mean_action"], [[_fmt(v) for v in row] for row in log.rows()])
    _write_manifest(out, mode if mode == "finetune" else "train", cfg, inputs, [out, log_path])
    return EXIT_OK


def cmd_train(args) -> int:
    return _run_training(args, "scratch")


def cmd_finetune(args) -> int:
    return _run_training(args, "finetune")


def cmd_distill(args) -> int:
    defaults = {f.name: f.default for f in fields(DistillConfig)}
    defaults["hidden"] = list(defaults["hidden"])
    defaults.update({"buffer": None, "teacher": None})
    cfg = _resolve(args, defaults)
    if not cfg["teacher"]:
        raise UsageError("distill needs --teacher <checkpoint>")
    teacher, _ = load_policy(_require_file(cfg["teacher"], "teacher checkpoint"))
    buffer = _load_buffers(cfg["buffer"])
    cfg["hidden"] = _as_list(cfg["hidden"])
    dc = DistillConfig(**{k: v for k, v in cfg.items() if k not in ("buffer", "teacher")})
    result = distill(teacher, dc, buffer)
    out = Path(args.out)
    save_agent(out, result.student, None, {"distill_config": dc.to_dict(), "final_loss": result.final_loss})
    log_path = Path(f"{out}.log.csv")
    _write_csv(log_path, ["step", "loss"], [[i, _fmt(v)] for i, v in enumerate(result.losses)])
    _write_manifest(out, "distill", cfg, [*_as_list(cfg["buffer"]), cfg["teacher"]], [out, log_path])
    return EXIT_OK


def cmd_train_dlsm(args) -> int:
    defaults = {f.name: f.default for f in fields(dlsm.DlsmConfig) if f.name != "state_dim"}
    defaults["buffer"] = None
    cfg = _resolve(args, defaults)
    buffer = _load_buffers(cfg["buffer"])
    W = buffer.trajectories[0].states.shape[1]
    dc = dlsm.DlsmConfig(state_dim=W, **{k: v for k, v in cfg.items() if k != "buffer"})
    result = dlsm.train(dlsm.DlsmParams(dc, dc.seed), buffer)
    out = Path(args.out)
    dlsm.save(out, result.params, {"final_elbo": result.elbo_curve[-1] if result.elbo_curve else None})
    log_path = Path(f"{out}.log.csv")
    _write_csv(log_path, ["iteration", "elbo"], [[i, _fmt(v)] for i, v in enumerate(result.elbo_curve)])
    _write_manifest(out, "train-dlsm", cfg, _as_list(cfg["buffer"]), [out, log_path])
    return EXIT_OK


def _per_seed(items: list, K: int, what: str) -> list:
    if len(items) == 1:
        return items * K
    if len(items) != K:
        raise UsageError(f"give either one {what} or one per seed ({K}), got {len(items)}")
    return items


def ground_truth(policy, profile: PatientProfile, n: int, horizon: int, seed: int) -> float:
    """Mean total return over ``n`` fresh environment sessions."""
    return float(np.mean([run_session(policy, profile, horizon, s).total_return() for s in _session_seeds(seed, n)]))


def cmd_ope(args) -> int:
    cfg = _resolve(args, {
        "dlsm": None, "policy": None, "buffer": None, "profile": None,
        "M": 100, "horizon": 150, "gamma": 0.99, "seeds": [0, 1, 2], "behavior_B": 0.0,
        "sigma_is": 0.1, "n_truth": 100, "truth_seed": 1_000_003, "seed": None,
    })
    seeds = [int(s) for s in _as_list(cfg["seeds"])]
    if cfg["seed"] is not None:
        seeds = [int(cfg["seed"])]
    K = len(seeds)
    policies = _as_list(cfg["policy"])
    if not policies:
        raise UsageError("ope needs at least one --policy checkpoint")
    models = _per_seed(_as_list(cfg["dlsm"]), K, "--dlsm") if cfg["dlsm"] else None
    if models is None:
        raise UsageError("ope needs --dlsm <checkpoint>")
    buffers = _per_seed(_as_list(cfg["buffer"]), K, "--buffer")
    loaded = {p: load_policy(_require_file(p, "policy checkpoint"))[0] for p in policies}
    ids = [Path(p).stem for p in policies]
    if len(set(ids)) != len(ids):
        raise UsageError("policy checkpoint names must be unique")
    for p in set(models) | set(buffers):
        _require_file(p, "input")
    profile = _load_profile(cfg["profile"]) if cfg["profile"] else None
    behavior = ope.UniformBehavior(float(cfg["behavior_B"]))

    truth = None
    if profile is not None:
        truth = {pid: ground_truth(loaded[p], profile, int(cfg["n_truth"]), int(cfg["horizon"]), int(cfg["truth_seed"])) for pid, p in zip(ids, policies)}

    est_rows, summary_rows, selection = [], [], {}
    for seed, model_path, buf_path in zip(seeds, models, buffers):
        params, _ = dlsm.load(model_path)
        trajs = load_many([buf_path]).trajectories
        records = []
        for pid, p in zip(ids, policies):
            pol = loaded[p]
            d = dlsm.rollout(params, pol, int(cfg["horizon"]), int(cfg["M"]), float(cfg["gamma"]), seed).estimate
            i = ope.importance_sampling(trajs, ope.SmoothedTarget(pol, float(cfg["sigma_is"])), behavior, float(cfg["gamma"]))
            records.append(ope.PolicyEvalRecord(pid, truth[pid] if truth else float("nan"), {"dlsm": d, "is": i.estimate}))
        selection[str(seed)] = max(records, key=lambda r: r.estimates["dlsm"]).policy_id
        for est in ("dlsm", "is"):
            for r in records:
                row = [seed, r.policy_id, est]
                if truth:
                    row += [_fmt(r.actual), _fmt(r.estimates[est]), _fmt(ope.mae(r.actual, r.estimates[est]))]
                else:
                    row += [_fmt(r.estimates[est])]
                est_rows.append(["estimate", *row, "", ""] if truth else ["estimate", *row])
            if truth:
                if len(records) >= 2:
                    rho = ope.rank_correlation(records, est)
                    try:
                        reg = ope.regret_at_1(records, est)
                    except ZeroDivisionError:
                        reg = None
                else:
                    rho = reg = None
                summary_rows.append(["summary", seed, "", est, "", "", "", _fmt(rho), _fmt(reg)])

    out = Path(args.out)
    if truth:
        header = ["row", "seed", "policy_id", "estimator", "V", "V_hat", "mae", "rank_correlation", "regret_at_1"]
    else:
        header = ["row", "seed", "policy_id", "estimator", "V_hat"]
    _write_csv(out, header, est_rows + summary_rows)
    cfg = {**cfg, "selected_by_dlsm": selection}
    inputs = [*policies, *dict.fromkeys(models), *dict.fromkeys(buffers)] + ([cfg["profile"]] if cfg["profile"] else [])
    _write_manifest(out, "ope", cfg, inputs, [out])
    return EXIT_OK


def session_metrics(traj: Trajectory, energy: str = "amplitude") -> dict:
    a = traj.actions
    return {
        "energy": float(np.mean(a * a) if energy == "amplitude2" else np.mean(a)),
        "mean_beta": float(np.mean(traj.states[1:, -1])),
        "grasp": traj.qoc.grasp_hz,
        "rating": traj.qoc.rate,
        "tremor": traj.qoc.tremor_pct,
    }


def cmd_compare(args) -> int:
    cfg = _resolve(args, {"buffer": None, "reference": "cdbs", "energy": "amplitude", "alpha": 0.05})
    if cfg["energy"] not in ("amplitude", "amplitude2"):
        raise UsageError("energy must be 'amplitude' or 'amplitude2'")
    buffer = _load_buffers(cfg["buffer"])
    groups = buffer.by_controller()
    ref = cfg["reference"]
    if ref not in groups:
        raise UsageError(f"reference controller {ref!r} not found; present: {sorted(groups)}")
    metrics = {cid: [session_metrics(t, cfg["energy"]) for t in sorted(trajs, key=lambda t: t.session_id)] for cid, trajs in groups.items()}
    header = ["controller_id", "n_sessions"]
    for m in COMPARE_METRICS:
        header += [f"{m}_mean", f"{m}_ref_mean", f"{m}_U", f"{m}_p", f"{m}_significant"]
    rows = []
    ref_vals = {m: [x[m] for x in metrics[ref]] for m in COMPARE_METRICS}
    for cid in sorted(groups, key=lambda c: (c != ref, c)):
        row = [cid, len(metrics[cid])]
        for m in COMPARE_METRICS:
            vals = [x[m] for x in metrics[cid]]
            test = ope.wilcoxon_rank_sum(ref_vals[m], vals)
            row += [_fmt(float(np.mean(vals))), _fmt(float(np.mean(ref_vals[m]))), _fmt(test.U), _fmt(test.p_value), _fmt(test.p_value < float(cfg["alpha"]))]
        rows.append(row)
    out = Path(args.out)
    _write_csv(out, header, rows)
    _write_manifest(out, "compare", cfg, _as_list(cfg["buffer"]), [out])
    return EXIT_OK


def cmd_timing(args) -> int:
    cfg = _resolve(args, {"teacher": None, "student": None, "buffer": None, "n_timing": 200, "holdout_frac": 0.1})
    if not (cfg["teacher"] and cfg["student"]):
        raise UsageError("timing needs --teacher and --student checkpoints")
    teacher, _ = load_policy(_require_file(cfg["teacher"], "teacher checkpoint"))
    student, _ = load_policy(_require_file(cfg["student"], "student checkpoint"))
    buffer = _load_buffers(cfg["buffer"])
    _, held = split_holdout(buffer, float(cfg["holdout_frac"]))
    states = states_of(held or buffer.trajectories)
    report = fidelity_report(teacher, student, states, int(cfg["n_timing"]))
    timing = report.pop("timing")
    out = Path(args.out)
    out.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    # wall-clock measurements cannot be reproduced byte for byte; keep them apart
    summary = {name: {k: v for k, v in t.items() if k != "samples"} for name, t in timing.items()}
    summary["student_faster"] = summary["student"]["median_s"] < summary["teacher"]["median_s"]
    Path(f"{out}.timing.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _write_manifest(out, "timing", cfg, [cfg["teacher"], cfg["student"], *_as_list(cfg["buffer"])], [out])
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _ints(text: str):
    return [int(x) for x in text.split(",") if x.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dbsrl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, out_help):
        p.add_argument("--config", help="key = value file with defaults for this command")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", required=True, help=out_help)

    p = sub.add_parser("collect", help="run sessions with a controller and append them to a buffer file")
    common(p, "buffer file (JSON lines); appended to if it exists")
    p.add_argument("--profile", help="patient profile (key = value); reference profile by default")
    p.add_argument("--controller", help="random(B), constant(a) or checkpoint(path)")
    p.add_argument("--controller-id", dest="controller_id")
    p.add_argument("--sessions", type=int)
    p.add_argument("--horizon", type=int)
    p.add_argument("--window", type=int)
    p.set_defaults(func=cmd_collect)

    for name, func, helptext in (("train", cmd_train, "train an actor-critic from scratch"), ("finetune", cmd_finetune, "fine-tune an existing agent")):
        p = sub.add_parser(name, help=helptext)
        common(p, "agent checkpoint")
        p.add_argument("--buffer", action="append")
        p.add_argument("--steps", type=int)
        p.add_argument("--batch-size", dest="batch_size", type=int)
        p.add_argument("--actor-lr", dest="actor_lr", type=float)
        p.add_argument("--critic-lr", dest="critic_lr", type=float)
        p.add_argument("--gamma", type=float)
        p.add_argument("--tau", type=float)
        if name == "finetune":
            p.add_argument("--source", help="checkpoint to start from")
        p.set_defaults(func=func)

    p = sub.add_parser("distill", help="compress a teacher policy into a small student")
    common(p, "student checkpoint")
    p.add_argument("--teacher")
    p.add_argument("--buffer", action="append")
    p.add_argument("--steps", type=int)
    p.add_argument("--n-aug", dest="n_aug", type=int)
    p.add_argument("--sigma", type=float)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("train-dlsm", help="fit the latent sequential model by ELBO maximization")
    common(p, "model checkpoint")
    p.add_argument("--buffer", action="append")
    p.add_argument("--max-iter", dest="max_iter", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--cell", choices=["gru", "lstm"])
    p.set_defaults(func=cmd_train_dlsm)

    p = sub.add_parser("ope", help="estimate policy returns with the model and importance sampling")
    common(p, "report CSV")
    p.add_argument("--dlsm", action="append", help="one model, or one per seed")
    p.add_argument("--policy", action="append", help="policy checkpoint (repeat)")
    p.add_argument("--buffer", action="append", help="one buffer, or one per seed")
    p.add_argument("--profile", help="patient profile for ground-truth rollouts")
    p.add_argument("--seeds", type=_ints, help="comma-separated rollout seeds")
    p.add_argument("--M", type=int)
    p.add_argument("--horizon", type=int)
    p.add_argument("--gamma", type=float)
    p.add_argument("--behavior-B", dest="behavior_B", type=float)
    p.add_argument("--sigma-is", dest="sigma_is", type=float)
    p.add_argument("--n-truth", dest="n_truth", type=int)
    p.set_defaults(func=cmd_ope)

    p = sub.add_parser("compare", help="rank-sum tests of each controller against the reference")
    common(p, "comparison CSV")
    p.add_argument("--buffer", action="append")
    p.add_argument("--reference")
    p.add_argument("--energy", choices=["amplitude", "amplitude2"])
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("timing", help="teacher/student deviation and forward-pass timing")
    common(p, "deviation report (JSON); timings go to <out>.timing.json")
    p.add_argument("--teacher")
    p.add_argument("--student")
    p.add_argument("--buffer", action="append")
    p.add_argument("--n-timing", dest="n_timing", type=int)
    p.set_defaults(func=cmd_timing)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingError, SessionError, ReplayError, CheckpointError, FloatingPointError, ArithmeticError) as exc:
        print(f"failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ValueError, TypeError) as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
