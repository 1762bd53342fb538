"""Command line entry point: ``lru-online {train,align,gradcheck} --config run.ini``.

Exit codes: 0 success, 1 gradient check failed, 2 bad configuration,
3 non-finite loss during training.
"""
import argparse
import configparser
import csv
import math
import re
import sys
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .diagnostics import (alignment_run, compare_gradients, exact_keys, finite_difference_gradient,
                          sample_coords)
from .learning import RuleKind, Trainer, advance_traces, bptt_gradient, online_sequence_gradient
from .network import ModelConfig, Network, save_checkpoint
from .optim import OptimConfig
from .tasks import CopyTaskConfig, make_dataset, random_batch

EXIT_OK, EXIT_GRADCHECK, EXIT_CONFIG, EXIT_NAN = 0, 1, 2, 3


class ConfigError(Exception):
    pass


@dataclass
class RunSection:
    rule: str = "online"
    seed: int = 0
    epochs: int = 1
    batch_size: int = 50
    warmup_epochs: int = 0
    output_dir: str = "runs/default"
    wall_clock: bool = False


@dataclass
class AlignSection:
    depths: list = field(default_factory=list)
    r_mins: list = field(default_factory=list)
    every: int = 50
    probe_size: int = 50


@dataclass
class GradcheckSection:
    num_layers: int = 1
    state_size: int = 4
    model_size: int = 4
    seq_len: int = 8
    batch_size: int = 2
    seeds: int = 5
    eps: float = 1e-6
    fd_method: str = "central"
    fd_precision: str = "extended"
    tol: float = 1e-5
    coords_per_param: int = 16
    corrupt_traces: bool = False


@dataclass
class RunConfig:
    task: CopyTaskConfig
    model: ModelConfig
    optim: dict
    run: RunSection
    align: AlignSection
    gradcheck: GradcheckSection


# section -> (defaults factory, {key: caster})
_SECTIONS = {
    "task": ("pattern_len", "bits", "padding", "num_samples"),
    "model": ("num_layers", "state_size", "model_size", "dropout", "r_min", "r_max"),
    "optim": ("base_lr", "lr_factor_recurrent", "weight_decay", "beta1", "beta2", "eps"),
    "run": tuple(f.name for f in fields(RunSection)),
    "align": tuple(f.name for f in fields(AlignSection)),
    "gradcheck": tuple(f.name for f in fields(GradcheckSection)),
}

DEFAULTS = {
    "task": {"pattern_len": "5", "bits": "3", "padding": "3", "num_samples": "5000"},
    "model": {"num_layers": "2", "state_size": "32", "model_size": "32", "dropout": "0.0",
              "r_min": "0.0", "r_max": "1.0"},
    "optim": {"base_lr": "2e-3", "lr_factor_recurrent": "0.5", "weight_decay": "0.0",
              "beta1": "0.9", "beta2": "0.999", "eps": "1e-8"},
}


def _bool(s):
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _floats(s):
    return [float(x) for x in s.replace(",", " ").split()]


def _ints(s):
    return [int(x) for x in s.replace(",", " ").split()]


_CASTS = {bool: _bool, int: int, float: float, str: str}


def _line_numbers(text):
    """(section, key) -> 1-based line number, for error messages."""
    where, section = {}, None
    for i, line in enumerate(text.splitlines(), 1):
        m = re.match(r"\s*\[([^\]]+)\]", line)
        if m:
            section = m.group(1).strip()
            where[(section, None)] = i
            continue
        m = re.match(r"\s*([^=:#;\s][^=:]*?)\s*[=:]", line)
        if m and section is not None:
            where[(section, m.group(1).strip().lower())] = i
    return where


def load_config(path, seed=None, rule=None, out=None):
    """Parse an INI run configuration; raises ConfigError with the offending line."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config: {exc}") from exc
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";",))
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as exc:
        line = getattr(exc, "lineno", None)
        msg = re.sub(r"^While reading from .*?: ", "", str(exc).splitlines()[0])
        raise ConfigError(f"{path}:{line}: {msg}" if line else f"{path}: {msg}") from exc
    lines = _line_numbers(text)

    def fail(section, key, msg):
        line = lines.get((section, key), lines.get((section, None), 0))
        raise ConfigError(f"{path}:{line}: [{section}] {key}: {msg}")

    for section in parser.sections():
        if section not in _SECTIONS:
            fail(section, None, "unknown section")
        for key in parser[section]:
            if key not in _SECTIONS[section]:
                fail(section, key, "unknown key")

    def get(section, key, cast, default):
        if parser.has_option(section, key):
            raw = parser.get(section, key)
            try:
                return cast(raw)
            except ValueError as exc:
                fail(section, key, f"invalid value {raw!r} ({exc})")
        return cast(default) if isinstance(default, str) else default

    def build(section, cls, **extra):
        try:
            return cls(**extra)
        except (ValueError, TypeError) as exc:
            fail(section, None, str(exc))

    task_kwargs = {k: get("task", k, int, DEFAULTS["task"][k]) for k in _SECTIONS["task"]}
    run_kwargs = {}
    for f in fields(RunSection):
        run_kwargs[f.name] = get("run", f.name, _CASTS[type(f.default)], f.default)
    if seed is not None:
        run_kwargs["seed"] = seed
    if rule is not None:
        run_kwargs["rule"] = rule
    if out is not None:
        run_kwargs["output_dir"] = out
    run = RunSection(**run_kwargs)
    try:
        RuleKind.parse(run.rule)
    except ValueError as exc:
        fail("run", "rule", str(exc))
    for name in ("epochs", "batch_size"):
        if getattr(run, name) < 1:
            fail("run", name, "must be >= 1")
    task = build("task", CopyTaskConfig, seed=run.seed, **task_kwargs)
    if run.batch_size > task.num_samples:
        fail("run", "batch_size", "larger than task.num_samples")

    model = build("model", ModelConfig,
                  num_layers=get("model", "num_layers", int, DEFAULTS["model"]["num_layers"]),
                  state_size=get("model", "state_size", int, DEFAULTS["model"]["state_size"]),
                  model_size=get("model", "model_size", int, DEFAULTS["model"]["model_size"]),
                  input_dim=task.input_dim, output_dim=task.bits,
                  dropout_p=get("model", "dropout", float, DEFAULTS["model"]["dropout"]),
                  r_min=get("model", "r_min", float, DEFAULTS["model"]["r_min"]),
                  r_max=get("model", "r_max", float, DEFAULTS["model"]["r_max"]))
    optim = {k: get("optim", k, float, DEFAULTS["optim"][k]) for k in _SECTIONS["optim"]}
    build("optim", OptimConfig, base_lr=optim["base_lr"],
          lr_factor_recurrent=optim["lr_factor_recurrent"], weight_decay=optim["weight_decay"])

    align = AlignSection(depths=get("align", "depths", _ints, []),
                         r_mins=get("align", "r_mins", _floats, []),
                         every=get("align", "every", int, 50),
                         probe_size=get("align", "probe_size", int, 50))
    if align.every < 1:
        fail("align", "every", "must be >= 1")
    gc_kwargs = {f.name: get("gradcheck", f.name, _CASTS[type(f.default)], f.default)
                 for f in fields(GradcheckSection)}
    gradcheck = GradcheckSection(**gc_kwargs)
    if gradcheck.fd_method not in ("central", "five-point", "adaptive"):
        fail("gradcheck", "fd_method", "expected central, five-point or adaptive")
    if gradcheck.fd_precision not in ("double", "extended"):
        fail("gradcheck", "fd_precision", "expected double or extended")
    for name in ("num_layers", "state_size", "model_size", "seq_len", "batch_size", "seeds"):
        if getattr(gradcheck, name) < 1:
            fail("gradcheck", name, "must be >= 1")
    return RunConfig(task, model, optim, run, align, gradcheck)


def optim_config(cfg, num_samples=None):
    n = cfg.task.num_samples if num_samples is None else num_samples
    steps_per_epoch = n // cfg.run.batch_size
    o = cfg.optim
    return OptimConfig(base_lr=o["base_lr"], lr_factor_recurrent=o["lr_factor_recurrent"],
                       weight_decay=o["weight_decay"], betas=(o["beta1"], o["beta2"]),
                       eps=o["eps"], warmup_steps=cfg.run.warmup_epochs * steps_per_epoch,
                       total_steps=cfg.run.epochs * steps_per_epoch)


def resolved_ini(cfg):
    """The fully resolved configuration as INI text."""
    t, m, r, a, g = cfg.task, cfg.model, cfg.run, cfg.align, cfg.gradcheck
    sections = {
        "task": {k: getattr(t, k) for k in _SECTIONS["task"]},
        "model": {"num_layers": m.num_layers, "state_size": m.state_size,
                  "model_size": m.model_size, "dropout": m.dropout_p,
                  "r_min": m.r_min, "r_max": m.r_max},
        "optim": dict(cfg.optim),
        "run": {f.name: getattr(r, f.name) for f in fields(r)},
        "align": {"depths": ", ".join(map(str, a.depths)),
                  "r_mins": ", ".join(map(repr, a.r_mins)),
                  "every": a.every, "probe_size": a.probe_size},
        "gradcheck": {f.name: getattr(g, f.name) for f in fields(g)},
    }
    out = []
    for name, values in sections.items():
        out.append(f"[{name}]")
        out.extend(f"{k} = {_fmt_value(v)}" for k, v in values.items())
        out.append("")
    return "\n".join(out)


def _fmt_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def fmt(x):
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    return format(float(x), ".17g")


class CsvWriter:
    def __init__(self, path, columns):
        self._fh = open(path, "w", newline="")
        self._w = csv.writer(self._fh, lineterminator="\n")
        self._w.writerow(columns)

    def row(self, *values):
        self._w.writerow([v if isinstance(v, str) else fmt(v) for v in values])
        self._fh.flush()

    def close(self):
        self._fh.close()


def _prepare_output(cfg):
    out = Path(cfg.run.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved.ini").write_text(resolved_ini(cfg))
    return out


def cmd_train(cfg):
    out = _prepare_output(cfg)
    data = make_dataset(cfg.task)
    net = Network.init(cfg.model, np.random.default_rng(cfg.run.seed))
    trainer = Trainer(net, cfg.run.rule, optim_config(cfg), cfg.run.batch_size, cfg.run.seed)
    writer = CsvWriter(out / "metrics.csv",
                       ["epoch", "step", "train_loss", "train_accuracy", "lr", "wall_seconds"])
    start = time.perf_counter()
    try:
        for epoch in range(1, cfg.run.epochs + 1):
            try:
                m = trainer.train_epoch(data, epoch)
            except FloatingPointError as exc:
                print(f"error: {exc}", file=sys.stderr)
                return EXIT_NAN
            wall = f"{time.perf_counter() - start:.3f}" if cfg.run.wall_clock else ""
            writer.row(m.epoch, m.step, m.train_loss, m.train_accuracy, m.lr, wall)
            print(f"epoch {epoch}: loss {m.train_loss:.4g} acc {m.train_accuracy:.4f}")
            if not math.isfinite(m.train_loss):
                print("error: non-finite training loss", file=sys.stderr)
                return EXIT_NAN
    finally:
        writer.close()
    save_checkpoint(net, out / "checkpoint")
    return EXIT_OK


def cmd_align(cfg):
    a = cfg.align
    if not a.depths and not a.r_mins:
        print("error: [align] needs depths or r_mins", file=sys.stderr)
        return EXIT_CONFIG
    if a.depths and a.r_mins:
        print("error: [align] sweep depths or r_mins, not both", file=sys.stderr)
        return EXIT_CONFIG
    out = _prepare_output(cfg)
    cells = [("depth", d) for d in a.depths] + [("r_min", r) for r in a.r_mins]
    writer = CsvWriter(out / "alignment.csv",
                       ["cell", "step", "layer", "cosine", "mean_cosine", "loss"])
    try:
        for key, value in cells:
            try:
                model = (replace(cfg.model, num_layers=value) if key == "depth"
                         else replace(cfg.model, r_min=value))
            except ValueError as exc:
                print(f"error: [align] {key}={value}: {exc}", file=sys.stderr)
                return EXIT_CONFIG
            label = f"{key}={value}"
            try:
                curve, _, _ = alignment_run(cfg.task, model, optim_config(cfg), cfg.run.epochs,
                                            cfg.run.batch_size, cfg.run.seed, a.every,
                                            a.probe_size, label=label)
            except FloatingPointError as exc:
                print(f"error: {exc}", file=sys.stderr)
                return EXIT_NAN
            for p in curve.points:
                for layer, c in enumerate(p.layer_cosines):
                    writer.row(label, p.step, layer, c, p.mean_cosine, p.loss)
                print(f"{label} step {p.step}: mean cosine {p.mean_cosine:.6f} loss {p.loss:.4g}")
    finally:
        writer.close()
    return EXIT_OK


def _corrupted_trace_law(rule, params, h_prev, u, bu, traces, prev_inst):
    # negative control: drop the state term from the lambda trace
    return advance_traces(rule, params, 0.0 * h_prev, u, bu, traces, prev_inst)


def cmd_gradcheck(cfg):
    g = cfg.gradcheck
    model = replace(cfg.model, num_layers=g.num_layers, state_size=g.state_size,
                    model_size=g.model_size, dropout_p=0.0)
    trace_law = _corrupted_trace_law if g.corrupt_traces else None
    out = Path(cfg.run.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    writer = CsvWriter(out / "gradcheck.csv",
                       ["seed", "rule", "parameter", "max_rel", "mean_rel", "worst_index", "checked"])
    worst = (0.0, None)
    approx_worst = 0.0
    try:
        for k in range(g.seeds):
            seed = cfg.run.seed + k
            rng = np.random.default_rng(seed)
            net = Network.init(model, rng)
            batch = random_batch(rng, g.batch_size, g.seq_len, model.input_dim, model.output_dim)
            coords = sample_coords(net, rng, per_param=g.coords_per_param)
            fd = finite_difference_gradient(net, batch, g.eps, coords=coords,
                                            method=g.fd_method, precision=g.fd_precision)
            estimates = {
                "bptt": bptt_gradient(net, batch),
                "online": online_sequence_gradient(net, batch, RuleKind.ONLINE, trace_law=trace_law),
            }
            for name, est in estimates.items():
                keys = exact_keys(net, name)
                report = compare_gradients(est, fd, keys)
                for pname, p in report.params.items():
                    writer.row(seed, name, pname, p.max_rel, p.mean_rel, p.worst_index, p.checked)
                print(f"seed {seed} {name}: max relative error {report.max_error:.3e}")
                if report.max_error > worst[0]:
                    worst = (report.max_error, (seed, name) + report.worst)
                if name == "online" and len(keys) < len(fd.grads):
                    rest = [n for n in fd.grads if n not in keys]
                    approx_worst = max(approx_worst, compare_gradients(est, fd, rest).max_error)
    finally:
        writer.close()
    if approx_worst > g.tol:
        print(f"warning: online gradients below the last LRU layer differ from the true gradient "
              f"(max relative error {approx_worst:.3e}); this bias is expected and not checked")
    if worst[0] > g.tol:
        seed, rule, pname, idx = worst[1]
        print(f"FAIL: max relative error {worst[0]:.3e} > {g.tol:g} "
              f"(seed {seed}, {rule}, {pname}[{idx}])")
        return EXIT_GRADCHECK
    print(f"PASS: max relative error {worst[0]:.3e} <= {g.tol:g}")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "align": cmd_align, "gradcheck": cmd_gradcheck}


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="lru-online",
        description="Train LRU networks online, track gradient alignment, or check gradients.",
        epilog="exit codes: 0 ok, 1 gradient check failed, 2 bad config, 3 non-finite loss")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="INI run configuration")
    parser.add_argument("--seed", type=int, help="override [run] seed")
    parser.add_argument("--rule", help="override [run] rule")
    parser.add_argument("--out", help="override [run] output_dir")
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, seed=args.seed, rule=args.rule, out=args.out)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return COMMANDS[args.command](cfg)


if __name__ == "__main__":
    sys.exit(main())
