"""Command-line entry point.

Subcommands: gen-data, train, adapt, plug, sequence, cross-eval, report.
Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric error.

Settings come from (lowest to highest priority) built-in defaults, the
``DISC_SEED`` environment variable (seed only), an optional ``key = value``
file given with ``--config``, and explicit flags. The resolved settings are
echoed in the same ``key = value`` format, so an echo can be fed back with
``--config`` to reproduce a run.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import harness
from .adapt import AdaptConfig, adapt, iterate_batches
from .binio import fnv1a_64, read_array_file, write_array_file
from .domains import _DEFAULT_DOMAIN_SEEDS, KINDS, class_glyph, DatasetSpec, DomainSpec, build_sequence, load_sequence, save_sequence
from .errors import ConfigError, DataError, DiscError, NumericError
from .stats_bank import StatsBank, capture, load_bank, plug, save_bank
from .tensor_nn import ConvBlock, ModelConfig, build_model, forward, load_model, save_model
from .trainer import EpochRecord, TrainConfig, TrainLog, evaluate, train_offline, train_online

PROBE_SIZE = 64
ALL_METHODS = ",".join(m.value for m in harness.METHOD_ORDER)


@dataclass
class RunConfig:
    seed: int = 0
    data_dir: str = "data"
    checkpoint_dir: str = "checkpoints"
    bank_path: str = ""  # empty means <checkpoint_dir>/bank.bin
    report_dir: str = "reports"
    # dataset
    n_classes: int = 8
    height: int = 32
    width: int = 32
    n_train: int = 4000
    n_val: int = 400
    n_test: int = 2000
    severities: str = "fog=0.8,rain=0.8,snow=0.8"
    # model
    blocks: str = "16,32,64"
    # training
    lr0: float = 0.01
    train_batch_size: int = 16
    patience: int = 5
    lr_factor: float = 3.0
    max_lr_drops: int = 3
    max_epochs: int = 200
    # adaptation
    rho0: float = 0.1
    omega: float = 0.94
    zeta: float = 0.005
    adapt_batch_size: int = 16
    max_batches: int = 100
    tol: float = 1e-3
    window: int = 3
    # experiments
    methods: str = ALL_METHODS
    regime: str = "online"
    repeats: int = 5
    classes: str = "0,1,2"

    def resolved_bank_path(self) -> Path:
        return Path(self.bank_path) if self.bank_path else Path(self.checkpoint_dir) / "bank.bin"

    def echo(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == "bank_path":
                value = str(self.resolved_bank_path())
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    # derived configs

    def severity_map(self) -> dict[str, float]:
        out = {}
        for item in filter(None, (s.strip() for s in self.severities.split(","))):
            if "=" not in item:
                raise ConfigError(f"severity entry {item!r} is not kind=value")
            kind, value = (s.strip() for s in item.split("=", 1))
            if kind not in KINDS or kind == "clear":
                raise ConfigError(f"severity given for unknown or uncorrupted domain {kind!r}")
            out[kind] = _to_float(value, f"severity of {kind}")
        return out

    def dataset_spec(self) -> DatasetSpec:
        return DatasetSpec(self.n_classes, 3, self.height, self.width, self.n_train, self.n_val, self.n_test, self.seed)

    def domains(self) -> list[DomainSpec]:
        sev = self.severity_map()
        return [DomainSpec(k, sev.get(k), seed=_DEFAULT_DOMAIN_SEEDS[k] + 1000 * self.seed) for k in KINDS]

    def model_config(self) -> ModelConfig:
        try:
            widths = tuple(int(w) for w in self.blocks.split(",") if w.strip())
        except ValueError:
            raise ConfigError(f"blocks must be comma-separated integers, got {self.blocks!r}") from None
        return ModelConfig(height=self.height, width=self.width, n_classes=self.n_classes,
                           blocks=tuple(ConvBlock(w) for w in widths), seed=self.seed)

    def train_config(self, regime: str | None = None) -> TrainConfig:
        return TrainConfig(self.lr0, self.train_batch_size, self.patience, self.lr_factor, self.max_lr_drops,
                           self.max_epochs, regime or self.regime_list()[0], self.seed)

    def adapt_config(self) -> AdaptConfig:
        return AdaptConfig(self.rho0, self.omega, self.zeta, self.adapt_batch_size, self.max_batches, self.tol, self.window)

    def method_list(self) -> list[harness.Method]:
        methods = [harness.Method.parse(m) for m in self.methods.split(",") if m.strip()]
        if not methods:
            raise ConfigError("no methods selected")
        return methods

    def regime_list(self) -> list[str]:
        if self.regime == "both":
            return ["offline", "online"]
        if self.regime not in ("offline", "online"):
            raise ConfigError(f"regime must be offline, online or both, got {self.regime!r}")
        return [self.regime]

    def class_list(self) -> list[int]:
        try:
            classes = [int(c) for c in self.classes.split(",") if c.strip()]
        except ValueError:
            raise ConfigError(f"classes must be comma-separated integers, got {self.classes!r}") from None
        bad = [c for c in classes if not 0 <= c < self.n_classes]
        if bad:
            raise ConfigError(f"class ids {bad} outside 0..{self.n_classes - 1}")
        return classes


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _to_float(value: str, what: str) -> float:
    try:
        return float(value)
    except ValueError:
        raise ConfigError(f"{what}: expected a number, got {value!r}") from None


def _convert(key: str, value) -> object:
    kind = _FIELD_TYPES[key]
    if kind == "int":
        try:
            return int(value)
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {value!r}") from None
    if kind == "float":
        return _to_float(value, key)
    return str(value)


def parse_config_text(text: str, source: str = "<config>") -> dict[str, object]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _FIELD_TYPES:
            raise ConfigError(f"{source}:{n}: unknown setting {key!r}")
        out[key] = _convert(key, value)
    return out


def resolve_config(args: argparse.Namespace, environ=os.environ) -> RunConfig:
    values: dict[str, object] = {}
    if environ.get("DISC_SEED"):
        values["seed"] = _convert("seed", environ["DISC_SEED"])
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file {path} not found")
        values.update(parse_config_text(path.read_text(), str(path)))
    for key in _FIELD_TYPES:
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = _convert(key, flag)
    severity_flags = getattr(args, "severity", None) or []
    if severity_flags:
        base = RunConfig(**values).severity_map() if "severities" in values else RunConfig().severity_map()
        for item in severity_flags:
            if "=" not in item:
                raise ConfigError(f"--severity expects kind=value, got {item!r}")
            kind, value = item.split("=", 1)
            base[kind.strip()] = _to_float(value, f"--severity {kind}")
        values["severities"] = ",".join(f"{k}={v:g}" for k, v in base.items())
    cfg = RunConfig(**values)
    cfg.severity_map()  # validate early
    return cfg


# ---------------------------------------------------------------- helpers


def _out(msg: str = "") -> None:
    print(msg, flush=True)


def _run_id(prefix: str, echo: str) -> str:
    return f"{prefix}-{fnv1a_64(echo.encode()) & 0xFFFFFFFF:08x}"


def _load_data(cfg: RunConfig):
    seq = load_sequence(cfg.data_dir)
    if seq.spec != cfg.dataset_spec():
        _out(f"note: data in {cfg.data_dir} was generated with {seq.spec}; using it as stored")
    return seq


def _checkpoint(cfg: RunConfig, task: str) -> Path:
    return Path(cfg.checkpoint_dir) / f"{task}.model"


def _base_model_path(cfg: RunConfig, seq, override: str | None) -> Path:
    path = Path(override) if override else _checkpoint(cfg, seq[0].task_id)
    if not path.is_file():
        raise DataError(f"no trained initial model at {path}; run 'disc train --task {seq[0].task_id}' first")
    return path


def _fmt_row(row: np.ndarray) -> str:
    return " ".join(f"{float(v):.9e}" for v in row)


# ---------------------------------------------------------------- subcommands


def cmd_gen_data(args, cfg: RunConfig) -> int:
    out = Path(cfg.data_dir)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise ConfigError(f"{out} is not empty; pass --force to overwrite")
    seq = build_sequence(cfg.dataset_spec(), cfg.domains())
    save_sequence(seq, out)
    probe = seq[0].test.images[:PROBE_SIZE]
    write_array_file(out / "probe.bin", {"images": probe})
    (out / "config_echo.txt").write_text(cfg.echo())
    _out(f"wrote {len(seq)} tasks to {out}")
    for task in seq:
        counts = ", ".join(f"{name}={len(split)}" for name, split in task.splits.items())
        _out(f"  {task.task_id:<6} severity={task.domain.severity:g} seed={task.domain.seed} {counts}")
    _out(f"  probe.bin: {len(probe)} {seq[0].task_id} test images")
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    seq = _load_data(cfg)
    task = seq[args.task]
    regime = cfg.regime_list()[0]
    if args.init:
        model = load_model(args.init)
    else:
        model = build_model(cfg.model_config())
    tcfg = cfg.train_config(regime)
    if regime == "offline":
        progress = (lambda r: _out(f"epoch {r.epoch:3d} loss {r.loss:.4f} val {r.val_acc:.4f} lr {r.lr:.6g}")) if args.verbose else None
        model, log = train_offline(model, task.train, task.val, tcfg, progress=progress)
    else:
        model, log = train_online(model, task.train, tcfg)
    ckpt = Path(cfg.checkpoint_dir)
    ckpt.mkdir(parents=True, exist_ok=True)
    save_model(model, _checkpoint(cfg, task.task_id))
    log.write_csv(ckpt / f"{task.task_id}.train.csv")
    (ckpt / f"{task.task_id}.config_echo.txt").write_text(cfg.echo())
    acc = evaluate(model, task.test)["accuracy"]
    _out(f"trained {task.task_id} ({regime}): {len(log.epochs)} epoch(s), {log.stop_reason}; final lr {log.final_lr:.6g}")
    _out(f"test accuracy on {task.task_id}: {acc:.4f}")
    _out(f"saved {_checkpoint(cfg, task.task_id)}")
    return 0


def cmd_adapt(args, cfg: RunConfig) -> int:
    seq = _load_data(cfg)
    task = seq[args.task]
    model = load_model(_base_model_path(cfg, seq, args.model)).eval()
    bank_path = cfg.resolved_bank_path()
    bank = load_bank(bank_path) if bank_path.is_file() else StatsBank()
    first = seq[0].task_id
    if first not in bank:
        bank.add(capture(model, first, source="initial"))
    if task.task_id == first:
        _out(f"{first} statistics are the initial model's own; stored in {bank_path}")
    else:
        if task.task_id in bank and not args.replace:
            raise DataError(f"bank already holds {task.task_id!r}; pass --replace to re-adapt")
        plug(model, bank[first])
        acfg = cfg.adapt_config()
        batches = iterate_batches(task.train.images, acfg.batch_size, seed=cfg.seed)
        snap, report = adapt(model, batches, acfg, task_id=task.task_id)
        bank.add(snap, replace=True)
        report.write_csv(bank_path.parent / f"adapt_{task.task_id}.csv")
        state = "converged" if report.converged else "did not converge"
        _out(f"adapted {task.task_id}: {report.batches_used} batches, {state} "
             f"(last max relative change {report.max_rel_change[-1]:.3g}, tol {acfg.tol:g})")
        _out(f"test accuracy on {task.task_id}: {evaluate(model, task.test)['accuracy']:.4f}")
    bank_path.parent.mkdir(parents=True, exist_ok=True)
    save_bank(bank, bank_path)
    _out(f"bank {bank_path}: {', '.join(bank.task_ids)} ({bank_path.stat().st_size} bytes)")
    return 0


def cmd_plug(args, cfg: RunConfig) -> int:
    bank_path = cfg.resolved_bank_path()
    if not bank_path.is_file():
        raise DataError(f"no statistics bank at {bank_path}; run 'disc adapt' first")
    bank = load_bank(bank_path)
    if args.task not in bank:
        raise DataError(f"bank holds {bank.task_ids}, not {args.task!r}")
    active = Path(cfg.checkpoint_dir) / "active.model"
    source = Path(args.model) if args.model else (active if active.is_file() else None)
    if source is None:
        first = bank.task_ids[0]
        source = _checkpoint(cfg, first)
        if not source.is_file():
            raise DataError(f"no model at {source}")
    model = load_model(source).eval()
    plug(model, bank[args.task])
    save_model(model, active)
    _out(f"plugged {args.task} statistics into {active}")
    if args.probe:
        flat = read_array_file(args.probe)["images"]
        c = model.config
        per_image = c.in_channels * c.height * c.width
        if flat.size == 0 or flat.size % per_image:
            raise DataError(f"probe holds {flat.size} values, not a whole number of {c.in_channels}x{c.height}x{c.width} images")
        logits = forward(model, flat.reshape(-1, c.in_channels, c.height, c.width))
        for row in logits:
            _out(_fmt_row(row))
    return 0


def _initial_with_lr(cfg: RunConfig, seq, override: str | None) -> harness.InitialModel:
    """The task-0 checkpoint plus its training log, whose terminal lr later steps reuse."""
    init = harness.InitialModel(load_model(_base_model_path(cfg, seq, override)).eval(), None)
    log_path = Path(cfg.checkpoint_dir) / f"{seq[0].task_id}.train.csv"
    if log_path.is_file():
        with open(log_path, newline="") as f:
            rows = list(csv.DictReader(f))
        if rows:
            init.log = TrainLog([EpochRecord(int(r["epoch"]), float(r["loss"]), float(r["val_acc"]), float(r["lr"])) for r in rows])
            init.log.final_lr = init.log.epochs[-1].lr
    return init


def _report_dir(cfg: RunConfig, prefix: str, run_id: str | None) -> Path:
    return Path(cfg.report_dir) / (run_id or _run_id(prefix, cfg.echo()))


def _load_run(out: Path) -> tuple[list, list]:
    results, cross = [], []
    if (out / "results.json").is_file():
        results = [harness.result_from_dict(d) for d in json.loads((out / "results.json").read_text())]
    if (out / "cross.json").is_file():
        cross = [harness.matrix_from_dict(d) for d in json.loads((out / "cross.json").read_text())]
    return results, cross


def _render(out: Path, cfg: RunConfig, results, cross) -> None:
    names = {c: "-".join(class_glyph(c)) for c in range(cfg.n_classes)}
    harness.render_report(results, out, cross=cross, config_echo=cfg.echo(), classes=cfg.class_list(), class_names=names)


def cmd_sequence(args, cfg: RunConfig) -> int:
    if cfg.repeats < 1:
        raise ConfigError("repeats must be >= 1")
    seq = _load_data(cfg)
    init = _initial_with_lr(cfg, seq, args.model)
    jobs_list = []
    for regime in cfg.regime_list():
        for method in cfg.method_list():
            # regime-invariant methods run once per regime for the table, with identical results
            for r in range(cfg.repeats):
                jobs_list.append((method.value, regime, cfg.seed + r))
    results = harness.run_many(
        jobs_list, seq, init, jobs=args.jobs, train_cfg=cfg.train_config(), adapt_cfg=cfg.adapt_config()
    )
    out = _report_dir(cfg, "sequence", args.run_id)
    out.mkdir(parents=True, exist_ok=True)
    (out / "results.json").write_text(json.dumps([harness.result_to_dict(r) for r in results], indent=1) + "\n")
    _, cross = _load_run(out)
    _render(out, cfg, results, cross)
    _out((out / "table2.md").read_text().rstrip())
    _out(f"report written to {out}")
    return 0


def cmd_cross_eval(args, cfg: RunConfig) -> int:
    seq = _load_data(cfg)
    init = _initial_with_lr(cfg, seq, args.model)
    kinds = ["disc", "disjoint"] if args.kind == "both" else [args.kind]
    matrices = []
    for kind in kinds:
        if kind == "disc":
            bank_path = cfg.resolved_bank_path()
            bank = load_bank(bank_path) if bank_path.is_file() else None
            if bank is None or any(t not in bank for t in seq.task_ids):
                _out("adapting statistics for all domains in memory (bank missing or incomplete)")
                bank = harness.run_sequence("disc", seq, init, adapt_cfg=cfg.adapt_config(), seed=cfg.seed).bank
            matrices.append(harness.run_cross_task(seq, init, bank=bank))
        else:
            paths = {t: _checkpoint(cfg, t) for t in seq.task_ids}
            if all(p.is_file() for p in paths.values()):
                models = {t: load_model(p).eval() for t, p in paths.items()}
            else:
                _out("training one model per domain in memory (per-domain checkpoints missing)")
                models = harness.run_sequence(
                    "disjoint", seq, init, regime=cfg.regime_list()[0], train_cfg=cfg.train_config(), seed=cfg.seed
                ).models
            matrices.append(harness.run_cross_task(seq, init, models=models))
    out = _report_dir(cfg, "cross", args.run_id)
    out.mkdir(parents=True, exist_ok=True)
    (out / "cross.json").write_text(json.dumps([harness.matrix_to_dict(m) for m in matrices], indent=1) + "\n")
    results, _ = _load_run(out)
    _render(out, cfg, results, matrices)
    _out((out / "cross_task.csv").read_text().rstrip())
    _out(f"report written to {out}")
    return 0


def cmd_report(args, cfg: RunConfig) -> int:
    out = Path(cfg.report_dir) / args.run_id
    results, cross = _load_run(out)
    if not results and not cross:
        raise DataError(f"no stored results under {out}")
    echo = out / "config_echo.txt"
    if echo.is_file():  # the run's own settings, not this invocation's
        cfg = RunConfig(**parse_config_text(echo.read_text(), str(echo)))
    _render(out, cfg, results, cross)
    _out(f"re-rendered {out}")
    return 0


# ---------------------------------------------------------------- parser


def _add_settings(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("settings (override --config and defaults)")
    g.add_argument("--config", help="key = value settings file")
    for f in fields(RunConfig):
        g.add_argument("--" + f.name.replace("_", "-"), dest=f.name, default=None, metavar=f.type.upper())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="disc", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate and persist the task sequence")
    p.add_argument("--out", dest="data_dir", default=None, help="output directory (same as --data-dir)")
    p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    p.add_argument("--severity", action="append", metavar="KIND=VALUE", help="e.g. fog=0; repeatable")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="supervised training on one task")
    p.add_argument("--task", default="clear")
    p.add_argument("--init", help="start from this checkpoint instead of a fresh model")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("adapt", help="adaptation phase: estimate a task's statistics and add them to the bank")
    p.add_argument("--task", required=True)
    p.add_argument("--model", help="frozen initial model (default <checkpoint-dir>/<first task>.model)")
    p.add_argument("--replace", action="store_true")
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("plug", help="plug-and-play phase: swap a task's statistics into the active model")
    p.add_argument("--task", required=True)
    p.add_argument("--model", help="model to plug into (default: the active model)")
    p.add_argument("--probe", help="array file of images; prints their logits")
    p.set_defaults(func=cmd_plug)

    p = sub.add_parser("sequence", help="run methods through the task sequence and write a report")
    p.add_argument("--model", help="initial model (default <checkpoint-dir>/<first task>.model)")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--run-id")
    p.set_defaults(func=cmd_sequence)

    p = sub.add_parser("cross-eval", help="evaluate every domain's statistics or model on every domain")
    p.add_argument("--kind", choices=["disc", "disjoint", "both"], default="disc")
    p.add_argument("--model", help="initial model")
    p.add_argument("--run-id")
    p.set_defaults(func=cmd_cross_eval)

    p = sub.add_parser("report", help="re-render report files from stored results")
    p.add_argument("--run-id", required=True)
    p.set_defaults(func=cmd_report)

    for p in sub.choices.values():
        _add_settings(p)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
        return args.func(args, cfg)
    except DiscError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except (FloatingPointError, OverflowError) as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return NumericError.exit_code
    except (OSError, KeyError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return DataError.exit_code
    except ValueError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return ConfigError.exit_code


if __name__ == "__main__":
    sys.exit(main())
