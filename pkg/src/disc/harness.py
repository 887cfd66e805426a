"""Domain-incremental experiment driver.

Every method walks the task sequence from the same task-0 checkpoint. After
each step, every task seen so far is evaluated with the parts that belong to
it (task-aware evaluation): its own statistics for DISC, its own head for
Freezing, its own model for Disjoint.
"""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np

from .adapt import AdaptConfig, adapt, iterate_batches
from .domains import Split, TaskSequence
from .errors import ConfigError, ProtocolError
from .stats_bank import StatsBank, bank_to_bytes, capture, plug
from .tensor_nn import Model, build_model, forward, model_to_bytes
from .trainer import TrainConfig, TrainLog, evaluate, head_only, train_offline, train_online
from .binio import Writer


class Method(str, Enum):
    SOURCE_ONLY = "source-only"
    FREEZING = "freezing"
    DISJOINT = "disjoint"
    FINE_TUNING = "fine-tuning"
    JOINT_TRAINING = "joint-training"
    DISC = "disc"

    @property
    def label(self) -> str:
        return {
            "source-only": "Source-Only",
            "freezing": "Freezing",
            "disjoint": "Disjoint",
            "fine-tuning": "Fine-tuning",
            "joint-training": "Joint-training",
            "disc": "DISC",
        }[self.value]

    @property
    def trains_after_first_task(self) -> bool:
        return self not in (Method.SOURCE_ONLY, Method.DISC)

    @classmethod
    def parse(cls, text: str) -> Method:
        key = text.strip().lower().replace("_", "-")
        aliases = {"sourceonly": "source-only", "finetuning": "fine-tuning", "joint": "joint-training",
                   "jointtraining": "joint-training", "fine-tune": "fine-tuning"}
        try:
            return cls(aliases.get(key.replace("-", ""), aliases.get(key, key)))
        except ValueError:
            raise ConfigError(f"unknown method {text!r}; choose from {[m.value for m in cls]}") from None


METHOD_ORDER = list(Method)


@dataclass
class InitialModel:
    """The task-0 checkpoint every method starts from. Never mutated."""

    model: Model
    log: TrainLog | None = None

    @property
    def terminal_lr(self) -> float:
        return self.log.final_lr if self.log and self.log.epochs else TrainConfig().lr0


def prepare_initial(sequence: TaskSequence, model: Model, cfg: TrainConfig = TrainConfig(), progress=None) -> InitialModel:
    """Supervised offline training on the first (clear) task."""
    first = sequence[0]
    model, log = train_offline(model, first.train, first.val, replace(cfg, regime="offline"), progress=progress)
    return InitialModel(model.eval(), log)


@dataclass
class SequenceResult:
    method: Method
    regime: str
    task_ids: list[str]
    seed: int
    acc: np.ndarray  # acc[step, task]; NaN for task > step
    per_class: np.ndarray  # per_class[step, task, class]
    storage_bytes: int = 0
    stored: str = ""
    train_steps: int = 0
    adapt_batches: int = 0
    adapt_images: int = 0
    wall_clock: float = 0.0
    task_sizes: list[int] = field(default_factory=list)
    probe_logits: dict[str, np.ndarray] = field(default_factory=dict)
    bank: StatsBank | None = None
    models: dict[str, Model] = field(default_factory=dict)
    logs: dict[str, TrainLog] = field(default_factory=dict)

    @property
    def seen_mean(self) -> np.ndarray:
        return np.array([np.mean(self.acc[s, : s + 1]) for s in range(len(self.task_ids))])

    def diagonal(self) -> np.ndarray:
        return np.diag(self.acc).copy()


def _step_seed(seed: int, step: int) -> int:
    return int(np.random.SeedSequence([seed, step]).generate_state(1)[0])


def _concat(splits: list[Split]) -> Split:
    return Split(np.concatenate([s.images for s in splits]), np.concatenate([s.labels for s in splits]))


def _head_bytes(model: Model) -> int:
    w = Writer()
    for key in (f"{model.head_key}.weight", f"{model.head_key}.bias"):
        w.text(key)
        w.u64(model.params[key].size)
        w.f32_array(model.params[key])
    return len(w.getvalue())


class _Run:
    def __init__(self, method, sequence, initial, regime, train_cfg, adapt_cfg, seed, probe):
        if initial is None or initial.model is None:
            raise ProtocolError("no initial (task-0) model; train the clear task first")
        if regime not in ("offline", "online"):
            raise ConfigError(f"regime must be 'offline' or 'online', got {regime!r}")
        if len(sequence) == 0:
            raise ProtocolError("empty task sequence")
        self.method = method
        self.seq = sequence
        self.initial = initial
        self.regime = regime
        self.train_cfg = train_cfg
        self.adapt_cfg = adapt_cfg
        self.seed = seed
        self.probe = probe
        n, k = len(sequence), initial.model.config.n_classes
        self.result = SequenceResult(
            method,
            regime,
            sequence.task_ids,
            seed,
            np.full((n, n), np.nan),
            np.full((n, n, k), np.nan),
            task_sizes=[len(t.test) for t in sequence],
        )

    def fresh(self) -> Model:
        return self.initial.model.copy().eval()

    def train(self, model: Model, step: int, train: Split, val: Split, lr0: float, trainable_filter=None) -> Model:
        cfg = replace(self.train_cfg, seed=_step_seed(self.seed, step), regime=self.regime)
        if self.regime == "online":
            model, log = train_online(model, train, cfg, trainable_filter, lr=self.initial.terminal_lr)
        else:
            model, log = train_offline(model, train, val, replace(cfg, lr0=lr0), trainable_filter)
        self.result.train_steps += log.steps
        self.result.logs[self.seq[step].task_id] = log
        return model

    def record(self, step: int, task: int, model: Model) -> None:
        r = evaluate(model, self.seq[task].test)
        self.result.acc[step, task] = r["accuracy"]
        self.result.per_class[step, task] = r["per_class"]

    def record_probe(self, step: int, model: Model) -> None:
        if self.probe is not None:
            model.eval()
            self.result.probe_logits[self.seq[step].task_id] = forward(model, self.probe)

    def run(self) -> SequenceResult:
        t0 = time.perf_counter()
        getattr(self, "_" + self.method.value.replace("-", "_"))()
        self.result.wall_clock = time.perf_counter() - t0
        return self.result

    # -- methods

    def _source_only(self):
        model = self.fresh()
        for step in range(len(self.seq)):
            self.record_probe(step, model)
            for t in range(step + 1):
                self.record(step, t, model)
        self.result.storage_bytes = len(model_to_bytes(model))
        self.result.stored = "1 model"

    def _disc(self):
        model = self.fresh()
        fp = model.parameter_fingerprint()
        bank = StatsBank()
        clear = capture(model, self.seq[0].task_id, source="initial")
        bank.add(clear)
        for step, task in enumerate(self.seq):
            if step > 0:
                plug(model, clear, fingerprint=fp)
                batches = iterate_batches(task.train.images, self.adapt_cfg.batch_size, seed=_step_seed(self.seed, step))
                snap, report = adapt(model, batches, self.adapt_cfg, task_id=task.task_id)
                bank.add(snap)
                self.result.adapt_batches += report.batches_used
                self.result.adapt_images += report.batches_used * self.adapt_cfg.batch_size
            self.record_probe(step, model)
            for t in range(step + 1):
                plug(model, bank[self.seq[t].task_id], fingerprint=fp)
                self.record(step, t, model)
        self.result.bank = bank
        self.result.storage_bytes = len(bank_to_bytes(bank))
        self.result.stored = f"stats bank ({len(bank)} snapshots); shares the initial model"

    def _freezing(self):
        heads = []
        head = self.initial.model.head_key
        model = self.fresh()
        for step, task in enumerate(self.seq):
            if step == 0:
                trained = model
            else:
                trained = self.train(self.fresh(), step, task.train, task.val, self.initial.terminal_lr, head_only(model))
            heads.append({k: v.copy() for k, v in trained.params.items() if k.startswith(head + ".")})
            self.record_probe(step, trained)
            for t in range(step + 1):
                model.params.update({k: v.copy() for k, v in heads[t].items()})
                self.record(step, t, model)
        self.result.storage_bytes = len(self.seq) * _head_bytes(model)
        self.result.stored = f"{len(self.seq)} heads; shares the initial backbone"

    def _disjoint(self):
        models = []
        for step, task in enumerate(self.seq):
            if step == 0:
                m = self.fresh()
            elif self.regime == "online":
                # a single epoch from scratch learns nothing; online runs start from the clear model
                m = self.train(self.fresh(), step, task.train, task.val, self.train_cfg.lr0)
            else:
                cfg = replace(self.initial.model.config, seed=_step_seed(self.seed, 1000 + step))
                m = self.train(build_model(cfg), step, task.train, task.val, self.train_cfg.lr0)
            models.append(m)
            self.record_probe(step, m)
            for t in range(step + 1):
                self.record(step, t, models[t])
        self.result.models = {t.task_id: m for t, m in zip(self.seq, models)}
        self.result.storage_bytes = sum(len(model_to_bytes(m)) for m in models)
        self.result.stored = f"{len(models)} models"

    def _fine_tuning(self):
        model = self.fresh()
        for step, task in enumerate(self.seq):
            if step > 0:
                model = self.train(model, step, task.train, task.val, self.initial.terminal_lr)
            self.record_probe(step, model)
            for t in range(step + 1):
                self.record(step, t, model)
        self.result.storage_bytes = len(model_to_bytes(model))
        self.result.stored = "1 model"

    def _joint_training(self):
        model = self.fresh()
        for step in range(len(self.seq)):
            if step > 0:
                seen = self.seq.tasks[: step + 1]
                model = self.train(
                    self.fresh(),
                    step,
                    _concat([t.train for t in seen]),
                    _concat([t.val for t in seen]),
                    self.initial.terminal_lr,
                )
            self.record_probe(step, model)
            for t in range(step + 1):
                self.record(step, t, model)
        self.result.storage_bytes = len(model_to_bytes(model))
        self.result.stored = "1 model (plus all seen training data)"


def run_sequence(
    method: Method | str,
    sequence: TaskSequence,
    initial: InitialModel | None,
    *,
    regime: str = "online",
    train_cfg: TrainConfig = TrainConfig(),
    adapt_cfg: AdaptConfig = AdaptConfig(),
    seed: int = 0,
    probe: np.ndarray | None = None,
) -> SequenceResult:
    method = Method.parse(method) if isinstance(method, str) else method
    return _Run(method, sequence, initial, regime, train_cfg, adapt_cfg, seed, probe).run()


@dataclass
class CrossTaskMatrix:
    name: str
    rows: list[str]  # "source-only" followed by the statistics/model task ids
    cols: list[str]
    values: np.ndarray

    def row(self, label: str) -> np.ndarray:
        return self.values[self.rows.index(label)]

    def col(self, label: str) -> np.ndarray:
        return self.values[:, self.cols.index(label)]


def run_cross_task(
    sequence: TaskSequence,
    initial: InitialModel,
    *,
    bank: StatsBank | None = None,
    models: dict[str, Model] | None = None,
    name: str | None = None,
) -> CrossTaskMatrix:
    """Evaluate every task's statistics (``bank``) or model (``models``) on every domain."""
    if (bank is None) == (models is None):
        raise ConfigError("pass exactly one of bank= or models=")
    ids = sequence.task_ids
    have = bank.task_ids if bank is not None else list(models)
    missing = [t for t in ids if t not in have]
    if missing:
        raise ProtocolError(f"no statistics/model for domain(s) {missing}")
    values = np.zeros((len(ids) + 1, len(ids)))
    base = initial.model.copy().eval()
    for j, task in enumerate(sequence):
        values[0, j] = evaluate(base, task.test)["accuracy"]
    if bank is not None:
        model = initial.model.copy().eval()
        fp = model.parameter_fingerprint()
        for i, tid in enumerate(ids, 1):
            plug(model, bank[tid], fingerprint=fp)
            for j, task in enumerate(sequence):
                values[i, j] = evaluate(model, task.test)["accuracy"]
    else:
        for i, tid in enumerate(ids, 1):
            for j, task in enumerate(sequence):
                values[i, j] = evaluate(models[tid], task.test)["accuracy"]
    return CrossTaskMatrix(name or ("disc" if bank is not None else "disjoint"), ["source-only", *ids], ids, values)


# ---------------------------------------------------------------- reports


@dataclass
class Aggregate:
    method: Method
    regime: str
    task_ids: list[str]
    runs: list[SequenceResult]

    @property
    def acc_mean(self) -> np.ndarray:
        return np.mean([r.acc for r in self.runs], axis=0)

    @property
    def acc_std(self) -> np.ndarray:
        return np.std([r.acc for r in self.runs], axis=0)

    @property
    def seen_mean(self) -> np.ndarray:
        return np.mean([r.seen_mean for r in self.runs], axis=0)

    @property
    def seen_std(self) -> np.ndarray:
        return np.std([r.seen_mean for r in self.runs], axis=0)


def aggregate(results: list[SequenceResult]) -> list[Aggregate]:
    groups: dict[tuple, Aggregate] = {}
    for r in results:
        key = (r.method, r.regime)
        if key not in groups:
            groups[key] = Aggregate(r.method, r.regime, r.task_ids, [])
        groups[key].runs.append(r)
    order = {m: i for i, m in enumerate(METHOD_ORDER)}
    return sorted(groups.values(), key=lambda a: (a.regime != "offline", order[a.method]))


def _fmt(x: float) -> str:
    return "nan" if np.isnan(x) else f"{x:.6f}"


def sequence_csv(aggs: list[Aggregate]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "regime", "step", "step_task", "eval_task", "accuracy_mean", "accuracy_std", "runs"])
    for a in aggs:
        mean, std = a.acc_mean, a.acc_std
        for s, step_task in enumerate(a.task_ids):
            for t in range(s + 1):
                w.writerow([a.method.value, a.regime, s, step_task, a.task_ids[t], _fmt(mean[s, t]), _fmt(std[s, t]), len(a.runs)])
            w.writerow([a.method.value, a.regime, s, step_task, "seen_mean", _fmt(a.seen_mean[s]), _fmt(a.seen_std[s]), len(a.runs)])
    return buf.getvalue()


def table2_markdown(aggs: list[Aggregate]) -> str:
    lines = []
    for regime in ("offline", "online"):
        group = [a for a in aggs if a.regime == regime]
        if not group:
            continue
        ids = group[0].task_ids
        lines.append(f"### {regime.capitalize()}")
        lines.append("")
        sizes = {len(set(r.task_sizes)) for a in group for r in a.runs}
        if sizes != {1}:
            lines.append("> note: tasks have unequal test sizes; the seen-task mean is still an unweighted average.")
            lines.append("")
        lines.append(f"| Method | {' → '.join(ids)} |")
        lines.append("|---|---|")
        for a in group:
            if len(a.runs) > 1:
                cells = [f"{100 * m:.1f}±{100 * s:.1f}" for m, s in zip(a.seen_mean, a.seen_std)]
            else:
                cells = [f"{100 * m:.1f}" for m in a.seen_mean]
            lines.append(f"| {a.method.label} | {' → '.join(cells)} |")
        lines.append("")
    lines.append("Accuracy (%) averaged over the current and all previously seen tasks.")
    return "\n".join(lines) + "\n"


def per_class_csv(aggs: list[Aggregate], classes: list[int], class_names: dict[int, str] | None = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "regime", "step", "step_task", "class", "class_name", "seen_mean_recall", "std", "runs"])
    names = class_names or {}
    for a in aggs:
        for s, step_task in enumerate(a.task_ids):
            for c in classes:
                per_run = [np.mean(r.per_class[s, : s + 1, c]) for r in a.runs]
                w.writerow([a.method.value, a.regime, s, step_task, c, names.get(c, f"class{c}"),
                            _fmt(float(np.mean(per_run))), _fmt(float(np.std(per_run))), len(a.runs)])
    return buf.getvalue()


def cross_task_csv(matrices: list[CrossTaskMatrix]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for m in matrices:
        w.writerow(["matrix", "stats_or_model", *m.cols])
        for label, row in zip(m.rows, m.values):
            w.writerow([m.name, label, *(_fmt(v) for v in row)])
    return buf.getvalue()


def accounting_csv(aggs: list[Aggregate]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "regime", "storage_bytes", "stored", "train_steps", "adapt_batches", "adapt_images", "runs"])
    for a in aggs:
        r = a.runs[0]
        w.writerow([a.method.value, a.regime, r.storage_bytes, r.stored,
                    int(np.mean([x.train_steps for x in a.runs])), int(np.mean([x.adapt_batches for x in a.runs])),
                    int(np.mean([x.adapt_images for x in a.runs])), len(a.runs)])
    return buf.getvalue()


def render_report(
    results: list[SequenceResult],
    out_dir,
    *,
    cross: list[CrossTaskMatrix] | None = None,
    config_echo: str = "",
    classes: list[int] | None = None,
    class_names: dict[int, str] | None = None,
) -> dict[str, Path]:
    """Write sequence.csv, table2.md, per_class.csv, cross_task.csv, accounting.csv, config_echo.txt."""
    if not results and not cross:
        raise ConfigError("nothing to report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    aggs = aggregate(results)
    n_classes = results[0].per_class.shape[2] if results else 0
    classes = list(range(min(3, n_classes))) if classes is None else classes
    files = {
        "sequence.csv": sequence_csv(aggs),
        "table2.md": table2_markdown(aggs) if aggs else "",
        "per_class.csv": per_class_csv(aggs, classes, class_names),
        "cross_task.csv": cross_task_csv(cross or []),
        "accounting.csv": accounting_csv(aggs),
        "config_echo.txt": config_echo,
    }
    paths = {}
    for name, text in files.items():
        p = out / name
        p.write_text(text)
        paths[name] = p
    return paths


# ---------------------------------------------------------------- repeats


_SHARED: dict = {}


def _init_worker(sequence, initial, kwargs) -> None:
    _SHARED.update(sequence=sequence, initial=initial, kwargs=kwargs)


def _run_one(job: tuple[str, str, int]) -> SequenceResult:
    method, regime, seed = job
    r = run_sequence(method, _SHARED["sequence"], _SHARED["initial"], regime=regime, seed=seed, **_SHARED["kwargs"])
    r.models, r.bank = {}, None  # keep worker results light
    return r


def run_many(
    jobs_list: list[tuple[str, str, int]],
    sequence: TaskSequence,
    initial: InitialModel,
    *,
    jobs: int = 1,
    **kwargs,
) -> list[SequenceResult]:
    """Run (method, regime, seed) combinations, optionally in parallel processes.

    Results come back in the order of ``jobs_list`` regardless of ``jobs``.
    """
    if jobs <= 1 or len(jobs_list) <= 1:
        _init_worker(sequence, initial, kwargs)
        try:
            return [_run_one(j) for j in jobs_list]
        finally:
            _SHARED.clear()
    import multiprocessing as mp
    from concurrent.futures import ProcessPoolExecutor

    ctx = mp.get_context("fork")
    with ProcessPoolExecutor(jobs, mp_context=ctx, initializer=_init_worker, initargs=(sequence, initial, kwargs)) as pool:
        return list(pool.map(_run_one, jobs_list))


def _nan_list(a: np.ndarray):
    return [None if np.isnan(v) else float(v) for v in a.ravel()]


def result_to_dict(r: SequenceResult) -> dict:
    return {
        "method": r.method.value,
        "regime": r.regime,
        "task_ids": r.task_ids,
        "seed": r.seed,
        "acc": _nan_list(r.acc),
        "per_class": _nan_list(r.per_class),
        "n_classes": r.per_class.shape[2],
        "storage_bytes": r.storage_bytes,
        "stored": r.stored,
        "train_steps": r.train_steps,
        "adapt_batches": r.adapt_batches,
        "adapt_images": r.adapt_images,
        "task_sizes": r.task_sizes,
    }


def result_from_dict(d: dict) -> SequenceResult:
    n, k = len(d["task_ids"]), d["n_classes"]

    def arr(values, shape):
        return np.array([np.nan if v is None else v for v in values], dtype=np.float64).reshape(shape)

    return SequenceResult(
        Method(d["method"]),
        d["regime"],
        list(d["task_ids"]),
        d["seed"],
        arr(d["acc"], (n, n)),
        arr(d["per_class"], (n, n, k)),
        storage_bytes=d["storage_bytes"],
        stored=d["stored"],
        train_steps=d["train_steps"],
        adapt_batches=d["adapt_batches"],
        adapt_images=d["adapt_images"],
        task_sizes=list(d["task_sizes"]),
    )


def matrix_to_dict(m: CrossTaskMatrix) -> dict:
    return {"name": m.name, "rows": m.rows, "cols": m.cols, "values": m.values.tolist()}


def matrix_from_dict(d: dict) -> CrossTaskMatrix:
    return CrossTaskMatrix(d["name"], list(d["rows"]), list(d["cols"]), np.array(d["values"], dtype=np.float64))
