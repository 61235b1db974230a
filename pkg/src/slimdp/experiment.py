"""Experiment configuration, metrics CSV output and run comparison.

Config files are flat ``key = value`` text, one key per line, ``#`` starts a
comment. Keys are the field names of :class:`ExperimentConfig`; command-line
flags use the same names with dashes and override file values.
"""

from __future__ import annotations

import csv
import dataclasses
import json
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Iterable, Sequence

from slimdp.codec import QuantParams
from slimdp.data import Dataset, gen_synthetic, load_csv, split_holdout
from slimdp.model import ModelSpec
from slimdp.selection import SignificanceConfig
from slimdp.sim import METHODS, ConfigError, CostModel, ProtocolConfig, RoundMetrics, Simulation

CSV_COLUMNS = (
    "round",
    "samples",
    "train_loss",
    "test_loss",
    "test_acc",
    "push_words",
    "pull_words",
    "sim_comp_s",
    "sim_comm_s",
    "wall_s",
)


@dataclass(frozen=True)
class ExperimentConfig:
    method: str | None = None
    alpha: float = 0.3
    beta: float = 0.15
    p: int = 1
    q: int = 50
    workers: int = 4
    seed: int = 1
    rounds: int = 2000
    eval_every: int = 50
    lr: float = 0.3
    lr_decay_every: int = 800
    lr_decay_factor: float = 0.3
    eta_prime: float = 1.0
    batch_size: int = 32
    quant_bits: int = 8
    quant_bucket: int = 512
    latency: float = 1e-3
    bandwidth: float = 1e8
    compute_s: float = 5e-4
    data: str = "synthetic"
    data_seed: int | None = None
    synth_dim: int = 32
    synth_classes: int = 10
    synth_samples: int = 20000
    synth_test_samples: int = 4000
    synth_noise: float = 0.0
    synth_teacher_hidden: int = 6
    test_fraction: float = 0.2
    hidden: tuple[int, ...] = (96, 64)
    c: float | None = None
    aggregate: str = "mean"
    grad_source: str = "mean"
    full_pull_on_sync: bool = False
    target_acc: float | None = None
    threads: int = 1
    out: str = "runs/run.csv"

    def __post_init__(self):
        if self.method is None:
            raise ConfigError(f"method: required, one of {{{', '.join(METHODS)}}}")
        if self.rounds < 0:
            raise ConfigError("rounds: must be >= 0")
        if self.eval_every < 1:
            raise ConfigError("eval_every: must be >= 1")
        if self.threads < 1:
            raise ConfigError("threads: must be >= 1")
        if not (self.data == "synthetic" or self.data.startswith("csv:")):
            raise ConfigError(f"data: expected 'synthetic' or 'csv:PATH', got {self.data!r}")
        if any(h < 1 for h in self.hidden):
            raise ConfigError("hidden: layer widths must be >= 1")
        if self.target_acc is not None and not 0 <= self.target_acc <= 1:
            raise ConfigError("target_acc: must lie in [0, 1]")
        # the remaining field checks live with the objects that use them
        self.protocol()
        self.cost()

    def protocol(self) -> ProtocolConfig:
        try:
            quant = QuantParams(self.quant_bits, self.quant_bucket)
            sig = SignificanceConfig(c=self.c)
        except ValueError as e:
            raise ConfigError(str(e)) from None
        return ProtocolConfig(
            method=self.method,
            alpha=self.alpha,
            beta=self.beta,
            p=self.p,
            q=self.q,
            eta_prime=self.eta_prime,
            lr=self.lr,
            lr_decay_every=self.lr_decay_every,
            lr_decay_factor=self.lr_decay_factor,
            batch_size=self.batch_size,
            workers=self.workers,
            seed=self.seed,
            quant=quant,
            significance=sig,
            aggregate=self.aggregate,
            grad_source=self.grad_source,
            full_pull_on_sync=self.full_pull_on_sync,
        )

    def cost(self) -> CostModel:
        return CostModel(self.latency, self.bandwidth, self.compute_s)

    def model_spec(self, input_dim: int, classes: int) -> ModelSpec:
        return ModelSpec((input_dim, *self.hidden, classes), seed=self.seed)

    def replace(self, **changes) -> ExperimentConfig:
        return dataclasses.replace(self, **changes)


_FIELDS = {f.name: f for f in fields(ExperimentConfig)}
_OPTIONAL_FLOAT = {"c", "target_acc"}
_OPTIONAL_INT = {"data_seed"}


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _convert(key: str, raw: Any) -> Any:
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    if key in _OPTIONAL_FLOAT or key in _OPTIONAL_INT:
        if text.lower() in ("auto", "none", ""):
            return None
        return int(text) if key in _OPTIONAL_INT else float(text)
    ftype = _FIELDS[key].type
    if key == "hidden":
        return tuple(int(x) for x in text.replace(" ", "").split(",") if x)
    if key == "method":
        return text
    if ftype == "bool":
        return _parse_bool(text)
    if ftype == "int":
        return int(text)
    if ftype == "float":
        return float(text)
    return text


def _format(key: str, value: Any) -> str:
    if value is None:
        return "auto" if key == "c" else "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def read_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _FIELDS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        values[key] = value
    return values


def parse_config(path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> ExperimentConfig:
    """Build a validated config from an optional file plus flag overrides."""
    raw: dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
        raw.update(read_config_text(text, str(path)))
    for key, value in (overrides or {}).items():
        key = key.replace("-", "_")
        if key not in _FIELDS:
            raise ConfigError(f"unknown key {key!r}")
        raw[key] = value
    values = {}
    for key, value in raw.items():
        try:
            values[key] = _convert(key, value)
        except ValueError as e:
            raise ConfigError(f"{key}: {e}") from None
    return ExperimentConfig(**values)


def serialize_config(cfg: ExperimentConfig) -> str:
    return "".join(f"{f.name} = {_format(f.name, getattr(cfg, f.name))}\n" for f in fields(cfg))


def load_data(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    data_seed = cfg.seed if cfg.data_seed is None else cfg.data_seed
    if cfg.data == "synthetic":
        total = cfg.synth_samples + cfg.synth_test_samples
        ds = gen_synthetic(
            cfg.synth_dim, cfg.synth_classes, total, data_seed, cfg.synth_noise, cfg.synth_teacher_hidden
        )
        return split_holdout(ds, cfg.synth_test_samples / total, data_seed)
    return split_holdout(load_csv(cfg.data[len("csv:") :]), cfg.test_fraction, data_seed)


@dataclass
class RunSummary:
    method: str
    alpha: float
    beta: float
    rounds: int
    samples: int
    final_test_acc: float | None
    final_test_loss: float | None
    rounds_to_target: int | None
    push_words: int
    pull_words: int
    key_words: int
    sim_comp_s: float
    sim_comm_s: float
    wall_s: float
    speed_d: float | None = None
    speed_a: float | None = None

    @property
    def total_words(self) -> int:
        return self.push_words + self.pull_words

    @property
    def sim_total_s(self) -> float:
        return self.sim_comp_s + self.sim_comm_s

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["total_words"] = self.total_words
        d["sim_total_s"] = self.sim_total_s
        return d


def metrics_rows(history: Iterable[RoundMetrics]) -> list[dict[str, Any]]:
    """Evaluated rounds only, with words and seconds accumulated from round 1."""
    rows = []
    push = pull = 0
    comp = comm = wall = 0.0
    for m in history:
        push += m.total_push_words
        pull += m.total_pull_words
        comp += m.sim_comp_seconds
        comm += m.sim_comm_seconds
        wall += m.wall_seconds
        if m.test_accuracy is None:
            continue
        rows.append(
            {
                "round": m.t,
                "samples": m.samples,
                "train_loss": m.train_loss,
                "test_loss": m.test_loss,
                "test_acc": m.test_accuracy,
                "push_words": push,
                "pull_words": pull,
                "sim_comp_s": comp,
                "sim_comm_s": comm,
                "wall_s": wall,
            }
        )
    return rows


def write_metrics_csv(path: str | Path, rows: Sequence[dict[str, Any]]) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_COLUMNS)
            for row in rows:
                w.writerow([_format(col, row[col]) for col in CSV_COLUMNS])
    except OSError as e:
        raise OSError(f"cannot write metrics to {path}: {e.strerror}") from e


def read_metrics_csv(path: str | Path) -> list[dict[str, float]]:
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != CSV_COLUMNS:
            raise ConfigError(f"{path}: column schema {header} does not match {list(CSV_COLUMNS)}")
        rows = []
        for lineno, rec in enumerate(reader, start=2):
            if len(rec) != len(CSV_COLUMNS):
                raise ConfigError(f"{path}:{lineno}: expected {len(CSV_COLUMNS)} columns, got {len(rec)}")
            row = {}
            for col, val in zip(CSV_COLUMNS, rec):
                row[col] = int(val) if col in ("round", "samples", "push_words", "pull_words") else float(val)
            rows.append(row)
    if not rows:
        raise ConfigError(f"{path}: no metric rows")
    return rows


def _sidecar(out: Path, suffix: str) -> Path:
    return out.with_name(out.stem + suffix)


def summarize(cfg: ExperimentConfig, sim: Simulation) -> RunSummary:
    hist = sim.history
    rows = metrics_rows(hist)
    last = rows[-1] if rows else None
    target_round = None
    if cfg.target_acc is not None:
        target_round = next((r["round"] for r in rows if r["test_acc"] >= cfg.target_acc), None)
    return RunSummary(
        method=cfg.method,
        alpha=cfg.alpha,
        beta=cfg.beta,
        rounds=len(hist),
        samples=hist[-1].samples if hist else 0,
        final_test_acc=last["test_acc"] if last else None,
        final_test_loss=last["test_loss"] if last else None,
        rounds_to_target=target_round,
        push_words=sum(m.total_push_words for m in hist),
        pull_words=sum(m.total_pull_words for m in hist),
        key_words=sum(m.key_words for m in hist),
        sim_comp_s=last["sim_comp_s"] if last else 0.0,
        sim_comm_s=last["sim_comm_s"] if last else 0.0,
        wall_s=last["wall_s"] if last else 0.0,
    )


def run_experiment(cfg: ExperimentConfig, write: bool = True) -> tuple[RunSummary, list[dict[str, Any]]]:
    """Train one configuration; write ``out`` (CSV) plus ``.summary.json`` and ``.cfg`` beside it."""
    train, test = load_data(cfg)
    spec = cfg.model_spec(train.dim, max(train.class_count, test.class_count))
    sim = Simulation(cfg.protocol(), spec, train, test, cfg.cost(), cfg.eval_every, cfg.threads)
    sim.run(cfg.rounds)
    rows = metrics_rows(sim.history)
    summary = summarize(cfg, sim)
    if write:
        out = Path(cfg.out)
        write_metrics_csv(out, rows)
        _sidecar(out, ".summary.json").write_text(json.dumps(summary.to_dict(), indent=2) + "\n")
        _sidecar(out, ".cfg").write_text(serialize_config(cfg))
    return summary, rows


def _time_at(row: dict[str, float]) -> float:
    return row["sim_comp_s"] + row["sim_comm_s"]


@dataclass
class Comparison:
    name: str
    final_acc: float
    speed_d: float
    speed_a: float | None
    word_saving: float
    comm_time_saving: float


def compare_rows(base: Sequence[dict[str, float]], cand: Sequence[dict[str, float]], name: str = "") -> Comparison:
    """Speedups of ``cand`` over ``base``.

    ``speed_d`` compares simulated time at the largest sample count both runs
    logged; ``speed_a`` compares the first time each run reaches the
    baseline's final accuracy and is None if the candidate never does.
    """
    common = {r["samples"] for r in base} & {r["samples"] for r in cand}
    if not common:
        raise ConfigError(f"{name or 'candidate'}: no evaluated row at equal samples processed")
    s = max(common)
    b = next(r for r in base if r["samples"] == s)
    c = next(r for r in cand if r["samples"] == s)
    target = base[-1]["test_acc"]
    b_hit = next(r for r in base if r["test_acc"] >= target)
    c_hit = next((r for r in cand if r["test_acc"] >= target), None)
    b_words = b["push_words"] + b["pull_words"]
    c_words = c["push_words"] + c["pull_words"]
    return Comparison(
        name=name,
        final_acc=cand[-1]["test_acc"],
        speed_d=_time_at(b) / _time_at(c),
        speed_a=None if c_hit is None else _time_at(b_hit) / _time_at(c_hit),
        word_saving=1.0 - c_words / b_words if b_words else 0.0,
        comm_time_saving=1.0 - c["sim_comm_s"] / b["sim_comm_s"] if b["sim_comm_s"] else 0.0,
    )


def compare_runs(baseline: str | Path, candidates: Sequence[str | Path]) -> list[Comparison]:
    base = read_metrics_csv(baseline)
    out = [compare_rows(base, base, Path(baseline).stem)]
    for path in candidates:
        out.append(compare_rows(base, read_metrics_csv(path), Path(path).stem))
    return out


def format_comparisons(rows: Sequence[Comparison]) -> str:
    head = ("run", "final_acc", "speed_d", "speed_a", "word_saving", "comm_time_saving")
    lines = [head]
    for r in rows:
        lines.append(
            (
                r.name,
                f"{r.final_acc:.4f}",
                f"{r.speed_d:.3f}",
                "null" if r.speed_a is None else f"{r.speed_a:.3f}",
                f"{100 * r.word_saving:.1f}%",
                f"{100 * r.comm_time_saving:.1f}%",
            )
        )
    widths = [max(len(line[i]) for line in lines) for i in range(len(head))]
    return "\n".join("  ".join(cell.ljust(w) for cell, w in zip(line, widths)).rstrip() for line in lines)


def comparisons_json(rows: Sequence[Comparison]) -> str:
    return json.dumps([dataclasses.asdict(r) for r in rows], indent=2) + "\n"


def sweep_configs(base: ExperimentConfig, alphas: Sequence[float], betas: Sequence[float]) -> list[ExperimentConfig]:
    """Slim configs for every (alpha, beta) pair with beta <= alpha."""
    out = []
    for a in alphas:
        for b in betas:
            if b > a:
                continue
            out.append(base.replace(method="slim", alpha=a, beta=b))
    return out
