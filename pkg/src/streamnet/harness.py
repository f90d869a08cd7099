"""Experiment runner: train on clean data, evaluate clean and zero-noise
accuracy after every epoch, append JSON-lines metrics, plot the curves.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .dataio import Dataset, load_cifar10, load_raw_container, stratified_split, synth_dataset
from .errors import ConfigError, NonFiniteError
from .imaging import NoiseSpec, SliceBand, derive_seed, make_bands, FULL_BAND
from .model import (
    CIFAR10_FINAL_FILTERS,
    DEFAULT_FINAL_FILTERS,
    ModelSpec,
    build_simple_convnet,
    build_streaming_net,
    init_state,
    save_checkpoint,
)
from .optim import AdamConfig
from .training import Trainer, evaluate_counts, noise_seed

logger = logging.getLogger(__name__)

NOISE_GRID = tuple(k / 10 for k in range(10))
WALL_CLOCK_FIELDS = ("wall_clock_seconds",)
CSV_HEADER = ("epoch", "noise", "accuracy", "accuracy_smooth7", "loss")


def _strict(cls, data: Mapping[str, Any], where: str):
    if not isinstance(data, Mapping):
        raise ConfigError(f"{where} must be a JSON object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    return cls(**data)


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "synth"                 # synth | cifar10 | sndt
    path: str | None = None             # cifar10 directory or .sndt file
    test_path: str | None = None        # optional separate .sndt test file
    test_fraction: float = 0.2          # stratified split when test_path is absent
    split_seed: int = 0
    train_limit: int | None = None      # take the first N train samples
    test_limit: int | None = None
    n_classes: int = 4                  # synth only
    per_class: int = 10
    test_per_class: int | None = None
    side: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("synth", "cifar10", "sndt"):
            raise ConfigError(f"unknown dataset kind {self.kind!r}")
        if self.kind != "synth" and not self.path:
            raise ConfigError(f"dataset kind {self.kind!r} needs a path")


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "streaming"          # simple | wide | streaming
    n_bands: int = 5
    bands: list | None = None           # explicit [[lo, hi], ...] overrides n_bands
    include_full_band: bool = False     # extra whole-image stream
    final_conv_filters: int | None = None
    hidden_dense: list = field(default_factory=list)
    width_multiplier: int = 5           # wide variant only

    def __post_init__(self):
        if self.variant not in ("simple", "wide", "streaming"):
            raise ConfigError(f"unknown model variant {self.variant!r}")

    def band_list(self) -> list[SliceBand]:
        bands = ([SliceBand(float(lo), float(hi)) for lo, hi in self.bands]
                 if self.bands is not None else make_bands(self.n_bands))
        if self.include_full_band:
            bands.append(FULL_BAND)
        return bands


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    adam: AdamConfig = field(default_factory=AdamConfig)
    epochs: int = 100
    batch_size: int = 64
    noise_levels: tuple[float, ...] = NOISE_GRID
    seed: int = 0
    output_dir: str = "runs/latest"
    eval_every_steps: int | None = None   # None: evaluate once per epoch
    record_train_accuracy: bool = False
    stop_at_train_accuracy: float | None = None   # end the run once train accuracy reaches this

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.noise_levels:
            raise ConfigError("noise_levels must not be empty")
        for level in self.noise_levels:
            if not any(abs(level - g) < 1e-9 for g in NOISE_GRID):
                raise ConfigError(f"noise level {level} is not on the grid 0.0, 0.1, ..., 0.9")
        if self.eval_every_steps is not None and self.eval_every_steps < 1:
            raise ConfigError("eval_every_steps must be >= 1")
        if self.stop_at_train_accuracy is not None and not 0.0 < self.stop_at_train_accuracy <= 1.0:
            raise ConfigError("stop_at_train_accuracy must lie in (0, 1]")

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ExperimentConfig":
        if not isinstance(data, Mapping):
            raise ConfigError("config must be a JSON object")
        data = dict(data)
        unknown = sorted(set(data) - {f.name for f in dataclasses.fields(cls)})
        if unknown:
            raise ConfigError(f"unknown key(s) in config: {', '.join(unknown)}")
        if "dataset" in data:
            data["dataset"] = _strict(DatasetConfig, data["dataset"], "dataset")
        if "model" in data:
            data["model"] = _strict(ModelConfig, data["model"], "model")
        if "adam" in data:
            data["adam"] = _strict(AdamConfig, data["adam"], "adam")
        if "noise_levels" in data:
            data["noise_levels"] = tuple(float(v) for v in data["noise_levels"])
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        with open(path, encoding="utf-8") as fh:
            try:
                return cls.from_dict(json.load(fh))
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON ({exc})") from exc

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["noise_levels"] = list(self.noise_levels)
        return d

    def fingerprint(self) -> str:
        """sha256 of the canonical config JSON, output_dir excluded (it does not affect results)."""
        d = self.to_dict()
        d.pop("output_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode("utf-8")).hexdigest()[:16]


# datasets and models ---------------------------------------------------------

def load_dataset(cfg: DatasetConfig) -> tuple[Dataset, Dataset]:
    if cfg.kind == "synth":
        train, test = synth_dataset(cfg.n_classes, cfg.per_class, cfg.side, cfg.seed,
                                    test_per_class=cfg.test_per_class)
    elif cfg.kind == "cifar10":
        train, test = load_cifar10(cfg.path)
    else:
        data = load_raw_container(cfg.path)
        if cfg.test_path:
            train, test = data, load_raw_container(cfg.test_path)
            test.ids = test.ids + len(train)
        else:
            train, test = stratified_split(data, cfg.test_fraction, cfg.split_seed)
    return train.head(cfg.train_limit), test.head(cfg.test_limit)


def build_model(cfg: ModelConfig, input_shape, num_classes: int, dataset_kind: str = "") -> ModelSpec:
    final = cfg.final_conv_filters
    if final is None:
        final = CIFAR10_FINAL_FILTERS if dataset_kind == "cifar10" else DEFAULT_FINAL_FILTERS
    if cfg.variant == "simple":
        return build_simple_convnet(input_shape, num_classes, final, 1)
    if cfg.variant == "wide":
        return build_simple_convnet(input_shape, num_classes, final, cfg.width_multiplier)
    return build_streaming_net(input_shape, num_classes, cfg.band_list(), final, cfg.hidden_dense)


# metrics ---------------------------------------------------------------------

@dataclass(frozen=True)
class MetricsRecord:
    epoch: float
    step: int
    noise: float
    accuracy: float
    correct: int
    total: int
    loss: float
    wall_clock_seconds: float
    config_fingerprint: str
    adam_betas: tuple[float, float]
    train_accuracy: float | None = None

    def to_json(self) -> str:
        d = dataclasses.asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return json.dumps(d, sort_keys=True)


def read_metrics(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def strip_wall_clock(lines: Sequence[str]) -> list[str]:
    out = []
    for line in lines:
        d = json.loads(line)
        for k in WALL_CLOCK_FIELDS:
            d.pop(k, None)
        out.append(json.dumps(d, sort_keys=True))
    return out


@dataclass
class RunResult:
    config: ExperimentConfig
    spec: ModelSpec
    state: dict
    records: list[MetricsRecord]
    metrics_path: Path
    checkpoint_path: Path
    data_notes: dict


def _noise_specs(config: ExperimentConfig) -> list[tuple[float, NoiseSpec | None]]:
    out = []
    for level in sorted(set(round(l, 10) for l in config.noise_levels)):
        out.append((level, None if level == 0.0 else NoiseSpec(level, noise_seed(config.seed, level))))
    return out


def run_experiment(config: ExperimentConfig, datasets: tuple[Dataset, Dataset] | None = None) -> RunResult:
    """Train, evaluate across the noise grid, stream metrics to ``metrics.jsonl``.

    The training set is never corrupted. Each noise level uses one
    corruption realization for the whole run (seeded from ``config.seed``).
    A checkpoint is written after every evaluation, so an aborted run keeps
    its last good parameters.
    """
    train, test = datasets if datasets is not None else load_dataset(config.dataset)
    spec = build_model(config.model, train.image_shape, train.n_classes, config.dataset.kind)
    state = init_state(spec, int(derive_seed(config.seed, 1)) >> 1)
    trainer = Trainer(spec, state, config.adam)

    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics_path, ckpt_path = out / "metrics.jsonl", out / "checkpoint.snet"
    fingerprint = config.fingerprint()
    notes = {
        "dataset": config.dataset.kind,
        "train_count": len(train),
        "test_count": len(test),
        "image_shape": list(train.image_shape),
        "split": "given" if config.dataset.kind != "sndt" or config.dataset.test_path
                 else f"stratified {config.dataset.test_fraction} seed {config.dataset.split_seed}",
        "adam": dataclasses.asdict(config.adam),
        "model": spec.to_dict(),
        "param_count": spec.param_count(),
        "config_fingerprint": fingerprint,
    }
    (out / "run_meta.json").write_text(json.dumps(notes, indent=2, sort_keys=True) + "\n")
    (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
    logger.info("run %s: %s on %s (%d train / %d test)", fingerprint, spec.variant,
                config.dataset.kind, len(train), len(test))

    levels = _noise_specs(config)
    records: list[MetricsRecord] = []
    start = time.perf_counter()
    steps_per_epoch = -(-len(train) // config.batch_size)
    metrics_path.write_text("")

    track_train = config.record_train_accuracy or config.stop_at_train_accuracy is not None
    last_train_acc = [0.0]

    def record(epoch_value: float, loss: float) -> None:
        train_acc = None
        if track_train:
            train_acc = last_train_acc[0] = evaluate_counts(spec, trainer.state, train).value
        with open(metrics_path, "a", encoding="utf-8") as fh:
            for level, noise in levels:
                acc = evaluate_counts(spec, trainer.state, test, noise)
                rec = MetricsRecord(
                    epoch=epoch_value, step=trainer.step_count, noise=level, accuracy=acc.value,
                    correct=acc.correct, total=acc.total, loss=loss,
                    wall_clock_seconds=round(time.perf_counter() - start, 3),
                    config_fingerprint=fingerprint,
                    adam_betas=(config.adam.beta1, config.adam.beta2),
                    train_accuracy=train_acc if level == levels[0][0] else None,
                )
                records.append(rec)
                fh.write(rec.to_json() + "\n")
                fh.flush()
        save_checkpoint(spec, trainer.state, ckpt_path)

    def on_step(tr: Trainer, running_loss: float) -> None:
        if config.eval_every_steps and tr.step_count % config.eval_every_steps == 0:
            record(round(tr.step_count / steps_per_epoch, 6), running_loss)

    for epoch in range(1, config.epochs + 1):
        try:
            loss = trainer.train_epoch(train, config.batch_size, int(derive_seed(config.seed, epoch) >> 1),
                                       on_step if config.eval_every_steps else None)
        except NonFiniteError as exc:
            raise NonFiniteError(f"{exc}; last good checkpoint: {ckpt_path}") from exc
        if not config.eval_every_steps:
            record(epoch, loss)
        logger.info("epoch %d/%d loss %.4f clean acc %.4f", epoch, config.epochs, loss,
                    next(r.accuracy for r in reversed(records) if r.noise == 0.0) if records else float("nan"))
        if config.stop_at_train_accuracy is not None and last_train_acc[0] >= config.stop_at_train_accuracy:
            logger.info("train accuracy %.4f reached the target; stopping", last_train_acc[0])
            break
    if config.eval_every_steps and (not records or records[-1].step != trainer.step_count):
        record(round(trainer.step_count / steps_per_epoch, 6), loss)
    return RunResult(config, spec, trainer.state, records, metrics_path, ckpt_path, notes)


# smoothing and plotting --------------------------------------------------------

def moving_average(series: Sequence[float], window: int = 7) -> np.ndarray:
    """Centered moving average; near the ends the window shrinks symmetrically."""
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window must be odd and >= 1, got {window}")
    x = np.asarray(series, dtype=np.float64)
    n, half = len(x), window // 2
    out = np.empty(n)
    for i in range(n):
        h = min(half, i, n - 1 - i)
        out[i] = x[i - h:i + h + 1].mean()
    return out


def metrics_to_csv(records: Sequence[Mapping]) -> str:
    if not records:
        raise ValueError("no metrics records to plot")
    by_level: dict[float, list[Mapping]] = {}
    for r in records:
        by_level.setdefault(float(r["noise"]), []).append(r)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for level in sorted(by_level):
        rows = sorted(by_level[level], key=lambda r: (float(r["epoch"]), int(r.get("step", 0))))
        smooth = moving_average([r["accuracy"] for r in rows], 7)
        for r, s in zip(rows, smooth):
            writer.writerow([repr(float(r["epoch"])), repr(level), repr(float(r["accuracy"])),
                             repr(float(s)), repr(float(r["loss"]))])
    return buf.getvalue()


def read_curve_csv(path) -> dict[float, dict[str, np.ndarray]]:
    curves: dict[float, dict[str, list[float]]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_HEADER:
            raise ValueError(f"unexpected CSV header {reader.fieldnames}")
        for row in reader:
            c = curves.setdefault(float(row["noise"]), {k: [] for k in CSV_HEADER if k != "noise"})
            for k in c:
                c[k].append(float(row[k]))
    return {lvl: {k: np.array(v) for k, v in c.items()} for lvl, c in curves.items()}


def plot_csv(csv_path, out_path) -> None:
    """Render accuracy-vs-epoch curves from the CSV alone.

    Noisy levels: raw accuracy dotted, 7-point smoothing solid, one colour
    per level. Clean accuracy: solid green plus its mean as a dashed line.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    curves = read_curve_csv(csv_path)
    with matplotlib.rc_context({"svg.hashsalt": "streamnet", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(8, 5))
        cmap = plt.get_cmap("viridis")
        noisy = [lvl for lvl in sorted(curves) if lvl > 0]
        for i, lvl in enumerate(noisy):
            c = curves[lvl]
            color = cmap(i / max(len(noisy) - 1, 1))
            ax.plot(c["epoch"], c["accuracy"], linestyle=":", color=color, marker="." if len(c["epoch"]) == 1 else None)
            ax.plot(c["epoch"], c["accuracy_smooth7"], linestyle="-", color=color, label=f"noise {lvl:.1f}")
        if 0.0 in curves:
            c = curves[0.0]
            ax.plot(c["epoch"], c["accuracy"], color="green", linewidth=2, label="clean",
                    marker="." if len(c["epoch"]) == 1 else None)
            ax.axhline(float(c["accuracy"].mean()), color="green", linestyle="--", linewidth=1,
                       label="clean mean")
        ax.set_xlabel("epoch")
        ax.set_ylabel("test accuracy")
        ax.set_ylim(0, 1)
        ax.legend(fontsize="small", ncol=2)
        fig.tight_layout()
        fig.savefig(out_path, format=Path(out_path).suffix.lstrip(".") or "svg", metadata={"Date": None})
        plt.close(fig)


def emit_plot(metrics_path, out_path) -> Path:
    """Write ``<out>.csv`` from the metrics file, then render the plot from that CSV."""
    out_path = Path(out_path)
    csv_path = out_path.with_suffix(".csv")
    csv_path.write_text(metrics_to_csv(read_metrics(metrics_path)), encoding="utf-8")
    plot_csv(csv_path, out_path)
    return csv_path
