"""Pretraining, regularized fine-tuning, evaluation and the alpha sweep."""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import ConfigError
from .losses import REG_KINDS, LossConfig, evaluate_total
from .metrics import MetricReport, TemporalFilter, evaluate_sequences
from .nn import (
    AdamHyperparams,
    AdamState,
    Network,
    NetworkConfig,
    apply_update,
    forward,
    init_network,
    load_checkpoint,
    save_checkpoint,
)
from .procgen import SceneSpec, SequenceSet, as_arrays, generate_test_sequences, generate_training_set
from .tensorcore import NoiseSpec, TransformRanges

log = logging.getLogger(__name__)

CSV_COLUMNS = ("reg_kind", "alpha", "seed", "psnr_db", "smoothness",
               "pretrain_step_ms", "finetune_step_ms", "status")
TIMING_COLUMNS = ("pretrain_step_ms", "finetune_step_ms")


def alpha_grid(indices=range(1, 13)) -> list[float]:
    """Blend weights at which the reg/rec ratio doubles from point to point."""
    out = []
    for i in indices:
        ratio = 2.0 ** (i - 3)
        out.append(ratio / (ratio + 1.0))
    return out


@dataclass
class ExperimentConfig:
    """Everything one sweep needs. Flat so it maps onto a key = value file."""

    output_dir: str = "runs"
    seed: int = 0  # run seeds are seed, seed + 1, ...
    repetitions: int = 5
    workers: int = 1
    # data
    scene_seed: int = 1234
    train_count: int = 2000
    patch_size: int = 32
    test_size: int = 64
    test_sequences: int = 8
    test_frames: int = 60
    frame_rate: float = 25.0
    y_max: float = 4.0
    # network
    encoder_widths: tuple[int, ...] = (8, 16)
    skip_connections: bool = True
    downsample: str = "maxpool"
    upsample: str = "transposed"
    kernel_size: int = 3
    # schedules
    batch_size: int = 16
    pretrain_epochs: int = 20
    pretrain_lr: float = 1e-3
    finetune_epochs: int = 10
    finetune_lr: float = 1e-4
    # sweep
    reg_kinds: tuple[str, ...] = ("stability-noise", "stability-transform",
                                  "transform-invariance", "sparse-jacobian", "augmentation")
    alpha_indices: tuple[int, ...] = tuple(range(1, 13))
    alphas: tuple[float, ...] = ()  # explicit list; overrides alpha_indices when given
    augmentation_alpha: float = 0.5  # equal weight on N originals and N warped copies
    noise_sigma_min: float = 0.01
    noise_sigma_max: float = 0.04

    def __post_init__(self):
        self.encoder_widths = tuple(self.encoder_widths)
        self.reg_kinds = tuple(self.reg_kinds)
        self.alpha_indices = tuple(self.alpha_indices)
        self.alphas = tuple(self.alphas)
        if self.repetitions < 1:
            raise ConfigError("repetitions must be >= 1")
        for k in self.reg_kinds:
            if k not in REG_KINDS or k == "none":
                raise ConfigError(f"unknown regularizer {k!r} in reg_kinds")
        for a in self.sweep_alphas:
            if not 0.0 < a < 1.0:
                raise ConfigError(f"sweep alpha {a} outside (0, 1)")
        if list(self.sweep_alphas) != sorted(set(self.sweep_alphas)):
            raise ConfigError("sweep alphas must be strictly increasing")
        if self.batch_size < 1 or self.train_count < 1:
            raise ConfigError("batch_size and train_count must be positive")
        self.network_config()
        self.scene_spec()
        self.noise_spec()

    @property
    def sweep_alphas(self) -> tuple[float, ...]:
        return self.alphas if self.alphas else tuple(alpha_grid(self.alpha_indices))

    @property
    def seeds(self) -> list[int]:
        return [self.seed + r for r in range(self.repetitions)]

    def network_config(self) -> NetworkConfig:
        return NetworkConfig(
            encoder_widths=self.encoder_widths,
            use_skip_connections=self.skip_connections,
            downsample=self.downsample,
            upsample=self.upsample,
            kernel_size=self.kernel_size,
        )

    def scene_spec(self) -> SceneSpec:
        return SceneSpec(seed=self.scene_seed, image_size=self.patch_size, y_max=self.y_max)

    def noise_spec(self) -> NoiseSpec:
        return NoiseSpec(self.noise_sigma_min, self.noise_sigma_max)

    def conditions(self) -> list[tuple[str, float]]:
        """Fine-tune conditions: plain continuation plus every (regularizer, alpha)."""
        out = [("none", 0.0)]
        for kind in self.reg_kinds:
            if kind == "augmentation":
                out.append((kind, self.augmentation_alpha))
            else:
                out.extend((kind, a) for a in self.sweep_alphas)
        return out

    def loss_config(self, kind: str, alpha: float) -> LossConfig:
        return LossConfig(alpha=alpha, reg_kind=kind, transform_ranges=TransformRanges(),
                          noise=self.noise_spec())


# ---------------------------------------------------------------------------
# config file: one "key = value" per line, '#' starts a comment, lists are
# comma separated, booleans are true/false


def _coerce(name: str, typ, text: str):
    text = text.strip()
    if "tuple" in str(typ):
        items = [t.strip() for t in text.split(",") if t.strip()]
        if "int" in str(typ):
            return tuple(int(t) for t in items)
        if "float" in str(typ):
            return tuple(float(t) for t in items)
        return tuple(items)
    if typ in (bool, "bool"):
        if text.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise ConfigError(f"{name}: expected a boolean, got {text!r}")
        return text.lower() in ("true", "1", "yes")
    if typ in (int, "int"):
        return int(text)
    if typ in (float, "float"):
        return float(text)
    return text


def parse_config(text: str, **overrides) -> ExperimentConfig:
    types = {f.name: f.type for f in fields(ExperimentConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(key, types[key], val)
    values.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig(**values)


def load_config(path=None, **overrides) -> ExperimentConfig:
    text = Path(path).read_text() if path else ""
    return parse_config(text, **overrides)


def format_config(cfg: ExperimentConfig) -> str:
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ", ".join(str(t) for t in v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray


def training_data(cfg: ExperimentConfig) -> Dataset:
    x, y, _ = as_arrays(generate_training_set(cfg.scene_spec(), cfg.train_count))
    return Dataset(x.astype(np.float32), y.astype(np.float32))


def test_data(cfg: ExperimentConfig) -> SequenceSet:
    spec = cfg.scene_spec().scaled(cfg.test_size)
    return generate_test_sequences(spec, cfg.test_sequences, cfg.test_frames, cfg.frame_rate)


@dataclass
class TrainResult:
    net: Network
    initial_loss: float
    final_loss: float
    step_ms: float
    steps: int
    status: str = "ok"
    epoch_losses: list[float] = field(default_factory=list)


def dataset_mse(net: Network, data: Dataset, batch: int = 64) -> float:
    total = 0.0
    for s in range(0, len(data.x), batch):
        d = forward(net, data.x[s:s + batch]).astype(np.float64) - data.y[s:s + batch]
        total += float(np.sum(d * d))
    return total / data.y.size


def _step(net, data, idx, loss_cfg, state, hp, rng):
    out = evaluate_total(net, (data.x[idx], data.y[idx]), loss_cfg, rng)
    apply_update(net, out.grads, state, hp)
    return out


def train(net: Network, data: Dataset, loss_cfg: LossConfig, epochs: int, batch_size: int,
          lr: float, rng: np.random.Generator, max_steps: int | None = None) -> TrainResult:
    """Adam on the blended loss. ``net`` is updated in place."""
    hp = AdamHyperparams(lr=lr)
    state = AdamState()
    initial = dataset_mse(net, data)
    n = len(data.x)
    elapsed = 0.0
    steps = 0
    epoch_losses = []
    status = "ok"
    for _ in range(epochs):
        order = rng.permutation(n)
        running = 0.0
        for s in range(0, n, batch_size):
            idx = order[s:s + batch_size]
            t0 = time.perf_counter()
            out = _step(net, data, idx, loss_cfg, state, hp, rng)
            elapsed += time.perf_counter() - t0
            steps += 1
            running += out.total * len(idx)
            if not math.isfinite(out.total):
                status = "failed: loss diverged"
                break
            if max_steps is not None and steps >= max_steps:
                break
        epoch_losses.append(running / n)
        if status != "ok" or (max_steps is not None and steps >= max_steps):
            break
    final = dataset_mse(net, data) if status == "ok" else math.nan
    return TrainResult(net, initial, final, 1000.0 * elapsed / steps if steps else 0.0,
                       steps, status, epoch_losses)


def pretrain(cfg: ExperimentConfig, seed: int, data: Dataset | None = None,
             checkpoint: Path | None = None) -> TrainResult:
    """Reconstruction-only training from a fresh initialization."""
    data = data if data is not None else training_data(cfg)
    net = init_network(cfg.network_config(), np.random.default_rng([seed, 0]))
    res = train(net, data, LossConfig(), cfg.pretrain_epochs, cfg.batch_size, cfg.pretrain_lr,
                np.random.default_rng([seed, 1]))
    if checkpoint is not None:
        save_checkpoint(res.net, checkpoint)
    return res


def finetune(net: Network, loss_cfg: LossConfig, cfg: ExperimentConfig, seed: int,
             data: Dataset | None = None, max_steps: int | None = None) -> TrainResult:
    """Second training stage on the blended loss, starting from a copy of ``net``."""
    data = data if data is not None else training_data(cfg)
    return train(net.copy(), data, loss_cfg, cfg.finetune_epochs, cfg.batch_size,
                 cfg.finetune_lr, np.random.default_rng([seed, 2]), max_steps)


def interleaved_step_times(net: Network, data: Dataset, loss_cfgs: list[LossConfig],
                           steps: int, batch_size: int, lr: float, seed: int,
                           warmup: int = 5) -> list[np.ndarray]:
    """Per-step wall times in ms for several fine-tune conditions run in turn.

    Each condition trains its own copy of ``net`` exactly as :func:`finetune`
    would, but the conditions take one step each in round-robin order, so slow
    drift in machine speed lands on all of them alike. The first ``warmup``
    steps are not returned.
    """
    hp = AdamHyperparams(lr=lr)
    runs = []
    for cfg in loss_cfgs:
        runs.append([net.copy(), cfg, AdamState(), np.random.default_rng([seed, 2]), [], []])
    n = len(data.x)
    for _ in range(warmup + steps):
        for run in runs:
            model, cfg, state, rng, queue, times = run
            if not queue:
                order = rng.permutation(n)
                queue.extend(order[s:s + batch_size] for s in range(0, n, batch_size))
            idx = queue.pop(0)
            t0 = time.perf_counter()
            _step(model, data, idx, cfg, state, hp, rng)
            times.append(1000.0 * (time.perf_counter() - t0))
    return [np.array(run[5][warmup:]) for run in runs]


def predict_sequences(net: Network | Callable, seqs: SequenceSet, batch: int = 16):
    preds = []
    for k in range(len(seqs.sequences)):
        x, _, _ = seqs.stacked(k)
        if isinstance(net, Network):
            out = np.concatenate([forward(net, x[s:s + batch].astype(net.params[0].dtype))
                                  for s in range(0, len(x), batch)])
        else:
            out = np.asarray(net(x))
        preds.append(out.astype(np.float64))
    return preds


def evaluate(net: Network | Callable, seqs: SequenceSet, peak: float = 4.0) -> MetricReport:
    """Masked PSNR and smoothness over every sequence of the test set.

    ``net`` may be a Network or any callable mapping a (T, H, W, C) input batch
    to predictions.
    """
    refs, masks = [], []
    for k in range(len(seqs.sequences)):
        _, y, m = seqs.stacked(k)
        refs.append(y)
        masks.append(m)
    preds = predict_sequences(net, seqs)
    return evaluate_sequences(refs, preds, masks, peak=peak,
                              filt=TemporalFilter(frame_rate=seqs.frame_rate))


# ---------------------------------------------------------------------------


@dataclass
class RunRecord:
    reg_kind: str
    alpha: float
    seed: int
    psnr_db: float
    smoothness: float
    pretrain_step_ms: float
    finetune_step_ms: float | None
    status: str = "ok"
    checkpoint: str = ""

    def row(self) -> list[str]:
        def num(v):
            return "" if v is None else repr(float(v))
        return [self.reg_kind, num(self.alpha), str(self.seed), num(self.psnr_db),
                num(self.smoothness), num(self.pretrain_step_ms), num(self.finetune_step_ms),
                self.status]


def _failed(kind, alpha, seed, pre_ms, msg) -> RunRecord:
    return RunRecord(kind, alpha, seed, math.nan, math.nan, pre_ms, None, f"failed: {msg}")


def run_seed(cfg: ExperimentConfig, seed: int) -> list[RunRecord]:
    """Pretrain (or reuse a checkpoint) and run every fine-tune condition for one seed."""
    out_dir = Path(cfg.output_dir)
    ckpt_dir = out_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    data = training_data(cfg)
    seqs = test_data(cfg)
    base_path = ckpt_dir / f"pretrain_seed{seed}.ckpt"
    if base_path.exists():
        base = load_checkpoint(base_path)
        pre_ms = math.nan
        log.info("seed %d: reusing %s", seed, base_path)
    else:
        res = pretrain(cfg, seed, data, None)
        pre_ms = res.step_ms
        if res.status != "ok":
            return [_failed("baseline", 0.0, seed, pre_ms, res.status)]
        base = res.net
        save_checkpoint(base, base_path)
        log.info("seed %d: pretrained, mse %.4g -> %.4g", seed, res.initial_loss, res.final_loss)

    rep = evaluate(base, seqs, peak=cfg.y_max)
    records = [RunRecord("baseline", 0.0, seed, rep.psnr, rep.smoothness, pre_ms, None,
                         checkpoint=str(base_path))]
    for kind, alpha in cfg.conditions():
        try:
            res = finetune(base, cfg.loss_config(kind, alpha), cfg, seed, data)
        except (FloatingPointError, ValueError) as exc:
            records.append(_failed(kind, alpha, seed, pre_ms, exc))
            continue
        if res.status != "ok":
            records.append(RunRecord(kind, alpha, seed, math.nan, math.nan, pre_ms,
                                     res.step_ms, res.status))
            continue
        path = ckpt_dir / f"{kind}_a{alpha:.6f}_seed{seed}.ckpt"
        save_checkpoint(res.net, path)
        rep = evaluate(res.net, seqs, peak=cfg.y_max)
        log.info("seed %d %s alpha=%.4f: psnr %.3f S %.4f", seed, kind, alpha, rep.psnr,
                 rep.smoothness)
        records.append(RunRecord(kind, alpha, seed, rep.psnr, rep.smoothness, pre_ms,
                                 res.step_ms, checkpoint=str(path)))
    return records


def _run_seed_safe(cfg: ExperimentConfig, seed: int) -> list[RunRecord]:
    try:
        return run_seed(cfg, seed)
    except Exception as exc:  # keep the sweep going; the row records the failure
        log.exception("seed %d failed", seed)
        return [_failed("baseline", 0.0, seed, math.nan, exc)]


def sort_records(records: list[RunRecord]) -> list[RunRecord]:
    return sorted(records, key=lambda r: (r.reg_kind, r.alpha, r.seed))


def records_csv(records: list[RunRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in sort_records(records):
        w.writerow(r.row())
    return buf.getvalue()


def read_records(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def summarize(records: list[RunRecord]) -> list[dict]:
    """Mean and sample standard deviation per (reg_kind, alpha) over successful runs."""
    groups: dict[tuple[str, float], list[RunRecord]] = {}
    for r in sort_records(records):
        groups.setdefault((r.reg_kind, r.alpha), []).append(r)
    rows = []
    for (kind, alpha), rs in groups.items():
        ok = [r for r in rs if r.status == "ok"]
        p = np.array([r.psnr_db for r in ok])
        s = np.array([r.smoothness for r in ok])
        ddof = 1 if len(ok) > 1 else 0
        rows.append({
            "reg_kind": kind,
            "alpha": alpha,
            "runs": len(ok),
            "failed": len(rs) - len(ok),
            "psnr_mean": float(p.mean()) if len(ok) else math.nan,
            "psnr_std": float(p.std(ddof=ddof)) if len(ok) else math.nan,
            "smoothness_mean": float(s.mean()) if len(ok) else math.nan,
            "smoothness_std": float(s.std(ddof=ddof)) if len(ok) else math.nan,
        })
    return rows


def summary_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    keys = ["reg_kind", "alpha", "runs", "failed", "psnr_mean", "psnr_std",
            "smoothness_mean", "smoothness_std"]
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(keys)
    for r in rows:
        w.writerow([repr(r[k]) if isinstance(r[k], float) else r[k] for k in keys])
    return buf.getvalue()


def gnuplot_table(rows: list[dict]) -> str:
    """Whitespace-separated blocks, one per reg_kind, separated by two blank lines."""
    out = []
    kinds = []
    for r in rows:
        if r["reg_kind"] not in kinds:
            kinds.append(r["reg_kind"])
    for kind in kinds:
        out.append(f"# {kind}\n# alpha psnr_mean psnr_std smoothness_mean smoothness_std")
        for r in rows:
            if r["reg_kind"] == kind:
                out.append(f"{r['alpha']!r} {r['psnr_mean']!r} {r['psnr_std']!r} "
                           f"{r['smoothness_mean']!r} {r['smoothness_std']!r}")
        out.append("\n")
    return "\n".join(out)


def run_sweep(cfg: ExperimentConfig, gnuplot: bool = False) -> Path:
    """Run every (condition, seed) pair and write ``results.csv`` and ``summary.csv``."""
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.txt").write_text(format_config(cfg))
    records: list[RunRecord] = []
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            for recs in pool.map(_run_seed_safe, [cfg] * len(cfg.seeds), cfg.seeds):
                records.extend(recs)
    else:
        for seed in cfg.seeds:
            records.extend(_run_seed_safe(cfg, seed))
    path = out_dir / "results.csv"
    path.write_text(records_csv(records))
    rows = summarize(records)
    (out_dir / "summary.csv").write_text(summary_csv(rows))
    if gnuplot:
        (out_dir / "summary.dat").write_text(gnuplot_table(rows))
    return path


def strip_timing(csv_text: str) -> str:
    """CSV text with the wall-clock columns blanked, for reproducibility checks."""
    rows = list(csv.reader(io.StringIO(csv_text)))
    header = rows[0]
    drop = [header.index(c) for c in TIMING_COLUMNS]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for r in rows:
        w.writerow([v for i, v in enumerate(r) if i not in drop])
    return buf.getvalue()


def with_overrides(cfg: ExperimentConfig, **kw) -> ExperimentConfig:
    return replace(cfg, **{k: v for k, v in kw.items() if v is not None})
