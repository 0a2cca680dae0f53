"""Training loop, checkpointing, evaluation driver, and figure export.

Training is bitwise reproducible for a given seed: one generator drives
batch sampling and crop offsets in a fixed order, parameters are seeded
from the config, and every numeric kernel is deterministic.
"""

from __future__ import annotations

import json
import math
import struct
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import dsp
from .data import MixtureExample, random_crop
from .errors import ShapeError
from .matching import match_by_score, pit_mse_loss
from .metrics import si_snr, si_snri
from .model import ModelConfig, SeparationModel
from .separation import MASK_TYPES, separate

CHECKPOINT_MAGIC = b"ASLT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 300_000
    batch_size: int = 64
    base_lr: float = 2e-4
    warmup_steps: int = 2_500
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    crop_seconds: float = 0.5
    eval_every: int = 0       # 0 disables periodic eval
    checkpoint_every: int = 0  # 0 disables periodic checkpoints

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0 <= self.warmup_steps < self.steps:
            raise ValueError(
                f"warmup_steps {self.warmup_steps} must lie inside [0, steps={self.steps})"
            )

    @classmethod
    def desk_scale(cls, **overrides) -> "TrainConfig":
        """Small-run defaults that finish on a desktop CPU."""
        merged = dict(steps=5_000, batch_size=8, warmup_steps=100)
        merged.update(overrides)
        return cls(**merged)


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Linear warmup from zero, then cosine decay to exactly zero."""
    if not 0 <= step <= cfg.steps:
        raise ValueError(f"step {step} outside [0, {cfg.steps}]")
    if step < cfg.warmup_steps:
        return cfg.base_lr * step / cfg.warmup_steps
    progress = (step - cfg.warmup_steps) / (cfg.steps - cfg.warmup_steps)
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def init(cls, params: dict[str, ad.Tensor]) -> "AdamState":
        return cls(
            m={k: np.zeros_like(t.data) for k, t in params.items()},
            v={k: np.zeros_like(t.data) for k, t in params.items()},
        )


def adam_step(
    params: dict[str, ad.Tensor],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update in place; params without a gradient
    are left untouched."""
    state.step += 1
    correction1 = 1.0 - beta1**state.step
    correction2 = 1.0 - beta2**state.step
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ShapeError(f"{name}: gradient shape {g.shape} != parameter shape {p.data.shape}")
        m = state.m[name]
        v = state.v[name]
        m += (1.0 - beta1) * (g - m)
        v += (1.0 - beta2) * (g * g - v)
        m_hat = m / correction1
        v_hat = v / correction2
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.data.dtype)


class MetricsLog:
    """Line-oriented key=value event log, optionally mirrored to a file."""

    def __init__(self, path=None, echo: bool = False):
        self.path = Path(path) if path else None
        self.echo = echo
        self._fh = open(self.path, "a") if self.path else None

    def log(self, event: str, **kv) -> None:
        parts = [f"event={event}"]
        for key, value in kv.items():
            if isinstance(value, float):
                parts.append(f"{key}={value!r}")
            else:
                parts.append(f"{key}={value}")
        line = " ".join(parts)
        if self._fh:
            self._fh.write(line + "\n")
            self._fh.flush()
        if self.echo:
            print(line, file=sys.stderr)

    def close(self) -> None:
        if self._fh:
            self._fh.close()
            self._fh = None


def preprocess_example(ex: MixtureExample) -> tuple[np.ndarray, np.ndarray]:
    """Mixture input grid and stacked per-source target grids (Nyquist
    row cropped to the model's frequency count)."""
    mix = dsp.compress(dsp.stft(ex.mixture).magnitude).values[:-1]
    targets = np.stack(
        [dsp.compress(dsp.stft(s).magnitude).values[:-1] for s in ex.sources]
    )
    return mix, targets


def train(
    train_cfg: TrainConfig,
    model_cfg: ModelConfig,
    dataset,
    out_dir=None,
    log: MetricsLog | None = None,
    early_stop: Callable[[int, float], bool] | None = None,
    model: SeparationModel | None = None,
):
    """Run the optimization loop; returns (model, adam_state, history).

    ``history`` holds one (step, loss, lr) triple per executed step.
    ``early_stop(step, loss)`` may end the run after any step.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    own_log = log is None
    if own_log:
        log = MetricsLog(out / "metrics.log" if out else None)
    log.log("config", **_flat_config(train_cfg, model_cfg))

    if model is None:
        model = SeparationModel(model_cfg, seed=train_cfg.seed)
    state = AdamState.init(model.params)
    rng = np.random.default_rng(train_cfg.seed)
    history: list[tuple[int, float, float]] = []

    for step in range(train_cfg.steps):
        indices = rng.integers(0, len(dataset), size=train_cfg.batch_size)
        inputs, targets = [], []
        for i in indices:
            ex = random_crop(dataset.example(int(i)), train_cfg.crop_seconds, rng)
            grid, tgt = preprocess_example(ex)
            inputs.append(grid)
            targets.append(tgt)
        batch = np.stack(inputs)

        with ad.GradientTape() as tape:
            preds = model.forward(batch)
            n = model.config.n_slots
            per_example = []
            for b in range(train_cfg.batch_size):
                pb = ad.reshape(
                    ad.take(preds, [b], axis=0),
                    (n, model.config.freq_bins, model.config.time_frames),
                )
                loss_b, _ = pit_mse_loss(pb, targets[b])
                per_example.append(loss_b)
            total = per_example[0]
            for extra in per_example[1:]:
                total = ad.add(total, extra)
            loss = ad.mul(total, ad.Tensor(np.float32(1.0 / train_cfg.batch_size)))

        loss_value = float(loss.data)
        if not math.isfinite(loss_value):
            raise RuntimeError(f"non-finite loss at step {step}")
        tape.backward(loss)
        lr = lr_schedule(step, train_cfg)
        adam_step(
            model.params, state, lr,
            beta1=train_cfg.beta1, beta2=train_cfg.beta2, eps=train_cfg.adam_eps,
        )
        history.append((step, loss_value, lr))
        log.log("train_step", step=step, loss=loss_value, lr=lr)

        if train_cfg.eval_every and (step + 1) % train_cfg.eval_every == 0:
            probe = _probe_loss(model, dataset, train_cfg)
            log.log("eval", step=step, probe_loss=probe)
        if out and train_cfg.checkpoint_every and (step + 1) % train_cfg.checkpoint_every == 0:
            ckpt_path = out / f"step{step + 1:08d}.ckpt"
            save_checkpoint(ckpt_path, model, train_cfg, step + 1, state)
            log.log("checkpoint", step=step, path=ckpt_path)
        if early_stop is not None and early_stop(step, loss_value):
            log.log("early_stop", step=step, loss=loss_value)
            break

    if out:
        final = out / "final.ckpt"
        save_checkpoint(final, model, train_cfg, state.step, state)
        log.log("checkpoint", step=state.step, path=final)
    if own_log:
        log.close()
    return model, state, history


def _probe_loss(model: SeparationModel, dataset, train_cfg: TrainConfig, limit: int = 8) -> float:
    """Mean PIT loss over the first examples, crops pinned to offset 0."""
    rng = np.random.default_rng(0)
    losses = []
    for i in range(min(limit, len(dataset))):
        ex = random_crop(dataset.example(i), train_cfg.crop_seconds, rng)
        grid, tgt = preprocess_example(ex)
        preds = model.forward(grid[None])
        loss, _ = pit_mse_loss(preds.data[0], tgt)
        losses.append(loss)
    return float(np.mean(losses))


def _flat_config(train_cfg: TrainConfig, model_cfg: ModelConfig) -> dict:
    merged = {}
    for cfg in (train_cfg, model_cfg):
        for key, value in asdict(cfg).items():
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            merged[key] = value
    return merged


# ---- checkpoint format -------------------------------------------------


def save_checkpoint(
    path,
    model: SeparationModel,
    train_cfg: TrainConfig | None = None,
    step: int = 0,
    adam_state: AdamState | None = None,
) -> None:
    """Binary checkpoint: magic, version, JSON header, raw little-endian
    float32 tensors. Round trips are bitwise exact."""
    names = list(model.params.keys())
    header = {
        "model_config": asdict(model.config),
        "train_config": asdict(train_cfg) if train_cfg else None,
        "step": int(step),
        "params": [{"name": n, "shape": list(model.params[n].shape)} for n in names],
        "optimizer": {"step": adam_state.step} if adam_state else None,
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        f.write(blob)
        for n in names:
            f.write(np.ascontiguousarray(model.params[n].data, dtype="<f4").tobytes())
        if adam_state:
            for n in names:
                f.write(np.ascontiguousarray(adam_state.m[n], dtype="<f4").tobytes())
            for n in names:
                f.write(np.ascontiguousarray(adam_state.v[n], dtype="<f4").tobytes())


@dataclass
class Checkpoint:
    model_config: ModelConfig
    train_config: TrainConfig | None
    step: int
    params: dict[str, np.ndarray]
    adam_state: AdamState | None

    def build_model(self, dtype=np.float32) -> SeparationModel:
        model = SeparationModel(self.model_config, seed=0, dtype=dtype)
        for name, values in self.params.items():
            if name not in model.params:
                raise ValueError(f"checkpoint parameter {name} unknown to the model")
            if model.params[name].shape != values.shape:
                raise ShapeError(
                    f"{name}: checkpoint shape {values.shape} != model shape "
                    f"{model.params[name].shape}"
                )
            model.params[name].data = values.astype(dtype)
        return model


def _config_from_dict(cls, data: dict | None):
    if data is None:
        return None
    kwargs = {}
    for f in fields(cls):
        if f.name not in data:
            continue
        value = data[f.name]
        if isinstance(value, list):
            value = tuple(value)
        kwargs[f.name] = value
    return cls(**kwargs)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint (magic {magic!r})")
        version, header_len = struct.unpack("<II", f.read(8))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(f.read(header_len).decode("utf-8"))
        params = {}
        for entry in header["params"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(f.read(4 * count), dtype="<f4").reshape(shape)
            params[entry["name"]] = data.copy()
        adam = None
        if header.get("optimizer"):
            m, v = {}, {}
            for store in (m, v):
                for entry in header["params"]:
                    shape = tuple(entry["shape"])
                    count = int(np.prod(shape)) if shape else 1
                    store[entry["name"]] = (
                        np.frombuffer(f.read(4 * count), dtype="<f4").reshape(shape).copy()
                    )
            adam = AdamState(m=m, v=v, step=int(header["optimizer"]["step"]))
    return Checkpoint(
        model_config=_config_from_dict(ModelConfig, header["model_config"]),
        train_config=_config_from_dict(TrainConfig, header.get("train_config")),
        step=int(header["step"]),
        params=params,
        adam_state=adam,
    )


# ---- evaluation driver ---------------------------------------------------


@dataclass
class EvalSummary:
    """Aggregated SI-SNR / SI-SNRi (mean and standard error) per
    (system row, mask type); rows are "model" and "oracle"."""

    rows: dict[tuple[str, str], dict[str, float]] = field(default_factory=dict)
    n_examples: int = 0

    def kv(self) -> dict[str, float]:
        out = {}
        for (system, mask), stats in self.rows.items():
            prefix = "" if system == "model" else f"{system}_"
            out[f"{prefix}si_snr_{mask}"] = stats["si_snr_mean"]
            out[f"{prefix}si_snri_{mask}"] = stats["si_snri_mean"]
        return out

    def lines(self) -> list[str]:
        out = [f"evaluation over {self.n_examples} examples"]
        for (system, mask), stats in sorted(self.rows.items()):
            out.append(
                f"  {system:>6} / {mask:<6}  SI-SNR {stats['si_snr_mean']:+6.2f} "
                f"± {stats['si_snr_stderr']:.2f} dB   SI-SNRi {stats['si_snri_mean']:+6.2f} "
                f"± {stats['si_snri_stderr']:.2f} dB"
            )
        return out


def _aggregate(values: list[list[float]]) -> dict[str, float]:
    per_example_means = np.array([np.mean(v) for v in values])
    stderr = per_example_means.std(ddof=1) / math.sqrt(len(per_example_means)) if len(per_example_means) > 1 else 0.0
    return {"mean": float(per_example_means.mean()), "stderr": float(stderr)}


def evaluate(
    model: SeparationModel | None,
    dataset,
    mask_types=MASK_TYPES,
    include_oracle: bool = True,
    max_examples: int | None = None,
    log: MetricsLog | None = None,
) -> EvalSummary:
    """Matched SI-SNR / SI-SNRi of the model (and the oracle upper bound)
    for each mask family, averaged over the dataset."""
    if model is None and not include_oracle:
        raise ValueError("nothing to evaluate: no model and oracle disabled")
    count = len(dataset) if max_examples is None else min(max_examples, len(dataset))
    if count == 0:
        raise ValueError("dataset is empty")
    systems = ([("model", model)] if model is not None else []) + (
        [("oracle", None)] if include_oracle else []
    )
    snr: dict[tuple[str, str], list[list[float]]] = {}
    snri: dict[tuple[str, str], list[list[float]]] = {}
    for index in range(count):
        ex = dataset.example(index)
        if model is not None and len(ex.sources) != model.config.n_slots:
            raise ValueError(
                f"{ex.id}: {len(ex.sources)} sources but model has {model.config.n_slots} slots"
            )
        for system, sys_model in systems:
            for mask in mask_types:
                if system == "oracle":
                    estimates = separate(ex.mixture, mask_type=mask, oracle_sources=ex.sources)
                else:
                    estimates = separate(
                        ex.mixture, sys_model, mask_type=mask, reference_sources=ex.sources
                    )
                pair_snr, pair_snri = [], []
                assignment = match_by_score(
                    [s.samples for s in ex.sources],
                    [e.samples for e in estimates],
                    si_snr,
                    maximize=True,
                )
                for i, j in enumerate(assignment.permutation):
                    pair_snr.append(si_snr(ex.sources[j].samples, estimates[i].samples))
                    pair_snri.append(
                        si_snri(ex.sources[j].samples, estimates[i].samples, ex.mixture.samples)
                    )
                snr.setdefault((system, mask), []).append(pair_snr)
                snri.setdefault((system, mask), []).append(pair_snri)

    summary = EvalSummary(n_examples=count)
    for key in snr:
        a = _aggregate(snr[key])
        b = _aggregate(snri[key])
        summary.rows[key] = {
            "si_snr_mean": a["mean"],
            "si_snr_stderr": a["stderr"],
            "si_snri_mean": b["mean"],
            "si_snri_stderr": b["stderr"],
        }
    if log:
        log.log("evaluation", n=count, **summary.kv())
    return summary


# ---- figure export -------------------------------------------------------


def export_spectrogram_image(grid, path) -> None:
    """Write a compressed-magnitude grid as an 8-bit binary PGM (P5).

    Frequency runs up the image (bin 0 at the bottom); values are min-max
    normalized per image.
    """
    values = grid.values if isinstance(grid, dsp.CompressedMagnitude) else np.asarray(grid)
    if values.ndim != 2:
        raise ValueError(f"expected a 2-D grid, got shape {values.shape}")
    if not np.all(np.isfinite(values)):
        raise ValueError("grid contains non-finite values")
    lo, hi = float(values.min()), float(values.max())
    if hi > lo:
        norm = (values - lo) / (hi - lo)
    else:
        norm = np.zeros_like(values)
    pixels = np.rint(norm * 255).astype(np.uint8)[::-1]  # flip: bin 0 at bottom
    f_bins, t_frames = pixels.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{t_frames} {f_bins}\n255\n".encode("ascii"))
        f.write(pixels.tobytes())


# ---- flat key=value config files ----------------------------------------


def parse_config_file(path) -> dict[str, str]:
    """Flat key=value text; blank lines and # comments ignored."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _coerce(value: str, annotation: str):
    if "None" in annotation and value.lower() in ("", "none"):
        return None
    if annotation.startswith("int"):
        return int(value)
    if annotation.startswith("float"):
        return float(value)
    if annotation.startswith("tuple"):
        return tuple(int(v) for v in value.split(",") if v)
    return value


def configs_from_mapping(mapping: dict[str, str]) -> tuple[TrainConfig, ModelConfig, dict[str, str]]:
    """Route flat keys to TrainConfig and ModelConfig fields; returns the
    two configs plus any keys neither consumed."""
    train_kwargs, model_kwargs, extra = {}, {}, {}
    train_fields = {f.name: f.type for f in fields(TrainConfig)}
    model_fields = {f.name: f.type for f in fields(ModelConfig)}
    for key, value in mapping.items():
        if key in train_fields:
            train_kwargs[key] = _coerce(value, train_fields[key])
        elif key in model_fields:
            model_kwargs[key] = _coerce(value, model_fields[key])
        else:
            extra[key] = value
    return TrainConfig(**train_kwargs), ModelConfig(**model_kwargs), extra
