"""Audio file I/O, dataset loading, and synthetic mixture generation.

Disk datasets follow the two-speaker directory convention
``root/mix_clean/*.wav`` with matching filenames under ``root/s1`` and
``root/s2``. Synthetic datasets generate harmonic-tone mixtures on the
fly from a seed; the two sources of each example draw their fundamentals
from disjoint bands, so their spectral supports rarely collide and
mask-based separation has headroom.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dsp import DEFAULT_SAMPLE_RATE, Waveform
from .errors import DatasetIntegrityError, UnsupportedFormatError

_PCM_SCALE = 32768.0


def read_wav(path, expected_rate_hz: int = DEFAULT_SAMPLE_RATE) -> Waveform:
    """Read a mono 16-bit PCM WAV file into [-1, 1] float samples."""
    with wave.open(str(path), "rb") as f:
        if f.getcomptype() != "NONE":
            raise UnsupportedFormatError(f"{path}: compressed WAV ({f.getcomptype()}) not supported")
        if f.getsampwidth() != 2:
            raise UnsupportedFormatError(f"{path}: expected 16-bit PCM, got {8 * f.getsampwidth()}-bit")
        if f.getnchannels() != 1:
            raise UnsupportedFormatError(f"{path}: expected mono, got {f.getnchannels()} channels")
        if f.getframerate() != expected_rate_hz:
            raise UnsupportedFormatError(
                f"{path}: expected {expected_rate_hz} Hz, got {f.getframerate()} Hz"
            )
        raw = f.readframes(f.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float32) / _PCM_SCALE
    return Waveform(samples, sample_rate_hz=expected_rate_hz)


def write_wav(path, w: Waveform) -> None:
    """Write a waveform as mono 16-bit PCM, round-to-nearest quantization."""
    quantized = np.clip(np.rint(w.samples * _PCM_SCALE), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(w.sample_rate_hz)
        f.writeframes(quantized.tobytes())


@dataclass
class MixtureExample:
    """A mixture with its ground-truth sources, all equal length."""

    mixture: Waveform
    sources: list[Waveform]
    id: str

    def __post_init__(self):
        lengths = {len(self.mixture)} | {len(s) for s in self.sources}
        if len(lengths) != 1:
            raise ValueError(f"{self.id}: mixture/source lengths differ: {sorted(lengths)}")


@dataclass(frozen=True)
class SynthConfig:
    duration_s: float = 10.0
    n_sources: int = 2
    sample_rate_hz: int = DEFAULT_SAMPLE_RATE
    fundamental_range_hz: tuple[float, float] = (90.0, 400.0)


def _fundamental_bands(cfg: SynthConfig) -> list[tuple[float, float]]:
    # geometric split with a 5% guard gap keeps the bands disjoint
    lo, hi = cfg.fundamental_range_hz
    edges = np.geomspace(lo, hi, cfg.n_sources + 1)
    return [(edges[i] * 1.05 if i else edges[i], edges[i + 1] * 0.95) for i in range(cfg.n_sources)]


def _synth_source(rng: np.random.Generator, band: tuple[float, float], cfg: SynthConfig) -> np.ndarray:
    n = round(cfg.duration_s * cfg.sample_rate_hz)
    t = np.arange(n) / cfg.sample_rate_hz
    f0 = rng.uniform(*band)
    n_harmonics = int(rng.integers(3, 7))
    decay = rng.uniform(0.5, 0.8)
    x = np.zeros(n)
    for k in range(n_harmonics):
        amp = decay**k
        phase = rng.uniform(0, 2 * np.pi)
        x += amp * np.sin(2 * np.pi * f0 * (k + 1) * t + phase)
    # slow amplitude envelope plus a gated onset/offset with 10 ms ramps
    env = 0.6 + 0.4 * np.sin(2 * np.pi * rng.uniform(0.2, 1.0) * t + rng.uniform(0, 2 * np.pi))
    onset = rng.uniform(0.0, 0.1 * cfg.duration_s)
    offset = rng.uniform(0.9 * cfg.duration_s, cfg.duration_s)
    ramp = 0.01
    gate = np.clip((t - onset) / ramp, 0.0, 1.0) * np.clip((offset - t) / ramp, 0.0, 1.0)
    return x * env * gate


def synth_example(seed: int, config: SynthConfig = SynthConfig()) -> MixtureExample:
    """Deterministic harmonic-tone mixture; mixture == exact float32 sum
    of its sources, peak-normalized to 0.9."""
    rng = np.random.default_rng(seed)
    bands = _fundamental_bands(config)
    raw = [_synth_source(rng, band, config) for band in bands]
    peak = np.max(np.abs(np.sum(raw, axis=0)))
    gain = 0.9 / peak if peak > 0 else 1.0
    sources = [np.asarray(s * gain, dtype=np.float32) for s in raw]
    mixture = sources[0].copy()
    for s in sources[1:]:
        mixture += s
    rate = config.sample_rate_hz
    return MixtureExample(
        mixture=Waveform(mixture, rate),
        sources=[Waveform(s, rate) for s in sources],
        id=f"synth-{seed:08d}",
    )


class SyntheticDataset:
    """Lazily generated, fully reproducible from (seed, count, config)."""

    def __init__(self, seed: int, count: int, config: SynthConfig = SynthConfig()):
        if count < 1:
            raise ValueError(f"dataset needs at least one example, got {count}")
        self.seed = seed
        self.config = config
        self.ids = [f"synth-{seed + i:08d}" for i in range(count)]
        self._seeds = list(range(seed, seed + count))

    def __len__(self) -> int:
        return len(self._seeds)

    def example(self, index: int) -> MixtureExample:
        return synth_example(self._seeds[index], self.config)


@dataclass
class DatasetManifest:
    """Disk-backed dataset resolved from the mix_clean/s1/s2 layout."""

    root: Path
    ids: list[str]
    source_dirs: list[str] = field(default_factory=lambda: ["s1", "s2"])

    def __len__(self) -> int:
        return len(self.ids)

    def example(self, index: int) -> MixtureExample:
        name = self.ids[index]
        mixture = read_wav(self.root / "mix_clean" / f"{name}.wav")
        sources = [read_wav(self.root / d / f"{name}.wav") for d in self.source_dirs]
        return MixtureExample(mixture=mixture, sources=sources, id=name)


def load_manifest(root) -> DatasetManifest:
    """Index a dataset directory, verifying every mixture has all source
    counterparts (and vice versa)."""
    root = Path(root)
    mix_dir = root / "mix_clean"
    if not mix_dir.is_dir():
        raise FileNotFoundError(f"no mix_clean/ directory under {root}")
    source_dirs = sorted(
        d.name for d in root.iterdir() if d.is_dir() and d.name.startswith("s") and d.name[1:].isdigit()
    )
    if not source_dirs:
        raise FileNotFoundError(f"no source directories (s1, s2, ...) under {root}")
    ids = sorted(p.stem for p in mix_dir.glob("*.wav"))
    if not ids:
        raise FileNotFoundError(f"no examples under {mix_dir}")

    problems = []
    id_set = set(ids)
    for d in source_dirs:
        present = {p.stem for p in (root / d).glob("*.wav")}
        for name in sorted(id_set - present):
            problems.append(f"{name}: missing {d}/{name}.wav")
        for name in sorted(present - id_set):
            problems.append(f"{name}: {d}/{name}.wav has no mixture")
    if problems:
        raise DatasetIntegrityError("; ".join(problems))
    return DatasetManifest(root=root, ids=ids, source_dirs=source_dirs)


def write_dataset(dataset, out_dir) -> None:
    """Materialize a dataset to disk in the mix_clean/s1/s2 layout."""
    out = Path(out_dir)
    first = dataset.example(0)
    dirs = ["mix_clean"] + [f"s{i + 1}" for i in range(len(first.sources))]
    for d in dirs:
        (out / d).mkdir(parents=True, exist_ok=True)
    for i in range(len(dataset)):
        ex = dataset.example(i)
        write_wav(out / "mix_clean" / f"{ex.id}.wav", ex.mixture)
        for j, s in enumerate(ex.sources):
            write_wav(out / f"s{j + 1}" / f"{ex.id}.wav", s)


def random_crop(ex: MixtureExample, seconds: float, rng: np.random.Generator) -> MixtureExample:
    """Crop mixture and sources at one shared random offset."""
    length = round(seconds * ex.mixture.sample_rate_hz)
    if len(ex.mixture) < length:
        raise ValueError(
            f"{ex.id}: example of {len(ex.mixture)} samples shorter than crop of {length}"
        )
    offset = int(rng.integers(0, len(ex.mixture) - length + 1))
    rate = ex.mixture.sample_rate_hz
    return MixtureExample(
        mixture=Waveform(ex.mixture.samples[offset : offset + length], rate),
        sources=[Waveform(s.samples[offset : offset + length], rate) for s in ex.sources],
        id=f"{ex.id}@{offset}",
    )
