"""Mask construction and the full chunked separation pipeline.

Masks are built from estimated (or oracle) source magnitudes and applied
multiplicatively to the complex mixture spectrogram, reusing the
mixture's phase. Both mask families partition unity per cell, so the
separated signals sum back to the mixture up to resynthesis rounding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import dsp
from .dsp import ChunkList, ComplexSpectrogram, Waveform
from .errors import ShapeError
from .matching import match_by_score
from .metrics import si_snr

MASK_TYPES = ("ibm", "wiener")


@dataclass
class MaskSet:
    """n masks of F' x T values in [0, 1] that sum to one per cell."""

    masks: np.ndarray
    mask_type: str

    def __post_init__(self):
        self.masks = np.asarray(self.masks, dtype=np.float32)
        if self.masks.ndim != 3:
            raise ShapeError(f"masks must be [n, F, T], got shape {self.masks.shape}")
        if self.mask_type not in MASK_TYPES:
            raise ValueError(f"mask_type must be one of {MASK_TYPES}, got {self.mask_type!r}")


def _validated_magnitudes(mags: np.ndarray) -> np.ndarray:
    mags = np.asarray(mags, dtype=np.float32)
    if mags.ndim != 3:
        raise ShapeError(f"expected [n, F, T] magnitudes, got shape {mags.shape}")
    return np.maximum(mags, 0.0)


def compute_ibm(mags: np.ndarray) -> MaskSet:
    """Binary masks: per cell, all weight on the largest source.

    Ties (including all-zero cells) go to the lowest source index.
    """
    mags = _validated_magnitudes(mags)
    winner = np.argmax(mags, axis=0)
    masks = (winner[None] == np.arange(mags.shape[0])[:, None, None]).astype(np.float32)
    return MaskSet(masks, "ibm")


def compute_wiener(mags: np.ndarray) -> MaskSet:
    """Ratio-of-squares masks; all-zero cells fall back to uniform 1/n."""
    mags = _validated_magnitudes(mags)
    n = mags.shape[0]
    sq = mags.astype(np.float64) ** 2
    denom = sq.sum(axis=0, keepdims=True)
    masks = np.where(denom > 0, sq / np.maximum(denom, 1e-300), 1.0 / n)
    return MaskSet(masks.astype(np.float32), "wiener")


def apply_mask(mask_set: MaskSet, mixture_spec: ComplexSpectrogram) -> list[ComplexSpectrogram]:
    """Scale the complex mixture bins by each real mask.

    Masks with one row fewer than the spectrogram (the model works on a
    grid cropped below the Nyquist bin) are extended by duplicating their
    top row onto the Nyquist row.
    """
    masks = mask_set.masks
    f_spec, t_spec = mixture_spec.bins.shape
    if masks.shape[1] == f_spec - 1:
        masks = np.concatenate([masks, masks[:, -1:, :]], axis=1)
    if masks.shape[1:] != (f_spec, t_spec):
        raise ShapeError(
            f"mask grid {masks.shape[1:]} does not align with spectrogram {(f_spec, t_spec)}"
        )
    out = []
    for i in range(masks.shape[0]):
        out.append(
            ComplexSpectrogram(
                bins=mixture_spec.bins * masks[i],
                frame_hop=mixture_spec.frame_hop,
                window_len=mixture_spec.window_len,
                original_length=mixture_spec.original_length,
                sample_rate_hz=mixture_spec.sample_rate_hz,
            )
        )
    return out


_MASK_BUILDERS = {"ibm": compute_ibm, "wiener": compute_wiener}


def _preprocess_chunk(wave: Waveform) -> tuple[ComplexSpectrogram, np.ndarray]:
    spec = dsp.stft(wave)
    comp = dsp.compress(spec.magnitude)
    return spec, comp.values[:-1]  # crop the Nyquist row for the model grid


def _alignment_score(target: np.ndarray, estimate: np.ndarray) -> float:
    # silent reference chunks make every candidate equally (un)informative
    if not np.any(target) or not np.any(estimate):
        return 0.0
    return si_snr(target, estimate)


def _greedy_cosine_order(slots: np.ndarray, prev_slots: np.ndarray) -> list[int]:
    """Greedy best-pair matching of current slots to the previous chunk's,
    by cosine similarity. Returns order such that slot order[j] continues
    stream j."""
    n = slots.shape[0]
    norm = lambda m: m / np.maximum(np.linalg.norm(m, axis=1, keepdims=True), 1e-12)
    sim = norm(slots) @ norm(prev_slots).T  # [now, prev]
    order = [-1] * n
    used_now: set[int] = set()
    for _ in range(n):
        best = None
        for i in range(n):
            if i in used_now:
                continue
            for j in range(n):
                if order[j] >= 0:
                    continue
                if best is None or sim[i, j] > best[0]:
                    best = (sim[i, j], i, j)
        _, i, j = best
        order[j] = i
        used_now.add(i)
    return order


def separate(
    mixture: Waveform,
    model=None,
    mask_type: str = "wiener",
    oracle_sources: list[Waveform] | None = None,
    reference_sources: list[Waveform] | None = None,
    chunk_seconds: float = dsp.DEFAULT_CHUNK_SECONDS,
) -> list[Waveform]:
    """Separate a 16 kHz mixture into per-source waveforms.

    Per chunk: compress the mixture spectrogram, predict per-source
    compressed magnitudes with the model (or take the preprocessed
    ground-truth source spectrograms in oracle mode), decompress, build
    masks, scale the complex mixture spectrogram, and invert. Chunk-level
    source identities are aligned across chunks against reference sources
    when available, otherwise greedily by slot similarity to the previous
    chunk; the aligned chunks are stitched back to the input length.
    """
    if mixture.sample_rate_hz != dsp.DEFAULT_SAMPLE_RATE:
        raise ValueError(
            f"expected {dsp.DEFAULT_SAMPLE_RATE} Hz input, got {mixture.sample_rate_hz}"
        )
    if mask_type not in _MASK_BUILDERS:
        raise ValueError(f"mask_type must be one of {MASK_TYPES}, got {mask_type!r}")
    oracle = oracle_sources is not None
    if not oracle and model is None:
        raise ValueError("a model is required unless oracle sources are given")

    refs = oracle_sources if oracle else reference_sources
    if refs is not None:
        for r in refs:
            if len(r) != len(mixture):
                raise ValueError("reference sources must match the mixture length")
    n_sources = len(refs) if oracle else model.config.n_slots
    if not oracle and refs is not None and len(refs) != n_sources:
        raise ValueError(f"{len(refs)} references for a model with {n_sources} slots")

    mix_chunks = dsp.chunk(mixture, chunk_seconds)
    ref_chunks = [dsp.chunk(r, chunk_seconds).chunks for r in refs] if refs is not None else None

    per_source: list[list[Waveform]] = [[] for _ in range(n_sources)]
    prev_slots: np.ndarray | None = None
    for c_idx, mix_chunk in enumerate(mix_chunks.chunks):
        spec, comp = _preprocess_chunk(mix_chunk)
        slots = None
        if oracle:
            est_comp = np.stack(
                [_preprocess_chunk(ref_chunks[i][c_idx])[1] for i in range(n_sources)]
            )
        else:
            preds, slot_t = model.forward(comp[None], return_slots=True)
            est_comp = preds.data[0]
            slots = slot_t.data[0]
        mags = dsp.decompress(np.maximum(est_comp, 0.0))
        masks = _MASK_BUILDERS[mask_type](mags)
        waves = [dsp.istft(s) for s in apply_mask(masks, spec)]

        if ref_chunks is not None:
            assignment = match_by_score(
                [ref_chunks[j][c_idx].samples for j in range(n_sources)],
                [w.samples for w in waves],
                _alignment_score,
                maximize=True,
            )
            order = [assignment.permutation.index(j) for j in range(n_sources)]
        elif prev_slots is not None and slots is not None:
            order = _greedy_cosine_order(slots, prev_slots)
        else:
            order = list(range(n_sources))

        for j in range(n_sources):
            per_source[j].append(waves[order[j]])
        if slots is not None:
            prev_slots = slots[order]

    return [
        dsp.stitch(ChunkList(chunks=per_source[j], pad_len=mix_chunks.pad_len))
        for j in range(n_sources)
    ]
