"""Scale-invariant SNR metrics and permutation-matched evaluation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dsp import Waveform
from .errors import ShapeError
from .matching import Assignment, match_by_score

SI_SNR_EPS = 1e-8
SI_SNR_CLAMP_DB = 60.0


def _as_samples(w) -> np.ndarray:
    samples = w.samples if isinstance(w, Waveform) else np.asarray(w)
    return samples.astype(np.float64)


def si_snr(y, yhat) -> float:
    """Scale-invariant SNR of estimate ``yhat`` against target ``y``, in dB.

    The target is rescaled by alpha = <y, yhat> / ||y||^2 before comparison,
    so the value is unchanged under rescaling of either argument. Clamped to
    +/-60 dB (perfect reconstruction and orthogonal estimates would
    otherwise be infinite).
    """
    y = _as_samples(y)
    yhat = _as_samples(yhat)
    if y.shape != yhat.shape:
        raise ShapeError(f"length mismatch: {y.shape} vs {yhat.shape}")
    energy = np.dot(y, y)
    if energy == 0.0:
        raise ValueError("target is all-zero; SI-SNR is undefined")
    alpha = np.dot(y, yhat) / energy
    scaled = alpha * y
    signal = np.dot(scaled, scaled)
    noise = scaled - yhat
    ratio = signal / (np.dot(noise, noise) + SI_SNR_EPS)
    if ratio <= 0.0:
        return -SI_SNR_CLAMP_DB
    value = 10.0 * np.log10(ratio)
    return float(np.clip(value, -SI_SNR_CLAMP_DB, SI_SNR_CLAMP_DB))


def si_snri(y, yhat, mixture) -> float:
    """Improvement of ``yhat`` over using the mixture as the estimate."""
    return si_snr(y, yhat) - si_snr(y, mixture)


@dataclass
class EvalReport:
    """Per-source and mean SI-SNR / SI-SNRi under the best matching."""

    si_snr_db: list[float]
    si_snri_db: list[float]
    assignment: Assignment
    mask_type: str | None = None
    notes: dict[str, str] = field(default_factory=dict)

    @property
    def mean_si_snr_db(self) -> float:
        return float(np.mean(self.si_snr_db))

    @property
    def mean_si_snri_db(self) -> float:
        return float(np.mean(self.si_snri_db))

    def lines(self) -> list[str]:
        label = f" [{self.mask_type}]" if self.mask_type else ""
        out = [f"separation report{label}: mean SI-SNR {self.mean_si_snr_db:+.2f} dB, "
               f"mean SI-SNRi {self.mean_si_snri_db:+.2f} dB"]
        for i, (snr, snri) in enumerate(zip(self.si_snr_db, self.si_snri_db)):
            out.append(f"  source {i} -> estimate {self.assignment.permutation.index(i)}: "
                       f"SI-SNR {snr:+.2f} dB, SI-SNRi {snri:+.2f} dB")
        for key, value in self.notes.items():
            out.append(f"  note {key}: {value}")
        return out


def evaluate_separation(targets, estimates, mixture, mask_type: str | None = None) -> EvalReport:
    """Match estimates to targets by maximum total SI-SNR, then report
    per-source SI-SNR and SI-SNRi under that assignment.

    Lists are treated as unordered: the report is invariant to the order
    of both arguments.
    """
    if len(targets) != len(estimates):
        raise ShapeError(f"count mismatch: {len(targets)} targets vs {len(estimates)} estimates")
    assignment = match_by_score(targets, estimates, si_snr, maximize=True)
    # report in target order: estimate i covers target assignment.permutation[i]
    by_target = {assignment.permutation[i]: estimates[i] for i in range(len(estimates))}
    snr = [si_snr(targets[j], by_target[j]) for j in range(len(targets))]
    snri = [s - si_snr(targets[j], mixture) for j, s in enumerate(snr)]
    return EvalReport(si_snr_db=snr, si_snri_db=snri, assignment=assignment, mask_type=mask_type)
