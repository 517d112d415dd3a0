"""Noisy-OR aggregation of defender verdicts.

Each defender n carries a reliability P_n, the estimated probability
that an input is adversarial given that defender n alone flagged it.
Flags combine as 1 - prod(1 - P_n)^{d_n}; the alarm fires at 0.5.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import CalibrationError, ValidationError


@dataclass
class FusionModel:
    """Defender reliabilities plus the alarm threshold."""

    reliabilities: np.ndarray
    decision_threshold: float = 0.5
    calibration_attacks: list = field(default_factory=list)

    def __post_init__(self):
        self.reliabilities = np.asarray(self.reliabilities, dtype=np.float64)
        if self.reliabilities.ndim != 1 or self.reliabilities.size == 0:
            raise ValidationError(
                "reliabilities must be a non-empty 1-D array")
        if np.any(self.reliabilities < 0) or np.any(self.reliabilities > 1):
            raise ValidationError("reliabilities must lie in [0, 1]")
        if not 0.0 <= self.decision_threshold <= 1.0:
            raise ValidationError(
                f"decision_threshold {self.decision_threshold} outside [0, 1]")

    @property
    def n_defenders(self):
        return self.reliabilities.shape[0]


def noisy_or(flags, model):
    """Adversarial probability from binary defender flags.

    Accepts one flag vector or a batch ``(B, N)``; returns a float or an
    array accordingly.  With all reliabilities at 1 this reduces to a
    logical OR.
    """
    d = np.asarray(flags)
    if d.shape[-1] != model.n_defenders:
        raise ValidationError(
            f"got {d.shape[-1]} flags for {model.n_defenders} defenders")
    if not np.isin(d, (0, 1)).all():
        raise ValidationError("flags must be binary")
    keep = np.where(d.astype(bool), 1.0 - model.reliabilities, 1.0)
    prob = 1.0 - keep.prod(axis=-1)
    return float(prob) if d.ndim == 1 else prob


def estimate_pn(benign_flags, adversarial_flags):
    """Reliability of one defender from calibration flag counts.

    ``M_true`` adversarial and ``M_false`` benign calibration samples
    were flagged; the reliability is ``M_true / (M_false + M_true)``.  A
    defender that flagged nothing has an undefined reliability and
    raises :class:`CalibrationError` (enlarge the calibration sets or
    raise SP).
    """
    m_false = int(np.count_nonzero(benign_flags))
    m_true = int(np.count_nonzero(adversarial_flags))
    if m_false + m_true == 0:
        raise CalibrationError(
            "defender flagged no calibration samples; reliability undefined")
    return m_true / (m_false + m_true)


def calibrate(benign_flag_matrix, adversarial_flag_matrix,
              calibration_attacks=()):
    """Fusion model from per-defender calibration flags.

    Both matrices are ``(samples, defenders)``; column n belongs to
    defender n in pipeline order.
    """
    benign = np.asarray(benign_flag_matrix)
    adv = np.asarray(adversarial_flag_matrix)
    if benign.ndim != 2 or adv.ndim != 2 or benign.shape[1] != adv.shape[1]:
        raise ValidationError("flag matrices must be 2-D with matching "
                              "defender counts")
    rel = [estimate_pn(benign[:, n], adv[:, n])
           for n in range(benign.shape[1])]
    return FusionModel(np.array(rel),
                       calibration_attacks=list(calibration_attacks))


def decide(probability, threshold=0.5):
    """Reject (True) iff probability >= threshold; boundary rejects."""
    p = np.asarray(probability, dtype=np.float64)
    if np.any(p < 0) or np.any(p > 1):
        raise ValidationError("probability outside [0, 1]")
    verdict = p >= threshold
    return bool(verdict) if p.ndim == 0 else verdict
