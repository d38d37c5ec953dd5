"""Closed-form forward model for the five-readout QALAS sequence.

For longitudinal magnetization (M0 = 1), every block of the sequence acts as
an affine map Mz -> a*Mz + b:

* free recovery over d ms:        a = exp(-d/T1),  b = 1 - a
* ideal T2 preparation:           a = exp(-TE/T2), b = 0
* imperfect adiabatic inversion:  a = -IE,         b = 0
* one readout echo (RF pulse with effective flip b1*alpha, then recovery over
  one echo spacing): a = cos(b1*alpha)*exp(-tau/T1), b = 1 - exp(-tau/T1)

A full readout train is the turbo_factor-fold power of the echo map, and one
repetition of the sequence is the composition of all blocks in order.  The
periodic steady state is the fixed point b/(1 - a) of the repetition
operator, so no dummy repetitions are ever simulated.  The signal of each of
the five acquisitions is pd * sin(b1*alpha) * Mz read just before the RF
pulse at ``center_echo_index`` of its train.

All operations accept scalars or numpy arrays and broadcast elementwise; the
same code path serves single-voxel queries, dictionary generation, and
whole-volume synthesis.  Analytic parameter derivatives (T1, T2, PD, IE) are
propagated through the identical composition chain by
:func:`simulate_with_jacobian`.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, fields, replace
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, DomainError, NumericError

__all__ = [
    "SequenceTiming",
    "TissueParams",
    "AffineOp",
    "SamplePoint",
    "relax_op",
    "t2prep_op",
    "inversion_op",
    "readout_train_op",
    "compose_tr",
    "steady_state",
    "simulate",
    "simulate_with_jacobian",
]

IE_MIN = 0.5
IE_MAX = 1.0


@dataclass(frozen=True)
class SequenceTiming:
    """Timing and geometry of one QALAS repetition (durations in ms).

    The five readout trains start ``acq_spacing_ms`` apart.  The T2
    preparation acts instantaneously at the start of the repetition, the
    inversion pulse sits ``inv_delay_ms`` before the start of the second
    train, and the repetition is padded with free recovery up to ``tr_ms``.
    """

    tr_ms: float = 4500.0
    n_acq: int = 5
    acq_spacing_ms: float = 900.0
    echo_spacing_ms: float = 5.8
    turbo_factor: int = 127
    flip_angle_deg: float = 4.0
    t2prep_te_ms: float = 110.0
    inv_delay_ms: float = 100.0
    center_echo_index: int | None = None
    signal_mode: str = "magnitude"

    def __post_init__(self) -> None:
        if self.center_echo_index is None:
            object.__setattr__(self, "center_echo_index", self.turbo_factor // 2)
        if self.n_acq != 5:
            raise ConfigError(f"n_acq is fixed at 5, got {self.n_acq}")
        for name in ("tr_ms", "acq_spacing_ms", "echo_spacing_ms", "t2prep_te_ms", "inv_delay_ms"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be strictly positive")
        if self.turbo_factor < 1:
            raise ConfigError("turbo_factor must be >= 1")
        if self.flip_angle_deg < 0:
            raise ConfigError("flip_angle_deg must be >= 0")
        if self.n_acq * self.acq_spacing_ms > self.tr_ms:
            raise ConfigError("n_acq * acq_spacing_ms exceeds tr_ms")
        if self.turbo_factor * self.echo_spacing_ms >= self.acq_spacing_ms:
            raise ConfigError("readout train does not fit inside acq_spacing_ms")
        if not 0 <= self.center_echo_index < self.turbo_factor:
            raise ConfigError("center_echo_index out of train range")
        if self.signal_mode not in ("magnitude", "signed"):
            raise ConfigError(f"unknown signal_mode {self.signal_mode!r}")

    @property
    def train_duration_ms(self) -> float:
        return self.turbo_factor * self.echo_spacing_ms

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "SequenceTiming":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown timing keys: {sorted(unknown)}")
        return cls(**d)

    def fingerprint(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]

    def with_(self, **kw) -> "SequenceTiming":
        return replace(self, **kw)


@dataclass
class TissueParams:
    """Per-voxel tissue parameters; fields may be scalars or arrays."""

    t1_ms: float | np.ndarray
    t2_ms: float | np.ndarray
    pd: float | np.ndarray = 1.0
    ie: float | np.ndarray = 1.0

    def __post_init__(self) -> None:
        if not np.all(np.asarray(self.t1_ms) > 0):
            raise DomainError("t1_ms must be > 0")
        if not np.all(np.asarray(self.t2_ms) > 0):
            raise DomainError("t2_ms must be > 0")
        if not np.all(np.asarray(self.pd) >= 0):
            raise DomainError("pd must be >= 0")
        ie = np.asarray(self.ie)
        if not (np.all(ie >= IE_MIN) and np.all(ie <= IE_MAX)):
            raise DomainError(f"ie must lie in [{IE_MIN}, {IE_MAX}]")


@dataclass(frozen=True)
class AffineOp:
    """Mz -> a*Mz + b.  Composition: (a2,b2) after (a1,b1) = (a1*a2, a2*b1 + b2)."""

    a: float | np.ndarray
    b: float | np.ndarray

    def then(self, other: "AffineOp") -> "AffineOp":
        """Return the op applying self first, then ``other``."""
        return AffineOp(self.a * other.a, other.a * self.b + other.b)

    def power(self, n: int) -> "AffineOp":
        """n-fold self-composition, closed form via the geometric sum."""
        if n < 0:
            raise DomainError("power requires n >= 0")
        if n == 0:
            return AffineOp(np.ones_like(np.asarray(self.a, dtype=float)) if isinstance(self.a, np.ndarray) else 1.0, 0.0)
        an = self.a ** n
        return AffineOp(an, self.b * _geom_sum(self.a, an, n))

    def __call__(self, mz):
        return self.a * mz + self.b

    @staticmethod
    def identity() -> "AffineOp":
        return AffineOp(1.0, 0.0)


def _geom_sum(a, an, n: int):
    # 1 + a + ... + a^(n-1); guarded at a == 1 (zero-duration recovery)
    denom = 1.0 - a
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(np.abs(denom) > 1e-12, (1.0 - an) / denom, float(n))
    return out if isinstance(a, np.ndarray) else float(out)


class SamplePoint(NamedTuple):
    """Affine prefix from repetition start to one readout, plus its gain."""

    prefix: AffineOp
    gain: float | np.ndarray


def relax_op(duration_ms, t1_ms) -> AffineOp:
    """Free T1 recovery toward M0 = 1 over ``duration_ms``."""
    if not np.all(np.asarray(duration_ms) >= 0):
        raise DomainError("duration_ms must be >= 0")
    if not np.all(np.asarray(t1_ms) > 0):
        raise DomainError("t1_ms must be > 0")
    a = np.exp(-np.divide(duration_ms, t1_ms))
    if np.ndim(a) == 0:
        a = float(a)
    return AffineOp(a, 1.0 - a)


def t2prep_op(te_ms, t2_ms) -> AffineOp:
    """Ideal T2 preparation: pure attenuation by exp(-TE/T2), no recovery."""
    if not np.all(np.asarray(te_ms) >= 0):
        raise DomainError("te_ms must be >= 0")
    if not np.all(np.asarray(t2_ms) > 0):
        raise DomainError("t2_ms must be > 0")
    a = np.exp(-np.divide(te_ms, t2_ms))
    if np.ndim(a) == 0:
        a = float(a)
    return AffineOp(a, 0.0)


def inversion_op(ie) -> AffineOp:
    """Instantaneous inversion with efficiency ie: Mz -> -ie*Mz."""
    ie_arr = np.asarray(ie)
    if not (np.all(ie_arr >= IE_MIN) and np.all(ie_arr <= IE_MAX)):
        raise DomainError(f"ie must lie in [{IE_MIN}, {IE_MAX}]")
    return AffineOp(-ie_arr if ie_arr.ndim else -float(ie_arr), 0.0)


def readout_train_op(timing: SequenceTiming, t1_ms, b1):
    """Net affine effect of one low-flip readout train.

    Each echo applies cos(b1*alpha) (RF pulse), then recovers over one echo
    spacing; the train is the turbo_factor-fold power of that echo map.

    Returns ``(train_op, sample_gain, echo_op)`` where ``sample_gain`` is
    sin(b1*alpha) and ``echo_op`` is the single-echo recurrence.
    """
    if not np.all(np.asarray(b1) > 0):
        raise DomainError("b1 must be > 0")
    alpha = np.deg2rad(timing.flip_angle_deg) * b1
    pulse = AffineOp(np.cos(alpha), 0.0)
    echo_op = pulse.then(relax_op(timing.echo_spacing_ms, t1_ms))
    return echo_op.power(timing.turbo_factor), np.sin(alpha), echo_op


def _derived_gaps(timing: SequenceTiming) -> tuple[float, float, float]:
    """Free-recovery gaps implied by the timing: (train1 end -> inversion,
    between later trains, end of last train -> end of repetition)."""
    train = timing.train_duration_ms
    gap_to_inv = timing.acq_spacing_ms - timing.inv_delay_ms - train
    gap_inter = timing.acq_spacing_ms - train
    gap_final = timing.tr_ms - (timing.n_acq - 1) * timing.acq_spacing_ms - train
    for name, g in (("train1-to-inversion", gap_to_inv), ("inter-train", gap_inter), ("final", gap_final)):
        if g < 0:
            raise ConfigError(f"timing infeasible: derived {name} gap is {g:.3f} ms")
    return gap_to_inv, gap_inter, gap_final


def compose_tr(timing: SequenceTiming, tissue: TissueParams, b1):
    """Compose one full repetition; also return the five sample points.

    Order: T2prep, train 1, gap, inversion, gap, train 2, then the remaining
    trains separated by recovery gaps, and final recovery up to tr_ms.
    """
    gap_to_inv, gap_inter, gap_final = _derived_gaps(timing)
    t1 = tissue.t1_ms
    train_op, gain, echo_op = readout_train_op(timing, t1, b1)
    to_sample = echo_op.power(timing.center_echo_index)

    cur = t2prep_op(timing.t2prep_te_ms, tissue.t2_ms)
    samples = []
    for k in range(timing.n_acq):
        samples.append(SamplePoint(cur.then(to_sample), gain))
        cur = cur.then(train_op)
        if k == 0:
            cur = cur.then(relax_op(gap_to_inv, t1))
            cur = cur.then(inversion_op(tissue.ie))
            cur = cur.then(relax_op(timing.inv_delay_ms, t1))
        elif k < timing.n_acq - 1:
            cur = cur.then(relax_op(gap_inter, t1))
    cur = cur.then(relax_op(gap_final, t1))
    return cur, samples


def steady_state(tr_op: AffineOp):
    """Fixed point b/(1 - a) of the repetition operator."""
    if not np.all(np.abs(np.asarray(tr_op.a)) < 1.0):
        raise NumericError("steady state undefined: |a| >= 1")
    mz0 = tr_op.b / (1.0 - tr_op.a)
    return float(mz0) if np.ndim(mz0) == 0 else mz0


def simulate(timing: SequenceTiming, tissue: TissueParams, b1) -> np.ndarray:
    """Five QALAS signals from the periodic steady state.

    Scalar inputs give shape (5,); array inputs of shape S give (5, *S).
    """
    tr_op, samples = compose_tr(timing, tissue, b1)
    mz0 = steady_state(tr_op)
    rows = [tissue.pd * sp.gain * sp.prefix(mz0) for sp in samples]
    sig = np.stack([np.asarray(r, dtype=float) for r in rows])
    if timing.signal_mode == "magnitude":
        sig = np.abs(sig)
    return sig


# --- analytic Jacobian -------------------------------------------------------
#
# The derivative chain mirrors compose_tr exactly: each block carries
# d(a, b)/d(T1, T2, IE) and composition applies the product rule.  PD enters
# only at sampling and is handled in closed form.

class _GradAffine:
    """Affine op with derivatives of (a, b) wrt (T1, T2, IE) stacked on axis 0."""

    __slots__ = ("a", "b", "da", "db")

    def __init__(self, a, b, da, db):
        self.a, self.b, self.da, self.db = a, b, da, db

    def then(self, o: "_GradAffine") -> "_GradAffine":
        a = self.a * o.a
        b = o.a * self.b + o.b
        da = self.da * o.a + self.a * o.da
        db = o.da * self.b + o.a * self.db + o.db
        return _GradAffine(a, b, da, db)

    def power(self, n: int) -> "_GradAffine":
        if n == 0:
            return _GradAffine(np.ones_like(self.a), np.zeros_like(self.b),
                               np.zeros_like(self.da), np.zeros_like(self.db))
        an = self.a ** n
        denom = 1.0 - self.a
        ok = np.abs(denom) > 1e-12
        with np.errstate(divide="ignore", invalid="ignore"):
            geom = np.where(ok, (1.0 - an) / denom, float(n))
            dgeom_da = np.where(
                ok,
                (-n * self.a ** (n - 1) * denom + (1.0 - an)) / denom**2,
                0.5 * n * (n - 1),
            )
        da = n * self.a ** (n - 1) * self.da
        b = self.b * geom
        db = self.db * geom + self.b * dgeom_da * self.da
        return _GradAffine(an, b, da, db)


def _g_zeros(shape):
    return np.zeros((3,) + shape)


def _g_relax(duration_ms, t1, shape) -> _GradAffine:
    a = np.broadcast_to(np.exp(-np.divide(duration_ms, t1)), shape).copy()
    da = _g_zeros(shape)
    da[0] = a * duration_ms / t1**2
    db = _g_zeros(shape)
    db[0] = -da[0]
    return _GradAffine(a, 1.0 - a, da, db)


def _g_t2prep(te_ms, t2, shape) -> _GradAffine:
    a = np.broadcast_to(np.exp(-np.divide(te_ms, t2)), shape).copy()
    da = _g_zeros(shape)
    da[1] = a * te_ms / t2**2
    return _GradAffine(a, np.zeros(shape), da, _g_zeros(shape))


def _g_inversion(ie, shape) -> _GradAffine:
    a = np.broadcast_to(-ie, shape).copy()
    da = _g_zeros(shape)
    da[2] = -1.0
    return _GradAffine(a, np.zeros(shape), da, _g_zeros(shape))


def _g_pulse(cos_alpha, shape) -> _GradAffine:
    a = np.broadcast_to(cos_alpha, shape).copy()
    return _GradAffine(a, np.zeros(shape), _g_zeros(shape), _g_zeros(shape))


def simulate_with_jacobian(timing: SequenceTiming, tissue: TissueParams, b1):
    """Signals plus the analytic 5x4 Jacobian over (T1, T2, PD, IE).

    Scalar inputs give shapes (5,) and (5, 4); array inputs of shape S give
    (5, *S) and (5, 4, *S).  In magnitude mode each Jacobian row carries the
    sign of the underlying signed signal (subgradient 0 where the signal
    vanishes).
    """
    if not np.all(np.asarray(b1) > 0):
        raise DomainError("b1 must be > 0")
    gap_to_inv, gap_inter, gap_final = _derived_gaps(timing)
    t1 = np.asarray(tissue.t1_ms, dtype=float)
    t2 = np.asarray(tissue.t2_ms, dtype=float)
    pd = np.asarray(tissue.pd, dtype=float)
    ie = np.asarray(tissue.ie, dtype=float)
    b1 = np.asarray(b1, dtype=float)
    scalar_in = max(t1.ndim, t2.ndim, pd.ndim, ie.ndim, b1.ndim) == 0
    shape = np.broadcast_shapes(t1.shape, t2.shape, pd.shape, ie.shape, b1.shape)
    t1, t2, pd, ie, b1 = (np.broadcast_to(x, shape) for x in (t1, t2, pd, ie, b1))

    alpha = np.deg2rad(timing.flip_angle_deg) * b1
    gain = np.sin(alpha)
    echo = _g_pulse(np.cos(alpha), shape).then(_g_relax(timing.echo_spacing_ms, t1, shape))
    train = echo.power(timing.turbo_factor)
    to_sample = echo.power(timing.center_echo_index)

    cur = _g_t2prep(timing.t2prep_te_ms, t2, shape)
    prefixes = []
    for k in range(timing.n_acq):
        prefixes.append(cur.then(to_sample))
        cur = cur.then(train)
        if k == 0:
            cur = cur.then(_g_relax(gap_to_inv, t1, shape))
            cur = cur.then(_g_inversion(ie, shape))
            cur = cur.then(_g_relax(timing.inv_delay_ms, t1, shape))
        elif k < timing.n_acq - 1:
            cur = cur.then(_g_relax(gap_inter, t1, shape))
    cur = cur.then(_g_relax(gap_final, t1, shape))

    if not np.all(np.abs(cur.a) < 1.0):
        raise NumericError("steady state undefined: |a| >= 1")
    denom = 1.0 - cur.a
    mz0 = cur.b / denom
    dmz0 = (cur.db * denom + cur.b * cur.da) / denom**2

    sig = np.empty((5,) + shape)
    jac = np.empty((5, 4) + shape)
    for k, p in enumerate(prefixes):
        m = p.a * mz0 + p.b
        dm = p.da * mz0 + p.a * dmz0 + p.db
        sig[k] = pd * gain * m
        jac[k, 0] = pd * gain * dm[0]
        jac[k, 1] = pd * gain * dm[1]
        jac[k, 2] = gain * m
        jac[k, 3] = pd * gain * dm[2]

    if timing.signal_mode == "magnitude":
        sgn = np.sign(sig)
        sig = np.abs(sig)
        jac = jac * sgn[:, None]
    if scalar_in:
        return sig.reshape(5), jac.reshape(5, 4)
    return sig, jac
