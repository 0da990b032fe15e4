"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .ops import track_kinks
from .tensor import Tape, Tensor, no_grad, resolve_dtype

# central-difference step per precision
FD_STEP = {np.dtype(np.float32): 1e-3, np.dtype(np.float64): 1e-5}
DEFAULT_TOL = {np.dtype(np.float32): 1e-3, np.dtype(np.float64): 1e-5}
KINK_MARGIN = 1e-4


def kink_threshold(dtype) -> float:
    # a perturbation of one step must not carry any input across a kink
    return max(KINK_MARGIN, 2 * FD_STEP[np.dtype(dtype)])


@dataclass
class GradCheckReport:
    name: str
    precision: str
    tolerance: float
    instances: int = 0
    resamples: int = 0
    max_rel_error: float = 0.0
    per_input: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.instances > 0 and self.max_rel_error < self.tolerance

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.name:<24} {self.precision} max_rel_err={self.max_rel_error:.3e} "
                f"tol={self.tolerance:.0e} instances={self.instances} resampled={self.resamples}")


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``||a - n|| / max(||a||, ||n||)`` in the Euclidean norm; 0 when both vanish."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a - n) / scale)


def _split(sample: Mapping) -> tuple[dict, dict]:
    diff, extra = {}, {}
    for key, val in sample.items():
        if isinstance(val, np.ndarray) and val.dtype.kind == "f":
            diff[key] = val
        else:
            extra[key] = val
    return diff, extra


def _objective(fn, arrays: dict, extra: dict, proj):
    """Scalar objective in float64: ``sum(fn(...) * proj)``."""
    with no_grad():
        out = fn(**{k: Tensor(v) for k, v in arrays.items()}, **extra)
    return float(np.sum(out.data.astype(np.float64) * proj))


def check_instance(fn: Callable, sample: Mapping, rng: np.random.Generator, dtype,
                   directions: int | None = None) -> dict:
    """Return per-input relative errors for one sampled point.

    ``sample`` maps argument names to values; floating arrays are differentiated,
    everything else is passed through unchanged.  With ``directions`` set, each
    input is probed along that many random unit directions instead of one
    coordinate at a time.
    """
    dtype = np.dtype(dtype)
    h = FD_STEP[dtype]
    arrays, extra = _split(sample)
    arrays = {k: np.array(v, dtype=dtype) for k, v in arrays.items()}

    with Tape() as tape:
        tensors = {k: Tensor(v.copy(), requires_grad=True) for k, v in arrays.items()}
        out = fn(**tensors, **extra)
    proj = rng.standard_normal(out.shape) if out.data.ndim else np.ones(())
    tape.backward(out, proj.astype(dtype))

    if directions is not None:
        return _directional_errors(fn, arrays, extra, tensors, proj, rng, h, directions)
    errors = {}
    for key, arr in arrays.items():
        numeric = np.zeros(arr.shape, dtype=np.float64)
        flat = arr.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = _objective(fn, arrays, extra, proj)
            flat[i] = orig - h
            fm = _objective(fn, arrays, extra, proj)
            flat[i] = orig
            # divide by the step actually realized in this precision
            step = float(dtype.type(orig + h)) - float(dtype.type(orig - h))
            nflat[i] = (fp - fm) / step
        analytic = tensors[key].grad
        if analytic is None:
            analytic = np.zeros_like(numeric)
        errors[key] = relative_error(analytic, numeric)
    return errors


def _directional_errors(fn, arrays, extra, tensors, proj, rng, h, k) -> dict:
    errors = {}
    for key, arr in arrays.items():
        grad = tensors[key].grad
        grad = np.zeros(arr.shape) if grad is None else grad.astype(np.float64)
        analytic, numeric = np.zeros(k), np.zeros(k)
        for i in range(k):
            d = rng.standard_normal(arr.shape)
            d /= np.linalg.norm(d)
            plus = (arr + h * d).astype(arr.dtype)
            minus = (arr - h * d).astype(arr.dtype)
            # compare against the perturbation actually realized in this precision
            analytic[i] = np.sum(grad * (plus.astype(np.float64) - minus))
            numeric[i] = (_objective(fn, {**arrays, key: plus}, extra, proj)
                          - _objective(fn, {**arrays, key: minus}, extra, proj))
        errors[key] = relative_error(analytic, numeric)
    return errors


def kink_margin(fn: Callable, sample: Mapping, dtype) -> float:
    arrays, extra = _split(sample)
    with no_grad(), track_kinks() as mon:
        fn(**{k: Tensor(np.asarray(v, dtype=dtype)) for k, v in arrays.items()}, **extra)
    return mon.margin


def grad_check(
    fn: Callable,
    sample: Callable[[np.random.Generator], Mapping],
    precision: str = "f64",
    tolerance: float | None = None,
    instances: int = 20,
    seed: int = 0,
    name: str = "",
    max_resamples: int = 200,
    directions: int | None = None,
    kink_tol: float | None = None,
) -> GradCheckReport:
    """Compare analytic and central-difference gradients over random instances.

    A sampled point is redrawn whenever some ReLU or max-pool input lies within
    ``kink_threshold`` of a non-differentiable point (``KINK_MARGIN``, widened
    to twice the step in 32-bit mode); ``kink_tol`` overrides that margin.
    ``directions`` switches to random directional derivatives per input, for
    whole networks where a coordinate sweep is too slow.
    """
    dtype = resolve_dtype(precision)
    tol = DEFAULT_TOL[dtype] if tolerance is None else tolerance
    report = GradCheckReport(name=name or getattr(fn, "__name__", "op"), precision=precision, tolerance=tol)
    margin = kink_threshold(dtype) if kink_tol is None else kink_tol
    rng = np.random.default_rng(seed)
    while report.instances < instances:
        point = sample(rng)
        if kink_margin(fn, point, dtype) < margin:
            report.resamples += 1
            if report.resamples > max_resamples:
                raise RuntimeError(f"grad_check({report.name}): could not sample a kink-free point")
            continue
        for key, err in check_instance(fn, point, rng, dtype, directions).items():
            report.per_input[key] = max(report.per_input.get(key, 0.0), err)
            report.max_rel_error = max(report.max_rel_error, err)
        report.instances += 1
    return report
