"""Adams-type linear multistep schemes and a fixed-step IVP driver.

Coefficients are kept as exact rationals and only turned into floats when a
step is taken.  All vectors ``b`` are ordered oldest-to-newest, so for AM
schemes the last entry multiplies the derivative at the target node.

States can be numpy arrays (for ODE work) or :class:`~fuseode.diffarray.Tensor`
(for the differentiable fusion decoder); both go through the same step code.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from fractions import Fraction
from typing import Any, Callable, Optional

import numpy as np

from fuseode import diffarray as da

__all__ = [
    "MultistepScheme",
    "RhsHistory",
    "IvpProblem",
    "Mode",
    "UnsupportedSchemeError",
    "HistoryUnderflowError",
    "ConfigurationError",
    "scheme_coeffs",
    "ab_step",
    "am_step",
    "pc_step",
    "solve_ivp",
    "empirical_order",
    "pure_ab",
    "pc",
    "adaptive_bootstrap",
    "bootstrap_schemes",
    "final_error",
    "order_rows",
    "OrderRow",
    "ORDER_CSV_HEADER",
]


class UnsupportedSchemeError(ValueError):
    pass


class HistoryUnderflowError(RuntimeError):
    pass


class ConfigurationError(ValueError):
    pass


# numerators oldest -> newest, over a common denominator
_AB = {
    1: ((1,), 1),
    2: ((-1, 3), 2),
    3: ((5, -16, 23), 12),
    4: ((-9, 37, -59, 55), 24),
}
_AM = {
    1: ((1, 1), 2),
    2: ((-1, 8, 5), 12),
    3: ((1, -5, 19, 9), 24),
}


@dataclass(frozen=True)
class MultistepScheme:
    family: str  # "AB" or "AM"
    steps: int
    numerators: tuple[int, ...]
    denominator: int

    @property
    def name(self) -> str:
        return f"{self.family}{self.steps}"

    @property
    def b(self) -> tuple[Fraction, ...]:
        return tuple(Fraction(n, self.denominator) for n in self.numerators)

    @property
    def order(self) -> int:
        return self.steps if self.family == "AB" else self.steps + 1

    @property
    def explicit(self) -> bool:
        return self.family == "AB"

    def b_float(self) -> list[float]:
        return [float(c) for c in self.b]

    def fraction_strings(self) -> list[str]:
        """Coefficients as ``num/den`` over the common table denominator."""
        return [f"{n}/{self.denominator}" for n in self.numerators]


def scheme_coeffs(family: str, steps: int) -> MultistepScheme:
    fam = family.upper()
    table = {"AB": _AB, "AM": _AM}.get(fam)
    if table is None:
        raise UnsupportedSchemeError(f"unknown family {family!r}; expected AB or AM")
    if steps not in table:
        raise UnsupportedSchemeError(
            f"{fam} supports steps {sorted(table)}, got {steps}")
    nums, den = table[steps]
    return MultistepScheme(fam, steps, nums, den)


class RhsHistory:
    """Bounded FIFO of derivative values at consecutive nodes."""

    def __init__(self, capacity: int = 4):
        self.capacity = capacity
        self._entries: deque[tuple[int, Any]] = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._entries)

    def push(self, index: int, value) -> None:
        if self._entries and index != self._entries[-1][0] + 1:
            raise ValueError(
                f"history nodes must be consecutive: last {self._entries[-1][0]}, got {index}")
        self._entries.append((index, value))

    def window(self, k: int) -> list:
        """The ``k`` most recent values, oldest first."""
        if k > len(self._entries):
            raise HistoryUnderflowError(f"need {k} history entries, have {len(self._entries)}")
        return [v for _, v in list(self._entries)[len(self._entries) - k:]]

    def indices(self, k: Optional[int] = None) -> list[int]:
        idx = [i for i, _ in self._entries]
        return idx if k is None else idx[len(idx) - k:]

    @property
    def last_index(self) -> int:
        return self._entries[-1][0]


def _advance(y, delta: float, coeffs: list[float], terms: list):
    # y + delta * sum_j coeffs[j] * terms[j]
    if isinstance(y, da.Tensor):
        return da.add(y, da.scale(da.weighted_sum(coeffs, terms), delta))
    acc = coeffs[0] * np.asarray(terms[0], dtype=np.float64)
    for c, t in zip(coeffs[1:], terms[1:]):
        acc = acc + c * np.asarray(t, dtype=np.float64)
    return np.asarray(y, dtype=np.float64) + delta * acc


def ab_step(scheme: MultistepScheme, y, hist: RhsHistory, delta: float):
    if not scheme.explicit:
        raise UnsupportedSchemeError(f"ab_step needs an AB scheme, got {scheme.name}")
    terms = hist.window(scheme.steps)
    return _advance(y, delta, scheme.b_float(), terms)


def am_step(scheme: MultistepScheme, y, hist: RhsHistory, f_new, delta: float):
    if scheme.explicit:
        raise UnsupportedSchemeError(f"am_step needs an AM scheme, got {scheme.name}")
    terms = hist.window(scheme.steps) + [f_new]
    return _advance(y, delta, scheme.b_float(), terms)


def pc_step(pred: MultistepScheme, corr: MultistepScheme, rhs: Callable, t_next: float,
            y, hist: RhsHistory, delta: float):
    """One predict-evaluate-correct step.

    Returns ``(y_next, f_next)`` where ``f_next`` is the derivative at the
    *predicted* state; that value is what goes into the history.
    """
    y_bar = ab_step(pred, y, hist, delta)
    f_next = rhs(t_next, y_bar)
    return am_step(corr, y, hist, f_next, delta), f_next


# ------------------------------------------------------------- IVP driver


@dataclass(frozen=True)
class IvpProblem:
    rhs: Callable[[float, np.ndarray], np.ndarray]
    y0: np.ndarray
    t0: float
    t1: float
    exact: Optional[Callable[[float], np.ndarray]] = None

    def __post_init__(self):
        if not self.t1 > self.t0:
            raise ConfigurationError(f"need t1 > t0, got [{self.t0}, {self.t1}]")
        object.__setattr__(self, "y0", np.atleast_1d(np.asarray(self.y0, dtype=np.float64)))


@dataclass(frozen=True)
class Mode:
    """Stepping mode for :func:`solve_ivp`.

    ``kind`` is ``"ab"`` (pure explicit), ``"pc"`` (predictor AB_pred with
    corrector AM_corr) or ``"bootstrap"`` (the growing-order start-up schedule
    used by the fusion decoder, capped at ``pred`` steps).
    """

    kind: str
    pred: int
    corr: Optional[int] = None

    @property
    def label(self) -> str:
        if self.kind == "ab":
            return f"AB{self.pred}"
        if self.kind == "pc":
            return f"PC(AB{self.pred},AM{self.corr})"
        return f"bootstrap{self.pred}"

    @property
    def history_needed(self) -> int:
        if self.kind == "ab":
            return self.pred
        if self.kind == "pc":
            return max(self.pred, self.corr)
        return 1

    @property
    def nominal_order(self) -> int:
        if self.kind == "ab":
            return self.pred
        if self.kind == "pc":
            return min(self.pred + 1, self.corr + 1)
        return self.pred


def pure_ab(s: int) -> Mode:
    scheme_coeffs("AB", s)
    return Mode("ab", s)


def pc(p: int, c: int) -> Mode:
    scheme_coeffs("AB", p)
    scheme_coeffs("AM", c)
    return Mode("pc", p, c)


def adaptive_bootstrap(max_order: int = 4) -> Mode:
    if not 1 <= max_order <= 4:
        raise ConfigurationError(f"max_order must be in 1..4, got {max_order}")
    return Mode("bootstrap", max_order)


def bootstrap_schemes(i: int, max_order: int = 4) -> tuple[MultistepScheme, MultistepScheme]:
    """Predictor/corrector pair for loop index ``i`` (1-based) of the start-up schedule.

    Below the cap the i-step pair is used; at and above it the predictor is
    AB_cap and the corrector AM_min(cap, 3).
    """
    if i < max_order:
        return scheme_coeffs("AB", i), scheme_coeffs("AM", i)
    return scheme_coeffs("AB", max_order), scheme_coeffs("AM", min(max_order, 3))


def solve_ivp(problem: IvpProblem, mode: Mode, n_steps: int) -> list[tuple[float, np.ndarray]]:
    """Fixed-step integration over ``[t0, t1]`` with ``n_steps`` uniform steps.

    Start-up history for ``ab``/``pc`` modes comes from ``problem.exact`` when
    it is available, otherwise from the bootstrap schedule.
    """
    start = mode.history_needed - 1
    if n_steps < start + 1:
        raise ConfigurationError(f"{mode.label} needs at least {start + 1} steps, got {n_steps}")
    delta = (problem.t1 - problem.t0) / n_steps
    times = [problem.t0 + k * delta for k in range(n_steps + 1)]
    times[-1] = problem.t1
    rhs = problem.rhs
    hist = RhsHistory()
    traj: list[tuple[float, np.ndarray]] = []

    y = problem.y0.copy()
    hist.push(0, np.asarray(rhs(times[0], y), dtype=np.float64))
    traj.append((times[0], y))

    k = 0
    if mode.kind != "bootstrap" and start > 0:
        if problem.exact is not None:
            for k in range(1, start + 1):
                y = np.atleast_1d(np.asarray(problem.exact(times[k]), dtype=np.float64))
                hist.push(k, np.asarray(rhs(times[k], y), dtype=np.float64))
                traj.append((times[k], y))
        else:
            for k in range(1, start + 1):
                p, c = bootstrap_schemes(k)
                y, f = pc_step(p, c, rhs, times[k], y, hist, delta)
                hist.push(k, f)
                traj.append((times[k], y))

    for k in range(k + 1, n_steps + 1):
        t = times[k]
        if mode.kind == "ab":
            y = ab_step(scheme_coeffs("AB", mode.pred), y, hist, delta)
            f = np.asarray(rhs(t, y), dtype=np.float64)
        elif mode.kind == "pc":
            y, f = pc_step(scheme_coeffs("AB", mode.pred), scheme_coeffs("AM", mode.corr),
                           rhs, t, y, hist, delta)
        else:
            p, c = bootstrap_schemes(k, mode.pred)
            y, f = pc_step(p, c, rhs, t, y, hist, delta)
        hist.push(k, f)
        traj.append((t, y))
    return traj


def final_error(problem: IvpProblem, mode: Mode, n_steps: int) -> float:
    if problem.exact is None:
        raise ConfigurationError("error measurement needs problem.exact")
    t, y = solve_ivp(problem, mode, n_steps)[-1]
    return float(np.max(np.abs(y - np.asarray(problem.exact(t), dtype=np.float64))))


def _exact_floor(problem: IvpProblem) -> float:
    # errors at this level are round-off, not truncation
    scale = max(1.0, float(np.max(np.abs(problem.exact(problem.t1)))))
    return 64 * np.finfo(np.float64).eps * scale


def empirical_order(problem: IvpProblem, mode: Mode, n_coarse: int = 64) -> float:
    """Richardson slope ``log2(err(n) / err(2n))`` of the final-time max error.

    Returns ``math.inf`` when the fine run is exact to round-off.
    """
    if problem.exact is None:
        raise ConfigurationError("empirical_order needs problem.exact")
    if n_coarse < 8:
        raise ConfigurationError(f"n_coarse must be >= 8, got {n_coarse}")
    e_coarse = final_error(problem, mode, n_coarse)
    e_fine = final_error(problem, mode, 2 * n_coarse)
    if e_fine <= _exact_floor(problem):
        return math.inf
    return math.log2(e_coarse / e_fine)


ORDER_CSV_HEADER = "scheme,steps,nominal_order,delta,max_error,empirical_order"


@dataclass
class OrderRow:
    scheme: str
    steps: int
    nominal_order: int
    delta: float
    max_error: float
    empirical_order: Optional[float] = None

    def csv(self) -> str:
        slope = "" if self.empirical_order is None else _fmt(self.empirical_order)
        return f"{self.scheme},{self.steps},{self.nominal_order},{self.delta!r},{self.max_error:.6e},{slope}"


def _fmt(x: float) -> str:
    return "inf" if math.isinf(x) else f"{x:.4f}"


def order_rows(problem: IvpProblem, mode: Mode, resolutions: list[int], label: Optional[str] = None,
               nominal_order: Optional[int] = None) -> list[OrderRow]:
    """Error at each resolution and the slope against the previous one."""
    rows: list[OrderRow] = []
    floor = _exact_floor(problem)
    for n in resolutions:
        err = final_error(problem, mode, n)
        slope = None
        if rows:
            prev = rows[-1]
            if err <= floor:
                slope = math.inf
            elif prev.max_error <= floor:
                slope = math.nan
            else:
                slope = math.log2(prev.max_error / err) / math.log2(n / prev.steps)
        rows.append(OrderRow(label or mode.label, n,
                             nominal_order if nominal_order is not None else mode.nominal_order,
                             (problem.t1 - problem.t0) / n, err, slope))
    return rows
