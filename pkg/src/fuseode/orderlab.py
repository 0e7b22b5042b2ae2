"""Analytic test problems and order-of-accuracy studies."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from fuseode import diffarray as da
from fuseode.fusecore import FuseParams, StageInput, fuse_forward
from fuseode.multistep import (
    ORDER_CSV_HEADER,
    ConfigurationError,
    IvpProblem,
    Mode,
    OrderRow,
    order_rows,
    pc,
    pure_ab,
)

__all__ = [
    "BenchProblem",
    "standard_suite",
    "standard_schemes",
    "rhs_residual",
    "run_order_study",
    "write_order_csv",
    "order_summary",
    "OdeCheckRow",
    "scheduler_ode_check",
    "linear_scheduler_params",
]


@dataclass(frozen=True)
class BenchProblem:
    name: str
    problem: IvpProblem
    params: dict = field(default_factory=dict)


def _scalar(rhs: Callable, exact: Callable, y0: float, name: str, **params) -> BenchProblem:
    return BenchProblem(name, IvpProblem(rhs, [y0], 0.0, 1.0, exact), params)


# A = [[-2, 1], [1, -2]] has eigenpairs (-1, [1, 1]) and (-3, [1, -1]).
_SYS_A = np.array([[-2.0, 1.0], [1.0, -2.0]])


def _sys_exact(t):
    e1, e3 = np.exp(-t), np.exp(-3.0 * t)
    return np.array([0.5 * (e1 + e3), 0.5 * (e1 - e3)])


def standard_suite() -> list[BenchProblem]:
    """Scalar decays/growth, a trigonometric forcing, polynomials, a 2x2 system.

    Exact solutions are written with numpy ufuncs only, so they also accept
    complex arguments (used by :func:`rhs_residual`).
    """
    suite = [
        _scalar(lambda t, y: -y, lambda t: np.array([np.exp(-t)]), 1.0, "decay", lam=-1.0),
        _scalar(lambda t, y: -2.0 * y, lambda t: np.array([np.exp(-2.0 * t)]), 1.0, "lambda_-2", lam=-2.0),
        _scalar(lambda t, y: 0.5 * y, lambda t: np.array([np.exp(0.5 * t)]), 1.0, "lambda_0.5", lam=0.5),
        _scalar(lambda t, y: np.array([np.cos(t)]), lambda t: np.array([np.sin(t)]), 0.0, "cos"),
        _scalar(lambda t, y: np.zeros_like(y), lambda t: np.array([1.0 + 0.0 * t]), 1.0, "zero"),
    ]
    for k in range(5):
        # y' = (k+1) t^k, y = 1 + t^(k+1)
        suite.append(_scalar(
            (lambda k: lambda t, y: np.array([(k + 1) * t ** k]))(k),
            (lambda k: lambda t: np.array([1.0 + t ** (k + 1)]))(k),
            1.0, f"poly_{k}", degree=k))
    suite.append(BenchProblem(
        "linear_2x2", IvpProblem(lambda t, y: _SYS_A @ y, [1.0, 0.0], 0.0, 1.0, _sys_exact),
        {"A": _SYS_A.tolist()}))
    return suite


def rhs_residual(bench: BenchProblem, n_points: int = 100) -> float:
    """Max |exact'(t) - rhs(t, exact(t))| with exact' from complex-step differentiation."""
    p = bench.problem
    h = 1e-20
    worst = 0.0
    for t in np.linspace(p.t0, p.t1, n_points):
        deriv = np.imag(p.exact(complex(t, h))) / h
        val = np.real(p.exact(t))
        worst = max(worst, float(np.max(np.abs(deriv - p.rhs(t, val)))))
    return worst


def standard_schemes() -> list[tuple[str, Mode, int]]:
    """(label, mode, nominal order) for AB1-AB4 and AM1-AM3.

    AM_s runs as predictor-corrector with an AB_s predictor; no implicit solve.
    """
    schemes = [(f"AB{s}", pure_ab(s), s) for s in range(1, 5)]
    schemes += [(f"AM{s}", pc(s, s), s + 1) for s in range(1, 4)]
    return schemes


def run_order_study(schemes: Optional[Sequence[tuple[str, Mode, int]]] = None,
                    suite: Optional[Sequence[BenchProblem]] = None,
                    resolutions: Sequence[int] = (16, 32, 64, 128)) -> list[tuple[str, OrderRow]]:
    """Error and Richardson slope for every (scheme, problem, resolution)."""
    if len(resolutions) < 2:
        raise ConfigurationError("an order study needs at least two resolutions")
    schemes = standard_schemes() if schemes is None else schemes
    suite = standard_suite() if suite is None else suite
    out = []
    for bench in suite:
        for label, mode, order in schemes:
            for row in order_rows(bench.problem, mode, list(resolutions), label, order):
                out.append((bench.name, row))
    return out


def write_order_csv(rows: Sequence[tuple[str, OrderRow]], path: Optional[str | Path] = None,
                    multi_problem: bool = True) -> str:
    """CSV text; with several problems the scheme field reads ``AB4:decay``."""
    lines = [ORDER_CSV_HEADER]
    for problem, row in rows:
        if multi_problem:
            row = OrderRow(f"{row.scheme}:{problem}", row.steps, row.nominal_order, row.delta,
                           row.max_error, row.empirical_order)
        lines.append(row.csv())
    text = "\n".join(lines) + "\n"
    if path is not None:
        Path(path).write_text(text)
    return text


def order_summary(rows: Sequence[tuple[str, OrderRow]], tol: float = 0.25,
                  problems: Sequence[str] = ("decay",)) -> tuple[list[str], bool]:
    """PASS/FAIL per (scheme, problem) using the finest-resolution slope."""
    last: dict[tuple[str, str], OrderRow] = {}
    for problem, row in rows:
        if problem in problems:
            last[(problem, row.scheme)] = row
    lines, ok = [], True
    for (problem, scheme), row in last.items():
        slope = row.empirical_order
        passed = slope is not None and (math.isinf(slope) or abs(slope - row.nominal_order) <= tol)
        ok &= passed
        lines.append(f"{'PASS' if passed else 'FAIL'} {scheme} on {problem}: "
                     f"nominal {row.nominal_order}, measured {slope:.3f}")
    return lines, ok


# ------------------------------------------------------- scheduler as IVP


@dataclass(frozen=True)
class OdeCheckRow:
    L: int
    y_final: float
    exact: float
    error: float


def linear_scheduler_params(L: int, a: float, b: float, mem_channels: int = 2) -> FuseParams:
    """Params that turn the fusion derivative into ``-y + a*y + b*x`` on 1x1 tensors."""
    if a == 0.0 and b != 0.0:
        raise ConfigurationError("with a == 0 the mixer zeroes the input path; b must be 0")
    m = mem_channels
    gain = 0.0 if b == 0.0 else b / a
    g_w = [da.Tensor(np.full((m, 1, 1), gain)) for _ in range(L)]
    g_b = [da.Tensor(np.zeros((m, 1, 1))) for _ in range(L)]
    f_w = [da.Tensor(a * np.eye(m)[:, :, None])]
    f_b = [da.Tensor(np.zeros((m, 1, 1)))]
    head_w = da.Tensor(np.ones((1, m, 1)) / m)
    return FuseParams(g_w, g_b, f_w, f_b, head_w, da.Tensor(np.zeros((1, 1, 1))), "identity")


def _linear_exact(a: float, b: float, x: float, t: float) -> float:
    # y' = (a - 1) y + b x, y(0) = 0
    k = a - 1.0
    if k == 0.0:
        return b * x * t
    return -b * x / k * (1.0 - math.exp(k * t))


def scheduler_ode_check(L_values: Sequence[int] = (4, 8, 16), a: float = 0.5, b: float = 1.0,
                        x: float = 1.0) -> list[OdeCheckRow]:
    """Fusion decoder on 1x1 inputs vs the closed-form solution at t = 1."""
    rows = []
    exact = _linear_exact(a, b, x, 1.0)
    for L in L_values:
        params = linear_scheduler_params(L, a, b)
        stages = [StageInput(i, da.Tensor(np.full((1, 1, 1), x))) for i in range(1, L + 1)]
        y_final, _ = fuse_forward(params, stages)
        val = float(y_final.data[0, 0, 0])
        rows.append(OdeCheckRow(L, val, exact, abs(val - exact)))
    return rows
