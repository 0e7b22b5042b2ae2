"""Skip-connection fusion as a multistep ODE solve.

Stage inputs ``X_1..X_L`` (coarsest first) are treated as the nodes of an
initial value problem on ``[0, 1]`` with step ``1/L``.  A memory flow ``Y``
with ``mem_channels`` channels at full resolution starts at zero and is
advanced by predictor-corrector Adams steps whose order grows with the
number of available derivatives, capped at four.  The derivative is

    F(X, Y) = -Y + f(Y + g(X))

with ``g`` = bilinear resize + 1x1 projection and ``f`` = 1x1 mixer +
pointwise activation.  Exactly one derivative evaluation happens per stage:
the value at the predicted flow is reused by the corrector and kept in the
history.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from fuseode import diffarray as da
from fuseode.diffarray import DimensionError, Tensor
from fuseode.multistep import (
    ConfigurationError,
    MultistepScheme,
    RhsHistory,
    ab_step,
    am_step,
    bootstrap_schemes,
    scheme_coeffs,
)

__all__ = [
    "StageInput",
    "FuseParams",
    "StageRecord",
    "ScheduleTrace",
    "init_params",
    "g_align",
    "rhs_eval",
    "plan_schedule",
    "fuse_forward",
    "fuse_forward_order_capped",
    "head",
    "save_params",
    "load_params",
]


@dataclass(frozen=True)
class StageInput:
    index: int
    x: Tensor


@dataclass
class FuseParams:
    """Learnable state of the fusion decoder.

    ``f_weights``/``f_biases`` hold one entry when the mixer is shared across
    stages and L entries when it is per-stage.
    """

    g_weights: list[Tensor]
    g_biases: list[Tensor]
    f_weights: list[Tensor]
    f_biases: list[Tensor]
    head_weight: Tensor
    head_bias: Tensor
    activation: str = "tanh"

    @property
    def n_stages(self) -> int:
        return len(self.g_weights)

    @property
    def mem_channels(self) -> int:
        return self.head_weight.shape[1]

    @property
    def n_classes(self) -> int:
        return self.head_weight.shape[0]

    @property
    def shared_f(self) -> bool:
        return len(self.f_weights) == 1

    def f_for(self, index: int) -> tuple[Tensor, Tensor]:
        k = 0 if self.shared_f else index - 1
        return self.f_weights[k], self.f_biases[k]

    def groups(self) -> dict[str, list[Tensor]]:
        return {
            "g_weights": self.g_weights,
            "g_biases": self.g_biases,
            "f_weights": self.f_weights,
            "f_biases": self.f_biases,
            "head_weight": [self.head_weight],
            "head_bias": [self.head_bias],
        }

    def tensors(self) -> list[Tensor]:
        return [t for group in self.groups().values() for t in group]

    def map(self, fn: Callable[[Tensor], Tensor]) -> "FuseParams":
        """New params with ``fn`` applied to every tensor."""
        return FuseParams(
            [fn(t) for t in self.g_weights],
            [fn(t) for t in self.g_biases],
            [fn(t) for t in self.f_weights],
            [fn(t) for t in self.f_biases],
            fn(self.head_weight),
            fn(self.head_bias),
            self.activation,
        )

    def requiring_grad(self) -> "FuseParams":
        return self.map(lambda t: Tensor(t.data, requires_grad=True))

    def detached(self) -> "FuseParams":
        return self.map(lambda t: Tensor(t.data))


def init_params(stage_channels: Sequence[int], n_classes: int = 1, mem_factor: int = 2,
                activation: str = "tanh", seed: int = 0, per_stage_f: bool = False,
                init_scale: float = 0.5) -> FuseParams:
    """Gaussian weights scaled by ``init_scale / sqrt(fan_in)``, zero biases."""
    if mem_factor not in (1, 2, 3, 4):
        raise ConfigurationError(f"mem_factor must be one of 1..4 (N..4N), got {mem_factor}")
    if activation not in da.ACTIVATIONS:
        raise ConfigurationError(f"unknown activation {activation!r}")
    rng = np.random.default_rng(seed)
    m = mem_factor * n_classes

    def w(rows, cols):
        return Tensor(rng.normal(0.0, init_scale / np.sqrt(cols), size=(rows, cols, 1)))

    g_w = [w(m, c) for c in stage_channels]
    g_b = [Tensor(np.zeros((m, 1, 1))) for _ in stage_channels]
    n_f = len(stage_channels) if per_stage_f else 1
    f_w = [w(m, m) for _ in range(n_f)]
    f_b = [Tensor(np.zeros((m, 1, 1))) for _ in range(n_f)]
    return FuseParams(g_w, g_b, f_w, f_b, w(n_classes, m), Tensor(np.zeros((n_classes, 1, 1))),
                      activation)


# ------------------------------------------------------------ derivative


def g_align(params: FuseParams, stage: StageInput, target: Sequence[int]) -> Tensor:
    """Bring a skip feature to the flow's resolution and channel count."""
    i = stage.index
    if not 1 <= i <= params.n_stages:
        raise DimensionError(f"no g parameters for stage {i} (have {params.n_stages})")
    w, b = params.g_weights[i - 1], params.g_biases[i - 1]
    if w.shape[1] != stage.x.shape[0]:
        raise DimensionError(
            f"stage {i}: g expects {w.shape[1]} channels, input has {stage.x.shape[0]}")
    return da.channel_project(da.resize_bilinear(stage.x, target), w, b)


def rhs_eval(params: FuseParams, stage: StageInput, y: Tensor) -> Tensor:
    """``-y + act(W_f (y + g(x)) + b_f)``."""
    g = g_align(params, stage, y.shape[1:])
    if g.shape != y.shape:
        raise DimensionError(f"aligned input {g.shape} does not match flow {y.shape}")
    w, b = params.f_for(stage.index)
    mixed = da.pointwise(da.channel_project(da.add(y, g), w, b), params.activation)
    return da.sub(mixed, y)


# ------------------------------------------------------------- schedule


@dataclass(frozen=True)
class StageRecord:
    i: int
    pred: str
    corr: Optional[str]
    pred_hist: tuple[int, ...]
    corr_hist: tuple[int, ...]
    delta: Fraction

    def line(self) -> str:
        corr = self.corr or "none"
        return (f"i={self.i} pred={self.pred} corr={corr} "
                f"hist={self.pred_hist[0]}..{self.pred_hist[-1]} delta={self.delta}")


@dataclass
class ScheduleTrace:
    L: int
    max_order: int
    records: list[StageRecord] = field(default_factory=list)
    rhs_evals: int = 0

    @property
    def final(self) -> StageRecord:
        return self.records[-1]

    @property
    def loop(self) -> list[StageRecord]:
        return self.records[:-1]

    def dump(self) -> str:
        return "".join(r.line() + "\n" for r in self.records)

    def equations(self) -> str:
        """Workflow as update equations, one predictor/corrector/final line each."""
        lines = []
        for r in self.records:
            src = _span("X", r.pred_hist) + " " + _span("Y", r.pred_hist)
            new, old = f"Y{r.i + 1}", f"Y{r.i}"
            pred = _scheme_from_name(r.pred)
            tag = "P" if r.corr else "Cal"
            lines.append(f"{src} | {tag}: {new} = {old} + {_combo(pred, r.pred_hist)}")
            if r.corr:
                corr = _scheme_from_name(r.corr)
                lines.append(f"{src} | C: {new} = {old} + {_combo(corr, r.corr_hist)}")
        return "\n".join(lines) + "\n"


def _span(sym: str, idx: Sequence[int]) -> str:
    return f"{sym}{idx[0]}" if len(idx) == 1 else f"{sym}{idx[0]}:{idx[-1]}"


def _scheme_from_name(name: str) -> MultistepScheme:
    return scheme_coeffs(name[:2], int(name[2:]))


def _combo(scheme: MultistepScheme, idx: Sequence[int]) -> str:
    # newest term first, e.g. "delta/24*(9F5 + 19F4 - 5F3 + F2)"
    parts = []
    for n, k in reversed(list(zip(scheme.numerators, idx))):
        mag = "" if abs(n) == 1 else str(abs(n))
        sign = "-" if n < 0 else "+"
        parts.append((sign, f"{mag}F{k}"))
    body = ("-" if parts[0][0] == "-" else "") + parts[0][1]
    for sign, term in parts[1:]:
        body += f" {sign} {term}"
    if scheme.denominator == 1 and len(parts) == 1:
        return f"delta*{body}"
    return f"delta/{scheme.denominator}*({body})"


def _check_cap(max_order: int) -> None:
    if not 1 <= max_order <= 4:
        raise ConfigurationError(f"max_order must be in 1..4, got {max_order}")


def plan_schedule(L: int, max_order: int = 4) -> ScheduleTrace:
    """Scheme choices and history windows for an ``L``-stage decode."""
    if L < 2:
        raise ConfigurationError(f"the fusion schedule needs L >= 2 stages, got {L}")
    _check_cap(max_order)
    delta = Fraction(1, L)
    trace = ScheduleTrace(L, max_order, rhs_evals=L)
    for i in range(1, L):
        p, c = bootstrap_schemes(i, max_order)
        trace.records.append(StageRecord(
            i, p.name, c.name,
            tuple(range(i - p.steps + 1, i + 1)),
            tuple(range(i + 1 - c.steps, i + 2)),
            delta))
    s = min(L, max_order)
    trace.records.append(StageRecord(L, f"AB{s}", None, tuple(range(L - s + 1, L + 1)), (), delta))
    return trace


def _check_stages(params: FuseParams, stages: Sequence[StageInput]) -> None:
    L = len(stages)
    if L < 2:
        raise ConfigurationError(f"the fusion schedule needs L >= 2 stages, got {L}")
    for k, st in enumerate(stages, start=1):
        if st.index != k:
            raise ValueError(f"stage {k} missing or out of order (got index {st.index})")
    if params.n_stages < L:
        raise DimensionError(f"params cover {params.n_stages} stages, input has {L}")


def fuse_forward(params: FuseParams, stages: Sequence[StageInput], target: Optional[Sequence[int]] = None,
                 max_order: int = 4, rhs: Callable = rhs_eval) -> tuple[Tensor, ScheduleTrace]:
    """Run the adaptive predictor-corrector schedule over all stages.

    ``target`` defaults to the spatial size of the last (finest) stage.
    ``rhs`` can be swapped for an instrumented derivative.
    """
    _check_stages(params, stages)
    _check_cap(max_order)
    L = len(stages)
    H, W = target if target is not None else stages[-1].x.shape[1:]
    M = params.mem_channels
    shape = (M, H, W)
    delta = Fraction(1, L)
    d = float(delta)

    trace = ScheduleTrace(L, max_order)
    y = da.zeros(shape)
    hist = RhsHistory()
    f = rhs(params, stages[0], y)
    trace.rhs_evals += 1
    hist.push(1, f)

    for i in range(1, L):
        p, c = bootstrap_schemes(i, max_order)
        pred_idx = tuple(hist.indices(p.steps))
        y_bar = ab_step(p, y, hist, d)
        f = rhs(params, stages[i], y_bar)
        trace.rhs_evals += 1
        corr_idx = tuple(hist.indices(c.steps)) + (i + 1,)
        y = am_step(c, y, hist, f, d)
        hist.push(i + 1, f)
        for t in (y_bar, f, y):
            if t.shape != shape:
                raise DimensionError(f"stage {i + 1}: intermediate shape {t.shape}, expected {shape}")
        trace.records.append(StageRecord(i, p.name, c.name, pred_idx, corr_idx, delta))

    final = scheme_coeffs("AB", min(L, max_order))
    final_idx = tuple(hist.indices(final.steps))
    y_final = ab_step(final, y, hist, d)
    trace.records.append(StageRecord(L, final.name, None, final_idx, (), delta))
    return y_final, trace


def fuse_forward_order_capped(params: FuseParams, stages: Sequence[StageInput], max_order: int,
                              target: Optional[Sequence[int]] = None,
                              rhs: Callable = rhs_eval) -> tuple[Tensor, ScheduleTrace]:
    return fuse_forward(params, stages, target=target, max_order=max_order, rhs=rhs)


def head(params: FuseParams, y_final: Tensor) -> Tensor:
    """1x1 projection of the final flow to class logits."""
    return da.channel_project(y_final, params.head_weight, params.head_bias)


# ----------------------------------------------------------- checkpoints

MANIFEST = "manifest.txt"


def save_params(params: FuseParams, directory: str | Path) -> None:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    lines = [f"meta.activation = {params.activation}",
             f"meta.shared_f = {int(params.shared_f)}"]
    for group, tensors in params.groups().items():
        for k, t in enumerate(tensors, start=1):
            role = f"{group}.{k}"
            fname = f"{role}.ftnsr"
            da.save_tensor(out / fname, t)
            lines.append(f"{role} = {fname}")
    (out / MANIFEST).write_text("\n".join(lines) + "\n")


def load_params(directory: str | Path) -> FuseParams:
    src = Path(directory)
    entries: dict[str, str] = {}
    for raw in (src / MANIFEST).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, _, value = line.partition("=")
        entries[key.strip()] = value.strip()

    def group(name):
        keys = sorted((k for k in entries if k.startswith(name + ".")), key=lambda k: int(k.rsplit(".", 1)[1]))
        return [da.load_tensor(src / entries[k]) for k in keys]

    return FuseParams(group("g_weights"), group("g_biases"), group("f_weights"), group("f_biases"),
                      group("head_weight")[0], group("head_bias")[0],
                      entries.get("meta.activation", "tanh"))
