"""Synthetic binary segmentation with a fixed encoder and a trainable fusion decoder."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from fuseode import diffarray as da
from fuseode.diffarray import ContractError, Tensor
from fuseode.fusecore import FuseParams, StageInput, fuse_forward, head, init_params
from fuseode.multistep import ConfigurationError

__all__ = [
    "Sample",
    "TrainConfig",
    "TrainResult",
    "TrainingFailure",
    "synth_dataset",
    "make_pyramid",
    "dice_score",
    "seg_loss",
    "predict",
    "evaluate",
    "train",
    "save_pgm",
    "load_pgm",
    "save_dataset",
    "load_dataset",
    "pipeline_gradcheck",
    "GradcheckReport",
]

PYRAMID_CHANNELS = 4
_MEM_FACTORS = {"N": 1, "2N": 2, "3N": 3, "4N": 4}


class TrainingFailure(RuntimeError):
    pass


@dataclass(frozen=True)
class Sample:
    image: Tensor
    mask: Tensor

    def __post_init__(self):
        if self.image.shape != self.mask.shape:
            raise da.DimensionError(f"image {self.image.shape} vs mask {self.mask.shape}")
        if not np.all((self.mask.data == 0.0) | (self.mask.data == 1.0)):
            raise ContractError("mask must be binary")


# ---------------------------------------------------------------- data


def _shape_coverage(kind, cy, cx, ry, rx, angle, ys, xs):
    # ys, xs: sample coordinates in pixel units
    dy, dx = ys - cy, xs - cx
    c, s = math.cos(angle), math.sin(angle)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    if kind == "ellipse":
        return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0
    return (np.abs(u) <= rx) & (np.abs(v) <= ry)


def _one_sample(rng: np.random.Generator, H: int, W: int, supersample: int = 4) -> Sample:
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    offs = (np.arange(supersample) + 0.5) / supersample - 0.5
    sub_y = (yy[..., None, None] + offs[:, None]).reshape(H, W, -1)
    sub_x = (xx[..., None, None] + offs[None, :]).reshape(H, W, -1)

    background = rng.uniform(0.1, 0.3)
    image = np.full((H, W), background)
    mask = np.zeros((H, W), dtype=bool)
    size = min(H, W)
    for _ in range(rng.integers(1, 4)):
        kind = "ellipse" if rng.random() < 0.5 else "rect"
        ry, rx = rng.uniform(0.08, 0.22, size=2) * size
        cy, cx = rng.uniform(0.2, 0.8) * H, rng.uniform(0.2, 0.8) * W
        angle = rng.uniform(0.0, math.pi)
        level = rng.uniform(0.6, 0.9)
        cover = _shape_coverage(kind, cy, cx, ry, rx, angle, sub_y, sub_x).mean(axis=-1)
        image = image + cover * (level - image)
        mask |= _shape_coverage(kind, cy, cx, ry, rx, angle, yy, xx)
    image = np.clip(image + rng.normal(0.0, 0.08, size=(H, W)), 0.0, 1.0)
    return Sample(Tensor(image[None]), Tensor(mask[None].astype(np.float64)))


def synth_dataset(n: int, H: int = 32, W: int = 32, seed: int = 0) -> list[Sample]:
    """``n`` noisy images with 1-3 anti-aliased ellipses/rectangles each.

    Sample k depends only on (seed, k).
    """
    if H < 16 or W < 16:
        raise ConfigurationError(f"images must be at least 16x16, got {H}x{W}")
    children = np.random.SeedSequence(seed).spawn(n)
    return [_one_sample(np.random.default_rng(c), H, W) for c in children]


def _features(img: np.ndarray) -> np.ndarray:
    # value, d/dx, d/dy, 3x3 mean; edges replicated
    p = np.pad(img, 1, mode="edge")
    gx = 0.5 * (p[1:-1, 2:] - p[1:-1, :-2])
    gy = 0.5 * (p[2:, 1:-1] - p[:-2, 1:-1])
    mean = sum(p[i:i + img.shape[0], j:j + img.shape[1]] for i in range(3) for j in range(3)) / 9.0
    return np.stack([img, gx, gy, mean])


def _avg_pool(x: np.ndarray, k: int) -> np.ndarray:
    if k == 1:
        return x
    c, h, w = x.shape
    return x.reshape(c, h // k, k, w // k, k).mean(axis=(2, 4))


def make_pyramid(image: Tensor, L: int) -> list[StageInput]:
    """Fixed encoder: four filter channels pooled to ``(H, W) / 2**(L - i)`` at stage i."""
    if L < 1:
        raise ConfigurationError(f"L must be positive, got {L}")
    _, H, W = image.shape
    k = 2 ** (L - 1)
    if H % k or W % k:
        raise ConfigurationError(f"H, W = {H}, {W} must be divisible by 2**(L-1) = {k}")
    feats = _features(image.data[0])
    return [StageInput(i, Tensor(_avg_pool(feats, 2 ** (L - i)))) for i in range(1, L + 1)]


def dice_score(pred_mask: Tensor, truth: Tensor) -> float:
    a, b = pred_mask.data, truth.data
    if a.shape != b.shape:
        raise da.DimensionError(f"dice_score: {a.shape} vs {b.shape}")
    for arr in (a, b):
        if not np.all((arr == 0.0) | (arr == 1.0)):
            raise ContractError("dice_score needs binary masks")
    total = a.sum() + b.sum()
    if total == 0:
        return 1.0
    return float(2.0 * (a * b).sum() / total)


# ---------------------------------------------------------------- model

SOFT_DICE_SMOOTH = 1.0


def seg_loss(logits: Tensor, target: Tensor) -> Tensor:
    """Mean BCE-with-logits plus soft Dice, equally weighted."""
    t = Tensor(target.data)
    bce = da.tmean(da.sub(da.pointwise(logits, "softplus"), da.mul(t, logits)))
    p = da.pointwise(logits, "sigmoid")
    inter = da.tsum(da.mul(p, t))
    denom = da.add_scalar(da.add(da.tsum(p), da.tsum(t)), SOFT_DICE_SMOOTH)
    dice = da.div(da.add_scalar(da.scale(inter, 2.0), SOFT_DICE_SMOOTH), denom)
    return da.add(bce, da.add_scalar(da.scale(dice, -1.0), 1.0))


def forward_logits(params: FuseParams, stages: Sequence[StageInput], max_order: int = 4) -> Tensor:
    y_final, _ = fuse_forward(params, stages, max_order=max_order)
    return head(params, y_final)


def predict(params: FuseParams, image: Tensor, L: int, max_order: int = 4) -> Tensor:
    logits = forward_logits(params.detached(), make_pyramid(image, L), max_order)
    return Tensor((logits.data > 0.0).astype(np.float64))


def evaluate(params: FuseParams, samples: Sequence[Sample], L: int, max_order: int = 4) -> float:
    """Mean per-sample Dice of thresholded predictions."""
    if not samples:
        return float("nan")
    return float(np.mean([dice_score(predict(params, s.image, L, max_order), s.mask) for s in samples]))


@dataclass
class TrainConfig:
    L: int = 4
    H: int = 32
    W: int = 32
    n_train: int = 64
    n_val: int = 16
    seed: int = 0
    learning_rate: float = 0.5
    epochs: int = 200
    mem_channels: str = "2N"
    max_order: int = 4
    activation: str = "tanh"
    init_scale: float = 0.5

    def __post_init__(self):
        for name in ("L", "H", "W", "n_train", "n_val", "epochs"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        if self.seed < 0:
            raise ConfigurationError("seed must be non-negative")
        if self.mem_channels not in _MEM_FACTORS:
            raise ConfigurationError(f"mem_channels must be one of {list(_MEM_FACTORS)}")
        if not 1 <= self.max_order <= 4:
            raise ConfigurationError(f"max_order must be in 1..4, got {self.max_order}")

    @property
    def mem_factor(self) -> int:
        return _MEM_FACTORS[self.mem_channels]

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if not sep or key not in types:
                raise ConfigurationError(f"line {lineno}: cannot parse {raw!r}")
            conv = {"int": int, "float": float, "str": str}[types[key]]
            kwargs[key] = conv(value)
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path: str | Path) -> "TrainConfig":
        return cls.from_text(Path(path).read_text())

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in asdict(self).items())


@dataclass
class TrainResult:
    params: FuseParams
    train_loss: list[float] = field(default_factory=list)
    val_dice: list[float] = field(default_factory=list)

    @property
    def final_val_dice(self) -> float:
        return self.val_dice[-1]

    def metrics_csv(self, config: Optional[TrainConfig] = None) -> str:
        lines = []
        if config is not None:
            lines += [f"# {k}={v}" for k, v in asdict(config).items()]
        lines.append("epoch,train_loss,val_dice")
        lines += [f"{e},{loss:.10f},{dice:.6f}"
                  for e, (loss, dice) in enumerate(zip(self.train_loss, self.val_dice), start=1)]
        return "\n".join(lines) + "\n"


def loss_and_grads(params: FuseParams, batch: Sequence[tuple[list[StageInput], Tensor]],
                   max_order: int = 4) -> tuple[float, list[np.ndarray]]:
    """Mean loss over ``batch`` and its gradient for every parameter tensor."""
    tracked = params.requiring_grad()
    leaves = tracked.tensors()
    total = 0.0
    grads = [np.zeros(t.shape) for t in leaves]
    for stages, mask in batch:
        loss = seg_loss(forward_logits(tracked, stages, max_order), mask)
        tape = da.backward(loss)
        total += loss.item()
        for g, leaf in zip(grads, leaves):
            g += tape.grad(leaf)
    n = len(batch)
    return total / n, [g / n for g in grads]


def _apply_update(params: FuseParams, grads: list[np.ndarray], lr: float) -> FuseParams:
    it = iter(grads)
    return params.map(lambda t: Tensor(t.data - lr * next(it)))


def train(config: TrainConfig, train_set: Optional[Sequence[Sample]] = None,
          val_set: Optional[Sequence[Sample]] = None, params: Optional[FuseParams] = None) -> TrainResult:
    """Full-batch gradient descent on the fusion decoder parameters.

    Training data default to ``synth_dataset(n_train, seed)`` and validation
    data to ``synth_dataset(n_val, seed + 1)``.
    """
    cfg = config
    if train_set is None:
        train_set = synth_dataset(cfg.n_train, cfg.H, cfg.W, cfg.seed)
    if val_set is None:
        val_set = synth_dataset(cfg.n_val, cfg.H, cfg.W, cfg.seed + 1)
    if params is None:
        params = init_params([PYRAMID_CHANNELS] * cfg.L, n_classes=1, mem_factor=cfg.mem_factor,
                             activation=cfg.activation, seed=cfg.seed, init_scale=cfg.init_scale)
    batch = [(make_pyramid(s.image, cfg.L), s.mask) for s in train_set]
    result = TrainResult(params)
    for epoch in range(1, cfg.epochs + 1):
        loss, grads = loss_and_grads(params, batch, cfg.max_order)
        if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
            raise TrainingFailure(f"loss became non-finite at epoch {epoch}")
        if cfg.learning_rate != 0.0:
            params = _apply_update(params, grads, cfg.learning_rate)
        result.train_loss.append(loss)
        result.val_dice.append(evaluate(params, val_set, cfg.L, cfg.max_order))
    result.params = params
    return result


# ------------------------------------------------------------------ PGM


def save_pgm(path: str | Path, arr: np.ndarray) -> None:
    """8-bit binary PGM (P5, maxval 255) from values in [0, 1]."""
    a = np.asarray(arr, dtype=np.float64)
    if a.ndim == 3:
        a = a[0]
    h, w = a.shape
    px = np.clip(np.rint(a * 255.0), 0, 255).astype(np.uint8)
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + px.tobytes())


def load_pgm(path: str | Path) -> np.ndarray:
    """PGM as a (1, H, W) float array in [0, 1]."""
    raw = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5":
        raise ContractError(f"{path}: only binary PGM (P5) is supported")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval > 255:
        raise ContractError(f"{path}: 16-bit PGM not supported")
    body = raw[pos + 1:pos + 1 + w * h]
    if len(body) != w * h:
        raise ContractError(f"{path}: truncated pixel data")
    return (np.frombuffer(body, dtype=np.uint8).reshape(1, h, w) / maxval).astype(np.float64)


def save_dataset(samples: Sequence[Sample], directory: str | Path) -> None:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    for k, s in enumerate(samples):
        save_pgm(out / f"img_{k:04d}.pgm", s.image.data)
        save_pgm(out / f"mask_{k:04d}.pgm", s.mask.data)


def load_dataset(directory: str | Path) -> list[Sample]:
    src = Path(directory)
    samples = []
    for img_path in sorted(src.glob("img_*.pgm")):
        mask_path = src / img_path.name.replace("img_", "mask_")
        if not mask_path.exists():
            raise FileNotFoundError(f"missing mask for {img_path.name}")
        mask = (load_pgm(mask_path) >= 0.5).astype(np.float64)
        samples.append(Sample(Tensor(load_pgm(img_path)), Tensor(mask)))
    return samples


# ------------------------------------------------------------- gradcheck


@dataclass(frozen=True)
class GradcheckReport:
    max_rel_error: float
    per_group: dict

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error <= tol


def pipeline_gradcheck(L: int = 4, n_classes: int = 1, size: int = 8, seed: int = 0,
                       eps: float = 1e-5, max_order: int = 4) -> GradcheckReport:
    """Backprop vs central differences for every decoder parameter.

    Uses a random image through the fixed encoder, the fusion decoder, the
    head and the segmentation loss.  Errors are normwise per parameter tensor:
    ``|g_bp - g_fd| / max(|g_bp|, |g_fd|)``.
    """
    rng = np.random.default_rng(seed)
    image = Tensor(rng.uniform(0.0, 1.0, size=(1, size, size)))
    mask = Tensor((rng.uniform(size=(n_classes, size, size)) < 0.4).astype(np.float64))
    stages = make_pyramid(image, L)
    params = init_params([PYRAMID_CHANNELS] * L, n_classes=n_classes, seed=seed, init_scale=1.0)
    # non-zero biases so their gradients are exercised away from the origin
    params = params.map(lambda t: Tensor(t.data + 0.1 * rng.standard_normal(t.shape)))

    tracked = params.requiring_grad()
    tape = da.backward(seg_loss(forward_logits(tracked, stages, max_order), mask))

    leaves = tracked.tensors()
    groups = [name for name, ts in tracked.groups().items() for _ in ts]
    per_group: dict[str, float] = {}
    for k, (name, leaf) in enumerate(zip(groups, leaves)):
        def loss_of(x, k=k):
            swapped = list(params.tensors())
            swapped[k] = x
            it = iter(swapped)
            p = params.map(lambda _: next(it))
            return seg_loss(forward_logits(p, stages, max_order), mask)

        g_bp = tape.grad(leaf)
        g_fd = da.finite_diff_grad(loss_of, params.tensors()[k], eps)
        scale = max(np.linalg.norm(g_bp), np.linalg.norm(g_fd), 1e-12)
        err = float(np.linalg.norm(g_bp - g_fd) / scale)
        per_group[name] = max(per_group.get(name, 0.0), err)
    return GradcheckReport(max(per_group.values()), per_group)
