"""Two-stage training with straight-through gradients.

Latent weights live in full precision and are the only thing the optimizer
mutates; every forward consumes freshly quantized views. Stage 1 runs all
projection inputs at int8 with the peak learning rate decaying to the
second-stage rate; at the split point the model is rebound to the hybrid
low-bit configuration and training continues on the same optimizer moments
with the rate decaying to zero and weight decay switched off.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .model import Stage, TransformerModel, configure_identity, configure_stage, model_forward
from .quantcore import SchemeKind
from .sparsify import topk_mask


@dataclass
class TrainerConfig:
    total_steps: int = 1000
    stage_split: float = 0.95
    peak_lr: float = 1.5e-3
    second_stage_lr: float = 1.0e-3
    wd_first: float = 0.1
    wd_second: float = 0.0
    warmup_steps: int = 50
    betas: tuple[float, float] = (0.9, 0.95)
    adam_eps: float = 1e-8
    clip_norm: float = 1.0
    batch_size: int = 16
    seed: int = 0
    single_stage: Stage | None = None

    def __post_init__(self):
        if not 0.0 < self.stage_split < 1.0:
            raise ValueError("stage_split must be in (0, 1)")
        if self.peak_lr <= 0.0 or self.second_stage_lr <= 0.0:
            raise ValueError("learning rates must be positive")
        if self.total_steps < 1:
            raise ValueError("total_steps must be positive")

    @property
    def stage1_steps(self) -> int:
        if self.single_stage is not None:
            return self.total_steps if Stage(self.single_stage) is Stage.STAGE1 else 0
        return int(round(self.stage_split * self.total_steps))


@dataclass
class OptimizerState:
    """AdamW moments keyed like the model's named parameters."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def init(cls, model: TransformerModel) -> "OptimizerState":
        params = model.named_parameters()
        return cls(
            m={k: np.zeros_like(p.value) for k, p in params.items()},
            v={k: np.zeros_like(p.value) for k, p in params.items()},
        )


@dataclass
class StepRecord:
    step: int
    stage: str
    lr: float
    wd: float
    loss: float
    grad_norm: float


@dataclass
class TrainLog:
    records: list[StepRecord] = field(default_factory=list)
    divergence_step: int | None = None
    stage_boundary: int | None = None

    @property
    def diverged(self) -> bool:
        return self.divergence_step is not None

    def smoothed_loss(self, upto: int | None = None, window: int = 100) -> float:
        losses = [r.loss for r in self.records if math.isfinite(r.loss)]
        if upto is not None:
            losses = [r.loss for r in self.records[:upto] if math.isfinite(r.loss)]
        if not losses:
            return float("nan")
        return float(np.mean(losses[-window:]))


def _warm_cosine(step: int, warmup: int, span: int, peak: float, floor: float) -> float:
    if step < warmup:
        return peak * (step + 1) / warmup
    t = (step - warmup) / max(1, span - warmup)
    return floor + (peak - floor) * 0.5 * (1.0 + math.cos(math.pi * t))


def lr_schedule(step: int, config: TrainerConfig) -> tuple[float, float]:
    """(learning rate, weight decay) at a global step.

    Two-stage: linear warmup to the peak, cosine down to the second-stage
    rate by the boundary, then cosine from that rate to zero with no
    re-warmup; weight decay switches exactly at the boundary. Single-stage
    (ablation runs): one warmup-plus-cosine from the peak to zero, first-stage
    weight decay throughout, so ablations differ only in scheme bindings.
    """
    if config.single_stage is not None:
        lr = _warm_cosine(step, config.warmup_steps, config.total_steps, config.peak_lr, 0.0)
        return lr, config.wd_first
    s1 = config.stage1_steps
    if step < s1:
        lr = _warm_cosine(step, config.warmup_steps, s1, config.peak_lr, config.second_stage_lr)
        return lr, config.wd_first
    t = (step - s1) / max(1, config.total_steps - s1)
    lr = config.second_stage_lr * 0.5 * (1.0 + math.cos(math.pi * t))
    return lr, config.wd_second


def ste_backward(op_kind, upstream_grad: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Straight-through adjoint: quantizers pass the upstream gradient
    through unchanged (the identical array); the top-K mask gates it."""
    if op_kind == "topk_mask":
        if mask is None:
            raise ValueError("topk_mask backward needs the mask")
        return upstream_grad * mask
    if isinstance(op_kind, SchemeKind) or op_kind in {k.value for k in SchemeKind}:
        return upstream_grad
    raise ValueError(f"unknown straight-through op kind: {op_kind!r}")


def global_grad_norm(params: dict[str, ad.Var]) -> float:
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    return math.sqrt(total)


def adamw_update(
    params: dict[str, ad.Var],
    state: OptimizerState,
    lr: float,
    wd: float,
    betas: tuple[float, float],
    eps: float,
) -> None:
    b1, b2 = betas
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        state.v[name] = b2 * state.v[name] + (1.0 - b2) * (g * g)
        mhat = state.m[name] / (1.0 - b1**t)
        vhat = state.v[name] / (1.0 - b2**t)
        p.value = p.value - lr * mhat / (np.sqrt(vhat) + eps) - lr * wd * p.value


def train_step(
    model: TransformerModel,
    batch: tuple[np.ndarray, np.ndarray],
    state: OptimizerState,
    config: TrainerConfig,
    step: int,
) -> tuple[float, float]:
    """One forward/backward/update. Returns (loss, pre-clip grad norm);
    a non-finite loss skips the update and is reported, not raised."""
    inputs, targets = batch
    params = model.named_parameters()
    for p in params.values():
        p.zero_grad()
    logits = model_forward(model, inputs)
    loss = ad.cross_entropy(logits, targets)
    loss_val = float(loss.value)
    if not math.isfinite(loss_val):
        return loss_val, float("nan")
    loss.backward()
    norm = global_grad_norm(params)
    if math.isfinite(norm) and norm > config.clip_norm > 0.0:
        factor = config.clip_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * factor
    lr, wd = lr_schedule(step, config)
    adamw_update(params, state, lr, wd, config.betas, config.adam_eps)
    return loss_val, norm


class DivergenceMonitor:
    """Flags a run after 50 consecutive steps whose loss is non-finite or
    above 10x the running median of recent finite losses."""

    def __init__(self, patience: int = 50, factor: float = 10.0, window: int = 100):
        self.patience = patience
        self.factor = factor
        self.recent = deque(maxlen=window)
        self.bad_streak = 0

    def update(self, loss: float) -> bool:
        bad = not math.isfinite(loss)
        if not bad and self.recent:
            bad = loss > self.factor * float(np.median(self.recent))
        if math.isfinite(loss):
            self.recent.append(loss)
        self.bad_streak = self.bad_streak + 1 if bad else 0
        return self.bad_streak >= self.patience


def run_two_stage(
    model: TransformerModel,
    stream,
    config: TrainerConfig,
    on_boundary=None,
    on_record=None,
    on_configure=None,
) -> TrainLog:
    """Full training run; the stage switch reuses the optimizer moments.
    ``on_configure(model)`` fires after every stage (re)binding so callers
    can overlay custom per-site schemes (ablation presets)."""
    state = OptimizerState.init(model)
    log = TrainLog()
    s1 = config.stage1_steps
    if config.single_stage is not None:
        configure_stage(model, config.single_stage)
    else:
        configure_stage(model, Stage.STAGE1 if s1 > 0 else Stage.STAGE2)
    if on_configure is not None:
        on_configure(model)
    monitor = DivergenceMonitor()
    for step in range(config.total_steps):
        if config.single_stage is None and step == s1 and s1 > 0:
            configure_stage(model, Stage.STAGE2)
            if on_configure is not None:
                on_configure(model)
            log.stage_boundary = step
            if on_boundary is not None:
                on_boundary(model, state, step)
        loss, norm = train_step(model, next(stream), state, config, step)
        lr, wd = lr_schedule(step, config)
        record = StepRecord(step, model.config.stage.value, lr, wd, loss, norm)
        log.records.append(record)
        if on_record is not None:
            on_record(record)
        if monitor.update(loss) and log.divergence_step is None:
            log.divergence_step = step
            break
    return log


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_coordinates: int
    per_param: dict[str, float]
    ste_identity_ok: bool
    topk_gated_ok: bool
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance and self.ste_identity_ok and self.topk_gated_ok


def _relative_error(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-6)


def grad_check_ste(
    model: TransformerModel,
    batch: tuple[np.ndarray, np.ndarray],
    samples_per_tensor: int = 25,
    tolerance: float = 1e-4,
    fd_eps: float = 1e-5,
    seed: int = 0,
) -> GradCheckReport:
    """Verify the two halves of the gradient contract on a small model:
    with quantization fully disabled the tape gradients must match central
    finite differences coordinate-wise, and with quantization on the
    straight-through adjoints must be exact pass-throughs."""
    inputs, targets = batch
    configure_identity(model)
    params = model.named_parameters()
    for p in params.values():
        p.zero_grad()
    logits = model_forward(model, inputs)
    ad.cross_entropy(logits, targets).backward()
    analytic = {k: p.grad.copy() for k, p in params.items()}

    def loss_value() -> float:
        with ad.no_grad():
            return float(ad.cross_entropy(model_forward(model, inputs), targets).value)

    rng = np.random.default_rng(seed)
    per_param: dict[str, float] = {}
    worst = 0.0
    n_checked = 0
    for name, p in params.items():
        flat = p.value.reshape(-1)
        idx = rng.choice(flat.size, size=min(samples_per_tensor, flat.size), replace=False)
        worst_here = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + fd_eps
            up = loss_value()
            flat[i] = orig - fd_eps
            down = loss_value()
            flat[i] = orig
            fd = (up - down) / (2.0 * fd_eps)
            worst_here = max(worst_here, _relative_error(fd, float(analytic[name].reshape(-1)[i])))
            n_checked += 1
        per_param[name] = worst_here
        worst = max(worst, worst_here)

    # straight-through identity, checked through the live op
    x = ad.Var(rng.standard_normal((4, 8)))
    upstream = rng.standard_normal((4, 8))
    from .quantcore import QuantScheme, fake_quant

    out = ad.fake_quant_ste(x, lambda z: fake_quant(z, QuantScheme.int4()))
    ad.vsum(ad.mul(out, ad.Var(upstream))).backward()
    ste_ok = np.array_equal(x.grad, upstream)
    for kind in SchemeKind:
        g = rng.standard_normal((3, 5))
        ste_ok = ste_ok and (ste_backward(kind, g) is g)

    g = rng.standard_normal((6, 10))
    mask = topk_mask(rng.standard_normal((6, 10)), 0.5).mask
    gated = ste_backward("topk_mask", g, mask=mask)
    topk_ok = np.all(gated[~mask] == 0.0) and np.array_equal(gated[mask], g[mask])

    configure_stage(model, model.config.stage)
    return GradCheckReport(
        max_rel_error=worst,
        n_coordinates=n_checked,
        per_param=per_param,
        ste_identity_ok=bool(ste_ok),
        topk_gated_ok=bool(topk_ok),
        tolerance=tolerance,
    )
