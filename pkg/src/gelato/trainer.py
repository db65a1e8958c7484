"""The optimization loop.

AdamW with linear warmup and global-norm clipping; each batch is drawn from
a single mixture source; the freeze scope decides exactly which parameters
train while everything else stays bitwise frozen (verified by hash at every
eval interval). A run may have a second stage that widens the scope and
restarts the optimizer moments at a lower learning rate, continuing from the
stage-one weights.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .embedder import embed_raw
from .errors import (
    ConfigurationError,
    DimensionError,
    ModalityUnavailableError,
    NumericError,
)
from .loss import ContrastiveBatch, matryoshka_loss
from .numerics import ParamSet, backward, clip_global_norm, global_grad_norm, stack_rows
from .profiles import DELIMITER_NAMES, ModelProfile
from .projectors import delimiter_trainable
from .registry import ModelBundle
from .sequencer import InputItem, item_modalities

SCOPE_KINDS = (
    "projector_only",
    "projector_plus_fc1",
    "projector_plus_encoder",
    "audio_projector_only",
    "audio_projector_plus_encoder",
    "custom",
)


@dataclass(frozen=True)
class FreezeScope:
    """Named selector over the parameter set. Custom entries ending in '/'
    match by prefix, '*' matches everything, anything else must name an
    existing parameter exactly."""

    kind: str
    names: tuple = ()

    def __post_init__(self):
        if self.kind not in SCOPE_KINDS:
            raise ConfigurationError(f"unknown scope {self.kind!r}; expected one of {SCOPE_KINDS}")
        if self.kind == "custom" and not self.names:
            raise ConfigurationError("custom scope needs at least one name or prefix")

    @staticmethod
    def custom(*names) -> "FreezeScope":
        return FreezeScope("custom", tuple(names))

    def describe(self) -> str:
        if self.kind == "custom":
            return "custom:" + ",".join(self.names)
        return self.kind

    def resolve(self, params: ParamSet, profile: ModelProfile) -> list:
        """Exact parameter names this scope flips to trainable."""
        released = ["vproj/fc2/W", "vproj/fc2/b", "aproj/fc/W", "aproj/fc/b"]
        released += [
            f"delim/{n}" for n in DELIMITER_NAMES if delimiter_trainable(profile, n)
        ]

        if self.kind == "projector_only":
            wanted = released
        elif self.kind == "projector_plus_fc1":
            wanted = released + ["vproj/fc1/"]
        elif self.kind == "projector_plus_encoder":
            wanted = released + ["vproj/fc1/", "vision/"]
        elif self.kind == "audio_projector_only":
            wanted = ["aproj/fc/W", "aproj/fc/b"]
        elif self.kind == "audio_projector_plus_encoder":
            wanted = ["aproj/fc/W", "aproj/fc/b", "audio/"]
        else:
            wanted = list(self.names)

        out = []
        all_names = params.names()
        for entry in wanted:
            if entry == "*":
                out.extend(all_names)
            elif entry.endswith("/"):
                out.extend(n for n in all_names if n.startswith(entry))
            elif entry in params:
                out.append(entry)
            elif self.kind == "custom":
                raise ConfigurationError(f"scope names unknown parameter {entry!r}")
            # named scopes silently skip parts absent from a modality-gated bundle
        return sorted(set(out))


def full_scope() -> FreezeScope:
    return FreezeScope.custom("*")


@dataclass
class Stage2Config:
    scope: FreezeScope
    lr_max: float
    steps: int
    warmup_steps: int = 0


@dataclass
class TrainConfig:
    lr_max: float = 2e-4
    warmup_steps: int = 500
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    eps: float = 1e-8
    max_grad_norm: float = 1.0
    batch_size: int = 256
    steps: int = 15000
    tau: float = 0.02
    k_set: Optional[tuple] = None        # None: use the profile's set
    seed: int = 0
    scope: FreezeScope = field(default_factory=lambda: FreezeScope("projector_only"))
    stage2: Optional[Stage2Config] = None
    eval_interval: int = 100


# ----------------------------------------------------------------- mixture

@dataclass
class DataSource:
    name: str
    pairs: list   # of (InputItem, InputItem)


@dataclass
class MixtureSpec:
    sources: list  # of (DataSource, weight)

    def __post_init__(self):
        if not self.sources:
            raise ConfigurationError("mixture has no sources")
        weights = np.array([float(w) for _, w in self.sources])
        if (weights < 0).any() or weights.sum() <= 0:
            raise ConfigurationError("mixture needs non-negative weights with a positive sum")
        self._weights = weights / weights.sum()

    def weights(self) -> np.ndarray:
        return self._weights

    def modalities(self) -> set:
        out = set()
        for src, _ in self.sources:
            for left, right in src.pairs:
                out |= item_modalities(left) | item_modalities(right)
        return out


@dataclass
class PairBatch:
    source: str
    pairs: list


def sample_batch(mix: MixtureSpec, rng: np.random.Generator, batch_size: int) -> PairBatch:
    """Draw one source by mixture weight, then batch_size pairs from it
    uniformly without replacement (with replacement when the source is
    smaller than the batch)."""
    src_idx = int(rng.choice(len(mix.sources), p=mix.weights()))
    source, _ = mix.sources[src_idx]
    n = len(source.pairs)
    if n == 0:
        raise ConfigurationError(f"source {source.name!r} has no pairs")
    replace = n < batch_size
    idx = rng.choice(n, size=batch_size, replace=replace)
    return PairBatch(source=source.name, pairs=[source.pairs[i] for i in idx])


# --------------------------------------------------------------- optimizer

def lr_at(step: int, lr_max: float, warmup_steps: int) -> float:
    """Linear ramp from one warmup quantum, then flat (no decay)."""
    if step < 0:
        raise ConfigurationError(f"negative step {step}")
    if warmup_steps > 0 and step < warmup_steps:
        return lr_max * (step + 1) / warmup_steps
    return lr_max


@dataclass
class OptState:
    m: dict
    v: dict
    t: int = 0

    @staticmethod
    def init(params: ParamSet) -> "OptState":
        names = params.trainable_names()
        return OptState(
            m={n: np.zeros_like(params[n].value) for n in names},
            v={n: np.zeros_like(params[n].value) for n in names},
        )


def adamw_step(params: ParamSet, grads: dict, state: OptState, lr: float,
               cfg: TrainConfig) -> None:
    """One decoupled-weight-decay step over exactly the trainable set."""
    trainable = set(params.trainable_names())
    if set(grads) != trainable or set(state.m) != trainable:
        raise ConfigurationError(
            f"gradients/state must cover exactly the trainable set "
            f"({sorted(trainable ^ set(grads))} mismatched)"
        )
    state.t += 1
    bc1 = 1.0 - cfg.beta1 ** state.t
    bc2 = 1.0 - cfg.beta2 ** state.t
    for name in sorted(trainable):
        p = params[name].value
        g = grads[name]
        if g.shape != p.shape:
            raise DimensionError(f"gradient shape {g.shape} != param shape {p.shape} for {name!r}")
        if cfg.weight_decay:
            p -= lr * cfg.weight_decay * p
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)


# ------------------------------------------------------------ training loop

@dataclass
class TraceRow:
    step: int
    source: str
    lr: float
    loss: float
    grad_norm_pre_clip: float


@dataclass
class TrainResult:
    bundle: ModelBundle
    trace: list
    stage_starts: list  # global step index where each stage began


def write_trace(path: str, trace: list) -> None:
    with open(path, "w") as f:
        f.write("step\tsource\tlr\tloss\tgrad_norm_pre_clip\n")
        for row in trace:
            f.write(
                f"{row.step}\t{row.source}\t{row.lr:.10g}\t{row.loss:.10g}"
                f"\t{row.grad_norm_pre_clip:.10g}\n"
            )


def _train_step(bundle: ModelBundle, batch: PairBatch, k_set, cfg: TrainConfig,
                opt: OptState, lr: float):
    params = bundle.params
    leaves = params.make_leaves()
    left_rows = [embed_raw(left, bundle, leaves) for left, _ in batch.pairs]
    right_rows = [embed_raw(right, bundle, leaves) for _, right in batch.pairs]
    loss = matryoshka_loss(
        ContrastiveBatch(stack_rows(left_rows), stack_rows(right_rows), cfg.tau, k_set)
    )
    loss_value = float(loss.value)
    if not np.isfinite(loss_value):
        return loss_value, 0.0
    backward(loss)
    grads = {}
    for name in params.trainable_names():
        g = leaves[name].grad
        grads[name] = g if g is not None else np.zeros_like(params[name].value)
    pre_norm = global_grad_norm(grads)
    clipped, _ = clip_global_norm(grads, cfg.max_grad_norm)
    adamw_step(params, clipped, opt, lr, cfg)
    return loss_value, pre_norm


def _verify_frozen(params: ParamSet, baseline: dict, step: int) -> None:
    current = params.tensor_hashes(baseline.keys())
    changed = [n for n, h in baseline.items() if current[n] != h]
    if changed:
        raise NumericError(f"frozen parameters changed by step {step}: {changed[:3]}")


def train(bundle: ModelBundle, data: MixtureSpec, cfg: TrainConfig) -> TrainResult:
    """Run the configured steps (plus the optional second stage) in place on
    the bundle; returns it with the per-step trace."""
    profile = bundle.profile
    k_set = tuple(cfg.k_set) if cfg.k_set else profile.k_set

    missing = data.modalities() - bundle.loaded_modalities()
    if missing:
        raise ModalityUnavailableError(
            f"data contains {sorted(missing)} items but bundle modality is {bundle.modality!r}"
        )

    rng = np.random.default_rng([cfg.seed, 9])
    stages = [(cfg.scope, cfg.lr_max, cfg.warmup_steps, cfg.steps)]
    if cfg.stage2 is not None:
        s2 = cfg.stage2
        stages.append((s2.scope, s2.lr_max, s2.warmup_steps, s2.steps))

    trace = []
    stage_starts = []
    global_step = 0
    for scope, lr_max, warmup, steps in stages:
        stage_starts.append(global_step)
        names = scope.resolve(bundle.params, profile)
        if not names:
            raise ConfigurationError(f"scope {scope.describe()!r} selects no parameters")
        bundle.params.set_trainable(names)
        frozen_baseline = bundle.params.tensor_hashes(bundle.params.frozen_names())
        opt = OptState.init(bundle.params)  # fresh moments per stage

        for local_step in range(steps):
            batch = sample_batch(data, rng, cfg.batch_size)
            lr = lr_at(local_step, lr_max, warmup)
            loss_value, pre_norm = _train_step(bundle, batch, k_set, cfg, opt, lr)
            if not np.isfinite(loss_value):
                raise NumericError(
                    f"non-finite loss at step {global_step} on source {batch.source!r}"
                )
            trace.append(TraceRow(global_step, batch.source, lr, loss_value, pre_norm))
            global_step += 1
            if cfg.eval_interval and global_step % cfg.eval_interval == 0:
                _verify_frozen(bundle.params, frozen_baseline, global_step)
        _verify_frozen(bundle.params, frozen_baseline, global_step)

    bundle.manifest["scope_used"] = cfg.scope.describe()
    bundle.manifest["creation_step"] = global_step
    return TrainResult(bundle=bundle, trace=trace, stage_starts=stage_starts)


# ---------------------------------------------------------------- benchmark

@dataclass
class EfficiencyRow:
    scope: str
    updated_params: int
    seconds_per_step: float
    minutes_for_budget: float


def measure_efficiency(bundle: ModelBundle, data: MixtureSpec, scopes: list,
                       cfg: TrainConfig, warmup_steps: int = 10,
                       timed_steps: int = 50) -> list:
    """Wall-clock seconds per optimizer step and exact updated-parameter
    counts for each (name, scope) pair, on identical data and batch size.
    Each scope trains a fresh copy of the bundle."""
    rows = []
    for name, scope in scopes:
        work = bundle.copy()
        trainable = scope.resolve(work.params, work.profile)
        if not trainable:
            raise ConfigurationError(f"scope {name!r} selects no parameters")
        work.params.set_trainable(trainable)
        updated = sum(work.params[n].value.size for n in trainable)
        opt = OptState.init(work.params)
        rng = np.random.default_rng([cfg.seed, 23])

        for step in range(warmup_steps + timed_steps):
            if step == warmup_steps:
                t0 = time.perf_counter()
            batch = sample_batch(data, rng, cfg.batch_size)
            _train_step(work, batch, cfg.k_set or work.profile.k_set, cfg, opt,
                        lr_at(step, cfg.lr_max, cfg.warmup_steps))
        elapsed = time.perf_counter() - t0

        per_step = elapsed / timed_steps
        rows.append(EfficiencyRow(
            scope=name,
            updated_params=updated,
            seconds_per_step=per_step,
            minutes_for_budget=per_step * cfg.steps / 60.0,
        ))
    return rows


def write_efficiency_table(path: str, rows: list) -> None:
    with open(path, "w") as f:
        f.write("scope\tupdated_params\tseconds_per_step\tminutes_for_budget\n")
        for r in rows:
            f.write(
                f"{r.scope}\t{r.updated_params}\t{r.seconds_per_step:.6f}"
                f"\t{r.minutes_for_budget:.3f}\n"
            )
