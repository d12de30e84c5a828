"""Losses, optimiser and the teacher-student training procedure.

Training happens in two stages.  A teacher is first trained with teacher
forcing.  A student (warm-started from the teacher by default) then decodes
in free-running mode and is optimised on

    total = feature + lambda * distillation + stop_weight * stop + l2_weight * l2

where the distillation term pulls its per-step decoder hidden states towards
the frozen teacher's.  Scheduled-sampling and free-running baselines reuse
the same loop with the distillation term switched off.
"""

from __future__ import annotations

import logging
import math
import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .config import ModelConfig, TrainConfig
from .data import Batch, BatchStream, TokenSequence, make_batch
from .errors import ConfigError, ContractError, DimensionError, InputError, TrainingDiverged
from .model import (Bound, ModelParams, RunContext, apply_bn_updates, check_compatible,
                    forward_free_running, forward_scheduled, forward_teacher_forced,
                    init_params, load_checkpoint, save_checkpoint)
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)


# -------------------------------------------------------------------- losses

def feature_loss(coarse, refined, target, mask=None) -> Tensor:
    """Squared L2 frame error of both decoder outputs, per unmasked frame.

    ``coarse``/``refined``/``target`` are ``(..., frames, n_mels)``;
    ``mask`` is ``(..., frames)`` and is True for real frames.
    """
    coarse, refined = tn.as_tensor(coarse), tn.as_tensor(refined)
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if coarse.shape != target.shape or refined.shape != target.shape:
        raise DimensionError(
            f"prediction shapes {coarse.shape}/{refined.shape} differ from target {target.shape}")
    if mask is None:
        mask = np.ones(target.shape[:-1], dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        warnings.warn("feature_loss called with every frame masked", stacklevel=2)
        return Tensor(0.0)
    m = mask[..., None].astype(np.float64)
    total = tn.add(tn.sum(tn.mul(tn.square(tn.sub(coarse, target)), m)),
                   tn.sum(tn.mul(tn.square(tn.sub(refined, target)), m)))
    return tn.mul(total, 1.0 / n)


def distillation_loss(teacher_hidden, student_hidden, mask=None) -> Tensor:
    """Mean over steps of the squared distance between hidden states.

    The teacher side is always treated as a constant.  Inputs are
    ``(steps, H)`` or ``(B, steps, H)``; ``mask`` marks real steps.
    """
    s = np.asarray(teacher_hidden.data if isinstance(teacher_hidden, Tensor) else teacher_hidden,
                   dtype=np.float64)
    s_hat = tn.as_tensor(student_hidden)
    if s.shape[:-1] != s_hat.shape[:-1]:
        raise ContractError(
            f"teacher has {s.shape[:-1]} steps but student has {s_hat.shape[:-1]}; "
            "the student must run at forced length")
    if s.shape != s_hat.shape:
        raise DimensionError(f"hidden sizes differ: {s.shape} vs {s_hat.shape}")
    if mask is None:
        mask = np.ones(s.shape[:-1], dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        return Tensor(0.0)
    sq = tn.sum(tn.square(tn.sub(s_hat, s)), axis=-1)
    return tn.mul(tn.sum(tn.mul(sq, mask.astype(np.float64))), 1.0 / n)


def stop_token_loss(logits, targets, mask=None, pos_weight=5.0) -> Tensor:
    """Weighted binary cross-entropy on stop logits, mean over unmasked steps."""
    logits = tn.as_tensor(logits)
    targets = np.asarray(targets, dtype=np.float64)
    if logits.shape != targets.shape:
        raise DimensionError(f"logits {logits.shape} and targets {targets.shape} differ")
    if not np.all((targets == 0) | (targets == 1)):
        raise InputError("stop targets must be 0 or 1")
    if mask is None:
        mask = np.ones(targets.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        return Tensor(0.0)
    per = tn.add(tn.mul(tn.softplus(tn.mul(logits, -1.0)), pos_weight * targets),
                 tn.mul(tn.softplus(logits), 1.0 - targets))
    return tn.mul(tn.sum(tn.mul(per, mask.astype(np.float64))), 1.0 / n)


@dataclass
class LossBreakdown:
    feature: float
    distillation: float = 0.0
    stop: float = 0.0
    l2: float = 0.0
    distill_weight: float = 1.0
    stop_weight: float = 1.0
    l2_weight: float = 0.0

    @property
    def total(self):
        return (self.feature + self.distill_weight * self.distillation
                + self.stop_weight * self.stop + self.l2_weight * self.l2)


def total_loss(feature, distillation=None, stop=None, distill_weight=1.0, stop_weight=1.0) -> Tensor:
    """Feature loss plus weighted distillation and stop terms.

    The L2 penalty is applied to the gradients directly in :func:`adam_step`
    and only enters the logged total.  A zero ``distill_weight`` leaves the
    distillation term off the tape entirely.
    """
    if distill_weight < 0:
        raise ConfigError("distill_weight must be >= 0")
    out = tn.as_tensor(feature)
    if distillation is not None and distill_weight != 0:
        out = tn.add(out, tn.mul(distillation, distill_weight))
    if stop is not None and stop_weight != 0:
        out = tn.add(out, tn.mul(stop, stop_weight))
    return out


# ------------------------------------------------------------------ schedule

def lr_schedule(step, cfg: TrainConfig) -> float:
    """Constant, then geometric decay from ``lr_start`` to ``lr_end``."""
    if step < cfg.decay_start_step:
        return cfg.lr_start
    frac = (step - cfg.decay_start_step) / (cfg.total_steps - cfg.decay_start_step)
    if frac >= 1.0:
        return cfg.lr_end
    return max(cfg.lr_end, cfg.lr_start * (cfg.lr_end / cfg.lr_start) ** frac)


def ss_probability(step, cfg: TrainConfig) -> float:
    """Linear teacher-forcing probability anneal for the scheduled-sampling baseline."""
    frac = min(1.0, step / max(1, cfg.total_steps - 1))
    return cfg.ss_p_start + (cfg.ss_p_end - cfg.ss_p_start) * frac


# ----------------------------------------------------------------- optimiser

@dataclass
class OptState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros(cls, params: ModelParams):
        return cls({k: np.zeros_like(v) for k, v in params.weights.items()},
                   {k: np.zeros_like(v) for k, v in params.weights.items()}, 0)


class NonFiniteGradient(ContractError):
    def __init__(self, name):
        super().__init__(f"non-finite gradient for parameter {name}")
        self.name = name


def clip_by_global_norm(grads: dict, max_norm: float):
    if max_norm <= 0:
        return grads, None
    norm = math.sqrt(sum(float(np.sum(grads[k] ** 2)) for k in sorted(grads)))
    if norm > max_norm:
        scale = max_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


def adam_step(params: ModelParams, grads: dict, opt: OptState, lr: float, cfg: TrainConfig):
    """Adam with bias correction; L2 enters as ``l2_weight * theta`` in the gradient.

    Parameters missing from ``grads`` (frozen ones) are left alone entirely.
    Returns new ``(params, opt_state)``; the inputs are left untouched.
    """
    for name in sorted(grads):
        if not np.all(np.isfinite(grads[name])):
            raise NonFiniteGradient(name)
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    t = opt.step + 1
    new = params.copy()
    m, v = dict(opt.m), dict(opt.v)
    for name, theta in params.weights.items():
        g = grads.get(name)
        if g is None:
            continue
        if cfg.l2_weight:
            g = g + cfg.l2_weight * theta
        m[name] = b1 * opt.m[name] + (1 - b1) * g
        v[name] = b2 * opt.v[name] + (1 - b2) * g * g
        m_hat = m[name] / (1 - b1 ** t)
        v_hat = v[name] / (1 - b2 ** t)
        new.weights[name] = theta - lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
    return new, OptState(m, v, t)


# ------------------------------------------------------------------ training

@dataclass
class LogEntry:
    step: int
    lr: float
    losses: LossBreakdown
    p_teacher: float

    def line(self):
        lb = self.losses
        return (f"step={self.step} lr={self.lr!r} loss_f={lb.feature!r} loss_d={lb.distillation!r} "
                f"loss_stop={lb.stop!r} loss_total={lb.total!r} l2={lb.l2!r} "
                f"p_teacher={self.p_teacher!r}")


def parse_log_line(line: str) -> dict:
    out = {}
    for part in line.split():
        key, _, value = part.partition("=")
        out[key] = int(value) if key == "step" else float(value)
    return out


@dataclass
class TrainResult:
    params: ModelParams
    log: list = field(default_factory=list)
    opt_state: OptState | None = None

    def __iter__(self):
        # unpack as (params, log)
        return iter((self.params, self.log))


ROLES = ("teacher", "student", "baseline-ss", "baseline-fr")


def _weights_for(role, cfg: TrainConfig):
    lam = cfg.distill_weight if role == "student" else 0.0
    return lam, cfg.stop_weight, cfg.l2_weight


def _log_header(role, cfg: TrainConfig, seed):
    lam, sw, l2w = _weights_for(role, cfg)
    return (f"# role={role} seed={seed} lambda={lam!r} stop_weight={sw!r} l2_weight={l2w!r} "
            f"total_steps={cfg.total_steps}")


def train_step(role, params: ModelParams, batch: Batch, step, cfg: TrainConfig, seed,
               teacher: ModelParams | None = None):
    """Forward + backward for one batch.

    Returns ``(grads, LossBreakdown, p_teacher, bn_updates)``; parameters are
    not modified.
    """
    tape = Tape()
    frozen = ("embedding", "enc.") if role == "student" and cfg.freeze_student_encoder else ()
    p = params.bind(tape, frozen=frozen)
    ctx = RunContext.train([seed, step])
    lam, sw, l2w = _weights_for(role, cfg)
    distill = None
    if role == "teacher":
        p_teacher = 1.0
        trace = forward_teacher_forced(p, batch, ctx)
    elif role == "baseline-ss":
        p_teacher = ss_probability(step, cfg)
        trace = forward_scheduled(p, batch, p_teacher, seed=[seed, step, 1], ctx=ctx)
    elif role in ("student", "baseline-fr"):
        p_teacher = 0.0
        trace = forward_free_running(p, batch, ctx)
        if role == "student":
            target = forward_teacher_forced(teacher, batch, RunContext.eval())
            distill = distillation_loss(target.step_hidden, trace.step_hidden, batch.step_mask)
    else:
        raise ConfigError(f"unknown training role {role!r}")
    feat = feature_loss(trace.coarse, trace.refined, batch.mel, batch.frame_mask)
    # every decoder step of the padded batch: steps past an utterance's end are
    # the positive examples that teach the stop token to fire once it is done
    stop = stop_token_loss(trace.stop_logits, batch.stop_targets(), None, cfg.stop_pos_weight)
    loss = total_loss(feat, distill, stop, lam, sw)
    tape.backward(loss)
    grads = {name: t.grad for name, t in p.t.items() if t.grad is not None}
    parts = LossBreakdown(feat.item(), 0.0 if distill is None else distill.item(), stop.item(),
                          params.l2_penalty(), lam, sw, l2w)
    return grads, parts, p_teacher, ctx.bn_updates


def _latest_checkpoint(ckpt_dir):
    path = os.path.join(ckpt_dir, "latest.ckpt")
    return path if os.path.exists(path) else None


def train(role, corpus_split, model_cfg: ModelConfig, cfg: TrainConfig, seed=None,
          init: ModelParams | None = None, teacher: ModelParams | None = None,
          log_path=None, ckpt_dir=None, resume=False, progress=None) -> TrainResult:
    """Generic training loop shared by every role.

    ``corpus_split`` is a list of utterances.  With ``ckpt_dir`` a checkpoint
    is written every ``cfg.checkpoint_every`` steps plus a final one, and
    ``resume`` continues from ``latest.ckpt`` when present.
    """
    cfg.validate()
    seed = cfg.seed if seed is None else seed
    if not corpus_split:
        raise InputError("training split is empty")
    if role == "student":
        if teacher is None:
            raise ConfigError("student training needs a teacher")
        check_compatible(teacher, init or teacher)
    stream = BatchStream(corpus_split, cfg.batch_size, seed, model_cfg.r)
    if init is not None:
        params = init.copy()
    elif role == "student" and cfg.student_init == "teacher":
        params = teacher.copy()
    else:
        params = init_params(model_cfg, seed)
    if teacher is not None:
        check_compatible(teacher, params)
    opt = OptState.zeros(params)
    start = 0
    entries = []
    if resume and ckpt_dir and _latest_checkpoint(ckpt_dir):
        ck = load_checkpoint(_latest_checkpoint(ckpt_dir))
        params, opt, start = ck.params, ck.opt_state or OptState.zeros(ck.params), ck.step
        log.info("resuming %s from step %d", role, start)
    if log_path:
        kept = []
        if start and os.path.exists(log_path):
            with open(log_path) as fh:
                for line in fh:
                    if line.startswith("#") or parse_log_line(line)["step"] < start:
                        kept.append(line)
        with open(log_path, "w") as fh:
            fh.writelines(kept or [_log_header(role, cfg, seed) + "\n"])
    if ckpt_dir:
        os.makedirs(ckpt_dir, exist_ok=True)
    teacher_sum = teacher.checksum() if teacher is not None else None

    for step in range(start, cfg.total_steps):
        batch = stream.batch_at(step)
        lr = lr_schedule(step, cfg)
        grads, parts, p_teacher, bn = train_step(role, params, batch, step, cfg, seed, teacher)
        if not math.isfinite(parts.total):
            raise TrainingDiverged(f"{role}: loss became non-finite at step {step}", step, params)
        grads, _ = clip_by_global_norm(grads, cfg.grad_clip)
        try:
            new_params, opt = adam_step(params, grads, opt, lr, cfg)
        except ContractError as exc:
            raise TrainingDiverged(f"{role}: {exc} at step {step}", step, params) from exc
        apply_bn_updates(new_params, bn)
        params = new_params
        entry = LogEntry(step, lr, parts, p_teacher)
        entries.append(entry)
        if log_path:
            with open(log_path, "a") as fh:
                fh.write(entry.line() + "\n")
        if progress is not None:
            progress(entry)
        done = step + 1
        if teacher is not None and done % stream.per_epoch == 0 and teacher.checksum() != teacher_sum:
            raise ContractError("teacher parameters changed during student training")
        if ckpt_dir and (done % cfg.checkpoint_every == 0 or done == cfg.total_steps):
            save_checkpoint(os.path.join(ckpt_dir, "latest.ckpt"), params, done, opt,
                            {"role": role, "seed": seed})
            if done % cfg.checkpoint_every == 0:
                save_checkpoint(os.path.join(ckpt_dir, f"step{done:06d}.ckpt"), params, done, opt,
                                {"role": role, "seed": seed})
    if teacher is not None and teacher.checksum() != teacher_sum:
        raise ContractError("teacher parameters changed during student training")
    return TrainResult(params, entries, opt)


def train_teacher(corpus_split, model_cfg, cfg, seed=None, **kw) -> TrainResult:
    """Step 1: teacher-forced pre-training."""
    return train("teacher", corpus_split, model_cfg, cfg, seed, **kw)


def train_student(corpus_split, teacher: ModelParams, cfg, seed=None, **kw) -> TrainResult:
    """Step 2: free-running student distilled from the frozen ``teacher``."""
    return train("student", corpus_split, teacher.config, cfg, seed, teacher=teacher, **kw)


def train_baseline(mode, corpus_split, model_cfg, cfg, seed=None, **kw) -> TrainResult:
    """``mode`` is ``"SS"`` (scheduled sampling) or ``"FR"`` (free running)."""
    role = {"SS": "baseline-ss", "FR": "baseline-fr"}.get(str(mode).upper())
    if role is None:
        raise ConfigError(f"baseline mode must be SS or FR, got {mode!r}")
    return train(role, corpus_split, model_cfg, cfg, seed, **kw)


# ------------------------------------------------------------ gradient check

MINIATURE = ModelConfig(vocab_size=6, n_mels=4, r=2, hidden_dim=8, location_filters=4,
                        location_width=3, conv_width=3)


def miniature_problem(seed=0, n_tokens=4, n_frames=8, cfg: ModelConfig = MINIATURE,
                      margin=1e-3, max_tries=50):
    """Random student, teacher and one-utterance batch at the miniature size."""
    rng = np.random.default_rng([seed, 7])
    ids = rng.integers(1, cfg.vocab_size, size=n_tokens)
    mel = rng.normal(size=(n_frames, cfg.n_mels))
    b = make_batch([TokenSequence(tuple(int(i) for i in ids), cfg.vocab_size)], [mel], r=cfg.r)
    base, teacher_base = init_params(cfg, seed), init_params(cfg, seed + 1)
    # zero-initialised biases put every relu exactly on its kink at the go
    # frame; jitter until all relu inputs sit at least ``margin`` away
    best = None
    for _ in range(max_tries):
        student, teacher = _jitter(base, rng), _jitter(teacher_base, rng)
        with tn.kink_margin() as probe:
            training_objective(student.bind(), b, teacher, TrainConfig(), seed)
        if best is None or probe[0] > best[0]:
            best = (probe[0], student, teacher)
        if probe[0] >= margin:
            break
    return best[1], best[2], b


def _jitter(params: ModelParams, rng, scale=0.1):
    out = params.copy()
    for name in sorted(out.weights):
        out.weights[name] = out.weights[name] + scale * rng.normal(size=out.weights[name].shape)
    for name in sorted(out.buffers):
        shift = scale * rng.normal(size=out.buffers[name].shape)
        out.buffers[name] = out.buffers[name] + (np.abs(shift) if name.endswith(".var") else shift)
    return out


def training_objective(p: Bound, b: Batch, teacher: ModelParams, cfg: TrainConfig, seed=0,
                       batch_stats=False):
    """Sum of the teacher-forced, scheduled and distilled free-running training
    losses for bound parameters ``p``, dropout on.

    The L2 term is left out: its gradient is applied analytically by
    :func:`adam_step`, never through the tape.  Dropout masks and sampling
    coins come from fixed seeds, so the value is a deterministic function of
    the weights.  ``batch_stats`` switches batch norm from running to
    per-batch statistics.
    """
    stop_targets = b.stop_targets()
    target = forward_teacher_forced(teacher, b, RunContext.eval()).step_hidden
    total = None
    for k, mode in enumerate(("tf", "ss", "fr")):
        ctx = RunContext.train([seed, k])
        ctx.batch_stats = batch_stats
        if mode == "tf":
            trace = forward_teacher_forced(p, b, ctx)
        elif mode == "ss":
            trace = forward_scheduled(p, b, 0.5, seed=[seed, 3], ctx=ctx)
        else:
            trace = forward_free_running(p, b, ctx)
        feat = feature_loss(trace.coarse, trace.refined, b.mel, b.frame_mask)
        stop = stop_token_loss(trace.stop_logits, stop_targets, None, cfg.stop_pos_weight)
        distill = (distillation_loss(target, trace.step_hidden, b.step_mask)
                   if mode == "fr" else None)
        part = total_loss(feat, distill, stop, cfg.distill_weight, cfg.stop_weight)
        total = part if total is None else tn.add(total, part)
    return total


def prenorm_biases(params: ModelParams):
    """Names of conv biases that feed a batch-norm layer."""
    return sorted(n for n in params.weights
                  if n.endswith(".b") and n[:-2] + ".gamma" in params.weights)


def miniature_grad_check(seed=0, eps=1e-4, coords=None, cfg: TrainConfig | None = None,
                         batch_stats=False):
    """Finite-difference check of every parameter group through the whole
    training objective at the miniature size.

    With ``batch_stats`` the biases feeding a norm layer are held fixed:
    per-batch normalisation cancels them, so their true gradient is
    identically zero and a finite difference of it is pure rounding noise.
    :func:`prenorm_bias_gradient` checks that case directly.
    """
    cfg = cfg or TrainConfig()
    student, teacher, b = miniature_problem(seed)
    fixed = set(prenorm_biases(student)) if batch_stats else set()
    free = {k: v for k, v in student.weights.items() if k not in fixed}

    def f(d):
        weights = {**{k: Tensor(student.weights[k]) for k in fixed}, **d}
        return training_objective(Bound(student.config, weights, student.buffers), b, teacher,
                                  cfg, seed, batch_stats=batch_stats)

    return tn.grad_check(f, free, eps=eps, coords=coords, seed=seed)


def prenorm_bias_gradient(seed=0, cfg: TrainConfig | None = None) -> float:
    """Largest analytic gradient on a pre-norm bias under batch statistics
    (zero up to rounding)."""
    cfg = cfg or TrainConfig()
    student, teacher, b = miniature_problem(seed)
    tape = Tape()
    p = student.bind(tape)
    tape.backward(training_objective(p, b, teacher, cfg, seed, batch_stats=True))
    return max(float(np.max(np.abs(p[n].grad))) for n in prenorm_biases(student))
