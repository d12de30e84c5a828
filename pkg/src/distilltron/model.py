"""Tacotron2-style encoder / attention / decoder on top of :mod:`tensor`.

Shapes follow a batch-first convention: tokens ``(B, T)``, encoder memory
``(B, T, E)``, mel frames ``(B, frames, n_mels)``.  Each decoder step emits
``r`` frames, a stop logit and the hidden state used for distillation.

Three decoding modes share one step function and differ only in what is
fed back as the previous frame group:

* teacher forcing: the ground-truth group,
* free running: the model's own coarse (pre-post-net) prediction,
* scheduled sampling: a seeded per-utterance coin flip between the two.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .config import ModelConfig
from .data import Batch, TokenSequence, make_batch
from .errors import ConfigError, DimensionError, InputError, ParseError
from .tensor import Tape, Tensor

MASK_ENERGY = -1e9


# ---------------------------------------------------------------- parameters

def _xavier(rng, shape, fan_in, fan_out):
    limit = min(1.0, np.sqrt(6.0 / (fan_in + fan_out)))
    return rng.uniform(-limit, limit, size=shape)


def _lstm(rng, n_in, n_hidden):
    w = _xavier(rng, (n_in + n_hidden, 4 * n_hidden), n_in + n_hidden, n_hidden)
    b = np.zeros(4 * n_hidden)
    b[n_hidden:2 * n_hidden] = 1.0
    return w, b


def _conv(rng, c_out, c_in, width):
    return _xavier(rng, (c_out, c_in, width), c_in * width, c_out * width)


@dataclass
class ModelParams:
    """Learnable weights plus batch-norm running statistics."""

    config: ModelConfig
    weights: dict
    buffers: dict = field(default_factory=dict)

    def copy(self):
        return ModelParams(self.config,
                           {k: v.copy() for k, v in self.weights.items()},
                           {k: v.copy() for k, v in self.buffers.items()})

    def bind(self, tape: Tape | None = None, frozen=()):
        """Wrap weights as tensors; tracked on ``tape`` unless the name starts
        with one of the ``frozen`` prefixes."""
        out = {}
        for name, value in self.weights.items():
            if tape is not None and not name.startswith(tuple(frozen)):
                out[name] = tape.watch(value, name=name)
            else:
                out[name] = Tensor(value, name=name)
        return Bound(self.config, out, self.buffers)

    def checksum(self):
        h = hashlib.sha256()
        for name in sorted(self.weights):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.weights[name]).tobytes())
        return h.hexdigest()

    def n_parameters(self):
        return int(sum(v.size for v in self.weights.values()))

    def l2_penalty(self):
        return 0.5 * float(sum(np.sum(self.weights[k] ** 2) for k in sorted(self.weights)))


@dataclass
class Bound:
    config: ModelConfig
    t: dict
    buffers: dict

    def __getitem__(self, name):
        return self.t[name]


def init_params(cfg: ModelConfig, seed=0) -> ModelParams:
    cfg.validate()
    rng = np.random.default_rng(seed)
    h, m, r = cfg.hidden_dim, cfg.n_mels, cfg.r
    he = h // 2
    w, buf = {}, {}
    w["embedding"] = _xavier(rng, (cfg.vocab_size, h), cfg.vocab_size, h)

    def conv_block(prefix, c_out, c_in):
        w[f"{prefix}.w"] = _conv(rng, c_out, c_in, cfg.conv_width)
        w[f"{prefix}.b"] = np.zeros(c_out)
        w[f"{prefix}.gamma"] = np.ones(c_out)
        w[f"{prefix}.beta"] = np.zeros(c_out)
        buf[f"{prefix}.mean"] = np.zeros(c_out)
        buf[f"{prefix}.var"] = np.ones(c_out)

    for i in range(cfg.encoder_convs):
        conv_block(f"enc.conv{i}", h, h)
    w["enc.fw.w"], w["enc.fw.b"] = _lstm(rng, h, he)
    w["enc.bw.w"], w["enc.bw.b"] = _lstm(rng, h, he)
    w["att.query"] = _xavier(rng, (h, h), h, h)
    w["att.memory"] = _xavier(rng, (h, h), h, h)
    w["att.loc_conv"] = _conv(rng, cfg.location_filters, 2, cfg.location_width)
    w["att.loc_proj"] = _xavier(rng, (cfg.location_filters, h), cfg.location_filters, h)
    w["att.v"] = _xavier(rng, (h, 1), h, 1)
    w["prenet.0.w"] = _xavier(rng, (r * m, h), r * m, h)
    w["prenet.0.b"] = np.zeros(h)
    w["prenet.1.w"] = _xavier(rng, (h, h), h, h)
    w["prenet.1.b"] = np.zeros(h)
    w["dec.lstm1.w"], w["dec.lstm1.b"] = _lstm(rng, 2 * h, h)
    w["dec.lstm2.w"], w["dec.lstm2.b"] = _lstm(rng, 2 * h, h)
    w["proj.w"] = _xavier(rng, (2 * h, r * m), 2 * h, r * m)
    w["proj.b"] = np.zeros(r * m)
    w["stop.w"] = _xavier(rng, (2 * h, 1), 2 * h, 1)
    w["stop.b"] = np.zeros(1)
    chans = [m] + [h] * (cfg.postnet_convs - 1) + [m]
    for i in range(cfg.postnet_convs):
        conv_block(f"post.conv{i}", chans[i + 1], chans[i])
    return ModelParams(cfg, w, buf)


def check_compatible(a: ModelParams, b: ModelParams):
    for name, v in a.weights.items():
        if name not in b.weights or b.weights[name].shape != v.shape:
            raise ConfigError(f"parameter {name} differs between models")
    if set(a.weights) != set(b.weights):
        raise ConfigError("models have different parameter sets")


# ------------------------------------------------------------- run context

@dataclass
class RunContext:
    """Per-forward switches: training mode, dropout RNG, batch-norm stats."""

    training: bool = False
    rng: np.random.Generator | None = None
    bn_updates: dict = field(default_factory=dict)
    prenet_dropout: bool | None = None
    batch_stats: bool | None = None     # None: follow ``training``

    @classmethod
    def train(cls, seed):
        return cls(True, np.random.default_rng(seed))

    @classmethod
    def eval(cls, seed=None):
        return cls(False, None if seed is None else np.random.default_rng(seed))


def _dropout(x, rate, ctx: RunContext, force=False):
    if rate <= 0 or not (ctx.training or force):
        return x
    keep = (ctx.rng.random(x.shape) >= rate) / (1.0 - rate)
    return tn.mul(x, keep)


def _batch_norm(x, p: Bound, prefix, mask, ctx: RunContext):
    """Batch norm over (batch, time) restricted to unpadded positions."""
    cfg = p.config
    gamma = tn.reshape(p[f"{prefix}.gamma"], (-1, 1))
    beta = tn.reshape(p[f"{prefix}.beta"], (-1, 1))
    if ctx.training if ctx.batch_stats is None else ctx.batch_stats:
        n = float(mask.sum())
        mu = tn.mul(tn.sum(tn.mul(x, mask), axis=(0, 2), keepdims=True), 1.0 / n)
        xc = tn.sub(x, mu)
        var = tn.mul(tn.sum(tn.mul(tn.square(xc), mask), axis=(0, 2), keepdims=True), 1.0 / n)
        xhat = tn.mul(xc, tn.power(tn.add(var, cfg.bn_eps), -0.5))
        ctx.bn_updates[prefix] = (mu.data.reshape(-1), var.data.reshape(-1))
    else:
        mu = p.buffers[f"{prefix}.mean"][:, None]
        var = p.buffers[f"{prefix}.var"][:, None]
        xhat = tn.mul(tn.sub(x, mu), 1.0 / np.sqrt(var + cfg.bn_eps))
    return tn.add(tn.mul(xhat, gamma), beta)


def _conv_block(x, p, prefix, mask, ctx, activation):
    y = tn.conv1d(x, p[f"{prefix}.w"], p[f"{prefix}.b"])
    y = _batch_norm(y, p, prefix, mask, ctx)
    if activation is not None:
        y = activation(y)
    y = _dropout(y, p.config.conv_dropout, ctx)
    return tn.mul(y, mask)


def apply_bn_updates(params: ModelParams, updates: dict):
    """Fold batch statistics from a training forward into the running averages."""
    mom = params.config.bn_momentum
    for prefix, (mu, var) in sorted(updates.items()):
        params.buffers[f"{prefix}.mean"] = (1 - mom) * params.buffers[f"{prefix}.mean"] + mom * mu
        params.buffers[f"{prefix}.var"] = (1 - mom) * params.buffers[f"{prefix}.var"] + mom * var


# ------------------------------------------------------------------- encoder

@dataclass
class EncoderOutputs:
    memory: Tensor        # (B, T, E)
    mask: np.ndarray      # (B, T) bool

    @property
    def n_tokens(self):
        return self.memory.shape[1]


def _lstm_step(p, prefix, x, h, c):
    gates = tn.add(tn.matmul(tn.concat([x, h], axis=-1), p[f"{prefix}.w"]), p[f"{prefix}.b"])
    return tn.lstm_cell(gates, c)


def _bilstm(p, x, mask):
    """x: (B, T, H) -> (B, T, H) with each direction contributing H/2."""
    b, t, _ = x.shape
    he = p["enc.fw.b"].shape[0] // 4
    outs = {}
    for prefix, order in (("enc.fw", range(t)), ("enc.bw", reversed(range(t)))):
        h = Tensor(np.zeros((b, he)))
        c = Tensor(np.zeros((b, he)))
        seq = [None] * t
        for i in order:
            h_new, c_new = _lstm_step(p, prefix, x[:, i, :], h, c)
            m = mask[:, i:i + 1]
            if m.all():
                h, c = h_new, c_new
            else:
                h, c = tn.where(m, h_new, h), tn.where(m, c_new, c)
            seq[i] = h
        outs[prefix] = tn.stack(seq, axis=1)
    return tn.concat([outs["enc.fw"], outs["enc.bw"]], axis=-1)


def _encode(p: Bound, ids, token_mask, ctx: RunContext) -> EncoderOutputs:
    if ids.shape[1] < 1:
        raise InputError("cannot encode an empty token sequence")
    vocab = p["embedding"].shape[0]
    if ids.min() < 0 or ids.max() >= vocab:
        raise InputError(f"token ids outside vocabulary of size {vocab}")
    mask3 = token_mask[:, None, :].astype(np.float64)
    x = tn.mul(tn.transpose(tn.take(p["embedding"], ids), (0, 2, 1)), mask3)  # (B, H, T)
    for i in range(p.config.encoder_convs):
        x = _conv_block(x, p, f"enc.conv{i}", mask3, ctx, tn.relu)
    memory = _bilstm(p, tn.transpose(x, (0, 2, 1)), token_mask)
    return EncoderOutputs(memory, token_mask)


def _as_batch(x, y=None, r=2) -> Batch:
    if isinstance(x, Batch):
        return x
    if isinstance(x, TokenSequence):
        return make_batch([x], None if y is None else [y], r)
    raise InputError(f"expected a Batch or TokenSequence, got {type(x).__name__}")


def _bound(params) -> Bound:
    return params if isinstance(params, Bound) else params.bind()


def encode(x, params, ctx: RunContext | None = None) -> EncoderOutputs:
    """Encode a :class:`TokenSequence` or a :class:`Batch`."""
    p = _bound(params)
    b = _as_batch(x, r=p.config.r)
    return _encode(p, b.ids, b.token_mask, ctx or RunContext.eval())


# ----------------------------------------------------------------- attention

@dataclass
class AttentionState:
    weights: Tensor       # (B, T) previous step
    cumulative: Tensor    # (B, T)
    context: Tensor       # (B, E)

    @classmethod
    def initial(cls, memory: EncoderOutputs):
        b, t, e = memory.memory.shape
        first = np.zeros((b, t))
        first[:, 0] = 1.0
        return cls(Tensor(first), Tensor(first.copy()), Tensor(np.zeros((b, e))))


@dataclass
class _Memory:
    enc: EncoderOutputs
    keys: Tensor          # memory projected into attention space, (B, T, A)


def _prepare_memory(p, enc: EncoderOutputs) -> _Memory:
    return _Memory(enc, tn.matmul(enc.memory, p["att.memory"]))


def _attend(p: Bound, query, mem: _Memory, att: AttentionState):
    b, t = att.weights.shape
    loc = tn.conv1d(tn.stack([att.weights, att.cumulative], axis=1), p["att.loc_conv"])
    loc = tn.matmul(tn.transpose(loc, (0, 2, 1)), p["att.loc_proj"])       # (B, T, A)
    q = tn.reshape(tn.matmul(query, p["att.query"]), (b, 1, -1))
    energies = tn.reshape(tn.matmul(tn.tanh(tn.add(tn.add(q, mem.keys), loc)), p["att.v"]), (b, t))
    if not mem.enc.mask.all():
        energies = tn.where(mem.enc.mask, energies, MASK_ENERGY)
    weights = tn.softmax(energies)
    context = tn.reshape(tn.matmul(tn.reshape(weights, (b, 1, t)), mem.enc.memory), (b, -1))
    return context, weights


def attend(query, memory: EncoderOutputs, att: AttentionState, params):
    """One attention update; returns ``(context, new AttentionState)``."""
    p = _bound(params)
    context, weights = _attend(p, tn.as_tensor(query), _prepare_memory(p, memory), att)
    return context, AttentionState(weights, tn.add(att.cumulative, weights), context)


# ------------------------------------------------------------------- decoder

@dataclass
class DecoderState:
    h1: Tensor
    c1: Tensor
    h2: Tensor
    c2: Tensor
    attention: AttentionState
    prev_frame: Tensor

    @classmethod
    def initial(cls, p: Bound, memory: EncoderOutputs):
        cfg = p.config
        b = memory.memory.shape[0]
        z = lambda: Tensor(np.zeros((b, cfg.hidden_dim)))  # noqa: E731
        return cls(z(), z(), z(), z(), AttentionState.initial(memory),
                   Tensor(np.zeros((b, cfg.r * cfg.n_mels))))


def _prenet(p, x, ctx):
    force = bool(ctx.prenet_dropout if ctx.prenet_dropout is not None
                 else p.config.prenet_dropout_at_inference)
    rate = p.config.prenet_dropout
    for i in range(2):
        x = tn.relu(tn.add(tn.matmul(x, p[f"prenet.{i}.w"]), p[f"prenet.{i}.b"]))
        x = _dropout(x, rate, ctx, force=force)
    return x


def _step(p: Bound, ctx, mem: _Memory, state: DecoderState, prev_frame):
    cfg = p.config
    if prev_frame.shape[-1] != cfg.r * cfg.n_mels:
        raise DimensionError(
            f"previous frame group has {prev_frame.shape[-1]} values, expected {cfg.r * cfg.n_mels}")
    att = state.attention
    x = tn.concat([_prenet(p, prev_frame, ctx), att.context], axis=-1)
    h1, c1 = _lstm_step(p, "dec.lstm1", x, state.h1, state.c1)
    context, weights = _attend(p, h1, mem, att)
    h2, c2 = _lstm_step(p, "dec.lstm2", tn.concat([h1, context], axis=-1), state.h2, state.c2)
    out_in = tn.concat([h2, context], axis=-1)
    frames = tn.add(tn.matmul(out_in, p["proj.w"]), p["proj.b"])
    stop = tn.reshape(tn.add(tn.matmul(out_in, p["stop.w"]), p["stop.b"]), (-1,))
    new_att = AttentionState(weights, tn.add(att.cumulative, weights), context)
    new_state = DecoderState(h1, c1, h2, c2, new_att, frames)
    hidden = h2 if cfg.distill_layer == "lstm2" else h1
    return new_state, frames, stop, hidden


def decoder_step(state: DecoderState, prev_frame, memory: EncoderOutputs, params,
                 ctx: RunContext | None = None):
    """Single decoder step.

    Returns ``(new_state, frames (B, r, n_mels), stop_logit (B,), hidden (B, H))``.
    """
    p = _bound(params)
    ctx = ctx or RunContext.eval()
    new_state, frames, stop, hidden = _step(p, ctx, _prepare_memory(p, memory), state,
                                            tn.as_tensor(prev_frame))
    b = frames.shape[0]
    return new_state, tn.reshape(frames, (b, p.config.r, p.config.n_mels)), stop, hidden


@dataclass
class DecoderTrace:
    """Everything a decoding run produced.

    ``step_hidden`` holds one hidden state per decoder step; the per-frame
    view :attr:`hidden_states` repeats each one ``r`` times so its length
    matches the mel frame count.
    """

    step_hidden: Tensor          # (B, S, H)
    coarse: Tensor               # (B, S*r, n_mels)
    refined: Tensor              # (B, S*r, n_mels)
    stop_logits: Tensor          # (B, S)
    attention: np.ndarray        # (B, S, T)
    step_lengths: np.ndarray     # (B,)
    r: int
    feed_log: np.ndarray | None = None   # (B, S) True where ground truth was fed

    @property
    def n_steps(self):
        return self.stop_logits.shape[1]

    @property
    def hidden_states(self):
        return np.repeat(self.step_hidden.data, self.r, axis=1)

    @property
    def frame_lengths(self):
        return self.step_lengths * self.r

    @property
    def step_mask(self):
        return np.arange(self.n_steps)[None, :] < self.step_lengths[:, None]

    @property
    def frame_mask(self):
        return np.repeat(self.step_mask, self.r, axis=1)

    def mel(self, i=0, refined=True):
        """Trimmed numpy mel frames of utterance ``i``."""
        src = self.refined if refined else self.coarse
        return src.data[i, :self.frame_lengths[i]]

    def alignment(self, i=0, n_tokens=None):
        a = self.attention[i, :self.step_lengths[i]]
        return a if n_tokens is None else a[:, :n_tokens]


def _postnet(p, coarse, frame_mask, ctx):
    mask3 = frame_mask[:, None, :].astype(np.float64)
    x = tn.transpose(coarse, (0, 2, 1))
    n = p.config.postnet_convs
    for i in range(n):
        x = _conv_block(x, p, f"post.conv{i}", mask3, ctx, tn.tanh if i < n - 1 else None)
    return tn.add(coarse, tn.transpose(x, (0, 2, 1)))


def _decode(p: Bound, b: Batch, ctx: RunContext, feed, n_steps, stop_mode=False, hook=None):
    cfg = p.config
    enc = _encode(p, b.ids, b.token_mask, ctx)
    mem = _prepare_memory(p, enc)
    state = DecoderState.initial(p, enc)
    bsz = b.size
    frames_out, stops, hiddens, weights = [], [], [], []
    finished = np.zeros(bsz, dtype=bool)
    lengths = np.full(bsz, n_steps, dtype=np.int64)
    prev_pred = None
    for k in range(n_steps):
        prev = feed(k, prev_pred)
        state, frames, stop, hidden = _step(p, ctx, mem, state, prev)
        if hook is not None:
            frames = hook(k, frames)
        prev_pred = frames
        frames_out.append(frames)
        stops.append(stop)
        hiddens.append(hidden)
        weights.append(state.attention.weights.data)
        if stop_mode:
            now = (stop.data > 0) & ~finished    # sigmoid(logit) > 0.5
            lengths[now] = k + 1
            finished |= now
            if finished.all():
                break
    s = len(frames_out)
    if stop_mode:
        lengths = np.minimum(lengths, s)
    elif b.mel is not None:
        lengths = b.step_mask.sum(axis=1)
    coarse = tn.reshape(tn.stack(frames_out, axis=1), (bsz, s * cfg.r, cfg.n_mels))
    frame_mask = np.repeat(np.arange(s)[None, :] < lengths[:, None], cfg.r, axis=1)
    refined = _postnet(p, coarse, frame_mask, ctx)
    return DecoderTrace(tn.stack(hiddens, axis=1), coarse, refined, tn.stack(stops, axis=1),
                        np.stack(weights, axis=1), lengths, cfg.r)


def _go(p, b):
    return Tensor(np.zeros((b.size, p.config.r * p.config.n_mels)))


def _truth_groups(p, b: Batch):
    if b.mel is None:
        raise InputError("this decoding mode needs target mel frames")
    if b.mel.shape[-1] != p.config.n_mels:
        raise InputError(f"target mel has {b.mel.shape[-1]} channels, model expects {p.config.n_mels}")
    return b.mel.reshape(b.size, b.n_steps, p.config.r * p.config.n_mels)


def forward_teacher_forced(params, batch, ctx: RunContext | None = None, hook=None, mel=None):
    """Decode with the ground-truth previous frame group fed at every step."""
    p = _bound(params)
    b = _as_batch(batch, mel, p.config.r)
    groups = _truth_groups(p, b)
    go = _go(p, b)

    def feed(k, _pred):
        return go if k == 0 else Tensor(groups[:, k - 1])

    return _decode(p, b, ctx or RunContext.eval(), feed, b.n_steps, hook=hook)


def forward_free_running(params, batch, ctx: RunContext | None = None, max_steps=None,
                         hook=None, mel=None):
    """Decode feeding back the model's own coarse frames.

    Without ``max_steps`` the run is forced to the batch's target length so
    it lines up step for step with a teacher-forced trace; with
    ``max_steps`` it stops once every utterance's stop probability exceeds
    one half, or at ``max_steps``.
    """
    p = _bound(params)
    b = _as_batch(batch, mel, p.config.r)
    go = _go(p, b)

    def feed(k, pred):
        return go if k == 0 else pred

    if max_steps is None:
        _truth_groups(p, b)
        return _decode(p, b, ctx or RunContext.eval(), feed, b.n_steps, hook=hook)
    if max_steps < 1:
        raise InputError("max_steps must be >= 1")
    return _decode(p, b, ctx or RunContext.eval(), feed, int(max_steps), stop_mode=True, hook=hook)


def forward_scheduled(params, batch, p_teacher, seed=0, ctx: RunContext | None = None,
                      hook=None, mel=None):
    """Per step and utterance, feed ground truth with probability ``p_teacher``."""
    if not 0.0 <= p_teacher <= 1.0:
        raise InputError(f"p_teacher must lie in [0, 1], got {p_teacher}")
    p = _bound(params)
    b = _as_batch(batch, mel, p.config.r)
    groups = _truth_groups(p, b)
    go = _go(p, b)
    coins = np.random.default_rng(seed).random((b.n_steps, b.size)) < p_teacher

    def feed(k, pred):
        if k == 0:
            return go
        use = coins[k][:, None]
        if use.all():
            return Tensor(groups[:, k - 1])
        if not use.any():
            return pred
        return tn.where(use, groups[:, k - 1], pred)

    trace = _decode(p, b, ctx or RunContext.eval(), feed, b.n_steps, hook=hook)
    trace.feed_log = coins.T.copy()
    return trace


# --------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"DISTILLTRON-CKPT v1\n"


def save_checkpoint(path, params: ModelParams, step=0, opt_state=None, extra=None):
    """Write the versioned checkpoint container; returns the bytes written."""
    blob = checkpoint_bytes(params, step, opt_state, extra)
    with open(path, "wb") as fh:
        fh.write(blob)
    return blob


def checkpoint_bytes(params: ModelParams, step=0, opt_state=None, extra=None) -> bytes:
    import dataclasses

    entries = [(f"param/{k}", v) for k, v in sorted(params.weights.items())]
    entries += [(f"buffer/{k}", v) for k, v in sorted(params.buffers.items())]
    if opt_state is not None:
        entries += [(f"adam_m/{k}", v) for k, v in sorted(opt_state.m.items())]
        entries += [(f"adam_v/{k}", v) for k, v in sorted(opt_state.v.items())]
    index, chunks, offset = [], [], 0
    for name, arr in entries:
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "step": int(step),
        "config": dataclasses.asdict(params.config),
        "opt_step": None if opt_state is None else int(opt_state.step),
        "extra": extra or {},
        "tensors": index,
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    return CKPT_MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + b"".join(chunks)


@dataclass
class Checkpoint:
    params: ModelParams
    step: int
    opt_state: object
    extra: dict


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())


def parse_checkpoint(raw: bytes) -> Checkpoint:
    from .distill import OptState

    if not raw.startswith(CKPT_MAGIC):
        raise ParseError("not a DISTILLTRON-CKPT v1 file", 0)
    pos = len(CKPT_MAGIC)
    if len(raw) < pos + 8:
        raise ParseError("truncated checkpoint header", pos)
    (hlen,) = struct.unpack("<Q", raw[pos:pos + 8])
    pos += 8
    try:
        header = json.loads(raw[pos:pos + hlen])
    except ValueError:
        raise ParseError("checkpoint header is not valid JSON", pos) from None
    pos += hlen
    cfg = ModelConfig(**header["config"])
    weights, buffers, m, v = {}, {}, {}, {}
    for ent in header["tensors"]:
        count = int(np.prod(ent["shape"], dtype=np.int64))
        start = pos + ent["offset"]
        if start + 8 * count > len(raw):
            raise ParseError(f"tensor {ent['name']} runs past end of file", start)
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=start).astype(np.float64)
        arr = arr.reshape(ent["shape"])
        kind, _, name = ent["name"].partition("/")
        {"param": weights, "buffer": buffers, "adam_m": m, "adam_v": v}[kind][name] = arr
    opt = None
    if header.get("opt_step") is not None:
        opt = OptState(m, v, header["opt_step"])
    return Checkpoint(ModelParams(cfg, weights, buffers), header["step"], opt, header.get("extra", {}))
