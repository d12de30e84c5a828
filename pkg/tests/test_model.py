import numpy as np
import pytest

from distilltron import tensor as tn
from distilltron.config import ModelConfig
from distilltron.data import TokenSequence, make_batch
from distilltron.distill import (MINIATURE, feature_loss, miniature_grad_check, miniature_problem,
                                prenorm_bias_gradient)
from distilltron.errors import ConfigError, DimensionError, InputError, ParseError
from distilltron.model import (AttentionState, DecoderState, RunContext, attend, checkpoint_bytes,
                               decoder_step, encode, forward_free_running, forward_scheduled,
                               forward_teacher_forced, init_params, load_checkpoint,
                               parse_checkpoint, save_checkpoint)

SMALL = ModelConfig(vocab_size=8, n_mels=6, r=2, hidden_dim=8, location_filters=4,
                    location_width=5, conv_width=3)


def tokens(*ids, vocab=8):
    return TokenSequence(tuple(ids), vocab)


def toy_batch(seed=0, n_utts=2, cfg=SMALL):
    rng = np.random.default_rng(seed)
    toks, mels = [], []
    for i in range(n_utts):
        t = 3 + 2 * i
        toks.append(tokens(*rng.integers(1, cfg.vocab_size, size=t), vocab=cfg.vocab_size))
        mels.append(rng.normal(size=(6 + 3 * i, cfg.n_mels)))
    return make_batch(toks, mels, r=cfg.r)


@pytest.fixture(scope="module")
def params():
    return init_params(SMALL, seed=0)


# ---------------------------------------------------------------------- init

def test_init_is_seeded():
    a, b, c = init_params(SMALL, 1), init_params(SMALL, 1), init_params(SMALL, 2)
    assert a.checksum() == b.checksum() != c.checksum()


@pytest.mark.parametrize("hidden", [2, 8, 32, 64])
def test_init_finite_and_bounded(hidden):
    p = init_params(ModelConfig(hidden_dim=hidden), seed=hidden)
    for name, w in p.weights.items():
        assert np.all(np.isfinite(w)), name
        assert np.abs(w).max() <= 1.0, name


def test_forget_gate_bias_is_one(params):
    h = SMALL.hidden_dim
    np.testing.assert_array_equal(params.weights["dec.lstm1.b"][h:2 * h], 1.0)


def test_bad_config_rejected():
    with pytest.raises(ConfigError):
        init_params(ModelConfig(r=0))
    with pytest.raises(ConfigError):
        init_params(ModelConfig(hidden_dim=7))


# ------------------------------------------------------------------- encoder

@pytest.mark.parametrize("t", [1, 5, 17])
def test_encoder_rows_match_tokens(params, t):
    enc = encode(tokens(*([1] * t)), params)
    assert enc.memory.shape == (1, t, SMALL.hidden_dim)


def test_encoder_is_bidirectional(params):
    a = encode(tokens(1, 2, 3, 4), params).memory.data[0]
    b = encode(tokens(1, 2, 3, 5), params).memory.data[0]
    assert not np.allclose(a[0], b[0])      # first row sees the last token


def test_encoder_permutation_changes_memory(params):
    a = encode(tokens(1, 2, 3), params).memory.data
    b = encode(tokens(3, 2, 1), params).memory.data
    assert not np.allclose(a, b)


def test_encoder_eval_is_deterministic(params):
    a = encode(tokens(1, 2, 3), params).memory.data
    b = encode(tokens(1, 2, 3), params).memory.data
    assert np.array_equal(a, b)


def test_encoder_padding_does_not_leak(params):
    alone = encode(tokens(1, 2, 3), params).memory.data[0]
    b = make_batch([tokens(1, 2, 3), tokens(4, 5, 6, 7, 1, 2)], r=2)
    padded = encode(b, params).memory.data[0, :3]
    np.testing.assert_allclose(padded, alone, atol=1e-12)


def test_empty_sequence_rejected():
    with pytest.raises(InputError):
        tokens()


# ----------------------------------------------------------------- attention

def test_attention_weights_are_a_distribution(params):
    rng = np.random.default_rng(0)
    enc = encode(tokens(1, 2, 3, 4, 5), params)
    att = AttentionState.initial(enc)
    for _ in range(4):
        ctx, att = attend(rng.normal(size=(1, SMALL.hidden_dim)), enc, att, params)
        w = att.weights.data
        assert abs(w.sum() - 1.0) < 1e-9 and np.all(w >= 0)
    assert np.isclose(att.cumulative.data.sum(), 5.0)


def test_single_token_attention(params):
    enc = encode(tokens(3), params)
    ctx, att = attend(np.ones((1, SMALL.hidden_dim)), enc, AttentionState.initial(enc), params)
    assert att.weights.data.tolist() == [[1.0]]
    np.testing.assert_array_equal(ctx.data, enc.memory.data[:, 0])


def test_uniform_memory_gives_uniform_weights(params):
    p = params.copy()
    p.weights["att.loc_conv"][:] = 0.0
    p.weights["att.query"][:] = 0.0
    enc = encode(tokens(2, 2, 2, 2), p)
    enc.memory = tn.Tensor(np.repeat(enc.memory.data[:, :1], 4, axis=1))
    _, att = attend(np.ones((1, SMALL.hidden_dim)), enc, AttentionState.initial(enc), p)
    np.testing.assert_allclose(att.weights.data, 0.25, atol=1e-15)


# ------------------------------------------------------------------- decoder

@pytest.mark.parametrize("r", [1, 2])
def test_decoder_step_shapes(r):
    cfg = ModelConfig(vocab_size=8, n_mels=6, r=r, hidden_dim=8)
    p = init_params(cfg, 0)
    enc = encode(tokens(1, 2, 3), p)
    state = DecoderState.initial(p.bind(), enc)
    new, frames, stop, hidden = decoder_step(state, np.ones((1, r * 6)), enc, p)
    assert frames.shape == (1, r, 6) and stop.shape == (1,) and hidden.shape == (1, 8)
    assert not np.allclose(new.c1.data, state.c1.data)
    assert not np.allclose(new.c2.data, state.c2.data)


def test_decoder_step_dimension_mismatch(params):
    enc = encode(tokens(1, 2), params)
    with pytest.raises(DimensionError):
        decoder_step(DecoderState.initial(params.bind(), enc), np.ones((1, 5)), enc, params)


def test_decoder_step_gradients():
    p = init_params(MINIATURE, 3)
    enc = encode(tokens(1, 2, 3, vocab=6), p)
    prev = np.random.default_rng(0).normal(size=(1, 8))

    def f(d):
        from distilltron.model import Bound
        b = Bound(p.config, d, p.buffers)
        enc_t = encode(tokens(1, 2, 3, vocab=6), b)
        _, frames, stop, hidden = decoder_step(DecoderState.initial(b, enc_t), prev, enc_t, b)
        return tn.add(tn.add(tn.sum(tn.square(frames)), tn.sum(stop)), tn.sum(tn.tanh(hidden)))

    keep = {k: v for k, v in p.weights.items() if not k.startswith("post.")}
    full = dict(p.weights)

    def g(d):
        return f({**full, **d})

    assert enc.n_tokens == 3
    assert tn.grad_check(g, keep, coords=6).max_error < 1e-4


# -------------------------------------------------------------------- traces

def test_teacher_forced_trace_shapes(params):
    b = toy_batch()
    trace = forward_teacher_forced(params, b)
    n_frames = b.mel.shape[1]
    assert trace.hidden_states.shape[1] == n_frames
    assert trace.coarse.shape == trace.refined.shape == b.mel.shape
    assert trace.attention.shape == (2, b.n_steps, b.ids.shape[1])
    rows = trace.attention.sum(axis=-1)
    np.testing.assert_allclose(rows, 1.0, atol=1e-9)
    assert np.all(trace.attention >= 0)
    np.testing.assert_array_equal(trace.step_lengths, b.step_mask.sum(axis=1))


def test_teacher_forcing_ignores_perturbed_predictions(params):
    b = toy_batch(1)
    clean = forward_teacher_forced(params, b)

    def poke(k, frames):
        return tn.add(frames, 100.0) if k == 1 else frames

    poked = forward_teacher_forced(params, b, hook=poke)
    assert not np.array_equal(clean.coarse.data[:, 2:4], poked.coarse.data[:, 2:4])
    np.testing.assert_array_equal(clean.coarse.data[:, 4:], poked.coarse.data[:, 4:])
    np.testing.assert_array_equal(clean.step_hidden.data[:, 2:], poked.step_hidden.data[:, 2:])


def test_free_running_feeds_predictions(params):
    b = toy_batch(1)
    clean = forward_free_running(params, b)
    poked = forward_free_running(params, b, hook=lambda k, f: tn.add(f, 1.0) if k == 0 else f)
    assert not np.array_equal(clean.step_hidden.data[:, 1], poked.step_hidden.data[:, 1])


def test_forced_length_free_running_matches_frame_count(params):
    b = toy_batch(2)
    trace = forward_free_running(params, b)
    assert trace.hidden_states.shape[1] == b.mel.shape[1]


@pytest.mark.parametrize("max_steps", [1, 3, 20])
def test_stop_mode_terminates_within_budget(params, max_steps):
    trace = forward_free_running(params, make_batch([tokens(1, 2, 3)], r=2), max_steps=max_steps)
    assert trace.n_steps <= max_steps
    assert np.all(np.isfinite(trace.refined.data))
    assert trace.hidden_states.shape[1] == trace.coarse.shape[1]


def test_stop_mode_needs_positive_budget(params):
    with pytest.raises(InputError):
        forward_free_running(params, make_batch([tokens(1)], r=2), max_steps=0)


def test_scheduled_limits_are_bit_exact(params):
    b = toy_batch(3)
    for ctx_seed in (0, 5):
        tf = forward_teacher_forced(params, b, RunContext.train(ctx_seed))
        ss1 = forward_scheduled(params, b, 1.0, seed=9, ctx=RunContext.train(ctx_seed))
        fr = forward_free_running(params, b, RunContext.train(ctx_seed))
        ss0 = forward_scheduled(params, b, 0.0, seed=9, ctx=RunContext.train(ctx_seed))
        for a, c in ((tf, ss1), (fr, ss0)):
            for name in ("step_hidden", "coarse", "refined", "stop_logits"):
                assert np.array_equal(getattr(a, name).data, getattr(c, name).data)
            assert np.array_equal(a.attention, c.attention)


def test_scheduled_is_seeded(params):
    b = toy_batch(4)
    a = forward_scheduled(params, b, 0.5, seed=1)
    c = forward_scheduled(params, b, 0.5, seed=1)
    assert np.array_equal(a.feed_log, c.feed_log)
    assert np.array_equal(a.refined.data, c.refined.data)
    with pytest.raises(InputError):
        forward_scheduled(params, b, 1.5)


def test_wrong_mel_channels_rejected(params):
    b = make_batch([tokens(1, 2)], [np.zeros((4, 3))], r=2)
    with pytest.raises(InputError):
        forward_teacher_forced(params, b)


def test_end_to_end_gradients_sampled():
    result = miniature_grad_check(seed=1, coords=3)
    assert result.max_error < 1e-4, result.worst
    assert len(result.by_param) == len(miniature_problem(1)[0].weights)


def test_end_to_end_gradients_with_batch_statistics():
    result = miniature_grad_check(seed=2, coords=2, batch_stats=True)
    assert result.max_error < 1e-4, result.worst


def test_prenorm_biases_get_no_gradient_under_batch_statistics():
    assert prenorm_bias_gradient(0) < 1e-12


def test_trace_loss_is_finite():
    student, _, b = miniature_problem(0)
    trace = forward_teacher_forced(student, b)
    assert np.isfinite(feature_loss(trace.coarse, trace.refined, b.mel, b.frame_mask).item())


# --------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip_is_byte_exact(tmp_path, params):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, params, step=17, extra={"role": "teacher"})
    raw = path.read_bytes()
    ck = load_checkpoint(path)
    assert ck.step == 17 and ck.extra == {"role": "teacher"}
    assert ck.params.checksum() == params.checksum()
    assert checkpoint_bytes(ck.params, 17, ck.opt_state, ck.extra) == raw


def test_truncated_checkpoint_is_a_parse_error(params):
    raw = checkpoint_bytes(params)
    with pytest.raises(ParseError):
        parse_checkpoint(raw[:-3])
    with pytest.raises(ParseError):
        parse_checkpoint(b"NOT-A-CKPT" + raw)
