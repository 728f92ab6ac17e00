import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from flarelab import autodiff as ad
from flarelab.autodiff import ContractError, grad_check
from flarelab.checkpoint import (CorruptHeaderError, ShapeMismatchError, TruncatedPayloadError,
                                 VersionMismatchError, load_checkpoint, read_arrays, read_header,
                                 save_checkpoint, write_arrays)
from flarelab.model import (ModelConfig, TransformerEncoder, classify, encode, parameter_count,
                            parameter_shapes, span_decode, span_predict)


def naive_attention(model, i, x):
    """Self-attention sub-block with explicit loops over batch, heads and positions."""
    p = model.params
    cfg = model.config
    ln = lambda v: (v - v.mean()) / math.sqrt(v.var() + 1e-5) * p[f"blocks.{i}.ln1.gain"].data \
        + p[f"blocks.{i}.ln1.bias"].data
    out = np.array(x, dtype=np.float64)
    for b in range(x.shape[0]):
        h = np.stack([ln(row) for row in x[b]])
        q = h @ p[f"blocks.{i}.attn.query"].data
        k = h @ p[f"blocks.{i}.attn.key"].data
        v = h @ p[f"blocks.{i}.attn.value"].data
        ctx = np.zeros_like(h)
        dh = cfg.head_dim
        for head in range(cfg.num_heads):
            sl = slice(head * dh, (head + 1) * dh)
            for s in range(x.shape[1]):
                scores = np.array([q[s, sl] @ k[t, sl] / math.sqrt(dh) for t in range(x.shape[1])])
                w = np.exp(scores - scores.max())
                w /= w.sum()
                ctx[s, sl] = sum(w[t] * v[t, sl] for t in range(x.shape[1]))
        out[b] = x[b] + ctx @ p[f"blocks.{i}.attn.output"].data
    return out


def test_attention_matches_naive_loops(tiny_config, rng):
    model = TransformerEncoder(tiny_config, seed=3, dtype=np.float64)
    x = rng.normal(size=(2, 5, 8))
    got = model.attention(0, ad.Tensor(x)).data
    np.testing.assert_allclose(got, naive_attention(model, 0, x), atol=1e-12)


def test_default_config_and_parameter_count():
    cfg = ModelConfig()
    assert (cfg.num_layers, cfg.hidden_dim, cfg.num_heads, cfg.ffn_dim) == (4, 64, 4, 128)
    assert (cfg.vocab_size, cfg.max_seq_len, cfg.num_classes) == (64, 32, 3)
    d, f, layers = 64, 128, 4
    per_block = 4 * d * d + 2 * d * f + 4 * d
    expected = 64 * d + 32 * d + layers * per_block + 2 * d + d * 3 + 3
    assert parameter_count(cfg, "classification") == expected
    assert parameter_count(cfg, "span") == expected - (d * 3 + 3) + 2 * (d + 1)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(hidden_dim=10, num_heads=4)
    with pytest.raises(ValueError):
        ModelConfig(num_layers=0)


def test_init_is_seeded_and_bounded():
    a, b = TransformerEncoder(seed=7), TransformerEncoder(seed=7)
    for name in a.params:
        np.testing.assert_array_equal(a[name].data, b[name].data)
    w = a["blocks.0.attn.query"].data
    assert np.abs(w).max() <= 1 / math.sqrt(64)


def test_token_contracts():
    model = TransformerEncoder()
    with pytest.raises(ContractError):
        encode(model, np.zeros(33, dtype=int))
    with pytest.raises(ContractError):
        encode(model, np.array([1, 64]))


def test_single_and_batched_agree(rng):
    model = TransformerEncoder(seed=1)
    tokens = rng.integers(0, 64, size=(3, 9))
    batched = classify(model, tokens).data
    for k in range(3):
        np.testing.assert_allclose(classify(model, tokens[k]).data, batched[k], atol=1e-5)


def test_span_shapes(rng):
    model = TransformerEncoder(task="span", seed=2)
    start, end, spans = span_predict(model, rng.integers(0, 64, size=(2, 11)))
    assert start.shape == (2, 11) and end.shape == (2, 11) and len(spans) == 2


def brute_force_span(s, e, max_len, lo=0):
    best, arg = -np.inf, None
    for i in range(len(s)):
        for j in range(len(e)):
            if lo <= i <= j <= i + max_len and s[i] + e[j] > best:
                best, arg = s[i] + e[j], (i, j)
    return arg


@given(st.integers(2, 20), st.integers(0, 9), st.integers(0, 2**31))
def test_span_decode_matches_brute_force(m, max_len, seed):
    rng = np.random.default_rng(seed)
    s, e = rng.normal(size=m), rng.normal(size=m)
    lo = int(rng.integers(0, m))
    assert span_decode(s, e, max_len, lo) == brute_force_span(s, e, max_len, lo)


def test_span_decode_tie_goes_to_earliest():
    assert span_decode(np.zeros(5), np.zeros(5)) == (0, 0)


def _tiny_loss(model, task, rng):
    tokens = rng.integers(0, 64, size=(2, 5))
    labels = np.array([0, 2]) if task == "classification" else np.array([[1, 2], [0, 4]])

    def loss(*params):
        head = model.head_logits(encode(model, tokens).final)
        if task == "classification":
            return ad.cross_entropy(head, labels)
        return ad.scale(ad.cross_entropy(head[0], labels[:, 0]) + ad.cross_entropy(head[1], labels[:, 1]), 0.5)
    return loss


def _perturbed(config, task, rng):
    model = TransformerEncoder(config, task, seed=5, dtype=np.float64)
    for p in model.params.values():
        p.data = p.data + rng.normal(scale=0.05, size=p.shape)  # break symmetric zero biases
    return model


def test_full_model_grad_check_fp64(tiny_config, rng):
    model = _perturbed(tiny_config, "classification", rng)
    report = grad_check(_tiny_loss(model, "classification", rng), list(model.params.values()))
    assert report.passed, report.max_rel_error
    assert report.checked == model.parameter_count()


def test_span_model_grad_check_fp64(tiny_config, rng):
    # The final LN bias and the start/end biases shift every position's logit by
    # the same amount, which a softmax over positions ignores. Their true gradient
    # is zero and finite differences only see rounding noise, so they are checked
    # for a vanishing gradient instead of a relative error.
    model = _perturbed(tiny_config, "span", rng)
    loss = _tiny_loss(model, "span", rng)
    shift_invariant = ("final_ln.bias", "head.start_bias", "head.end_bias")
    others = [p for name, p in model.params.items() if name not in shift_invariant]
    report = grad_check(loss, others)
    assert report.passed, report.max_rel_error
    for name in shift_invariant:
        bias = model.params[name]
        noise = grad_check(loss, bias)
        assert np.abs(bias.grad).max() < 1e-12
        assert max(noise.errors) * 1e-8 < 1e-10  # numeric side is rounding-level


# --- checkpoints ---------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    model = TransformerEncoder(task="span", seed=9)
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path, note="x")
    loaded = load_checkpoint(path)
    assert loaded.task == "span" and loaded.config == model.config
    for name in model.params:
        assert model[name].data.tobytes() == loaded[name].data.tobytes()
    header, _ = read_header(path)
    assert header["format_version"] == 1 and header["meta"] == {"note": "x"}


def test_checkpoint_errors(tmp_path):
    path = tmp_path / "a.ckpt"
    write_arrays(path, {"w": np.ones((2, 3), dtype=np.float32)}, {"kind": "arrays"})
    with pytest.raises(ShapeMismatchError, match="'w'"):
        read_arrays(path, {"w": (3, 2)})
    raw = path.read_bytes()
    (tmp_path / "trunc.ckpt").write_bytes(raw[:-4])
    with pytest.raises(TruncatedPayloadError):
        read_arrays(tmp_path / "trunc.ckpt")
    (tmp_path / "garbage.ckpt").write_bytes(b"nope" + raw[4:])
    with pytest.raises(CorruptHeaderError):
        read_header(tmp_path / "garbage.ckpt")
    text = raw.replace(b'"format_version": 1', b'"format_version": 9')
    (tmp_path / "v9.ckpt").write_bytes(text)
    with pytest.raises(VersionMismatchError):
        read_header(tmp_path / "v9.ckpt")


def test_parameter_shapes_names():
    shapes = parameter_shapes(ModelConfig(num_layers=1), "classification")
    assert shapes["blocks.0.attn.query"] == (64, 64)
    assert shapes["head.weight"] == (64, 3)
    assert "final_ln.gain" in shapes
