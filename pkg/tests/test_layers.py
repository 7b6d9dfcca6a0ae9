import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dastraffic import engine as E
from dastraffic import layers as L
from dastraffic.errors import ConfigError, FormatError


def _oracle_count(arch, D, h, layers, d_k=None):
    """Parameter count from first principles, independent of the package formula."""
    stages = arch.split("-")
    if "bi" in stages and "SA" in stages[stages.index("bi") + 1:]:
        h = ((h + 2) // 3) * 3
    width, total = D, 0
    for kind in stages:
        if kind == "SA":
            d = width // 3
            k = d_k or min(d, 128)
            total += 4 * d * k
        elif kind == "TA":
            k = d_k or min(width, 128)
            total += 4 * width * k
        else:
            dirs = 2 if kind == "bi" else 1
            for li in range(layers):
                d_in = width if li == 0 else h * dirs
                total += dirs * 4 * (d_in * h + h * h + h)
            width = h * dirs
    return total + 3 * width + 3


def test_arch_strings():
    assert len(L.ARCHS) == 12
    with pytest.raises(ConfigError):
        L.ModelSpec("TA-SA-TA", 9)
    with pytest.raises(ConfigError):
        L.ModelSpec("bi", 9, dropout=1.0)
    assert L.ModelSpec("SA-bi-TA", 9).stages == ["SA", "bi", "TA"]


def test_effective_hidden_rounding():
    assert L.ModelSpec("bi-SA", 9, hidden=128).effective_hidden == 129
    assert L.ModelSpec("bi-SA", 9, hidden=129).effective_hidden == 129
    assert L.ModelSpec("SA-bi", 9, hidden=128).effective_hidden == 128
    assert L.ModelSpec("bi-TA-SA", 9, hidden=64).effective_hidden == 66


def test_zero_cell_fixed_point():
    p = L.LstmParams(E.parameter(np.zeros((5, 12))), E.parameter(np.zeros((3, 12))), E.parameter(np.zeros(12)))
    h, c = L.lstm_cell(E.Tensor(np.arange(5.0)), E.Tensor(np.zeros(3)), E.Tensor(np.zeros(3)), p)
    np.testing.assert_array_equal(h.data, 0)
    np.testing.assert_array_equal(c.data, 0)


def test_cell_matches_reference_equations():
    rng = np.random.default_rng(0)
    p = L.LstmParams.init(4, 3, rng)
    x, h0, c0 = rng.standard_normal(4), rng.standard_normal(3), rng.standard_normal(3)
    h, c = L.lstm_cell(E.Tensor(x), E.Tensor(h0), E.Tensor(c0), p)
    z = x @ p.W.data + h0 @ p.U.data + p.b.data
    sig = lambda v: 1 / (1 + np.exp(-v))
    i, f, g, o = sig(z[:3]), sig(z[3:6]), np.tanh(z[6:9]), sig(z[9:])
    c_ref = f * c0 + i * g
    np.testing.assert_allclose(c.data, c_ref, rtol=1e-12)
    np.testing.assert_allclose(h.data, o * np.tanh(c_ref), rtol=1e-12)
    _, c_zero = L.lstm_cell(E.Tensor(x), E.Tensor(h0), E.Tensor(np.zeros(3)), p)
    np.testing.assert_allclose(c_zero.data, i * g, rtol=1e-12)


def test_forget_bias_init():
    p = L.LstmParams.init(4, 5, np.random.default_rng(1))
    np.testing.assert_array_equal(p.b.data[5:10], 1.0)
    assert np.all(p.b.data[:5] == 0) and np.all(p.b.data[10:] == 0)
    assert np.all(np.abs(p.W.data) <= 1 / np.sqrt(4))


def test_cell_grad_check():
    rng = np.random.default_rng(2)
    p = L.LstmParams.init(4, 3, rng)
    x = E.parameter(rng.standard_normal(4))
    h0, c0 = E.parameter(rng.standard_normal(3)), E.parameter(rng.standard_normal(3))

    def loss():
        h, _ = L.lstm_cell(x, h0, c0, p)
        return E.sum_all(E.mul(h, h))
    assert E.grad_check(loss, [x, h0, c0, *p.tensors().values()]) < 1e-6


def test_bilstm_shapes_and_single_frame():
    rng = np.random.default_rng(3)
    fwd, bwd = L.LstmParams.init(4, 5, rng), L.LstmParams.init(4, 5, rng)
    x = rng.standard_normal((1, 4))
    out = L.bilstm(x, [(fwd, bwd)]).data
    assert out.shape == (1, 10)
    zeros = E.Tensor(np.zeros(5))
    np.testing.assert_allclose(out[0, :5], L.lstm_cell(E.Tensor(x[0]), zeros, zeros, fwd)[0].data)
    np.testing.assert_allclose(out[0, 5:], L.lstm_cell(E.Tensor(x[0]), zeros, zeros, bwd)[0].data)
    assert L.bilstm(rng.standard_normal((6, 4)), [(fwd,)]).shape == (6, 5)


def test_bilstm_palindrome_symmetry():
    rng = np.random.default_rng(4)
    p = L.LstmParams.init(3, 4, rng)
    half = rng.standard_normal((3, 3))
    seq = np.concatenate([half, half[:2][::-1]])
    out = L.bilstm(seq, [(p, p)]).data
    swapped = np.concatenate([out[:, 4:], out[:, :4]], axis=1)[::-1]
    np.testing.assert_allclose(out, swapped, atol=1e-14)


def _att(d_model, d_k, seed=0):
    return L.AttentionParams.init(d_model, d_k, np.random.default_rng(seed))


def test_temporal_attention_single_frame():
    p = _att(4, 3)
    x = np.random.default_rng(5).standard_normal((1, 4))
    out, A = L.temporal_attention(x, p)
    assert A.data.tolist() == [[1.0]]
    np.testing.assert_allclose(out.data, x @ p.W_V.data @ p.W_O.data)


def test_temporal_attention_identical_frames_uniform():
    out, A = L.temporal_attention(np.tile(np.arange(4.0), (5, 1)), _att(4, 2))
    np.testing.assert_allclose(A.data, 0.2, atol=1e-15)


def test_temporal_attention_engineered_scores():
    p = L.AttentionParams(
        E.parameter(np.array([[1.0], [0.0]])), E.parameter(np.array([[0.0], [1.0]])),
        E.parameter(np.array([[1.0], [2.0]])), E.parameter(np.array([[1.0]])))
    # Q = x0, K = x1; frame 0 queries with q=1 against keys [0, ln 3].
    x = np.array([[1.0, 0.0], [0.0, np.log(3)]])
    out, A = L.temporal_attention(x, p)
    np.testing.assert_allclose(A.data[0], [0.25, 0.75], atol=1e-15)
    v = x @ p.W_V.data
    np.testing.assert_allclose(out.data[0], 0.25 * v[0] + 0.75 * v[1])


def test_spatial_attention_identical_tokens_and_shape():
    x = np.tile(np.arange(4.0), (6, 3))
    out, A = L.spatial_attention(x, _att(4, 2))
    assert A.shape == (6, 3, 3) and out.shape == (6, 12)
    np.testing.assert_allclose(A.data, 1 / 3, atol=1e-15)
    with pytest.raises(ConfigError):
        L.spatial_attention(np.ones((2, 10)), _att(4, 2))


def test_score_shift_invariance_and_value_permutation():
    rng = np.random.default_rng(6)
    scores = rng.standard_normal((5, 5))
    shifted = scores + rng.standard_normal((5, 1)) * 50
    np.testing.assert_allclose(L.attention_weights(shifted).data, L.attention_weights(scores).data, atol=1e-14)
    A = L.attention_weights(scores).data
    V = rng.standard_normal((5, 3))
    perm = rng.permutation(5)
    np.testing.assert_allclose((A[:, perm]) @ V[perm], A @ V, atol=1e-14)


def test_compose_stage_order_and_width():
    m = L.compose(L.ModelSpec("SA-bi-TA", 324, hidden=8))
    assert [k for k, _ in m.stages] == ["SA", "bi", "TA"]
    bi = L.compose(L.ModelSpec("bi", 324, hidden=128))
    assert bi.W_c.shape == (256, 3)
    logits, attn = bi.forward(np.zeros((5, 324)))
    assert logits.shape == (5, 3) and attn == {}


def test_count_params_examples():
    uni = L.compose(L.ModelSpec("lstm", 324, hidden=128))
    rec = sum(t.size for k, t in uni.parameters().items() if not k.startswith("classifier"))
    assert rec == 231936
    assert L.count_params(uni) == 231936 + 128 * 3 + 3
    bi = L.compose(L.ModelSpec("bi", 324, hidden=128))
    assert sum(t.size for k, t in bi.parameters().items() if not k.startswith("classifier")) == 463872
    ta = L.compose(L.ModelSpec("bi-TA", 324, hidden=128, d_k=256))
    assert sum(t.size for k, t in ta.parameters().items() if ".TA." in k) == 262144


@settings(max_examples=60, deadline=None)
@given(st.sampled_from(L.ARCHS), st.integers(1, 8).map(lambda k: 3 * k), st.integers(1, 9), st.integers(1, 3),
       st.one_of(st.none(), st.integers(1, 6)))
def test_count_params_oracle(arch, D, h, layers, d_k):
    spec = L.ModelSpec(arch, D, hidden=h, layers=layers, d_k=d_k)
    n = L.count_params(L.compose(spec))
    assert n == L.expected_param_count(spec) == _oracle_count(arch, D, h, layers, d_k)


def test_forward_shapes_all_archs_batched_matches_single():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((2, 5, 9))
    for arch in L.ARCHS:
        m = L.compose(L.ModelSpec(arch, 9, hidden=4, d_k=3), seed=1)
        logits, attn = m.forward(x)
        assert logits.shape == (2, 5, 3)
        single, _ = m.forward(x[1])
        np.testing.assert_allclose(single.data, logits.data[1], atol=1e-12)
        for name, A in attn.items():
            expect = (2, 5, 5) if name.endswith("TA") else (2, 5, 3, 3)
            assert A.shape == expect
            assert np.all(np.abs(A.data.sum(axis=-1) - 1) <= 1e-12)


def test_checkpoint_roundtrip(tmp_path):
    m = L.compose(L.ModelSpec("bi-TA", 9, hidden=4, d_k=3), seed=3)
    m.input_mean = np.arange(9.0)
    m.input_scale = np.full(9, 2.0)
    path = L.save_model(tmp_path / "m.mdl", m)
    assert path.read_bytes().startswith(b"MDL1\n")
    back = L.load_model(path)
    assert back.spec == m.spec
    for k, t in m.parameters().items():
        np.testing.assert_array_equal(back.parameters()[k].data, t.data.astype(np.float32))
    np.testing.assert_array_equal(back.input_mean, m.input_mean)
    x = np.random.default_rng(0).standard_normal((6, 9))
    np.testing.assert_allclose(back.predict_proba(x), m.predict_proba(x), atol=1e-5)
    raw = path.read_bytes()
    (tmp_path / "bad.mdl").write_bytes(raw + b"\0\0\0\0")
    with pytest.raises(FormatError):
        L.load_model(tmp_path / "bad.mdl")
    (tmp_path / "magic.mdl").write_bytes(b"MDL2\n" + raw[5:])
    with pytest.raises(FormatError):
        L.load_model(tmp_path / "magic.mdl")
