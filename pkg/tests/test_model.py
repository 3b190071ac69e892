import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from blendfuse.checkpoint import load_checkpoint, save_checkpoint
from blendfuse.errors import ContractError, FormatError, InputError, ParameterError, StateError
from blendfuse.model import FusionModel, ModelConfig, renormalize, select_top_n, top_n_indices
from blendfuse.numerics import Adam, grad_check, make_rng, softmax
from blendfuse.training import LossWeights
from helpers import clear_batch, objective, random_batch, small_model

# -- config ------------------------------------------------------------------


@pytest.mark.parametrize(
    "kw",
    [dict(top_n=0), dict(top_n=4), dict(temperature=0.5), dict(temperature=1.3), dict(dropout=1.0),
     dict(gating="random"), dict(proj_dim=0)],
)
def test_config_invalid(kw):
    with pytest.raises(ParameterError):
        ModelConfig(input_dims=[4, 4, 4], num_classes=3, **{"top_n": 2, **kw})


def test_parameter_shapes():
    m = FusionModel(ModelConfig(input_dims=[14, 21], num_classes=5, top_n=1, uda=True))
    shapes = {p.name: p.shape for p in m.parameters()}
    assert shapes["proj.0.linear.weight"] == (14, 256)
    assert shapes["proj.1.linear.weight"] == (21, 256)
    assert shapes["gate.0.weight"] == (512, 128)
    assert shapes["gate.1.weight"] == (128, 2)
    assert shapes["shared.linear.weight"] == (256, 512)
    assert shapes["presence.0.weight"] == (512, 256)
    assert shapes["salience.1.weight"] == (256, 5)
    assert shapes["domain.1.weight"] == (128, 2)


# -- selection ---------------------------------------------------------------


def test_select_examples():
    d = select_top_n([0.5, 0.3, 0.2], 2)
    assert list(d.selected) == [0, 1]
    assert np.allclose(d.w_hat, [0.625, 0.375], atol=1e-15)
    assert list(select_top_n([0.4, 0.4, 0.2], 1).selected) == [0]
    full = select_top_n([0.2, 0.5, 0.3], 3)
    assert np.array_equal(full.w_hat, full.w) and list(full.selected) == [0, 1, 2]


def test_select_out_of_range():
    with pytest.raises(ParameterError):
        select_top_n([0.5, 0.5], 3)
    with pytest.raises(ParameterError):
        select_top_n([0.5, 0.5], 0)


@given(arrays(np.float64, st.integers(1, 10), elements=st.sampled_from([0.0, 0.1, 0.25, 0.5, 1.0])), st.data())
def test_select_matches_sort_oracle_with_ties(w, data):
    n = data.draw(st.integers(1, len(w)))
    oracle = sorted(sorted(range(len(w)), key=lambda i: (-w[i], i))[:n])
    assert list(top_n_indices(w, n)[0]) == oracle


@given(arrays(np.float64, st.integers(2, 10), elements=st.floats(0.01, 1.0)), st.floats(0.1, 10.0), st.data())
def test_renormalization_scale_invariant(w, c, data):
    n = data.draw(st.integers(1, len(w)))
    sel = top_n_indices(w, n)
    a = renormalize(w[None], sel)
    b = renormalize(c * w[None], sel)
    assert np.allclose(a, b, atol=1e-12)
    assert abs(a.sum() - 1) < 1e-9


# -- forward -----------------------------------------------------------------


def test_forward_invariants():
    m = small_model(M=4, n=2, C=5)
    xs, _ = random_batch(m, B=7)
    res = m.forward(xs, "eval")
    assert np.allclose(res.w.sum(axis=1), 1, atol=1e-12)
    assert np.allclose(res.w_hat.sum(axis=1), 1, atol=1e-12)
    assert np.allclose(res.p_s.sum(axis=1), 1, atol=1e-12)
    assert np.all((res.p_p > 0) & (res.p_p < 1))
    assert res.embeddings.shape == (7, 4, 5) and res.h.shape == (7, 7)
    assert np.all(np.diff(res.selected, axis=1) > 0)


def test_eval_deterministic_and_rng_free():
    m = small_model()
    xs, _ = random_batch(m)
    a = m.forward(xs, "eval", rng=make_rng(1))
    b = m.forward(xs, "eval", rng=make_rng(2))
    assert np.array_equal(a.p_p, b.p_p) and np.array_equal(a.h, b.h)


def test_zeroed_projection_gives_zero_embeddings():
    m = small_model()
    for blk in m.projections:
        blk.linear.W.value[...] = 0
    xs, _ = random_batch(m)
    assert np.all(m.project_all(xs, "eval") == 0)


def test_zeroed_gate_output_gives_uniform_weights():
    m = small_model(M=4)
    m.gate.l2.W.value[...] = 0
    xs, _ = random_batch(m)
    assert np.allclose(m.forward(xs).w, 0.25, atol=1e-15)


def test_zeroed_heads():
    m = small_model(C=4)
    for head in (m.presence_head, m.salience_head):
        for p in head.parameters():
            p.value[...] = 0
    xs, _ = random_batch(m)
    res = m.forward(xs)
    assert np.all(res.p_p == 0.5) and np.allclose(res.p_s, 0.25, atol=1e-15)


def test_temperature_sharpens_but_keeps_argmax():
    logits = np.array([0.3, -1.2, 0.9, 0.1])
    hi, lo = softmax(logits, 1.25), softmax(logits, 0.55)
    assert lo.max() > hi.max() and lo.argmax() == hi.argmax()


def test_single_selection_uses_unit_weight():
    m = small_model(n=1)
    xs, _ = random_batch(m)
    res = m.forward(xs)
    assert np.all(res.w_hat == 1.0)
    sel_e = res.embeddings[np.arange(len(res.h)), res.selected[:, 0]]
    assert np.array_equal(m.shared.forward(sel_e, "eval"), res.h)


def test_full_selection_equals_no_selection():
    m = small_model(M=3, n=3)
    xs, _ = random_batch(m)
    res = m.forward(xs)
    # no-selection reference: weights straight from the gate, all encoders in order
    E = m.project_all(xs)
    w = m.gate_weights(E)
    h_ref = m.shared.forward((w[:, :, None] * E).reshape(len(E), -1), "eval")
    assert np.array_equal(res.h, h_ref)


def test_missing_input_and_sample_api():
    m = small_model()
    xs, _ = random_batch(m)
    with pytest.raises(InputError):
        m.forward(xs[:2])
    names = ["a", "b", "c"]
    feats = {n: x[0] for n, x in zip(names, xs)}
    dec, bundle = m.forward_sample(feats, names)
    assert np.array_equal(bundle.p_p, m.forward(xs).p_p[0])
    with pytest.raises(InputError):
        m.forward_sample({"a": xs[0][0]}, names)


def test_domain_branch_requires_uda():
    m = small_model(uda=False)
    xs, _ = random_batch(m)
    with pytest.raises(StateError):
        m.forward(xs, with_domain=True)
    with pytest.raises(ContractError):
        m.forward(xs, n_labeled=0)


def test_backward_before_forward():
    with pytest.raises(StateError):
        small_model().backward(np.zeros((2, 3)), np.zeros((2, 3)))


# -- gradients ---------------------------------------------------------------


@pytest.mark.parametrize("n", [1, 2, 3])
def test_full_model_gradients(n):
    m = small_model(M=3, n=n)
    _, _, fn = clear_batch(m, B=5)
    assert grad_check(fn, m.parameters()) < 1e-4


def test_uniform_gating_gradients():
    m = small_model(M=3, n=3, gating="uniform")
    _, _, fn = clear_batch(m, B=5)
    assert grad_check(fn, m.parameters()) < 1e-4


def test_unselected_encoders_get_gate_path_only():
    m = small_model(M=4, n=1, gating="uniform")  # no gate: only the selected path exists
    xs, t = random_batch(m, B=4)
    objective(m, xs, t)()
    res = m._cache
    dE = m.backward(np.ones_like(res.z_p), np.ones_like(res.z_s))
    for b in range(4):
        unselected = sorted(set(range(4)) - set(res.selected[b]))
        assert np.all(dE[b, unselected] == 0)


def test_backward_overwrites_grads():
    m = small_model()
    xs, t = random_batch(m)
    fn = objective(m, xs, t)
    fn()
    first = [p.grad.copy() for p in m.parameters()]
    fn()
    assert all(np.array_equal(a, p.grad) for a, p in zip(first, m.parameters()))


# -- state / checkpoint ------------------------------------------------------


def test_state_dict_round_trip():
    a, b = small_model(seed=1), small_model(seed=2)
    xs, _ = random_batch(a)
    a.forward(xs, "train", make_rng(0))  # move running stats
    b.load_state_dict(a.state_dict())
    assert np.array_equal(a.forward(xs).p_p, b.forward(xs).p_p)
    bad = a.state_dict()
    bad.pop("gate.0.weight")
    with pytest.raises(InputError):
        b.load_state_dict(bad)


def test_checkpoint_round_trip(tmp_path):
    m = small_model(uda=True)
    xs, t = random_batch(m)
    opt = Adam(m.parameters(), lr=1e-3, weight_decay=1e-3)
    objective(m, xs, t, with_domain=True, k=4)()
    opt.step()
    path = save_checkpoint(tmp_path / "m.ckpt", m, opt, {"note": 1})
    m2, opt2, extra = load_checkpoint(path)
    assert extra == {"note": 1}
    assert m2.cfg == m.cfg
    for k, v in m.state_dict().items():
        assert np.array_equal(v, m2.state_dict()[k])
    for s, s2 in zip(opt.states, opt2.states):
        assert np.array_equal(s.m, s2.m) and np.array_equal(s.v, s2.v) and s.step_count == s2.step_count
    assert path.read_bytes() == save_checkpoint(tmp_path / "again.ckpt", m2, opt2, {"note": 1}).read_bytes()


def test_checkpoint_corruption(tmp_path):
    path = save_checkpoint(tmp_path / "m.ckpt", small_model())
    data = bytearray(path.read_bytes())
    data[40] ^= 1
    path.write_bytes(bytes(data))
    with pytest.raises(FormatError, match="checksum"):
        load_checkpoint(path)
    path.write_bytes(b"nope")
    with pytest.raises(FormatError):
        load_checkpoint(path)


# -- gradient reversal -------------------------------------------------------


def test_uda_objective_gradients_with_identity_reversal():
    # reversal weight -1 turns the layer into the identity: backward is then the
    # true gradient of L_task + lambda_d * L_domain
    m = small_model(M=3, n=2, uda=True)
    _, _, fn = clear_batch(m, B=6, k=4, with_domain=True, grl_weight=-1.0)
    assert grad_check(fn, m.parameters()) < 1e-4


def test_reversal_scales_upstream_domain_gradient():
    m = small_model(M=3, n=2, uda=True)
    xs, t = random_batch(m, B=6)
    only_domain = LossWeights(0.0, 0.0, 1.0)
    grads = {}
    for lam in (-1.0, 0.3, 2.0):
        objective(m, xs, t, k=4, with_domain=True, weights=only_domain, grl_weight=lam)()
        grads[lam] = {p.name: p.grad.copy() for p in m.parameters()}
    for name, g in grads[-1.0].items():
        if name.startswith("domain."):
            assert np.array_equal(grads[0.3][name], g)
        else:
            assert np.allclose(grads[0.3][name], -0.3 * g, rtol=1e-10, atol=1e-15)
            assert np.allclose(grads[2.0][name], -2.0 * g, rtol=1e-10, atol=1e-15)


def test_forward_independent_of_reversal_weight():
    xs, _ = random_batch(small_model(uda=True))
    a = small_model(uda=True, grl_weight=0.3).forward(xs, with_domain=True)
    b = small_model(uda=True, grl_weight=5.0).forward(xs, with_domain=True)
    assert np.array_equal(a.p_d, b.p_d) and np.array_equal(a.p_p, b.p_p)
