import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gaprompt import diffcore as dc
from gaprompt.backbone import TokenSet
from gaprompt.config import PropagationConfig
from gaprompt.errors import InvalidArgument
from gaprompt.pointops import first_pick
from gaprompt.prompt_core import hybridize, init_point_prompt, inject, propagate_tokens, resolve_centers
from gaprompt.seeding import PROPAGATION, derive_seed

from oracles import fps_bruteforce, idw_bruteforce


@pytest.mark.parametrize("mode", ["uniform", "cluster"])
def test_point_prompt_init_in_range_and_seeded(mode):
    a = init_point_prompt(23, 0.7, mode, seed=4)
    b = init_point_prompt(23, 0.7, mode, seed=4)
    assert a.points.shape == (23, 3) and a.count == 23
    assert np.abs(a.points.data).max() <= 0.7
    np.testing.assert_array_equal(a.points.data, b.points.data)
    assert not a.points.frozen


def test_point_prompt_init_validation():
    with pytest.raises(InvalidArgument):
        init_point_prompt(3, 0.0)
    with pytest.raises(InvalidArgument):
        init_point_prompt(3, 1.0, "gaussian")
    assert init_point_prompt(0, 1.0).count == 0


def test_hybridize_appends_prompt_to_every_cloud(rng):
    prompt = init_point_prompt(5, 1.0, seed=0)
    x = rng.normal(size=(3, 10, 3))
    out = hybridize(x, prompt).data
    assert out.shape == (3, 15, 3)
    np.testing.assert_array_equal(out[:, :10], x)
    for b in range(3):
        np.testing.assert_array_equal(out[b, 10:], prompt.points.data)
    np.testing.assert_array_equal(hybridize(x, None).data, x)


def test_hybridize_gradient_sums_over_batch(rng):
    prompt = init_point_prompt(2, 1.0, seed=0)
    x = rng.normal(size=(3, 4, 3))
    dc.backward(dc.sum_reduce(hybridize(x, prompt)), [prompt.points])
    np.testing.assert_array_equal(prompt.points.grad, np.full((2, 3), 3.0))


def _inject_case(seed, lp, variant):
    rng = np.random.default_rng(seed)
    b, n, d, c, k = 2, 9, 3, 5, 3
    tokens = rng.normal(size=(b, n, d))
    cidx = np.stack([rng.permutation(n)[:c] for _ in range(b)])
    nidx = rng.integers(0, n, size=(b, c, k))
    p = rng.normal(size=(lp, d))
    h_c, h_n = inject(tokens, cidx, nidx, p, variant)
    return tokens, cidx, nidx, p, h_c.data, h_n.data


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(1, 5))
def test_replacement_overwrites_last_rows(seed, lp):
    tokens, cidx, nidx, p, h_c, h_n = _inject_case(seed, lp, "replacement")
    c = cidx.shape[1]
    for b in range(2):
        np.testing.assert_array_equal(h_c[b, c - lp:], p)
        np.testing.assert_array_equal(h_c[b, :c - lp], tokens[b, cidx[b, :c - lp]])
        np.testing.assert_array_equal(h_n[b, c - lp:, -1], p)
        np.testing.assert_array_equal(h_n[b, c - lp:, :-1], tokens[b, nidx[b, c - lp:, :-1]])
        np.testing.assert_array_equal(h_n[b, :c - lp], tokens[b, nidx[b, :c - lp]])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(1, 5))
def test_permutation_maps_low_positions_to_prompts(seed, lp):
    tokens, cidx, nidx, p, h_c, h_n = _inject_case(seed, lp, "permutation")
    for b in range(2):
        for j, pos in enumerate(cidx[b]):
            expected = p[pos] if pos < lp else tokens[b, pos - lp]
            np.testing.assert_array_equal(h_c[b, j], expected)
        for j, pos in np.ndenumerate(nidx[b]):
            np.testing.assert_array_equal(h_n[b][j], p[pos] if pos < lp else tokens[b, pos - lp])


def test_inject_without_prompts_is_a_plain_gather(rng):
    tokens = rng.normal(size=(1, 6, 2))
    cidx, nidx = np.array([[4, 1]]), np.array([[[4, 0], [1, 1]]])
    for variant in ("replacement", "permutation"):
        h_c, h_n = inject(tokens, cidx, nidx, np.zeros((0, 2)), variant)
        np.testing.assert_array_equal(h_c.data, tokens[:, [4, 1]])
        np.testing.assert_array_equal(h_n.data, tokens[0][nidx[0]][None])


def test_inject_validation(rng):
    tokens = rng.normal(size=(1, 6, 2))
    cidx, nidx = np.array([[0, 1]]), np.zeros((1, 2, 2), dtype=np.int64)
    with pytest.raises(InvalidArgument):
        inject(tokens, cidx, nidx, rng.normal(size=(3, 2)), "replacement")
    with pytest.raises(InvalidArgument):
        inject(tokens, cidx, nidx, rng.normal(size=(1, 2)), "swap")
    with pytest.raises(InvalidArgument):
        inject(tokens, cidx, nidx, rng.normal(size=(1, 3)), "replacement")


def test_resolve_centers_default_is_half():
    assert resolve_centers(PropagationConfig(), 32) == 16
    assert resolve_centers(PropagationConfig(centers_C=5), 32) == 5


@pytest.mark.parametrize("variant", ["replacement", "permutation"])
def test_propagation_composition_matches_oracle_eight_tokens(variant):
    """FPS, injection and interpolation recomposed from brute-force pieces."""
    rng = np.random.default_rng(11)
    body = rng.normal(size=(8, 3))
    cls = rng.normal(size=(1, 3))
    p = rng.normal(size=(2, 3))
    cfg = PropagationConfig(variant=variant, centers_C=4, neighbors_K=3, k_interp=3)
    out = propagate_tokens(TokenSet(dc.Tensor(np.concatenate([cls, body])[None]), None, True),
                           cfg, p[None], seeds=[5], block=2).tokens.data[0]

    start = first_pick(8, derive_seed(5, PROPAGATION, 2))
    cidx = fps_bruteforce(body, 4, start)
    if variant == "replacement":
        feats = np.concatenate([body[cidx[:2]], p])
    else:
        mixed = np.concatenate([p, body[:6]])
        feats = mixed[cidx]
    ref = idw_bruteforce(body, body[cidx], feats, 3, 2.0, 1e-8)
    np.testing.assert_array_equal(out[0], cls[0])
    np.testing.assert_allclose(out[1:], ref, atol=1e-12)


def test_propagation_residual_and_center_metric(rng):
    body = rng.normal(size=(1, 8, 4))
    centers = rng.normal(size=(1, 8, 3))
    ts = TokenSet(dc.Tensor(body), centers, False)
    base = PropagationConfig(centers_C=4, neighbors_K=3, metric="center3d")
    plain = propagate_tokens(ts, base, rng.normal(size=(1, 4)), seeds=[0]).tokens.data
    p = rng.normal(size=(1, 4))
    a = propagate_tokens(ts, base, p, seeds=[0]).tokens.data
    res = propagate_tokens(ts, PropagationConfig(**{**base.__dict__, "residual": True}), p, seeds=[0]).tokens.data
    np.testing.assert_allclose(res, body + a, atol=1e-13)
    assert plain.shape == body.shape
    with pytest.raises(InvalidArgument):
        propagate_tokens(TokenSet(dc.Tensor(body), None, False), base, p)


def test_propagation_gradients_reach_tokens_and_prompts(rng):
    body = rng.normal(size=(1, 9, 3))
    p = rng.normal(size=(2, 3))
    cfg = PropagationConfig(centers_C=4, neighbors_K=3, k_interp=3)
    w = rng.normal(size=(1, 10, 3))
    def loss_tokens(t):
        out = propagate_tokens(TokenSet(t, None, True), cfg, p, seeds=[1]).tokens
        return dc.sum_reduce(dc.mul(out, dc.Tensor(w)))
    def loss_prompt(t):
        out = propagate_tokens(TokenSet(dc.Tensor(np.concatenate([np.zeros((1, 1, 3)), body], 1)), None, True),
                               cfg, t, seeds=[1]).tokens
        return dc.sum_reduce(dc.mul(out, dc.Tensor(w)))
    assert dc.grad_check(loss_tokens, np.concatenate([np.zeros((1, 1, 3)), body], 1)) < 1e-6
    assert dc.grad_check(loss_prompt, p) < 1e-6


def test_no_prompts_with_all_tokens_as_centers_reproduces_tokens(rng):
    body = rng.normal(size=(1, 6, 5))
    cfg = PropagationConfig(centers_C=6, neighbors_K=2, k_interp=3)
    out = propagate_tokens(TokenSet(dc.Tensor(body), None, False), cfg, np.zeros((0, 5)), seeds=[0]).tokens.data
    np.testing.assert_allclose(out, body, rtol=1e-6)


def test_constant_tokens_mix_toward_the_injected_prompt():
    const, v = np.full(4, 1.5), np.array([-2.0, 0.0, 3.0, 1.0])
    body = np.tile(const, (1, 8, 1)) + np.arange(8)[None, :, None] * 1e-3
    cfg = PropagationConfig(variant="replacement", centers_C=4, neighbors_K=2, k_interp=4)
    out = propagate_tokens(TokenSet(dc.Tensor(body), None, False), cfg, v[None], seeds=[0]).tokens.data[0]
    # each row is a*const_row + (1-a)*v with a in [0, 1]; solve per row on a coordinate where they differ
    alpha = (out[:, 0] - v[0]) / (body[0, :, 0] - v[0])
    assert np.all((alpha > -1e-6) & (alpha < 1 + 1e-6))
    np.testing.assert_allclose(out, alpha[:, None] * np.tile(const, (8, 1)) + (1 - alpha[:, None]) * v, atol=1e-2)


def test_replacement_changes_exactly_lp_center_rows(rng):
    tokens = rng.normal(size=(1, 10, 3))
    cidx = np.array([[0, 3, 5, 7, 9]])
    nidx = np.zeros((1, 5, 2), dtype=np.int64)
    plain, _ = inject(tokens, cidx, nidx, None, "replacement")
    injected, _ = inject(tokens, cidx, nidx, rng.normal(size=(2, 3)), "replacement")
    assert int((plain.data != injected.data).any(axis=-1).sum()) == 2
