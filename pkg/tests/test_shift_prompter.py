import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gaprompt import diffcore as dc
from gaprompt.config import ShiftPrompterConfig
from gaprompt.errors import InvalidArgument
from gaprompt.shift_prompter import (
    ShiftPrompter, encode_shape, enhance_prompt_tokens, pointnet_embed, run_prompter,
    shape_feature_to_levels,
)

SMALL = ShiftPrompterConfig(centers_per_level=[16, 4], neighbors_per_level=[6, 3],
                            widths_per_level=[8, 6], shift_scale=0.05, shift_hidden=8)


def _prompter(cfg=SMALL, seed=0, randomize_shift=True):
    rng = np.random.default_rng(seed)
    p = ShiftPrompter(cfg, rng)
    if randomize_shift:
        last = p.shift_mlp.layers[-1]
        last.weight.data = rng.normal(0, 3.0, size=last.weight.shape)
    return p


def test_pointnet_embed_matches_manual_max(rng):
    mlp = dc.MLP([3, 5, 4], rng)
    groups = rng.normal(size=(2, 3, 7, 3))
    ref = mlp(groups).data.max(axis=-2)
    np.testing.assert_array_equal(pointnet_embed(groups, mlp).data, ref)
    with pytest.raises(InvalidArgument):
        pointnet_embed(rng.normal(size=(2, 3, 7, 4)), mlp)


def test_encoding_shapes_and_shape_feature_layout(rng):
    x = rng.normal(size=(2, 40, 3))
    enc = encode_shape(_prompter(), x, SMALL, seeds=[1, 2])
    assert [c.shape for c in enc.centers] == [(2, 16, 3), (2, 4, 3)]
    assert [f.shape for f in enc.feats] == [(2, 16, 8), (2, 4, 6)]
    assert enc.f.shape == (2, 24)
    np.testing.assert_array_equal(shape_feature_to_levels(enc.f, SMALL).data, enc.feats[-1].data)


def test_level_centers_are_subsets_of_previous_level(rng):
    x = rng.normal(size=(1, 40, 3))
    enc = encode_shape(_prompter(), x, SMALL, seeds=[3])
    np.testing.assert_array_equal(enc.centers[0][0], x[0][enc.center_idx[0][0]])
    np.testing.assert_array_equal(enc.centers[1][0], enc.centers[0][0][enc.center_idx[1][0]])


def test_encoding_is_per_sample(rng):
    """A sample's encoding depends only on its own cloud and seed."""
    x = rng.normal(size=(2, 40, 3))
    both = encode_shape(_prompter(), x, SMALL, seeds=[5, 6]).f.data
    alone = encode_shape(_prompter(), x[1:], SMALL, seeds=[6]).f.data
    np.testing.assert_array_equal(both[1:], alone)


def test_zero_initialised_shift_head_is_identity(rng):
    x = rng.normal(size=(2, 40, 3))
    shifted, _, _ = run_prompter(_prompter(randomize_shift=False), x, SMALL, seeds=[0, 1])
    np.testing.assert_array_equal(shifted.data, x)


def test_shift_scale_zero_returns_input(rng):
    cfg = ShiftPrompterConfig(**{**SMALL.__dict__, "shift_scale": 0.0})
    x = rng.normal(size=(1, 40, 3))
    shifted, f, _ = run_prompter(_prompter(cfg), x, cfg)
    np.testing.assert_array_equal(shifted.data, x)
    assert f.shape == (1, 24)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.001, 0.5))
def test_shift_is_bounded_by_scale(seed, scale):
    cfg = ShiftPrompterConfig(**{**SMALL.__dict__, "shift_scale": scale})
    x = np.random.default_rng(seed).normal(size=(1, 40, 3))
    shifted, _, _ = run_prompter(_prompter(cfg, seed), x, cfg, seeds=[seed])
    delta = np.abs(shifted.data - x).max()
    assert 0 < delta <= scale


def test_prompter_gradients(rng):
    p = _prompter()
    x = rng.normal(size=(1, 40, 3))
    params = p.parameters()
    for i, prm in enumerate(params):
        prm.name = f"p{i}"

    def loss():
        shifted, f, _ = run_prompter(p, x, SMALL, seeds=[0])
        return dc.add(dc.sum_reduce(dc.mul(shifted, shifted)), dc.sum_reduce(dc.tanh(f)))

    report = dc.grad_check_params(loss, params, max_coords=3)
    assert max(report.values()) < 1e-6


def test_enhance_prompt_tokens_broadcasts_feature():
    p_raw = np.arange(6.0).reshape(2, 3)
    f = np.array([[1.0, 0, -1], [2.0, 2, 2]])
    out = enhance_prompt_tokens(p_raw, f, 0.5).data
    assert out.shape == (2, 2, 3)
    np.testing.assert_array_equal(out[1], p_raw + 1.0)
    np.testing.assert_array_equal(enhance_prompt_tokens(p_raw, f[0], 0.5).data, p_raw + [0.5, 0, -0.5])
    with pytest.raises(InvalidArgument):
        enhance_prompt_tokens(p_raw, np.zeros(4), 0.5)


def test_too_few_points_is_rejected(rng):
    with pytest.raises(InvalidArgument):
        encode_shape(_prompter(), rng.normal(size=(1, 10, 3)), SMALL)


def test_enhancement_examples():
    p_raw = np.arange(8.0).reshape(2, 4)
    np.testing.assert_array_equal(enhance_prompt_tokens(p_raw, np.full(4, 3.0), 0.0).data, p_raw)
    f = np.array([1.0, -2.0, 0.5, 4.0])
    np.testing.assert_array_equal(enhance_prompt_tokens(np.zeros((3, 4)), f, 0.5).data, np.tile(0.5 * f, (3, 1)))
    np.testing.assert_array_equal(enhance_prompt_tokens(p_raw, np.ones(4), 0.5).data, p_raw + 0.5)


def test_degenerate_single_level_hierarchy(rng):
    cfg = ShiftPrompterConfig(centers_per_level=[20], neighbors_per_level=[1], widths_per_level=[3])
    x = rng.normal(size=(1, 20, 3))
    enc = encode_shape(_prompter(cfg), x, cfg, seeds=[1])
    assert sorted(enc.center_idx[0][0].tolist()) == list(range(20))
    np.testing.assert_array_equal(enc.f.data.reshape(20, 3), enc.feats[0].data[0])


def test_shape_feature_receives_gradient_in_full_pipeline():
    from gaprompt.data import Dataset, generate
    from gaprompt.model import GAPromptModel, gaprompt_forward
    from gaprompt.trainer import freeze_for_adaptation
    from helpers import tiny_config

    cfg = tiny_config()
    model = GAPromptModel(cfg, 0)
    freeze_for_adaptation(model, "adapt")
    clouds, labels, _ = Dataset.arrays(generate(cfg.data, 0).train[:2])
    logits, _ = gaprompt_forward(model, clouds, [0, 1])
    dc.backward(dc.cross_entropy(logits, labels), [p for p in model.parameters() if not p.frozen])
    assert sum(float(np.abs(p.grad).sum()) for p in model.prompter.encoders[-1].parameters()) > 0
