import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image

import reference as ref
from dvf.encoder import EncoderConfig, TokenState, VisionTransformer
from dvf.errors import ConfigurationError, InternalError
from dvf.svf import (
    ImportanceGenerator,
    SemanticFilter,
    aggregate_heads,
    export_selection,
    fuse_scores,
    rebuild_sequence,
    render_overlay,
    select_topk,
)

finite = st.floats(-10, 10, allow_nan=False, width=64)


def test_aggregate_example():
    attn = torch.tensor([[0.1, 0.9], [0.5, 0.5]], dtype=torch.float64)
    assert torch.allclose(aggregate_heads(attn), torch.tensor([0.6, 1.4], dtype=torch.float64), atol=1e-15)


def test_aggregate_single_head_is_identity():
    a = torch.rand(3, 1, 10, dtype=torch.float64)
    assert torch.equal(aggregate_heads(a), a[:, 0])


@given(arrays(np.float64, (2, 3, 7), elements=st.floats(0, 1)))
def test_aggregate_matches_loop(a):
    want = np.zeros((2, 7))
    for b in range(2):
        for m in range(3):
            want[b] += a[b, m]
    np.testing.assert_allclose(aggregate_heads(torch.from_numpy(a)).numpy(), want, atol=1e-12)


def test_zero_generator_gives_half():
    z = ImportanceGenerator(8)(torch.randn(2, 5, 8))
    assert torch.equal(z, torch.full((2, 5), 0.5))


def test_huge_bias_saturates_to_one():
    gen = ImportanceGenerator(8)
    torch.nn.init.constant_(gen.proj.bias, 100.0)
    assert torch.equal(gen(torch.randn(4, 8)), torch.ones(4))


def test_importance_gradient_finite_difference():
    torch.manual_seed(0)
    gen = ImportanceGenerator(6).double()
    torch.nn.init.normal_(gen.proj.weight)
    tokens = torch.randn(4, 6, dtype=torch.float64)
    weights = torch.randn(4, dtype=torch.float64)

    def f():
        with torch.no_grad():
            return float((gen(tokens) * weights).sum())

    (gen(tokens) * weights).sum().backward()
    for prm in (gen.proj.weight, gen.proj.bias):
        coords = range(prm.numel())
        numeric = ref.central_difference(f, prm, coords)
        assert ref.relative_error(prm.grad.view(-1).numpy(), numeric) < 1e-6


def test_fuse_example():
    out = fuse_scores(torch.tensor([0.6, 1.4], dtype=torch.float64), torch.tensor([0.5, 0.5], dtype=torch.float64))
    assert torch.allclose(out, torch.tensor([0.9, 2.1], dtype=torch.float64), atol=1e-15)


def test_fuse_zero_importance_is_semantic():
    a = torch.rand(3, 9)
    assert torch.equal(fuse_scores(a, torch.zeros_like(a)), a)


def test_fuse_shape_mismatch():
    with pytest.raises(ConfigurationError):
        fuse_scores(torch.rand(3), torch.rand(4))


@given(arrays(np.float64, (5,), elements=st.floats(0, 2)), arrays(np.float64, (5,), elements=st.floats(0, 1)))
def test_fuse_matches_loop(a, z):
    want = [a[i] + a[i] * z[i] for i in range(5)]
    np.testing.assert_allclose(fuse_scores(torch.from_numpy(a), torch.from_numpy(z)).numpy(), want, atol=1e-15)


def test_topk_example():
    assert select_topk(torch.tensor([0.2, 0.9, 0.5]), 2).tolist() == [1, 2]


def test_topk_ties_prefer_lower_index():
    assert select_topk(torch.tensor([0.5, 0.7, 0.5, 0.7]), 3).tolist() == [1, 3, 0]


@given(arrays(np.float64, st.integers(1, 30), elements=finite))
def test_topk_full_is_permutation(x):
    ids = select_topk(torch.from_numpy(x), len(x)).tolist()
    assert sorted(ids) == list(range(len(x)))


@given(arrays(np.float64, st.integers(1, 30), elements=st.integers(-3, 3).map(float)), st.data())
def test_topk_matches_brute_force(x, data):
    k = data.draw(st.integers(1, len(x)))
    want = sorted(range(len(x)), key=lambda i: (-x[i], i))[:k]
    assert select_topk(torch.from_numpy(x), k).tolist() == want


@given(arrays(np.float64, st.integers(2, 20), elements=st.integers(-40, 40).map(float), unique=True))
def test_topk_invariant_under_increasing_map(x):
    k = max(1, len(x) // 2)
    a = select_topk(torch.from_numpy(x), k)
    b = select_topk(torch.from_numpy(np.exp(x / 4) * 3 + 1), k)
    assert torch.equal(a, b)


@pytest.mark.parametrize("k", [0, 6])
def test_topk_range(k):
    with pytest.raises(ConfigurationError):
        select_topk(torch.rand(5), k)


def _state(B=2, N=9, D=4, grad=False):
    tokens = torch.randn(B, N + 1, D, dtype=torch.float64, requires_grad=grad)
    return TokenState(tokens, 1)


def test_rebuild_identity_for_all_ids_in_order():
    s = _state()
    out = rebuild_sequence(s, torch.arange(9))
    assert torch.equal(out.tokens, s.tokens)


def test_rebuild_single_token():
    s = _state()
    out = rebuild_sequence(s, torch.tensor([5]))
    assert out.tokens.shape == (2, 2, 4)
    assert torch.equal(out.tokens[:, 1], s.tokens[:, 6])
    assert torch.equal(out.tokens[:, 0], s.tokens[:, 0])


@pytest.mark.parametrize("ids", [[1, 1], [9], [-1]])
def test_rebuild_rejects_bad_ids(ids):
    with pytest.raises(InternalError):
        rebuild_sequence(_state(), torch.tensor(ids))


def test_unselected_tokens_get_zero_gradient():
    s = _state(grad=True)
    ids = torch.tensor([[2, 7], [0, 3]])
    rebuild_sequence(s, ids).tokens.pow(2).sum().backward()
    g = s.tokens.grad
    for b in range(2):
        chosen = {0} | {int(i) + 1 for i in ids[b]}
        for t in range(10):
            assert (g[b, t].abs().sum() > 0) == (t in chosen)


def _penultimate(seed=0):
    torch.manual_seed(seed)
    vit = VisionTransformer(EncoderConfig(64, 16, 2, 8, 2)).double()
    state = vit.forward_layer(vit.patchify(torch.randn(3, 3, 64, 64, dtype=torch.float64)))
    return state


def test_zero_init_importance_keeps_semantic_ranking():
    state = _penultimate()
    with_z = SemanticFilter(8, k=5, use_importance=True).double().select(state)
    without = SemanticFilter(8, k=5, use_importance=False).double().select(state)
    assert torch.equal(with_z.ids, without.ids)
    assert torch.equal(with_z.ids, select_topk(aggregate_heads(state.class_attention), 5))


def test_zero_init_gate_is_exactly_one():
    state = _penultimate(1)
    out, sel = SemanticFilter(8, k=4).double()(state)
    plain = rebuild_sequence(state, sel.ids.sort(dim=-1).values)
    assert torch.equal(out.tokens, plain.tokens)
    assert out.value_weight.shape == out.tokens.shape[:2] and bool((out.value_weight == 1.0).all())


def test_k_clamped_to_patch_count():
    out, sel = SemanticFilter(8, k=100).double()(_penultimate())
    assert sel.k == 16 and out.tokens.shape[1] == 17


def test_nonzero_generator_changes_ranking_only_through_fused_score():
    state = _penultimate(2)
    svf = SemanticFilter(8, k=6).double()
    torch.nn.init.normal_(svf.importance.proj.weight, std=2.0)
    sel = svf.select(state)
    assert torch.equal(sel.ids, select_topk(sel.fused_score, 6))
    assert sel.fused_score.requires_grad


def test_importance_receives_gradient_through_filter():
    state = _penultimate(3)
    svf = SemanticFilter(8, k=6).double()
    out, _ = svf(state)
    out.value_weight.sum().backward()
    assert svf.importance.proj.weight.grad.abs().sum() > 0


@settings(max_examples=20, deadline=None)
@given(st.lists(st.integers(0, 15), min_size=1, max_size=16, unique=True))
def test_overlay_keeps_selected_patches(ids):
    rng = np.random.default_rng(0)
    img = Image.fromarray(rng.integers(0, 256, (64, 64, 3), dtype=np.uint8))
    out = np.asarray(render_overlay(img, ids, grid=4))
    src = np.asarray(img)
    for p in range(16):
        r, c = divmod(p, 4)
        cell = (slice(r * 16, (r + 1) * 16), slice(c * 16, (c + 1) * 16))
        if p in ids:
            assert np.array_equal(out[cell], src[cell])
        else:
            assert (out[cell] <= src[cell]).all()


def test_export_selection(tmp_path):
    out, sel = SemanticFilter(8, k=3).double()(_penultimate())
    export_selection(tmp_path / "s.json", sel, index=1)
    payload = json.loads((tmp_path / "s.json").read_text())
    assert payload["k"] == 3 and payload["ids"] == sel.ids[1].tolist()
    assert len(payload["fused_score"]) == 16


def test_full_selection_without_importance_is_bit_identical():
    state = _penultimate(4)
    out, _ = SemanticFilter(8, k=16, use_importance=False).double()(state)
    assert torch.equal(out.tokens, state.tokens)
