import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from focusbind.fca import (AttentionRecord, FocusMask, MaskError, aggregate_attention,
                           compute_focus_mask, focused_attention, project_mask, read_dump, write_dump)

from oracles import keys_bicubic, naive_focus_mask, naive_masked_attention, naive_max_pool


def softmax_rows(x):
    return torch.softmax(x, dim=-1)


def test_single_entry_is_exact():
    rec = AttentionRecord()
    m = softmax_rows(torch.randn(64, 5))
    rec.add("a", 10, m, (8, 8))
    assert torch.equal(aggregate_attention(rec).A_star, m)


def test_two_same_size_entries_mean():
    rec = AttentionRecord()
    a, b = softmax_rows(torch.randn(16, 3)), softmax_rows(torch.randn(16, 3))
    rec.add("a", 1, a, (4, 4))
    rec.add("b", 1, b, (4, 4))
    assert torch.allclose(aggregate_attention(rec).A_star, (a + b) / 2, atol=1e-7)


@pytest.mark.parametrize("seed", range(5))
def test_mixed_resolution_against_keys_reference(seed):
    g = torch.Generator().manual_seed(seed)
    n = 3
    small = torch.softmax(torch.randn(64, n, generator=g, dtype=torch.float64), -1)
    big = torch.softmax(torch.randn(256, n, generator=g, dtype=torch.float64), -1)
    rec = AttentionRecord()
    rec.add("low", 5, small, (8, 8))
    rec.add("high", 5, big, (16, 16))
    A = aggregate_attention(rec)
    assert A.hw == (16, 16)
    ref = np.zeros((256, n))
    for j in range(n):
        up = np.maximum(keys_bicubic(small[:, j].numpy().reshape(8, 8), 16, 16), 0)
        ref[:, j] = (up.reshape(-1) + big[:, j].numpy()) / 2
    np.testing.assert_allclose(A.A_star.numpy(), ref, atol=1e-10)


def test_inconsistent_token_count():
    rec = AttentionRecord()
    rec.add("a", 1, torch.ones(4, 3) / 3, (2, 2))
    rec.add("b", 1, torch.ones(4, 2) / 2, (2, 2))
    with pytest.raises(MaskError):
        aggregate_attention(rec)


def test_worked_two_pixel_example():
    A = torch.tensor([[1.0, 0.3], [0.0, 0.7]])
    D = np.array([[0, 0], [1, 0]])
    m = compute_focus_mask(A, D, 0.5, hw=(2, 1)).mask
    assert m[0, 0] == 0 and m[0, 1] == 0 and m[1, 0] == 0 and m[1, 1] == -math.inf


def test_s_zero_is_all_zero():
    A = torch.rand(64, 6)
    D = (torch.rand(6, 6) > 0.5).float()
    assert not torch.isinf(compute_focus_mask(A, D, 0.0).mask).any()


def test_constant_column_unmasked():
    A = torch.ones(16, 2) * 0.5
    D = np.array([[0, 1], [0, 0]])
    assert not torch.isinf(compute_focus_mask(A, D, 0.9).mask).any()


@pytest.mark.parametrize("s", [-0.1, 1.5, float("nan")])
def test_threshold_range(s):
    with pytest.raises(MaskError):
        compute_focus_mask(torch.rand(4, 2), np.eye(2)[::-1], s)


def test_nan_attention_rejected():
    A = torch.rand(4, 2)
    A[0, 0] = float("nan")
    with pytest.raises(MaskError):
        compute_focus_mask(A, np.zeros((2, 2)), 0.5)


def test_oracle_equivalence_small_sample():
    rng = np.random.default_rng(7)
    for _ in range(100):
        P, n = int(rng.integers(1, 65)), int(rng.integers(1, 17))
        A = rng.random((P, n))
        D = (rng.random((n, n)) < 0.3).astype(np.uint8)
        np.fill_diagonal(D, 0)
        s = float(rng.choice([0, 0.25, 0.5, 0.75, 1]))
        got = compute_focus_mask(torch.as_tensor(A), D, s, hw=(P, 1)).mask.numpy()
        assert np.array_equal(got, naive_focus_mask(A, D, s))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.floats(0, 1), st.floats(0, 1))
def test_mask_monotone_and_binary(seed, s1, s2):
    s1, s2 = min(s1, s2), max(s1, s2)
    g = torch.Generator().manual_seed(seed)
    A = torch.rand(16, 5, generator=g)
    D = (torch.rand(5, 5, generator=g) > 0.6).float()
    m1 = compute_focus_mask(A, D, s1).mask
    m2 = compute_focus_mask(A, D, s2).mask
    for m in (m1, m2):
        assert bool(((m == 0) | (m == -math.inf)).all())
        # tokens without dependencies stay open
        assert not torch.isinf(m[:, D.sum(1) == 0]).any()
    assert bool((torch.isinf(m1) <= torch.isinf(m2)).all())


def test_zero_mask_equals_plain_attention():
    Q, K, V = torch.randn(10, 8), torch.randn(4, 8), torch.randn(4, 8)
    plain = torch.softmax(Q @ K.T / math.sqrt(8), -1) @ V
    out = focused_attention(Q, K, V, torch.zeros(10, 4))
    assert (out - plain).abs().max() < 1e-6


def test_zeroing_property_and_renormalisation():
    Q, K, V = torch.randn(6, 4), torch.randn(3, 4), torch.randn(3, 4)
    mask = torch.zeros(6, 3)
    mask[::2, 1] = -math.inf
    _, W = focused_attention(Q, K, V, mask, return_weights=True)
    assert bool((W[::2, 1] == 0).all())
    assert torch.allclose(W.sum(-1), torch.ones(6), atol=1e-6)


def test_masked_attention_against_dense_reference():
    g = torch.Generator().manual_seed(3)
    Q, K, V = (torch.randn(4, 3, generator=g, dtype=torch.float64) for _ in range(3))
    K, V = K[:2], V[:2]
    mask = torch.tensor([[0, -math.inf], [0, 0], [-math.inf, 0], [0, 0]], dtype=torch.float64)
    out, W = focused_attention(Q, K, V, mask, return_weights=True)
    ref_out, ref_W = naive_masked_attention(Q.numpy(), K.numpy(), V.numpy(), mask.numpy())
    np.testing.assert_allclose(out.numpy(), ref_out, atol=1e-12)
    np.testing.assert_allclose(W.numpy(), ref_W, atol=1e-12)


def test_fully_masked_row_rejected():
    mask = torch.zeros(2, 2)
    mask[0] = -math.inf
    with pytest.raises(MaskError):
        focused_attention(torch.randn(2, 4), torch.randn(2, 4), torch.randn(2, 4), mask)


def _fm(arr, hw):
    return FocusMask(torch.as_tensor(arr, dtype=torch.float32), hw, 0.5)


def test_project_conservative_unmasking():
    m = np.full((16, 1), -np.inf)
    m[[0, 2, 8, 10], 0] = 0  # one open cell per 2x2 window
    assert not torch.isinf(project_mask(_fm(m, (4, 4)), (2, 2)).mask).any()
    full = _fm(np.full((16, 2), -np.inf), (4, 4))
    assert torch.isinf(project_mask(full, (2, 2)).mask).all()
    same = _fm(m, (4, 4))
    assert project_mask(same, (4, 4)) is same


def test_project_against_naive_pool_and_permutation():
    rng = np.random.default_rng(0)
    m = np.where(rng.random((64, 5)) < 0.6, -np.inf, 0.0)
    got = project_mask(_fm(m, (8, 8)), (4, 4)).mask.numpy()
    np.testing.assert_array_equal(got, naive_max_pool(m, 8, 8, 4, 4))
    perm = rng.permutation(5)
    got_p = project_mask(_fm(m[:, perm], (8, 8)), (4, 4)).mask.numpy()
    np.testing.assert_array_equal(got_p, got[:, perm])


def test_project_non_divisible():
    with pytest.raises(MaskError):
        project_mask(_fm(np.zeros((36, 1)), (6, 6)), (4, 4))


def test_dump_round_trip(tmp_path):
    a = np.random.rand(64, 3).astype(np.float32)
    write_dump(tmp_path / "d", ["a", "b", "c"], {"attention": (a, (8, 8))}, {"attention": {"seed": 1}})
    manifest, arrays = read_dump(tmp_path / "d")
    assert manifest["tokens"] == ["a", "b", "c"]
    assert manifest["entries"][0]["seed"] == 1
    assert np.array_equal(arrays["attention"], a)
    raw = (tmp_path / "d" / "attention.f32").read_bytes()
    assert np.array_equal(np.frombuffer(raw, "<f4").reshape(64, 3), a)
    with pytest.raises(FileNotFoundError):
        read_dump(tmp_path / "missing")
