import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vsedistill.autodiff import DomainError, ShapeError, Tensor
from vsedistill.losses import (DistillKind, LossConfig, cosine_similarity, distill_loss, hardest_negatives,
                               similarity_matrix, total_loss, triplet_hardest_loss, triplet_sum_loss)
from vsedistill.selfcheck import hardest_negative_oracle, random_similarity

seeds = st.integers(0, 2**31 - 1)


def test_cosine_examples():
    assert cosine_similarity([1.0, 0.0], [1.0, 0.0]).item() == 1.0
    assert cosine_similarity([1.0, 0.0], [0.0, 1.0]).item() == 0.0
    # oracle: dot = 2 + 2 + 4 = 8, both norms 3
    assert abs(cosine_similarity([1.0, 2.0, 2.0], [2.0, 1.0, 2.0]).item() - 8 / 9) < 1e-15


def test_cosine_zero_vector():
    with pytest.raises(DomainError):
        cosine_similarity([0.0, 0.0], [1.0, 0.0])


def test_similarity_matrix_examples():
    eye = np.eye(4)
    np.testing.assert_allclose(similarity_matrix(eye, eye).data, eye, atol=1e-15)
    rng = np.random.default_rng(0)
    assert similarity_matrix(rng.standard_normal((2, 5)), rng.standard_normal((3, 5))).shape == (2, 3)


def test_similarity_matrix_matches_loop_oracle():
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal((8, 6)), rng.standard_normal((8, 6))
    S = similarity_matrix(a, b).data
    for r in range(8):
        for c in range(8):
            ref = float(a[r] @ b[c]) / (np.sqrt(a[r] @ a[r]) * np.sqrt(b[c] @ b[c]))
            assert abs(S[r, c] - ref) < 1e-12


def test_similarity_matrix_zero_vector_index():
    with pytest.raises(DomainError, match="text vector at index 2"):
        similarity_matrix(np.ones((3, 2)), np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]]))


def test_triplet_examples():
    # hand enumeration: every hinge inactive
    assert triplet_hardest_loss(Tensor([[0.9, 0.3], [0.2, 0.8]]), 0.2).item() == 0.0
    # rows: [0.2-0.5+0.6]=0.3, [0.2-0.5+0.4]=0.1; cols: [0.2-0.5+0.4]=0.1, [0.2-0.5+0.6]=0.3
    assert abs(triplet_hardest_loss(Tensor([[0.5, 0.6], [0.4, 0.5]]), 0.2).item() - 0.8) < 1e-12
    S = np.full((4, 4), -1.0)
    np.fill_diagonal(S, 1.0)
    assert triplet_hardest_loss(Tensor(S), 0.2).item() == 0.0


def test_triplet_errors():
    with pytest.raises(ValueError, match="n >= 2"):
        triplet_hardest_loss(Tensor([[1.0]]))
    with pytest.raises(ShapeError):
        triplet_hardest_loss(Tensor(np.ones((2, 3))))
    with pytest.raises(ValueError, match="margin"):
        triplet_hardest_loss(Tensor(np.eye(2)), -0.1)


def test_hardest_negative_ties_go_to_lowest_index():
    S = np.zeros((3, 3))
    rows, cols = hardest_negatives(S)
    assert list(rows) == [1, 0, 0] and list(cols) == [1, 0, 0]


@settings(max_examples=200, deadline=None)
@given(seeds)
def test_mining_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 65))
    S = random_similarity(rng, n, n)
    got, ref = hardest_negatives(S), hardest_negative_oracle(S)
    assert np.array_equal(got[0], ref[0]) and np.array_equal(got[1], ref[1])


@settings(max_examples=100, deadline=None)
@given(seeds, st.floats(-5, 5))
def test_mining_invariant_to_constant_shift(seed, c):
    S = random_similarity(np.random.default_rng(seed), 8, 8)
    a, b = hardest_negatives(S), hardest_negatives(S + c)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def _hinge_oracle(S, margin):
    n = len(S)
    total, inactive = 0.0, True
    rows, cols = hardest_negative_oracle(S)
    for i in range(n):
        for v in (margin - S[i][i] + S[i][rows[i]], margin - S[i][i] + S[cols[i]][i]):
            total += max(v, 0.0)
            inactive &= v <= 0
    return total, inactive


@settings(max_examples=100, deadline=None)
@given(seeds, st.floats(0.0, 1.0))
def test_triplet_matches_hinge_oracle(seed, margin):
    S = random_similarity(np.random.default_rng(seed), 6, 6)
    loss = triplet_hardest_loss(Tensor(S), margin).item()
    ref, inactive = _hinge_oracle(S, margin)
    assert loss >= 0 and abs(loss - ref) < 1e-12
    assert (loss == 0.0) == inactive


@settings(max_examples=50, deadline=None)
@given(seeds)
def test_sum_loss_bounds_hardest(seed):
    S = random_similarity(np.random.default_rng(seed), 5, 5)
    assert triplet_sum_loss(Tensor(S)).item() >= triplet_hardest_loss(Tensor(S)).item() - 1e-12


def test_distill_examples():
    x = np.array([1.0, 2.0, -1.0])
    assert distill_loss(x, x, "negcosine").item() == pytest.approx(0.0, abs=1e-15)
    assert distill_loss(x, -x, "negcosine").item() == pytest.approx(2.0, abs=1e-15)
    assert distill_loss([1.0, 0.0], [0.0, 1.0], "negcosine").item() == 1.0
    assert distill_loss([0.0, 0.0], [1.0, -3.0], "l1").item() == 2.0
    assert distill_loss([0.0, 0.0], [1.0, -3.0], "l2").item() == 5.0


def test_distill_zero_vector_only_for_negcosine():
    with pytest.raises(DomainError):
        distill_loss([0.0, 0.0], [1.0, 1.0], "negcosine")
    assert distill_loss([0.0, 0.0], [1.0, 1.0], "l2").item() == 1.0


def test_distill_batched_is_summed():
    rng = np.random.default_rng(2)
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    for kind in DistillKind:
        per = sum(distill_loss(a[i], b[i], kind).item() for i in range(3))
        assert distill_loss(a, b, kind).item() == pytest.approx(per, abs=1e-12)


def test_distill_kind_parse():
    assert DistillKind.parse("NegCosine") is DistillKind.NEG_COSINE
    assert DistillKind.parse("neg_cosine") is DistillKind.NEG_COSINE
    with pytest.raises(ValueError):
        DistillKind.parse("kl")


@settings(max_examples=100, deadline=None)
@given(seeds, st.floats(0.01, 100.0), st.sampled_from(list(DistillKind)))
def test_distill_properties(seed, c, kind):
    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal(6), rng.standard_normal(6)
    assert distill_loss(x, x, kind).item() == pytest.approx(0.0, abs=1e-12)
    if kind is DistillKind.NEG_COSINE:
        assert abs(distill_loss(c * x, y, kind).item() - distill_loss(x, y, kind).item()) < 1e-12
        assert 0.0 <= distill_loss(x, y, kind).item() <= 2.0


def test_total_loss():
    assert total_loss(Tensor(0.8), Tensor(0.3)).item() == pytest.approx(1.1, abs=1e-15)
    assert total_loss(Tensor(0.0), Tensor(0.0)).item() == 0.0
    assert total_loss(Tensor(0.8), None).item() == 0.8
    assert total_loss(Tensor(1.0), Tensor(2.0), 0.5, 2.0).item() == 4.5
    with pytest.raises(ValueError):
        total_loss(None, None)


def test_total_loss_recomputation():
    rng = np.random.default_rng(3)
    img, txt, teacher = (rng.standard_normal((4, 5)) for _ in range(3))
    a = triplet_hardest_loss(similarity_matrix(img, txt))
    d = distill_loss(teacher, txt)
    assert total_loss(a, d).item() == a.item() + d.item()


def test_loss_config():
    assert LossConfig().margin == 0.2
    assert LossConfig(distill_kind="L1").distill_kind == "l1"
    with pytest.raises(ValueError):
        LossConfig(margin=-1)


@settings(max_examples=50, deadline=None)
@given(seeds)
def test_similarities_in_range(seed):
    rng = np.random.default_rng(seed)
    S = similarity_matrix(rng.standard_normal((5, 3)), rng.standard_normal((7, 3))).data
    assert np.all(S <= 1 + 1e-9) and np.all(S >= -1 - 1e-9)
