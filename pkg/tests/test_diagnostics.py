import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from logoinsert.backend import TokenInit
from logoinsert.core import IDENTITY, SpecialToken, TokenRole, seeded_rng
from logoinsert.diagnostics import (
    AttentionStack,
    average_map,
    default_timesteps,
    localization_score,
    overlay,
    token_attention,
    token_positions,
)
from logoinsert.errors import CapabilityError, DomainError, TokenResolutionError

from oracles import mean_reversed


@pytest.fixture
def with_v(fresh):
    fresh.register_token(SpecialToken(IDENTITY, 32, TokenRole.identity), TokenInit.from_word("logo"))
    return fresh


def _img(seed=0):
    return np.random.default_rng(seed).integers(0, 256, (64, 64, 3)).astype(np.uint8)


def test_default_timesteps():
    assert default_timesteps(1000) == [200, 500, 800]


def test_stack_rasters_normalized(with_v):
    stack = token_attention(with_v, _img(), f"a {IDENTITY} on a red background", IDENTITY, rng=seeded_rng(0, "a"))
    assert len(stack) == 3 * 3  # 3 layers x 3 timesteps
    for m in stack.maps:
        assert m.shape == (16, 16)
        assert (m >= 0).all()
        assert abs(m.sum() - 1) < 1e-6


def test_rigged_uniform(with_v):
    with_v.rig_uniform_attention()
    stack = token_attention(with_v, _img(), f"a {IDENTITY} on a red background", IDENTITY, rng=seeded_rng(0, "a"))
    for m in stack.maps:
        assert np.allclose(m, 1 / 256, atol=1e-15)


def test_repeated_or_absent_token(with_v):
    with pytest.raises(TokenResolutionError):
        token_attention(with_v, _img(), f"a {IDENTITY} and a {IDENTITY}", IDENTITY)
    with pytest.raises(TokenResolutionError):
        token_attention(with_v, _img(), "a logo on a mug", IDENTITY)
    with pytest.raises(TokenResolutionError):
        token_attention(with_v, _img(), "a logo and a logo", "logo")


def test_word_positions(with_v):
    prompt = f"a {IDENTITY} logo on a blue background"
    pieces = with_v.token_pieces(prompt)
    assert [pieces[i] for i in token_positions(with_v, prompt, "logo")] == ["logo"]
    assert [pieces[i] for i in token_positions(with_v, prompt, IDENTITY)] == [IDENTITY]
    # a word inside another word does not count
    assert token_positions(with_v, "a logos logo", "logo") == [3]


def test_deterministic(with_v):
    p = f"a {IDENTITY} in a scene"
    a = token_attention(with_v, _img(1), p, IDENTITY, rng=seeded_rng(3, "a"))
    b = token_attention(with_v, _img(1), p, IDENTITY, rng=seeded_rng(3, "a"))
    assert all(np.array_equal(x, y) for x, y in zip(a.maps, b.maps))
    assert a.keys == b.keys


def test_capability_error():
    class NoAttn:
        supports_attention = False

    with pytest.raises(CapabilityError):
        token_attention(NoAttn(), _img(), "a", "a")


def test_average_map_examples():
    r = np.random.default_rng(0).random((8, 8))
    r /= r.sum()
    # (r + r + r) / 3 can differ from r by one ulp
    assert np.allclose(average_map(AttentionStack((r, r, r), "t")), r, rtol=4e-16, atol=0)
    a = np.zeros((4, 4))
    b = np.zeros((4, 4))
    a[0, 0] = 1
    b[3, 2] = 1
    avg = average_map(AttentionStack((a, b), "t"))
    assert avg[0, 0] == 0.5 and avg[3, 2] == 0.5 and avg.sum() == 1.0
    with pytest.raises(DomainError):
        average_map(AttentionStack((), "t"))


def _random_stack(rng, n=6, shape=(16, 16)):
    maps = []
    for _ in range(n):
        m = rng.random(shape) ** 3
        maps.append(m / m.sum())
    return maps


def test_average_map_matches_reassociation_oracle():
    maps = _random_stack(np.random.default_rng(7))
    got = average_map(AttentionStack(tuple(maps), "t"))
    assert np.abs(got - mean_reversed(maps)).max() <= 1e-12
    assert abs(got.sum() - 1) < 1e-6


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 8))
def test_average_map_permutation_invariance(seed, n):
    rng = np.random.default_rng(seed)
    maps = _random_stack(rng, n, (6, 6))
    perm = rng.permutation(n)
    a = average_map(AttentionStack(tuple(maps), "t"))
    b = average_map(AttentionStack(tuple(maps[i] for i in perm), "t"))
    assert np.abs(a - b).max() <= 1e-15
    # commutes with a common spatial permutation
    sp = rng.permutation(36)
    moved = tuple(m.ravel()[sp].reshape(6, 6) for m in maps)
    assert np.abs(average_map(AttentionStack(moved, "t")) - a.ravel()[sp].reshape(6, 6)).max() <= 1e-15


def test_localization_examples():
    uniform = np.full((10, 10), 0.01)
    mask = np.zeros((10, 10), bool)
    mask[:1, :] = True
    assert localization_score(uniform, mask) == pytest.approx(0.10, abs=1e-12)
    inside = np.zeros((10, 10))
    inside[0, 3] = 1
    assert localization_score(inside, mask) == 1.0
    rig = np.zeros((10, 10))
    rig[0, :] = 0.07
    rig[5:, :] = 0.3 / 50
    assert localization_score(rig, mask) == pytest.approx(0.70, abs=1e-6)
    with pytest.raises(DomainError):
        localization_score(uniform, np.zeros((10, 10), bool))


def test_localization_resizes_map_to_mask():
    m = np.zeros((16, 16))
    m[:8, :8] = 1 / 64
    mask = np.zeros((64, 64), bool)
    mask[:32, :32] = True
    assert localization_score(m, mask) == pytest.approx(1.0, abs=1e-12)
    mask2 = np.zeros((64, 64), bool)
    mask2[:16, :32] = True
    assert localization_score(m, mask2) == pytest.approx(0.5, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (8, 8), elements=st.floats(0.0, 1.0)),
       arrays(np.bool_, (8, 8)),
       st.floats(0.0, 5.0))
def test_localization_monotone(avg, mask, extra):
    if not mask.any() or avg.sum() <= 0:
        return
    avg = avg / avg.sum()
    before = localization_score(avg, mask)
    bumped = avg + extra * mask / mask.sum()
    after = localization_score(bumped / bumped.sum(), mask)
    assert after >= before - 1e-12


def test_overlay_shape():
    m = np.random.default_rng(0).random((16, 16))
    out = overlay(_img(), m / m.sum())
    assert out.shape == (64, 64, 3) and out.dtype == np.uint8
