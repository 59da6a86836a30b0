import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cfdsurrogate.batching import WindowGenerator, decode_sample, samples_per_case
from cfdsurrogate.datagen import UnsupportedDatasetError


def ramp_cases(n, t, f=2):
    # value encodes (case, timestep) so windows can be traced back
    return [np.stack([np.full(f, 1000 * c + s, dtype=np.float32) for s in range(t)]) for c in range(n)]


def test_sample_counts():
    assert samples_per_case(420) == 417
    assert 104 * samples_per_case(420) == 43_368
    assert samples_per_case(4) == 1
    assert samples_per_case(64) == 61
    assert 43_368 // 14 == 3_097


def test_full_batch_count():
    gen = WindowGenerator(ramp_cases(4, 10), batch_size=3)
    assert len(gen) == (4 * 7) // 3


def test_decode_against_enumeration():
    per = samples_per_case(420)
    pairs = [(c, o) for c in range(3) for o in range(per)]
    for s, want in enumerate(pairs):
        assert decode_sample(s, per) == want


def test_windows_never_straddle_cases():
    gen = WindowGenerator(ramp_cases(5, 9), batch_size=4, seed=3)
    for batch in gen:
        rows = np.concatenate([batch.observations, batch.targets], axis=1)[..., 0]
        case = rows // 1000
        assert np.all(case == case[:, :1])
        assert np.all(np.diff(rows, axis=1) == 1)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 6), st.integers(4, 12), st.integers(1, 5), st.integers(1, 4), st.integers(0, 99))
def test_epoch_ids_cover_all_but_tail(n, t, b, world, seed):
    gens = [WindowGenerator(ramp_cases(n, t, 1), b, seed=seed, rank=r, world=world) for r in range(world)]
    total = n * samples_per_case(t)
    for _ in range(2):
        shards = [set(g.shard().tolist()) for g in gens]
        union = set().union(*shards)
        assert sum(len(s) for s in shards) == len(union)
        assert len(union) == len(gens[0]) * b * world
        assert total - len(union) < b * world
        for g in gens:
            g.on_epoch_end()


def test_two_rank_shards_are_even_odd():
    a = WindowGenerator(ramp_cases(3, 10), 2, seed=1, rank=0, world=2)
    b = WindowGenerator(ramp_cases(3, 10), 2, seed=1, rank=1, world=2)
    used = len(a) * 4
    assert np.array_equal(a.shard(), a.indexes[:used][0::2])
    assert np.array_equal(b.shard(), b.indexes[:used][1::2])
    assert not set(a.shard()) & set(b.shard())


def test_global_batch_is_contiguous_slice():
    gens = [WindowGenerator(ramp_cases(3, 10), 2, seed=4, rank=r, world=3) for r in range(3)]
    for i in range(len(gens[0])):
        union = sorted(np.concatenate([g.batch_ids(i) for g in gens]).tolist())
        assert union == sorted(gens[0].indexes[i * 6:(i + 1) * 6].tolist())


def test_shuffle_permutation_and_determinism():
    a = WindowGenerator(ramp_cases(4, 28), 5, seed=9)
    b = WindowGenerator(ramp_cases(4, 28), 5, seed=9, rank=1, world=2)
    assert a.n_samples == 100
    first = a.indexes.copy()
    assert sorted(first.tolist()) == list(range(100))
    assert np.array_equal(first, b.indexes)
    a.on_epoch_end()
    assert not np.array_equal(first, a.indexes)
    assert sorted(a.indexes.tolist()) == list(range(100))


def test_unshuffled_is_identity():
    gen = WindowGenerator(ramp_cases(2, 6), 1, shuffle=False)
    gen.on_epoch_end()
    assert gen.indexes.tolist() == list(range(6))


def test_errors():
    with pytest.raises(UnsupportedDatasetError):
        WindowGenerator([np.zeros((5, 2)), np.zeros((6, 2))])
    with pytest.raises(UnsupportedDatasetError):
        WindowGenerator([np.zeros((3, 2))])
    with pytest.raises(IndexError):
        WindowGenerator(ramp_cases(1, 5), 1)[99]
