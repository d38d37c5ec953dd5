import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qalaskit.dictionary import (
    B1Bins,
    DictionaryCache,
    GridSpec,
    expand_grid,
    expand_segments,
    generate_dictionary,
    match_volume,
    match_voxel,
    read_qdict,
    write_qdict,
)
from qalaskit.errors import ConfigError, FormatError, ShapeError
from qalaskit.signal_model import SequenceTiming, TissueParams, simulate
from qalaskit.volume_io import CONTRAST_CHANNELS, SignalVolume

SMALL_GRID = GridSpec(
    t1_segments=((400.0, 2200.0, 150.0),),
    t2_segments=((30.0, 280.0, 25.0),),
    ie_segments=((0.6, 1.0, 0.05),),
)


@pytest.fixture(scope="module")
def small_dict():
    return generate_dictionary(SequenceTiming(), SMALL_GRID, 1.0)


def naive_best_atom(signal, dictionary):
    """Dumb full scan, one dot product at a time."""
    unit = signal / np.linalg.norm(signal)
    best, best_k = -np.inf, -1
    for k in range(dictionary.k):
        s = float(np.dot(unit, dictionary.atoms[k]))
        if s > best:
            best, best_k = s, k
    return best_k


class TestExpandGrid:
    def test_ie_segment_has_26_values(self):
        vals = expand_segments(((0.5, 1.0, 0.02),))
        assert vals.size == 26
        assert vals[0] == 0.5 and vals[-1] == 1.0

    def test_single_t1_segment_has_600_values(self):
        vals = expand_segments(((5.0, 3000.0, 5.0),))
        assert vals.size == 600

    def test_end_appended_when_off_step(self):
        vals = expand_segments(((1.0, 350.0, 2.0),))
        assert vals[-2] == 349.0 and vals[-1] == 350.0

    def test_boundary_dedup(self):
        vals = expand_segments(((5.0, 3000.0, 5.0), (3000.0, 5000.0, 100.0)))
        assert vals.size == 600 + 20
        assert np.all(np.diff(vals) > 0)

    def test_default_grid_sizes(self):
        t1, t2, ie = expand_grid(GridSpec())
        assert t1.size == 620 and t2.size == 217 and ie.size == 26

    def test_bad_specs_rejected(self):
        with pytest.raises(ConfigError):
            GridSpec(t1_segments=((10.0, 5.0, 1.0),))
        with pytest.raises(ConfigError):
            GridSpec(t2_segments=((1.0, 10.0, 0.0),))
        with pytest.raises(ConfigError):
            GridSpec(ie_segments=((0.5, 0.9, 0.1), (0.8, 1.0, 0.1)))


class TestGenerateDictionary:
    def test_single_atom_grid(self):
        spec = GridSpec(
            t1_segments=((800.0, 800.0, 1.0),),
            t2_segments=((90.0, 90.0, 1.0),),
            ie_segments=((0.9, 0.9, 0.1),),
        )
        timing = SequenceTiming()
        d = generate_dictionary(timing, spec, 1.0)
        assert d.k == 1
        s = simulate(timing, TissueParams(800.0, 90.0, 1.0, 0.9), 1.0)
        np.testing.assert_allclose(d.atoms[0], s / np.linalg.norm(s), rtol=1e-14)
        np.testing.assert_allclose(d.norms[0], np.linalg.norm(s), rtol=1e-14)

    def test_cardinality_product_law(self, small_dict):
        t1, t2, ie = expand_grid(SMALL_GRID)
        assert small_dict.k == t1.size * t2.size * ie.size

    def test_rows_unit_norm(self, small_dict):
        np.testing.assert_allclose(np.linalg.norm(small_dict.atoms, axis=1), 1.0, atol=1e-12)

    def test_deterministic_regeneration(self, small_dict):
        again = generate_dictionary(SequenceTiming(), SMALL_GRID, 1.0)
        assert np.array_equal(again.atoms, small_dict.atoms)
        assert np.array_equal(again.norms, small_dict.norms)
        assert np.array_equal(again.params, small_dict.params)

    def test_lexicographic_param_order(self, small_dict):
        p = small_dict.params
        order = np.lexsort((p[:, 2], p[:, 1], p[:, 0]))
        np.testing.assert_array_equal(order, np.arange(small_dict.k))
        assert np.unique(p, axis=0).shape[0] == small_dict.k


class TestMatchVoxel:
    def test_atom_self_consistency(self, small_dict):
        rng = np.random.default_rng(8)
        for k in rng.integers(0, small_dict.k, 50):
            c = rng.uniform(0.1, 5.0)
            signal = c * small_dict.norms[k] * small_dict.atoms[k]
            m = match_voxel(signal, small_dict)
            assert m.index == k
            assert (m.t1_ms, m.t2_ms, m.ie) == tuple(small_dict.params[k])
            assert m.pd == pytest.approx(c, rel=1e-10)
            assert m.residual < 1e-10

    def test_atom_recovery_exact_for_all_atoms(self, small_dict):
        for k in range(small_dict.k):
            m = match_voxel(1.7 * small_dict.norms[k] * small_dict.atoms[k], small_dict)
            assert m.index == k

    @given(c=st.floats(1e-3, 1e3))
    @settings(max_examples=30, deadline=None)
    def test_scale_invariance(self, c):
        d = generate_dictionary(SequenceTiming(), SMALL_GRID, 1.0)
        signal = simulate(SequenceTiming(), TissueParams(733.0, 81.0, 1.0, 0.83), 1.0)
        m1 = match_voxel(signal, d)
        m2 = match_voxel(c * signal, d)
        assert m2.index == m1.index
        assert m2.pd == pytest.approx(c * m1.pd, rel=1e-9)

    def test_zero_signal_sentinel(self, small_dict):
        m = match_voxel(np.zeros(5), small_dict)
        assert (m.t1_ms, m.t2_ms, m.ie, m.pd, m.score) == (0.0, 0.0, 0.0, 0.0, 0.0)

    def test_bad_shape(self, small_dict):
        with pytest.raises(ShapeError):
            match_voxel(np.zeros(4), small_dict)

    def test_matches_naive_full_scan_oracle(self, small_dict):
        rng = np.random.default_rng(9)
        timing = SequenceTiming()
        tissues = TissueParams(
            rng.uniform(350, 2300, 200),
            rng.uniform(25, 300, 200),
            rng.uniform(0.2, 2.0, 200),
            rng.uniform(0.6, 1.0, 200),
        )
        signals = simulate(timing, tissues, 1.0).T
        for v in range(signals.shape[0]):
            assert match_voxel(signals[v], small_dict).index == naive_best_atom(signals[v], small_dict)


class TestB1Bins:
    def test_every_clamped_value_maps_to_one_bin(self):
        bins = B1Bins()
        vals = np.linspace(0.4, 1.6, 4001)
        idx = bins.index_of(vals)
        assert idx.min() == 0 and idx.max() == bins.n_bins - 1
        assert np.all((idx >= 0) & (idx < bins.n_bins))

    def test_centers(self):
        bins = B1Bins(lo=0.0, hi=1.0, n_bins=4)
        np.testing.assert_allclose(bins.centers, [0.125, 0.375, 0.625, 0.875])

    def test_default_range(self):
        bins = B1Bins()
        assert bins.lo == 0.65 and bins.hi == 1.35 and bins.n_bins == 100


class TestMatchVolume:
    def make_phantom_volume(self, rng, b1_value=1.0, nz=2, ny=4, nx=5):
        timing = SequenceTiming()
        t1v, t2v, iev = expand_grid(SMALL_GRID)
        n = nz * ny * nx
        t1 = rng.choice(t1v, n)
        t2 = rng.choice(t2v, n)
        ie = rng.choice(iev, n)
        pd = rng.uniform(0.5, 1.5, n)
        b1 = np.full(n, b1_value)
        sig = simulate(timing, TissueParams(t1, t2, pd, ie), b1)
        data = np.concatenate([sig, b1[None]], axis=0).reshape(6, nz, ny, nx)
        vol = SignalVolume(data, CONTRAST_CHANNELS + ("b1",))
        truth = dict(t1=t1, t2=t2, ie=ie, pd=pd)
        return timing, vol, truth

    def test_uniform_b1_generates_one_subdictionary(self):
        rng = np.random.default_rng(10)
        timing, vol, _ = self.make_phantom_volume(rng)
        cache = DictionaryCache()
        match_volume(vol, timing, SMALL_GRID, cache=cache)
        assert cache.misses == 1

    def test_on_grid_recovery_everywhere(self):
        # the bin-center B1 differs slightly from the simulated 1.0, so snap
        # to the exact grid values is the expected behavior at matching B1
        rng = np.random.default_rng(11)
        bins = B1Bins(lo=0.995, hi=1.005, n_bins=1)  # center exactly 1.0
        timing, vol, truth = self.make_phantom_volume(rng)
        maps = match_volume(vol, timing, SMALL_GRID, bins=bins)
        np.testing.assert_array_equal(maps.t1_ms.reshape(-1), truth["t1"])
        np.testing.assert_array_equal(maps.t2_ms.reshape(-1), truth["t2"])
        np.testing.assert_array_equal(maps.ie.reshape(-1), truth["ie"])
        np.testing.assert_allclose(maps.pd.reshape(-1), truth["pd"], rtol=1e-9)

    def test_voxel_order_independence(self):
        rng = np.random.default_rng(12)
        timing, vol, _ = self.make_phantom_volume(rng, nz=1)
        maps = match_volume(vol, timing, SMALL_GRID)
        perm = rng.permutation(vol.n_voxels)
        data = vol.data.reshape(6, -1)[:, perm].reshape(vol.data.shape)
        maps_p = match_volume(SignalVolume(data, vol.channel_names), timing, SMALL_GRID)
        np.testing.assert_array_equal(maps_p.t1_ms.reshape(-1), maps.t1_ms.reshape(-1)[perm])

    def test_cache_prevents_regeneration(self):
        rng = np.random.default_rng(13)
        timing, vol, _ = self.make_phantom_volume(rng)
        cache = DictionaryCache()
        match_volume(vol, timing, SMALL_GRID, cache=cache)
        match_volume(vol, timing, SMALL_GRID, cache=cache)
        assert cache.misses == 1 and cache.hits >= 1

    def test_requires_b1_channel(self):
        vol = SignalVolume(np.ones((5, 1, 2, 2)), CONTRAST_CHANNELS)
        with pytest.raises(ShapeError):
            match_volume(vol, SequenceTiming(), SMALL_GRID)

    def test_chunking_does_not_change_results(self):
        rng = np.random.default_rng(14)
        timing, vol, _ = self.make_phantom_volume(rng, nz=1, ny=6, nx=7)
        m1 = match_volume(vol, timing, SMALL_GRID, voxel_chunk=5)
        m2 = match_volume(vol, timing, SMALL_GRID, voxel_chunk=10_000)
        np.testing.assert_array_equal(m1.stack(), m2.stack())


class TestQdictIO:
    def test_round_trip(self, small_dict, tmp_path):
        p = str(tmp_path / "d.qdict")
        write_qdict(small_dict, p)
        again = read_qdict(p)
        assert again.k == small_dict.k
        assert again.timing_fingerprint == small_dict.timing_fingerprint
        assert again.b1_value == small_dict.b1_value
        np.testing.assert_array_equal(again.params, small_dict.params)
        np.testing.assert_array_equal(
            again.atoms, small_dict.atoms.astype(np.float32).astype(np.float64)
        )

    def test_truncated_rejected(self, small_dict, tmp_path):
        p = str(tmp_path / "d.qdict")
        write_qdict(small_dict, p)
        raw = open(p, "rb").read()
        open(p, "wb").write(raw[:-4])
        with pytest.raises(FormatError, match="bytes"):
            read_qdict(p)

    def test_wrong_magic_rejected(self, tmp_path):
        p = str(tmp_path / "d.qdict")
        open(p, "wb").write(b'{"magic": "X"}\n')
        with pytest.raises(FormatError):
            read_qdict(p)
