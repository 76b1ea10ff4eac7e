import itertools

import numpy as np
import pytest
import torch

from buildfuse.fusion import (
    Ensemble,
    Member,
    fuse_average,
    fuse_deep,
    fuse_linear,
    fuse_vote,
    load_ensemble,
    stack_deep_inputs,
)
from buildfuse.jaccard import jaccard_image
from buildfuse.segnet import (
    LinearCombiner,
    UNetConfig,
    build_unet,
    init_weights,
    save_checkpoint,
    squash,
)
from buildfuse.tilestore import SceneSpec, generate_scene
from buildfuse.trainer import Sample, TrainConfig, train


def const(v, shape=(4, 4)):
    return np.full(shape, v, dtype=np.float32)


class TestAverage:
    def test_example(self):
        out = fuse_average([const(0.2), const(0.8), const(0.5)])
        np.testing.assert_allclose(out, 0.5, atol=1e-7)

    def test_permutation_invariant(self):
        rng = np.random.default_rng(0)
        maps = [rng.random((6, 6)).astype(np.float32) for _ in range(4)]
        ref = fuse_average(maps)
        for perm in itertools.permutations(maps):
            assert np.array_equal(fuse_average(list(perm)), ref)

    def test_within_member_range(self):
        rng = np.random.default_rng(1)
        maps = [rng.random((6, 6)).astype(np.float32) for _ in range(3)]
        out = fuse_average(maps)
        stack = np.stack(maps)
        assert np.all(out >= stack.min(0) - 1e-7) and np.all(out <= stack.max(0) + 1e-7)

    def test_mismatched_shapes(self):
        with pytest.raises(ValueError):
            fuse_average([const(0.1), const(0.1, (4, 5))])

    def test_empty(self):
        with pytest.raises(ValueError):
            fuse_average([])


class TestVote:
    def test_two_of_three(self):
        res = fuse_vote([const(1.0), const(1.0), const(0.0)])
        np.testing.assert_allclose(res.votes, 2 / 3, rtol=1e-6)
        # 1 - |2 * 2/3 - 1|
        np.testing.assert_allclose(res.uncertainty, 2 / 3, rtol=1e-6)

    def test_uncertainty_symmetric_in_k(self):
        for m in range(2, 7):
            for k in range(m + 1):
                maps = [const(1.0)] * k + [const(0.0)] * (m - k)
                mirror = [const(0.0)] * k + [const(1.0)] * (m - k)
                assert np.array_equal(fuse_vote(maps).uncertainty, fuse_vote(mirror).uncertainty)

    @pytest.mark.parametrize("v", [0.0, 1.0])
    def test_unanimous_is_certain(self, v):
        res = fuse_vote([const(v)] * 3)
        assert np.all(res.uncertainty == 0.0)
        assert np.all(res.votes == v)

    def test_even_split(self):
        res = fuse_vote([const(0.9), const(0.1)])
        assert np.all(res.votes == 0.5)
        assert np.all(res.uncertainty == 1.0)
        assert res.meta["even_members"] is True

    def test_threshold_is_inclusive(self):
        assert np.all(fuse_vote([const(0.5), const(0.49), const(0.2)]).votes == np.float32(1 / 3))


class TestLinear:
    def test_equal_weights_match_mean_before_squash(self):
        rng = np.random.default_rng(2)
        maps = [rng.random((5, 5)).astype(np.float32) for _ in range(3)]
        comb = LinearCombiner(3)
        comb.set_weights([1 / 3] * 3, bias=0.0)
        pre = fuse_linear(maps, comb, pre_squash=True)
        np.testing.assert_allclose(pre, np.mean(maps, axis=0), atol=1e-6)
        post = fuse_linear(maps, comb)
        np.testing.assert_allclose(post, squash(torch.from_numpy(pre)).numpy(), atol=1e-6)

    def test_selector(self):
        rng = np.random.default_rng(3)
        maps = [rng.random((5, 5)).astype(np.float32) for _ in range(3)]
        comb = LinearCombiner(3)
        comb.set_weights([1.0, 0.0, 0.0], bias=0.0)
        np.testing.assert_allclose(fuse_linear(maps, comb, pre_squash=True), maps[0], atol=1e-7)

    def test_wrong_member_count(self):
        with pytest.raises(ValueError):
            fuse_linear([const(0.1)] * 2, LinearCombiner(3))


def _noise_member_weights(seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(12):
        y = np.zeros((16, 16), np.float32)
        for _ in range(2):
            r, c = rng.integers(0, 11, 2)
            h, w = rng.integers(3, 6, 2)
            y[r : r + h, c : c + w] = 1
        good1 = np.clip(y + rng.normal(0, 0.15, y.shape), 0, 1)
        noise = rng.random(y.shape)
        good3 = np.clip(y + rng.normal(0, 0.25, y.shape), 0, 1)
        samples.append(Sample(f"s{i}", np.stack([good1, noise, good3]).astype(np.float32), y))
    comb = LinearCombiner(3)
    init_weights(comb, seed)
    train(comb, samples[:9], samples[9:], TrainConfig(epochs=5, learning_rate=1e-2, seed=seed, augment=False))
    return comb.member_weights()


def test_linear_combiner_downweights_noise_member():
    hits = 0
    for seed in range(5):
        w = np.abs(_noise_member_weights(seed))
        hits += w[1] < min(w[0], w[2])
    assert hits >= 4


class TestDeep:
    def test_input_stacking_order(self):
        maps = [const(0.1 * (i + 1)) for i in range(3)]
        channels = np.arange(8, dtype=np.float32)[:, None, None] * np.ones((8, 4, 4), np.float32)
        x = stack_deep_inputs(maps, channels)
        assert x.shape == (11, 4, 4)
        np.testing.assert_allclose(x[:3, 0, 0], [0.1, 0.2, 0.3], rtol=1e-6)
        np.testing.assert_array_equal(x[3:, 0, 0], np.arange(8))

    def test_shape_and_channel_check(self):
        comb = init_weights(build_unet(UNetConfig(11, depth=2, base_width=4)), seed=0)
        rng = np.random.default_rng(4)
        maps = [rng.random((16, 16)).astype(np.float32) for _ in range(3)]
        out = fuse_deep(maps, rng.random((8, 16, 16)).astype(np.float32), comb)
        assert out.shape == (16, 16)
        with pytest.raises(ValueError):
            fuse_deep(maps[:2], rng.random((8, 16, 16)).astype(np.float32), comb)

    def test_member_order_matters(self):
        comb = init_weights(build_unet(UNetConfig(11, depth=2, base_width=4)), seed=1, bound=0.3)
        rng = np.random.default_rng(5)
        maps = [rng.random((16, 16)).astype(np.float32) for _ in range(3)]
        channels = rng.random((8, 16, 16)).astype(np.float32)
        a = fuse_deep(maps, channels, comb)
        b = fuse_deep([maps[1], maps[0], maps[2]], channels, comb)
        assert not np.array_equal(a, b)


def _overconfident_trial(seed: int) -> tuple[float, float]:
    rng = np.random.default_rng(seed)
    data = []
    for i in range(12):
        t = generate_scene(SceneSpec(width=32, height=32, n_buildings=3, size_range=(3, 8), seed=1000 * seed + i))
        y = t.mask.astype(np.float32)
        accurate = [np.clip(y + rng.normal(0, 0.2, y.shape), 0, 1).astype(np.float32) for _ in range(2)]
        data.append((accurate + [1 - y], t.channels, y))
    samples = [Sample(f"s{i}", stack_deep_inputs(m, c), y) for i, (m, c, y) in enumerate(data)]
    comb = init_weights(build_unet(UNetConfig(11, depth=1, base_width=8, conv_per_block=1)), seed)
    train(comb, samples[:8], samples[8:], TrainConfig(epochs=3, learning_rate=1e-2, seed=seed))
    held_out = data[8:]
    avg = np.mean([jaccard_image(y, fuse_average(m)) for m, _, y in held_out])
    deep = np.mean([jaccard_image(y, fuse_deep(m, c, comb)) for m, c, y in held_out])
    return float(avg), float(deep)


def test_saturated_wrong_member_hurts_average_more_than_deep():
    # two accurate members and one that outputs exactly the complement of the truth
    results = [_overconfident_trial(seed) for seed in range(5)]
    assert sum(deep > avg for avg, deep in results) >= 4, results


class TestEnsemble:
    def _members(self):
        return [
            Member(init_weights(build_unet(UNetConfig(3, depth=1, base_width=2)), seed=i), [i, i + 1, i + 2])
            for i in range(3)
        ]

    def test_requires_two_members(self):
        with pytest.raises(ValueError):
            Ensemble(self._members()[:1])

    def test_combiner_required(self):
        with pytest.raises(ValueError):
            Ensemble(self._members(), "deep")

    def test_unknown_fusion(self):
        with pytest.raises(ValueError):
            Ensemble(self._members(), "median")

    def test_manifest_round_trip(self, tmp_path):
        members = self._members()
        for i, m in enumerate(members):
            save_checkpoint(m.model, tmp_path / f"m{i}")
            m.checkpoint = f"m{i}"
        lin = LinearCombiner(3)
        lin.set_weights([0.5, 0.25, 0.25], 0.1)
        save_checkpoint(lin, tmp_path / "lin")
        ens = Ensemble(members, "linear", lin, "lin")
        ens.save_manifest(tmp_path / "ensemble.json")
        again = load_ensemble(tmp_path / "ensemble.json")
        x = np.random.default_rng(6).random((8, 8, 8)).astype(np.float32)
        assert np.array_equal(again.predict(x), ens.predict(x))
