import numpy as np
import pytest

from poredet.data import split_dataset
from poredet.synth import InfeasiblePoresError, SynthConfig, generate, generate_dataset


def test_deterministic():
    a_img, a_p = generate(SynthConfig(seed=3))
    b_img, b_p = generate(SynthConfig(seed=3))
    np.testing.assert_array_equal(a_img, b_img)
    np.testing.assert_array_equal(a_p, b_p)
    c_img, _ = generate(SynthConfig(seed=4))
    assert not np.array_equal(a_img, c_img)


def test_invariants():
    for seed in range(5):
        cfg = SynthConfig(seed=seed)
        img, pores = generate(cfg)
        assert img.shape == (128, 128) and img.dtype == np.float32
        assert img.min() >= 0 and img.max() <= 1
        np.testing.assert_allclose(img * 255, np.rint(img * 255), atol=1e-4)
        assert len(pores) == cfg.pore_count
        assert pores.min() >= 8 and pores.max() <= 127 - 8
        d = np.abs(pores[:, None, :] - pores[None, :, :]).max(axis=2)
        np.fill_diagonal(d, 99)
        assert d.min() >= 8


def test_pores_brighter_than_surroundings_without_noise():
    img, pores = generate(SynthConfig(seed=1, noise_sigma=0.0))
    for r, c in pores:
        win = img[r - 2:r + 3, c - 2:c + 3]
        assert img[r, c] == win.max()


def test_zero_pores():
    img, pores = generate(SynthConfig(pore_count=0))
    assert pores.shape == (0, 2) and img.shape == (128, 128)


def test_infeasible_and_invalid():
    with pytest.raises(InfeasiblePoresError):
        generate(SynthConfig(pore_count=1000))
    with pytest.raises(ValueError):
        generate(SynthConfig(height=32))
    with pytest.raises(ValueError):
        generate(SynthConfig(pore_radius=(0.5, 1.0)))


def test_dataset_loads_as_benchmark(tmp_path):
    paths = generate_dataset(tmp_path, 30, SynthConfig(height=64, width=64, pore_count=10))
    assert paths[0].name == "000.pgm" and len(paths) == 30
    split = split_dataset(tmp_path, "benchmark")
    assert [len(split.train), len(split.validation), len(split.test)] == [15, 5, 10]
    img, pores = generate(SynthConfig(height=64, width=64, pore_count=10),
                          np.random.default_rng(np.random.SeedSequence(0).spawn(30)[0]))
    np.testing.assert_array_equal(split.train[0].pores, pores)
    np.testing.assert_allclose(split.train[0].image, img, atol=1e-6)
