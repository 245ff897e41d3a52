import math
from pathlib import Path

import numpy as np
import pytest

from aitvmar.projector import MatrixOperator
from aitvmar.simulate import (Ellipse, MaterialTable, NoiseParams, PhantomSpec, Spectrum,
                              add_poisson, example_inputs, material_maps, metal_mask,
                              poly_project, rasterize)

DATA = Path(__file__).parent / "data"


def test_ellipse_contains_matches_formula(rng):
    e = Ellipse(center=(3.0, -2.0), axes=(5.0, 2.0), material="x", angle=0.3)
    pts = rng.uniform(-8, 8, size=(500, 2))
    c, s = math.cos(0.3), math.sin(0.3)
    for x, y in pts:
        dx, dy = x - 3.0, y + 2.0
        xr, yr = c * dx + s * dy, -s * dx + c * dy
        assert e.contains(x, y) == ((xr / 5) ** 2 + (yr / 2) ** 2 <= 1)


def _table():
    return MaterialTable(np.array([50.0, 70.0]), {"a": np.array([0.2, 0.1]), "b": np.array([1.0, 0.5])},
                         frozenset({"b"}))


def test_material_table_lookup():
    mt = _table()
    assert mt.at("a", 60.0) == pytest.approx(0.15)
    with pytest.raises(KeyError):
        mt.at("c", 60.0)
    with pytest.raises(ValueError):
        mt.at("a", 90.0)
    assert mt.is_metal("b") and not mt.is_metal("a")


def test_spectrum_normalised_and_validated():
    sp = Spectrum([50.0, 70.0], [1.0, 3.0])
    assert np.allclose(sp.weights, [0.25, 0.75])
    with pytest.raises(ValueError):
        Spectrum([50.0, 70.0], [0.0, 0.0])
    assert Spectrum.monochromatic(70.0).weights.tolist() == [1.0]


def test_poly_project_two_energy_oracle():
    # one pixel of material a, one of b; rays with known path lengths
    ph = PhantomSpec([Ellipse((-1.0, 0.0), (0.6, 0.6), "a"), Ellipse((1.0, 0.0), (0.6, 0.6), "b")],
                     fov_mm=4.0, metal_materials=("b",))
    # 2x2 image, pixel size 2: left column is a, right column is b (top row only)
    maps = material_maps(ph, 2)
    assert maps["a"][0, 0] == 0 and maps["a"].sum() == 0  # pixel centres (+-1, +-1) miss the discs
    ph = PhantomSpec([Ellipse((-1.0, 1.0), (0.6, 0.6), "a"), Ellipse((1.0, 1.0), (0.6, 0.6), "b")],
                     fov_mm=4.0, metal_materials=("b",))
    maps = material_maps(ph, 2)
    assert maps["a"][0, 0] == 1 and maps["b"][0, 1] == 1
    A = np.array([[2.0, 3.0, 0.0, 0.0],
                  [0.0, 1.5, 0.0, 0.0]])
    op = MatrixOperator(A, (2, 2), (1, 2))
    mt = _table()
    sp = Spectrum([50.0, 70.0], [0.4, 0.6])
    Y0 = poly_project(ph, op, sp, mt)
    la, lb = np.array([2.0, 0.0]), np.array([3.0, 1.5])
    expect = -np.log(0.4 * np.exp(-(0.2 * la + 1.0 * lb)) + 0.6 * np.exp(-(0.1 * la + 0.5 * lb)))
    assert np.allclose(Y0.ravel(), expect, rtol=1e-13)
    with pytest.raises(ValueError):
        poly_project(ph, op, Spectrum([60.0], [1.0]), mt)


def test_rasterize_topmost_wins():
    ph = PhantomSpec([Ellipse((0, 0), (10, 10), "a"), Ellipse((0, 0), (3, 3), "b")], fov_mm=20.0,
                     metal_materials=("b",))
    img = rasterize(ph, 20, 50.0, _table())
    assert img[10, 10] == 1.0 and img[10, 3] == pytest.approx(0.2) and img[0, 0] == 0
    assert metal_mask(ph, 20).sum() == (img == 1.0).sum()


def test_noise_golden():
    Y0 = np.linspace(0.0, 12.0, 8 * 12).reshape(8, 12)
    Y0[3, 5] = 40.0
    Y = add_poisson(Y0, NoiseParams(S0=1e5, seed=20240611))
    golden = np.load(DATA / "golden_poisson.npy")
    assert np.array_equal(Y, golden)
    assert Y[3, 5] == math.log(1e5)


def test_noise_clamp_value():
    Y = add_poisson(np.full((2, 3), 60.0), NoiseParams(S0=1e5, seed=0))
    assert np.all(Y == pytest.approx(11.512925464970229, abs=0))


def test_noise_inf_and_validation():
    Y0 = np.ones((2, 2))
    out = add_poisson(Y0, NoiseParams(S0=math.inf))
    assert np.array_equal(out, Y0) and out is not Y0
    with pytest.raises(ValueError):
        add_poisson(-Y0, NoiseParams())
    with pytest.raises(ValueError):
        NoiseParams(S0=0.5)


def test_noise_is_seeded():
    Y0 = np.full((4, 5), 2.0)
    a = add_poisson(Y0, NoiseParams(1e4, seed=3))
    b = add_poisson(Y0, NoiseParams(1e4, seed=3))
    c = add_poisson(Y0, NoiseParams(1e4, seed=4))
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def test_shipped_inputs_load():
    ph, mt, sp = example_inputs()
    assert set(ph.materials) <= set(mt.mu)
    assert ph.metal_materials == ("titanium",)
    ph1, _, _ = example_inputs(single_metal=True)
    assert len(ph1.primitives) == len(ph.primitives) - 1
