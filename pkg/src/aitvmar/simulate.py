"""Polychromatic projection data from ellipse phantoms, with Poisson noise.

Phantoms are JSON documents::

    {"fov_mm": 192.0,
     "metal_materials": ["titanium"],
     "primitives": [{"type": "ellipse", "center": [0, 0], "axes": [90, 70],
                     "angle": 0.0, "material": "soft_tissue"}, ...]}

Attenuation tables and spectra are CSV files with the headers
``energy_kev,<material>,...`` and ``energy_kev,weight``. Attenuation is per mm.
"""

import csv
from dataclasses import dataclass, field
import json
import math
from pathlib import Path

import numpy as np
from scipy.special import logsumexp


@dataclass(frozen=True)
class Ellipse:
    center: tuple
    axes: tuple
    material: str
    angle: float = 0.0

    def contains(self, x, y):
        c, s = math.cos(self.angle), math.sin(self.angle)
        dx, dy = x - self.center[0], y - self.center[1]
        xr = c * dx + s * dy
        yr = -s * dx + c * dy
        return (xr / self.axes[0]) ** 2 + (yr / self.axes[1]) ** 2 <= 1.0


@dataclass
class PhantomSpec:
    primitives: list
    fov_mm: float
    metal_materials: tuple = ()

    @property
    def materials(self):
        seen = []
        for p in self.primitives:
            if p.material not in seen:
                seen.append(p.material)
        return seen

    @classmethod
    def from_dict(cls, d):
        prims = []
        for p in d.get("primitives", []):
            if p.get("type", "ellipse") != "ellipse":
                raise ValueError(f"unsupported primitive type {p.get('type')!r}")
            prims.append(Ellipse(center=tuple(p["center"]), axes=tuple(p["axes"]),
                                 material=p["material"], angle=float(p.get("angle", 0.0))))
        return cls(prims, float(d["fov_mm"]), tuple(d.get("metal_materials", ())))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))

    def pixel_size(self, n):
        return self.fov_mm / n


@dataclass
class MaterialTable:
    energies: np.ndarray
    mu: dict
    metals: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        self.energies = np.asarray(self.energies, dtype=float)
        if np.any(np.diff(self.energies) <= 0):
            raise ValueError("material energies must be strictly increasing")
        for name, curve in self.mu.items():
            curve = np.asarray(curve, dtype=float)
            if curve.shape != self.energies.shape:
                raise ValueError(f"curve for {name!r} has wrong length")
            if np.any(curve < 0):
                raise ValueError(f"negative attenuation for {name!r}")
            self.mu[name] = curve

    def at(self, name, energy):
        if name not in self.mu:
            raise KeyError(f"unknown material {name!r}")
        if not self.energies[0] <= energy <= self.energies[-1]:
            raise ValueError(f"energy {energy} keV outside table range")
        return float(np.interp(energy, self.energies, self.mu[name]))

    def is_metal(self, name):
        return name in self.metals

    @classmethod
    def load(cls, path, metals=()):
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header = [h.strip() for h in rows[0]]
        if header[0] != "energy_kev" or len(header) < 2:
            raise ValueError("material table header must be 'energy_kev,<material>,...'")
        data = np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=float)
        mu = {name: data[:, k + 1] for k, name in enumerate(header[1:])}
        return cls(data[:, 0], mu, frozenset(metals))


@dataclass
class Spectrum:
    energies: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.energies = np.asarray(self.energies, dtype=float)
        w = np.asarray(self.weights, dtype=float)
        if np.any(np.diff(self.energies) <= 0):
            raise ValueError("spectrum energies must be strictly increasing")
        if np.any(w < 0) or not np.any(w > 0):
            raise ValueError("spectrum weights must be >= 0 with at least one positive")
        self.weights = w / w.sum()

    @classmethod
    def monochromatic(cls, energy):
        return cls([energy], [1.0])

    @classmethod
    def load(cls, path):
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if [h.strip() for h in rows[0]] != ["energy_kev", "weight"]:
            raise ValueError("spectrum header must be 'energy_kev,weight'")
        data = np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=float)
        return cls(data[:, 0], data[:, 1])


@dataclass(frozen=True)
class NoiseParams:
    S0: float = 1e5
    seed: int = 0

    def __post_init__(self):
        if not self.S0 >= 1:
            raise ValueError("photon count S0 must be >= 1")


def _pixel_centres(n, pixel_size):
    x = (np.arange(n) - (n - 1) / 2.0) * pixel_size
    return np.meshgrid(x, -x)


def _top_material(ph, n):
    """Index into ``ph.materials`` of the topmost primitive per pixel, -1 for air."""
    X, Y = _pixel_centres(n, ph.pixel_size(n))
    names = ph.materials
    top = np.full((n, n), -1, dtype=int)
    for prim in ph.primitives:
        top[prim.contains(X, Y)] = names.index(prim.material)
    return top


def rasterize(ph, n, energy, mt):
    """Monochromatic attenuation image at ``energy`` keV."""
    top = _top_material(ph, n)
    out = np.zeros((n, n))
    for k, name in enumerate(ph.materials):
        out[top == k] = mt.at(name, energy)
    return out


def material_maps(ph, n):
    """Disjoint indicator images, one per material, keyed by material name."""
    top = _top_material(ph, n)
    return {name: (top == k).astype(float) for k, name in enumerate(ph.materials)}


def metal_mask(ph, n):
    maps = material_maps(ph, n)
    out = np.zeros((n, n), dtype=bool)
    for name, m in maps.items():
        if name in ph.metal_materials:
            out |= m > 0
    return out


def poly_project(ph, op, sp, mt):
    """Polychromatic log-attenuation sinogram ``Y0`` through the projector ``op``.

    Every spectrum energy carrying weight must appear exactly in the material
    table; no interpolation across energy grids is done.
    """
    n = op.image_shape[0]
    maps = material_maps(ph, n)
    idx = []
    for e, w in zip(sp.energies, sp.weights):
        if w == 0:
            continue
        hit = np.nonzero(np.isclose(mt.energies, e, rtol=0, atol=1e-9))[0]
        if hit.size == 0:
            raise ValueError(f"spectrum energy {e} keV not present in material table")
        idx.append((hit[0], w))
    if not idx:
        raise ValueError("no common energies between spectrum and material table")
    lengths = {name: op.forward(m) for name, m in maps.items()}
    expo = []
    logw = []
    for k, w in idx:
        total = np.zeros(op.sino_shape)
        for name, L in lengths.items():
            total += mt.mu[name][k] * L
        expo.append(-total)
        logw.append(math.log(w))
    expo = np.stack(expo)
    logw = np.array(logw)[:, None, None]
    y0 = -logsumexp(expo + logw, axis=0)
    return np.maximum(y0, 0.0)


def add_poisson(Y0, noise):
    """Poisson noise on transmitted counts, then log with a ``1/S0`` floor.

    ``noise.S0 = inf`` returns a copy of ``Y0`` unchanged. Each view (row) draws
    from its own stream spawned from ``noise.seed``.
    """
    Y0 = np.asarray(Y0, dtype=float)
    if np.any(Y0 < 0):
        raise ValueError("Y0 must be non-negative")
    S0 = float(noise.S0)
    if math.isinf(S0):
        return Y0.copy()
    lam = S0 * np.exp(-Y0)
    streams = np.random.SeedSequence(noise.seed).spawn(Y0.shape[0])
    counts = np.empty_like(Y0)
    for i, ss in enumerate(streams):
        counts[i] = np.random.Generator(np.random.PCG64(ss)).poisson(lam[i])
    return -np.log(np.maximum(counts / S0, 1.0 / S0))


DATA_DIR = Path(__file__).parent / "data"


def example_inputs(single_metal=False):
    """The shipped phantom, material table and spectrum."""
    name = "phantom_single_metal.json" if single_metal else "phantom_two_metals.json"
    ph = PhantomSpec.load(DATA_DIR / name)
    mt = MaterialTable.load(DATA_DIR / "materials.csv", metals=ph.metal_materials)
    spec = Spectrum.load(DATA_DIR / "spectrum.csv")
    return ph, mt, spec
