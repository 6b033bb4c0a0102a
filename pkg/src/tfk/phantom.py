"""Synthetic brain phantoms and the toy image-synthesis rule used for training.

A phantom is an ellipsoidal brain: white-matter core, gray-matter shell and a
CSF ventricle, on a background of zeros. Images are produced by one pure
function of (tissue, concentration, modality, texture):

    image = base[modality][tissue] + response[modality](concentration) + texture

with ``texture`` i.i.d. Gaussian (sigma 0.03) per voxel. Tumor responses
are strictly monotone in concentration, so the rule can be inverted voxel by
voxel to read a tumor mask back off a generated image (:func:`segment`,
which smooths the estimate lightly before thresholding).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .conditioning import Modality, assemble
from .flowmatch import TrainingPair, counter_rng
from .grid import GridSpec, ScalarField3D, Tissue, TissueMap
from .growth import DEFAULT_POLICY, GrowthParams, simulate_at

TEXTURE_SIGMA = 0.03
STREAM_PHANTOM = 11
STREAM_TEXTURE = 12
SEGMENT_SMOOTH = 0.7
MIN_TUMOR_FRACTION = 0.03
MAX_REDRAWS = 32

# indexed by Tissue code: background, CSF, gray matter, white matter
BASE_INTENSITY = {
    Modality.T1: (0.0, 0.15, 0.65, 0.80),
    Modality.T1c: (0.0, 0.10, 0.30, 0.35),
    Modality.T2: (0.0, 0.90, 0.40, 0.25),
    Modality.FLAIR: (0.0, 0.10, 0.40, 0.30),
}
# every image stays inside [0, 1] for any concentration in [0, 1]


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def tumor_response(modality: Modality, c: np.ndarray) -> np.ndarray:
    """Intensity change caused by concentration ``c``; zero at c = 0.

    T1 darkens, T2 and FLAIR brighten linearly, T1c brightens linearly plus a
    sharp step around the enhancing threshold 0.6.
    """
    c = np.asarray(c, dtype=np.float64)
    m = Modality.parse(modality)
    if m is Modality.T1:
        return -0.60 * c
    if m is Modality.T2:
        return 0.60 * c
    if m is Modality.FLAIR:
        return 0.60 * c
    step = _sigmoid((c - 0.6) / 0.05) - _sigmoid(-0.6 / 0.05)
    return 0.45 * c + 0.20 * step


_INV_GRID = np.linspace(0.0, 1.0, 2001)


def invert_response(modality: Modality, delta: np.ndarray) -> np.ndarray:
    """Concentration whose response equals ``delta``, clipped to [0, 1]."""
    r = tumor_response(modality, _INV_GRID)
    if r[-1] < r[0]:
        return np.interp(-np.asarray(delta), -r, _INV_GRID)
    return np.interp(delta, r, _INV_GRID)


def base_image(tissue: TissueMap, modality: Modality) -> np.ndarray:
    table = np.asarray(BASE_INTENSITY[Modality.parse(modality)])
    return table[tissue.labels].reshape(tissue.spec.shape)


def synthesize(tissue: TissueMap, conc: ScalarField3D, modality: Modality,
               texture: np.ndarray | None = None) -> np.ndarray:
    """Toy ground-truth image, shape (nz, ny, nx)."""
    img = base_image(tissue, modality) + tumor_response(modality, conc.array)
    if texture is not None:
        img = img + texture
    return img


def texture_for(spec: GridSpec, seed: int, index: int) -> np.ndarray:
    return TEXTURE_SIGMA * counter_rng(seed, STREAM_TEXTURE, index).standard_normal(spec.shape)


def estimate_concentration(image: np.ndarray, tissue: TissueMap, modality: Modality) -> np.ndarray:
    """Invert the synthesis rule; voxels outside gray/white matter read 0."""
    img = np.asarray(image, dtype=np.float64).reshape(tissue.spec.shape)
    c = invert_response(modality, img - base_image(tissue, modality))
    return np.where(tissue.parenchyma_mask().reshape(tissue.spec.shape), c, 0.0)


def segment(image: np.ndarray, tissue: TissueMap, modality: Modality,
            threshold: float = 0.2, smooth: float = SEGMENT_SMOOTH) -> np.ndarray:
    """Boolean whole-tumor mask (flat) read off an image via the inverted rule.

    The concentration estimate is Gaussian-smoothed (sigma ``smooth`` voxels)
    before thresholding so per-voxel texture does not flip labels; pass
    ``smooth=0`` for the bare inversion.
    """
    est = estimate_concentration(image, tissue, modality)
    if smooth > 0:
        est = ndimage.gaussian_filter(est, smooth, mode="nearest")
    keep = tissue.parenchyma_mask().reshape(tissue.spec.shape)
    return ((est >= threshold) & keep).reshape(-1)


# -- phantoms -----------------------------------------------------------------------

@dataclass(frozen=True)
class PhantomShape:
    center: tuple[float, float, float]  # voxel coordinates (x, y, z)
    semi_axes: tuple[float, float, float]  # voxels
    gm_thickness: float = 1.5
    ventricle_center: tuple[float, float, float] | None = None
    ventricle_semi_axes: tuple[float, float, float] = (1.5, 1.0, 1.0)


def make_phantom(spec: GridSpec, shape: PhantomShape | None = None) -> TissueMap:
    if shape is None:
        c = ((spec.nx - 1) / 2, (spec.ny - 1) / 2, (spec.nz - 1) / 2)
        shape = PhantomShape(center=c,
                             semi_axes=(0.44 * spec.nx, 0.44 * spec.ny, 0.44 * spec.nz),
                             ventricle_center=(c[0] - 0.12 * spec.nx, c[1], c[2]),
                             ventricle_semi_axes=(0.1 * spec.nx, 0.07 * spec.ny, 0.07 * spec.nz))
    z, y, x = np.meshgrid(np.arange(spec.nz), np.arange(spec.ny), np.arange(spec.nx),
                          indexing="ij")

    def ellipsoid(center, axes):
        return sum(((q - c0) / a) ** 2 for q, c0, a in zip((x, y, z), center, axes))

    r = ellipsoid(shape.center, shape.semi_axes)
    inner = ellipsoid(shape.center, tuple(max(a - shape.gm_thickness, 0.5)
                                          for a in shape.semi_axes))
    lab = np.full(spec.shape, Tissue.BACKGROUND, dtype=np.uint8)
    lab[r <= 1.0] = Tissue.GRAY_MATTER
    lab[inner <= 1.0] = Tissue.WHITE_MATTER
    if shape.ventricle_center is not None:
        lab[ellipsoid(shape.ventricle_center, shape.ventricle_semi_axes) <= 1.0] = Tissue.CSF
    return TissueMap.from_array(spec, lab)


def random_phantom(spec: GridSpec, rng: np.random.Generator) -> TissueMap:
    mid = np.array([(spec.nx - 1) / 2, (spec.ny - 1) / 2, (spec.nz - 1) / 2])
    n = np.array([spec.nx, spec.ny, spec.nz], dtype=float)
    center = mid + rng.uniform(-0.04, 0.04, 3) * n
    axes = rng.uniform(0.38, 0.47, 3) * n
    vc = center + np.array([rng.uniform(-0.15, 0.15), rng.uniform(-0.05, 0.05), 0.0]) * n
    va = rng.uniform(0.05, 0.11, 3) * n
    return make_phantom(spec, PhantomShape(tuple(center), tuple(axes),
                                           gm_thickness=float(rng.uniform(1.0, 2.0)),
                                           ventricle_center=tuple(vc),
                                           ventricle_semi_axes=tuple(va)))


def random_growth(tissue: TissueMap, rng: np.random.Generator) -> tuple[GrowthParams, float]:
    """Random seed inside white matter, growth parameters and duration (days)."""
    wm = np.argwhere(tissue.array == Tissue.WHITE_MATTER)  # (z, y, x)
    z, y, x = wm[rng.integers(len(wm))]
    params = GrowthParams(seed_center=(float(x), float(y), float(z)),
                          rho=float(rng.uniform(0.02, 0.06)),
                          d_white=float(rng.uniform(0.1, 0.3)),
                          seed_sigma=float(rng.uniform(1.5, 2.5)),
                          seed_amplitude=float(rng.uniform(0.5, 1.0)))
    return params, float(rng.uniform(10.0, 60.0))


@dataclass
class ToyCase:
    tissue: TissueMap
    conc: ScalarField3D
    modality: Modality
    image: np.ndarray  # (nz, ny, nx)
    params: GrowthParams
    t_days: float


def toy_case(spec: GridSpec, seed: int, index: int, dt: float = 0.5) -> ToyCase:
    """One synthetic (tissue, concentration, image) triple, reproducible from (seed, index).

    Growth draws whose whole tumor covers less than MIN_TUMOR_FRACTION of the
    parenchyma are redrawn from the same stream, so every case shows a tumor.
    """
    rng = counter_rng(seed, STREAM_PHANTOM, index)
    tissue = random_phantom(spec, rng)
    need = max(1, int(MIN_TUMOR_FRACTION * tissue.parenchyma_mask().sum()))
    for _ in range(MAX_REDRAWS):
        params, t = random_growth(tissue, rng)
        conc = simulate_at(tissue, params, [t], dt)[-1][1]
        if np.count_nonzero(conc.values >= DEFAULT_POLICY.background_below) >= need:
            break
    modality = Modality(index % len(Modality))
    image = synthesize(tissue, conc, modality, texture_for(spec, seed, index))
    return ToyCase(tissue, conc, modality, image, params, t)


def toy_dataset(spec: GridSpec, n: int, seed: int, start: int = 0) -> list[ToyCase]:
    return [toy_case(spec, seed, i) for i in range(start, start + n)]


def to_training_pairs(cases) -> list[TrainingPair]:
    return [TrainingPair(c.image[None], assemble(c.tissue, c.conc, c.modality)) for c in cases]
