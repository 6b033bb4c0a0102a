"""Conditioning input for the velocity model: modality plus spatial channels.

The spatial stack is three one-hot tissue channels (CSF, gray matter, white
matter) followed by the tumor concentration, all at image resolution.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import ConcentrationOutOfRange, ShapeMismatch
from .grid import GridSpec, ScalarField3D, Tissue, TissueMap

SPATIAL_CHANNELS = 4


class Modality(enum.IntEnum):
    # codes are written into checkpoints; never renumber
    T1 = 0
    T1c = 1
    T2 = 2
    FLAIR = 3

    @classmethod
    def parse(cls, name) -> "Modality":
        if isinstance(name, Modality):
            return name
        if isinstance(name, (int, np.integer)):
            return cls(int(name))
        for m in cls:
            if m.name.lower() == str(name).lower():
                return m
        raise ValueError(f"unknown modality {name!r}")


@dataclass(frozen=True, eq=False)
class ConditioningTensor:
    spec: GridSpec
    channels: np.ndarray  # (4, nz, ny, nx)
    modality: Modality

    @property
    def tissue_channels(self) -> np.ndarray:
        return self.channels[:3]

    @property
    def concentration(self) -> np.ndarray:
        return self.channels[3]

    def with_modality(self, modality: Modality) -> "ConditioningTensor":
        return ConditioningTensor(self.spec, self.channels, Modality.parse(modality))

    def __eq__(self, other) -> bool:
        return (isinstance(other, ConditioningTensor) and self.spec == other.spec
                and self.modality == other.modality
                and np.array_equal(self.channels, other.channels))


def assemble(tissue: TissueMap, conc: ScalarField3D, modality) -> ConditioningTensor:
    if tissue.spec != conc.spec:
        raise ShapeMismatch("tissue and concentration must share a GridSpec")
    c = conc.values
    if c.size and (np.isnan(c).any() or c.min() < 0.0 or c.max() > 1.0):
        raise ConcentrationOutOfRange("concentration must lie in [0, 1]")
    spec = tissue.spec
    lab = tissue.labels
    ch = np.zeros((SPATIAL_CHANNELS, spec.size))
    ch[0] = lab == Tissue.CSF
    ch[1] = lab == Tissue.GRAY_MATTER
    ch[2] = lab == Tissue.WHITE_MATTER
    ch[3] = c
    ch = ch.reshape((SPATIAL_CHANNELS,) + spec.shape)
    ch.flags.writeable = False
    return ConditioningTensor(spec, ch, Modality.parse(modality))
