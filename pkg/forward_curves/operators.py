"""Multiplicative operators M_h f = h f, kernel inversion and the Exp/Log maps."""

import logging
from dataclasses import dataclass, field

import numpy as np

from forward_curves.errors import CurveDomainError, CurveRangeError, InvertibilityError, StructuralError
from forward_curves.space_core import Cone, CurveGrid, cone_membership, norm

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class MultiplicativeKernel:
    kernel: CurveGrid
    cone: Cone = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, 'cone', cone_membership(self.kernel))

    @property
    def invertible(self) -> bool:
        return self.cone.invertible

    def operator_norm_bound(self) -> float:
        """Upper bound K_M * ||h|| on the operator norm of M_h"""
        return self.kernel.space.k_mult * norm(self.kernel)


def mult_apply(h: MultiplicativeKernel, f: CurveGrid) -> CurveGrid:
    kernel = h.kernel
    if kernel.space != f.space:
        raise StructuralError("Kernel and curve belong to different SpaceConfigs")
    return CurveGrid(kernel.values * f.values, f.space, kernel.tail * f.tail)


def invert_kernel(h: MultiplicativeKernel) -> MultiplicativeKernel:
    if not h.invertible:
        kernel = h.kernel
        if np.all(kernel.values > 0) or np.all(kernel.values < 0):
            # nodes have a sign, the tail is on the boundary or flips it
            raise InvertibilityError(
                f"Kernel is not bounded away from zero: tail = {kernel.tail}",
                node='tail', value=kernel.tail,
            )
        if np.any(kernel.values == 0):
            idx = int(np.flatnonzero(kernel.values == 0)[0])
        else:
            idx = int(np.flatnonzero(np.sign(kernel.values) != np.sign(kernel.values[0]))[0])
        raise InvertibilityError(
            f"Kernel is not in H_> or H_<: node {idx} has value {kernel.values[idx]}",
            node=idx, value=float(kernel.values[idx]),
        )
    kernel = h.kernel
    return MultiplicativeKernel(CurveGrid(1.0 / kernel.values, kernel.space, 1.0 / kernel.tail))


def exp_map(f: CurveGrid) -> CurveGrid:
    with np.errstate(over='ignore'):
        values = np.exp(f.values)
        tail = np.exp(f.tail)
    if not np.all(np.isfinite(values)):
        idx = int(np.flatnonzero(~np.isfinite(values))[0])
        raise CurveRangeError(f"exp overflow at node {idx} (value {f.values[idx]})", node=idx)
    if not np.isfinite(tail):
        raise CurveRangeError(f"exp overflow at tail (value {f.tail})", node='tail')
    return CurveGrid(values, f.space, float(tail))


def log_map(h: CurveGrid) -> CurveGrid:
    if np.any(h.values <= 0):
        idx = int(np.flatnonzero(h.values <= 0)[0])
        raise CurveDomainError(
            f"log requires a strictly positive curve: node {idx} has value {h.values[idx]}",
            node=idx, value=float(h.values[idx]),
        )
    if h.tail <= 0:
        raise CurveDomainError(
            f"log requires a strictly positive tail, got {h.tail}", node='tail', value=h.tail
        )
    return CurveGrid(np.log(h.values), h.space, float(np.log(h.tail)))
