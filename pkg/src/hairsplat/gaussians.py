from dataclasses import dataclass, fields, replace
from typing import Optional

import torch
from torch import Tensor

FACE = 0
HAIR = 1


@dataclass
class GaussianSet:
    """World-space Gaussians. Rotations are (w, x, y, z) quaternions.

    ``face_index``/``bary`` record the mesh binding (-1 for unbound
    primitives); ``strand`` is the owning strand for hair, -1 otherwise.
    """

    means: Tensor
    scales: Tensor
    quats: Tensor
    opacities: Tensor
    colors: Tensor
    semantic: Tensor
    face_index: Optional[Tensor] = None
    bary: Optional[Tensor] = None
    strand: Optional[Tensor] = None

    def __len__(self) -> int:
        return int(self.means.shape[0])

    def select(self, mask: Tensor) -> "GaussianSet":
        kw = {}
        for f in fields(self):
            v = getattr(self, f.name)
            kw[f.name] = None if v is None else v[mask]
        return GaussianSet(**kw)

    def detach(self) -> "GaussianSet":
        kw = {}
        for f in fields(self):
            v = getattr(self, f.name)
            kw[f.name] = None if v is None else v.detach()
        return GaussianSet(**kw)

    def with_colors(self, colors: Tensor) -> "GaussianSet":
        return replace(self, colors=colors)

    @staticmethod
    def empty(dtype=torch.float32) -> "GaussianSet":
        return GaussianSet(
            means=torch.zeros(0, 3, dtype=dtype),
            scales=torch.ones(0, 3, dtype=dtype),
            quats=torch.zeros(0, 4, dtype=dtype),
            opacities=torch.zeros(0, dtype=dtype),
            colors=torch.zeros(0, 3, dtype=dtype),
            semantic=torch.zeros(0, dtype=torch.int64),
        )

    @staticmethod
    def concat(*sets: "GaussianSet") -> "GaussianSet":
        sets = [s for s in sets if s is not None]
        kw = {}
        for f in fields(GaussianSet):
            vals = [getattr(s, f.name) for s in sets]
            if any(v is None for v in vals):
                if f.name in ("face_index", "strand"):
                    vals = [torch.full((len(s),), -1, dtype=torch.int64) if v is None else v for s, v in zip(sets, vals)]
                elif f.name == "bary":
                    vals = [torch.zeros(len(s), 3) if v is None else v for s, v in zip(sets, vals)]
            kw[f.name] = torch.cat(vals, dim=0)
        return GaussianSet(**kw)
