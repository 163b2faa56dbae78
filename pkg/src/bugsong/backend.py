"""Classifier backend: four stride-2 conv blocks over the 64x1500 map.

Block order is convolution -> rectifier -> batch norm (in that order),
then global average pooling, dropout on the pooled 64-vector, and an
affine map to the class scores. Convolutions and the affine layer keep
torch's fan-in-scaled uniform default init; norm layers start at
scale 1, shift 0.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .errors import DataError

_BLOCKS = [
    # (in_ch, out_ch, kernel, stride, padding)
    (1, 8, 5, 2, 2),
    (8, 16, 3, 2, 1),
    (16, 32, 3, 2, 1),
    (32, 64, 3, 2, 1),
]


class ConvClassifier(nn.Module):
    def __init__(self, n_classes: int, dropout: float = 0.4):
        super().__init__()
        if n_classes < 2:
            raise DataError(f"need >= 2 classes, got {n_classes}")
        self.n_classes = n_classes
        self.convs = nn.ModuleList(
            nn.Conv2d(ci, co, kernel_size=k, stride=s, padding=p)
            for ci, co, k, s, p in _BLOCKS)
        self.norms = nn.ModuleList(
            nn.BatchNorm2d(co) for _, co, _, _, _ in _BLOCKS)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.dropout = nn.Dropout(dropout)
        self.head = nn.Linear(64, n_classes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() == 3:
            x = x.unsqueeze(1)
        if x.dim() != 4 or x.shape[1] != 1:
            raise DataError(f"expected (batch, 1, bands, frames) features, "
                            f"got {tuple(x.shape)}")
        for conv, norm in zip(self.convs, self.norms):
            x = norm(F.relu(conv(x)))
        x = self.pool(x).flatten(1)
        return self.head(self.dropout(x))


def count_parameters(model: nn.Module) -> tuple[int, list[tuple[str, tuple, int]]]:
    """Total learnable scalars plus a per-tensor (name, shape, count) table."""
    rows = []
    total = 0
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        n = p.numel()
        rows.append((name, tuple(p.shape), n))
        total += n
    return total, rows


def parameter_table(model: nn.Module, title: str = "model") -> str:
    total, rows = count_parameters(model)
    width = max([len(name) for name, _, _ in rows] + [len("parameter")])
    lines = [f"{title} parameter inventory",
             f"{'parameter':<{width}}  {'shape':<16}  count"]
    for name, shape, n in rows:
        lines.append(f"{name:<{width}}  {str(shape):<16}  {n}")
    lines.append(f"{'total':<{width}}  {'':<16}  {total}")
    return "\n".join(lines)
