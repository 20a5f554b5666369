"""Quantization-free region pooling (RoIAlign) built on bilinear sampling."""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F

from .core import BoundingBox


def _sample_grid(rois: torch.Tensor, out_size, spatial_scale: float, sampling_ratio: int,
                 height: int, width: int) -> torch.Tensor:
    """Normalized sampling locations of shape (R, ph*sr, pw*sr, 2) for ``grid_sample``.

    A box edge ``x`` maps to feature coordinate ``x * spatial_scale - 0.5`` so
    that feature cell ``i`` is centred on image coordinate ``(i + 0.5) / scale``.
    """
    ph, pw = out_size
    sr = sampling_ratio
    dtype = rois.dtype
    fx1 = rois[:, 0] * spatial_scale - 0.5
    fy1 = rois[:, 1] * spatial_scale - 0.5
    fx2 = rois[:, 2] * spatial_scale - 0.5
    fy2 = rois[:, 3] * spatial_scale - 0.5
    # sample offsets inside the box, as a fraction of its extent
    ox = (torch.arange(pw * sr, dtype=dtype) + 0.5) / (pw * sr)
    oy = (torch.arange(ph * sr, dtype=dtype) + 0.5) / (ph * sr)
    xs = fx1[:, None] + ox[None, :] * (fx2 - fx1)[:, None]
    ys = fy1[:, None] + oy[None, :] * (fy2 - fy1)[:, None]
    gx = 2.0 * xs / max(width - 1, 1) - 1.0
    gy = 2.0 * ys / max(height - 1, 1) - 1.0
    r = rois.shape[0]
    grid = torch.stack(
        (gx[:, None, :].expand(r, ph * sr, pw * sr), gy[:, :, None].expand(r, ph * sr, pw * sr)), dim=-1
    )
    return grid


def roi_align_batch(features: torch.Tensor, rois: torch.Tensor, out_size=(7, 7),
                    spatial_scale: float = 1.0, sampling_ratio: int = 2) -> torch.Tensor:
    """Pool ``rois`` (R, 5) = (batch_index, x1, y1, x2, y2) from ``features`` (N, C, H, W).

    Each output cell averages ``sampling_ratio**2`` bilinear samples at evenly
    spaced points of its bin. Samples beyond the map take the nearest border
    value. Returns (R, C, ph, pw); differentiable in ``features``.
    """
    n, c, h, w = features.shape
    ph, pw = out_size
    sr = sampling_ratio
    out = features.new_zeros((rois.shape[0], c, ph, pw))
    if rois.shape[0] == 0:
        return out
    rois = rois.to(features.dtype)
    batch_idx = rois[:, 0].long()
    pieces = []
    order = []
    for b in range(n):
        sel = torch.nonzero(batch_idx == b).flatten()
        if sel.numel() == 0:
            continue
        grid = _sample_grid(rois[sel, 1:], out_size, spatial_scale, sr, h, w)
        r = sel.numel()
        grid = grid.reshape(1, r * ph * sr, pw * sr, 2)
        sampled = F.grid_sample(features[b:b + 1], grid, mode="bilinear", padding_mode="border", align_corners=True)
        sampled = sampled.reshape(c, r, ph, sr, pw, sr).mean(dim=(3, 5)).permute(1, 0, 2, 3)
        pieces.append(sampled)
        order.append(sel)
    order = torch.cat(order)
    pooled = torch.cat(pieces, dim=0)
    return out.index_copy(0, order, pooled)


def roi_align(fm: torch.Tensor, box: BoundingBox, out_size=(7, 7), stride: float = 1.0,
              sampling_ratio: int = 2) -> torch.Tensor:
    """Pool a single box from a (C, H, W) or (1, C, H, W) map; returns (C, ph, pw).

    Raises ``ValueError`` when the box collapses after mapping to feature
    coordinates instead of emitting zeros.
    """
    if fm.dim() == 3:
        fm = fm[None]
    scale = 1.0 / stride
    fw = (box.x2 - box.x1) * scale
    fh = (box.y2 - box.y1) * scale
    if not (math.isfinite(fw) and math.isfinite(fh)) or fw <= 1e-6 or fh <= 1e-6:
        raise ValueError(f"degenerate ROI {box} at stride {stride}")
    rois = torch.tensor([[0.0, box.x1, box.y1, box.x2, box.y2]], dtype=fm.dtype)
    return roi_align_batch(fm, rois, out_size, scale, sampling_ratio)[0]
