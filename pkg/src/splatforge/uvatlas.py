"""UV atlas generation: dominant-axis chart clustering and shelf packing.

Triangles are binned by the dominant axis (and sign) of their face normal,
each bin is orthographically projected onto its axis plane to form a chart,
and charts are shelf-packed into the unit square with a gutter between them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .meshing import TexturedMesh

# Projection plane per bin: (normal axis, sign) -> (u axis, v axis).
_PLANE_AXES = {0: (1, 2), 1: (0, 2), 2: (0, 1)}


@dataclass
class Chart:
    face_ids: np.ndarray
    local_uv: np.ndarray  # (F, 3, 2) world-unit plane coordinates, min at 0
    size: np.ndarray  # (w, h) world units
    offset: np.ndarray = None  # atlas placement, set by packing
    scale: float = None


def _dominant_bins(mesh: TexturedMesh) -> np.ndarray:
    n = mesh.face_normals()
    axis = np.argmax(np.abs(n), axis=-1)
    sign = np.sign(n[np.arange(len(n)), axis])
    sign[sign == 0] = 1
    return axis * 2 + (sign < 0)


def _build_charts(mesh: TexturedMesh) -> list:
    bins = _dominant_bins(mesh)
    corners = mesh.face_corners()
    charts = []
    for b in range(6):
        ids = np.nonzero(bins == b)[0]
        if ids.size == 0:
            continue
        ua, va = _PLANE_AXES[b // 2]
        uv = corners[ids][:, :, [ua, va]]
        if b % 2 == 1:
            uv = uv[:, :, ::-1].copy()  # flip to keep winding consistent between signs
        lo = uv.reshape(-1, 2).min(axis=0)
        hi = uv.reshape(-1, 2).max(axis=0)
        charts.append(Chart(face_ids=ids, local_uv=uv - lo, size=np.maximum(hi - lo, 1e-12)))
    return charts


def _try_pack(charts: list, scale: float, gutter: float):
    """Shelf packing at a fixed scale; returns offsets or None if it overflows."""
    order = sorted(range(len(charts)), key=lambda i: -charts[i].size[1])
    offsets = [None] * len(charts)
    x = gutter
    y = gutter
    shelf_h = 0.0
    for i in order:
        w, h = charts[i].size * scale
        if w > 1.0 - 2 * gutter or h > 1.0 - 2 * gutter:
            return None
        if x + w + gutter > 1.0:
            y += shelf_h + gutter
            x = gutter
            shelf_h = 0.0
        if y + h + gutter > 1.0:
            return None
        offsets[i] = np.array([x, y])
        x += w + gutter
        shelf_h = max(shelf_h, h)
    return offsets


def uv_unwrap(mesh: TexturedMesh, texture_size: int = 256, gutter_texels: int = 2) -> TexturedMesh:
    """Assign per-corner UVs in [0, 1]^2; charts never overlap.

    The chart scale is the largest uniform factor (found by bisection) at
    which shelf packing with the requested gutter still fits.
    """
    if mesh.is_empty:
        mesh.uvs = np.empty((0, 3, 2))
        mesh.chart_ids = np.empty(0, dtype=np.int64)
        return mesh
    gutter = gutter_texels / texture_size
    charts = _build_charts(mesh)

    max_dim = max(float(c.size.max()) for c in charts)
    lo_s, hi_s = 0.0, (1.0 - 2 * gutter) / max_dim
    best = None
    for _ in range(48):
        mid = 0.5 * (lo_s + hi_s)
        placed = _try_pack(charts, mid, gutter)
        if placed is not None:
            best = (mid, placed)
            lo_s = mid
        else:
            hi_s = mid
    if best is None:
        raise RuntimeError("chart packing failed at any scale")
    scale, offsets = best

    uvs = np.zeros((mesh.triangles.shape[0], 3, 2))
    chart_ids = np.zeros(mesh.triangles.shape[0], dtype=np.int64)
    for ci, (chart, off) in enumerate(zip(charts, offsets)):
        chart.offset = off
        chart.scale = scale
        uvs[chart.face_ids] = off[None, None, :] + scale * chart.local_uv
        chart_ids[chart.face_ids] = ci
    mesh.uvs = np.clip(uvs, 0.0, 1.0)
    mesh.chart_ids = chart_ids
    mesh.charts = charts
    return mesh


def occupancy_overlap(mesh: TexturedMesh, texture_size: int = 256) -> int:
    """Number of texels claimed by more than one chart (0 when packing is valid)."""
    count = np.zeros((texture_size, texture_size), dtype=np.int32)
    for chart in mesh.charts:
        lo = np.floor(chart.offset * texture_size).astype(int)
        hi = np.ceil((chart.offset + chart.scale * chart.size) * texture_size).astype(int)
        count[lo[1] : hi[1], lo[0] : hi[0]] += 1
    return int((count > 1).sum())
