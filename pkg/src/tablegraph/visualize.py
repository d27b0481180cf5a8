"""Clique overlays: one RGB image per relation, words coloured by clique."""
from __future__ import annotations

import colorsys
import math
from pathlib import Path

import numpy as np
from PIL import Image

from .graph import KINDS, AdjacencyTriple
from .evaluate import cliques_for

STRIPE = 3  # px per stripe for words in several cliques
ALPHA = 0.55


def clique_color(index: int) -> tuple[int, int, int]:
    """Colour for clique ``index``; golden-angle hue steps keep neighbours apart."""
    hue = (index * 0.618033988749895) % 1.0
    light = 0.45 if index % 2 == 0 else 0.6
    r, g, b = colorsys.hls_to_rgb(hue, light, 0.85)
    return round(r * 255), round(g * 255), round(b * 255)


def assign_colors(adj, kind: str, v: int) -> list[tuple[tuple[int, int, int], ...]]:
    """Per-word tuple of colours, one per clique the word belongs to."""
    cl = cliques_for(kind, adj)
    return [tuple(clique_color(ci) for ci in m) for m in cl.memberships(v)]


def render_overlay(image: np.ndarray, boxes: np.ndarray, colors) -> np.ndarray:
    """Blend word boxes onto a greyscale page; multi-colour words get vertical stripes."""
    h, w = image.shape
    out = np.repeat(image[:, :, None].astype(np.float64), 3, axis=2)
    for box, cols in zip(boxes, colors):
        if not cols:
            continue
        x0, y0 = max(0, math.floor(box[0])), max(0, math.floor(box[1]))
        x1, y1 = min(w, math.ceil(box[2])), min(h, math.ceil(box[3]))
        if x1 <= x0 or y1 <= y0:
            continue
        stripe = (np.arange(x0, x1) - x0) // STRIPE % len(cols)
        tint = np.asarray(cols, dtype=np.float64)[stripe]  # (width, 3)
        region = out[y0:y1, x0:x1]
        out[y0:y1, x0:x1] = (1 - ALPHA) * region + ALPHA * tint[None, :, :]
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def visualize(sample, prefix, triple: AdjacencyTriple | None = None) -> dict:
    """Write ``<prefix>_{cells,rows,cols}.png``; ground truth when ``triple`` is None.

    Returns the colour assignment per relation for inspection.
    """
    triple = sample.gt if triple is None else triple
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    boxes = sample.boxes()
    assignment = {}
    for kind in KINDS:
        colors = assign_colors(triple[kind], kind, sample.v)
        assignment[kind] = colors
        rgb = render_overlay(sample.image, boxes, colors)
        Image.fromarray(rgb, "RGB").save(prefix.parent / f"{prefix.name}_{kind}.png", format="PNG")
    return assignment


def distinct_colors(assignment: list) -> set:
    return {c for cols in assignment for c in cols}
