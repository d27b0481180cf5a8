"""Seeded synthetic tables with word boxes and ground-truth sharing graphs.

Four difficulty categories:

1. full ruling lines, no merged cells
2. random border style (possibly no lines at all), no merged cells
3. random border style with row- and column-spanning cells
4. a category 1-3 layout warped by a random perspective transform
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np

from .font import ADVANCE, DIGITS, LETTERS, draw_text, text_size
from .graph import AdjacencyTriple

BORDER_STYLES = ("all", "outer", "horizontal", "vertical", "header", "none")
ALIGNMENTS = ("left", "center", "right")
BACKGROUND = 255


class GenOverflow(RuntimeError):
    """The requested layout ranges cannot fit inside the image."""


class DegenerateQuad(ValueError):
    """Warped corner quadrilateral is not strictly convex."""


@dataclass(frozen=True)
class GenConfig:
    image_h: int = 256
    image_w: int = 256
    n_rows: tuple[int, int] = (2, 6)
    n_cols: tuple[int, int] = (2, 4)
    words_per_cell: tuple[int, int] = (1, 2)
    word_len: tuple[int, int] = (1, 5)
    row_span_prob: float = 0.15
    col_span_prob: float = 0.15
    max_span: int = 3
    border_styles: tuple[str, ...] = BORDER_STYLES
    alignments: tuple[str, ...] = ALIGNMENTS
    perspective_jitter: float = 12.0
    warp_base_categories: tuple[int, ...] = (1, 2, 3)
    numeric_prob: float = 0.3
    font_scale: int = 1
    cell_padding: int = 4
    margin: int = 4
    max_attempts: int = 100
    seed: int = 0

    def validate(self):
        for name in ("n_rows", "n_cols", "words_per_cell", "word_len"):
            lo, hi = getattr(self, name)
            if lo < 1 or hi < lo:
                raise ValueError(f"{name} must be a nonempty range of positive ints, got {(lo, hi)}")
        for name in ("row_span_prob", "col_span_prob", "numeric_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {p}")
        if self.image_h < 8 or self.image_w < 8:
            raise ValueError(f"image too small: {self.image_h}x{self.image_w}")
        if not 0 <= self.perspective_jitter <= 0.2 * min(self.image_h, self.image_w):
            raise ValueError(
                f"perspective_jitter {self.perspective_jitter} exceeds 0.2*min(h, w)"
            )
        if self.max_span < 2:
            raise ValueError("max_span must be >= 2")
        if self.font_scale < 1 or self.cell_padding < 2 or self.margin < 1:
            raise ValueError("font_scale >= 1, cell_padding >= 2 and margin >= 1 required")
        bad = set(self.border_styles) - set(BORDER_STYLES)
        if bad or not self.border_styles:
            raise ValueError(f"unknown border styles {sorted(bad)}")
        bad = set(self.alignments) - set(ALIGNMENTS)
        if bad or not self.alignments:
            raise ValueError(f"unknown alignments {sorted(bad)}")
        if not self.warp_base_categories or set(self.warp_base_categories) - {1, 2, 3}:
            raise ValueError("warp_base_categories must be a nonempty subset of {1, 2, 3}")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown GenConfig keys: {sorted(unknown)}")
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**kw)


@dataclass(frozen=True)
class WordVertex:
    bbox: tuple[float, float, float, float]  # x0, y0, x1, y1; x1/y1 exclusive
    text_len: int
    cell_id: int
    row_ids: tuple[int, ...]
    col_ids: tuple[int, ...]

    @property
    def center(self) -> tuple[float, float]:
        x0, y0, x1, y1 = self.bbox
        return (x0 + x1) / 2, (y0 + y1) / 2


@dataclass(eq=False)
class TableSample:
    image: np.ndarray  # (h, w) uint8
    vertices: tuple[WordVertex, ...]
    category: int
    seed: int
    meta: dict = field(default_factory=dict)  # not serialized; generator diagnostics

    @property
    def v(self) -> int:
        return len(self.vertices)

    @cached_property
    def gt(self) -> AdjacencyTriple:
        return ground_truth(self.vertices)

    def boxes(self) -> np.ndarray:
        return np.array([w.bbox for w in self.vertices], dtype=np.float64).reshape(-1, 4)

    def __eq__(self, other):
        if not isinstance(other, TableSample):
            return NotImplemented
        return (
            self.category == other.category
            and self.seed == other.seed
            and self.image.dtype == other.image.dtype
            and np.array_equal(self.image, other.image)
            and tuple(self.vertices) == tuple(other.vertices)
        )

    __hash__ = None


def ground_truth(vertices) -> AdjacencyTriple:
    v = len(vertices)
    cell = np.array([w.cell_id for w in vertices], dtype=np.int64)
    cells = (cell[:, None] == cell[None, :]).astype(np.uint8)

    def sharing(ids):
        n = max((max(s) for s in ids), default=-1) + 1
        m = np.zeros((v, n), dtype=np.int64)
        for i, s in enumerate(ids):
            m[i, list(s)] = 1
        return ((m @ m.T) > 0).astype(np.uint8)

    rows = sharing([w.row_ids for w in vertices])
    cols = sharing([w.col_ids for w in vertices])
    return AdjacencyTriple(cells, rows, cols)


# -- layout -------------------------------------------------------------------


@dataclass
class _Cell:
    r: int
    c: int
    rs: int
    cs: int
    words: list[str]


def _rand_range(rng, bounds) -> int:
    lo, hi = bounds
    return int(rng.integers(lo, hi + 1))


def _place_cells(n_rows, n_cols, merges: bool, cfg: GenConfig, rng) -> list[tuple[int, int, int, int]]:
    occupied = np.zeros((n_rows, n_cols), dtype=bool)
    cells = []
    for r in range(n_rows):
        for c in range(n_cols):
            if occupied[r, c]:
                continue
            rs = cs = 1
            if merges:
                if rng.random() < cfg.row_span_prob:
                    rs = int(rng.integers(2, cfg.max_span + 1))
                if rng.random() < cfg.col_span_prob:
                    cs = int(rng.integers(2, cfg.max_span + 1))
            rs = min(rs, n_rows - r)
            cs = min(cs, n_cols - c)
            while cs > 1 and occupied[r, c:c + cs].any():
                cs -= 1
            while rs > 1 and occupied[r:r + rs, c:c + cs].any():
                rs -= 1
            occupied[r:r + rs, c:c + cs] = True
            cells.append((r, c, rs, cs))

    if merges and all(rs == 1 and cs == 1 for _, _, rs, cs in cells):
        # merged categories always carry at least one spanning cell
        k = int(rng.integers(len(cells)))
        r, c, _, _ = cells[k]
        options = []
        if r + 1 < n_rows:
            options.append((2, 1))
        if c + 1 < n_cols:
            options.append((1, 2))
        if not options:
            r, c = 0, 0
            options = [(2, 1)] if n_rows > 1 else [(1, 2)]
        rs, cs = options[int(rng.integers(len(options)))]
        return _force_span(n_rows, n_cols, r, c, rs, cs)
    return cells


def _force_span(n_rows, n_cols, r0, c0, rs0, cs0):
    cells = []
    for r in range(n_rows):
        for c in range(n_cols):
            if (r, c) == (r0, c0):
                cells.append((r, c, rs0, cs0))
            elif r0 <= r < r0 + rs0 and c0 <= c < c0 + cs0:
                continue
            else:
                cells.append((r, c, 1, 1))
    return cells


def _random_word(rng, numeric: bool, cfg: GenConfig) -> str:
    n = _rand_range(rng, cfg.word_len)
    alphabet = DIGITS if numeric else LETTERS
    return "".join(alphabet[int(i)] for i in rng.integers(0, len(alphabet), size=n))


def _word_gap(cfg):
    return ADVANCE * cfg.font_scale


def _content_width(words, cfg) -> int:
    widths = [text_size(len(w), cfg.font_scale)[0] for w in words]
    return sum(widths) + _word_gap(cfg) * (len(words) - 1)


def _safe_margin(cfg: GenConfig) -> int:
    return cfg.margin + int(math.ceil(cfg.perspective_jitter)) + 1


def _layout(cfg: GenConfig, category: int, rng):
    """Draw a table structure that fits the image; returns the rendered sample."""
    merges = category == 3
    pad = cfg.cell_padding
    text_h = text_size(1, cfg.font_scale)[1]
    row_h = text_h + 2 * pad
    m = _safe_margin(cfg)
    avail_w = cfg.image_w - 2 * m - 1
    avail_h = cfg.image_h - 2 * m - 1

    for _ in range(cfg.max_attempts):
        n_rows = _rand_range(rng, cfg.n_rows)
        n_cols = _rand_range(rng, cfg.n_cols)
        spans = _place_cells(n_rows, n_cols, merges, cfg, rng)
        cells = []
        for r, c, rs, cs in spans:
            numeric = rng.random() < cfg.numeric_prob
            n_words = _rand_range(rng, cfg.words_per_cell)
            cells.append(_Cell(r, c, rs, cs, [_random_word(rng, numeric, cfg) for _ in range(n_words)]))
        align = [cfg.alignments[int(i)] for i in rng.integers(0, len(cfg.alignments), size=n_cols)]
        style = "all" if category == 1 else cfg.border_styles[int(rng.integers(len(cfg.border_styles)))]

        col_w = np.full(n_cols, 2 * pad + ADVANCE * cfg.font_scale, dtype=np.int64)
        for cell in cells:
            if cell.cs == 1:
                col_w[cell.c] = max(col_w[cell.c], _content_width(cell.words, cfg) + 2 * pad)
        for cell in cells:
            if cell.cs > 1:
                need = _content_width(cell.words, cfg) + 2 * pad
                have = int(col_w[cell.c:cell.c + cell.cs].sum())
                if need > have:
                    extra = need - have
                    share = -(-extra // cell.cs)
                    col_w[cell.c:cell.c + cell.cs] += share

        table_w, table_h = int(col_w.sum()), n_rows * row_h
        if table_w <= avail_w and table_h <= avail_h:
            break
    else:
        raise GenOverflow(
            f"no layout fit {cfg.image_h}x{cfg.image_w} after {cfg.max_attempts} attempts"
        )

    left = int(rng.integers(m, m + avail_w - table_w + 1))
    top = int(rng.integers(m, m + avail_h - table_h + 1))
    xb = left + np.concatenate([[0], np.cumsum(col_w)])
    yb = top + row_h * np.arange(n_rows + 1)

    img = np.full((cfg.image_h, cfg.image_w), BACKGROUND, dtype=np.uint8)
    _draw_borders(img, cells, xb, yb, style)

    vertices = []
    for cell_id, cell in enumerate(cells):
        x_lo, x_hi = int(xb[cell.c]), int(xb[cell.c + cell.cs])
        y_lo, y_hi = int(yb[cell.r]), int(yb[cell.r + cell.rs])
        width = _content_width(cell.words, cfg)
        a = align[cell.c]
        if a == "left":
            x = x_lo + pad
        elif a == "right":
            x = x_hi - pad - width
        else:
            x = x_lo + (x_hi - x_lo - width) // 2
        y = y_lo + (y_hi - y_lo - text_h) // 2
        for word in cell.words:
            w = text_size(len(word), cfg.font_scale)[0]
            draw_text(img, x, y, word, cfg.font_scale)
            vertices.append(WordVertex(
                bbox=(float(x), float(y), float(x + w), float(y + text_h)),
                text_len=len(word),
                cell_id=cell_id,
                row_ids=tuple(range(cell.r, cell.r + cell.rs)),
                col_ids=tuple(range(cell.c, cell.c + cell.cs)),
            ))
            x += w + _word_gap(cfg)

    meta = {"n_rows": n_rows, "n_cols": n_cols, "border": style, "align": align}
    return img, tuple(vertices), meta


def _hline(img, y, x0, x1):
    img[y, x0:x1 + 1] = 0


def _vline(img, x, y0, y1):
    img[y0:y1 + 1, x] = 0


def _draw_borders(img, cells, xb, yb, style):
    if style == "none":
        return
    n_rows = len(yb) - 1
    if style in ("outer", "header"):
        _hline(img, yb[0], xb[0], xb[-1])
        _hline(img, yb[-1], xb[0], xb[-1])
        _vline(img, xb[0], yb[0], yb[-1])
        _vline(img, xb[-1], yb[0], yb[-1])
    for cell in cells:
        x0, x1 = xb[cell.c], xb[cell.c + cell.cs]
        y0, y1 = yb[cell.r], yb[cell.r + cell.rs]
        if style in ("all", "horizontal"):
            _hline(img, y0, x0, x1)
            _hline(img, y1, x0, x1)
        if style in ("all", "vertical"):
            _vline(img, x0, y0, y1)
            _vline(img, x1, y0, y1)
        if style == "header" and cell.r + cell.rs == 1 and n_rows > 1:
            _hline(img, y1, x0, x1)


# -- perspective ----------------------------------------------------------------


def homography_from_corners(src, dst) -> np.ndarray:
    """3x3 homography mapping four ``src`` points onto ``dst`` (DLT)."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    a = np.zeros((8, 8))
    b = np.zeros(8)
    for k, ((x, y), (u, v)) in enumerate(zip(src, dst)):
        a[2 * k] = [x, y, 1, 0, 0, 0, -u * x, -u * y]
        a[2 * k + 1] = [0, 0, 0, x, y, 1, -v * x, -v * y]
        b[2 * k], b[2 * k + 1] = u, v
    h = np.linalg.solve(a, b)
    return np.append(h, 1.0).reshape(3, 3)


def _is_convex(quad) -> bool:
    q = np.asarray(quad, dtype=np.float64)
    signs = []
    for k in range(4):
        p0, p1, p2 = q[k], q[(k + 1) % 4], q[(k + 2) % 4]
        e1, e2 = p1 - p0, p2 - p1
        signs.append(e1[0] * e2[1] - e1[1] * e2[0])
    signs = np.array(signs)
    return bool(np.all(signs > 0) or np.all(signs < 0))


def warp_image(img: np.ndarray, hmat: np.ndarray, fill: int = BACKGROUND) -> np.ndarray:
    """Inverse-map every output pixel centre and sample bilinearly."""
    h, w = img.shape
    inv = np.linalg.inv(hmat)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    pts = np.stack([xs.ravel() + 0.5, ys.ravel() + 0.5, np.ones(h * w)])
    src = inv @ pts
    sx = src[0] / src[2] - 0.5
    sy = src[1] / src[2] - 0.5

    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    fx = sx - x0
    fy = sy - y0
    padded = np.pad(img.astype(np.float64), 1, constant_values=fill)

    def at(yy, xx):
        yy = np.clip(yy + 1, 0, h + 1)
        xx = np.clip(xx + 1, 0, w + 1)
        return padded[yy, xx]

    val = (
        at(y0, x0) * (1 - fx) * (1 - fy)
        + at(y0, x0 + 1) * fx * (1 - fy)
        + at(y0 + 1, x0) * (1 - fx) * fy
        + at(y0 + 1, x0 + 1) * fx * fy
    )
    return np.clip(np.rint(val), 0, 255).astype(np.uint8).reshape(h, w)


def apply_homography(sample: TableSample, corner_offsets) -> TableSample:
    """Warp image and boxes by the transform moving the image corners by ``corner_offsets``.

    Offsets are (dx, dy) for the top-left, top-right, bottom-right and
    bottom-left corners. Labels are untouched.
    """
    off = np.asarray(corner_offsets, dtype=np.float64).reshape(4, 2)
    h, w = sample.image.shape
    if not off.any():
        return replace(sample, image=sample.image.copy(), meta=dict(sample.meta))
    src = np.array([[0, 0], [w, 0], [w, h], [0, h]], dtype=np.float64)
    dst = src + off
    if not _is_convex(dst):
        raise DegenerateQuad(f"warped corners are not convex: {dst.tolist()}")
    hmat = homography_from_corners(src, dst)
    image = warp_image(sample.image, hmat)

    verts = []
    for vert in sample.vertices:
        x0, y0, x1, y1 = vert.bbox
        pts = np.array([[x0, x1, x1, x0], [y0, y0, y1, y1], [1, 1, 1, 1]], dtype=np.float64)
        q = hmat @ pts
        qx, qy = q[0] / q[2], q[1] / q[2]
        nb = (
            float(np.round(np.clip(qx.min(), 0, w), 4)),
            float(np.round(np.clip(qy.min(), 0, h), 4)),
            float(np.round(np.clip(qx.max(), 0, w), 4)),
            float(np.round(np.clip(qy.max(), 0, h), 4)),
        )
        verts.append(replace(vert, bbox=nb))
    meta = dict(sample.meta, corner_offsets=off.tolist())
    return replace(sample, image=image, vertices=tuple(verts), meta=meta)


def random_corner_offsets(jitter: float, rng) -> np.ndarray:
    return rng.uniform(-jitter, jitter, size=(4, 2))


# -- entry point ------------------------------------------------------------------


def generate(cfg: GenConfig, category: int) -> TableSample:
    """Render one table of the given category, fully determined by ``cfg.seed``."""
    if category not in (1, 2, 3, 4):
        raise ValueError(f"category must be 1-4, got {category}")
    cfg.validate()
    layout_seq, warp_seq = np.random.SeedSequence(cfg.seed).spawn(2)
    layout_rng = np.random.default_rng(layout_seq)
    warp_rng = np.random.default_rng(warp_seq)

    base = category
    if category == 4:
        bases = cfg.warp_base_categories
        base = int(bases[int(warp_rng.integers(len(bases)))])
    image, vertices, meta = _layout(cfg, base, layout_rng)
    sample = TableSample(image, vertices, base, cfg.seed, meta)
    if category == 4:
        offsets = random_corner_offsets(cfg.perspective_jitter, warp_rng)
        sample = apply_homography(sample, offsets)
        sample = replace(sample, category=4, meta=dict(sample.meta, base_category=base))
    return sample


def derive_seed(base_seed: int, index: int) -> int:
    """64-bit per-sample seed from a dataset seed and sample index."""
    state = np.random.SeedSequence([base_seed, index]).generate_state(1, dtype=np.uint64)
    return int(state[0])
