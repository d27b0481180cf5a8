"""CNN + vertex interaction + pairwise heads predicting the three sharing graphs.

Forward pass for one table:

1. shallow CNN over the page image
2. gather the feature-map cell under each word's box centre
3. concatenate with box coordinates and word length
4. interaction network (per-vertex MLP, edge convolution, or GravNet-style)
5. pair each vertex with sampled (training) or all (inference) partners and
   classify every pair with one head per graph
"""
from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import engine as E
from .graph import KINDS
from .sampler import full_pairing, pair_sampling

INTERACTIONS = ("fcnn", "dgcnn_star", "gravnet_star")
ALIASES = {"dgcnn": "dgcnn_star", "gravnet": "gravnet_star", "fcnn": "fcnn"}


# widths for a ~1M-parameter model; the defaults are a ~70k desk model
PAPER_SCALE = dict(
    cnn_widths=(32, 32, 64, 64),
    fcnn_widths=(512, 512, 512, 256),
    dgcnn_widths=(256, 256, 256),
    gravnet_widths=(256, 256, 256, 256),
    gravnet_features=64,
    gravnet_spatial=4,
    head_widths=(256, 128),
)


class DegenerateGraph(UserWarning):
    """A graph interaction ran on a single vertex; it falls back to a self loop."""


@dataclass(frozen=True)
class ModelConfig:
    kind: str = "dgcnn_star"
    image_h: int = 256
    image_w: int = 256
    channels: int = 1
    cnn_widths: tuple[int, ...] = (16, 16, 32, 32)
    cnn_strides: tuple[int, ...] = (2, 2, 1, 1)  # early downsampling widens the receptive field at the gather point
    max_word_len: float = 20.0
    fcnn_widths: tuple[int, ...] = (64, 64, 64)
    dgcnn_widths: tuple[int, ...] = (64, 64)
    gravnet_widths: tuple[int, ...] = (64, 64)
    gravnet_spatial: int = 2
    gravnet_features: int = 32
    gravnet_potential: float = 10.0
    k: int = 8
    head_widths: tuple[int, ...] = (64, 32)
    dtype: str = "float64"
    init_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", ALIASES.get(self.kind, self.kind))
        if self.kind not in INTERACTIONS:
            raise ValueError(f"unknown interaction kind {self.kind!r}")
        if len(self.cnn_widths) != len(self.cnn_strides) or not self.cnn_widths:
            raise ValueError("cnn_widths and cnn_strides must be equally long and nonempty")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.dtype not in ("float64", "float32"):
            raise ValueError(f"dtype must be float64 or float32, got {self.dtype!r}")

    @property
    def q(self) -> int:
        return self.cnn_widths[-1]

    @property
    def downsample(self) -> int:
        return int(np.prod(self.cnn_strides))

    @property
    def r(self) -> int:
        widths = {"fcnn": self.fcnn_widths, "dgcnn_star": self.dgcnn_widths,
                  "gravnet_star": self.gravnet_widths}[self.kind]
        return widths[-1]

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})

    @classmethod
    def load(cls, path) -> "ModelConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    @classmethod
    def paper_scale(cls, kind: str = "dgcnn_star", **kw) -> "ModelConfig":
        """Wider layers, roughly 1M parameters for each interaction kind."""
        return cls(kind=kind, **{**PAPER_SCALE, **kw})


@dataclass
class ForwardResult:
    logits: dict[str, E.Tensor]  # head -> (v, t, 2)
    pairs: dict[str, np.ndarray]  # head -> (v, t) partner indices
    features: dict[str, E.Tensor] = field(default_factory=dict)


def encode_vertices(sample, cfg: ModelConfig):
    """Positional (v, 4) and other (v, 1) vertex features, normalised."""
    h, w = sample.image.shape
    boxes = sample.boxes()
    positional = boxes / np.array([w, h, w, h], dtype=np.float64)
    lengths = np.array([[vert.text_len] for vert in sample.vertices], dtype=np.float64)
    other = lengths.reshape(-1, 1) / cfg.max_word_len
    return positional, other


def encode_image(image: np.ndarray) -> np.ndarray:
    """(h, w) uint8 page -> (h, w, 1) ink intensity in [0, 1]."""
    return (1.0 - image.astype(np.float64) / 255.0)[:, :, None]


def gather_cells(boxes: np.ndarray, image_hw, feature_hw) -> tuple[np.ndarray, np.ndarray]:
    """Feature-map (row, col) under each box centre, linearly scaled and clamped."""
    h, w = image_hw
    fh, fw = feature_hw
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    cx = (boxes[:, 0] + boxes[:, 2]) / 2
    cy = (boxes[:, 1] + boxes[:, 3]) / 2
    fy = np.clip(np.floor(cy * fh / h).astype(np.int64), 0, fh - 1)
    fx = np.clip(np.floor(cx * fw / w).astype(np.int64), 0, fw - 1)
    return fy, fx


def knn(x: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k nearest other vertices; ties go to the lower index."""
    d2 = np.square(x[:, None, :] - x[None, :, :]).sum(axis=-1)
    np.fill_diagonal(d2, np.inf)
    order = np.argsort(d2, axis=1, kind="stable")
    return order[:, :k]


class TableGraphModel:
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.dtype = np.dtype(cfg.dtype)
        self.params = E.ParamStore(self.dtype)
        self._rng = np.random.default_rng(cfg.init_seed)
        self._build()

    # -- construction -------------------------------------------------------------

    def _weight(self, name, shape, fan_in):
        bound = np.sqrt(6.0 / fan_in)
        self.params.add(name, self._rng.uniform(-bound, bound, size=shape))

    def _dense_param(self, name, n_in, n_out):
        self._weight(f"{name}.w", (n_in, n_out), n_in)
        self.params.add(f"{name}.b", np.zeros(n_out))

    def _mlp_params(self, prefix, n_in, widths):
        for i, n_out in enumerate(widths):
            self._dense_param(f"{prefix}.{i}", n_in, n_out)
            n_in = n_out
        return n_in

    def _build(self):
        cfg = self.cfg
        c_in = cfg.channels
        for i, c_out in enumerate(cfg.cnn_widths):
            self._weight(f"cnn.{i}.w", (3, 3, c_in, c_out), 9 * c_in)
            self.params.add(f"cnn.{i}.b", np.zeros(c_out))
            c_in = c_out

        d = 4 + 1 + cfg.q
        if cfg.kind == "fcnn":
            d = self._mlp_params("int.fcnn", d, cfg.fcnn_widths)
        elif cfg.kind == "dgcnn_star":
            for b, width in enumerate(cfg.dgcnn_widths):
                d = self._mlp_params(f"int.edge{b}", 2 * d, (width, width))
        else:
            for b, width in enumerate(cfg.gravnet_widths):
                self._dense_param(f"int.grav{b}.space", d, cfg.gravnet_spatial)
                self._dense_param(f"int.grav{b}.feat", d, cfg.gravnet_features)
                self._dense_param(f"int.grav{b}.out", d + 2 * cfg.gravnet_features, width)
                d = width

        for head in KINDS:
            n = self._mlp_params(f"head.{head}", 2 * d, cfg.head_widths)
            self._dense_param(f"head.{head}.logits", n, 2)

    def param_count(self) -> int:
        return self.params.count()

    # -- building blocks -------------------------------------------------------------

    def _p(self, name) -> E.Tensor:
        return self.params[name]

    def _dense(self, x, name, activation=True):
        y = E.dense(x, self._p(f"{name}.w"), self._p(f"{name}.b"))
        return E.relu(y) if activation else y

    def _mlp(self, x, prefix, n_layers, final_activation=True):
        for i in range(n_layers):
            x = self._dense(x, f"{prefix}.{i}", activation=final_activation or i < n_layers - 1)
        return x

    def cnn_features(self, image: E.Tensor) -> E.Tensor:
        cfg = self.cfg
        if image.shape != (cfg.image_h, cfg.image_w, cfg.channels):
            raise E.ShapeMismatch(
                f"cnn_features: image {image.shape} vs configured "
                f"{(cfg.image_h, cfg.image_w, cfg.channels)}"
            )
        x = image
        for i, stride in enumerate(cfg.cnn_strides):
            x = E.relu(E.conv2d(x, self._p(f"cnn.{i}.w"), self._p(f"cnn.{i}.b"), stride=stride, pad=1))
        return x

    def gather_vertex_features(self, fmap: E.Tensor, boxes, image_hw) -> E.Tensor:
        fh, fw, q = fmap.shape
        fy, fx = gather_cells(boxes, image_hw, (fh, fw))
        flat = E.reshape(fmap, (fh * fw, q))
        return E.gather_rows(flat, fy * fw + fx)

    def _neighbours(self, x: np.ndarray) -> np.ndarray:
        v = x.shape[0]
        if v == 1:
            warnings.warn(DegenerateGraph("single vertex: using a self loop as its only neighbour"))
            return np.zeros((1, 1), dtype=np.int64)
        return knn(x, min(self.cfg.k, v - 1))

    def _expand_self(self, x: E.Tensor, k: int) -> E.Tensor:
        v = x.shape[0]
        return E.gather_rows(x, np.repeat(np.arange(v)[:, None], k, axis=1))

    def interact(self, fcat: E.Tensor) -> E.Tensor:
        cfg = self.cfg
        if fcat.data.ndim != 2 or fcat.shape[1] != 4 + 1 + cfg.q:
            raise E.ShapeMismatch(f"interact: features {fcat.shape}, expected (v, {5 + cfg.q})")
        x = fcat
        if cfg.kind == "fcnn":
            return self._mlp(x, "int.fcnn", len(cfg.fcnn_widths))

        if cfg.kind == "dgcnn_star":
            for b in range(len(cfg.dgcnn_widths)):
                nbr = self._neighbours(x.data)
                xi = self._expand_self(x, nbr.shape[1])
                xj = E.gather_rows(x, nbr)
                edge = E.concat([xi, E.sub(xj, xi)], axis=-1)
                x = E.reduce_max(self._mlp(edge, f"int.edge{b}", 2), axis=1)
            return x

        for b in range(len(cfg.gravnet_widths)):
            name = f"int.grav{b}"
            space = self._dense(x, f"{name}.space", activation=False)
            feat = self._dense(x, f"{name}.feat", activation=False)
            nbr = self._neighbours(space.data)
            k = nbr.shape[1]
            diff = E.sub(E.gather_rows(space, nbr), self._expand_self(space, k))
            d2 = E.reduce_sum(E.square(diff), axis=-1)
            weight = E.exp(E.mul(d2, -cfg.gravnet_potential))
            msg = E.mul(E.gather_rows(feat, nbr), E.reshape(weight, weight.shape + (1,)))
            agg = E.concat([x, E.reduce_mean(msg, axis=1), E.reduce_max(msg, axis=1)], axis=-1)
            x = self._dense(agg, f"{name}.out")
        return x

    def classify_pairs(self, fint: E.Tensor, pairs: np.ndarray, head: str) -> E.Tensor:
        if head not in KINDS:
            raise KeyError(head)
        pairs = np.asarray(pairs, dtype=np.int64)
        v = fint.shape[0]
        if pairs.ndim != 2 or pairs.shape[0] != v:
            raise E.ShapeMismatch(f"classify_pairs: pairs {pairs.shape} for {v} vertices")
        if pairs.size and (pairs.min() < 0 or pairs.max() >= v):
            raise IndexError(f"classify_pairs: partner index out of range for v={v}")
        left = self._expand_self(fint, pairs.shape[1])
        right = E.gather_rows(fint, pairs)
        x = E.concat([left, right], axis=-1)
        x = self._mlp(x, f"head.{head}", len(self.cfg.head_widths))
        return self._dense(x, f"head.{head}.logits", activation=False)

    # -- full pass ---------------------------------------------------------------------

    def vertex_features(self, sample) -> E.Tensor:
        cfg = self.cfg
        image = E.Tensor(encode_image(sample.image).astype(self.dtype))
        positional, other = encode_vertices(sample, cfg)
        fmap = self.cnn_features(image)
        fim = self.gather_vertex_features(fmap, sample.boxes(), sample.image.shape)
        return E.concat([
            fim,
            E.Tensor(other.astype(self.dtype)),
            E.Tensor(positional.astype(self.dtype)),
        ], axis=-1)

    def forward(self, sample, mode: str = "infer", s: int = 10, rng=None) -> ForwardResult:
        if mode not in ("train", "infer"):
            raise ValueError(f"mode must be train or infer, got {mode!r}")
        fcat = self.vertex_features(sample)
        fint = self.interact(fcat)
        v = fint.shape[0]
        if mode == "train":
            if rng is None:
                raise ValueError("train mode needs an rng")
            gt = sample.gt
            pairs = {head: pair_sampling(gt[head], s, rng) for head in KINDS}
        else:
            full = full_pairing(v)
            pairs = {head: full for head in KINDS}
        logits = {head: self.classify_pairs(fint, pairs[head], head) for head in KINDS}
        return ForwardResult(logits, pairs, {"fcat": fcat, "fint": fint})

    # -- persistence -----------------------------------------------------------------------

    def save(self, path, extra: dict | None = None):
        state = dict(self.params.state())
        if extra:
            state.update(extra)
        E.save_checkpoint(path, state)

    def load_params(self, state: dict):
        self.params.load_state({k: v for k, v in state.items() if k in self.params})


def load_model(checkpoint, config_path=None) -> tuple[TableGraphModel, dict]:
    """Rebuild a model from a checkpoint and its ``model.json`` sibling."""
    checkpoint = Path(checkpoint)
    config_path = Path(config_path) if config_path else checkpoint.with_name("model.json")
    model = TableGraphModel(ModelConfig.load(config_path))
    state = E.load_checkpoint(checkpoint)
    model.load_params(state)
    return model, state
