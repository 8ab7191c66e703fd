"""Query-based mask-classification model.

A tiny encoder-decoder: two 3x3 convolutions embed the image into
per-pixel features (plus a fixed sinusoidal position grid), one
cross-attention block lets N learned queries read from the pixels, and
two small heads turn each query into (a) a class distribution over the
known classes plus a "no object" slot at column 0 and (b) a mask
embedding dotted against every pixel embedding to give mask logits.
Per-pixel softmax across queries (or elementwise sigmoid) turns the
logits into soft masks.

The forward pass records a computation graph, so gradients with respect
to every parameter are exact; `backward` seeds the graph with upstream
gradients at `class_probs` and `mask_logits`. The classifier can grow
rows as new classes arrive, leaving the old rows bit-identical.
Checkpoints are binary tensor tables (magic ``CMFK``).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, NumericError
from .synthdata import Segment

CHECKPOINT_MAGIC = b"CMFK"
CHECKPOINT_VERSION = 1

MASK_ACTIVATIONS = ("softmax", "sigmoid")

# tensors every model carries, before the classifier grows
_WEIGHT_SPECS = (
    ("queries", lambda n, d, c, k: (n, d)),
    ("conv1_w", lambda n, d, c, k: (d, c, 3, 3)),
    ("conv1_b", lambda n, d, c, k: (d,)),
    ("conv2_w", lambda n, d, c, k: (d, d, 3, 3)),
    ("conv2_b", lambda n, d, c, k: (d,)),
    ("attn_wq", lambda n, d, c, k: (d, d)),
    ("attn_wk", lambda n, d, c, k: (d, d)),
    ("attn_wv", lambda n, d, c, k: (d, d)),
    ("attn_wo", lambda n, d, c, k: (d, d)),
    ("ffn_w1", lambda n, d, c, k: (d, 2 * d)),
    ("ffn_b1", lambda n, d, c, k: (2 * d,)),
    ("ffn_w2", lambda n, d, c, k: (2 * d, d)),
    ("ffn_b2", lambda n, d, c, k: (d,)),
    ("mask_w1", lambda n, d, c, k: (d, d)),
    ("mask_b1", lambda n, d, c, k: (d,)),
    ("mask_w2", lambda n, d, c, k: (d, d)),
    ("mask_b2", lambda n, d, c, k: (d,)),
    ("classifier_w", lambda n, d, c, k: (k + 1, d)),
    ("classifier_b", lambda n, d, c, k: (k + 1,)),
)

NEW_CLASS_INIT_STD = 0.01


@dataclass
class ModelParams:
    """All trainable tensors plus the classifier column bookkeeping.

    `class_ids[j]` is the class decoded by classifier column j+1;
    column 0 is always "no object".
    """

    tensors: dict[str, np.ndarray]
    class_ids: tuple[int, ...]
    mask_activation: str

    @property
    def n_queries(self) -> int:
        return self.tensors["queries"].shape[0]

    @property
    def dim(self) -> int:
        return self.tensors["queries"].shape[1]

    @property
    def channels(self) -> int:
        return self.tensors["conv1_w"].shape[1]

    def column_of(self, class_id: int) -> int:
        return self.class_ids.index(class_id) + 1

    def copy(self) -> "ModelParams":
        return ModelParams(tensors={k: v.copy() for k, v in self.tensors.items()},
                           class_ids=self.class_ids,
                           mask_activation=self.mask_activation)


def init_params(rng: np.random.Generator, n_queries: int, dim: int, channels: int,
                class_ids: list[int], mask_activation: str = "softmax") -> ModelParams:
    """Fresh parameters; weight scales follow 1/sqrt(fan_in)."""
    if mask_activation not in MASK_ACTIVATIONS:
        raise ConfigError("mask_activation must be one of %s" % (MASK_ACTIVATIONS,))
    if dim % 4 != 0:
        raise ConfigError("embedding dim must be divisible by 4 for the position grid")
    if len(set(class_ids)) != len(class_ids) or 0 in class_ids:
        raise ConfigError("class ids must be unique and nonzero")
    k = len(class_ids)
    tensors = {}
    for name, shape_fn in _WEIGHT_SPECS:
        shape = shape_fn(n_queries, dim, channels, k)
        if name == "queries":
            tensors[name] = rng.normal(0.0, 1.0, size=shape)
        elif name.endswith("_b"):
            tensors[name] = np.zeros(shape)
        elif name.startswith("classifier"):
            tensors[name] = rng.normal(0.0, NEW_CLASS_INIT_STD, size=shape)
        elif name.endswith("w") and "conv" in name:
            fan_in = shape[1] * 9
            tensors[name] = rng.normal(0.0, fan_in ** -0.5, size=shape)
        else:
            fan_in = shape[0]
            tensors[name] = rng.normal(0.0, fan_in ** -0.5, size=shape)
    return ModelParams(tensors=tensors, class_ids=tuple(class_ids),
                       mask_activation=mask_activation)


_GRID_CACHE: dict[tuple[int, int, int], np.ndarray] = {}


def sinusoidal_grid(dim: int, height: int, width: int) -> np.ndarray:
    """Fixed (dim, H, W) position encoding: sin/cos ramps per axis."""
    key = (dim, height, width)
    if key not in _GRID_CACHE:
        quarter = dim // 4
        freqs = 1.0 / (100.0 ** (np.arange(quarter) / quarter))
        ys = np.arange(height, dtype=np.float64)
        xs = np.arange(width, dtype=np.float64)
        y_phase = freqs[:, None, None] * ys[None, :, None]
        x_phase = freqs[:, None, None] * xs[None, None, :]
        grid = np.concatenate([
            np.broadcast_to(np.sin(y_phase), (quarter, height, width)),
            np.broadcast_to(np.cos(y_phase), (quarter, height, width)),
            np.broadcast_to(np.sin(x_phase), (quarter, height, width)),
            np.broadcast_to(np.cos(x_phase), (quarter, height, width)),
        ])
        grid.setflags(write=False)
        _GRID_CACHE[key] = grid
    return _GRID_CACHE[key]


def apply_mask_activation(mask_logits: np.ndarray, mode: str) -> np.ndarray:
    """(N, H, W) logits to soft masks; softmax runs across queries."""
    if mode == "softmax":
        shifted = mask_logits - mask_logits.max(axis=0, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=0, keepdims=True)
    if mode == "sigmoid":
        return 1.0 / (1.0 + np.exp(-mask_logits))
    raise ConfigError("mask_activation must be one of %s" % (MASK_ACTIVATIONS,))


@dataclass
class PredictionSet:
    """Per-query class distributions and soft masks for one image."""

    class_probs: np.ndarray   # (N, K+1), rows sum to 1, column 0 = no object
    mask_logits: np.ndarray   # (N, H, W)
    masks: np.ndarray         # (N, H, W) in (0, 1)
    class_ids: tuple[int, ...]
    mask_activation: str


@dataclass
class ForwardCache:
    """Graph nodes needed to push upstream gradients back to the weights."""

    leaves: dict[str, ad.Var]
    class_probs: ad.Var
    mask_logits: ad.Var


def _check_finite(name: str, value: np.ndarray) -> None:
    if not np.all(np.isfinite(value)):
        raise NumericError("non-finite values in %s" % name)


def forward(params: ModelParams, image: np.ndarray) -> tuple[PredictionSet, ForwardCache]:
    """Run the model on one (C, H, W) image."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] != params.channels:
        raise ConfigError("image shape %s does not match %d input channels"
                          % (image.shape, params.channels))
    _, h, w = image.shape
    dim = params.dim
    leaves = {name: ad.Var(tensor) for name, tensor in params.tensors.items()}

    x = ad.Var(image)
    hidden = ad.tanh(ad.conv3x3(x, leaves["conv1_w"], leaves["conv1_b"]))
    feat = ad.conv3x3(hidden, leaves["conv2_w"], leaves["conv2_b"])
    _check_finite("backbone features", feat.value)

    pixels = feat + sinusoidal_grid(dim, h, w)
    pixf = ad.transpose(ad.reshape(pixels, (dim, h * w)))  # (HW, dim)

    # one cross-attention block: queries read from the pixel embeddings
    q_in = leaves["queries"]
    qc = q_in @ leaves["attn_wq"]
    keys = pixf @ leaves["attn_wk"]
    values = pixf @ leaves["attn_wv"]
    scores = (qc @ ad.transpose(keys)) * (dim ** -0.5)
    attn = ad.softmax(scores, axis=1)
    attended = (attn @ values) @ leaves["attn_wo"]
    q_mid = q_in + attended
    ffn = ad.tanh(q_mid @ leaves["ffn_w1"] + leaves["ffn_b1"]) @ leaves["ffn_w2"]
    q_out = q_mid + ffn + leaves["ffn_b2"]
    _check_finite("decoder output", q_out.value)

    class_logits = q_out @ ad.transpose(leaves["classifier_w"]) + leaves["classifier_b"]
    class_probs = ad.softmax(class_logits, axis=1)
    _check_finite("class probabilities", class_probs.value)

    mask_embed = ad.tanh(q_out @ leaves["mask_w1"] + leaves["mask_b1"]) \
        @ leaves["mask_w2"] + leaves["mask_b2"]
    mask_logits = ad.reshape(mask_embed @ ad.transpose(pixf), (-1, h, w))
    _check_finite("mask logits", mask_logits.value)

    masks = apply_mask_activation(mask_logits.value, params.mask_activation)
    preds = PredictionSet(class_probs=class_probs.value, mask_logits=mask_logits.value,
                          masks=masks, class_ids=params.class_ids,
                          mask_activation=params.mask_activation)
    cache = ForwardCache(leaves=leaves, class_probs=class_probs, mask_logits=mask_logits)
    return preds, cache


def backward(params: ModelParams, cache: ForwardCache, d_class_probs: np.ndarray,
             d_mask_logits: np.ndarray) -> dict[str, np.ndarray]:
    """Exact parameter gradients for given upstream output gradients."""
    ad.backward([(cache.class_probs, d_class_probs),
                 (cache.mask_logits, d_mask_logits)])
    grads = {}
    for name, leaf in cache.leaves.items():
        grads[name] = leaf.grad if leaf.grad is not None \
            else np.zeros_like(params.tensors[name])
    return grads


def zero_grads(params: ModelParams) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(t) for name, t in params.tensors.items()}


def accumulate_grads(total: dict[str, np.ndarray], part: dict[str, np.ndarray]) -> None:
    for name in total:
        total[name] += part[name]


def expand_classifier(params: ModelParams, new_class_ids: list[int],
                      rng: np.random.Generator) -> ModelParams:
    """Grow the classifier for new classes; existing rows are untouched."""
    if not new_class_ids:
        raise ConfigError("expand_classifier needs at least one new class")
    if len(set(new_class_ids)) != len(new_class_ids):
        raise ConfigError("duplicate ids in new classes")
    clash = set(new_class_ids) & set(params.class_ids)
    if clash or 0 in new_class_ids:
        raise ConfigError("new class ids collide with existing ones: %s"
                          % sorted(clash | ({0} & set(new_class_ids))))
    grown = params.copy()
    n_new = len(new_class_ids)
    new_rows = rng.normal(0.0, NEW_CLASS_INIT_STD, size=(n_new, params.dim))
    new_bias = rng.normal(0.0, NEW_CLASS_INIT_STD, size=(n_new,))
    grown.tensors["classifier_w"] = np.vstack([params.tensors["classifier_w"], new_rows])
    grown.tensors["classifier_b"] = np.concatenate([params.tensors["classifier_b"],
                                                    new_bias])
    grown.class_ids = params.class_ids + tuple(new_class_ids)
    return grown


# -- inference -----------------------------------------------------------


def infer_semantic(preds: PredictionSet) -> np.ndarray:
    """Per-pixel class labels: argmax of probability-weighted mask votes.

    The no-object column never wins; every pixel gets some known class.
    Ties resolve to the earliest classifier column.
    """
    votes = np.tensordot(preds.class_probs[:, 1:], preds.masks, axes=(0, 0))
    winner = votes.argmax(axis=0)
    ids = np.array(preds.class_ids, dtype=np.int64)
    return ids[winner]


def infer_panoptic(preds: PredictionSet, min_confidence: float = 0.5,
                   min_area: int = 4) -> list[Segment]:
    """Carve the image into disjoint segments, one per surviving query.

    Each pixel goes to the query maximizing (top class prob) * (mask
    value); ties go to the lowest query index. A query's segment is
    dropped when its top class probability is below `min_confidence`
    or its claimed area is below `min_area` pixels.
    """
    class_part = preds.class_probs[:, 1:]
    confidence = class_part.max(axis=1)
    scores = confidence[:, None, None] * preds.masks
    owner = scores.argmax(axis=0)
    segments = []
    for i in range(preds.class_probs.shape[0]):
        if confidence[i] < min_confidence:
            continue
        mask = owner == i
        if int(mask.sum()) < min_area:
            continue
        class_id = preds.class_ids[int(class_part[i].argmax())]
        segments.append(Segment(class_id=class_id, mask=mask))
    return segments


# -- checkpoints -----------------------------------------------------------


def serialize_params(params: ModelParams) -> bytes:
    """Checkpoint bytes: tensor table sorted by name, float64 payloads."""
    entries = dict(params.tensors)
    entries["meta.class_ids"] = np.array(params.class_ids, dtype=np.float64)
    entries["meta.mask_activation"] = np.array(
        [float(MASK_ACTIVATIONS.index(params.mask_activation))])
    chunks = [CHECKPOINT_MAGIC, struct.pack("<H", CHECKPOINT_VERSION)]
    for name in sorted(entries):
        tensor = np.asarray(entries[name], dtype=np.float64)
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", tensor.ndim))
        chunks.append(struct.pack("<%dI" % tensor.ndim, *tensor.shape))
        chunks.append(tensor.astype("<f8").tobytes(order="C"))
    return b"".join(chunks)


def deserialize_params(data: bytes) -> ModelParams:
    if data[:4] != CHECKPOINT_MAGIC:
        raise ConfigError("not a checkpoint: bad magic")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ConfigError("unsupported checkpoint version %d" % version)
    pos = 6
    entries: dict[str, np.ndarray] = {}
    while pos < len(data):
        (name_len,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from("<%dI" % rank, data, pos)
        pos += 4 * rank
        count = int(np.prod(shape)) if rank else 1
        tensor = np.frombuffer(data, dtype="<f8", count=count, offset=pos)
        pos += count * 8
        entries[name] = tensor.reshape(shape).astype(np.float64)
    class_ids = tuple(int(v) for v in entries.pop("meta.class_ids"))
    activation = MASK_ACTIVATIONS[int(entries.pop("meta.mask_activation")[0])]
    return ModelParams(tensors=entries, class_ids=class_ids,
                       mask_activation=activation)


def save_checkpoint(params: ModelParams, path: str | Path) -> None:
    Path(path).write_bytes(serialize_params(params))


def load_checkpoint(path: str | Path) -> ModelParams:
    return deserialize_params(Path(path).read_bytes())
