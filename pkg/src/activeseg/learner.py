"""Voxel classifier trained with a weighted soft Dice loss on partial annotations.

The model is a small multilayer perceptron over hand-crafted multi-scale
intensity features. Hidden layers use tanh and are followed by inverted
dropout; the output layer is a two-class softmax whose class-1 column is the
foreground probability.
"""
from __future__ import annotations

import base64
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import EmptyAnnotationError, InvalidArgumentError, ParseError
from .volume import LabelVolume, ScalarVolume

log = logging.getLogger(__name__)

DICE_EPS = 1e-6
_CHUNK = 1 << 16


# ---------------------------------------------------------------------------
# annotations


@dataclass(frozen=True, eq=False)
class PartialLabels:
    """Labels ``y`` plus a binary weight mask ``w`` marking annotated voxels."""

    labels: LabelVolume
    weights: LabelVolume

    def __post_init__(self):
        if self.labels.dims != self.weights.dims or self.labels.spacing != self.weights.spacing:
            raise InvalidArgumentError("labels and weights must share dims and spacing")

    @classmethod
    def full(cls, labels: LabelVolume) -> "PartialLabels":
        return cls(labels, LabelVolume(np.ones(labels.dims, dtype=np.uint8), labels.spacing))

    @classmethod
    def from_slices(cls, reference: LabelVolume, zs) -> "PartialLabels":
        """Annotate whole z-slices ``zs`` of ``reference``; everything else is unlabeled (0, weight 0)."""
        zs = sorted(set(int(z) for z in zs))
        w = np.zeros(reference.dims, dtype=np.uint8)
        y = np.zeros(reference.dims, dtype=np.uint8)
        if zs:
            w[:, :, zs] = 1
            y[:, :, zs] = reference.data[:, :, zs]
        return cls(LabelVolume(y, reference.spacing), LabelVolume(w, reference.spacing))

    def annotated_count(self) -> int:
        return self.weights.count()


# ---------------------------------------------------------------------------
# features


@dataclass(frozen=True)
class FeatureConfig:
    """Per-voxel features: box means of the normalized image at odd window sizes.

    A window of 1 is the normalized intensity itself, so ``include_raw`` is
    off by default.
    """

    scales: tuple[int, ...] = (1, 3, 7, 15)
    include_raw: bool = False
    include_z: bool = False
    shift: float = 75.0
    scale: float = 50.0

    def validate(self):
        for s in self.scales:
            if int(s) != s or s < 1 or s % 2 == 0:
                raise InvalidArgumentError(f"box window sizes must be odd and >= 1, got {s!r}")
        if self.scale == 0:
            raise InvalidArgumentError("intensity scale must be nonzero")
        if self.n_features == 0:
            raise InvalidArgumentError("feature configuration yields no features")

    @property
    def n_features(self) -> int:
        return int(self.include_raw) + len(self.scales) + int(self.include_z)

    def to_dict(self) -> dict:
        return {
            "scales": list(self.scales),
            "include_raw": self.include_raw,
            "include_z": self.include_z,
            "shift": self.shift,
            "scale": self.scale,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureConfig":
        return cls(
            scales=tuple(int(s) for s in d.get("scales", cls.scales)),
            include_raw=bool(d.get("include_raw", cls.include_raw)),
            include_z=bool(d.get("include_z", cls.include_z)),
            shift=float(d.get("shift", cls.shift)),
            scale=float(d.get("scale", cls.scale)),
        )


def feature_matrix(v: ScalarVolume, cfg: FeatureConfig) -> np.ndarray:
    """Features for every voxel, rows in flat (x-fastest) order."""
    cfg.validate()
    norm = (v.data - cfg.shift) / cfg.scale
    cols = []
    if cfg.include_raw:
        cols.append(norm)
    for s in cfg.scales:
        s = int(s)
        cols.append(norm if s == 1 else ndimage.uniform_filter(norm, size=s, mode="mirror"))
    if cfg.include_z:
        nz = v.dims[2]
        z = (np.arange(nz, dtype=np.float64) + 0.5) / nz
        cols.append(np.broadcast_to(z, v.dims))
    return np.stack([c.ravel(order="F") for c in cols], axis=1)


def extract_features(v: ScalarVolume, cfg: FeatureConfig, voxel_indices=None) -> np.ndarray:
    """Feature rows for the given flat voxel indices (all voxels when None)."""
    feats = feature_matrix(v, cfg)
    if voxel_indices is None:
        return feats
    idx = np.asarray(voxel_indices, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= feats.shape[0]):
        raise InvalidArgumentError("voxel index out of range")
    return feats[idx]


class FeatureCache:
    """Memoizes :func:`feature_matrix` per volume object.

    Holds a reference to each volume so object identities stay valid.
    """

    def __init__(self, cfg: FeatureConfig):
        self.cfg = cfg
        self._store: dict[int, tuple[ScalarVolume, np.ndarray]] = {}

    def get(self, v: ScalarVolume) -> np.ndarray:
        hit = self._store.get(id(v))
        if hit is None or hit[0] is not v:
            hit = (v, feature_matrix(v, self.cfg))
            self._store[id(v)] = hit
        return hit[1]


# ---------------------------------------------------------------------------
# network


@dataclass
class MlpParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    dropout: float = 0.25

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or len(self.weights) < 2:
            raise InvalidArgumentError("need at least one hidden layer and one output layer")
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.ndim != 2 or b.shape != (W.shape[1],):
                raise InvalidArgumentError(f"layer {k} weight/bias shapes do not match")
            if k and W.shape[0] != self.weights[k - 1].shape[1]:
                raise InvalidArgumentError(f"layer {k} input width does not chain with layer {k - 1}")
        if self.weights[-1].shape[1] != 2:
            raise InvalidArgumentError("output layer must have 2 classes")
        if not 0 <= self.dropout < 1:
            raise InvalidArgumentError("dropout rate must satisfy 0 <= p < 1")

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [W.shape[1] for W in self.weights]

    @property
    def hidden_sizes(self) -> list[int]:
        return self.sizes[1:-1]

    def copy(self) -> "MlpParams":
        return MlpParams([W.copy() for W in self.weights], [b.copy() for b in self.biases], self.dropout)

    def arrays(self) -> list[np.ndarray]:
        return [a for pair in zip(self.weights, self.biases) for a in pair]

    def n_params(self) -> int:
        return sum(a.size for a in self.arrays())


def init_params(sizes, dropout: float, rng: np.random.Generator) -> MlpParams:
    """Glorot-uniform weights, zero biases."""
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpParams(weights, biases, dropout)


def zero_params(sizes, dropout: float = 0.25) -> MlpParams:
    return MlpParams(
        [np.zeros((a, b)) for a, b in zip(sizes[:-1], sizes[1:])],
        [np.zeros(b) for b in sizes[1:]],
        dropout,
    )


def draw_dropout_masks(params: MlpParams, n_rows: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Inverted-dropout masks with entries in {0, 1/(1-p)}, one per hidden layer."""
    p = params.dropout
    keep = 1.0 / (1.0 - p)
    return [(rng.random((n_rows, h), dtype=np.float32) >= p) * keep for h in params.hidden_sizes]


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _check_features(params: MlpParams, X: np.ndarray):
    if X.ndim != 2 or X.shape[1] != params.weights[0].shape[0]:
        raise InvalidArgumentError(
            f"feature width {X.shape[-1] if X.ndim else '?'} does not match model input {params.weights[0].shape[0]}"
        )


def _hidden(params: MlpParams, X: np.ndarray, masks, start: int = 0) -> tuple[list, list]:
    """Run hidden layers from ``start``; returns (pre-dropout activations, layer inputs)."""
    acts, inputs = [], []
    h = X
    n_hidden = len(params.weights) - 1
    for k in range(start, n_hidden):
        inputs.append(h)
        a = np.tanh(h @ params.weights[k] + params.biases[k])
        acts.append(a)
        h = a if masks is None else a * masks[k]
    inputs.append(h)
    return acts, inputs


def forward(params: MlpParams, features: np.ndarray, masks=None) -> np.ndarray:
    """Class probabilities, shape (rows, 2). ``masks=None`` disables dropout."""
    X = np.asarray(features, dtype=np.float64)
    _check_features(params, X)
    if masks is not None and len(masks) != len(params.hidden_sizes):
        raise InvalidArgumentError("need one dropout mask per hidden layer")
    _, inputs = _hidden(params, X, masks)
    return _softmax(inputs[-1] @ params.weights[-1] + params.biases[-1])


def dice_loss(p, y, w, eps: float = DICE_EPS) -> float:
    """Weighted soft Dice loss ``1 - 2 sum(w y p) / (sum(w y) + sum(w p) + eps)``."""
    p, y, w = (np.asarray(a, dtype=np.float64).ravel() for a in (p, y, w))
    if not (p.shape == y.shape == w.shape):
        raise InvalidArgumentError("p, y and w must have equal lengths")
    if not np.any(w):
        raise EmptyAnnotationError("loss requested on a batch without annotated voxels")
    wy = w * y
    num = 2.0 * np.sum(wy * p)
    den = np.sum(wy) + np.sum(w * p) + eps
    return float(1.0 - num / den)


def dice_loss_grad(p, y, w, eps: float = DICE_EPS) -> np.ndarray:
    """Analytic ``dL/dp``; exactly zero wherever ``w == 0``."""
    p, y, w = (np.asarray(a, dtype=np.float64).ravel() for a in (p, y, w))
    if not (p.shape == y.shape == w.shape):
        raise InvalidArgumentError("p, y and w must have equal lengths")
    if not np.any(w):
        raise EmptyAnnotationError("loss requested on a batch without annotated voxels")
    wy = w * y
    num = 2.0 * np.sum(wy * p)
    den = np.sum(wy) + np.sum(w * p) + eps
    return -w * (2.0 * y * den - num) / (den * den)


def backward(params: MlpParams, features, masks, y, w) -> tuple[float, MlpParams]:
    """Loss and its gradient w.r.t. every weight and bias.

    The gradient is returned as an :class:`MlpParams` with the same shapes.
    """
    X = np.asarray(features, dtype=np.float64)
    _check_features(params, X)
    y = np.asarray(y, dtype=np.float64).ravel()
    w = np.asarray(w, dtype=np.float64).ravel()
    if y.shape[0] != X.shape[0] or w.shape[0] != X.shape[0]:
        raise InvalidArgumentError("labels and weights must have one entry per feature row")
    if masks is not None and len(masks) != len(params.hidden_sizes):
        raise InvalidArgumentError("need one dropout mask per hidden layer")

    acts, inputs = _hidden(params, X, masks)
    probs = _softmax(inputs[-1] @ params.weights[-1] + params.biases[-1])
    p1 = probs[:, 1]
    loss = dice_loss(p1, y, w)
    g = dice_loss_grad(p1, y, w) * (p1 * probs[:, 0])
    dz = np.stack([-g, g], axis=1)

    n_layers = len(params.weights)
    gW = [None] * n_layers
    gb = [None] * n_layers
    for k in range(n_layers - 1, -1, -1):
        gW[k] = inputs[k].T @ dz
        gb[k] = dz.sum(axis=0)
        if k == 0:
            break
        dh = dz @ params.weights[k].T
        if masks is not None:
            dh = dh * masks[k - 1]
        dz = dh * (1.0 - acts[k - 1] ** 2)
    return loss, MlpParams(gW, gb, params.dropout)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: MlpParams) -> "AdamState":
        return cls([np.zeros_like(a) for a in params.arrays()], [np.zeros_like(a) for a in params.arrays()], 0)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_patches: int = 8
    patch_size: tuple[int, int, int] = (16, 16, 4)
    max_steps: int = 2000
    val_interval: int = 200
    seed: int = 0
    stratified: bool = True
    hidden_sizes: tuple[int, ...] = (32,)
    dropout: float = 0.25
    # stop once val Jaccard has not improved by min_delta for this fraction of max_steps
    early_stop_fraction: float | None = None
    min_delta: float = 1e-4

    def validate(self):
        if not self.learning_rate > 0:
            raise InvalidArgumentError("learning rate must be positive")
        if self.val_interval < 1:
            raise InvalidArgumentError("validation interval must be >= 1")
        if self.max_steps < 0:
            raise InvalidArgumentError("max_steps must be >= 0")
        if self.batch_patches < 1 or (self.stratified and self.batch_patches < 2):
            raise InvalidArgumentError("stratified sampling needs at least 2 patches per batch")
        if len(self.patch_size) != 3 or min(self.patch_size) < 1:
            raise InvalidArgumentError("patch size must be three positive ints")
        if not self.hidden_sizes or min(self.hidden_sizes) < 1:
            raise InvalidArgumentError("need at least one hidden layer")
        if not 0 <= self.dropout < 1:
            raise InvalidArgumentError("dropout rate must satisfy 0 <= p < 1")
        if self.early_stop_fraction is not None and not 0 < self.early_stop_fraction <= 1:
            raise InvalidArgumentError("early_stop_fraction must lie in (0, 1]")

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["patch_size"] = list(self.patch_size)
        d["hidden_sizes"] = list(self.hidden_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidArgumentError(f"unknown training fields: {sorted(unknown)}")
        if "patch_size" in d:
            d["patch_size"] = tuple(int(x) for x in d["patch_size"])
        if "hidden_sizes" in d:
            d["hidden_sizes"] = tuple(int(x) for x in d["hidden_sizes"])
        return cls(**d)


def adam_step(params: MlpParams, grads: MlpParams, state: AdamState, cfg: TrainConfig) -> tuple[MlpParams, AdamState]:
    t = state.t + 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new_arrays, ms, vs = [], [], []
    for theta, g, m, v in zip(params.arrays(), grads.arrays(), state.m, state.v):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        new_arrays.append(theta - cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps))
        ms.append(m)
        vs.append(v)
    out = MlpParams(new_arrays[0::2], new_arrays[1::2], params.dropout)
    return out, AdamState(ms, vs, t)


# ---------------------------------------------------------------------------
# batch sampling


@dataclass
class Patch:
    volume: int
    voxels: np.ndarray  # flat indices
    y: np.ndarray
    w: np.ndarray


class _AnnotatedPool:
    """Flat index tables of annotated (and annotated-foreground) voxels."""

    def __init__(self, items):
        self.dims = []
        self.y = []
        self.w = []
        annotated, liver = [], []
        for _, labels in items:
            w = labels.weights.flat()
            y = labels.labels.flat() & w  # unannotated labels never reach the learner
            self.dims.append(labels.labels.dims)
            self.y.append(y)
            self.w.append(w)
            annotated.append(np.flatnonzero(w))
            liver.append(np.flatnonzero(y))
        self.annotated = annotated
        self.liver = liver
        self.annotated_cum = np.cumsum([a.size for a in annotated])
        self.liver_cum = np.cumsum([a.size for a in liver])

    @staticmethod
    def _pick(tables, cum, rng) -> tuple[int, int]:
        r = int(rng.integers(cum[-1]))
        vol = int(np.searchsorted(cum, r, side="right"))
        offset = r - (cum[vol - 1] if vol else 0)
        return vol, int(tables[vol][offset])

    def patch_at(self, vol: int, center: int, size) -> Patch:
        nx, ny, nz = self.dims[vol]
        c = (center % nx, (center // nx) % ny, center // (nx * ny))
        ranges = []
        for ci, n, s in zip(c, (nx, ny, nz), size):
            s = min(int(s), n)
            start = min(max(ci - s // 2, 0), n - s)
            ranges.append(np.arange(start, start + s))
        i, j, k = np.meshgrid(*ranges, indexing="ij")
        flat = (i + nx * (j + ny * k)).ravel(order="F")
        return Patch(vol, flat, self.y[vol][flat], self.w[vol][flat])

    def sample(self, cfg: TrainConfig, rng) -> list[Patch]:
        if self.annotated_cum.size == 0 or self.annotated_cum[-1] == 0:
            raise EmptyAnnotationError("training set has no annotated voxels")
        if cfg.stratified and self.liver_cum[-1] == 0:
            raise EmptyAnnotationError("training set has no annotated foreground voxels")
        patches = []
        for b in range(cfg.batch_patches):
            if cfg.stratified and b == 0:
                vol, center = self._pick(self.liver, self.liver_cum, rng)
            else:
                vol, center = self._pick(self.annotated, self.annotated_cum, rng)
            patches.append(self.patch_at(vol, center, cfg.patch_size))
        return patches


def sample_stratified_batch(items, cfg: TrainConfig, rng: np.random.Generator) -> list[Patch]:
    """Draw one mini-batch of patches.

    Patch centers are annotated voxels, so every patch holds annotated data.
    With ``cfg.stratified`` the first patch is centered on an annotated
    foreground voxel.
    """
    return _AnnotatedPool(items).sample(cfg, rng)


# ---------------------------------------------------------------------------
# inference and scoring


def _predict_flat(params: MlpParams, feats: np.ndarray) -> np.ndarray:
    out = np.empty(feats.shape[0])
    for s in range(0, feats.shape[0], _CHUNK):
        out[s : s + _CHUNK] = forward(params, feats[s : s + _CHUNK])[:, 1]
    return out


def predict(params: MlpParams, v: ScalarVolume, cfg: FeatureConfig, cache: FeatureCache | None = None) -> ScalarVolume:
    """Dense foreground probability with dropout off."""
    feats = cache.get(v) if cache is not None else feature_matrix(v, cfg)
    _check_features(params, feats)
    p = _predict_flat(params, feats)
    return ScalarVolume(p.reshape(v.dims, order="F"), v.spacing)


def threshold(prob: ScalarVolume, level: float = 0.5) -> LabelVolume:
    return LabelVolume(prob.data >= level, prob.spacing)


def jaccard(pred: LabelVolume, ref: LabelVolume) -> float:
    if pred.dims != ref.dims:
        raise InvalidArgumentError(f"dims differ: {pred.dims} vs {ref.dims}")
    a = pred.data.astype(bool)
    b = ref.data.astype(bool)
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainLog:
    entries: list[tuple[int, float, float]] = field(default_factory=list)  # (step, mean loss, val jaccard)
    best_step: int = 0
    best_jaccard: float = float("nan")
    steps_run: int = 0


def train(train_set, val_set, cfg: TrainConfig, features: FeatureConfig = FeatureConfig(),
          cache: FeatureCache | None = None) -> tuple[MlpParams, TrainLog]:
    """Train from scratch and return the parameters with the best validation Jaccard.

    ``train_set`` holds (image, PartialLabels) pairs, ``val_set`` holds
    (image, LabelVolume) pairs. Validation runs every ``cfg.val_interval``
    steps and after the last step; ties keep the earliest step.
    """
    cfg.validate()
    features.validate()
    if not train_set or not val_set:
        raise InvalidArgumentError("training and validation sets must be nonempty")
    if cache is None or cache.cfg != features:
        cache = FeatureCache(features)

    rng = np.random.default_rng(np.random.SeedSequence(int(cfg.seed)))
    params = init_params([features.n_features, *cfg.hidden_sizes, 2], cfg.dropout, rng)
    tlog = TrainLog()
    if cfg.max_steps == 0:
        return params, tlog

    pool = _AnnotatedPool(train_set)
    train_feats = [cache.get(img) for img, _ in train_set]
    state = AdamState.zeros_like(params)
    best = params
    best_j = -math.inf
    plateau_j, plateau_step = -math.inf, 0
    losses = []
    for step in range(1, cfg.max_steps + 1):
        patches = pool.sample(cfg, rng)
        X = np.concatenate([train_feats[pt.volume][pt.voxels] for pt in patches])
        y = np.concatenate([pt.y for pt in patches])
        w = np.concatenate([pt.w for pt in patches])
        masks = draw_dropout_masks(params, X.shape[0], rng)
        loss, grads = backward(params, X, masks, y, w)
        params, state = adam_step(params, grads, state, cfg)
        losses.append(loss)
        tlog.steps_run = step

        if step % cfg.val_interval == 0 or step == cfg.max_steps:
            val_j = float(np.mean([
                jaccard(threshold(predict(params, img, features, cache)), ref) for img, ref in val_set
            ]))
            tlog.entries.append((step, float(np.mean(losses)), val_j))
            losses = []
            if val_j > best_j:
                best, best_j = params.copy(), val_j
                tlog.best_step, tlog.best_jaccard = step, val_j
            if val_j >= plateau_j + cfg.min_delta:
                plateau_j, plateau_step = val_j, step
            if cfg.early_stop_fraction is not None and step - plateau_step >= cfg.early_stop_fraction * cfg.max_steps:
                log.debug("early stop at step %d (no improvement since %d)", step, plateau_step)
                break
    return best, tlog


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_FORMAT = "activeseg-mlp"
CHECKPOINT_VERSION = 1


def _enc(a: np.ndarray) -> dict:
    return {"shape": list(a.shape), "data": base64.b64encode(a.astype("<f8").tobytes()).decode("ascii")}


def _dec(d: dict) -> np.ndarray:
    raw = base64.b64decode(d["data"])
    shape = tuple(d["shape"])
    arr = np.frombuffer(raw, dtype="<f8")
    if arr.size != math.prod(shape):
        raise ParseError(f"parameter array size {arr.size} does not match shape {shape}", field="shape")
    return arr.reshape(shape).astype(np.float64)


def save_checkpoint(path, params: MlpParams, features: FeatureConfig):
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "layer_sizes": params.sizes,
        "dropout": params.dropout,
        "features": features.to_dict(),
        "weights": [_enc(W) for W in params.weights],
        "biases": [_enc(b) for b in params.biases],
    }
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(doc, indent=1))
    tmp.replace(path)


def load_checkpoint(path) -> tuple[MlpParams, FeatureConfig]:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"checkpoint is not valid JSON: {exc}") from None
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ParseError("not a model checkpoint", field="format")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ParseError(f"unsupported checkpoint version {doc.get('version')}", field="version")
    try:
        params = MlpParams([_dec(d) for d in doc["weights"]], [_dec(d) for d in doc["biases"]], float(doc["dropout"]))
    except KeyError as exc:
        raise ParseError(f"checkpoint is missing {exc.args[0]}", field=exc.args[0]) from None
    except InvalidArgumentError as exc:
        raise ParseError(str(exc), field="layer_sizes") from None
    if params.sizes != doc.get("layer_sizes"):
        raise ParseError("layer_sizes disagree with the stored arrays", field="layer_sizes")
    features = FeatureConfig.from_dict(doc.get("features", {}))
    if features.n_features != params.sizes[0]:
        raise ParseError("feature configuration does not match the input layer", field="features")
    return params, features

