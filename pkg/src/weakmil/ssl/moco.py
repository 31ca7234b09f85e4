"""MoCo-v2 contrastive training of the patch encoder."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ..checkpoint import dumps_params, load_params, loads_params, save_params
from ..core import ParamSet, SgdConfig, Tensor, check_congruent, concat, grads_of, log_softmax, sgd_step
from ..exceptions import ConfigurationError, ContractError, DatasetError, NumericError
from .augment import AugmentationConfig, augment_pair
from .encoder import EncoderArch, arch_of, encode, encode_numpy, init_encoder, prepare_input

log = logging.getLogger(__name__)

ENCODER_MAGIC = b"MOCO"
UNIT_NORM_TOL = 1e-4
QUEUE_NORM_TOL = 1e-6


@dataclass(frozen=True)
class MoCoHyper:
    temperature: float = 0.07
    learning_rate: float = 0.06
    epochs: int = 20
    momentum: float = 0.999
    queue_size: int = 1024
    batch_size: int = 32
    feature_dim: int = 64
    weight_decay: float = 1e-4
    sgd_momentum: float = 0.9
    input_px: int = 32
    channels: tuple[int, int, int] = (16, 32, 64)
    head_hidden: int = 64
    # start from a full queue of random unit keys, as the reference MoCo code does
    prefill_queue: bool = True

    def __post_init__(self):
        if not self.temperature > 0:
            raise ConfigurationError("temperature must be positive")
        if not 0.0 <= self.momentum <= 1.0:
            raise ConfigurationError("momentum must lie in [0, 1]")
        if self.batch_size < 1 or self.queue_size < self.batch_size:
            raise ConfigurationError("queue_size must be at least batch_size")
        if self.queue_size % self.batch_size:
            raise ConfigurationError("queue_size must be a multiple of batch_size")
        if self.input_px % 4:
            raise ConfigurationError("input_px must be divisible by 4")
        if self.epochs < 0:
            raise ConfigurationError("epochs must be nonnegative")

    @property
    def arch(self) -> EncoderArch:
        return EncoderArch(tuple(self.channels), self.head_hidden, self.feature_dim)

    @property
    def sgd(self) -> SgdConfig:
        return SgdConfig(self.learning_rate, self.weight_decay, self.sgd_momentum)


@dataclass
class EncoderState:
    query: ParamSet
    key: ParamSet
    loss_history: list[float] = field(default_factory=list)

    def __post_init__(self):
        check_congruent(self.query, self.key)

    @classmethod
    def initial(cls, arch: EncoderArch, rng: np.random.Generator) -> "EncoderState":
        q = init_encoder(arch, rng)
        return cls(q, q.copy())


class NegativeQueue:
    """Fixed-capacity FIFO ring of unit-norm key features."""

    def __init__(self, capacity: int, dim: int):
        if capacity < 1:
            raise ConfigurationError("queue capacity must be positive")
        self.buffer = np.zeros((capacity, dim))
        self.head = 0
        self.fill = 0

    @property
    def capacity(self) -> int:
        return self.buffer.shape[0]

    def enqueue(self, keys) -> "NegativeQueue":
        keys = np.atleast_2d(np.asarray(keys, dtype=np.float64))
        if keys.shape[1] != self.buffer.shape[1]:
            raise ContractError(f"key dim {keys.shape[1]} != queue dim {self.buffer.shape[1]}")
        if self.capacity % len(keys):
            raise ContractError(f"batch of {len(keys)} does not divide queue size {self.capacity}")
        norms = np.linalg.norm(keys, axis=1)
        if np.any(np.abs(norms - 1.0) > QUEUE_NORM_TOL):
            raise ContractError("queued keys must be unit-norm")
        idx = (self.head + np.arange(len(keys))) % self.capacity
        self.buffer[idx] = keys
        self.head = int((self.head + len(keys)) % self.capacity)
        self.fill = min(self.fill + len(keys), self.capacity)
        return self

    def negatives(self) -> np.ndarray:
        """Stored keys, any order (all valid rows)."""
        if self.fill < self.capacity:
            return self.buffer[: self.fill]
        return self.buffer

    def ordered(self) -> np.ndarray:
        """Stored keys oldest first."""
        if self.fill < self.capacity:
            return self.buffer[: self.fill].copy()
        return np.roll(self.buffer, -self.head, axis=0)


def _check_unit(x: np.ndarray, what: str) -> None:
    norms = np.linalg.norm(np.atleast_2d(x), axis=1)
    if np.any(np.abs(norms - 1.0) > UNIT_NORM_TOL):
        raise ContractError(f"{what} must be unit-norm (got norms {norms.min():.6g}..{norms.max():.6g})")


def info_nce(q, k_pos, queue, temperature: float) -> Tensor:
    """Mean InfoNCE loss of queries against their positive key and queued negatives.

    ``q`` is ``(D,)`` or ``(B, D)``; only ``q`` carries gradient.  ``queue``
    is a :class:`NegativeQueue` or an ``(M, D)`` array of negatives.
    """
    q = q if isinstance(q, Tensor) else Tensor(q)
    if q.ndim == 1:
        q = q.reshape(1, -1)
    k_pos = np.atleast_2d(np.asarray(k_pos.data if isinstance(k_pos, Tensor) else k_pos, dtype=np.float64))
    negatives = queue.negatives() if isinstance(queue, NegativeQueue) else np.asarray(queue, dtype=np.float64)
    negatives = negatives.reshape(-1, q.shape[1])
    _check_unit(q.data, "queries")
    _check_unit(k_pos, "positive keys")
    if not temperature > 0:
        raise ConfigurationError("temperature must be positive")

    pos = (q * Tensor(k_pos)).sum(axis=1, keepdims=True) * (1.0 / temperature)
    if len(negatives):
        neg = (q @ Tensor(negatives.T)) * (1.0 / temperature)
        logits = concat([pos, neg], axis=1)
    else:
        logits = pos
    loss = -(log_softmax(logits, axis=1)[:, 0].mean())
    if not np.isfinite(loss.data):
        raise NumericError(f"InfoNCE loss is not finite: {loss.data!r}")
    return loss


def momentum_update(key: ParamSet, query: ParamSet, m: float) -> ParamSet:
    """Exponential moving average ``m*key + (1-m)*query``."""
    check_congruent(key, query)
    if m == 1.0:
        return key.copy()
    if m == 0.0:
        return query.copy()
    return ParamSet((k, m * key[k] + (1.0 - m) * query[k]) for k in key)


@dataclass(frozen=True)
class PatchRef:
    slide_id: str
    row: int
    col: int


def per_slide_quota(total_patches: int, n_slides: int) -> int:
    return total_patches // n_slides


def sample_ssl_dataset(manifest, grids, patches_per_slide: int, seed: int = 0) -> list[PatchRef]:
    """Class-balanced patch sample for contrastive training.

    Both classes contribute the same number of slides (the larger class is
    subsampled); each slide contributes ``min(patches_per_slide, kept)``
    distinct kept patches.
    """
    rng = np.random.default_rng(seed)
    by_class: dict[int, list] = {0: [], 1: []}
    for rec in manifest:
        by_class.setdefault(rec.label, []).append(rec)
    if any(not v for v in by_class.values()):
        raise DatasetError("contrastive sampling needs slides from both classes")
    n_each = min(len(v) for v in by_class.values())
    chosen = []
    for label in sorted(by_class):
        slides = by_class[label]
        pick = sorted(rng.choice(len(slides), size=n_each, replace=False))
        chosen.extend(slides[i] for i in pick)
    chosen.sort(key=lambda r: r.slide_id)

    refs = []
    for rec in chosen:
        coords = grids[rec.slide_id].kept_coords()
        if not coords:
            raise DatasetError(f"slide {rec.slide_id} has no kept patches")
        take = min(patches_per_slide, len(coords))
        for i in sorted(rng.choice(len(coords), size=take, replace=False)):
            refs.append(PatchRef(rec.slide_id, *coords[i]))
    return refs


def train_ssl(
    dataset,
    hyper: MoCoHyper = MoCoHyper(),
    seed: int = 0,
    augmentation: AugmentationConfig = AugmentationConfig(),
    state: EncoderState | None = None,
) -> EncoderState:
    """Run MoCo-v2 over ``dataset``, an ``(N, px, px, 3)`` array at encoder resolution.

    Per batch: two views, query and key encodings, InfoNCE against the
    queue, SGD on the query encoder, momentum update of the key encoder,
    then the keys are enqueued.  The last incomplete batch of each epoch is
    skipped so every enqueue divides the queue.
    """
    data = np.asarray(dataset, dtype=np.float64)
    if len(data) == 0:
        raise DatasetError("contrastive training needs at least one patch")
    rng = np.random.default_rng(seed)
    if state is None:
        state = EncoderState.initial(hyper.arch, rng)
    query, key = state.query.copy(), state.key.copy()
    queue = NegativeQueue(hyper.queue_size, hyper.feature_dim)
    if hyper.prefill_queue:
        noise = rng.normal(size=(hyper.queue_size, hyper.feature_dim))
        queue.enqueue(noise / np.linalg.norm(noise, axis=1, keepdims=True))
    velocity: dict = {}
    sgd = hyper.sgd
    batch = min(hyper.batch_size, len(data))
    if hyper.queue_size % batch:
        raise ConfigurationError(f"dataset of {len(data)} patches gives a batch that does not divide the queue")
    history = list(state.loss_history)

    for epoch in range(1, hyper.epochs + 1):
        order = rng.permutation(len(data))
        losses = []
        for b, start in enumerate(range(0, len(data) - batch + 1, batch), start=1):
            views = [augment_pair(data[i], augmentation, rng) for i in order[start : start + batch]]
            qv = np.stack([v[0] for v in views])
            kv = np.stack([v[1] for v in views])
            tensors = query.as_tensors()
            q = encode(tensors, qv)
            k = encode(key, kv).data
            loss = info_nce(q, k, queue, hyper.temperature)
            if not np.isfinite(loss.data):
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {b}")
            loss.backward()
            query = sgd_step(query, grads_of(tensors), sgd, velocity)
            key = momentum_update(key, query, hyper.momentum)
            queue.enqueue(k)
            losses.append(float(loss.data))
        mean = float(np.mean(losses))
        if not np.isfinite(mean):
            raise NumericError(f"non-finite mean loss at epoch {epoch}")
        history.append(mean)
        log.info("ssl epoch %d/%d mean loss %.4f", epoch, hyper.epochs, mean)
    return EncoderState(query, key, history)


def save_encoder(path, state: EncoderState) -> None:
    save_params(path, ENCODER_MAGIC, _flatten(state))


def dumps_encoder(state: EncoderState) -> bytes:
    return dumps_params(ENCODER_MAGIC, _flatten(state))


def _flatten(state: EncoderState) -> ParamSet:
    out = ParamSet()
    for prefix, ps in (("query", state.query), ("key", state.key)):
        for k, v in ps.items():
            out[f"{prefix}/{k}"] = v
    return out


def _unflatten(flat: ParamSet) -> EncoderState:
    q = ParamSet((k.split("/", 1)[1], v) for k, v in flat.items() if k.startswith("query/"))
    k_ = ParamSet((k.split("/", 1)[1], v) for k, v in flat.items() if k.startswith("key/"))
    return EncoderState(q, k_)


def load_encoder(path) -> EncoderState:
    return _unflatten(load_params(path, ENCODER_MAGIC))


def loads_encoder(blob: bytes) -> EncoderState:
    return _unflatten(loads_params(ENCODER_MAGIC, blob))


class MoCoEncoder(TransformerMixin, BaseEstimator):
    """Contrastively trained patch encoder with a scikit-learn interface.

    ``fit`` takes an ``(N, px, px, 3)`` array of RGB patches (0-255) and
    trains a query/key encoder pair with MoCo-v2.  ``transform`` maps
    patches to L2-normalized features with the query encoder, without
    augmentation.

    Parameters
    ----------
    feature_dim : int
        Output feature size.
    temperature : float
        InfoNCE temperature.
    learning_rate : float
        Constant SGD learning rate of the query encoder.
    epochs : int
        Passes over the patch set.
    momentum : float
        Key-encoder moving-average coefficient.
    queue_size : int
        Number of negative keys kept; a multiple of ``batch_size``.
    batch_size : int
        Patches per optimizer step.
    prefill_queue : bool
        Start training with a queue of random unit keys instead of an empty one.
    input_px : int
        Working resolution; patches are box-averaged or resized to it.
    augmentation : AugmentationConfig or None
        View sampling; ``None`` uses the defaults.
    random_state : int
        Seed for initialization, shuffling and augmentation.

    Attributes
    ----------
    state_ : EncoderState
        Trained query and key parameters.
    loss_curve_ : list of float
        Mean InfoNCE loss per epoch.
    """

    def __init__(self, feature_dim=64, temperature=0.07, learning_rate=0.06, epochs=20,
                 momentum=0.999, queue_size=1024, batch_size=32, weight_decay=1e-4,
                 sgd_momentum=0.9, input_px=32, channels=(16, 32, 64), head_hidden=64,
                 prefill_queue=True, augmentation=None, random_state=0):
        self.feature_dim = feature_dim
        self.temperature = temperature
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.momentum = momentum
        self.queue_size = queue_size
        self.batch_size = batch_size
        self.weight_decay = weight_decay
        self.sgd_momentum = sgd_momentum
        self.input_px = input_px
        self.channels = channels
        self.head_hidden = head_hidden
        self.prefill_queue = prefill_queue
        self.augmentation = augmentation
        self.random_state = random_state

    def _hyper(self) -> MoCoHyper:
        return MoCoHyper(
            temperature=self.temperature, learning_rate=self.learning_rate, epochs=self.epochs,
            momentum=self.momentum, queue_size=self.queue_size, batch_size=self.batch_size,
            feature_dim=self.feature_dim, weight_decay=self.weight_decay,
            sgd_momentum=self.sgd_momentum, input_px=self.input_px,
            channels=tuple(self.channels), head_hidden=self.head_hidden,
            prefill_queue=self.prefill_queue,
        )

    def fit(self, X, y=None):
        X = _check_patches(X)
        hyper = self._hyper()
        data = prepare_input(X, hyper.input_px)
        aug = self.augmentation or AugmentationConfig()
        self.state_ = train_ssl(data, hyper, seed=self.random_state, augmentation=aug)
        self.loss_curve_ = list(self.state_.loss_history)
        self.n_features_out_ = hyper.feature_dim
        return self

    def transform(self, X):
        check_is_fitted(self, "state_")
        X = _check_patches(X, allow_empty=True)
        return encode_numpy(self.state_.query, prepare_input(X, self.input_px))

    @classmethod
    def from_state(cls, state: EncoderState, input_px: int = 32, **kwargs) -> "MoCoEncoder":
        arch = arch_of(state.query)
        est = cls(feature_dim=arch.feature_dim, channels=arch.channels, head_hidden=arch.head_hidden,
                  input_px=input_px, **kwargs)
        est.state_ = state
        est.loss_curve_ = list(state.loss_history)
        est.n_features_out_ = arch.feature_dim
        return est


def _check_patches(X, allow_empty: bool = False) -> np.ndarray:
    X = np.asarray(X)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[-1] != 3 or X.shape[1] != X.shape[2]:
        raise ValueError(f"expected square RGB patches (N, px, px, 3), got shape {X.shape}")
    if not allow_empty and len(X) == 0:
        raise DatasetError("no patches given")
    if not np.all(np.isfinite(X)):
        raise ValueError("patches contain non-finite values")
    return X
