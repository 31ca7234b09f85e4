"""Gated-attention MIL slide classifier and the max-pooling baseline.

The model projects each patch feature to ``h_i = relu(W x_i + b)`` and then
runs two independent attention branches, one per class::

    s_ci = w_c . (tanh(V_c h_i + bv_c) * sigmoid(U_c h_i + bu_c))
    a_c  = softmax_i(s_c)
    z_c  = sum_i a_ci h_i
    logit_c = head_c . z_c + hb_c

Class probabilities are ``softmax(logits)``; the positive-class probability is
the slide score.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.linear_model import LogisticRegression
from sklearn.utils.validation import check_is_fitted

from .checkpoint import load_params, save_params
from .core import ParamSet, SgdConfig, Tensor, concat, cross_entropy, glorot_uniform, grads_of, matmul, sgd_step, softmax
from .exceptions import ConfigurationError, DatasetError, DimensionError, EmptyBagError
from .evaluation import roc_auc

log = logging.getLogger(__name__)

MIL_MAGIC = b"WMIL"
N_CLASSES = 2
LR_GRID = (1e-3, 1e-4, 1e-5)
WD_GRID = (1e-3, 1e-5)


@dataclass(frozen=True)
class MilHyper:
    learning_rate: float = 1e-3
    weight_decay: float = 1e-5
    epochs: int = 100
    hidden: int = 128
    attention: int = 64
    sgd_momentum: float = 0.9

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigurationError("learning_rate must be positive")
        if self.weight_decay < 0:
            raise ConfigurationError("weight_decay must be nonnegative")
        if self.epochs < 0:
            raise ConfigurationError("epochs must be nonnegative")
        if self.hidden < 1 or self.attention < 1:
            raise ConfigurationError("hidden and attention sizes must be positive")
        if not 0.0 <= self.sgd_momentum < 1.0:
            raise ConfigurationError("sgd_momentum must lie in [0, 1)")

    @property
    def sgd(self) -> SgdConfig:
        return SgdConfig(self.learning_rate, self.weight_decay, self.sgd_momentum)

    def replace(self, **changes) -> "MilHyper":
        return MilHyper(**{**{f.name: getattr(self, f.name) for f in fields(self)}, **changes})


def init_mil(in_dim: int, hyper: MilHyper, rng: np.random.Generator) -> ParamSet:
    h, l = hyper.hidden, hyper.attention
    p = ParamSet()
    p["proj.w"] = glorot_uniform(rng, (in_dim, h), in_dim, h)
    p["proj.b"] = np.zeros(h)
    for c in range(N_CLASSES):
        p[f"att{c}.V"] = glorot_uniform(rng, (h, l), h, l)
        p[f"att{c}.bv"] = np.zeros(l)
        p[f"att{c}.U"] = glorot_uniform(rng, (h, l), h, l)
        p[f"att{c}.bu"] = np.zeros(l)
        p[f"att{c}.w"] = glorot_uniform(rng, (l, 1), l, 1)
        p[f"head{c}.w"] = glorot_uniform(rng, (h, 1), h, 1)
        p[f"head{c}.b"] = np.zeros(1)
    return p


def _t(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _features(bag) -> np.ndarray:
    x = bag.features if hasattr(bag, "features") else bag
    x = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError(f"a bag must be an (N, D) matrix, got shape {x.shape}")
    if len(x) == 0:
        raise EmptyBagError(f"bag {getattr(bag, 'slide_id', '<array>')} is empty")
    return x


def attention_pool(bag, params):
    """Per-class slide embeddings and attention weights.

    Returns ``(z, a, s)``: lists over classes of the ``(1, H)`` embedding,
    the ``(N,)`` attention weights and the ``(N,)`` raw scores, as tensors.
    """
    x = _features(bag)
    h = (matmul(Tensor(x), _t(params["proj.w"])) + _t(params["proj.b"])).relu()
    zs, attn, raw = [], [], []
    for c in range(N_CLASSES):
        gate = (matmul(h, _t(params[f"att{c}.V"])) + _t(params[f"att{c}.bv"])).tanh() * (
            matmul(h, _t(params[f"att{c}.U"])) + _t(params[f"att{c}.bu"])
        ).sigmoid()
        s = matmul(gate, _t(params[f"att{c}.w"])).reshape(-1)
        a = softmax(s, axis=0)
        zs.append(matmul(a.reshape(1, -1), h))
        attn.append(a)
        raw.append(s)
    return zs, attn, raw


def mil_forward(bag, params) -> Tensor:
    """Slide logits, shape ``(2,)``."""
    zs, _, _ = attention_pool(bag, params)
    logits = [
        (matmul(zs[c], _t(params[f"head{c}.w"])) + _t(params[f"head{c}.b"])).reshape(1)
        for c in range(N_CLASSES)
    ]
    return concat(logits, axis=0)


def slide_probability(bag, params) -> float:
    logits = mil_forward(bag, params).data
    return float(softmax(logits).data[1])


def attention_scores(bag, params) -> np.ndarray:
    """``(2, N)`` attention weights for a bag (class 0 row, class 1 row)."""
    _, attn, _ = attention_pool(bag, params)
    return np.stack([a.data for a in attn])


def _labels_of(bags, labels):
    if labels is None:
        labels = [b.label for b in bags]
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) != len(bags):
        raise ConfigurationError(f"{len(bags)} bags for {len(labels)} labels")
    return labels


def train_mil(bags, hyper: MilHyper = MilHyper(), seed: int = 0, labels=None,
              init: ParamSet | None = None, history: list | None = None) -> ParamSet:
    """SGD over bags, one step per bag in a seeded shuffled order each epoch.

    Mean epoch loss is appended to ``history`` when given.
    """
    labels = _labels_of(bags, labels)
    if len(set(labels.tolist())) < 2:
        raise DatasetError("MIL training needs bags from both classes")
    feats = [_features(b) for b in bags]
    dims = {f.shape[1] for f in feats}
    if len(dims) != 1:
        raise DimensionError(f"bags disagree on feature size: {sorted(dims)}")
    rng = np.random.default_rng(seed)
    params = init.copy() if init is not None else init_mil(dims.pop(), hyper, rng)
    sgd = hyper.sgd
    velocity: dict = {}
    for epoch in range(1, hyper.epochs + 1):
        losses = []
        for i in rng.permutation(len(feats)):
            tensors = params.as_tensors()
            loss = cross_entropy(mil_forward(feats[i], tensors), labels[i])
            loss.backward()
            params = sgd_step(params, grads_of(tensors), sgd, velocity)
            losses.append(float(loss.data))
        mean = float(np.mean(losses))
        if history is not None:
            history.append(mean)
        log.debug("mil epoch %d/%d mean loss %.5f", epoch, hyper.epochs, mean)
    return params


def mean_loss(bags, params, labels=None) -> float:
    labels = _labels_of(bags, labels)
    return float(np.mean([cross_entropy(mil_forward(b, params), y).data for b, y in zip(bags, labels)]))


def max_pool_baseline(patch_probs) -> float:
    """Slide score of traditional MIL: the highest per-patch positive probability."""
    probs = np.asarray(patch_probs, dtype=np.float64).reshape(-1)
    if probs.size == 0:
        raise EmptyBagError("max-pooling needs at least one patch")
    return float(probs.max())


def save_mil(path, params) -> None:
    save_params(path, MIL_MAGIC, params)


def load_mil(path) -> ParamSet:
    return load_params(path, MIL_MAGIC)


def write_training_log(history, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "mean_loss"])
        for e, v in enumerate(history, start=1):
            w.writerow([e, repr(float(v))])


def select_hyper(bags, folds, base: MilHyper = MilHyper(), seed: int = 0,
                 lr_grid=LR_GRID, wd_grid=WD_GRID):
    """Grid search over learning rate and weight decay by mean fold AUC.

    ``folds`` are :class:`~weakmil.evaluation.FoldSplit` objects keyed by
    slide id.  Returns ``(best_hyper, table)`` where ``table`` lists
    ``(lr, wd, mean_auc)`` for every combination; ties go to the earlier one.
    """
    by_id = {b.slide_id: b for b in bags}
    table = []
    best, best_auc = None, -np.inf
    for lr in lr_grid:
        for wd in wd_grid:
            hyper = base.replace(learning_rate=lr, weight_decay=wd)
            aucs = []
            for fold in folds:
                train = [by_id[s] for s in fold.train_ids]
                test = [by_id[s] for s in fold.test_ids]
                params = train_mil(train, hyper, seed=seed + fold.fold_id)
                scores = [slide_probability(b, params) for b in test]
                aucs.append(roc_auc(scores, [b.label for b in test]))
            mean = float(np.mean(aucs))
            table.append((lr, wd, mean))
            if mean > best_auc:
                best, best_auc = hyper, mean
    return best, table


# -- estimators -------------------------------------------------------------------


def _as_bags(X):
    if isinstance(X, np.ndarray) and X.ndim == 3:
        return [x for x in X]
    return list(X)


class AttentionMILClassifier(ClassifierMixin, BaseEstimator):
    """Gated-attention MIL over bags of patch features.

    ``X`` is a sequence of bags, each an ``(N_i, D)`` array or a
    :class:`~weakmil.features.FeatureBag`; ``y`` holds 0/1 slide labels.

    Parameters
    ----------
    learning_rate, weight_decay : float
        SGD settings.
    epochs : int
        Passes over the training bags.
    hidden, attention : int
        Projection width H and attention width L.
    sgd_momentum : float
        Heavy-ball momentum.
    random_state : int
        Seed for initialization and bag order.

    Attributes
    ----------
    params_ : ParamSet
    loss_curve_ : list of float
    classes_ : ndarray
    """

    def __init__(self, learning_rate=1e-3, weight_decay=1e-5, epochs=100, hidden=128,
                 attention=64, sgd_momentum=0.9, random_state=0):
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.hidden = hidden
        self.attention = attention
        self.sgd_momentum = sgd_momentum
        self.random_state = random_state

    def _hyper(self) -> MilHyper:
        return MilHyper(self.learning_rate, self.weight_decay, self.epochs, self.hidden,
                        self.attention, self.sgd_momentum)

    def fit(self, X, y=None):
        bags = _as_bags(X)
        if not bags:
            raise DatasetError("no bags given")
        history: list[float] = []
        self.params_ = train_mil(bags, self._hyper(), seed=self.random_state, labels=y, history=history)
        self.loss_curve_ = history
        self.classes_ = np.arange(N_CLASSES)
        self.n_features_in_ = _features(bags[0]).shape[1]
        return self

    @classmethod
    def from_params(cls, params: ParamSet, **kwargs) -> "AttentionMILClassifier":
        est = cls(hidden=params["proj.w"].shape[1], attention=params["att0.V"].shape[1], **kwargs)
        est.params_ = params
        est.loss_curve_ = []
        est.classes_ = np.arange(N_CLASSES)
        est.n_features_in_ = params["proj.w"].shape[0]
        return est

    def decision_function(self, X) -> np.ndarray:
        """Logit difference ``logit_1 - logit_0`` per bag."""
        check_is_fitted(self, "params_")
        out = [mil_forward(b, self.params_).data for b in _as_bags(X)]
        return np.array([o[1] - o[0] for o in out])

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        return np.array([softmax(mil_forward(b, self.params_).data).data for b in _as_bags(X)])

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X)[:, 1] >= 0.5).astype(np.int64)

    def attention_weights(self, X) -> list[np.ndarray]:
        """Per-bag ``(2, N)`` attention weights."""
        check_is_fitted(self, "params_")
        return [attention_scores(b, self.params_) for b in _as_bags(X)]


class MaxPoolMILClassifier(ClassifierMixin, BaseEstimator):
    """Traditional MIL baseline: each patch inherits its slide's label for
    training a patch classifier; a slide scores as its most positive patch.

    Parameters
    ----------
    C : float
        Inverse regularization strength of the logistic patch classifier.
    max_iter : int
        Solver iteration cap.
    """

    def __init__(self, C=1.0, max_iter=1000):
        self.C = C
        self.max_iter = max_iter

    def fit(self, X, y=None):
        bags = _as_bags(X)
        labels = _labels_of(bags, y)
        if len(set(labels.tolist())) < 2:
            raise DatasetError("baseline training needs bags from both classes")
        feats = [_features(b) for b in bags]
        inst_y = np.concatenate([np.full(len(f), lab) for f, lab in zip(feats, labels)])
        self.patch_classifier_ = LogisticRegression(C=self.C, max_iter=self.max_iter)
        self.patch_classifier_.fit(np.vstack(feats), inst_y)
        self.classes_ = np.arange(N_CLASSES)
        return self

    def patch_probabilities(self, bag) -> np.ndarray:
        check_is_fitted(self, "patch_classifier_")
        return self.patch_classifier_.predict_proba(_features(bag))[:, 1]

    def predict_proba(self, X) -> np.ndarray:
        p = np.array([max_pool_baseline(self.patch_probabilities(b)) for b in _as_bags(X)])
        return np.column_stack([1.0 - p, p])

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X)[:, 1] >= 0.5).astype(np.int64)
