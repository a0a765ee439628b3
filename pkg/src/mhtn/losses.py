"""Loss terms of the hybrid transfer objective, all recorded on a :class:`Tape`.

Five terms make up the training objective:

* ``st``  - single-modal transfer: MMD^2 between source and target image
  activations, summed over the transfer layers;
* ``sds`` - source-domain supervision: softmax loss on the source classifier;
* ``ct``  - cross-modal transfer: squared distance between each image and
  its document partners, summed over modalities, layers and documents;
* ``sc``  - semantic consistency: softmax loss of the shared classifier over
  every modality;
* ``mc``  - modality discrimination: per-unit sigmoid cross entropy of the
  modality discriminator.

``mc`` is a plain (positive) cross entropy. The adversarial sign comes only
from the gradient reversal node that sits in front of the discriminator.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Mapping, Optional, Sequence

import numpy as np

from . import kernels
from .autodiff import Var, concat_rows, gradient_reversal, linear_combination
from .errors import ConfigurationError, DataError

__all__ = [
    "KernelSpec",
    "LossWeights",
    "LossBundle",
    "TERMS",
    "mmd_squared",
    "single_modal_transfer_loss",
    "softmax_supervision_loss",
    "pairwise_discrepancy",
    "cross_modal_transfer_loss",
    "semantic_consistency_loss",
    "modal_adversarial_loss",
    "gradient_reversal",
    "total_objective",
]

TERMS = ("st", "sds", "ct", "sc", "mc")

MEDIAN_MULTIPLIERS = (0.5, 1.0, 2.0)


@dataclass(frozen=True)
class KernelSpec:
    """Mixture of Gaussian kernels ``k(x, y) = exp(-|x - y|^2 / (2 sigma^2))``."""

    bandwidths: tuple[float, ...]
    weights: Optional[tuple[float, ...]] = None
    kind: str = "gaussian"

    def __post_init__(self):
        if self.kind != "gaussian":
            raise ConfigurationError(f"unsupported kernel kind {self.kind!r}")
        bw = tuple(float(s) for s in self.bandwidths)
        if not bw or any(not s > 0 for s in bw):
            raise ConfigurationError(f"kernel bandwidths must be positive and non-empty, got {bw}")
        w = self.weights
        if w is None:
            w = (1.0 / len(bw),) * len(bw)
        w = tuple(float(x) for x in w)
        if len(w) != len(bw) or any(x < 0 for x in w) or abs(sum(w) - 1.0) > 1e-9:
            raise ConfigurationError(f"kernel weights must be non-negative and sum to 1, got {w}")
        object.__setattr__(self, "bandwidths", bw)
        object.__setattr__(self, "weights", w)

    @classmethod
    def median_heuristic(cls, *samples: np.ndarray, multipliers=MEDIAN_MULTIPLIERS) -> "KernelSpec":
        """Bandwidths ``m * sigma_med`` from the median pairwise distance of the joined samples."""
        joined = np.vstack(samples)
        sigma = 1.0
        if joined.shape[0] > 1:
            med = float(np.median(kernels.pairwise_distances(joined)))
            if med > 0 and np.isfinite(med):
                sigma = med
        return cls(tuple(m * sigma for m in multipliers))

    @property
    def gammas(self) -> np.ndarray:
        return 1.0 / (2.0 * np.square(self.bandwidths))


@dataclass(frozen=True)
class LossWeights:
    st: float = 1.0
    sds: float = 1.0
    ct: float = 0.001
    sc: float = 1.0
    lam: float = 0.1

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigurationError(f"lambda must be >= 0, got {self.lam}")


@dataclass
class LossBundle:
    """Scalar loss values of one batch; ``None`` marks a disabled term."""

    st: Optional[float] = None
    sds: Optional[float] = None
    ct: Optional[float] = None
    sc: Optional[float] = None
    mc: Optional[float] = None
    weights: LossWeights = LossWeights()

    @property
    def objective(self) -> float:
        """``w_st ST + w_sds SDS + w_ct CT + w_sc SC - lam MC`` over enabled terms."""
        w = self.weights
        total = 0.0
        for name, coef in (("st", w.st), ("sds", w.sds), ("ct", w.ct), ("sc", w.sc), ("mc", -w.lam)):
            v = getattr(self, name)
            if v is not None:
                total += coef * v
        return total

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != "weights"}


# ---------------------------------------------------------------------------
# single-modal transfer


def mmd_squared(a: Var, b: Var, kernel: KernelSpec) -> Var:
    """Biased MMD^2 estimate ``mean K_aa + mean K_bb - 2 mean K_ab``.

    Bandwidths are constants of the node; no gradient flows into them.
    """
    if a.shape[1] != b.shape[1]:
        raise ConfigurationError(f"mmd dimension mismatch: {a.shape} vs {b.shape}")
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ConfigurationError("mmd needs at least one row in each sample")
    val, ga, gb = kernels.mmd2_and_grad(a.value, b.value, kernel.gammas, np.asarray(kernel.weights))
    return a.tape.record(np.array([[val]]), (a, b), lambda g: (g[0, 0] * ga, g[0, 0] * gb))


def single_modal_transfer_loss(src_layers: Sequence[Var], tgt_layers: Sequence[Var], kernel=None) -> Var:
    """Sum of MMD^2 over corresponding layer pairs.

    ``kernel`` is a :class:`KernelSpec` or ``None``; ``None`` picks median
    heuristic bandwidths per layer pair.
    """
    if len(src_layers) != len(tgt_layers) or not src_layers:
        raise ConfigurationError(
            f"transfer layer lists differ in length: {len(src_layers)} vs {len(tgt_layers)}"
        )
    terms = []
    for s, t in zip(src_layers, tgt_layers):
        k = kernel if kernel is not None else KernelSpec.median_heuristic(s.value, t.value)
        terms.append(mmd_squared(s, t, k))
    return linear_combination(terms, [1.0] * len(terms))


# ---------------------------------------------------------------------------
# softmax / sigmoid cross entropy


def _check_labels(labels, n, c) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != n:
        raise DataError(f"{labels.shape[0]} labels for {n} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise DataError(f"label out of range [0, {c}): {labels[(labels < 0) | (labels >= c)][0]}")
    return labels


def softmax_supervision_loss(logits: Var, labels, normalizer: Optional[float] = None) -> Var:
    """``-(1/normalizer) sum_i log softmax(logits_i)[y_i]``; normalizer defaults to the row count."""
    z = logits.value
    n, c = z.shape
    y = _check_labels(labels, n, c)
    norm = float(n if normalizer is None else normalizer)
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    log_p = shifted[np.arange(n), y] - log_norm
    val = -log_p.sum() / norm

    def back(g):
        p = np.exp(shifted - log_norm[:, None])
        p[np.arange(n), y] -= 1.0
        return (g[0, 0] / norm * p,)

    return logits.tape.record(np.array([[val]]), (logits,), back)


def _softplus(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def modal_adversarial_loss(outputs: Var, onehots, num_documents: Optional[float] = None) -> Var:
    """Per-unit sigmoid cross entropy against one-hot modality indicators.

    ``-(1/N) sum_i sum_u [p log s(o) + (1-p) log(1 - s(o))]`` with ``N`` the
    number of documents (defaults to the row count).
    """
    o = outputs.value
    p = np.asarray(onehots, dtype=np.float64)
    if p.shape != o.shape:
        raise DataError(f"modality indicators shape {p.shape} != discriminator output {o.shape}")
    if not (np.all((p == 0) | (p == 1)) and np.all(p.sum(axis=1) == 1)):
        raise DataError("modality indicators must be one-hot rows")
    norm = float(o.shape[0] if num_documents is None else num_documents)
    val = (p * _softplus(-o) + (1.0 - p) * _softplus(o)).sum() / norm
    return outputs.tape.record(
        np.array([[val]]), (outputs,), lambda g: (g[0, 0] / norm * (_sigmoid(o) - p),)
    )


def semantic_consistency_loss(logits: Sequence[Var], labels, num_documents: Optional[float] = None) -> Var:
    """Shared-classifier softmax loss summed over modalities, divided by the document count.

    ``labels`` is one label per document, or one label array per modality;
    in the latter case all arrays must agree.
    """
    if not logits:
        raise ConfigurationError("semantic consistency needs at least one modality")
    if isinstance(labels, Mapping):
        labels = list(labels.values())
    if isinstance(labels, (list, tuple)) and labels and np.ndim(labels[0]) == 1:
        first = np.asarray(labels[0])
        for other in labels[1:]:
            if not np.array_equal(first, np.asarray(other)):
                raise DataError("labels differ across modalities of the same document")
        labels = first
    labels = np.asarray(labels, dtype=np.int64)
    n = logits[0].shape[0]
    if any(l.shape[0] != n for l in logits):
        raise DataError("every modality needs one row per document")
    stacked = logits[0] if len(logits) == 1 else concat_rows(logits)
    return softmax_supervision_loss(stacked, np.tile(labels, len(logits)), n if num_documents is None else num_documents)


# ---------------------------------------------------------------------------
# cross-modal transfer


def pairwise_discrepancy(a: Var, b: Var) -> Var:
    """``sum_j |a_j - b_j|^2`` over aligned rows; a single row pair gives c^2."""
    if a.shape != b.shape:
        raise ConfigurationError(f"pairwise discrepancy shape mismatch: {a.shape} vs {b.shape}")
    diff = a.value - b.value
    return a.tape.record(
        np.array([[np.sum(diff * diff)]]), (a, b), lambda g: (2.0 * g[0, 0] * diff, -2.0 * g[0, 0] * diff)
    )


def cross_modal_transfer_loss(activations: Mapping[str, Sequence[Var]], image: str = "image") -> Var:
    """Sum of image-to-partner squared distances over modalities, layers, documents.

    ``activations`` maps each modality to its per-layer activation matrices
    (rows aligned by document).
    """
    if image not in activations:
        raise DataError(f"image modality {image!r} missing from document activations")
    img = activations[image]
    terms = []
    for mod, layers in activations.items():
        if mod == image:
            continue
        if len(layers) != len(img):
            raise DataError(f"modality {mod!r} has {len(layers)} transfer layers, image has {len(img)}")
        for a, b in zip(img, layers):
            if a.shape[0] != b.shape[0]:
                raise DataError(f"modality {mod!r} is missing rows for some documents")
            terms.append(pairwise_discrepancy(a, b))
    if not terms:
        raise DataError("cross-modal transfer needs at least one non-image modality")
    return linear_combination(terms, [1.0] * len(terms))


# ---------------------------------------------------------------------------
# combined objective


def total_objective(terms: Mapping[str, Optional[Var]], weights: LossWeights) -> Var:
    """Root node for one training step.

    Its value is the saddle-point objective
    ``w_st ST + w_sds SDS + w_ct CT + w_sc SC - lam MC``. Its backward sends
    the weights to the first four terms and ``+1`` to ``mc``: the MC term must
    be computed behind :func:`gradient_reversal` with the same ``lam``, which
    turns that ``+1`` into ``-lam`` for every parameter upstream of the
    reversal while the discriminator keeps ``+dMC``.
    """
    coef = {"st": weights.st, "sds": weights.sds, "ct": weights.ct, "sc": weights.sc}
    active = [(name, terms.get(name)) for name in TERMS if terms.get(name) is not None]
    if not active:
        raise ConfigurationError("no active loss terms")
    value = sum(
        (-weights.lam if name == "mc" else coef[name]) * var.item() for name, var in active
    )
    back_coef = [1.0 if name == "mc" else coef[name] for name, _ in active]
    parents = tuple(var for _, var in active)
    return parents[0].tape.record(
        np.array([[value]]), parents, lambda g: tuple(c * g for c in back_coef)
    )
