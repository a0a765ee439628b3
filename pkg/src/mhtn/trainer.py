"""Cross-modal document assembly and the joint adversarial SGD loop."""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field
from typing import IO, Iterator, NamedTuple, Optional, Sequence

import numpy as np

from .autodiff import Tape, sgd_step
from .data import Dataset
from .errors import ConfigurationError, DataError, NumericalError
from .losses import (
    TERMS,
    LossBundle,
    LossWeights,
    cross_modal_transfer_loss,
    modal_adversarial_loss,
    semantic_consistency_loss,
    single_modal_transfer_loss,
    softmax_supervision_loss,
    total_objective,
)
from .network import Activations, StarNetwork

log = logging.getLogger(__name__)

REPORT_COLUMNS = ("epoch",) + TERMS + ("wall_time",)


class CrossModalDocument(NamedTuple):
    """One image plus one partner per other modality (positions into the dataset)."""

    members: dict
    label: int


@dataclass
class Documents:
    modalities: list[str]
    index: np.ndarray  # (documents, modalities) positions
    labels: np.ndarray

    def __len__(self):
        return self.index.shape[0]

    def __getitem__(self, j) -> CrossModalDocument:
        return CrossModalDocument(dict(zip(self.modalities, map(int, self.index[j]))), int(self.labels[j]))

    def __iter__(self) -> Iterator[CrossModalDocument]:
        return (self[j] for j in range(len(self)))


def assemble_documents(tar: Dataset, policy: str = "auto", seed=0, modalities: Optional[Sequence[str]] = None) -> Documents:
    """One document per training image.

    ``pair_table`` takes the given co-existence groups; ``by_label`` draws,
    for each image, a uniformly random same-class instance of every other
    modality. ``auto`` uses the pair table when the dataset has one.
    """
    mods = list(modalities or tar.modalities)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if policy == "auto":
        policy = "pair_table" if tar.pair_table is not None else "by_label"
    img = mods[0]

    if policy == "pair_table":
        if tar.pair_table is None:
            raise DataError("pair_table policy requested but dataset has no pair table")
        cols = [tar.modalities.index(m) for m in mods]
        index = tar.pair_table[:, cols].copy()
        return Documents(mods, index, tar.labels[img][index[:, 0]].copy())
    if policy != "by_label":
        raise ConfigurationError(f"unknown document policy {policy!r}")

    img_labels = tar.labels[img]
    if np.any(img_labels < 0):
        raise DataError("by_label assembly needs labelled training images")
    index = np.empty((img_labels.size, len(mods)), dtype=np.int64)
    index[:, 0] = np.arange(img_labels.size)
    for k, mod in enumerate(mods[1:], start=1):
        lab = tar.labels[mod]
        for c in np.unique(img_labels):
            pool = np.flatnonzero(lab == c)
            if pool.size == 0:
                raise DataError(f"class {c} has no instances of modality {mod!r}")
            rows = np.flatnonzero(img_labels == c)
            index[rows, k] = pool[rng.integers(pool.size, size=rows.size)]
    return Documents(mods, index, img_labels.copy())


@dataclass
class TrainSchedule:
    epochs: int = 30
    batch_size_documents: int = 32
    batch_size_source: int = 32
    seed: int = 0
    lr_scale: float = 1.0
    lr_decay: float = 1.0  # per-epoch multiplier on lr_scale
    document_policy: str = "auto"
    reshuffle: bool = True

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigurationError("epochs must be >= 0")
        if self.batch_size_documents < 1 or self.batch_size_source < 1:
            raise ConfigurationError("batch sizes must be >= 1")
        if self.lr_scale < 0 or self.lr_decay <= 0:
            raise ConfigurationError("lr_scale must be >= 0 and lr_decay > 0")

    def lr_at(self, epoch: int) -> float:
        return self.lr_scale * self.lr_decay**epoch


@dataclass
class Batch:
    inputs: dict[str, np.ndarray]
    labels: np.ndarray
    source_x: Optional[np.ndarray] = None
    source_y: Optional[np.ndarray] = None


def make_batch(tar: Dataset, docs: Documents, rows, src: Optional[Dataset] = None, src_rows=None) -> Batch:
    idx = docs.index[rows]
    inputs = {m: tar.features[m][idx[:, k]] for k, m in enumerate(docs.modalities)}
    batch = Batch(inputs, docs.labels[rows])
    if src is not None and src_rows is not None:
        mod = src.modalities[0]
        batch.source_x = src.features[mod][src_rows]
        batch.source_y = src.labels[mod][src_rows]
    return batch


# ---------------------------------------------------------------------------
# one step


def loss_terms(net: StarNetwork, acts: Activations, labels, source_labels=None) -> dict:
    """Tape nodes for every loss term the configuration enables (``None`` otherwise)."""
    cfg = net.config
    tl = cfg.transfer_layers
    terms = dict.fromkeys(TERMS)
    if cfg.use_source:
        terms["st"] = single_modal_transfer_loss(
            [acts.source_specific[l] for l in tl], [acts.specific[cfg.image][l] for l in tl], cfg.kernel
        )
        if cfg.use_sds:
            terms["sds"] = softmax_supervision_loss(acts.source_logits, source_labels)
    terms["ct"] = cross_modal_transfer_loss({m: [acts.specific[m][l] for l in tl] for m in cfg.modalities}, cfg.image)
    terms["sc"] = semantic_consistency_loss([acts.logits[m] for m in cfg.modalities], labels, acts.num_documents)
    if acts.discriminator is not None:
        terms["mc"] = modal_adversarial_loss(acts.discriminator, acts.modality_onehots, acts.num_documents)
    return terms


def _bundle(terms: dict, weights: LossWeights) -> LossBundle:
    vals = {}
    for name, var in terms.items():
        if var is None:
            vals[name] = None
            continue
        v = var.item()
        if not np.isfinite(v):
            raise NumericalError(f"loss term {name!r} is non-finite ({v})")
        vals[name] = v
    return LossBundle(weights=weights, **vals)


def evaluate_batch(net: StarNetwork, batch: Batch, lam: Optional[float] = None) -> LossBundle:
    """Loss values on a batch without touching parameters."""
    tape = Tape(record=False)
    weights = net.config.weights if lam is None else dataclasses.replace(net.config.weights, lam=lam)
    acts = net.forward(tape, batch.inputs, batch.source_x, lam=weights.lam)
    return _bundle(loss_terms(net, acts, batch.labels, batch.source_y), weights)


def compute_gradients(net: StarNetwork, batch: Batch, lam: Optional[float] = None, root: str = "total"):
    """``(bundle, grads)`` for the combined objective or one isolated term.

    ``root`` is ``"total"`` or a term name. Isolated terms are differentiated
    with unit weight; ``mc`` still passes through the reversal node.
    """
    weights = net.config.weights if lam is None else dataclasses.replace(net.config.weights, lam=lam)
    tape = Tape()
    acts = net.forward(tape, batch.inputs, batch.source_x, lam=weights.lam)
    terms = loss_terms(net, acts, batch.labels, batch.source_y)
    bundle = _bundle(terms, weights)
    if root == "total":
        node = total_objective(terms, weights)
    else:
        node = terms.get(root)
        if node is None:
            raise ConfigurationError(f"loss term {root!r} is disabled in this configuration")
    return bundle, tape.backward(node, net.param_groups())


def train_step(
    net: StarNetwork,
    batch: Batch,
    lam: Optional[float] = None,
    lr_scale: float = 1.0,
    frozen: Sequence[str] = (),
) -> LossBundle:
    """One forward, one backward through the combined objective, one SGD update per group.

    Groups named in ``frozen`` are left untouched.
    """
    bundle, grads = compute_gradients(net, batch, lam)
    for name, group in net.groups.items():
        if name not in frozen:
            sgd_step(group, grads[name], lr_scale)
    return bundle


# ---------------------------------------------------------------------------
# full loop


@dataclass
class EpochRecord:
    epoch: int
    losses: dict
    wall_time: float

    def line(self) -> str:
        cells = [str(self.epoch)]
        cells += ["-" if self.losses.get(t) is None else repr(self.losses[t]) for t in TERMS]
        cells.append(f"{self.wall_time:.3f}")
        return "\t".join(cells)


@dataclass
class TrainingReport:
    epochs: list[EpochRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.epochs)

    @staticmethod
    def header() -> str:
        return "\t".join(REPORT_COLUMNS)


def _mean_bundles(bundles: Sequence[LossBundle]) -> dict:
    out = {}
    for t in TERMS:
        vals = [getattr(b, t) for b in bundles if getattr(b, t) is not None]
        out[t] = float(np.mean(vals)) if vals else None
    return out


def train(
    net: StarNetwork,
    src: Optional[Dataset],
    tar: Dataset,
    schedule: TrainSchedule,
    report: Optional[IO[str]] = None,
    checkpoint=None,
) -> TrainingReport:
    """Run ``schedule.epochs`` epochs of document minibatches, each paired with a source minibatch.

    by_label documents are redrawn every epoch. When ``checkpoint`` is a
    path it is rewritten atomically after every epoch. ``report`` receives
    one tab-separated line per epoch.
    """
    cfg = net.config
    missing = [m for m in cfg.modalities if m not in tar.features]
    if missing:
        raise DataError(f"target dataset lacks modalities {missing}")
    if cfg.use_source:
        if src is None or src.count(src.modalities[0]) == 0:
            raise DataError("source pathway enabled but no source data given")
        if cfg.use_sds:
            lab = src.labels[src.modalities[0]]
            if lab.min() < 0 or lab.max() >= cfg.num_classes_source:
                raise DataError(f"source labels must lie in [0, {cfg.num_classes_source})")

    rng = np.random.default_rng(schedule.seed)
    out = TrainingReport()
    if report is not None:
        report.write(TrainingReport.header() + "\n")
    docs = None
    src_queue = np.empty(0, dtype=np.int64)
    n_src = src.count(src.modalities[0]) if (cfg.use_source and src is not None) else 0

    for epoch in range(schedule.epochs):
        t0 = time.perf_counter()
        if docs is None or schedule.document_policy == "by_label" or (
            schedule.document_policy == "auto" and tar.pair_table is None
        ):
            docs = assemble_documents(tar, schedule.document_policy, rng, cfg.modalities)
        order = rng.permutation(len(docs)) if schedule.reshuffle else np.arange(len(docs))
        lr = schedule.lr_at(epoch)
        bundles = []
        for start in range(0, len(docs), schedule.batch_size_documents):
            rows = order[start : start + schedule.batch_size_documents]
            src_rows = None
            if n_src:
                while src_queue.size < schedule.batch_size_source:
                    src_queue = np.concatenate([src_queue, rng.permutation(n_src)])
                src_rows, src_queue = src_queue[: schedule.batch_size_source], src_queue[schedule.batch_size_source :]
            batch = make_batch(tar, docs, rows, src if n_src else None, src_rows)
            bundles.append(train_step(net, batch, lr_scale=lr))
        rec = EpochRecord(epoch, _mean_bundles(bundles), time.perf_counter() - t0)
        out.epochs.append(rec)
        log.info("epoch %d %s", epoch, rec.losses)
        if report is not None:
            report.write(rec.line() + "\n")
            report.flush()
        if checkpoint is not None:
            net.save(checkpoint)
    return out
