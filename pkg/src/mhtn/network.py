"""Six-pathway star topology: per-modality specific layers, shared common layers,
a shared classifier, a modality discriminator behind gradient reversal, and a
source-image pathway that starts as a copy of the target image pathway.

Parameter groups
----------------
``source``          source pathway specific layers + source classifier (theta_S)
``<image>``         target image pathway (theta_I)
``<modality>``      one group per other modality (together theta_O')
``common``          common layers + shared classifier (theta_C)
``discriminator``   modality discriminator (theta_M)
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import asdict, dataclass, field, fields
from typing import Mapping, Optional, Sequence

import numpy as np

from .autodiff import ParamGroup, Tape, Var, affine, concat_rows, gradient_reversal, relu
from .errors import CheckpointError, ConfigurationError, DataError
from .losses import KernelSpec, LossWeights

SOURCE = "source"
COMMON = "common"
DISCRIMINATOR = "discriminator"
RESERVED = {SOURCE, COMMON, DISCRIMINATOR}

MAGIC = b"MHTN"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class PathwaySpec:
    modality: str
    input_dim: int
    layer_widths: tuple[int, ...] = (4096, 4096)
    learning_rate: float = 0.01


@dataclass
class NetworkConfig:
    """Topology, optimisation constants and ablation switches.

    Defaults are the full-scale values (4096-unit layers, 1024-unit
    discriminator, learning rates 0.01 / 0.001, weight decay 0.0005,
    loss weights 1 / 1 / 0.001 / 1 and lambda 0.1); shrink the widths for
    desk-scale runs.
    """

    modalities: tuple[str, ...]
    input_dims: dict[str, int]
    num_classes_target: int
    num_classes_source: int = 1
    specific_widths: tuple[int, ...] = (4096, 4096)
    common_widths: tuple[int, ...] = (4096, 4096)
    discriminator_widths: tuple[int, ...] = (1024, 1024)
    specific_lr: float = 0.01
    common_lr: float = 0.01
    discriminator_lr: float = 0.001
    weight_decay: float = 0.0005
    weights: LossWeights = field(default_factory=LossWeights)
    transfer_layers: tuple[int, ...] = (0, 1)
    kernel_bandwidths: Optional[tuple[float, ...]] = None
    no_source: bool = False
    no_sl_net: bool = False
    no_adver: bool = False
    no_sds: bool = False

    def __post_init__(self):
        self.modalities = tuple(self.modalities)
        self.input_dims = {str(k): int(v) for k, v in self.input_dims.items()}
        self.specific_widths = tuple(int(w) for w in self.specific_widths)
        self.common_widths = tuple(int(w) for w in self.common_widths)
        self.discriminator_widths = tuple(int(w) for w in self.discriminator_widths)
        self.transfer_layers = tuple(sorted(int(i) for i in self.transfer_layers))
        if self.kernel_bandwidths is not None:
            self.kernel_bandwidths = tuple(float(s) for s in self.kernel_bandwidths)
        if isinstance(self.weights, Mapping):
            self.weights = LossWeights(**self.weights)
        self.validate()

    def validate(self) -> None:
        mods = self.modalities
        if len(mods) < 2:
            raise ConfigurationError("need at least two modalities (image first)")
        if len(set(mods)) != len(mods):
            raise ConfigurationError(f"duplicate modality tags: {mods}")
        bad = RESERVED.intersection(mods)
        if bad:
            raise ConfigurationError(f"reserved names used as modality tags: {sorted(bad)}")
        missing = [m for m in mods if m not in self.input_dims]
        if missing:
            raise ConfigurationError(f"no input dimension for modalities {missing}")
        if any(d < 1 for d in self.input_dims.values()):
            raise ConfigurationError("input dimensions must be >= 1")
        for label, widths, allow_empty in (
            ("specific_widths", self.specific_widths, False),
            ("common_widths", self.common_widths, False),
            ("discriminator_widths", self.discriminator_widths, True),
        ):
            if (not widths and not allow_empty) or any(w < 1 for w in widths):
                raise ConfigurationError(f"{label} must be positive (got {widths})")
        if self.num_classes_target < 2 or self.num_classes_source < 1:
            raise ConfigurationError("num_classes_target must be >= 2 and num_classes_source >= 1")
        if not self.transfer_layers or any(not 0 <= i < len(self.specific_widths) for i in self.transfer_layers):
            raise ConfigurationError(
                f"transfer_layers {self.transfer_layers} outside 0..{len(self.specific_widths) - 1}"
            )
        for name in ("specific_lr", "common_lr", "discriminator_lr"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be > 0")
        if self.weight_decay < 0:
            raise ConfigurationError("weight_decay must be >= 0")

    @property
    def image(self) -> str:
        return self.modalities[0]

    @property
    def use_source(self) -> bool:
        return not self.no_source

    @property
    def use_sds(self) -> bool:
        return self.use_source and not self.no_sds

    @property
    def use_common(self) -> bool:
        return not self.no_sl_net

    @property
    def use_adversary(self) -> bool:
        return self.use_common and not self.no_adver

    @property
    def kernel(self) -> Optional[KernelSpec]:
        return None if self.kernel_bandwidths is None else KernelSpec(self.kernel_bandwidths)

    def pathways(self) -> list[PathwaySpec]:
        specs = [PathwaySpec(m, self.input_dims[m], self.specific_widths, self.specific_lr) for m in self.modalities]
        if self.use_source:
            specs.insert(0, PathwaySpec(SOURCE, self.input_dims[self.image], self.specific_widths, self.specific_lr))
        return specs

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["weights"] = asdict(self.weights)
        d["modalities"] = list(self.modalities)
        for key in ("specific_widths", "common_widths", "discriminator_widths", "transfer_layers"):
            d[key] = list(d[key])
        if d["kernel_bandwidths"] is not None:
            d["kernel_bandwidths"] = list(d["kernel_bandwidths"])
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "NetworkConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown network config keys: {sorted(unknown)}")
        return cls(**dict(d))

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def _dense_layers(rng, group: ParamGroup, widths: Sequence[int], fan_in: int) -> list[tuple[int, int]]:
    layers = []
    for width in widths:
        group.matrices.append(glorot_uniform(rng, fan_in, width))
        group.matrices.append(np.zeros((1, width)))
        layers.append((len(group.matrices) - 2, len(group.matrices) - 1))
        fan_in = width
    return layers


@dataclass
class Activations:
    """Everything the loss terms read from one forward pass over a document batch."""

    num_documents: int
    specific: dict[str, list[Var]]
    logits: dict[str, Var]
    source_specific: Optional[list[Var]] = None
    source_logits: Optional[Var] = None
    common: Optional[Var] = None
    discriminator: Optional[Var] = None
    modality_onehots: Optional[np.ndarray] = None


class StarNetwork:
    """Parameters plus forward passes of the star topology.

    Build with :meth:`build`; restore with :meth:`load`.
    """

    def __init__(self, config: NetworkConfig, groups: dict[str, ParamGroup], layers: dict[str, list]):
        self.config = config
        self.groups = groups
        # layer tables: name -> list of (group name, weight index, bias index)
        self.layers = layers

    # construction ----------------------------------------------------------

    @classmethod
    def build(cls, config: NetworkConfig, seed: int = 0) -> "StarNetwork":
        config.validate()
        rng = np.random.default_rng(seed)
        wd = config.weight_decay
        groups: dict[str, ParamGroup] = {}
        layers: dict[str, list] = {}

        # Draw order is fixed: pathways, common, classifier(s), discriminator,
        # source head. Switching ablations off never shifts earlier draws.
        for mod in config.modalities:
            g = groups[mod] = ParamGroup(mod, [], config.specific_lr, wd)
            layers[mod] = [(mod, w, b) for w, b in _dense_layers(rng, g, config.specific_widths, config.input_dims[mod])]

        top = config.specific_widths[-1]
        common = groups[COMMON] = ParamGroup(COMMON, [], config.common_lr, wd)
        if config.use_common:
            layers[COMMON] = [(COMMON, w, b) for w, b in _dense_layers(rng, common, config.common_widths, top)]
            layers["classifier"] = [
                (COMMON, w, b) for w, b in _dense_layers(rng, common, [config.num_classes_target], config.common_widths[-1])
            ]
        else:
            for mod in config.modalities:
                layers[f"classifier:{mod}"] = [
                    (COMMON, w, b) for w, b in _dense_layers(rng, common, [config.num_classes_target], top)
                ]

        if config.use_adversary:
            disc = groups[DISCRIMINATOR] = ParamGroup(DISCRIMINATOR, [], config.discriminator_lr, wd)
            widths = list(config.discriminator_widths) + [len(config.modalities)]
            layers[DISCRIMINATOR] = [
                (DISCRIMINATOR, w, b) for w, b in _dense_layers(rng, disc, widths, config.common_widths[-1])
            ]

        if config.use_source:
            src = groups[SOURCE] = ParamGroup(SOURCE, [m.copy() for m in groups[config.image].matrices], config.specific_lr, wd)
            layers[SOURCE] = [(SOURCE, w, b) for (_, w, b) in layers[config.image]]
            if config.use_sds:
                layers["source_classifier"] = [
                    (SOURCE, w, b) for w, b in _dense_layers(rng, src, [config.num_classes_source], top)
                ]
        return cls(config, groups, layers)

    # group views -------------------------------------------------------------

    @property
    def generator_groups(self) -> list[str]:
        return [n for n in self.groups if n != DISCRIMINATOR]

    @property
    def other_modality_groups(self) -> list[str]:
        return list(self.config.modalities[1:])

    def param_groups(self) -> list[ParamGroup]:
        return list(self.groups.values())

    def copy(self) -> "StarNetwork":
        return StarNetwork(self.config, {k: g.copy() for k, g in self.groups.items()}, self.layers)

    # forward ---------------------------------------------------------------

    def _stack(self, tape: Tape, name: str, h: Var, activate_last: bool = True) -> list[Var]:
        outs = []
        table = self.layers[name]
        for i, (gname, wi, bi) in enumerate(table):
            g = self.groups[gname]
            h = affine(h, tape.param(g, wi), tape.param(g, bi))
            if activate_last or i < len(table) - 1:
                h = relu(h)
            outs.append(h)
        return outs

    def _input(self, tape: Tape, modality: str, x) -> Var:
        if modality not in self.config.input_dims:
            raise ConfigurationError(f"unknown modality {modality!r}")
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.config.input_dims[modality]:
            raise DataError(
                f"modality {modality!r} expects {self.config.input_dims[modality]} features, got shape {x.shape}"
            )
        return tape.constant(x)

    def forward(self, tape: Tape, inputs: Mapping[str, np.ndarray], source_x=None, lam=None) -> Activations:
        """Forward a batch of aligned documents (row j of every modality is document j).

        ``lam`` overrides the configured reversal strength for this pass.
        """
        cfg = self.config
        lam = cfg.weights.lam if lam is None else lam
        missing = [m for m in cfg.modalities if m not in inputs]
        if missing:
            raise DataError(f"document batch is missing modalities {missing}")
        n = np.asarray(inputs[cfg.image]).shape[0]
        specific = {}
        for mod in cfg.modalities:
            x = self._input(tape, mod, inputs[mod])
            if x.shape[0] != n:
                raise DataError(f"modality {mod!r} has {x.shape[0]} rows, expected {n} documents")
            specific[mod] = self._stack(tape, mod, x)

        acts = Activations(num_documents=n, specific=specific, logits={})
        if cfg.use_source:
            if source_x is None or len(source_x) == 0:
                raise DataError("source pathway enabled but no source batch given")
            acts.source_specific = self._stack(tape, SOURCE, self._input(tape, cfg.image, source_x))
            if cfg.use_sds:
                acts.source_logits = self._stack(tape, "source_classifier", acts.source_specific[-1], False)[-1]

        if not cfg.use_common:
            for mod in cfg.modalities:
                acts.logits[mod] = self._stack(tape, f"classifier:{mod}", specific[mod][-1], False)[-1]
            return acts

        z = concat_rows([specific[m][-1] for m in cfg.modalities])
        z = self._stack(tape, COMMON, z)[-1]
        acts.common = z
        logits = self._stack(tape, "classifier", z, False)[-1]
        for k, mod in enumerate(cfg.modalities):
            acts.logits[mod] = _slice_rows(logits, k * n, (k + 1) * n)
        if cfg.use_adversary:
            rev = gradient_reversal(z, lam)
            acts.discriminator = self._stack(tape, DISCRIMINATOR, rev, False)[-1]
            acts.modality_onehots = np.kron(np.eye(len(cfg.modalities)), np.ones((n, 1)))
        return acts

    # inference -------------------------------------------------------------

    def specific_representation(self, modality: str, x) -> np.ndarray:
        tape = Tape(record=False)
        return self._stack(tape, modality, self._input(tape, modality, x))[-1].value

    def common_representation(self, modality: str, x) -> np.ndarray:
        """Output of the last common layer (the discriminator's input)."""
        if not self.config.use_common:
            raise ConfigurationError("network has no common layers (no_sl_net)")
        tape = Tape(record=False)
        h = self._stack(tape, modality, self._input(tape, modality, x))[-1]
        return self._stack(tape, COMMON, h)[-1].value

    def logits(self, modality: str, x) -> np.ndarray:
        tape = Tape(record=False)
        h = self._stack(tape, modality, self._input(tape, modality, x))[-1]
        if self.config.use_common:
            h = self._stack(tape, COMMON, h)[-1]
            return self._stack(tape, "classifier", h, False)[-1].value
        return self._stack(tape, f"classifier:{modality}", h, False)[-1].value

    def embed(self, modality: str, x) -> np.ndarray:
        """Class-probability vectors, the common representation used for retrieval."""
        z = self.logits(modality, x)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def discriminate(self, modality: str, x) -> np.ndarray:
        """Raw discriminator outputs for instances of one modality."""
        if not self.config.use_adversary:
            raise ConfigurationError("network has no modality discriminator")
        tape = Tape(record=False)
        z = tape.constant(self.common_representation(modality, x))
        return self._stack(tape, DISCRIMINATOR, z, False)[-1].value

    # checkpoint ------------------------------------------------------------

    def save(self, path) -> None:
        """Write atomically: header, then per group name / shapes / float64 payloads."""
        parts = [MAGIC, struct.pack("<H", FORMAT_VERSION), bytes.fromhex(self.config.digest())]
        parts.append(struct.pack("<I", len(self.groups)))
        for name, group in self.groups.items():
            raw = name.encode("utf-8")
            parts.append(struct.pack("<H", len(raw)) + raw)
            parts.append(struct.pack("<I", len(group.matrices)))
            for m in group.matrices:
                parts.append(struct.pack("<B", m.ndim) + struct.pack(f"<{m.ndim}I", *m.shape))
                parts.append(np.ascontiguousarray(m, dtype="<f8").tobytes())
        tmp = f"{path}.tmp{os.getpid()}"
        with open(tmp, "wb") as fh:
            fh.write(b"".join(parts))
        os.replace(tmp, path)

    @classmethod
    def load(cls, path, config: NetworkConfig) -> "StarNetwork":
        header, groups = read_checkpoint(path)
        if header["digest"] != config.digest():
            raise CheckpointError(
                f"checkpoint config digest {header['digest'][:12]} does not match active config {config.digest()[:12]}"
            )
        net = cls.build(config, seed=0)
        if list(groups) != list(net.groups):
            raise CheckpointError(f"checkpoint groups {list(groups)} != expected {list(net.groups)}")
        for name, mats in groups.items():
            target = net.groups[name].matrices
            if [m.shape for m in mats] != [m.shape for m in target]:
                raise CheckpointError(f"shape mismatch in group {name!r}")
            net.groups[name].matrices[:] = mats
        return net


def _slice_rows(x: Var, start: int, stop: int) -> Var:
    shape = x.shape

    def back(g):
        full = np.zeros(shape)
        full[start:stop] = g
        return (full,)

    return x.tape.record(x.value[start:stop], (x,), back)


def read_checkpoint(path) -> tuple[dict, dict[str, list[np.ndarray]]]:
    """Parse a checkpoint into ``(header, {group: [matrices]})``."""
    try:
        blob = open(path, "rb").read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError(f"checkpoint {path} is truncated")
        out = blob[pos : pos + n]
        pos += n
        return out

    if take(4) != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    (version,) = struct.unpack("<H", take(2))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    digest = take(32).hex()
    (n_groups,) = struct.unpack("<I", take(4))
    groups: dict[str, list[np.ndarray]] = {}
    for _ in range(n_groups):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        (n_mats,) = struct.unpack("<I", take(4))
        mats = []
        for _ in range(n_mats):
            (ndim,) = struct.unpack("<B", take(1))
            shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
            count = int(np.prod(shape))
            mats.append(np.frombuffer(take(8 * count), dtype="<f8").astype(np.float64).reshape(shape))
        groups[name] = mats
    if pos != len(blob):
        raise CheckpointError(f"trailing bytes in checkpoint {path}")
    return {"version": version, "digest": digest}, groups


def file_digest(path) -> str:
    return hashlib.sha256(open(path, "rb").read()).hexdigest()
