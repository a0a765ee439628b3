"""INI run configuration.

Modalities, feature dimensions and class counts are not part of the file;
they come from the data manifest, so one config works for any dataset.
Every key is optional; missing keys take the defaults below.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .data import Manifest
from .errors import ConfigurationError
from .losses import LossWeights
from .network import NetworkConfig
from .trainer import TrainSchedule

DESK_WIDTHS = (128, 128)


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.replace(",", " ").split())


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.replace(",", " ").split())


def _join(values) -> str:
    return ", ".join(str(v) for v in values)


@dataclass
class RunConfig:
    specific_widths: tuple[int, ...] = DESK_WIDTHS
    common_widths: tuple[int, ...] = DESK_WIDTHS
    discriminator_widths: tuple[int, ...] = DESK_WIDTHS
    specific_lr: float = 0.01
    common_lr: float = 0.01
    discriminator_lr: float = 0.001
    weight_decay: float = 0.0005
    transfer_layers: tuple[int, ...] = (0, 1)
    kernel_bandwidths: Optional[tuple[float, ...]] = None
    weights: LossWeights = field(default_factory=LossWeights)
    schedule: TrainSchedule = field(default_factory=lambda: TrainSchedule(batch_size_documents=16))
    no_source: bool = False
    no_sl_net: bool = False
    no_adver: bool = False
    no_sds: bool = False
    manifest: Optional[str] = None
    out: Optional[str] = None

    @property
    def seed(self) -> int:
        return self.schedule.seed

    def network_config(self, manifest: Manifest) -> NetworkConfig:
        src = manifest.source or {}
        dims = manifest.meta.get("dims")
        if not dims:
            dims = {m: manifest.target("train").features[m].shape[1] for m in manifest.modalities}
        return NetworkConfig(
            modalities=tuple(manifest.modalities),
            input_dims=dims,
            num_classes_target=manifest.num_classes,
            num_classes_source=int(src.get("num_classes", 1)),
            specific_widths=self.specific_widths,
            common_widths=self.common_widths,
            discriminator_widths=self.discriminator_widths,
            specific_lr=self.specific_lr,
            common_lr=self.common_lr,
            discriminator_lr=self.discriminator_lr,
            weight_decay=self.weight_decay,
            weights=self.weights,
            transfer_layers=self.transfer_layers,
            kernel_bandwidths=self.kernel_bandwidths,
            no_source=self.no_source or not manifest.source,
            no_sl_net=self.no_sl_net,
            no_adver=self.no_adver,
            no_sds=self.no_sds,
        )

    # io --------------------------------------------------------------------

    @classmethod
    def from_string(cls, text: str, origin: str = "<config>") -> "RunConfig":
        cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
        try:
            cp.read_string(text, source=origin)
        except configparser.Error as exc:
            raise ConfigurationError(f"{origin}: {exc}") from None
        known = {"network", "loss", "schedule", "ablation", "data"}
        unknown = set(cp.sections()) - known
        if unknown:
            raise ConfigurationError(f"{origin}: unknown sections {sorted(unknown)}")
        cfg = cls()
        try:
            if cp.has_section("network"):
                sec = cp["network"]
                for key in ("specific_widths", "common_widths", "discriminator_widths", "transfer_layers"):
                    if key in sec:
                        setattr(cfg, key, _ints(sec[key]))
                for key in ("specific_lr", "common_lr", "discriminator_lr", "weight_decay"):
                    if key in sec:
                        setattr(cfg, key, sec.getfloat(key))
                if sec.get("kernel_bandwidths", "").strip():
                    cfg.kernel_bandwidths = _floats(sec["kernel_bandwidths"])
                _reject_unknown(sec, origin, {
                    "specific_widths", "common_widths", "discriminator_widths", "transfer_layers",
                    "specific_lr", "common_lr", "discriminator_lr", "weight_decay", "kernel_bandwidths",
                })
            if cp.has_section("loss"):
                sec = cp["loss"]
                names = {"w_st": "st", "w_sds": "sds", "w_ct": "ct", "w_sc": "sc", "lambda": "lam"}
                _reject_unknown(sec, origin, set(names))
                cfg.weights = LossWeights(**{names[k]: sec.getfloat(k) for k in names if k in sec})
            if cp.has_section("schedule"):
                sec = cp["schedule"]
                kw = {}
                for f in dataclasses.fields(TrainSchedule):
                    if f.name in sec:
                        conv = {"int": sec.getint, "float": sec.getfloat, "bool": sec.getboolean}.get(f.type, sec.get)
                        kw[f.name] = conv(f.name)
                _reject_unknown(sec, origin, {f.name for f in dataclasses.fields(TrainSchedule)})
                cfg.schedule = dataclasses.replace(cfg.schedule, **kw)
            if cp.has_section("ablation"):
                sec = cp["ablation"]
                _reject_unknown(sec, origin, {"no_source", "no_sl_net", "no_adver", "no_sds"})
                for key in ("no_source", "no_sl_net", "no_adver", "no_sds"):
                    if key in sec:
                        setattr(cfg, key, sec.getboolean(key))
            if cp.has_section("data"):
                sec = cp["data"]
                _reject_unknown(sec, origin, {"manifest", "out"})
                cfg.manifest = sec.get("manifest") or None
                cfg.out = sec.get("out") or None
        except ValueError as exc:
            raise ConfigurationError(f"{origin}: {exc}") from None
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from None
        cfg = cls.from_string(text, str(path))
        if cfg.manifest and not Path(cfg.manifest).is_absolute():
            cfg.manifest = str((path.parent / cfg.manifest).resolve())
        return cfg

    def to_string(self) -> str:
        cp = configparser.ConfigParser()
        cp["network"] = {
            "specific_widths": _join(self.specific_widths),
            "common_widths": _join(self.common_widths),
            "discriminator_widths": _join(self.discriminator_widths),
            "specific_lr": repr(self.specific_lr),
            "common_lr": repr(self.common_lr),
            "discriminator_lr": repr(self.discriminator_lr),
            "weight_decay": repr(self.weight_decay),
            "transfer_layers": _join(self.transfer_layers),
            "kernel_bandwidths": "" if self.kernel_bandwidths is None else _join(self.kernel_bandwidths),
        }
        w = self.weights
        cp["loss"] = {"w_st": repr(w.st), "w_sds": repr(w.sds), "w_ct": repr(w.ct), "w_sc": repr(w.sc), "lambda": repr(w.lam)}
        cp["schedule"] = {f.name: str(getattr(self.schedule, f.name)) for f in dataclasses.fields(TrainSchedule)}
        cp["ablation"] = {k: str(getattr(self, k)).lower() for k in ("no_source", "no_sl_net", "no_adver", "no_sds")}
        data = {}
        if self.manifest:
            data["manifest"] = str(self.manifest)
        if self.out:
            data["out"] = str(self.out)
        cp["data"] = data
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


def _reject_unknown(section, origin, allowed) -> None:
    extra = set(section) - set(allowed) - set(section.parser.defaults())
    if extra:
        raise ConfigurationError(f"{origin}: unknown keys in [{section.name}]: {sorted(extra)}")
