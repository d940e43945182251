"""Batch run configuration: parsing, validation and resolved-config output."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

from ..homotopy import MODES, HomotopyParams, PostAttackParams
from ..nmapg import NmapgParams

__all__ = ["ConfigError", "RunConfig", "parse_sparsity"]


class ConfigError(ValueError):
    """Invalid configuration; ``errors`` maps field names to messages."""

    def __init__(self, errors: dict[str, str]):
        self.errors = errors
        super().__init__("; ".join(f"{k}: {v}" for k, v in errors.items()))


def parse_sparsity(spec: str) -> int | None:
    """``"element"`` -> ``None``; ``"group:TILE"`` -> tile size."""
    if spec == "element":
        return None
    if spec.startswith("group:"):
        tile = int(spec[len("group:"):])
        if tile < 1:
            raise ValueError("group tile must be positive")
        return tile
    raise ValueError(f"sparsity must be 'element' or 'group:TILE', got {spec!r}")


@dataclass
class RunConfig:
    """Everything a batch run depends on.

    ``model`` is a weight file; when empty, a model is trained in-process from
    ``arch``/``train_seed``/``epochs`` on the built-in dataset. ``dataset`` is
    an optional directory with ``x.tsr``/``y.tsr``. ``targets`` is
    ``"all"`` (every non-true class), a list of class indices, or
    ``"nontargeted"``.
    """

    out_dir: str = "runs/batch"
    model: str = ""
    arch: str = "mlp"
    train_seed: int = 0
    epochs: int = 40
    dataset_seed: int = 0
    dataset: str = ""
    num_images: int = 50
    targets: object = "all"
    kappa: float = 0.0
    epsilon: float = 0.05
    sparsity: str = "element"
    mode: str = "full"
    parallelism: int = 1
    render_maps: bool = False
    homotopy: dict = field(default_factory=dict)
    nmapg: dict = field(default_factory=dict)
    post_attack: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError({k: "unknown field" for k in unknown})
        cfg = cls(**data)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path, overrides: dict | None = None) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError({"<file>": f"invalid JSON: {exc}"}) from exc
        if not isinstance(data, dict):
            raise ConfigError({"<file>": "top level must be an object"})
        data.update(overrides or {})
        return cls.from_dict(data)

    def homotopy_params(self) -> HomotopyParams:
        return HomotopyParams(**self.homotopy)

    def nmapg_params(self) -> NmapgParams:
        return NmapgParams(**self.nmapg)

    def post_attack_params(self) -> PostAttackParams:
        pa = dict(self.post_attack)
        if pa.get("p") in ("inf", "Inf", "infinity"):
            pa["p"] = math.inf
        return PostAttackParams(**pa)

    @property
    def tile(self) -> int | None:
        return parse_sparsity(self.sparsity)

    def validate(self) -> None:
        errors: dict[str, str] = {}
        if not isinstance(self.epsilon, (int, float)) or not 0 < self.epsilon <= 1:
            errors["epsilon"] = "must be in (0, 1]"
        if self.mode not in MODES:
            errors["mode"] = f"must be one of {', '.join(MODES)}"
        if not isinstance(self.num_images, int) or self.num_images < 1:
            errors["num_images"] = "must be a positive integer"
        if not isinstance(self.parallelism, int) or self.parallelism < 1:
            errors["parallelism"] = "must be a positive integer"
        if self.arch not in ("mlp", "conv", "small_conv"):
            errors["arch"] = "must be mlp or conv"
        if not isinstance(self.epochs, int) or self.epochs < 0:
            errors["epochs"] = "must be a nonnegative integer"
        if self.dataset and not (Path(self.dataset) / "x.tsr").is_file():
            errors["dataset"] = f"no x.tsr under {self.dataset!r}"
        if self.model and not Path(self.model).is_file():
            errors["model"] = f"no such file {self.model!r}"
        if not (self.targets in ("all", "nontargeted")
                or (isinstance(self.targets, list) and all(isinstance(t, int) for t in self.targets))):
            errors["targets"] = "must be 'all', 'nontargeted' or a list of class indices"
        if not isinstance(self.kappa, (int, float)) or self.kappa < 0:
            errors["kappa"] = "must be nonnegative"
        try:
            parse_sparsity(self.sparsity)
        except (ValueError, AttributeError) as exc:
            errors["sparsity"] = str(exc)
        for name, build in [
            ("homotopy", self.homotopy_params),
            ("nmapg", self.nmapg_params),
            ("post_attack", self.post_attack_params),
        ]:
            try:
                build()
            except (TypeError, ValueError) as exc:
                errors[name] = str(exc)
        if errors:
            raise ConfigError(errors)

    def to_dict(self) -> dict:
        return asdict(self)

    def resolved(self) -> dict:
        """Config with every parameter block expanded to its effective values."""
        d = self.to_dict()
        d["homotopy"] = self.homotopy_params().as_dict()
        d["nmapg"] = self.nmapg_params().as_dict()
        d["post_attack"] = self.post_attack_params().as_dict()
        return d
