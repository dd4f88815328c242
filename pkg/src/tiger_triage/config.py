"""Run configuration: TOML file + command-line overrides, hashed for provenance."""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .errors import ConfigInvalid
from .model import FAMILIES, TAGS, BackboneSpec, FreezePolicy
from .train import PROTOCOLS, TrainConfig

DEFAULT_SEED = 42
_SECTIONS = {"seed", "data", "train", "model", "output", "gradcam", "report"}


@dataclass
class RunConfig:
    manifest: Path | None = None
    image_root: Path | None = None
    out_dir: Path = Path("runs")
    train: TrainConfig = field(default_factory=TrainConfig)
    gradcam_layers: tuple[str, ...] = TAGS
    gradcam_target: str = "logit"
    report_sample_size: int = 150
    report_checkpoint: str = "best"

    def to_dict(self) -> dict:
        return {
            "data": {"manifest": str(self.manifest) if self.manifest else None,
                     "image_root": str(self.image_root) if self.image_root else None},
            "output": {"dir": str(self.out_dir)},
            "train": self.train.to_dict(),
            "gradcam": {"layers": list(self.gradcam_layers), "target": self.gradcam_target},
            "report": {"sample_size": self.report_sample_size,
                       "checkpoint": self.report_checkpoint},
        }

    def hash(self) -> str:
        # the output location does not change what a run computes
        d = {k: v for k, v in self.to_dict().items() if k != "output"}
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:12]

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        """Inverse of :meth:`to_dict` (used to reload a run directory)."""
        return cls(
            manifest=Path(d["data"]["manifest"]) if d["data"].get("manifest") else None,
            image_root=Path(d["data"]["image_root"]) if d["data"].get("image_root") else None,
            out_dir=Path(d["output"]["dir"]),
            train=TrainConfig.from_dict(d["train"]),
            gradcam_layers=tuple(d["gradcam"]["layers"]),
            gradcam_target=d["gradcam"]["target"],
            report_sample_size=int(d["report"]["sample_size"]),
            report_checkpoint=d["report"]["checkpoint"],
        )


def _resolve(base: Path, value) -> Path | None:
    if value in (None, ""):
        return None
    p = Path(value).expanduser()
    return p if p.is_absolute() else (base / p)


def load_config(path=None, **overrides) -> RunConfig:
    """Read a TOML run configuration; keyword overrides (from CLI flags) win.

    Relative paths in the file are resolved against the file's directory.
    """
    raw: dict = {}
    base = Path.cwd()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigInvalid(f"config file not found: {path}", path=str(path))
        try:
            raw = tomllib.loads(path.read_text(encoding="utf-8"))
        except (tomllib.TOMLDecodeError, UnicodeDecodeError) as exc:
            raise ConfigInvalid(f"malformed config {path}: {exc}", path=str(path)) from exc
        base = path.resolve().parent
    try:
        return _build(raw, base, overrides)
    except ConfigInvalid:
        raise
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigInvalid(f"invalid configuration: {exc}") from exc


def _build(raw: dict, base: Path, overrides: dict) -> RunConfig:
    unknown = set(raw) - _SECTIONS
    if unknown:
        raise ConfigInvalid(f"unknown config section(s): {sorted(unknown)}")
    data = dict(raw.get("data", {}))
    train = dict(raw.get("train", {}))
    model = dict(raw.get("model", {}))
    output = dict(raw.get("output", {}))
    gradcam = dict(raw.get("gradcam", {}))
    report = dict(raw.get("report", {}))
    for name, section in (("data", data), ("train", train), ("model", model), ("output", output),
                          ("gradcam", gradcam), ("report", report)):
        if not isinstance(section, dict):
            raise ConfigInvalid(f"[{name}] must be a table")

    seed = raw.get("seed", train.pop("seed", DEFAULT_SEED))
    ov = {k: v for k, v in overrides.items() if v is not None}
    if "seed" in ov:
        seed = ov["seed"]
    if "protocol" in ov:
        train["protocol"] = ov["protocol"]
    if "epochs" in ov:
        train["epochs"] = ov["epochs"]
    if "backbone" in ov:
        model["family"] = ov["backbone"]
    if "pretrained" in ov:
        model["pretrained"] = ov["pretrained"]
    # path overrides come from the command line, so they are relative to the cwd
    for key in ("manifest", "image_root"):
        if key in ov:
            data[key] = str(Path(ov[key]).resolve())
    if "out_dir" in ov:
        output["dir"] = str(Path(ov["out_dir"]).resolve())

    family = model.get("family", "vgg16")
    if family not in FAMILIES:
        raise ConfigInvalid(f"unknown backbone family {family!r}; choose from {FAMILIES}")
    spec = BackboneSpec(family=family, pretrained=bool(model.get("pretrained", True)),
                        freeze_policy=FreezePolicy(model.get("freeze_policy", "none")),
                        freeze_blocks=int(model.get("freeze_blocks", 0)))
    if "dropout_p" in model:
        train["dropout_p"] = model["dropout_p"]
    if "hidden" in model:
        train["hidden"] = model["hidden"]
    if train.get("protocol", "cv5") not in PROTOCOLS:
        raise ConfigInvalid(f"protocol must be one of {PROTOCOLS}")
    tcfg = TrainConfig.from_dict({**train, "seed": int(seed), "backbone": spec})

    layers = tuple(gradcam.get("layers", TAGS))
    if "layers" in ov:
        layers = tuple(ov["layers"])
    target = gradcam.get("target", "logit")
    if target not in ("logit", "probability"):
        raise ConfigInvalid("gradcam.target must be 'logit' or 'probability'")
    return RunConfig(
        manifest=_resolve(base, data.get("manifest")),
        image_root=_resolve(base, data.get("image_root")),
        out_dir=_resolve(base, output.get("dir", "runs")),
        train=tcfg,
        gradcam_layers=layers,
        gradcam_target=target,
        report_sample_size=int(report.get("sample_size", 150)),
        report_checkpoint=report.get("checkpoint", "best"),
    )
