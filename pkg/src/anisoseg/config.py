"""Run configuration: a flat INI-style document with a fixed schema.

Every key has a documented default; unknown sections or keys are rejected.
The seed lives in [run] and feeds all named randomness sub-streams.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass

from .data import PhantomSpec
from .networks import BackboneConfig, PipelineConfig
from .training import TrainConfig


class ConfigError(ValueError):
    """Invalid or unknown configuration content."""


# section -> key -> (parser, default); default None means required
_SCHEMA = {
    "run": {
        "seed": (int, None),
        "folds": (int, 5),
    },
    "phantom": {
        "slices": (int, 8),
        "height": (int, 32),
        "width": (int, 32),
        "spacing_z": (float, 5.0),
        "spacing_y": (float, 1.0),
        "spacing_x": (float, 1.0),
        "noise_sigma": (float, 0.05),
        "intensity_background": (float, 0.1),
        "intensity_shell": (float, 0.5),
        "intensity_core": (float, 0.9),
    },
    "backbone": {
        "levels": (int, 4),
        "base_channels": (int, 8),
        "input_channels": (int, 1),
        "num_classes": (int, 3),
        "slices": (int, 8),
        "wiring": (str, "unet"),
        "csam_enabled": (str, "all"),  # "all" | "none" | comma list of 0/1
        "rank": (int, 4),
        "reduction": (float, 8.0),
        "reduction_s": (float, 2.0),
        "pos_kernel_size": (int, 7),
    },
    "train": {
        "lr": (float, 1e-4),
        "weight_decay": (float, 1e-5),
        "epochs": (int, 20),
        "loss": (str, "cross_entropy"),
        "focal_gamma": (float, 2.0),
        "focal_alpha": (float, 0.25),
        "crop_target": (str, "none"),  # "none" or an integer
        "hflip_prob": (float, 0.5),
        "gamma_min": (float, 0.7),
        "gamma_max": (float, 1.5),
        "augment_gamma": (str, "yes"),
    },
    "pipeline": {
        "f_pre": (str, "identity"),
        "f_mid": (str, "csam"),
        "f_post": (str, "identity"),
        "n_neighbors": (int, 1),
    },
}


@dataclass
class RunConfig:
    seed: int
    folds: int
    phantom: PhantomSpec
    backbone: BackboneConfig
    train: TrainConfig
    pipeline: PipelineConfig


def _parse_bool(s: str) -> bool:
    s = s.strip().lower()
    if s in ("yes", "true", "1", "on"):
        return True
    if s in ("no", "false", "0", "off"):
        return False
    raise ConfigError(f"not a boolean: {s!r}")


def _parse_csam_flags(s: str, levels: int) -> list[bool]:
    s = s.strip().lower()
    if s == "all":
        return [True] * levels
    if s == "none":
        return [False] * levels
    flags = [_parse_bool(tok) for tok in s.split(",")]
    if len(flags) != levels:
        raise ConfigError(
            f"csam_enabled has {len(flags)} flags for {levels} levels")
    return flags


def parse_config(path) -> RunConfig:
    cp = configparser.ConfigParser()
    read = cp.read(path)
    if not read:
        raise ConfigError(f"cannot read config file {path}")
    values: dict[str, dict] = {}
    for section in cp.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        values[section] = {}
        for key, raw in cp[section].items():
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            parser, _ = _SCHEMA[section][key]
            try:
                values[section][key] = parser(raw)
            except ConfigError:
                raise
            except ValueError as exc:
                raise ConfigError(f"bad value for [{section}] {key}: {exc}")
    for section, keys in _SCHEMA.items():
        sec = values.setdefault(section, {})
        for key, (_, default) in keys.items():
            if key not in sec:
                if default is None:
                    raise ConfigError(f"[{section}] {key} is required")
                sec[key] = default
    return _build(values)


def _build(v: dict) -> RunConfig:
    try:
        ph = v["phantom"]
        phantom = PhantomSpec(
            size=(ph["slices"], ph["height"], ph["width"]),
            spacing=(ph["spacing_z"], ph["spacing_y"], ph["spacing_x"]),
            noise_sigma=ph["noise_sigma"],
            intensities=(ph["intensity_background"], ph["intensity_shell"],
                         ph["intensity_core"]),
            seed=v["run"]["seed"],
        )
        bb = v["backbone"]
        backbone = BackboneConfig(
            levels=bb["levels"], base_channels=bb["base_channels"],
            input_channels=bb["input_channels"], num_classes=bb["num_classes"],
            slices=bb["slices"], wiring=bb["wiring"],
            csam_enabled=_parse_csam_flags(bb["csam_enabled"], bb["levels"]),
            rank=bb["rank"], reduction=bb["reduction"],
            reduction_s=bb["reduction_s"],
            pos_kernel_size=bb["pos_kernel_size"],
        )
        tr = v["train"]
        crop = tr["crop_target"].strip().lower()
        gamma = ((tr["gamma_min"], tr["gamma_max"])
                 if _parse_bool(tr["augment_gamma"]) else None)
        train = TrainConfig(
            lr=tr["lr"], weight_decay=tr["weight_decay"], epochs=tr["epochs"],
            seed=v["run"]["seed"], loss=tr["loss"],
            focal_gamma=tr["focal_gamma"], focal_alpha=tr["focal_alpha"],
            crop_target=None if crop == "none" else int(crop),
            hflip_prob=tr["hflip_prob"], gamma_range=gamma,
        )
        pl = v["pipeline"]
        pipeline = PipelineConfig(f_pre=pl["f_pre"], f_mid=pl["f_mid"],
                                  f_post=pl["f_post"],
                                  n_neighbors=pl["n_neighbors"])
    except (ValueError, KeyError) as exc:
        raise ConfigError(str(exc))
    return RunConfig(seed=v["run"]["seed"], folds=v["run"]["folds"],
                     phantom=phantom, backbone=backbone, train=train,
                     pipeline=pipeline)


def default_config_text(seed: int = 0) -> str:
    """A fully-populated config document with all defaults spelled out."""
    lines = []
    for section, keys in _SCHEMA.items():
        lines.append(f"[{section}]")
        for key, (_, default) in keys.items():
            val = seed if (section, key) == ("run", "seed") else default
            lines.append(f"{key} = {val}")
        lines.append("")
    return "\n".join(lines)
