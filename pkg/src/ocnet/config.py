"""Flat key=value run configuration.

A config file is plain text, one ``key=value`` per line, ``#`` comments
allowed.  Unknown keys are rejected; missing keys take the documented
defaults.  Every command echoes the fully resolved mapping into its run
directory so any run can be reproduced from its snapshot.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .model import ArchConfig, LayerSpec
from .train import MODES, TrainSettings


class ConfigError(Exception):
    pass


DEFAULTS: dict[str, str] = {
    "arch.preset": "default",        # default | wide | tiny
    "arch.image_size": "32",
    "arch.image_channels": "3",
    "arch.feature_dim": "256",
    "arch.extractor": "16,32,64",    # widths (kernel 3, stride 2, pad 1) or out:k:s:p
    "arch.decoder_reshape": "64,2,2",
    "arch.decoder": "32,16,8,3",     # widths (kernel 4, stride 2, pad 1) or out:k:s:p
    "arch.classifier_hidden": "true",
    "arch.freeze_conv": "false",
    "train.lr": "1e-4",
    "train.batch": "64",
    "train.epochs": "20",
    "train.seed": "0",
    "pseudo.mu": "0.0",
    "pseudo.sigma": "0.01",
    "loss.lambda_r": "1.0",
    "data.root": "",
    "data.ratio": "0.8",
    "data.identities": "8",
    "data.samples": "500",
    "data.gen_seed": "7",
    "data.format": "oct",
    "data.blob_count": "4",
    "eval.seeds": "0,1,2,3,4",
    "eval.modes": "full,classifier_only,autoencoder_only",
    "eval.cap_unknowns": "0",
    "eval.batch": "256",
    "eval.workers": "1",
}

# Structural keys that a non-default preset overrides.
_PRESET_KEYS = (
    "arch.image_size",
    "arch.image_channels",
    "arch.feature_dim",
    "arch.extractor",
    "arch.decoder_reshape",
    "arch.decoder",
)


def _parse_layers(text: str, default_geometry: tuple[int, int, int]) -> tuple[LayerSpec, ...]:
    k, s, p = default_geometry
    layers = []
    for token in text.split(","):
        token = token.strip()
        if not token:
            continue
        if ":" in token:
            layers.append(LayerSpec.parse(token))
        else:
            layers.append(LayerSpec(int(token), k, s, p))
    return tuple(layers)


@dataclass
class RunConfig:
    values: dict[str, str] = field(default_factory=lambda: dict(DEFAULTS))
    explicit: frozenset[str] = frozenset()

    @classmethod
    def load(cls, path: str | None, overrides: dict[str, str] | None = None) -> "RunConfig":
        values = dict(DEFAULTS)
        explicit: set[str] = set()
        if path is not None:
            with open(path, "r", encoding="utf-8") as f:
                for lineno, raw in enumerate(f, 1):
                    line = raw.strip()
                    if not line or line.startswith("#"):
                        continue
                    key, sep, value = line.partition("=")
                    key, value = key.strip(), value.strip()
                    if not sep:
                        raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
                    if key not in DEFAULTS:
                        raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
                    values[key] = value
                    explicit.add(key)
        for key, value in (overrides or {}).items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            values[key] = str(value)
            explicit.add(key)
        return cls(values=values, explicit=frozenset(explicit))

    # -- typed accessors ----------------------------------------------------

    def _get(self, key: str) -> str:
        return self.values[key]

    def getint(self, key: str) -> int:
        try:
            return int(self._get(key))
        except ValueError:
            raise ConfigError(f"{key}={self._get(key)!r} is not an integer") from None

    def getfloat(self, key: str) -> float:
        try:
            return float(self._get(key))
        except ValueError:
            raise ConfigError(f"{key}={self._get(key)!r} is not a number") from None

    def getbool(self, key: str) -> bool:
        value = self._get(key).lower()
        if value in ("true", "1", "yes"):
            return True
        if value in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key}={self._get(key)!r} is not a boolean")

    def getints(self, key: str) -> list[int]:
        try:
            return [int(v) for v in self._get(key).split(",") if v.strip() != ""]
        except ValueError:
            raise ConfigError(f"{key}={self._get(key)!r} is not a comma-separated int list") from None

    def arch(self) -> ArchConfig:
        preset = self._get("arch.preset")
        if preset not in ("default", "wide", "tiny"):
            raise ConfigError(f"arch.preset={preset!r} is not default|wide|tiny")
        if preset != "default":
            conflicts = sorted(set(_PRESET_KEYS) & self.explicit)
            if conflicts:
                raise ConfigError(
                    f"arch.preset={preset} overrides {conflicts[0]}; remove the explicit key"
                )
            base = ArchConfig.wide_preset() if preset == "wide" else ArchConfig.tiny()
            return replace(
                base,
                classifier_hidden=self.getbool("arch.classifier_hidden"),
                freeze_conv=self.getbool("arch.freeze_conv"),
            )
        try:
            return ArchConfig(
                image_size=self.getint("arch.image_size"),
                image_channels=self.getint("arch.image_channels"),
                feature_dim=self.getint("arch.feature_dim"),
                extractor=_parse_layers(self._get("arch.extractor"), (3, 2, 1)),
                decoder_reshape=tuple(
                    int(v) for v in self._get("arch.decoder_reshape").split(",")
                ),
                decoder=_parse_layers(self._get("arch.decoder"), (4, 2, 1)),
                classifier_hidden=self.getbool("arch.classifier_hidden"),
                freeze_conv=self.getbool("arch.freeze_conv"),
            )
        except ValueError as exc:
            raise ConfigError(f"invalid architecture: {exc}") from None

    def train_settings(self, mode: str) -> TrainSettings:
        if mode not in MODES:
            raise ConfigError(f"unknown training mode {mode!r}; expected one of {MODES}")
        return TrainSettings(
            mode=mode,
            lr=self.getfloat("train.lr"),
            batch_size=self.getint("train.batch"),
            epochs=self.getint("train.epochs"),
            seed=self.getint("train.seed"),
            lambda_r=self.getfloat("loss.lambda_r"),
            mu=self.getfloat("pseudo.mu"),
            sigma=self.getfloat("pseudo.sigma"),
        )

    # -- snapshot -----------------------------------------------------------

    def echo_lines(self) -> list[str]:
        return [f"{key}={self.values[key]}" for key in sorted(self.values)]

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write("\n".join(self.echo_lines()) + "\n")
