"""Pipeline configuration: one INI file with a section per stage.

Every stage seed is derived from the single ``[run] seed`` so that ``--seed``
overrides all of them at once.  Section keys mirror the fields of the stage
config dataclasses; unknown keys are rejected.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nerf import NerfConfig
from .onboard import OnboardConfig
from .uncertainty import UncertaintyConfig

ARTIFACTS_ENV = "MVMAP_ARTIFACTS"
STAGE_IDS = {"scene": 1, "nerf": 2, "onboard": 3, "uncertainty": 4, "eval": 5}


@dataclass
class SceneConfig:
    train: tuple = (11, 12)
    test: tuple = (21, 22, 23)
    style: str = "loop"
    n_frames: int = 40
    width: int = 128
    height: int = 96
    hfov: float = 100.0


@dataclass
class EvalConfig:
    frame_counts: tuple = (1, 5, 10, 20, 40)
    short_range: tuple = (60.0, 30.0)
    long_range: tuple = (100.0, 100.0)
    primary_range: str = "long"


@dataclass
class PipelineConfig:
    seed: int = 0
    artifacts: str = "artifacts"
    scene: SceneConfig = field(default_factory=SceneConfig)
    nerf: NerfConfig = field(default_factory=NerfConfig)
    onboard: OnboardConfig = field(default_factory=OnboardConfig)
    uncertainty: UncertaintyConfig = field(default_factory=UncertaintyConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def stage_seed(self, stage: str, *extra: int) -> int:
        """Deterministic 31-bit seed for a stage (and optional scene id / variant)."""
        ss = np.random.SeedSequence([self.seed, STAGE_IDS[stage], *extra])
        return int(ss.generate_state(1)[0] & 0x7FFFFFFF)

    @property
    def scenes(self) -> tuple:
        return tuple(self.scene.train) + tuple(self.scene.test)

    def validate(self):
        if self.seed < 0:
            raise ValueError("seed must be >= 0")
        if not self.scene.train or not self.scene.test:
            raise ValueError("at least one training and one test scene are required")
        if set(self.scene.train) & set(self.scene.test):
            raise ValueError("training and test scenes must be disjoint")
        if self.scene.n_frames < 1:
            raise ValueError("n_frames must be >= 1")
        if self.eval.primary_range not in ("short", "long"):
            raise ValueError("primary_range must be 'short' or 'long'")
        if any(n < 1 for n in self.eval.frame_counts):
            raise ValueError("frame counts must be >= 1")
        self.nerf.validate()
        self.onboard.validate()
        self.uncertainty.validate()

    # ----------------------------------------------------------------------
    # text form

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        cp["run"] = {"seed": str(self.seed), "artifacts": self.artifacts}
        for name in ("scene", "nerf", "onboard", "uncertainty", "eval"):
            obj = getattr(self, name)
            cp[name] = {f.name: _fmt(getattr(obj, f.name)) for f in dataclasses.fields(obj)
                        if f.name != "seed"}
        lines = []
        for sec in cp.sections():
            lines.append(f"[{sec}]")
            lines += [f"{k} = {v}" for k, v in cp[sec].items()]
            lines.append("")
        return "\n".join(lines)

    @classmethod
    def from_ini(cls, text: str) -> "PipelineConfig":
        cp = configparser.ConfigParser()
        try:
            cp.read_string(text)
        except configparser.Error as e:
            raise ValueError(f"unparseable config: {e}") from None
        cfg = cls()
        unknown = set(cp.sections()) - {"run", "scene", "nerf", "onboard", "uncertainty", "eval"}
        if unknown:
            raise ValueError(f"unknown config sections {sorted(unknown)}")
        if cp.has_section("run"):
            for k, v in cp["run"].items():
                if k == "seed":
                    cfg.seed = int(v)
                elif k == "artifacts":
                    cfg.artifacts = v
                else:
                    raise ValueError(f"unknown key [run] {k}")
        for name in ("scene", "nerf", "onboard", "uncertainty", "eval"):
            if not cp.has_section(name):
                continue
            obj = getattr(cfg, name)
            types = {f.name: f for f in dataclasses.fields(obj)}
            kw = {}
            for k, v in cp[name].items():
                if k not in types or k == "seed":
                    raise ValueError(f"unknown key [{name}] {k}")
                kw[k] = _parse(v, getattr(obj, k))
            setattr(cfg, name, dataclasses.replace(obj, **kw))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        return cls.from_ini(Path(path).read_text())

    def save(self, path):
        Path(path).write_text(self.to_ini())

    def digest(self) -> str:
        return hashlib.sha256(self.to_ini().encode()).hexdigest()

    def resolved_artifacts(self, override=None) -> Path:
        return Path(override or os.environ.get(ARTIFACTS_ENV) or self.artifacts)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list, np.ndarray)):
        return ", ".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(text: str, like):
    text = text.strip()
    try:
        if isinstance(like, bool):
            low = text.lower()
            if low not in ("true", "false", "yes", "no", "1", "0"):
                raise ValueError(text)
            return low in ("true", "yes", "1")
        if isinstance(like, int):
            return int(text)
        if isinstance(like, float):
            return float(text)
        if isinstance(like, (tuple, list, np.ndarray)):
            items = [t for t in (s.strip() for s in text.split(",")) if t]
            elem = like[0] if len(like) else 0
            if isinstance(like, np.ndarray):
                return np.array([float(t) for t in items])
            return tuple(_parse(t, elem) for t in items)
        return text
    except ValueError:
        raise ValueError(f"cannot parse config value {text!r}") from None
