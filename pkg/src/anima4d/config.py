"""Typed key=value configuration with a fixed key registry.

Config files are plain text, one ``key = value`` per line, ``#`` comments.
Every key is declared in KEYS with a type and default; unknown keys and
malformed values raise ConfigError. dump() emits a canonical form whose
floats round-trip exactly (shortest repr), so parse(dump(cfg)) == cfg.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable

from .errors import ConfigError

Kind = str  # "int" | "float" | "bool" | "str" | "vec3"


@dataclass(frozen=True)
class KeySpec:
    name: str
    kind: Kind
    default: Any
    help: str
    reference: str = ""  # annotation for the full-scale setup, shown by dump()


KEYS: tuple[KeySpec, ...] = (
    # encoding
    KeySpec("encoding.backbone", "str", "grid4d", "feature backbone: grid4d | hexplane"),
    KeySpec("encoding.levels", "int", 8, "number of resolution levels", reference="16"),
    KeySpec("encoding.min_res", "int", 16, "coarsest grid resolution per axis"),
    KeySpec("encoding.max_res", "int", 256, "finest grid resolution per axis", reference="2048"),
    KeySpec("encoding.feature_dim", "int", 2, "feature channels per level"),
    KeySpec("encoding.time_slices", "int", 8, "number of time slices T", reference="64"),
    KeySpec("encoding.dense_threshold", "int", 64, "levels at or below this resolution store dense grids"),
    KeySpec("encoding.hash_table_size", "int", 131072, "rows per hashed level; must be a power of two"),
    # field heads
    KeySpec("field.hidden_dim", "int", 64, "hidden width of the 2-layer head MLP"),
    KeySpec("field.density_bias", "float", -1.0, "additive bias on raw density before softplus"),
    KeySpec("field.ambient", "float", 0.1, "ambient term for lambertian/textureless shading"),
    KeySpec("field.prob_albedo", "float", 0.75, "shading mode draw: albedo probability"),
    KeySpec("field.prob_lambertian", "float", 0.2, "shading mode draw: lambertian probability"),
    KeySpec("field.prob_textureless", "float", 0.05, "shading mode draw: textureless probability"),
    # renderer
    KeySpec("render.samples_per_ray", "int", 96, "stratified samples per ray"),
    KeySpec("render.train_height", "int", 64, "render height during training", reference="128"),
    KeySpec("render.train_width", "int", 64, "render width during training", reference="128"),
    KeySpec("render.background", "vec3", (1.0, 1.0, 1.0), "fixed background color"),
    KeySpec("render.random_background", "bool", False, "draw a random gray background per iteration"),
    KeySpec("render.fov_deg", "float", 40.0, "vertical field of view in degrees"),
    KeySpec("render.radius", "float", 1.8, "camera distance from the origin"),
    # temporal / pose sampling
    KeySpec("sampling.frames_per_clip", "int", 8, "frames per sampled clip"),
    KeySpec("sampling.fps_min", "float", 16.0, "lower bound of the uniform fps draw"),
    KeySpec("sampling.fps_max", "float", 256.0, "upper bound of the uniform fps draw"),
    KeySpec("sampling.alpha", "float", 0.3, "probability of anchoring a clip at t=0 (and at t=1)"),
    KeySpec("sampling.duration", "float", 2.0, "normalized video duration in seconds"),
    KeySpec("sampling.polar_min_deg", "float", 60.0, "pose draw: minimum polar angle"),
    KeySpec("sampling.polar_max_deg", "float", 120.0, "pose draw: maximum polar angle"),
    KeySpec("sampling.azimuth_sweep_deg", "float", 30.0, "max per-clip azimuth sweep magnitude"),
    # guidance
    KeySpec("guidance.provider", "str", "oracle", "gradient provider: oracle | remote"),
    KeySpec("guidance.prompt", "str", "reference-subject", "opaque prompt tag passed to providers"),
    KeySpec("guidance.weight", "float", 1.0, "provider gradient weight omega"),
    KeySpec("guidance.noise_level", "float", 0.5, "noise level passed through to providers"),
    KeySpec("guidance.refine_threshold", "float", 0.3, "per-pixel condition/target agreement threshold kappa"),
    KeySpec("guidance.remote.endpoint", "str", "", "host:port of a remote gradient server"),
    KeySpec("guidance.remote.timeout", "float", 30.0, "socket timeout in seconds"),
    KeySpec("guidance.remote.retries", "int", 2, "retries after retryable transport failures"),
    # analytic oracle scene
    KeySpec("guidance.oracle.center", "vec3", (0.0, 0.0, 0.0), "sphere center at t=0.5"),
    KeySpec("guidance.oracle.drift", "vec3", (0.0, 0.5, 0.0), "total center displacement over t in [0,1]"),
    KeySpec("guidance.oracle.radius", "float", 0.3, "sphere base radius"),
    KeySpec("guidance.oracle.pulse", "float", 0.05, "radius oscillation amplitude"),
    KeySpec("guidance.oracle.edge_width", "float", 0.03, "soft shell width of the density falloff"),
    KeySpec("guidance.oracle.density_scale", "float", 40.0, "peak density inside the sphere"),
    KeySpec("guidance.oracle.stripe_freq", "float", 6.0, "angular frequency of the albedo stripes"),
    KeySpec("guidance.oracle.samples_per_ray", "int", 128, "marching steps of the oracle renderer"),
    # losses
    KeySpec("losses.lambda_rgb", "float", 5.0, "masked L1 rgb weight"),
    KeySpec("losses.lambda_mask", "float", 0.5, "mask L1 weight"),
    KeySpec("losses.lambda_depth", "float", 0.001, "depth correlation weight"),
    KeySpec("losses.lambda_3d", "float", 40.0, "image-3D guidance weight"),
    KeySpec("losses.lambda_tv", "float", 0.1, "temporal smoothness weight"),
    KeySpec("losses.lambda_refine", "float", 1.0, "refinement guidance weight"),
    # trainer
    KeySpec("trainer.lr", "float", 0.001, "Adam learning rate"),
    KeySpec("trainer.beta1", "float", 0.9, "Adam first-moment decay"),
    KeySpec("trainer.beta2", "float", 0.999, "Adam second-moment decay"),
    KeySpec("trainer.eps", "float", 1e-08, "Adam epsilon"),
    KeySpec("trainer.iters_static", "int", 500, "static stage iterations", reference="5000"),
    KeySpec("trainer.iters_dynamic", "int", 1000, "coarse dynamic stage iterations", reference="10000"),
    KeySpec("trainer.iters_refine", "int", 500, "refinement stage iterations", reference="5000"),
    KeySpec("trainer.seed", "int", 0, "root seed for every stochastic stream"),
    KeySpec("trainer.ref_pose_prob", "float", 0.25, "static stage: probability of the reference pose"),
    KeySpec("trainer.dtype", "str", "float32", "parameter dtype: float32 | float64"),
    KeySpec("trainer.log_every", "int", 50, "stderr progress interval in iterations"),
    KeySpec("trainer.coarse_ckpt", "str", "",
            "refine stage: coarse checkpoint path (empty = <run_dir>/ckpt_coarse)"),
    # io
    KeySpec("io.run_dir", "str", "runs/default", "default run directory for CLI commands"),
    KeySpec("io.save_depth", "bool", True, "export per-frame depth PFMs alongside RGB"),
)

_BY_NAME = {k.name: k for k in KEYS}


def _format_value(kind: Kind, value: Any) -> str:
    if kind == "int":
        return str(int(value))
    if kind == "float":
        return repr(float(value))
    if kind == "bool":
        return "true" if value else "false"
    if kind == "vec3":
        return ",".join(repr(float(v)) for v in value)
    return str(value)


def _parse_value(spec: KeySpec, raw: str) -> Any:
    raw = raw.strip()
    try:
        if spec.kind == "int":
            return int(raw)
        if spec.kind == "float":
            value = float(raw)
            if math.isnan(value):
                raise ValueError("nan")
            return value
        if spec.kind == "bool":
            lowered = raw.lower()
            if lowered in ("true", "1", "yes"):
                return True
            if lowered in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if spec.kind == "vec3":
            parts = [float(p) for p in raw.split(",")]
            if len(parts) != 3:
                raise ValueError("expected 3 components")
            return tuple(parts)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {spec.name!r}: {raw!r} ({exc})") from None


class Config:
    """Immutable-by-convention mapping over the key registry."""

    def __init__(self, values: dict[str, Any] | None = None):
        self._values: dict[str, Any] = {k.name: k.default for k in KEYS}
        if values:
            for name, value in values.items():
                if name not in _BY_NAME:
                    raise ConfigError(f"unknown config key {name!r}")
                self._values[name] = value

    def __getitem__(self, name: str) -> Any:
        try:
            return self._values[name]
        except KeyError:
            raise ConfigError(f"unknown config key {name!r}") from None

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Config) and self._values == other._values

    def to_dict(self) -> dict[str, Any]:
        return dict(self._values)

    def with_overrides(self, assignments: Iterable[str]) -> "Config":
        """Apply ``key=value`` strings (CLI --set) on top of this config."""
        values = dict(self._values)
        for item in assignments:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not of the form key=value")
            name, raw = item.split("=", 1)
            name = name.strip()
            if name not in _BY_NAME:
                raise ConfigError(f"unknown config key {name!r}")
            values[name] = _parse_value(_BY_NAME[name], raw)
        return Config(values)

    def dump(self, annotate: bool = False) -> str:
        """Canonical text form. With annotate, append help comments and the
        full-scale reference value where one exists."""
        lines = []
        for spec in KEYS:
            line = f"{spec.name} = {_format_value(spec.kind, self._values[spec.name])}"
            if annotate:
                note = spec.help
                if spec.reference:
                    note += f" (full-scale reference: {spec.reference})"
                line = f"{line:<44}# {note}"
            lines.append(line)
        return "\n".join(lines) + "\n"

    def validate(self) -> "Config":
        """Cross-field invariants; returns self so calls can chain."""
        v = self._values
        if v["encoding.backbone"] not in ("grid4d", "hexplane"):
            raise ConfigError(f"encoding.backbone must be grid4d or hexplane, got {v['encoding.backbone']!r}")
        if v["encoding.levels"] < 1:
            raise ConfigError("encoding.levels must be >= 1")
        if not (2 <= v["encoding.min_res"] <= v["encoding.max_res"]):
            raise ConfigError("need 2 <= encoding.min_res <= encoding.max_res")
        if v["encoding.feature_dim"] < 1:
            raise ConfigError("encoding.feature_dim must be >= 1")
        if v["encoding.time_slices"] < 1:
            raise ConfigError("encoding.time_slices must be >= 1")
        size = v["encoding.hash_table_size"]
        if size < 2 or size & (size - 1):
            raise ConfigError("encoding.hash_table_size must be a power of two >= 2")
        probs = (v["field.prob_albedo"], v["field.prob_lambertian"], v["field.prob_textureless"])
        if any(p < 0 for p in probs) or abs(sum(probs) - 1.0) > 1e-9:
            raise ConfigError("field.prob_* must be nonnegative and sum to 1")
        if v["render.samples_per_ray"] < 1:
            raise ConfigError("render.samples_per_ray must be >= 1")
        if v["render.train_height"] < 2 or v["render.train_width"] < 2:
            raise ConfigError("render sizes must be >= 2")
        if not (0.0 < v["render.fov_deg"] < 180.0):
            raise ConfigError("render.fov_deg must be in (0, 180)")
        if v["render.radius"] <= 0:
            raise ConfigError("render.radius must be positive")
        if any(not (0.0 <= c <= 1.0) for c in v["render.background"]):
            raise ConfigError("render.background components must be in [0, 1]")
        if v["sampling.frames_per_clip"] < 1:
            raise ConfigError("sampling.frames_per_clip must be >= 1")
        if not (0.0 < v["sampling.fps_min"] <= v["sampling.fps_max"]):
            raise ConfigError("need 0 < sampling.fps_min <= sampling.fps_max")
        if not (0.0 <= v["sampling.alpha"] <= 0.5):
            raise ConfigError("sampling.alpha must be in [0, 0.5]")
        if v["sampling.duration"] <= 0:
            raise ConfigError("sampling.duration must be positive")
        if not (0.0 < v["sampling.polar_min_deg"] <= v["sampling.polar_max_deg"] < 180.0):
            raise ConfigError("need 0 < polar_min <= polar_max < 180")
        if v["guidance.provider"] not in ("oracle", "remote"):
            raise ConfigError(f"guidance.provider must be oracle or remote, got {v['guidance.provider']!r}")
        if v["guidance.refine_threshold"] <= 0:
            raise ConfigError("guidance.refine_threshold must be positive")
        if v["guidance.remote.timeout"] <= 0:
            raise ConfigError("guidance.remote.timeout must be positive")
        if v["guidance.remote.retries"] < 0:
            raise ConfigError("guidance.remote.retries must be >= 0")
        if v["guidance.oracle.radius"] <= 0 or v["guidance.oracle.edge_width"] <= 0:
            raise ConfigError("oracle.radius and oracle.edge_width must be positive")
        if v["guidance.oracle.samples_per_ray"] < 2:
            raise ConfigError("oracle.samples_per_ray must be >= 2")
        for name in ("losses.lambda_rgb", "losses.lambda_mask", "losses.lambda_depth",
                     "losses.lambda_3d", "losses.lambda_tv", "losses.lambda_refine"):
            if v[name] < 0:
                raise ConfigError(f"{name} must be >= 0")
        if v["trainer.lr"] <= 0 or v["trainer.eps"] <= 0:
            raise ConfigError("trainer.lr and trainer.eps must be positive")
        if not (0.0 <= v["trainer.beta1"] < 1.0 and 0.0 <= v["trainer.beta2"] < 1.0):
            raise ConfigError("Adam betas must be in [0, 1)")
        for name in ("trainer.iters_static", "trainer.iters_dynamic", "trainer.iters_refine"):
            if v[name] < 0:
                raise ConfigError(f"{name} must be >= 0")
        if not (0.0 <= v["trainer.ref_pose_prob"] <= 1.0):
            raise ConfigError("trainer.ref_pose_prob must be in [0, 1]")
        if v["trainer.dtype"] not in ("float32", "float64"):
            raise ConfigError("trainer.dtype must be float32 or float64")
        if v["trainer.log_every"] < 1:
            raise ConfigError("trainer.log_every must be >= 1")
        return self


def parse_config(text: str) -> Config:
    """Parse config text; later assignments win; validation is the caller's call."""
    values: dict[str, Any] = {}
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw_line!r}")
        name, raw = line.split("=", 1)
        name = name.strip()
        if name not in _BY_NAME:
            raise ConfigError(f"line {lineno}: unknown config key {name!r}")
        values[name] = _parse_value(_BY_NAME[name], raw)
    return Config(values)


def load_config(path: str | Path) -> Config:
    return parse_config(Path(path).read_text())


def default_config() -> Config:
    return Config()
