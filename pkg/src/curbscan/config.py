"""Plain-text configuration for the command-line pipeline.

INI-style files with two sections. ``[pipeline]`` holds every tunable of
the extraction and refinement stages plus the evaluation distance grid;
``[scene]`` describes a synthetic scene. Unknown keys are hard errors so a
typo can never silently fall back to a default, and the effective
configuration (defaults merged with overrides) can be echoed back out and
re-run to reproduce a result bit for bit.

Value syntax: floats and ints as usual, booleans as true/false, vectors
comma separated ("100,100,100"), penalty ramps as "rho:value,rho:value",
segment lists as "start:length;start:length".
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields

from .errors import ValidationError
from .synth import SceneSpec


@dataclass
class PipelineConfig:
    voxel_size: float = 0.04
    sigma: float = 0.8
    candidate_fraction: float = 0.20
    ground_filter: bool = True
    bin_width: float = 0.05
    extend_band: bool = True
    tile_banding: bool = False
    tile_size: float = 20.0
    region_extents: tuple[int, int, int] = (100, 100, 100)
    penalty_d: tuple[tuple[float, float], tuple[float, float]] = ((0.04, 50.0), (0.30, 500.0))
    penalty_s: tuple[tuple[float, float], tuple[float, float]] = ((0.04, 500.0), (0.30, 50.0))
    penalty_v: float = 1000.0
    rho_min: float = 0.04
    min_component: int = 10
    min_span: float = 25.0
    merge_lateral_tol: float = 6.0
    core_lateral_tol: float = 3.0
    merge_angle_deg: float = 25.0
    corridor_radius: float = 8.0
    validate_step: bool = True
    min_height_step: float = 0.05
    stitch_tol: float = 15.0
    stitch_free_tol: float = 6.0
    link_max_gap: float = 5.0
    eval_d: tuple[float, ...] = (0.4, 0.2, 0.12, 0.08, 0.04)
    seed: int = 0

    def validate(self) -> None:
        if self.voxel_size <= 0:
            raise ValidationError("voxel_size must be positive")
        if self.sigma <= 0:
            raise ValidationError("sigma must be positive")
        if not 0.0 < self.candidate_fraction <= 1.0:
            raise ValidationError("candidate_fraction must be in (0, 1]")
        if self.bin_width <= 0:
            raise ValidationError("bin_width must be positive")
        if any(v <= 0 for v in self.region_extents) or len(self.region_extents) != 3:
            raise ValidationError("region_extents must be three positive integers")
        if self.penalty_v < max(self.penalty_d[0][1], self.penalty_d[1][1]):
            raise ValidationError("penalty_v must dominate the penalty_d ramp")
        if not 0.0 <= self.rho_min <= 1.0:
            raise ValidationError("rho_min must be in [0, 1]")
        if any(d <= 0 for d in self.eval_d) or not self.eval_d:
            raise ValidationError("eval_d thresholds must be positive")

    def extractor_kwargs(self) -> dict:
        return dict(
            voxel_size=self.voxel_size,
            sigma=self.sigma,
            candidate_fraction=self.candidate_fraction,
            ground_filter=self.ground_filter,
            bin_width=self.bin_width,
            extend_band=self.extend_band,
            tile_size=self.tile_size if self.tile_banding else None,
            region_extents=self.region_extents,
            penalty_d_low=self.penalty_d[0],
            penalty_d_high=self.penalty_d[1],
            penalty_s_low=self.penalty_s[0],
            penalty_s_high=self.penalty_s[1],
            penalty_v=self.penalty_v,
            rho_min=self.rho_min,
            min_component=self.min_component,
            min_span=self.min_span,
            merge_lateral_tol=self.merge_lateral_tol,
            core_lateral_tol=self.core_lateral_tol,
            merge_angle_deg=self.merge_angle_deg,
            corridor_radius=self.corridor_radius,
            validate_step=self.validate_step,
            min_height_step=self.min_height_step,
            stitch_tol=self.stitch_tol,
            stitch_free_tol=self.stitch_free_tol,
        )


@dataclass
class SceneConfig:
    """Scene spec plus the perturbations the CLI can apply after generation."""

    spec: SceneSpec = field(default_factory=SceneSpec)
    noise_t: float = 0.0
    downsample: float = 1.0
    scanner_gap: tuple[float, float] | None = None  # (axis offset, width)


def _parse_bool(text: str, key: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "yes", "1", "on"):
        return True
    if lowered in ("false", "no", "0", "off"):
        return False
    raise ValidationError(f"{key}: expected a boolean, got {text!r}")


def _parse_floats(text: str, key: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError as exc:
        raise ValidationError(f"{key}: malformed number list {text!r}") from exc


def _parse_ramp(text: str, key: str) -> tuple[tuple[float, float], tuple[float, float]]:
    pairs = []
    for part in text.split(","):
        if not part.strip():
            continue
        bits = part.split(":")
        if len(bits) != 2:
            raise ValidationError(f"{key}: expected 'rho:value,rho:value', got {text!r}")
        try:
            pairs.append((float(bits[0]), float(bits[1])))
        except ValueError as exc:
            raise ValidationError(f"{key}: malformed number in {text!r}") from exc
    if len(pairs) != 2:
        raise ValidationError(f"{key}: expected exactly two rho:value pairs")
    return pairs[0], pairs[1]


def _parse_segments(text: str, key: str) -> tuple[tuple[float, float], ...]:
    out = []
    for part in text.split(";"):
        if not part.strip():
            continue
        bits = part.split(":")
        if len(bits) != 2:
            raise ValidationError(f"{key}: expected 'start:length;start:length', got {text!r}")
        try:
            out.append((float(bits[0]), float(bits[1])))
        except ValueError as exc:
            raise ValidationError(f"{key}: malformed number in {text!r}") from exc
    return tuple(out)


_PIPELINE_PARSERS = {
    "voxel_size": float,
    "sigma": float,
    "candidate_fraction": float,
    "ground_filter": _parse_bool,
    "bin_width": float,
    "extend_band": _parse_bool,
    "tile_banding": _parse_bool,
    "tile_size": float,
    "region_extents": None,
    "penalty_d": _parse_ramp,
    "penalty_s": _parse_ramp,
    "penalty_v": float,
    "rho_min": float,
    "min_component": int,
    "min_span": float,
    "merge_lateral_tol": float,
    "core_lateral_tol": float,
    "merge_angle_deg": float,
    "corridor_radius": float,
    "validate_step": _parse_bool,
    "min_height_step": float,
    "stitch_tol": float,
    "stitch_free_tol": float,
    "link_max_gap": float,
    "eval_d": _parse_floats,
    "seed": int,
}

_SCENE_PARSERS = {
    "road_length": float,
    "road_width": float,
    "sidewalk_width": float,
    "curb_height": float,
    "curb_profile": str,
    "density_road": float,
    "density_sidewalk": float,
    "density_gradient": _parse_floats,
    "slope_deg": float,
    "occlusions": _parse_segments,
    "ramps": _parse_segments,
    "intersection": _parse_bool,
    "min_point_spacing": float,
    "seed": int,
    "noise_t": float,
    "downsample": float,
    "scanner_gap": _parse_floats,
}


def _apply(parsers: dict, section: configparser.SectionProxy, section_name: str) -> dict:
    out = {}
    for key, raw in section.items():
        if key not in parsers:
            raise ValidationError(f"unknown key {key!r} in [{section_name}]")
        parser = parsers[key]
        if parser is None:  # region_extents
            vals = _parse_floats(raw, key)
            if len(vals) != 3:
                raise ValidationError(f"{key}: expected three values")
            out[key] = tuple(int(v) for v in vals)
        elif parser in (_parse_bool, _parse_ramp, _parse_floats, _parse_segments):
            out[key] = parser(raw, key)
        else:
            try:
                out[key] = parser(raw)
            except ValueError as exc:
                raise ValidationError(f"{key}: cannot parse {raw!r}") from exc
    return out


def load_config(path=None, seed_override: int | None = None) -> tuple[PipelineConfig, SceneConfig]:
    """Read a config file; missing file or sections fall back to defaults."""
    cp = configparser.ConfigParser()
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                cp.read_file(fh)
        except OSError as exc:
            raise ValidationError(f"cannot read config {path}: {exc}") from exc
        except configparser.Error as exc:
            raise ValidationError(f"malformed config {path}: {exc}") from exc
        for section in cp.sections():
            if section not in ("pipeline", "scene"):
                raise ValidationError(f"unknown config section [{section}]")

    pipeline = PipelineConfig()
    if cp.has_section("pipeline"):
        for key, value in _apply(_PIPELINE_PARSERS, cp["pipeline"], "pipeline").items():
            setattr(pipeline, key, value)

    scene = SceneConfig()
    if cp.has_section("scene"):
        values = _apply(_SCENE_PARSERS, cp["scene"], "scene")
        noise_t = values.pop("noise_t", 0.0)
        downsample = values.pop("downsample", 1.0)
        gap = values.pop("scanner_gap", None)
        if gap is not None and len(gap) != 2:
            raise ValidationError("scanner_gap: expected 'offset,width'")
        if "density_gradient" in values and len(values["density_gradient"]) != 2:
            raise ValidationError("density_gradient: expected 'low,high'")
        scene = SceneConfig(
            spec=SceneSpec(**values),
            noise_t=noise_t,
            downsample=downsample,
            scanner_gap=tuple(gap) if gap else None,
        )

    if seed_override is not None:
        pipeline.seed = seed_override
        scene = SceneConfig(
            spec=SceneSpec(**{**_spec_dict(scene.spec), "seed": seed_override}),
            noise_t=scene.noise_t,
            downsample=scene.downsample,
            scanner_gap=scene.scanner_gap,
        )
    pipeline.validate()
    scene.spec.validate()
    return pipeline, scene


def _spec_dict(spec: SceneSpec) -> dict:
    return {f.name: getattr(spec, f.name) for f in fields(SceneSpec)}


def _fmt(value, kind: str = "scalar") -> str:
    if kind == "ramp":
        return ",".join(f"{a:g}:{b:g}" for a, b in value)
    if kind == "segments":
        return ";".join(f"{a:g}:{b:g}" for a, b in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(f"{v:g}" for v in value)
    if isinstance(value, float):
        return f"{value:g}"
    return str(value)


def dump_config(pipeline: PipelineConfig, scene: SceneConfig | None, path) -> None:
    """Write the effective configuration; re-running from it reproduces results."""
    lines = ["[pipeline]"]
    for f in fields(PipelineConfig):
        kind = "ramp" if f.name in ("penalty_d", "penalty_s") else "scalar"
        lines.append(f"{f.name} = {_fmt(getattr(pipeline, f.name), kind)}")
    if scene is not None:
        lines.append("")
        lines.append("[scene]")
        for name, value in _spec_dict(scene.spec).items():
            if name in ("occlusions", "ramps"):
                if not value:
                    continue
                lines.append(f"{name} = {_fmt(value, 'segments')}")
                continue
            if name == "density_gradient" and value is None:
                continue
            lines.append(f"{name} = {_fmt(value)}")
        if scene.noise_t:
            lines.append(f"noise_t = {scene.noise_t:g}")
        if scene.downsample != 1.0:
            lines.append(f"downsample = {scene.downsample:g}")
        if scene.scanner_gap:
            lines.append(f"scanner_gap = {_fmt(scene.scanner_gap)}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
