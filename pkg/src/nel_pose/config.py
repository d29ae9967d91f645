"""INI experiment files: parsing, overrides and the resolved-config record."""

from __future__ import annotations

import configparser
import os
import re
from typing import Callable, Iterable

from .embeddings import OracleEmbedConfig
from .geometry import GaussianVmfParams
from .harness import CameraTrackSpec, Experiment, SceneSpec, TrackingSpec
from .hypotheses import HypothesesConfig, VoxelGridSpec
from .inference import PhaseSpec, SearchSchedule, default_schedule
from .likelihood import LikelihoodConfig
from .renderer import CameraIntrinsics


class ConfigError(ValueError):
    """Bad configuration; the message names the offending ``section.key``."""


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(x) for x in s.replace(",", " ").split())


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(x) for x in s.replace(",", " ").split())


def _names(s: str) -> tuple[str, ...]:
    return tuple(x for x in s.replace(",", " ").split())


def _patch(s: str):
    if s.strip().lower() in ("full", "none"):
        return None
    v = _ints(s)
    if len(v) != 2:
        raise ValueError("patch needs two integers or 'full'")
    return v


def _opt_int(s: str):
    v = int(s)
    return None if v <= 0 else v


def _opt_float(s: str):
    v = float(s)
    return None if v <= 0 else v


# section -> key -> (parser, default as text)
SCHEMA: dict[str, dict[str, tuple[Callable, str]]] = {
    "experiment": {
        "run_id": (str, "run"),
        "seed": (int, "0"),
        "n_scenes": (int, "50"),
        "timing": (_bool, "false"),
    },
    "camera": {
        "fx": (float, "267.0"),
        "fy": (float, "267.0"),
        "cx": (float, "80.0"),
        "cy": (float, "60.0"),
        "width": (int, "160"),
        "height": (int, "120"),
    },
    "scene": {
        "classes": (_names, "bracket"),
        "objects": (_ints, "1"),
        "depth_min": (float, "600.0"),
        "depth_max": (float, "900.0"),
        "depth_noise": (float, "2.0"),
        "dropout": (float, "0.02"),
        "max_tries": (int, "1000"),
    },
    "embed": {
        "embed_dim": (int, "12"),
        "seed": (int, "0"),
        "query_noise": (float, "0.03"),
        "background_seed": (int, "1"),
        "temperature": (float, str(OracleEmbedConfig().temperature)),
        "wavelength": (float, "250.0"),
        "symmetric_classes": (_ints, ""),
        "n_samples": (int, "1024"),
    },
    "likelihood": {
        "r": (float, "5.0"),
        "p_background": (float, "1e-9"),
        "epsilon": (float, "0.1"),
        "patch": (_patch, "10, 10"),
    },
    "hypotheses": {
        "n_keypoints": (int, "8"),
        "n_top_positions": (int, "64"),
        "n_hypotheses": (int, "80"),
        "nms_radius": (int, "10"),
        "grid_origin": (_floats, "-350.0, -210.0, 530.0"),
        "grid_dims": (_ints, "129, 87, 168"),
        "voxel_size": (float, "5.0"),
        "n_axes": (int, "200"),
        "n_inplane": (int, "32"),
        "rotations_per_position": (_opt_int, "0"),
    },
    "search": {
        "phases": (int, str(len(default_schedule().phases))),
        "object_order": (str, "round_robin"),
    },
    "tracking": {
        "n_particles": (int, "400"),
        "n_particles_small": (int, "50"),
        "n_seeds": (int, "10"),
        "start_x": (float, str(TrackingSpec.start_x)),
        "end_x": (float, str(TrackingSpec.end_x)),
        "speed": (float, str(TrackingSpec.speed)),
        "object_depth": (float, str(TrackingSpec.object_depth)),
        "object_y": (float, str(TrackingSpec.object_y)),
        "occluder_depth": (float, str(TrackingSpec.occluder_depth)),
        "occluder_width": (float, str(TrackingSpec.occluder_width)),
        "occluder_height": (float, str(TrackingSpec.occluder_height)),
        "position_sigma": (float, str(TrackingSpec.position_sigma)),
        "rotation_concentration": (float, str(TrackingSpec.rotation_concentration)),
        "reacquire_window": (int, "10"),
        "reacquire_tol": (float, "10.0"),
    },
    "camera_track": {
        "n_scenes": (int, "5"),
        "n_frames": (int, str(CameraTrackSpec.n_frames)),
        "classes": (_names, " ".join(CameraTrackSpec.classes)),
        "objects": (_ints, " ".join(str(c) for c in CameraTrackSpec.objects)),
        "drift_translation": (float, str(CameraTrackSpec.drift_translation)),
        "drift_rotation_deg": (float, str(CameraTrackSpec.drift_rotation_deg)),
        "position_cap": (_opt_float, "30.0"),
    },
}

PHASE_KEYS: dict[str, tuple[Callable, str]] = {
    "kind": (str, "random_walk"),
    "k": (int, "32"),
    "sweeps": (int, "1"),
    "position_sigma": (float, "0.0"),
    "rotation_concentration": (float, "1.0"),
    "degenerate": (_bool, "false"),
    "max_corr_dist": (float, "20.0"),
}

_PHASE_RE = re.compile(r"^phase\.(\d+)$")


def _phase_defaults() -> dict[str, dict[str, str]]:
    out = {}
    for n, ph in enumerate(default_schedule().phases, start=1):
        out[f"phase.{n}"] = {
            "kind": ph.kind,
            "k": str(ph.k),
            "sweeps": str(ph.sweeps),
            "position_sigma": repr(ph.params.position_sigma),
            "rotation_concentration": repr(ph.params.rotation_concentration),
            "degenerate": str(ph.params.degenerate).lower(),
            "max_corr_dist": repr(ph.max_corr_dist),
        }
    return out


def default_text() -> dict[str, dict[str, str]]:
    """Every setting with its default value, as text."""
    out = {sec: {k: d for k, (_, d) in keys.items()} for sec, keys in SCHEMA.items()}
    out["meshes"] = {}
    out.update(_phase_defaults())
    return out


def _keys_for(section: str):
    if section in SCHEMA:
        return SCHEMA[section]
    if _PHASE_RE.match(section):
        return PHASE_KEYS
    return None


def _merge(raw: dict, section: str, key: str, value: str):
    if section == "meshes":
        raw.setdefault("meshes", {})[key] = value
        return
    keys = _keys_for(section)
    if keys is None:
        raise ConfigError(f"unknown section [{section}] (at {section}.{key})")
    if key not in keys:
        raise ConfigError(f"unknown key {section}.{key}")
    if section not in raw:
        raw[section] = {k: d for k, (_, d) in keys.items()}
    raw[section][key] = value


def read_config(path: str | None = None, overrides: Iterable[str] = ()) -> dict[str, dict[str, str]]:
    """Defaults, then the file, then ``section.key=value`` overrides, as text."""
    raw = default_text()
    if path is not None:
        if not os.path.isfile(path):
            raise ConfigError(f"config file not found: {path}")
        cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
        cp.optionxform = str
        try:
            cp.read(path)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        for section in cp.sections():
            if not cp[section] and _keys_for(section) is None and section != "meshes":
                raise ConfigError(f"unknown section [{section}] in {path}")
            for key, value in cp[section].items():
                _merge(raw, section, key, value)
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        lhs, value = item.split("=", 1)
        section, key = lhs.strip().rsplit(".", 1)
        _merge(raw, section, key.strip(), value.strip())
    return raw


def _parse_section(raw, section, keys) -> dict:
    out = {}
    for key, (parse, _) in keys.items():
        try:
            out[key] = parse(raw[section][key])
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"bad value for {section}.{key}: {raw[section][key]!r} ({exc})") from exc
    return out


def build_experiment(raw: dict[str, dict[str, str]]) -> Experiment:
    v = {sec: _parse_section(raw, sec, keys) for sec, keys in SCHEMA.items()}

    def guard(section, fn):
        try:
            return fn()
        except (ValueError, TypeError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"invalid [{section}] settings: {exc}") from exc

    c = v["camera"]
    camera = guard("camera", lambda: CameraIntrinsics(c["fx"], c["fy"], c["cx"], c["cy"], c["width"], c["height"]))
    s = v["scene"]
    scene = guard(
        "scene",
        lambda: SceneSpec(
            s["classes"], s["objects"], (s["depth_min"], s["depth_max"]), s["depth_noise"], s["dropout"],
            s["max_tries"],
        ),
    )
    e = v["embed"]
    embed = guard(
        "embed",
        lambda: OracleEmbedConfig(
            e["embed_dim"], e["seed"], e["query_noise"], e["background_seed"], e["temperature"], e["wavelength"],
            e["symmetric_classes"],
        ),
    )
    lk = v["likelihood"]
    likelihood = guard("likelihood", lambda: LikelihoodConfig(lk["r"], lk["p_background"], lk["epsilon"], lk["patch"]))
    h = v["hypotheses"]
    hyp = guard(
        "hypotheses",
        lambda: HypothesesConfig(
            h["n_keypoints"], h["n_top_positions"], h["n_hypotheses"], h["nms_radius"],
            VoxelGridSpec(h["grid_origin"], h["grid_dims"], h["voxel_size"]), h["n_axes"], h["n_inplane"],
            h["rotations_per_position"],
        ),
    )
    phases = []
    for n in range(1, v["search"]["phases"] + 1):
        name = f"phase.{n}"
        if name not in raw:
            raise ConfigError(f"search.phases = {v['search']['phases']} but [{name}] is missing")
        p = _parse_section(raw, name, PHASE_KEYS)
        params = guard(
            name,
            lambda: GaussianVmfParams(p["position_sigma"], p["rotation_concentration"], p["degenerate"]),
        )
        phases.append(guard(name, lambda: PhaseSpec(p["kind"], p["k"], p["sweeps"], params, p["max_corr_dist"])))
    schedule = guard("search", lambda: SearchSchedule(tuple(phases), v["search"]["object_order"]))
    t = v["tracking"]
    tracking = guard("tracking", lambda: TrackingSpec(**t))
    ct = v["camera_track"]
    camera_track = guard("camera_track", lambda: CameraTrackSpec(**ct))
    x = v["experiment"]
    return Experiment(
        run_id=x["run_id"],
        seed=x["seed"],
        n_scenes=x["n_scenes"],
        timing=x["timing"],
        camera=camera,
        scene=scene,
        mesh_paths=dict(raw.get("meshes", {})),
        embed=embed,
        n_surface_samples=e["n_samples"],
        likelihood=likelihood,
        hypotheses=hyp,
        schedule=schedule,
        tracking=tracking,
        camera_track=camera_track,
    )


def load_experiment(path: str | None = None, overrides: Iterable[str] = ()) -> tuple[Experiment, dict]:
    raw = read_config(path, overrides)
    n_phases = int(raw["search"]["phases"]) if raw["search"]["phases"].strip().isdigit() else 0
    used = {k: val for k, val in raw.items() if not _PHASE_RE.match(k) or int(k.split(".")[1]) <= n_phases}
    return build_experiment(raw), used


def render_config(raw: dict[str, dict[str, str]]) -> str:
    """Resolved settings in INI form (sections in schema order, then phases)."""
    order = list(SCHEMA) + ["meshes"] + sorted((k for k in raw if _PHASE_RE.match(k)), key=lambda k: int(k[6:]))
    lines = []
    for sec in order:
        if sec not in raw:
            continue
        lines.append(f"[{sec}]")
        lines += [f"{k} = {val}" for k, val in raw[sec].items()]
        lines.append("")
    return "\n".join(lines)
