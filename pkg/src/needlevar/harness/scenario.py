"""Scenario descriptions, the config-file schema and the shipped presets.

A scenario file is INI-style text::

    [scenario]
    name = my_run
    model = diff_drive
    mode = second

    [objective]
    Q = [10, 10, 1000]          # a flat list is a diagonal
    target = [1000, 1000, 0]

    [obstacle.a]
    center = [300, 350]
    radius = 150

Values are Python literals. Sections ``synthesis.first`` and
``synthesis.second`` override ``synthesis`` for one mode; each
``obstacle.<name>`` section adds an obstacle. Unknown sections or keys are
errors.
"""

from __future__ import annotations

import ast
import configparser
import copy
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Optional

import numpy as np

from ..models import DiffDriveParams, FishParams, SystemModel, build_model
from ..needle import SynthesisConfig, parse_mode
from ..objective import ObstaclePenalty, Objective


class ScenarioError(ValueError):
    """Schema violation in a scenario description."""


# key -> (expected type description, validator)
_NUM = "number"
_VEC = "list of numbers"
_MAT = "list of numbers (diagonal) or nested list (matrix)"

SCHEMA = {
    "scenario": {
        "name": "string",
        "model": "string",
        "mode": "'first' or 'second'",
        "seed": "integer",
        "trials": "integer",
        "sim_duration": _NUM,
        "record_stride": "integer",
    },
    "model": {
        "r": _NUM,
        "L": _NUM,
        "wheel_limit": _NUM,
        "linear_limit": _NUM,
        "angular_limit": _NUM,
        "mass": _VEC,
        "inertia": _VEC,
        "drift": _VEC,
        "force_limit": _NUM,
        "torque_limit": _NUM,
    },
    "objective": {
        "Q": _MAT,
        "P1": _MAT,
        "target": "list of numbers or 'tracking_v_c'",
        "R": _MAT,
    },
    "synthesis": {
        "horizon": _NUM,
        "rate_hz": _NUM,
        "dt": _NUM,
        "gamma": _NUM,
        "lambda_nominal": _NUM,
        "R": _MAT,
        "epsilon_eig": _NUM,
        "beta": _NUM,
        "k_max": "integer",
        "c_armijo": _NUM,
        "lambda_init": _NUM,
        "tau_stride": "integer",
        "tau_window": _NUM,
        "insertion": "'forward' or 'centered'",
        "saddle_tol": _NUM,
        "saturation": "'auto', 'clip' or 'scale'",
    },
    "initial": {
        "state": _VEC,
        "sampler": "'box' or 'ball'",
        "low": _VEC,
        "high": _VEC,
        "center": _VEC,
        "radius": _NUM,
        "min_distance": _NUM,
        "base": _VEC,
    },
    "success": {
        "position_tol": _NUM,
        "angle_tol": _NUM,
        "speed_tol": _NUM,
        "deadline": _NUM,
    },
    "obstacle": {
        "center": _VEC,
        "radius": _NUM,
        "weight": _NUM,
        "sharpness": _NUM,
        "velocity": _VEC,
        "amplitude": _VEC,
        "frequency": _VEC,
        "phase": _VEC,
    },
}

_SYNTH_ONLY = {"rate_hz"}


def _matrix(value, n: Optional[int], key: str) -> np.ndarray:
    a = np.asarray(value, dtype=float)
    if a.ndim == 0:
        if n is None:
            raise ScenarioError(f"{key}: scalar needs a known dimension")
        a = np.full(n, float(a))
    if a.ndim == 1:
        a = np.diag(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ScenarioError(f"{key}: expected {_MAT}")
    if n is not None and a.shape[0] != n:
        raise ScenarioError(f"{key}: expected size {n}, got {a.shape[0]}")
    return a


def _check_type(section: str, key: str, value):
    kind = SCHEMA[section][key]
    bad = False
    if kind == _NUM:
        bad = isinstance(value, bool) or not isinstance(value, (int, float))
    elif kind == "integer":
        bad = isinstance(value, bool) or not isinstance(value, int)
    elif kind == "string" or kind.startswith("'"):
        bad = not isinstance(value, str)
    elif kind == _VEC:
        bad = not (isinstance(value, (list, tuple)) and all(isinstance(v, (int, float)) for v in value))
    elif kind == _MAT:
        bad = not isinstance(value, (list, tuple, int, float))
    elif section == "objective" and key == "target":
        bad = not (value == "tracking_v_c" or isinstance(value, (list, tuple)))
    if bad:
        raise ScenarioError(f"[{section}] {key}: expected {kind}, got {value!r}")


@dataclass(frozen=True)
class SuccessSpec:
    """Convergence test: position distance, wrapped angle error and speed.

    ``position_tol`` None means the run has no convergence test (tracking).
    """

    position_tol: Optional[float] = None
    angle_tol: Optional[float] = None
    speed_tol: Optional[float] = None
    deadline: float = 60.0


@dataclass(frozen=True)
class SamplerSpec:
    kind: str = "box"
    low: tuple = ()
    high: tuple = ()
    center: tuple = ()
    radius: float = 0.0
    min_distance: float = 0.0
    base: tuple = ()


@dataclass(frozen=True, eq=False)
class Scenario:
    name: str
    model_name: str
    model_params: dict
    objective: dict
    synthesis: dict
    overrides: dict
    obstacles: tuple = ()
    mode: str = "second_order"
    initial_state: Optional[tuple] = None
    sampler: Optional[SamplerSpec] = None
    success: SuccessSpec = field(default_factory=SuccessSpec)
    sim_duration: float = 60.0
    seed: int = 0
    trials: int = 1
    record_stride: int = 1

    def __post_init__(self):
        object.__setattr__(self, "mode", parse_mode(self.mode))
        rate = self.settings(self.mode).get("rate_hz")
        if rate is None or not rate > 0:
            raise ScenarioError("[synthesis] rate_hz: expected a positive number")
        dt = self.settings(self.mode).get("dt", 1e-3)
        period = 1.0 / rate
        if period < dt * (1 - 1e-9):
            raise ScenarioError("feedback period must be at least the integration step")
        if self.success.deadline > self.sim_duration + 1e-12:
            raise ScenarioError("[success] deadline: must not exceed sim_duration")
        if self.initial_state is None and self.sampler is None:
            raise ScenarioError("[initial] needs either state or sampler")

    # -- builders -----------------------------------------------------------

    def build_model(self) -> SystemModel:
        return build_model(self.model_name, **self.model_params)

    def settings(self, mode: Optional[str] = None) -> dict:
        mode = parse_mode(mode or self.mode)
        key = "first" if mode == "first_order" else "second"
        out = dict(self.synthesis)
        out.update(self.overrides.get(key, {}))
        return out

    def build_objective(self, mode: Optional[str] = None, model: Optional[SystemModel] = None) -> Objective:
        model = model or self.build_model()
        n, m = model.state_dim, model.control_dim
        spec = self.objective
        R = self.settings(mode).get("R", spec.get("R"))
        if R is None:
            raise ScenarioError("no control metric R for this mode")
        target = spec.get("target", [0.0] * n)
        if isinstance(target, (list, tuple)):
            target = np.asarray(target, dtype=float)
        obstacles = tuple(ObstaclePenalty(**o) for o in self.obstacles)
        return Objective(
            _matrix(spec.get("Q", 0.0), n, "Q"),
            _matrix(spec.get("P1", 0.0), n, "P1"),
            target,
            _matrix(R, m, "R"),
            position_rows=model.position_rows,
            obstacles=obstacles,
        )

    def synthesis_config(self, mode: Optional[str] = None) -> SynthesisConfig:
        s = {k: v for k, v in self.settings(mode).items() if k not in _SYNTH_ONLY and k != "R"}
        return SynthesisConfig(**s)

    @property
    def rate_hz(self) -> float:
        return float(self.settings()["rate_hz"])

    def with_mode(self, mode: str) -> "Scenario":
        return replace(self, mode=parse_mode(mode))

    def replace(self, **kw) -> "Scenario":
        return replace(self, **kw)

    def sample_initial(self, rng: np.random.Generator, model: SystemModel, obj: Objective) -> np.ndarray:
        """Draw one start state with rejection by distance and obstacle clearance."""
        if self.sampler is None:
            return np.asarray(self.initial_state, dtype=float)
        sp = self.sampler
        base = np.asarray(sp.base, dtype=float) if sp.base else np.zeros(model.state_dim)
        if model.quat_start is not None and not sp.base:
            base[model.quat_start] = 1.0
        rows = list(model.position_rows)
        goal = obj.target_at(0.0)[rows]
        for _ in range(100000):
            if sp.kind == "box":
                p = rng.uniform(sp.low, sp.high)
            else:
                c = np.asarray(sp.center, dtype=float)
                while True:
                    d = rng.uniform(-1.0, 1.0, size=len(c))
                    if d @ d <= 1.0:
                        break
                p = c + sp.radius * d
            if np.linalg.norm(p - goal) <= sp.min_distance:
                continue
            x = base.copy()
            x[rows] = p
            if obj.obstacles and obj.clearance(x, 0.0) <= 0:
                continue
            return x
        raise ScenarioError("initial-state sampler rejected every draw")

    # -- serialization ----------------------------------------------------------

    def to_sections(self) -> dict:
        sec: dict = {
            "scenario": {
                "name": self.name,
                "model": self.model_name,
                "mode": "first" if self.mode == "first_order" else "second",
                "seed": self.seed,
                "trials": self.trials,
                "sim_duration": self.sim_duration,
                "record_stride": self.record_stride,
            },
            "model": dict(self.model_params),
            "objective": dict(self.objective),
            "synthesis": dict(self.synthesis),
        }
        for k, v in self.overrides.items():
            sec[f"synthesis.{k}"] = dict(v)
        if self.initial_state is not None:
            sec["initial"] = {"state": list(self.initial_state)}
        else:
            sp = self.sampler
            init = {"sampler": sp.kind, "min_distance": sp.min_distance}
            if sp.kind == "box":
                init.update(low=list(sp.low), high=list(sp.high))
            else:
                init.update(center=list(sp.center), radius=sp.radius)
            if sp.base:
                init["base"] = list(sp.base)
            sec["initial"] = init
        sec["success"] = {k: getattr(self.success, k) for k in ("position_tol", "angle_tol", "speed_tol", "deadline")
                          if getattr(self.success, k) is not None}
        for i, o in enumerate(self.obstacles):
            sec[f"obstacle.{i}"] = dict(o)
        return sec

    def to_text(self) -> str:
        lines = []
        for name, body in self.to_sections().items():
            lines.append(f"[{name}]")
            for k, v in body.items():
                if isinstance(v, np.ndarray):
                    v = v.tolist()
                lines.append(f"{k} = {v!r}")
            lines.append("")
        return "\n".join(lines)


def _plain(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, tuple):
        return [_plain(x) for x in v]
    return v


def scenario_from_sections(sections: dict) -> Scenario:
    """Validate a nested ``{section: {key: value}}`` mapping and build the scenario."""
    sections = {k: {kk: _plain(vv) for kk, vv in v.items()} for k, v in sections.items()}
    synth_over: dict = {}
    obstacles = []
    for name, body in sections.items():
        base = name.split(".", 1)[0]
        if base not in SCHEMA or ("." in name and base not in ("synthesis", "obstacle")):
            raise ScenarioError(f"unknown section [{name}]")
        if base == "synthesis" and "." in name and name.split(".", 1)[1] not in ("first", "second"):
            raise ScenarioError(f"unknown section [{name}]; use synthesis.first or synthesis.second")
        for key, value in body.items():
            if key not in SCHEMA[base]:
                raise ScenarioError(f"unknown key {key!r} in [{name}]")
            _check_type(base, key, value)
        if base == "synthesis" and "." in name:
            synth_over[name.split(".", 1)[1]] = dict(body)
        if base == "obstacle":
            if "center" not in body or "radius" not in body:
                raise ScenarioError(f"[{name}] needs center and radius")
            obstacles.append({"weight": 1.0, "sharpness": 1.0, **body})

    head = sections.get("scenario", {})
    for req in ("name", "model"):
        if req not in head:
            raise ScenarioError(f"[scenario] {req}: missing (expected string)")
    init = sections.get("initial", {})
    sampler = None
    state = None
    if "state" in init:
        state = tuple(init["state"])
    elif "sampler" in init:
        kind = init["sampler"]
        if kind not in ("box", "ball"):
            raise ScenarioError("[initial] sampler: expected 'box' or 'ball'")
        sampler = SamplerSpec(
            kind=kind,
            low=tuple(init.get("low", ())),
            high=tuple(init.get("high", ())),
            center=tuple(init.get("center", ())),
            radius=float(init.get("radius", 0.0)),
            min_distance=float(init.get("min_distance", 0.0)),
            base=tuple(init.get("base", ())),
        )
    succ = sections.get("success", {})
    sim = float(head.get("sim_duration", succ.get("deadline", 60.0)))
    success = SuccessSpec(
        position_tol=succ.get("position_tol"),
        angle_tol=succ.get("angle_tol"),
        speed_tol=succ.get("speed_tol"),
        deadline=float(succ.get("deadline", sim)),
    )
    model_params = dict(sections.get("model", {}))
    if head["model"] == "diff_drive":
        allowed = {f.name for f in fields(DiffDriveParams)}
    elif head["model"] == "fish":
        allowed = {f.name for f in fields(FishParams)}
    elif head["model"] == "kin_body":
        allowed = {"linear_limit", "angular_limit"}
    else:
        raise ScenarioError(f"[scenario] model: unknown model {head['model']!r}")
    for k in model_params:
        if k not in allowed:
            raise ScenarioError(f"[model] {k}: not a parameter of {head['model']}")
    try:
        return Scenario(
            name=head["name"],
            model_name=head["model"],
            model_params=model_params,
            objective=dict(sections.get("objective", {})),
            synthesis=dict(sections.get("synthesis", {})),
            overrides=synth_over,
            obstacles=tuple(obstacles),
            mode=head.get("mode", "second"),
            initial_state=state,
            sampler=sampler,
            success=success,
            sim_duration=sim,
            seed=int(head.get("seed", 0)),
            trials=int(head.get("trials", 1)),
            record_stride=int(head.get("record_stride", 1)),
        )
    except ScenarioError:
        raise
    except (TypeError, ValueError) as exc:
        raise ScenarioError(str(exc)) from exc


def _literal(text: str, where: str):
    text = text.strip()
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        if text and all(ch.isalnum() or ch in "_-" for ch in text):
            return text
        raise ScenarioError(f"{where}: cannot parse value {text!r}") from None


def parse_scenario_text(text: str, source: str = "<string>") -> Scenario:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str  # keys are case sensitive (Q, P1, R, L)
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ScenarioError(f"{source}: {exc}") from exc
    sections = {name: {k: _literal(v, f"{source} [{name}] {k}") for k, v in cp.items(name)} for name in cp.sections()}
    return scenario_from_sections(sections)


def load_scenario(path) -> Scenario:
    """A preset name or the path of a scenario file."""
    if isinstance(path, str) and path in PRESETS:
        return preset(path)
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"no scenario file or preset named {path!r}")
    return parse_scenario_text(p.read_text(), str(p))


# -- presets --------------------------------------------------------------------

_DD_L = 258.0

_DIFF_DRIVE = {
    "scenario": {"name": "diff_drive_mc", "model": "diff_drive", "mode": "second", "trials": 50, "sim_duration": 60.0},
    # wheel limit 150/36 rad/s with r in mm, about 300 mm/s top speed
    "model": {"r": 36.0, "L": _DD_L, "wheel_limit": 150.0 / 36.0},
    "objective": {"Q": [10.0, 10.0, 1000.0], "P1": [0.0, 0.0, 0.0], "target": [0.0, 0.0, 0.0]},
    "synthesis": {"horizon": 0.5, "rate_hz": 4.0, "dt": 0.005, "gamma": -15.0, "lambda_nominal": 0.1},
    "synthesis.first": {"R": [100.0, 100.0]},
    "synthesis.second": {"R": [0.1, 0.1]},
    "initial": {"sampler": "box", "low": [-1500.0, -1500.0], "high": [1500.0, 1500.0], "min_distance": _DD_L / 5},
    "success": {"position_tol": _DD_L / 5, "angle_tol": np.pi / 12, "deadline": 60.0},
}

_KIN_BODY = {
    "scenario": {"name": "kin_body_mc", "model": "kin_body", "mode": "second", "trials": 20, "sim_duration": 60.0},
    "objective": {"Q": 0.0, "P1": [100.0, 200.0, 100.0, 0.0, 0.0, 0.0, 0.0], "target": [0.0] * 7},
    "synthesis": {"horizon": 1.0, "rate_hz": 20.0, "dt": 0.01, "gamma": -50000.0, "lambda_nominal": 1e-3},
    "synthesis.first": {"R": [10.0, 10.0, 1000.0, 1000.0]},
    "synthesis.second": {"R": [1e-6, 1e-6, 1e-4, 1e-4]},
    "initial": {"sampler": "box", "low": [-50.0] * 3, "high": [50.0] * 3, "min_distance": 6.0},
    "success": {"position_tol": 6.0, "deadline": 60.0},
}

_FISH_Q = [1e3 / 200, 1e3 / 200, 1e3 / 200, 0.0, 0.0, 0.0, 0.0, 1 / 200, 1 / 200, 1 / 200, 2e3 / 200, 1e3 / 200, 1e3 / 200]

_FISH = {
    "scenario": {"name": "fish_mc", "model": "fish", "mode": "second", "trials": 30, "sim_duration": 60.0},
    "objective": {"Q": _FISH_Q, "P1": 0.0, "target": [0.0] * 13},
    "synthesis": {"horizon": 1.5, "rate_hz": 20.0, "dt": 0.01, "gamma": -5.0, "lambda_nominal": 1e-4},
    "synthesis.first": {"R": [1e3, 1e3, 1e6, 1e6]},
    "synthesis.second": {"R": [0.5e-6, 0.5e-6, 0.5e-3, 0.5e-3]},
    "initial": {"sampler": "box", "low": [-100.0] * 3, "high": [100.0] * 3, "min_distance": 15.0},
    "success": {"position_tol": 5.0, "speed_tol": 5.0, "deadline": 60.0},
}

_FISH_TRACK = {
    "scenario": {"name": "fish_tracking_drift", "model": "fish", "mode": "second", "trials": 1, "sim_duration": 10.0},
    "model": {"drift": [0.0, 10.0, 0.0]},
    "objective": {
        "Q": [10.0, 10.0, 10.0, 0, 0, 0, 0, 0, 0, 0, 1.0, 1.0, 0.1],
        "P1": [10.0, 10.0, 10.0] + [0.0] * 10,
        "target": "tracking_v_c",
    },
    "synthesis": {"horizon": 2.0, "rate_hz": 20.0, "dt": 0.01, "gamma": -50000.0, "lambda_nominal": 0.01},
    "synthesis.first": {"R": [1e3, 1e3, 1e6, 1e6]},
    "synthesis.second": {"R": [10.0, 10.0, 1e4, 1e4]},
    "initial": {"state": [30.0, 0.0, 0.0, 1.0] + [0.0] * 9},
    "success": {"deadline": 10.0},
}

_FISH_DRIFT = {
    "scenario": {"name": "fish_drift_mc", "model": "fish", "mode": "second", "trials": 30, "sim_duration": 60.0},
    "model": {"drift": [0.0, 10.0, 0.0]},
    "objective": {
        "Q": [1e-2, 1e-2, 1e-2, 0, 0, 0, 0, 1e-3, 1e-3, 1e-3, 1e-3, 1e-3, 1e-3],
        "P1": [100.0, 100.0, 100.0, 0, 0, 0, 0, 0.5, 0.5, 0.5, 0, 0, 0],
        "target": [0.0] * 13,
    },
    "synthesis": {"horizon": 1.0, "rate_hz": 20.0, "dt": 0.01, "gamma": -25000.0, "lambda_nominal": 1e-4},
    "synthesis.first": {"R": [0.1, 0.1, 1e4, 1e4]},
    "synthesis.second": {"R": [0.5e-5, 0.5e-5, 0.5, 0.5]},
    "initial": {"sampler": "ball", "center": [0.0, 0.0, 0.0], "radius": 30.0, "min_distance": 5.0},
    "success": {"position_tol": 5.0, "deadline": 60.0},
}

# obstacle safe radii include half the wheel base; the boundary slope w*k is
# ten times the largest position-cost gradient over a 2 m workspace (10 * 2000)
_OBST = {"weight": 4e6, "sharpness": 0.05}

_DD_OBSTACLES = copy.deepcopy(_DIFF_DRIVE)
_DD_OBSTACLES["scenario"].update(name="diff_drive_obstacles", trials=1)
_DD_OBSTACLES["objective"]["target"] = [1000.0, 1000.0, 0.0]
_DD_OBSTACLES["initial"] = {"state": [0.0, 0.0, 0.0]}
_DD_OBSTACLES["obstacle.0"] = {"center": [300.0, 380.0], "radius": 150.0, **_OBST}
_DD_OBSTACLES["obstacle.1"] = {"center": [700.0, 620.0], "radius": 150.0, **_OBST}

_DD_THREE = copy.deepcopy(_DIFF_DRIVE)
_DD_THREE["scenario"].update(name="diff_drive_three_obstacles", trials=1)
_DD_THREE["objective"]["target"] = [400.0, 1000.0, 0.0]
_DD_THREE["initial"] = {"state": [150.0, -300.0, 0.0]}
_DD_THREE["obstacle.0"] = {"center": [400.0, 550.0], "radius": 150.0, **_OBST}
_DD_THREE["obstacle.1"] = {"center": [100.0, 250.0], "radius": 150.0, **_OBST}
_DD_THREE["obstacle.2"] = {"center": [700.0, 250.0], "radius": 150.0, **_OBST}

_DD_MOVING = copy.deepcopy(_DIFF_DRIVE)
_DD_MOVING["scenario"].update(name="diff_drive_moving_obstacles", trials=1)
_DD_MOVING["objective"]["target"] = [1000.0, 1000.0, 0.0]
_DD_MOVING["synthesis"].update(horizon=0.3, rate_hz=20.0)
_DD_MOVING["initial"] = {"state": [0.0, 0.0, 0.0]}
_DD_MOVING["obstacle.0"] = {"center": [350.0, 350.0], "radius": 150.0, "amplitude": [250.0, 0.0],
                            "frequency": [0.3, 0.0], **_OBST}
_DD_MOVING["obstacle.1"] = {"center": [650.0, 650.0], "radius": 150.0, "amplitude": [0.0, 250.0],
                            "frequency": [0.0, 0.25], "phase": [0.0, 1.5], **_OBST}
_DD_MOVING["obstacle.2"] = {"center": [900.0, 300.0], "radius": 150.0, "velocity": [0.0, 10.0], **_OBST}

PRESET_SECTIONS = {
    "diff_drive_mc": _DIFF_DRIVE,
    "diff_drive_obstacles": _DD_OBSTACLES,
    "diff_drive_three_obstacles": _DD_THREE,
    "diff_drive_moving_obstacles": _DD_MOVING,
    "kin_body_mc": _KIN_BODY,
    "fish_mc": _FISH,
    "fish_tracking_drift": _FISH_TRACK,
    "fish_drift_mc": _FISH_DRIFT,
}

PRESETS = tuple(PRESET_SECTIONS)


def preset(name: str) -> Scenario:
    try:
        sections = PRESET_SECTIONS[name]
    except KeyError:
        raise ScenarioError(f"unknown preset {name!r}; choose from {list(PRESETS)}") from None
    return scenario_from_sections(copy.deepcopy(sections))
