"""Line-oriented experiment configuration.

Grammar: one ``key = value`` per line, ``#`` starts a comment, blank lines
are ignored.  Keys are ``section.key`` (a few are top level).  Vectors and
lists are comma separated; ``auto`` is accepted where noted.  Unknown keys
are errors and every violation is reported at once.

Precedence: command-line flags override the file, which overrides defaults.
"""

from dataclasses import dataclass
import hashlib
import math

from ..errors import ConfigError

SCHEMA_VERSION = 1

# key -> (kind, default, description); None default means required
FIELDS = {
    "d": ("int", None, "lattice dimension"),
    "y": ("vector", None, "target velocity, |y|_1 < 1"),
    "law.family": ("str", "tilt", "tilt (finite tilt mixture) or zero (deterministic alpha)"),
    "law.alpha": ("vector", None, "mean jump probabilities, 2d entries ordered +e1,-e1,+e2,..."),
    "law.epsilon": ("float", None, "disorder in [0,1)"),
    "law.atoms": ("int", 2, "number of mixture atoms (even)"),
    "law.seed": ("int", 0, "seed for the atom construction"),
    "mc.samples": ("int", 200000, "regeneration cycles (or walks) to sample"),
    "mc.seed": ("int", 0, "master seed"),
    "mc.workers": ("int", 1, "worker processes"),
    "mc.confirm_window": ("window", "auto", "confirmation window K, or auto"),
    "mc.bootstrap": ("int", 200, "bootstrap resamples"),
    "mc.unit_size": ("int", 20000, "cycles per fixed work unit"),
    "dp.n_max": ("int", 300, "DP horizon"),
    "dp.memory_cap": ("float", 1e9, "DP memory cap in bytes"),
    "dp.envs": ("int", 5, "environment seeds for the quenched median"),
    "sweep.epsilons": ("flist", [0.3, 0.15, 0.05, 0.0], "disorder values for the sweep"),
    "sweep.radius": ("float", 0.05, "radius of the x-grid circle around y"),
    "sweep.count": ("int", 8, "points on the x-grid circle"),
    "ldp.x": ("vector", "auto", "rate point (auto means y)"),
    "ldp.tol": ("float", 1e-3, "tilt-matching tolerance on the l1 gradient residual"),
    "ldp.max_iter": ("int", 50, "Newton iteration cap"),
    "identity.trials": ("int", 50, "random tuples for verify-identity"),
    "identity.n": ("int", 4, "path length for verify-identity"),
    "identity.theta": ("vector", "auto", "theta for verify-identity (auto draws at random)"),
    "mgf.theta": ("vector", "auto", "theta for mgf (auto means zero)"),
    "mgf.n_list": ("ilist", [50, 100, 200, 300], "horizons reported by mgf"),
    "mgf.mode": ("str", "both", "quenched, annealed or both"),
    "regen.gamma_scan": ("flist", [0.05, 0.1, 0.15, 0.2, 0.25, 0.3], "gamma values for the moment scan"),
    "output.directory": ("str", "rwre_out", "output directory (RWRE_OUTPUT_DIR overrides)"),
    "output.format": ("str", "csv", "tabular output format"),
    "schema_version": ("int", SCHEMA_VERSION, "config schema version"),
}

REQUIRED = [k for k, (_, default, _) in FIELDS.items() if default is None]


def _parse_value(kind, text):
    text = text.strip()
    if kind == "int":
        value = float(text)
        if not value.is_integer():
            raise ValueError("expected an integer")
        return int(value)
    if kind == "float":
        return float(text)
    if kind == "str":
        return text
    if kind == "window":
        return "auto" if text == "auto" else _parse_value("int", text)
    if kind in ("vector", "flist", "ilist"):
        if kind == "vector" and text == "auto":
            return "auto"
        parts = [p for p in text.replace(" ", "").split(",") if p]
        if kind == "ilist":
            return [_parse_value("int", p) for p in parts]
        return [float(p) for p in parts]
    raise ValueError(f"unknown kind {kind}")


def format_value(value):
    """Canonical text form; floats use ``repr`` so values round-trip exactly."""
    if isinstance(value, str):
        return value
    if isinstance(value, (list, tuple)):
        return ", ".join(format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass(frozen=True, eq=False)
class ExperimentConfig:
    """Validated configuration; ``values`` maps every key in :data:`FIELDS` to its value."""

    values: dict

    def __getitem__(self, key):
        return self.values[key]

    def __eq__(self, other):
        return isinstance(other, ExperimentConfig) and self.values == other.values

    def __hash__(self):
        return hash(self.serialize())

    @property
    def d(self):
        return self.values["d"]

    @property
    def y(self):
        return list(self.values["y"])

    @property
    def alpha(self):
        return list(self.values["law.alpha"])

    @property
    def confirm_window(self):
        k = self.values["mc.confirm_window"]
        return None if k == "auto" else k

    @property
    def rate_x(self):
        x = self.values["ldp.x"]
        return self.y if x == "auto" else list(x)

    def serialize(self):
        """Canonical text; ``parse_config_text(c.serialize()) == c``."""
        return "".join(f"{k} = {format_value(self.values[k])}\n" for k in FIELDS)

    def digest(self):
        return hashlib.sha256(self.serialize().encode()).hexdigest()

    def with_overrides(self, overrides):
        raw = {k: format_value(v) for k, v in self.values.items()}
        raw.update(overrides)
        return build_config(raw)


def _read_lines(text, source="<text>"):
    raw, violations = {}, []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            violations.append(f"{source}:{lineno}: expected 'key = value'")
            continue
        key, value = (s.strip() for s in line.split("=", 1))
        if key in raw:
            violations.append(f"{source}:{lineno}: duplicate key {key}")
        raw[key] = value
    return raw, violations


def build_config(raw, violations=None):
    """Validate ``raw`` (key -> text) into an :class:`ExperimentConfig` or raise :class:`ConfigError`."""
    violations = list(violations or [])
    values = {}
    for key, text in raw.items():
        if key not in FIELDS:
            violations.append(f"unknown key {key}")
            continue
        kind = FIELDS[key][0]
        try:
            values[key] = _parse_value(kind, str(text))
        except ValueError:
            violations.append(f"{key}: cannot parse {text!r} as {kind}")
    for key in REQUIRED:
        if key not in values and key in FIELDS and not any(v.startswith(f"{key}:") for v in violations):
            violations.append(f"missing required key {key}")
    for key, (_, default, _) in FIELDS.items():
        if key not in values and default is not None:
            values[key] = list(default) if isinstance(default, list) else default
    violations.extend(_check_ranges(values))
    if violations:
        raise ConfigError(violations)
    return ExperimentConfig(values)


def _check_ranges(v):
    out = []
    d = v.get("d")
    if d is not None and not 1 <= d <= 8:
        out.append("d must be in [1,8]")
        d = None
    if "y" in v and isinstance(v["y"], list):
        if d is not None and len(v["y"]) != d:
            out.append(f"y must have {d} components")
        if sum(abs(c) for c in v["y"]) >= 1:
            out.append("y must satisfy |y|_1 < 1")
        if not any(v["y"]):
            out.append("y must be nonzero")
    if "law.alpha" in v:
        a = v["law.alpha"]
        if d is not None and len(a) != 2 * d:
            out.append(f"law.alpha must have {2 * d} entries")
        if any(p <= 0 for p in a):
            out.append("law.alpha entries must be positive")
        if abs(sum(a) - 1.0) > 1e-9:
            out.append("law.alpha must sum to 1")
    eps = v.get("law.epsilon")
    if eps is not None and not 0.0 <= eps < 1.0:
        out.append("epsilon must be in [0,1)")
    if v.get("law.family") not in ("tilt", "zero"):
        out.append("law.family must be tilt or zero")
    elif v["law.family"] == "zero" and eps not in (None, 0.0):
        out.append("law.family = zero requires epsilon = 0")
    if v.get("law.atoms", 2) < 2 or v.get("law.atoms", 2) % 2:
        out.append("law.atoms must be an even integer >= 2")
    for key in ("law.seed", "mc.seed", "mc.bootstrap"):
        if v.get(key, 0) < 0:
            out.append(f"{key} must be >= 0")
    for key in ("mc.samples", "mc.workers", "mc.unit_size", "dp.n_max", "dp.envs", "sweep.count",
                "ldp.max_iter", "identity.trials"):
        if v.get(key, 1) < 1:
            out.append(f"{key} must be >= 1")
    k = v.get("mc.confirm_window", "auto")
    if k != "auto" and k < 1:
        out.append("mc.confirm_window must be auto or >= 1")
    if v.get("dp.memory_cap", 1) <= 0:
        out.append("dp.memory_cap must be positive")
    if not 1 <= v.get("identity.n", 1) <= 8:
        out.append("identity.n must be in [1,8]")
    for e in v.get("sweep.epsilons", []):
        if not 0.0 <= e < 1.0:
            out.append("sweep.epsilons entries must be in [0,1)")
            break
    if not 0 < v.get("sweep.radius", 0.05) < 1:
        out.append("sweep.radius must be in (0,1)")
    if v.get("ldp.tol", 1) <= 0:
        out.append("ldp.tol must be positive")
    for key in ("ldp.x", "identity.theta", "mgf.theta"):
        val = v.get(key, "auto")
        if val != "auto":
            if d is not None and len(val) != d:
                out.append(f"{key} must have {d} components")
            if not all(math.isfinite(c) for c in val):
                out.append(f"{key} must be finite")
    x = v.get("ldp.x", "auto")
    if x != "auto" and sum(abs(c) for c in x) >= 1:
        out.append("ldp.x must satisfy |x|_1 < 1")
    if any(n < 1 for n in v.get("mgf.n_list", [1])) or not v.get("mgf.n_list", [1]):
        out.append("mgf.n_list must be a nonempty list of positive integers")
    if v.get("mgf.mode", "both") not in ("quenched", "annealed", "both"):
        out.append("mgf.mode must be quenched, annealed or both")
    if any(g <= 0 for g in v.get("regen.gamma_scan", [])):
        out.append("regen.gamma_scan entries must be positive")
    if v.get("output.format", "csv") != "csv":
        out.append("output.format must be csv")
    if v.get("schema_version", SCHEMA_VERSION) != SCHEMA_VERSION:
        out.append(f"schema_version must be {SCHEMA_VERSION}")
    return out


def parse_config_text(text, overrides=None, source="<text>", violations=None):
    raw, found = _read_lines(text, source)
    raw.update(overrides or {})
    return build_config(raw, found + list(violations or []))


def parse_config(path, overrides=None, violations=None):
    """Read, merge ``overrides`` (flag values as text) and validate a config file."""
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text, overrides, str(path), violations)
