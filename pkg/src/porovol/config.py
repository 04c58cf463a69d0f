"""Run configuration: sectioned key/value files (SI units, ``#`` comments)."""
from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .fluid import CapillaryModel, FluidModel, PhaseParams
from .scheme import Dirichlet
from .solver import LinearConfig, NewtonConfig


class ConfigError(ValueError):
    """Unreadable or inconsistent configuration."""


class AssumptionError(ValueError):
    """Data violating a structural hypothesis (e.g. negative source rates)."""


@dataclass(frozen=True)
class MeshSpec:
    kind: str = "triangular"
    n: int = 15
    nx: int = 16
    ny: int = 16
    lx: float = 1.0
    ly: float = 1.0
    porosity: float = 1.0
    permeability: float = 1.0
    path: str | None = None


@dataclass(frozen=True)
class BoundarySpec:
    tag: str
    segments: tuple
    condition: Dirichlet


@dataclass(frozen=True)
class InitialSpec:
    phase: str = "w"
    pressure: float = 0.0
    s_w: float = 1.0


@dataclass(frozen=True)
class SourceData:
    f_p: float = 0.0
    f_i: float = 0.0
    s_i: float = 1.0


@dataclass(frozen=True)
class OutputSpec:
    directory: str = "output"
    snapshots: tuple = ()
    vtk: bool = True
    diagnostics: str = "diagnostics.csv"
    check_lemmas: bool = True


@dataclass(frozen=True)
class RunConfig:
    mesh: MeshSpec
    wetting: PhaseParams
    nonwetting: PhaseParams
    capillary: CapillaryModel
    boundaries: tuple
    initial: InitialSpec
    gravity: tuple
    sources: SourceData
    dt: float
    t_final: float
    newton: NewtonConfig
    linear: LinearConfig
    output: OutputSpec
    verify_t_final: float = 1.0
    conv_base: int = 16
    conv_levels: int = 3
    conv_t_final: float = 6.0
    conv_refine_dt: bool = False
    source_path: str = ""
    text: str = field(default="", repr=False)

    def fluid(self) -> FluidModel:
        return FluidModel(self.wetting, self.nonwetting, self.capillary)

    @property
    def require_capillary(self) -> bool:
        return self.capillary.kind != "none"


def shipped_configs() -> list[str]:
    return sorted(p.name for p in resources.files("porovol.data").iterdir() if p.name.endswith(".cfg"))


def resolve_path(path: str) -> Path:
    """A path on disk, or the name of a shipped config (with or without ``.cfg``)."""
    p = Path(path)
    if p.exists():
        return p
    name = p.name if p.suffix == ".cfg" else p.name + ".cfg"
    if str(p.parent) in ("", ".") and name in shipped_configs():
        with resources.as_file(resources.files("porovol.data") / name) as f:
            return Path(f)
    raise ConfigError(f"config file not found: {path}")


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.replace(";", ",").split(",") if x.strip()]


def _pairs(text: str) -> tuple[tuple, tuple]:
    """``s:v, s:v, ...`` -> ((s...), (v...))."""
    items = [it.split(":") for it in text.split(",") if it.strip()]
    if any(len(it) != 2 for it in items):
        raise ConfigError(f"expected s:value pairs, got {text!r}")
    return tuple(float(a) for a, _ in items), tuple(float(b) for _, b in items)


def _segments(text: str) -> tuple:
    segs = []
    for part in text.split(";"):
        v = _floats(part)
        if len(v) != 4:
            raise ConfigError(f"segment needs x0,y0,x1,y1: {part!r}")
        segs.append(((v[0], v[1]), (v[2], v[3])))
    return tuple(segs)


def apply_overrides(cp: configparser.ConfigParser, overrides: dict) -> None:
    """``{"section.key": value}``; the key is the text after the last dot."""
    for dotted, value in overrides.items():
        if "." not in dotted:
            raise ConfigError(f"override must be section.key=value: {dotted!r}")
        section, key = dotted.rsplit(".", 1)
        if not cp.has_section(section):
            cp.add_section(section)
        cp.set(section, key, str(value))


def _phase(cp, section) -> PhaseParams:
    if not cp.has_section(section):
        raise ConfigError(f"missing section [{section}]")
    s = cp[section]
    table = _pairs(s["kr_table"]) if "kr_table" in s else None
    return PhaseParams(
        viscosity=s.getfloat("viscosity"),
        rho_ref=s.getfloat("rho_ref", 1.0),
        c_ref=s.getfloat("c_ref", 0.0),
        p_ref=s.getfloat("p_ref", 0.0),
        kr_exponent=s.getfloat("kr_exponent", 2.0),
        kr_table=table,
    )


def parse_config(text: str, overrides: dict | None = None, source_path: str = "") -> RunConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",), comment_prefixes=("#",))
    try:
        cp.read_string(text)
        apply_overrides(cp, overrides or {})
        return _build(cp, source_path)
    except ConfigError:
        raise
    except (configparser.Error, KeyError, ValueError, TypeError) as err:
        if isinstance(err, AssumptionError):
            raise
        raise ConfigError(f"invalid configuration: {err}") from err


def load_config(path: str, overrides: dict | None = None) -> RunConfig:
    p = resolve_path(path)
    try:
        text = p.read_text()
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err
    return parse_config(text, overrides, str(p))


_PHASE_KEYS = {"viscosity", "rho_ref", "c_ref", "p_ref", "kr_exponent", "kr_table"}
KNOWN_KEYS = {
    "mesh": {"kind", "n", "nx", "ny", "lx", "ly", "porosity", "permeability", "path"},
    "fluid.wetting": _PHASE_KEYS,
    "fluid.nonwetting": _PHASE_KEYS,
    "capillary": {"mode", "p_max", "table"},
    "boundary.*": {"segments", "phase", "pressure", "s_w"},
    "initial": {"phase", "pressure", "s_w"},
    "gravity": {"g"},
    "sources": {"f_p", "f_i", "s_i"},
    "time": {"dt", "t_final"},
    "solver": {"newton_tol", "newton_max_iter", "max_backtracks", "dt_retries", "linear_tol", "linear_max_iter",
               "preconditioner"},
    "output": {"directory", "snapshots", "vtk", "diagnostics", "check_lemmas"},
    "verify": {"t_final"},
    "convergence": {"base", "levels", "t_final", "refine_dt"},
}


def _check_keys(cp: configparser.ConfigParser):
    for sec in cp.sections():
        known = KNOWN_KEYS.get("boundary.*" if sec.startswith("boundary.") else sec)
        if known is None:
            raise ConfigError(f"unknown section [{sec}]")
        extra = sorted(set(cp[sec]) - known)
        if extra:
            raise ConfigError(f"unknown keys in [{sec}]: {', '.join(extra)}")


def _build(cp: configparser.ConfigParser, source_path: str) -> RunConfig:
    _check_keys(cp)
    for sec in ("mesh", "fluid.wetting", "fluid.nonwetting", "time"):
        if not cp.has_section(sec):
            raise ConfigError(f"missing section [{sec}]")
    m = cp["mesh"]
    kind = m.get("kind", "triangular")
    if kind not in ("triangular", "rect", "file"):
        raise ConfigError(f"unknown mesh kind {kind!r}")
    path = m.get("path")
    if kind == "file":
        if not path:
            raise ConfigError("mesh kind 'file' needs a path")
        if source_path and not Path(path).is_absolute():
            cand = Path(source_path).parent / path
            path = str(cand) if cand.exists() else path
    mesh = MeshSpec(kind, m.getint("n", 15), m.getint("nx", m.getint("n", 16)), m.getint("ny", m.getint("n", 16)),
                    m.getfloat("lx", 1.0), m.getfloat("ly", 1.0), m.getfloat("porosity", 1.0),
                    m.getfloat("permeability", 1.0), path)

    cap = cp["capillary"] if cp.has_section("capillary") else {}
    mode = cap.get("mode", "none")
    table = _pairs(cap["table"]) if mode == "table" else None
    capillary = CapillaryModel(mode, float(cap.get("p_max", 0.0)), table)

    boundaries = []
    for sec in cp.sections():
        if not sec.startswith("boundary."):
            continue
        b = cp[sec]
        phase = b.get("phase", "w")
        sw = b.get("s_w", "interior").strip()
        cond = Dirichlet(b.getfloat("pressure"), phase, None if sw == "interior" else float(sw))
        boundaries.append(BoundarySpec(sec.split(".", 1)[1], _segments(b["segments"]), cond))

    ini = cp["initial"] if cp.has_section("initial") else {}
    initial = InitialSpec(ini.get("phase", "w"), float(ini.get("pressure", 0.0)), float(ini.get("s_w", 1.0)))
    if initial.phase not in ("w", "n"):
        raise ConfigError("initial phase must be w or n")
    if not 0.0 <= initial.s_w <= 1.0:
        raise ConfigError("initial saturation must lie in [0, 1]")

    grav = tuple(_floats(cp.get("gravity", "g", fallback="0, 0")))
    if len(grav) != 2:
        raise ConfigError("gravity needs two components")

    src = cp["sources"] if cp.has_section("sources") else {}
    sources = SourceData(float(src.get("f_p", 0.0)), float(src.get("f_i", 0.0)), float(src.get("s_i", 1.0)))
    if sources.f_p < 0 or sources.f_i < 0:
        raise AssumptionError("source rates f_p and f_i must be nonnegative")
    if not 0.0 <= sources.s_i <= 1.0:
        raise AssumptionError("injected saturation s_i must lie in [0, 1]")

    t = cp["time"]
    dt, t_final = t.getfloat("dt"), t.getfloat("t_final")

    s = cp["solver"] if cp.has_section("solver") else {}
    newton = NewtonConfig(tol=float(s.get("newton_tol", 1e-8)), max_iter=int(s.get("newton_max_iter", 20)),
                          max_backtracks=int(s.get("max_backtracks", 8)), max_retries=int(s.get("dt_retries", 4)))
    linear = LinearConfig(rtol=float(s.get("linear_tol", 1e-10)), max_iter=int(s.get("linear_max_iter", 500)),
                          preconditioner=s.get("preconditioner", "ilu"))

    o = cp["output"] if cp.has_section("output") else {}
    truthy = configparser.ConfigParser.BOOLEAN_STATES
    output = OutputSpec(o.get("directory", "output"), tuple(_floats(o.get("snapshots", ""))),
                        truthy[o.get("vtk", "yes").lower()], o.get("diagnostics", "diagnostics.csv"),
                        truthy[o.get("check_lemmas", "yes").lower()])

    v = cp["verify"] if cp.has_section("verify") else {}
    c = cp["convergence"] if cp.has_section("convergence") else {}
    out = _dump(cp)
    return RunConfig(mesh, _phase(cp, "fluid.wetting"), _phase(cp, "fluid.nonwetting"), capillary,
                     tuple(boundaries), initial, grav, sources, dt, t_final, newton, linear, output,
                     float(v.get("t_final", 1.0)), int(c.get("base", 16)), int(c.get("levels", 3)),
                     float(c.get("t_final", 6.0)), truthy[c.get("refine_dt", "no").lower()],
                     source_path, out)


def _dump(cp: configparser.ConfigParser) -> str:
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()
