"""
Run configuration: one INI file drives every pipeline stage.

Scalar geometry and parameter profiles are given in a tiny parametric
grammar (`flat c`, `linear v0 v1`, `sine mean amp nwaves`, `gaussians bg
amp center width [amp center width ...]`), evaluated along x with the
domain length as the period reference.  Unknown sections or keys are
errors, never ignored; missing keys fall back to the desk-problem
defaults.  Serialization is canonical (fixed order, shortest exact float
representation), so parse -> serialize -> parse is the identity.
"""

from dataclasses import dataclass, fields, replace
from configparser import ConfigParser

import numpy as np

from .mesh import DomainSpec, ConfigurationError, build_mesh
from .stokes import GlenRheology, PhysicsParams, NewtonConfig
from .inversion import NewtonCGConfig
from .prediction import QoISpec

FIELD_KINDS = {"flat": 1, "linear": 2, "sine": 3}   # gaussians is variadic


@dataclass(frozen=True)
class FieldSpec:
    """One parametric scalar profile along x."""
    kind: str
    params: tuple

    @classmethod
    def parse(cls, text):
        parts = text.split()
        if not parts:
            raise ConfigurationError("empty field expression")
        kind = parts[0]
        try:
            params = tuple(float(p) for p in parts[1:])
        except ValueError as e:
            raise ConfigurationError(f"bad field parameter in {text!r}") from e
        if kind in FIELD_KINDS:
            if len(params) != FIELD_KINDS[kind]:
                raise ConfigurationError(
                    f"field kind {kind!r} takes {FIELD_KINDS[kind]} parameters")
        elif kind == "gaussians":
            if len(params) < 1 or (len(params) - 1) % 3 != 0:
                raise ConfigurationError(
                    "gaussians takes a background plus (amp center width) triples")
        else:
            raise ConfigurationError(f"unknown field kind {kind!r}")
        return cls(kind, params)

    def __call__(self, x, length):
        x = np.asarray(x, dtype=float)
        p = self.params
        if self.kind == "flat":
            return np.full_like(x, p[0])
        if self.kind == "linear":
            return p[0] + (p[1] - p[0]) * x / length
        if self.kind == "sine":
            return p[0] + p[1] * np.sin(2.0 * np.pi * p[2] * x / length)
        out = np.full_like(x, p[0])
        for a, c, w in zip(p[1::3], p[2::3], p[3::3]):
            out = out + a * np.exp(-(((x - c) / w) ** 2))
        return out

    def text(self):
        return " ".join([self.kind] + [repr(v) for v in self.params])


@dataclass(frozen=True)
class GammaLadder:
    """L-curve regularization values: `logspace a b n` or `list v1 v2 ...`."""
    kind: str
    params: tuple

    @classmethod
    def parse(cls, text):
        parts = text.split()
        if not parts or parts[0] not in ("logspace", "list"):
            raise ConfigurationError(f"bad gamma ladder {text!r}")
        try:
            params = tuple(float(p) for p in parts[1:])
        except ValueError as e:
            raise ConfigurationError(f"bad gamma ladder {text!r}") from e
        if parts[0] == "logspace" and (len(params) != 3 or params[2] < 1
                                       or params[2] != int(params[2])):
            raise ConfigurationError("logspace takes exponents and a count")
        if parts[0] == "list" and len(params) == 0:
            raise ConfigurationError("empty gamma list")
        return cls(parts[0], params)

    def values(self):
        if self.kind == "logspace":
            a, b, n = self.params
            return np.logspace(a, b, int(n))
        return np.asarray(self.params)

    def text(self):
        if self.kind == "logspace":
            a, b, n = self.params
            return f"logspace {a!r} {b!r} {int(n)}"
        return " ".join(["list"] + [repr(v) for v in self.params])


# Per-section schemas.  A value's parser/serializer pair is chosen by the
# default's type; None-able floats use the literal `none`.

@dataclass(frozen=True)
class DomainSection:
    length: float = 100.0
    bed: FieldSpec = FieldSpec("sine", (0.0, 0.05, 2.0))
    surface: FieldSpec = FieldSpec("linear", (1.3, 1.0))
    left_bc: str = "no-slip"
    right_bc: str = "hydrostatic-ocean"
    sea_level: float = 0.5
    water_density: float = 1028.0
    outflow: str = "right"


@dataclass(frozen=True)
class MeshSection:
    nx: int = 32
    nz: int = 8
    order: int = 2


@dataclass(frozen=True)
class PhysicsSection:
    n_glen: float = 3.0
    A_glen: float = 0.1
    rho: float = 910.0
    g: float = 9.81
    eps_reg: float = 1e-10


@dataclass(frozen=True)
class PriorSection:
    kappa: float = 1.0
    gamma: float = 10.0
    delta: float = 1e-5
    beta0: float = 0.0


@dataclass(frozen=True)
class ObservationSection:
    mode: str = "diagonal"
    noise_rel: float = 0.1
    eps_norm: float = 1e-9
    seed: int = 42


@dataclass(frozen=True)
class SynthSection:
    beta_true: FieldSpec = FieldSpec("gaussians", (-1.0, -3.0, 60.0, 12.0))
    fine_factor: int = 4


@dataclass(frozen=True)
class ForwardSection:
    rel_tol: float = 1e-10
    abs_tol: float = 1e-11
    max_iters: int = 50
    linear_solver: str = "direct"


@dataclass(frozen=True)
class InversionSection:
    beta_init: FieldSpec = FieldSpec("flat", (5.9,))
    grad_rtol: float = 1e-5
    max_newton: int = 60
    max_cg: int = 300
    eta_max: float = 0.05
    gauss_newton: str = "auto"
    continuation: bool = False
    gamma: float = None


@dataclass(frozen=True)
class LCurveSection:
    gammas: GammaLadder = GammaLadder("logspace", (-3.0, 3.0, 13.0))
    continuation: bool = True


@dataclass(frozen=True)
class GevdSection:
    rank_max: int = 30
    oversample: int = 10
    power: int = 1
    threshold: float = 0.2
    mode: str = "auto"


@dataclass(frozen=True)
class SamplingSection:
    n_samples: int = 1000
    n_dump: int = 4


@dataclass(frozen=True)
class OutputSection:
    dir: str = "out"


SECTIONS = {
    "domain": DomainSection,
    "mesh": MeshSection,
    "physics": PhysicsSection,
    "prior": PriorSection,
    "observation": ObservationSection,
    "synth": SynthSection,
    "forward": ForwardSection,
    "inversion": InversionSection,
    "lcurve": LCurveSection,
    "gevd": GevdSection,
    "sampling": SamplingSection,
    "output": OutputSection,
}

_CHOICES = {
    ("domain", "left_bc"): ("no-slip", "traction-free", "hydrostatic-ocean"),
    ("domain", "right_bc"): ("no-slip", "traction-free", "hydrostatic-ocean"),
    ("domain", "outflow"): ("left", "right"),
    ("observation", "mode"): ("diagonal", "integral"),
    ("forward", "linear_solver"): ("direct", "krylov"),
    ("inversion", "gauss_newton"): ("auto", "always", "never"),
    ("gevd", "mode"): ("auto", "gauss-newton"),
    ("qoi", "boundary"): ("outflow", "left", "right", "top", "bottom"),
}


@dataclass(frozen=True)
class QoiSection:
    """One QoI block, section name `qoi:<tag>`."""
    tag: str
    boundary: str = "outflow"
    rho_flux: float = 0.91
    z_min: float = None
    z_max: float = None

    def to_spec(self):
        b = None if self.boundary == "outflow" else self.boundary
        return QoISpec(tag=self.tag, boundary=b, rho_flux=self.rho_flux,
                       z_min=self.z_min, z_max=self.z_max)


def _parse_value(section, key, default, text):
    text = text.strip()
    if (section, key) in _CHOICES and text not in _CHOICES[(section, key)]:
        raise ConfigurationError(
            f"[{section}] {key} must be one of {_CHOICES[(section, key)]}")
    if isinstance(default, bool):
        if text not in ("true", "false"):
            raise ConfigurationError(f"[{section}] {key} must be true/false")
        return text == "true"
    if isinstance(default, int):
        try:
            return int(text)
        except ValueError as e:
            raise ConfigurationError(f"[{section}] {key} must be an integer") from e
    if isinstance(default, FieldSpec):
        return FieldSpec.parse(text)
    if isinstance(default, GammaLadder):
        return GammaLadder.parse(text)
    if isinstance(default, str):
        return text
    # float-valued, possibly None-able
    if text == "none":
        return None
    try:
        return float(text)
    except ValueError as e:
        raise ConfigurationError(f"[{section}] {key} must be a number") from e


def _format_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (FieldSpec, GammaLadder)):
        return v.text()
    if v is None:
        return "none"
    if isinstance(v, float):
        return repr(v)
    return str(v)


# None-typed defaults (inversion.gamma, qoi z windows) cannot reveal
# their type through the default, so they are listed explicitly.
_FLOAT_OR_NONE = {("inversion", "gamma"), ("qoi", "z_min"), ("qoi", "z_max")}


class RunConfig:
    """Parsed configuration plus builders for the module-level objects."""

    def __init__(self, sections=None, qois=None):
        base = {name: cls() for name, cls in SECTIONS.items()}
        if sections:
            base.update(sections)
        for name in SECTIONS:
            setattr(self, name, base[name])
        self.qois = list(qois) if qois is not None else [QoiSection(tag="flux")]
        if not self.qois:
            raise ConfigurationError("at least one qoi section is required")

    # -- builders ------------------------------------------------------

    def domain_spec(self):
        d = self.domain
        return DomainSpec(length=d.length,
                          bed=lambda x, f=d.bed, L=d.length: f(x, L),
                          surface=lambda x, f=d.surface, L=d.length: f(x, L),
                          left_bc=d.left_bc, right_bc=d.right_bc,
                          sea_level=d.sea_level,
                          water_density=d.water_density,
                          outflow=d.outflow)

    def build_mesh(self, refine=1):
        m = self.mesh
        return build_mesh(self.domain_spec(), m.nx * refine, m.nz * refine,
                          k=m.order)

    def physics_params(self):
        p = self.physics
        rhe = GlenRheology(n_glen=p.n_glen, A_glen=p.A_glen, eps_reg=p.eps_reg)
        return PhysicsParams(rheology=rhe, rho=p.rho, g=p.g)

    def newton_config(self):
        f = self.forward
        return NewtonConfig(rel_tol=f.rel_tol, abs_tol=f.abs_tol,
                            max_iters=f.max_iters,
                            linear_solver=f.linear_solver)

    def newton_cg_config(self, continuation=None):
        i = self.inversion
        cont = i.continuation if continuation is None else continuation
        return NewtonCGConfig(grad_rtol=i.grad_rtol, max_newton=i.max_newton,
                              max_cg=i.max_cg, eta_max=i.eta_max,
                              gauss_newton=i.gauss_newton,
                              continuation=cont)

    def map_gamma(self):
        g = self.inversion.gamma
        return self.prior.gamma if g is None else g

    def qoi_specs(self):
        return [q.to_spec() for q in self.qois]


def parse_config(text):
    """Parse INI text (not a path) into a RunConfig; unknown keys error."""
    cp = ConfigParser(interpolation=None)
    cp.optionxform = str
    cp.read_string(text)
    sections = {}
    qois = []
    for sec in cp.sections():
        if sec.startswith("qoi:"):
            tag = sec[len("qoi:"):]
            if not tag:
                raise ConfigurationError("qoi section needs a tag: [qoi:<tag>]")
            vals = {"tag": tag}
            known = {f.name: f.default for f in fields(QoiSection)
                     if f.name != "tag"}
            for key, raw in cp.items(sec):
                if key not in known:
                    raise ConfigurationError(f"unknown key {key!r} in [{sec}]")
                default = 0.0 if ("qoi", key) in _FLOAT_OR_NONE else known[key]
                vals[key] = _parse_value("qoi", key, default, raw)
            qois.append(QoiSection(**vals))
            continue
        if sec not in SECTIONS:
            raise ConfigurationError(f"unknown config section [{sec}]")
        cls = SECTIONS[sec]
        known = {f.name: f.default for f in fields(cls)}
        vals = {}
        for key, raw in cp.items(sec):
            if key not in known:
                raise ConfigurationError(f"unknown key {key!r} in [{sec}]")
            default = 0.0 if (sec, key) in _FLOAT_OR_NONE else known[key]
            vals[key] = _parse_value(sec, key, default, raw)
        sections[sec] = cls(**vals)
    if any(s.startswith("qoi:") for s in cp.sections()):
        return RunConfig(sections, qois)
    return RunConfig(sections, None)


def load_config(path):
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def serialize_config(cfg):
    """Canonical INI text: fixed section and key order, exact floats."""
    lines = []
    for name, cls in SECTIONS.items():
        lines.append(f"[{name}]")
        sec = getattr(cfg, name)
        for f in fields(cls):
            lines.append(f"{f.name} = {_format_value(getattr(sec, f.name))}")
        lines.append("")
    for q in cfg.qois:
        lines.append(f"[qoi:{q.tag}]")
        for f in fields(QoiSection):
            if f.name == "tag":
                continue
            lines.append(f"{f.name} = {_format_value(getattr(q, f.name))}")
        lines.append("")
    return "\n".join(lines)


def with_seed(cfg, seed):
    """Copy of cfg with the master seed replaced (CLI --seed)."""
    new = RunConfig({n: getattr(cfg, n) for n in SECTIONS}, cfg.qois)
    new.observation = replace(cfg.observation, seed=int(seed))
    return new


def with_output(cfg, out_dir):
    new = RunConfig({n: getattr(cfg, n) for n in SECTIONS}, cfg.qois)
    new.output = replace(cfg.output, dir=str(out_dir))
    return new
