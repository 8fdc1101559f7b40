"""Problem data model, validation, and JSON serialization.

All types are immutable values after construction (arrays are marked
read-only), so they can be shared freely across concurrent workers.
"""

import json
import warnings
from dataclasses import dataclass, field, fields, replace

import numpy as np

PSD_TOL = 1e-9

_TRUNCATION_MODES = ("certified", "l0_threshold", "manual")


class DimensionMismatch(ValueError):
    pass


class NotPositiveDefinite(ValueError):
    pass


class NegativeParameter(ValueError):
    pass


class ParseError(ValueError):
    pass


class UnsupportedFeature(ValueError):
    pass


class ValidationError(ValueError):
    """Raised by check(); carries the full violation list."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(str(v) for v in self.violations))


def _freeze(a, name):
    arr = np.array(a, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class LtiSystem:
    """State-space triple (A, B, C) of a continuous LTI plant."""

    a_matrix: np.ndarray
    b_matrix: np.ndarray
    c_matrix: np.ndarray

    def __post_init__(self):
        a = _freeze(self.a_matrix, "A")
        b = _freeze(self.b_matrix, "B")
        c = _freeze(self.c_matrix, "C")
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise DimensionMismatch(f"A must be square, got {a.shape}")
        n = a.shape[0]
        if b.ndim != 2 or b.shape[0] != n:
            raise DimensionMismatch(f"B must have {n} rows, got {b.shape}")
        if c.ndim != 2 or c.shape[1] != n:
            raise DimensionMismatch(f"C must have {n} columns, got {c.shape}")
        object.__setattr__(self, "a_matrix", a)
        object.__setattr__(self, "b_matrix", b)
        object.__setattr__(self, "c_matrix", c)

    @property
    def n(self):
        return self.a_matrix.shape[0]

    @property
    def m(self):
        return self.b_matrix.shape[1]

    @property
    def p(self):
        return self.c_matrix.shape[0]

    def state_feedback(self):
        """True when the measured output is the full state (C = I)."""
        return self.p == self.n and np.array_equal(self.c_matrix, np.eye(self.n))


@dataclass(frozen=True)
class StructurePattern:
    """Boolean mask over gain entries; True entries may be nonzero."""

    mask: np.ndarray

    def __post_init__(self):
        m = np.array(self.mask, dtype=bool)
        if m.ndim != 2:
            raise DimensionMismatch(f"mask must be 2-D, got shape {m.shape}")
        m.setflags(write=False)
        object.__setattr__(self, "mask", m)

    @classmethod
    def full(cls, m, p):
        return cls(np.ones((m, p), dtype=bool))

    def apply(self, k):
        """Zero out the entries the pattern forbids."""
        return np.where(self.mask, np.asarray(k, dtype=float), 0.0)

    def count(self):
        return int(np.sum(self.mask))


@dataclass(frozen=True)
class InputBound:
    """Sup-norm bound on the control input, anchored at the initial state."""

    norm_kind: str
    u_max: float
    x0: np.ndarray

    def __post_init__(self):
        if self.norm_kind not in ("two", "inf"):
            raise ValueError(f"norm_kind must be 'two' or 'inf', got {self.norm_kind!r}")
        object.__setattr__(self, "u_max", float(self.u_max))
        object.__setattr__(self, "x0", _freeze(np.atleast_1d(self.x0).ravel(), "x0"))


@dataclass(frozen=True)
class SynthesisProblem:
    """Plant plus weights, sparsity regularizer, noise covariance, and pattern."""

    system: LtiSystem
    q_weight: np.ndarray
    r_weight: np.ndarray
    lam: float = 0.0
    noise_cov: np.ndarray = None
    pattern: StructurePattern = None
    input_bound: InputBound = None

    def __post_init__(self):
        n, m, p = self.system.n, self.system.m, self.system.p
        object.__setattr__(self, "q_weight", _freeze(self.q_weight, "Q"))
        object.__setattr__(self, "r_weight", _freeze(self.r_weight, "R"))
        nc = self.noise_cov if self.noise_cov is not None else np.eye(n)
        object.__setattr__(self, "noise_cov", _freeze(nc, "N"))
        pat = self.pattern if self.pattern is not None else StructurePattern.full(m, p)
        object.__setattr__(self, "pattern", pat)
        object.__setattr__(self, "lam", float(self.lam))


@dataclass(frozen=True)
class AdmmOptions:
    """Knobs for the outer splitting loop and the inner conic solver."""

    penalty_rho: float = 100.0
    reweight_delta: float = 1e-4
    eps_star: float = 1e-4
    max_outer: int = 1000
    inner_tol: float = 1e-6
    inner_max: int = 5000
    strict_eps: float = 1e-7
    truncation_mode: str = "certified"
    manual_xi: float = None

    def __post_init__(self):
        for name in ("penalty_rho", "reweight_delta", "eps_star", "inner_tol", "strict_eps"):
            if not getattr(self, name) > 0:
                raise NegativeParameter(f"{name} must be positive")
        for name in ("max_outer", "inner_max"):
            if not getattr(self, name) > 0:
                raise NegativeParameter(f"{name} must be a positive integer")
        if not self.eps_star < 1:
            raise NegativeParameter("eps_star must be < 1")
        if self.truncation_mode not in _TRUNCATION_MODES:
            raise ValueError(f"truncation_mode must be one of {_TRUNCATION_MODES}")
        if self.truncation_mode == "manual" and (
            self.manual_xi is None or not self.manual_xi >= 0
        ):
            raise NegativeParameter("manual truncation requires manual_xi >= 0")


def _min_eig(m):
    return float(np.linalg.eigvalsh(0.5 * (m + m.T))[0])


def validate(problem):
    """Check every type invariant of a SynthesisProblem.

    Returns the problem unchanged when everything holds; otherwise a list
    of violations, each an exception instance naming the offending field.
    """
    violations = []
    sys_ = problem.system
    n, m, p = sys_.n, sys_.m, sys_.p

    def expect_shape(name, arr, shape):
        if arr.shape != shape:
            violations.append(
                DimensionMismatch(f"{name}: expected shape {shape}, got {arr.shape}")
            )
            return False
        return True

    if expect_shape("q_weight", problem.q_weight, (n, n)):
        if not np.allclose(problem.q_weight, problem.q_weight.T):
            violations.append(NotPositiveDefinite("q_weight: not symmetric"))
        elif _min_eig(problem.q_weight) < -PSD_TOL:
            violations.append(NotPositiveDefinite("q_weight: not positive semidefinite"))
    if expect_shape("r_weight", problem.r_weight, (m, m)):
        if not np.allclose(problem.r_weight, problem.r_weight.T):
            violations.append(NotPositiveDefinite("r_weight: not symmetric"))
        elif _min_eig(problem.r_weight) <= PSD_TOL:
            violations.append(NotPositiveDefinite("r_weight: not positive definite"))
    if expect_shape("noise_cov", problem.noise_cov, (n, n)):
        if not np.allclose(problem.noise_cov, problem.noise_cov.T):
            violations.append(NotPositiveDefinite("noise_cov: not symmetric"))
        elif _min_eig(problem.noise_cov) <= PSD_TOL:
            violations.append(NotPositiveDefinite("noise_cov: not positive definite"))
    expect_shape("pattern", problem.pattern.mask, (m, p))
    if problem.lam < 0:
        violations.append(NegativeParameter("lambda: must be nonnegative"))
    if problem.input_bound is not None:
        ib = problem.input_bound
        if not ib.u_max > 0:
            violations.append(NegativeParameter("input_bound.u_max: must be positive"))
        if ib.x0.shape != (n,):
            violations.append(
                DimensionMismatch(f"input_bound.x0: expected shape ({n},), got {ib.x0.shape}")
            )
    return problem if not violations else violations


def check(problem):
    """validate() that raises ValidationError instead of returning a list."""
    result = validate(problem)
    if isinstance(result, list):
        raise ValidationError(result)
    return result


_KNOWN_KEYS = {"A", "B", "C", "Q", "R", "N", "lambda", "pattern", "input_bound", "options"}
_KNOWN_BOUND_KEYS = {"norm", "u_max", "x0"}


def _parse_matrix(obj, name):
    if not isinstance(obj, list) or not obj or not all(isinstance(r, list) for r in obj):
        raise ParseError(f"matrix {name!r} must be a non-empty array of arrays")
    widths = {len(r) for r in obj}
    if len(widths) != 1:
        raise ParseError(f"matrix {name!r} has ragged rows (widths {sorted(widths)})")
    try:
        return np.array(obj, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ParseError(f"matrix {name!r}: {exc}") from exc


def load_problem(text):
    """Parse a problem file (JSON) into a validated SynthesisProblem.

    Missing Q/R/N default to identity, lambda to 0, and the pattern to
    all-ones.  Unknown keys are warned about and ignored.
    """
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    if not isinstance(data, dict):
        raise ParseError("problem file must be a JSON object")

    unknown = set(data) - _KNOWN_KEYS
    if unknown:
        warnings.warn(f"ignoring unknown problem keys: {sorted(unknown)}")

    for key in ("A", "B", "C"):
        if key not in data:
            raise ParseError(f"missing required matrix {key!r}")
    a = _parse_matrix(data["A"], "A")
    b = _parse_matrix(data["B"], "B")
    c = _parse_matrix(data["C"], "C")
    system = LtiSystem(a, b, c)
    n, m, p = system.n, system.m, system.p

    q = _parse_matrix(data["Q"], "Q") if "Q" in data else np.eye(n)
    r = _parse_matrix(data["R"], "R") if "R" in data else np.eye(m)
    ncov = _parse_matrix(data["N"], "N") if "N" in data else np.eye(n)
    lam = float(data.get("lambda", 0.0))
    if "pattern" in data:
        pattern = StructurePattern(np.array(_parse_matrix(data["pattern"], "pattern"), dtype=bool))
    else:
        pattern = StructurePattern.full(m, p)

    bound = None
    if "input_bound" in data and data["input_bound"] is not None:
        ib = data["input_bound"]
        if not isinstance(ib, dict):
            raise ParseError("input_bound must be an object")
        if "y_max" in ib:
            raise UnsupportedFeature("output-norm bounds (y_max) are not supported")
        unknown = set(ib) - _KNOWN_BOUND_KEYS
        if unknown:
            warnings.warn(f"ignoring unknown input_bound keys: {sorted(unknown)}")
        try:
            bound = InputBound(
                norm_kind=ib.get("norm", "two"),
                u_max=float(ib["u_max"]),
                x0=np.array(ib.get("x0", np.zeros(n)), dtype=float),
            )
        except KeyError as exc:
            raise ParseError(f"input_bound missing field {exc}") from exc

    problem = SynthesisProblem(
        system=system, q_weight=q, r_weight=r, lam=lam,
        noise_cov=ncov, pattern=pattern, input_bound=bound,
    )
    return check(problem)


def load_options(text):
    """Parse the optional "options" block of a problem file into AdmmOptions."""
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    opts = data.get("options", {}) if isinstance(data, dict) else {}
    known = {f.name for f in fields(AdmmOptions)}
    unknown = set(opts) - known
    if unknown:
        warnings.warn(f"ignoring unknown option keys: {sorted(unknown)}")
    kwargs = {k: v for k, v in opts.items() if k in known}
    return AdmmOptions(**kwargs)


def serialize(problem, options=None):
    """Serialize a problem (and optionally options) back to file text.

    Floats go through repr, so a load/serialize round trip is lossless.
    """
    data = {
        "A": problem.system.a_matrix.tolist(),
        "B": problem.system.b_matrix.tolist(),
        "C": problem.system.c_matrix.tolist(),
        "Q": problem.q_weight.tolist(),
        "R": problem.r_weight.tolist(),
        "N": problem.noise_cov.tolist(),
        "lambda": problem.lam,
        "pattern": problem.pattern.mask.astype(int).tolist(),
    }
    if problem.input_bound is not None:
        ib = problem.input_bound
        data["input_bound"] = {"norm": ib.norm_kind, "u_max": ib.u_max, "x0": ib.x0.tolist()}
    if options is not None:
        data["options"] = {
            f.name: getattr(options, f.name)
            for f in fields(AdmmOptions)
            if getattr(options, f.name) is not None
        }
    return json.dumps(data, indent=2, sort_keys=True)


def with_lambda(problem, lam):
    """Copy of the problem with a different sparsity weight."""
    return replace(problem, lam=float(lam))
