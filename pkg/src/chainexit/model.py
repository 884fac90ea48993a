"""Chain models: parsing, structural checks and sampled regularity checks."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
from scipy.stats import qmc

from . import expr as ex
from .expr import EvaluationError, ExprError, ExprSyntaxError, UnknownVariableError

__all__ = [
    "ModelError",
    "CascadeError",
    "DimensionError",
    "ChainModel",
    "parse_model",
    "load_model",
    "builtin_model",
    "BUILTIN_MODELS",
    "SampleSpec",
    "ValidationReport",
    "RankReport",
    "validate_regularity",
    "rank_chain_check",
]


class ModelError(ValueError):
    pass


class CascadeError(ModelError):
    pass


class DimensionError(ModelError):
    pass


def _field_error(where: str, err: Exception) -> ModelError:
    if isinstance(err, ExprSyntaxError):
        out = ModelError(f"{where}: {err}")
        out.line, out.col = err.line, err.col
        return out
    if isinstance(err, UnknownVariableError):
        return ModelError(f"{where}: {err}")
    return ModelError(f"{where}: {err}")


@dataclass(frozen=True)
class ChainModel:
    """Cascade of ``n`` subsystems with noise entering subsystem 1 only.

    ``drifts[i]`` holds the ``d`` component expressions of the drift of
    subsystem ``i + 1``; ``controls[i]`` the feedback law (or ``None``);
    ``sigma`` is a ``d x m`` nested tuple.  The closed-loop drifts, with every
    ``u[k]`` replaced by the feedback law, are in :attr:`hat`.
    """

    n: int
    d: int
    m: int
    lambda_floor: float
    drifts: tuple
    controls: tuple
    sigma: tuple
    name: str = "model"
    problem: dict | None = field(default=None, compare=False)
    hat: tuple = field(init=False, repr=False, compare=False)
    _hat_progs: tuple = field(init=False, repr=False, compare=False)
    _sigma_progs: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.n < 2:
            raise DimensionError(f"n must be >= 2, got {self.n}")
        if self.d < 1 or self.m < 1:
            raise DimensionError("d and m must be >= 1")
        if not self.lambda_floor > 0:
            raise ModelError("lambda_floor must be positive")
        if len(self.drifts) != self.n:
            raise DimensionError(f"expected {self.n} drifts, got {len(self.drifts)}")
        if len(self.controls) != self.n:
            raise DimensionError(f"expected {self.n} controls, got {len(self.controls)}")
        for i, f in enumerate(self.drifts, start=1):
            if len(f) != self.d:
                raise DimensionError(f"drift {i} has {len(f)} components, expected d={self.d}")
        if len(self.sigma) != self.d or any(len(r) != self.m for r in self.sigma):
            raise DimensionError(f"sigma must be {self.d}x{self.m}")
        hat = []
        for i, (f, kappa) in enumerate(zip(self.drifts, self.controls), start=1):
            _check_drift_vars(i, f, kappa, self.d)
            if kappa is not None:
                _check_control_vars(i, kappa, self.d)
            try:
                hat.append(tuple(ex.substitute_controls(c, kappa) for c in f))
            except UnknownVariableError as err:
                raise ModelError(f"drifts[{i - 1}]: {err}") from None
        for r, row in enumerate(self.sigma):
            for c, e in enumerate(row):
                for v in ex.variables(e):
                    if isinstance(v, ex.State) and (v.sub != 1 or v.comp >= self.d):
                        raise UnknownVariableError(
                            f"sigma[{r}][{c}] may only reference t and x1[0..{self.d - 1}], "
                            f"found {ex.to_string(v)}")
                    if isinstance(v, ex.Control):
                        raise UnknownVariableError(f"sigma[{r}][{c}] may not reference controls")
        object.__setattr__(self, "hat", tuple(hat))
        object.__setattr__(self, "_hat_progs",
                           tuple(tuple(ex.compile_expr(e, self.d) for e in f) for f in hat))
        object.__setattr__(self, "_sigma_progs",
                           tuple(tuple(ex.compile_expr(e, self.d) for e in row) for row in self.sigma))

    # ------------------------------------------------------------ evaluation

    @staticmethod
    def _slots(t, X):
        X = np.asarray(X, dtype=float)
        t = np.broadcast_to(np.asarray(t, dtype=float), X.shape[:-1])
        return [t] + [X[..., j] for j in range(X.shape[-1])]

    def drift(self, i: int, t, X) -> np.ndarray:
        """Closed-loop drift of subsystem ``i`` (1-based).

        ``X`` has shape ``(..., k*d)`` with ``k >= i`` subsystems stacked.
        """
        slots = self._slots(t, X)
        shape = slots[0].shape
        return np.stack([np.broadcast_to(p.evaluate(slots), shape) for p in self._hat_progs[i - 1]],
                        axis=-1)

    def drift_stack(self, ell: int, t, X) -> np.ndarray:
        """Stacked closed-loop drifts of subsystems ``1..ell``; shape ``(..., ell*d)``."""
        return np.concatenate([self.drift(i, t, X) for i in range(1, ell + 1)], axis=-1)

    def sigma_at(self, t, X1) -> np.ndarray:
        """``sigma(t, x1)`` with shape ``(..., d, m)``."""
        slots = self._slots(t, X1)
        shape = slots[0].shape
        rows = [np.stack([np.broadcast_to(p.evaluate(slots), shape) for p in row], axis=-1)
                for row in self._sigma_progs]
        return np.stack(rows, axis=-2)

    def diffusion_matrix(self, t, X1) -> np.ndarray:
        s = self.sigma_at(t, X1)
        return s @ np.swapaxes(s, -1, -2)

    def kernel_tables(self, ell: int):
        """Concatenated programs for the path kernels.

        Program ``(i-1)*d + k`` is the ``k``-th closed-loop drift component of
        subsystem ``i``; program ``ell*d + r*m + c`` is ``sigma[r][c]``.
        """
        progs = [p for f in self._hat_progs[:ell] for p in f]
        progs += [p for row in self._sigma_progs for p in row]
        code, starts, lens, consts = [], [], [], []
        pos = 0
        for p in progs:
            c = p.code.copy()
            c[1::2] = np.where(c[0::2] == 0, c[1::2] + len(consts), c[1::2])
            starts.append(pos)
            lens.append(len(c) // 2)
            code.append(c)
            consts.extend(p.consts.tolist())
            pos += len(c)
        stack = max(p.max_stack for p in progs)
        return (np.concatenate(code).astype(np.int32), np.asarray(starts, dtype=np.int32),
                np.asarray(lens, dtype=np.int32), np.asarray(consts, dtype=np.float64), stack)

    def to_config(self) -> dict:
        cfg = {
            "name": self.name,
            "n": self.n,
            "d": self.d,
            "m": self.m,
            "lambda_floor": self.lambda_floor,
            "drifts": [[ex.to_string(e) for e in f] for f in self.drifts],
            "controls": [None if k is None else [ex.to_string(e) for e in k] for k in self.controls],
            "sigma": [[ex.to_string(e) for e in row] for row in self.sigma],
        }
        if self.problem is not None:
            cfg["problem"] = self.problem
        return cfg


def _check_drift_vars(i: int, f: Sequence, kappa, d: int):
    for k, e in enumerate(f):
        for v in ex.variables(e):
            if isinstance(v, ex.State):
                if v.sub > i:
                    raise CascadeError(
                        f"drifts[{i - 1}][{k}] references {ex.to_string(v)}: drift {i} may only "
                        f"depend on subsystems 1..{i}")
                if v.comp >= d:
                    raise UnknownVariableError(
                        f"drifts[{i - 1}][{k}] references {ex.to_string(v)} but d={d}")
            elif isinstance(v, ex.Control):
                if kappa is None or v.comp >= len(kappa):
                    raise UnknownVariableError(
                        f"drifts[{i - 1}][{k}] references u[{v.comp}] but control {i} has "
                        f"{0 if kappa is None else len(kappa)} component(s)")


def _check_control_vars(i: int, kappa: Sequence, d: int):
    for k, e in enumerate(kappa):
        for v in ex.variables(e):
            if isinstance(v, ex.State) and v.sub == i and v.comp < d:
                continue
            raise UnknownVariableError(
                f"controls[{i - 1}][{k}] may only reference x{i}[0..{d - 1}] "
                f"(stationary feedback), found {ex.to_string(v)}")


def _parse_bundle(field, where: str) -> tuple:
    try:
        if isinstance(field, str):
            return ex.parse_bundle(field)
        if isinstance(field, list) and all(isinstance(s, str) for s in field):
            return tuple(ex.parse(s) for s in field)
    except ExprError as err:
        raise _field_error(where, err) from None
    raise ModelError(f"{where}: expected a string or an array of strings")


_REQUIRED = ("n", "d", "m", "lambda_floor", "drifts", "controls", "sigma")


def parse_model(config_text: str, name: str | None = None) -> ChainModel:
    """Build a :class:`ChainModel` from a JSON configuration document."""
    try:
        cfg = json.loads(config_text)
    except json.JSONDecodeError as err:
        out = ModelError(f"invalid JSON: {err.msg} at line {err.lineno}, column {err.colno}")
        out.line, out.col = err.lineno, err.colno
        raise out from None
    if not isinstance(cfg, dict):
        raise ModelError("model config must be a JSON object")
    missing = [k for k in _REQUIRED if k not in cfg]
    if missing:
        raise ModelError(f"missing keys: {', '.join(missing)}")
    n, d, m = cfg["n"], cfg["d"], cfg["m"]
    for key in ("n", "d", "m"):
        if not isinstance(cfg[key], int) or isinstance(cfg[key], bool):
            raise ModelError(f"{key} must be an integer")
    if not isinstance(cfg["drifts"], list) or not isinstance(cfg["controls"], list):
        raise ModelError("drifts and controls must be arrays")
    drifts = tuple(_parse_bundle(f, f"drifts[{i}]") for i, f in enumerate(cfg["drifts"]))
    controls = tuple(None if k is None else _parse_bundle(k, f"controls[{i}]")
                     for i, k in enumerate(cfg["controls"]))
    sig = cfg["sigma"]
    if isinstance(sig, str):
        items = _parse_bundle(sig, "sigma")
        if len(items) == 1 and d == m:
            zero = ex.Num(0.0)
            sigma = tuple(tuple(items[0] if r == c else zero for c in range(m)) for r in range(d))
        elif len(items) == d * m:
            sigma = tuple(tuple(items[r * m:(r + 1) * m]) for r in range(d))
        else:
            raise DimensionError(f"sigma: got {len(items)} entries for a {d}x{m} matrix")
    elif isinstance(sig, list) and all(isinstance(r, list) for r in sig):
        sigma = tuple(_parse_bundle(r, f"sigma[{i}]") for i, r in enumerate(sig))
    else:
        raise ModelError("sigma must be a string or an array of arrays of strings")
    return ChainModel(n=n, d=d, m=m, lambda_floor=float(cfg["lambda_floor"]), drifts=drifts,
                      controls=controls, sigma=sigma, name=name or cfg.get("name", "model"),
                      problem=cfg.get("problem"))


def load_model(path_or_name: str) -> ChainModel:
    """Load a model from a JSON file, or one of :data:`BUILTIN_MODELS` by name."""
    key = path_or_name.removesuffix(".json")
    import os

    if not os.path.exists(path_or_name) and key in BUILTIN_MODELS:
        return builtin_model(key)
    with open(path_or_name, encoding="utf-8") as fh:
        text = fh.read()
    return parse_model(text, name=os.path.splitext(os.path.basename(path_or_name))[0])


_UNIT_PROBLEM = {
    "ell": 2,
    "domain": {"kind": "box", "lower": [-1.0], "upper": [1.0]},
    "horizon": [0.0, 1.0],
    "init": [0.0, 0.0],
}

BUILTIN_MODELS: dict[str, dict[str, Any]] = {
    # Integrated Brownian motion: x2 is the running integral of sqrt(eps) W.
    "lin2": {"n": 2, "d": 1, "m": 1, "lambda_floor": 1.0, "drifts": ["0", "x1[0]"],
             "controls": [None, None], "sigma": "1", "problem": _UNIT_PROBLEM},
    "ou2": {"n": 2, "d": 1, "m": 1, "lambda_floor": 1.0, "drifts": ["-x1[0]", "x1[0]"],
            "controls": [None, None], "sigma": "1", "problem": _UNIT_PROBLEM},
    # x1 rests at 0, x2 = 2t leaves (-1, 1) at t = 0.5 through the outflow side.
    "det-exit": {"n": 2, "d": 1, "m": 1, "lambda_floor": 1.0, "drifts": ["-x1[0]", "x1[0] + 2"],
                 "controls": [None, None], "sigma": "1", "problem": _UNIT_PROBLEM},
}


def builtin_model(name: str) -> ChainModel:
    try:
        cfg = BUILTIN_MODELS[name]
    except KeyError:
        raise ModelError(f"unknown built-in model {name!r}; choose from {sorted(BUILTIN_MODELS)}") from None
    return parse_model(json.dumps(cfg), name=name)


# ------------------------------------------------------------ sampled checks

@dataclass(frozen=True)
class SampleSpec:
    """Axis box for ``(t, x^1, ..., x^n)`` and the number of quasi-random points.

    ``lower``/``upper`` cover the stacked state (length ``n*d``), or a single
    value broadcast to every coordinate.  Sobol points are unscrambled, so the
    lower corner is always sampled; ``extra`` rows ``(t, x...)`` are appended.
    """

    t_range: tuple = (0.0, 1.0)
    lower: Sequence[float] | float = -1.0
    upper: Sequence[float] | float = 1.0
    count: int = 4096
    extra: tuple = ()

    def points(self, nd: int) -> tuple[np.ndarray, np.ndarray]:
        lo = np.broadcast_to(np.asarray(self.lower, dtype=float), (nd,))
        hi = np.broadcast_to(np.asarray(self.upper, dtype=float), (nd,))
        sob = qmc.Sobol(d=nd + 1, scramble=False)
        if self.count & (self.count - 1) == 0:
            u = sob.random_base2(int(np.log2(self.count)))
        else:
            u = sob.random(self.count)
        t = self.t_range[0] + u[:, 0] * (self.t_range[1] - self.t_range[0])
        X = lo + u[:, 1:] * (hi - lo)
        if self.extra:
            ext = np.asarray(self.extra, dtype=float).reshape(len(self.extra), nd + 1)
            t = np.concatenate([t, ext[:, 0]])
            X = np.vstack([X, ext[:, 1:]])
        return t, X


@dataclass
class ValidationReport:
    max_drift_derivative: list  # per subsystem, max |d f_i / d (t, x)| over samples
    min_sigma_eig: float
    worst_point: tuple  # (t, x...) where the eigenvalue minimum is attained
    lambda_floor: float
    passed: bool


def _fd_jacobian(fn, t, X, cols, h=1e-6):
    """Central differences of ``fn(t, X)`` (shape (P, k)) w.r.t. X[:, cols]."""
    out = []
    for c in cols:
        step = h * np.maximum(1.0, np.abs(X[:, c]))
        Xp, Xm = X.copy(), X.copy()
        Xp[:, c] += step
        Xm[:, c] -= step
        out.append((fn(t, Xp) - fn(t, Xm)) / (2 * step[:, None]))
    return np.stack(out, axis=-1)  # (P, k, len(cols))


def validate_regularity(model: ChainModel, samples: SampleSpec | None = None) -> ValidationReport:
    """Sampled bounded-derivative and uniform-ellipticity checks."""
    samples = samples or SampleSpec()
    nd = model.n * model.d
    t, X = samples.points(nd)
    d = model.d
    max_der = []
    for i in range(1, model.n + 1):
        try:
            model.drift(i, t, X)
        except EvaluationError as err:
            raise EvaluationError(f"drift {i}: {err}") from None
        jac = _fd_jacobian(lambda tt, XX: model.drift(i, tt, XX), t, X, range(i * d))
        h = 1e-6 * np.maximum(1.0, np.abs(t))
        dt = (model.drift(i, t + h, X) - model.drift(i, t - h, X)) / (2 * h[:, None])
        max_der.append(float(max(np.max(np.abs(jac)), np.max(np.abs(dt)))))
    a = model.diffusion_matrix(t, X[:, :d])
    eig = np.linalg.eigvalsh(a)[:, 0]
    k = int(np.argmin(eig))
    lam = float(eig[k])
    return ValidationReport(
        max_drift_derivative=max_der,
        min_sigma_eig=lam,
        worst_point=(float(t[k]),) + tuple(float(v) for v in X[k]),
        lambda_floor=model.lambda_floor,
        passed=bool(lam >= model.lambda_floor * (1 - 1e-12)),
    )


@dataclass
class RankReport:
    pair_min_rank: dict  # (j, j+1) -> min rank of d f_{j+1} / d x^j
    flagged: dict  # (j, j+1) -> list of sample points with rank < d
    first_subsystem_min_rank: dict  # ell -> min rank of d f_ell / d x^1
    d: int

    @property
    def passed(self) -> bool:
        return all(r >= self.d for r in self.pair_min_rank.values())


def numerical_rank(J: np.ndarray) -> np.ndarray:
    """Rank of each matrix in a ``(P, d, d)`` stack.

    Singular values below ``1e3 * d * eps * s_max`` count as zero.
    """
    s = np.linalg.svd(J, compute_uv=False)
    d = J.shape[-1]
    tol = 1e3 * d * np.finfo(float).eps * s[:, :1]
    return np.sum(s > tol, axis=-1)


def rank_chain_check(model: ChainModel, samples: SampleSpec | None = None,
                     max_flagged: int = 20) -> RankReport:
    samples = samples or SampleSpec()
    d = model.d
    t, X = samples.points(model.n * d)
    pair_min, flagged, first = {}, {}, {}
    for j in range(1, model.n):
        fn = lambda tt, XX, i=j + 1: model.drift(i, tt, XX)
        J = _fd_jacobian(fn, t, X, range((j - 1) * d, j * d))
        r = numerical_rank(J)
        pair_min[(j, j + 1)] = int(r.min())
        bad = np.flatnonzero(r < d)[:max_flagged]
        flagged[(j, j + 1)] = [(float(t[b]),) + tuple(float(v) for v in X[b]) for b in bad]
        J1 = _fd_jacobian(fn, t, X, range(d))
        first[j + 1] = int(numerical_rank(J1).min())
    return RankReport(pair_min, flagged, first, d)
