"""Robust (unbalanced, entropic) optimal-transport labeling of deformation fields.

The reference cloud ``P`` is matched to the target ``Q`` by the plan that
minimizes::

    sum_ij pi_ij/2 |p_i - q_j|^2 + tau^2 KL(pi 1 | alpha) + tau^2 KL(pi' 1 | beta)
        + sigma^2 KL(pi | alpha x beta)

with generalized (mass-aware) KL divergences. The plan is found by
log-domain alternating scaling; per-vertex displacements are barycentric
projections of the plan rows and are smoothed into a continuous field by a
Gaussian-kernel spline.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import linalg
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from .errors import DegenerateRow, IllConditioned, InvalidArgument
from .geometry import LabeledCloud

# Dense plans above this many entries are refused (~400 MB per float64 matrix).
MAX_PLAN_ENTRIES = 50_000_000
TAU_DIAG_FRACTION = 1.0
SIGMA_DIAG_FRACTION = 0.01
DEFAULT_MAX_ITER = 1000
DEFAULT_TOL = 1e-6
DEFAULT_RIDGE = 1e-8
BANDWIDTH_NN_FACTOR = 4.0
_EVAL_CHUNK = 2048
_REFINE_STEPS = 6


@dataclass(frozen=True)
class OTParams:
    """Solver settings. ``tau_sq`` may be ``inf`` for exact marginals."""

    tau_sq: float
    sigma_sq: float
    max_iter: int = DEFAULT_MAX_ITER
    tol: float = DEFAULT_TOL
    eps_scaling: bool = True

    def __post_init__(self):
        if not self.tau_sq >= 0:
            raise InvalidArgument("tau_sq must be non-negative")
        if not (self.sigma_sq > 0 and math.isfinite(self.sigma_sq)):
            raise InvalidArgument("sigma_sq must be positive and finite")
        if int(self.max_iter) < 1:
            raise InvalidArgument("max_iter must be at least 1")
        if not self.tol > 0:
            raise InvalidArgument("tol must be positive")

    @property
    def rho(self) -> float:
        """Marginal exponent tau^2 / (tau^2 + sigma^2)."""
        if math.isinf(self.tau_sq):
            return 1.0
        return self.tau_sq / (self.tau_sq + self.sigma_sq)

    @classmethod
    def for_clouds(cls, *clouds: LabeledCloud, **overrides) -> "OTParams":
        """Scale-aware defaults: tau and sigma as fractions of the joint bbox diagonal.

        A reach much below the diagonal lets interior points settle on their
        near neighbours instead of their true partners, which shrinks the
        recovered displacements.
        """
        pts = np.vstack([c.points for c in clouds])
        diag = float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0))) or 1.0
        kw = dict(tau_sq=(TAU_DIAG_FRACTION * diag) ** 2, sigma_sq=(SIGMA_DIAG_FRACTION * diag) ** 2)
        kw.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**kw)

    def to_dict(self) -> dict:
        return {"tau_sq": self.tau_sq, "sigma_sq": self.sigma_sq, "max_iter": int(self.max_iter),
                "tol": self.tol, "eps_scaling": self.eps_scaling}


@dataclass(eq=False)
class AssignmentMatrix:
    pi: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    iterations_used: int
    converged: bool
    final_update: float = float("nan")
    objective: float = float("nan")
    log_pi: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def shape(self):
        return self.pi.shape

    def row_marginal(self) -> np.ndarray:
        return self.pi.sum(axis=1)

    def col_marginal(self) -> np.ndarray:
        return self.pi.sum(axis=0)

    def diagnostics(self) -> dict:
        return {"iterations_used": int(self.iterations_used), "converged": bool(self.converged),
                "final_update": float(self.final_update), "objective": float(self.objective)}


def cost_matrix(P: np.ndarray, Q: np.ndarray) -> np.ndarray:
    """Half squared Euclidean distances, computed from coordinate differences."""
    return 0.5 * cdist(P, Q, "sqeuclidean")


def _logsumexp(x: np.ndarray, axis: int) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out = np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True)) + m
    return np.squeeze(out, axis=axis)


def _gen_kl(a: np.ndarray, b: np.ndarray) -> float:
    # sum a log(a/b) - a + b, with 0 log 0 = 0
    pos = a > 0
    return float(np.sum(a[pos] * np.log(a[pos] / b[pos])) - a.sum() + b.sum())


def ot_objective(pi, C, alpha, beta, tau_sq, sigma_sq) -> float:
    """Value of the robust transport objective at plan ``pi``."""
    pi = np.asarray(pi, dtype=np.float64)
    val = float(np.sum(pi * C))
    if not math.isinf(tau_sq):
        val += tau_sq * (_gen_kl(pi.sum(axis=1), alpha) + _gen_kl(pi.sum(axis=0), beta))
    val += sigma_sq * _gen_kl(pi.ravel(), np.outer(alpha, beta).ravel())
    return val


def _weights(w, n, what):
    if w is None:
        return np.full(n, 1.0 / n)
    w = np.asarray(w, dtype=np.float64).reshape(-1)
    if w.shape[0] != n or not np.all(w > 0) or not np.all(np.isfinite(w)):
        raise InvalidArgument(f"{what} must hold {n} strictly positive weights")
    return w / w.sum()


def _rho(tau_sq: float, eps: float) -> float:
    return 1.0 if math.isinf(tau_sq) else tau_sq / (tau_sq + eps)


class _ScalingState:
    """Dual potentials split as ``f = f_abs + eps log u`` (same for g).

    The kernel ``K = exp((f_abs + g_abs - C) / eps)`` is rebuilt whenever the
    scalings drift past ``_ABSORB``; between rebuilds each half-step is a
    dense matrix-vector product.
    """

    def __init__(self, C, a, b):
        self.C, self.a, self.b = C, a, b
        self.f_abs = np.zeros(C.shape[0])
        self.g_abs = np.zeros(C.shape[1])
        self.f = self.f_abs.copy()
        self.g = self.g_abs.copy()

    def _kernel(self, eps):
        return np.exp((self.f_abs[:, None] + self.g_abs[None, :] - self.C) / eps)

    def _absorb(self):
        self.f_abs = self.f.copy()
        self.g_abs = self.g.copy()

    def run(self, eps, rho, max_iter, tol):
        self._absorb()
        K = self._kernel(eps)
        lam = rho * eps
        a, b = self.a, self.b
        update = math.inf
        it = 0
        for it in range(1, max_iter + 1):
            kv = K @ (b * np.exp((self.g - self.g_abs) / eps))
            f_new = rho * self.f_abs - lam * np.log(kv)
            ku = K.T @ (a * np.exp((f_new - self.f_abs) / eps))
            g_new = rho * self.g_abs - lam * np.log(ku)
            if not (np.all(np.isfinite(f_new)) and np.all(np.isfinite(g_new))):
                # kernel underflow: fall back to an exact log-domain half-step
                f_new = -lam * _logsumexp(np.log(b)[None, :] + (self.g[None, :] - self.C) / eps, axis=1)
                g_new = -lam * _logsumexp(np.log(a)[:, None] + (f_new[:, None] - self.C) / eps, axis=0)
                self.f_abs, self.g_abs = f_new.copy(), g_new.copy()
                K = self._kernel(eps)
            update = max(float(np.max(np.abs(f_new - self.f))), float(np.max(np.abs(g_new - self.g))))
            self.f, self.g = f_new, g_new
            if update < tol:
                return it, update, True
            if (np.max(np.abs(self.f - self.f_abs)) > _ABSORB * eps
                    or np.max(np.abs(self.g - self.g_abs)) > _ABSORB * eps):
                self._absorb()
                K = self._kernel(eps)
        return it, update, False


_ABSORB = 30.0
_EPS_STAGE_ITERS = 50
_EPS_STAGE_FACTOR = 4.0


def solve_assignment(
    reference: LabeledCloud,
    target: LabeledCloud,
    params: OTParams,
    alpha=None,
    beta=None,
) -> AssignmentMatrix:
    """Robust optimal-transport plan from ``reference`` to ``target``.

    Parameters
    ----------
    reference, target : LabeledCloud
        Clouds with N and M points.
    params : OTParams
        Marginal relaxation ``tau_sq`` and entropic blur ``sigma_sq`` (both mm^2).
    alpha, beta : array_like, optional
        Point weights; uniform when omitted.

    Returns
    -------
    AssignmentMatrix
        ``converged`` is False if the dual updates did not fall below
        ``params.tol`` within ``params.max_iter`` iterations at the target blur.

    Notes
    -----
    With ``params.eps_scaling`` the blur is annealed geometrically from the
    largest cost down to ``sigma_sq``, carrying the dual potentials between
    stages; only the final stage counts toward convergence.
    """
    N, M = len(reference), len(target)
    if N == 0 or M == 0:
        raise InvalidArgument("both clouds must be non-empty")
    if N * M > MAX_PLAN_ENTRIES:
        raise InvalidArgument(f"dense plan of {N}x{M} exceeds the {MAX_PLAN_ENTRIES} entry limit")
    a = _weights(alpha, N, "alpha")
    b = _weights(beta, M, "beta")
    C = cost_matrix(reference.points, target.points)
    eps = params.sigma_sq

    state = _ScalingState(C, a, b)
    total_iter = 0
    if params.eps_scaling:
        eps_stage = max(float(C.max()), eps)
        while eps_stage > eps * 1.0001:
            it, _, _ = state.run(eps_stage, _rho(params.tau_sq, eps_stage), _EPS_STAGE_ITERS, params.tol)
            total_iter += it
            eps_stage = max(eps_stage / _EPS_STAGE_FACTOR, eps)
    it, update, converged = state.run(eps, params.rho, int(params.max_iter), params.tol)
    total_iter += it

    log_pi = np.log(a)[:, None] + np.log(b)[None, :] + (state.f[:, None] + state.g[None, :] - C) / eps
    pi = np.exp(log_pi)
    obj = ot_objective(pi, C, a, b, params.tau_sq, params.sigma_sq)
    return AssignmentMatrix(pi=pi, alpha=a, beta=b, iterations_used=total_iter,
                            converged=converged, final_update=update, objective=obj,
                            log_pi=log_pi)


# -- displacements ----------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DeformationSamples:
    anchors: np.ndarray
    vectors: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.anchors, dtype=np.float64).reshape(-1, 3)
        v = np.asarray(self.vectors, dtype=np.float64).reshape(-1, 3)
        if a.shape != v.shape:
            raise InvalidArgument("anchors and vectors must have equal lengths")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(v))):
            raise InvalidArgument("deformation samples must be finite")
        a.setflags(write=False)
        v.setflags(write=False)
        object.__setattr__(self, "anchors", a)
        object.__setattr__(self, "vectors", v)

    def __len__(self):
        return self.anchors.shape[0]


def displacement(plan: AssignmentMatrix, reference: LabeledCloud, target: LabeledCloud) -> DeformationSamples:
    """Barycentric displacement of each reference point under the plan rows."""
    P, Q = reference.points, target.points
    if plan.pi.shape != (len(P), len(Q)):
        raise InvalidArgument(f"plan shape {plan.pi.shape} does not match clouds ({len(P)}, {len(Q)})")
    if plan.log_pi is not None:
        row_max = plan.log_pi.max(axis=1)
        bad = np.flatnonzero(~np.isfinite(row_max))
        if bad.size:
            raise DegenerateRow(int(bad[0]))
        w = np.exp(plan.log_pi - row_max[:, None])
    else:
        w = np.asarray(plan.pi, dtype=np.float64)
    sums = w.sum(axis=1)
    bad = np.flatnonzero(~(sums > 0))
    if bad.size:
        raise DegenerateRow(int(bad[0]))
    return DeformationSamples(P, (w @ Q) / sums[:, None] - P)


# -- Gaussian-kernel spline field ---------------------------------------------


@dataclass(frozen=True, eq=False)
class RBFField:
    centers: np.ndarray
    coefficients: np.ndarray
    bandwidth: float
    ridge: float = 0.0

    def __post_init__(self):
        c = np.asarray(self.centers, dtype=np.float64).reshape(-1, 3)
        k = np.asarray(self.coefficients, dtype=np.float64).reshape(-1, 3)
        if c.shape != k.shape:
            raise InvalidArgument("need one coefficient row per center")
        if not (self.bandwidth > 0 and math.isfinite(self.bandwidth)):
            raise InvalidArgument("bandwidth must be positive")
        if not self.ridge >= 0:
            raise InvalidArgument("ridge must be non-negative")
        if not np.all(np.isfinite(k)) or not np.all(np.isfinite(c)):
            raise InvalidArgument("field centers and coefficients must be finite")
        c.setflags(write=False)
        k.setflags(write=False)
        object.__setattr__(self, "centers", c)
        object.__setattr__(self, "coefficients", k)
        object.__setattr__(self, "bandwidth", float(self.bandwidth))
        object.__setattr__(self, "ridge", float(self.ridge))

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
        out = np.empty_like(x)
        scale = -1.0 / (2.0 * self.bandwidth ** 2)
        for s in range(0, len(x), _EVAL_CHUNK):
            Kq = np.exp(scale * cdist(x[s:s + _EVAL_CHUNK], self.centers, "sqeuclidean"))
            out[s:s + _EVAL_CHUNK] = Kq @ self.coefficients
        return out

    def to_json(self) -> dict:
        return {"bandwidth_mm": self.bandwidth, "ridge": self.ridge,
                "centers": self.centers.tolist(), "coefficients": self.coefficients.tolist()}

    @classmethod
    def from_json(cls, obj) -> "RBFField":
        return cls(np.asarray(obj["centers"], dtype=np.float64).reshape(-1, 3),
                   np.asarray(obj["coefficients"], dtype=np.float64).reshape(-1, 3),
                   float(obj["bandwidth_mm"]), float(obj.get("ridge", 0.0)))


def gaussian_gram(X: np.ndarray, bandwidth: float) -> np.ndarray:
    return np.exp(-cdist(X, X, "sqeuclidean") / (2.0 * bandwidth ** 2))


def default_bandwidth(anchors: np.ndarray) -> float:
    """Four times the mean nearest-neighbour spacing of the anchors."""
    anchors = np.asarray(anchors, dtype=np.float64)
    if len(anchors) < 2:
        return 1.0
    d, _ = cKDTree(anchors).query(anchors, k=2)
    nn = float(np.mean(d[:, 1]))
    return BANDWIDTH_NN_FACTOR * nn if nn > 0 else 1.0


def fit_rbf_field(samples: DeformationSamples, bandwidth: Optional[float] = None,
                  ridge: float = DEFAULT_RIDGE) -> RBFField:
    """Solve ``(K + ridge I) C = V`` for the Gaussian-kernel spline coefficients.

    Raises
    ------
    IllConditioned
        If the system is singular or the residual bound
        ``|(K + ridge I) C - V|_inf < 1e-8 max(1, |V|_inf)`` cannot be met.
    """
    if bandwidth is None:
        bandwidth = default_bandwidth(samples.anchors)
    if not bandwidth > 0:
        raise InvalidArgument("bandwidth must be positive")
    if not ridge >= 0:
        raise InvalidArgument("ridge must be non-negative")
    X, V = samples.anchors, samples.vectors
    if len(X) == 0:
        raise InvalidArgument("cannot fit a field to zero samples")
    if ridge == 0 and len(np.unique(X, axis=0)) < len(X):
        raise IllConditioned("duplicate anchors make the interpolation system singular")
    A = gaussian_gram(X, bandwidth)
    A[np.diag_indices_from(A)] += ridge
    try:
        factor = linalg.cho_factor(A, lower=True, check_finite=False)
        solve = lambda rhs: linalg.cho_solve(factor, rhs, check_finite=False)
    except linalg.LinAlgError:
        try:
            lu = linalg.lu_factor(A, check_finite=False)
        except (linalg.LinAlgError, ValueError) as exc:
            raise IllConditioned(f"kernel system is singular: {exc}") from None
        solve = lambda rhs: linalg.lu_solve(lu, rhs, check_finite=False)
    bound = 1e-8 * max(1.0, float(np.max(np.abs(V))) if V.size else 1.0)
    # residuals in extended precision let refinement get below the float64 rounding floor
    A_ext = A.astype(np.longdouble)
    V_ext = V.astype(np.longdouble)
    C = solve(V)
    resid = np.inf
    for _ in range(_REFINE_STEPS):
        if not np.all(np.isfinite(C)):
            break
        r = V_ext - A_ext @ C.astype(np.longdouble)
        resid = float(np.max(np.abs(r)))
        if resid < bound:
            break
        C = C + solve(r.astype(np.float64))
    if not (resid < bound and np.all(np.isfinite(C))):
        raise IllConditioned(
            f"kernel solve residual {resid:.3g} exceeds {bound:.3g}; increase ridge or reduce bandwidth")
    return RBFField(X, C, bandwidth, ridge)


def eval_field(field: RBFField, query: LabeledCloud) -> DeformationSamples:
    return DeformationSamples(query.points, field(query.points))


def deform_template(template: LabeledCloud, field: RBFField) -> LabeledCloud:
    """Move every template point by the field; labels travel with their points."""
    return template.with_points(template.points + field(template.points))


# -- io ---------------------------------------------------------------------


def write_samples(samples: DeformationSamples, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["px", "py", "pz", "vx", "vy", "vz"])
        for p, v in zip(samples.anchors, samples.vectors):
            w.writerow([f"{x:.6f}" for x in (*p, *v)])


def read_samples(path) -> DeformationSamples:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader)]
        if header != ["px", "py", "pz", "vx", "vy", "vz"]:
            raise InvalidArgument(f"{path}: unexpected header {header}")
        rows = np.array([[float(c) for c in r] for r in reader if r], dtype=np.float64).reshape(-1, 6)
    return DeformationSamples(rows[:, :3], rows[:, 3:])


def write_field(field: RBFField, path) -> None:
    Path(path).write_text(json.dumps(field.to_json()), encoding="utf-8")


def read_field(path) -> RBFField:
    return RBFField.from_json(json.loads(Path(path).read_text(encoding="utf-8")))
