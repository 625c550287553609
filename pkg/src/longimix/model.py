"""Trajectory models: design matrices, pooled regression, and the
fixed+random-effects model fitted by EM maximum likelihood.

The statistical model per patient i is

    y_i = X_i beta + Z_i b_i + eps_i,   b_i ~ N(0, Psi),  eps_i ~ N(0, sigma2 I)

where X_i stacks the basis rows at the patient's observation times and Z_i
is the subset of columns carrying random effects.  ``beta`` is the
population (general) model; the per-patient posterior means of b_i are the
patient-specified deviations.

Fitting maximizes the Gaussian marginal likelihood.  Each iteration does a
GLS update of beta at the current (Psi, sigma2), then one EM step on
(Psi, sigma2) with beta held fixed; both stages are ascent steps, so the
marginal log-likelihood is non-decreasing across iterations.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .cohort import Cohort, FeatureSeries
from .errors import (
    DivergenceError,
    InsufficientDataError,
    NumericalError,
    RankDeficientError,
    ValidationError,
)

BASIS_TERMS = {
    "linear": ("intercept", "t"),
    "poly2": ("intercept", "t", "t2"),
}
_BASIS_ALIASES = {"linear": "linear", "poly2": "poly2", "polynomial2": "poly2"}

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class ModelSpec:
    """Basis choice, random-effect terms, and time normalization.

    ``time_scale=None`` means "resolve to the cohort's protocol horizon at
    fit time"; fitted models always carry a concrete scale.  Normalized time
    is t_tilde = t / time_scale, which keeps the quadratic Gram matrix well
    conditioned; predictions still take raw weeks.
    """

    basis: str = "linear"
    random_terms: tuple[str, ...] | None = None  # None -> all basis terms
    time_scale: float | None = None

    def __post_init__(self):
        canonical = _BASIS_ALIASES.get(self.basis)
        if canonical is None:
            raise ValidationError(f"unknown basis: {self.basis!r}")
        object.__setattr__(self, "basis", canonical)
        if self.random_terms is not None:
            terms = BASIS_TERMS[canonical]
            extra = [t for t in self.random_terms if t not in terms]
            if extra:
                raise ValidationError(f"random terms {extra} not in basis {canonical!r}")
            if len(self.random_terms) == 0:
                raise ValidationError("random_terms must be non-empty")
            ordered = tuple(t for t in terms if t in self.random_terms)
            object.__setattr__(self, "random_terms", ordered)
        if self.time_scale is not None and not (math.isfinite(self.time_scale) and self.time_scale > 0):
            raise ValidationError(f"time_scale must be positive, got {self.time_scale!r}")

    @property
    def terms(self) -> tuple[str, ...]:
        return BASIS_TERMS[self.basis]

    @property
    def n_terms(self) -> int:
        return len(self.terms)

    @property
    def random_indices(self) -> tuple[int, ...]:
        wanted = self.terms if self.random_terms is None else self.random_terms
        return tuple(i for i, t in enumerate(self.terms) if t in wanted)

    def resolved(self, cohort: Cohort) -> "ModelSpec":
        """Concrete copy: time_scale defaults to the protocol horizon,
        random_terms to all basis terms."""
        scale = self.time_scale if self.time_scale is not None else cohort.protocol_horizon
        terms = self.random_terms if self.random_terms is not None else self.terms
        return replace(self, time_scale=scale, random_terms=terms)

    def to_json_dict(self) -> dict:
        return {
            "basis": self.basis,
            "random_terms": list(self.random_terms) if self.random_terms is not None else None,
            "time_scale": self.time_scale,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "ModelSpec":
        rt = d.get("random_terms")
        return cls(
            basis=d["basis"],
            random_terms=tuple(rt) if rt is not None else None,
            time_scale=d.get("time_scale"),
        )


def design_matrix(spec: ModelSpec, times) -> np.ndarray:
    """Basis rows at the given times: [1, t~] or [1, t~, t~^2]."""
    if spec.time_scale is None:
        raise ValidationError("spec has no concrete time_scale; call spec.resolved(cohort) first")
    t = np.asarray(times, dtype=float).ravel() / spec.time_scale
    if not np.isfinite(t).all():
        raise ValidationError("times must be finite")
    cols = [np.ones_like(t), t]
    if spec.basis == "poly2":
        cols.append(t * t)
    return np.column_stack(cols)


def design_row(spec: ModelSpec, time: float) -> np.ndarray:
    return design_matrix(spec, [time])[0]


@dataclass(frozen=True, eq=False)
class FittedFixedModel:
    """Pooled least-squares fit: one curve for the whole cohort."""

    spec: ModelSpec
    beta: np.ndarray
    noise_variance: float
    n_obs: int


@dataclass(frozen=True, eq=False)
class FittedMixedModel:
    """Population coefficients plus per-patient random-effect posteriors.

    ``beta`` is the general model shared by the group; ``blups[pid]`` is the
    posterior mean of patient pid's random effect (its specified model is
    beta + blup on the random columns).  ``loglik_path`` keeps the
    per-iteration marginal log-likelihoods; it is diagnostic only and is not
    serialized.
    """

    spec: ModelSpec
    beta: np.ndarray
    psi: np.ndarray
    sigma2: float
    blups: dict[str, np.ndarray]
    loglik: float
    iterations: int
    converged: bool
    beta_cov: np.ndarray
    loglik_path: np.ndarray = field(repr=False, default=None)


def _patient_blocks(cohort: Cohort, feature: str, spec: ModelSpec):
    """Per-patient (pid, X, Z, y) for patients carrying the feature."""
    ridx = list(spec.random_indices)
    blocks = []
    for p in cohort.with_feature(feature):
        s = p.series[feature]
        X = design_matrix(spec, s.times())
        blocks.append((p.patient_id, X, X[:, ridx], s.values()))
    return blocks


def _pooled(blocks):
    X = np.concatenate([b[1] for b in blocks], axis=0)
    y = np.concatenate([b[3] for b in blocks], axis=0)
    return X, y


class _Stacked:
    """Patient blocks grouped by observation count for vectorized solves."""

    def __init__(self, blocks):
        by_n: dict[int, list] = {}
        for b in blocks:
            by_n.setdefault(len(b[3]), []).append(b)
        self.groups = []
        for n in sorted(by_n):
            grp = by_n[n]
            self.groups.append({
                "pids": [b[0] for b in grp],
                "X": np.stack([b[1] for b in grp]),
                "Z": np.stack([b[2] for b in grp]),
                "y": np.stack([b[3] for b in grp]),
            })
        self.n_patients = len(blocks)
        self.n_obs = sum(len(b[3]) for b in blocks)


def _cholesky_with_jitter(V: np.ndarray) -> np.ndarray:
    """Stacked Cholesky; one retry with a 1e-10 * mean-trace jitter."""
    try:
        return np.linalg.cholesky(V)
    except np.linalg.LinAlgError:
        n = V.shape[-1]
        jitter = 1e-10 * np.trace(V, axis1=-2, axis2=-1).mean() / n
        try:
            return np.linalg.cholesky(V + jitter * np.eye(n))
        except np.linalg.LinAlgError:
            raise NumericalError("covariance block not positive definite after jitter") from None


def _factor(stacked: _Stacked, psi: np.ndarray, sigma2: float):
    """Whitened per-group quantities for the current (Psi, sigma2).

    For each group: L = chol(V), U = L^-1 X, w = L^-1 y, Wz = L^-1 Z and the
    total log|V|.  Everything downstream (GLS, likelihood, score, posterior
    moments) is assembled from these.
    """
    out = []
    logdet = 0.0
    for g in stacked.groups:
        Z = g["Z"]
        n = Z.shape[1]
        V = np.einsum("gnq,qr,gmr->gnm", Z, psi, Z)
        V[:, np.arange(n), np.arange(n)] += sigma2
        L = _cholesky_with_jitter(V)
        U = np.linalg.solve(L, g["X"])
        w = np.linalg.solve(L, g["y"][..., None])[..., 0]
        Wz = np.linalg.solve(L, Z)
        logdet += 2.0 * float(np.log(np.diagonal(L, axis1=1, axis2=2)).sum())
        out.append({"grp": g, "U": U, "w": w, "Wz": Wz})
    return out, logdet


def _gls(factors):
    XtVX = None
    XtVy = None
    for f in factors:
        U, w = f["U"], f["w"]
        a = np.einsum("gnp,gnq->pq", U, U)
        b = np.einsum("gnp,gn->p", U, w)
        XtVX = a if XtVX is None else XtVX + a
        XtVy = b if XtVy is None else XtVy + b
    try:
        beta = np.linalg.solve(XtVX, XtVy)
        beta_cov = np.linalg.inv(XtVX)
    except np.linalg.LinAlgError:
        raise NumericalError("GLS normal matrix is singular") from None
    return beta, beta_cov


def _whitened_residuals(factors, beta):
    """v = L^-1 (y - X beta) per group, reusing the whitened blocks."""
    return [f["w"] - f["U"] @ beta for f in factors]


def _loglik_from_factors(factors, logdet, beta, n_obs):
    quad = sum(float((v * v).sum()) for v in _whitened_residuals(factors, beta))
    return -0.5 * (n_obs * LOG_2PI + logdet + quad)


def _psd_clip(mat: np.ndarray) -> np.ndarray:
    sym = 0.5 * (mat + mat.T)
    evals, evecs = np.linalg.eigh(sym)
    clipped = (evecs * np.clip(evals, 0.0, None)) @ evecs.T
    return 0.5 * (clipped + clipped.T)


def _validate_params(spec: ModelSpec, beta, psi, sigma2):
    p = spec.n_terms
    q = len(spec.random_indices)
    beta = np.asarray(beta, dtype=float)
    psi = np.asarray(psi, dtype=float)
    if beta.shape != (p,):
        raise ValidationError(f"beta must have shape ({p},), got {beta.shape}")
    if psi.shape != (q, q):
        raise ValidationError(f"psi must have shape ({q}, {q}), got {psi.shape}")
    if not np.allclose(psi, psi.T, atol=1e-12 * max(1.0, float(np.abs(psi).max()))):
        raise ValidationError("psi must be symmetric")
    tol = 1e-10 * max(float(np.trace(psi)), 1e-300)
    if float(np.linalg.eigvalsh(psi).min()) < -tol:
        raise ValidationError("psi must be positive semi-definite")
    if not (np.isfinite(sigma2) and sigma2 > 0):
        raise ValidationError(f"sigma2 must be > 0, got {sigma2!r}")
    return beta, 0.5 * (psi + psi.T), float(sigma2)


def fit_fixed(cohort: Cohort, feature: str, spec: ModelSpec) -> FittedFixedModel:
    """Pooled least squares over every observation of the feature."""
    spec = spec.resolved(cohort)
    blocks = _patient_blocks(cohort, feature, spec)
    if not blocks:
        raise InsufficientDataError(f"no observations of {feature!r} in the cohort")
    X, y = _pooled(blocks)
    n, p = X.shape
    if n < p:
        raise InsufficientDataError(f"{n} observations cannot identify {p} coefficients")
    beta, _, rank, _ = np.linalg.lstsq(X, y, rcond=None)
    if rank < p:
        raise RankDeficientError(
            f"design matrix has rank {rank} < {p} (e.g. too few distinct times)"
        )
    resid = y - X @ beta
    rss = float(resid @ resid)
    noise_variance = rss / (n - p) if n > p else 0.0
    return FittedFixedModel(spec=spec, beta=beta, noise_variance=noise_variance, n_obs=n)


def marginal_loglik(cohort: Cohort, feature: str, spec: ModelSpec,
                    beta, psi, sigma2) -> float:
    """Gaussian marginal log-likelihood of the mixed model at fixed parameters.

    l = -1/2 sum_i [ n_i log 2pi + log|V_i| + r_i' V_i^-1 r_i ],
    V_i = Z_i Psi Z_i' + sigma2 I, r_i = y_i - X_i beta.
    """
    spec = spec.resolved(cohort)
    beta, psi, sigma2 = _validate_params(spec, beta, psi, sigma2)
    blocks = _patient_blocks(cohort, feature, spec)
    if not blocks:
        raise InsufficientDataError(f"no observations of {feature!r} in the cohort")
    stacked = _Stacked(blocks)
    factors, logdet = _factor(stacked, psi, sigma2)
    return _loglik_from_factors(factors, logdet, beta, stacked.n_obs)


def beta_score(cohort: Cohort, feature: str, spec: ModelSpec,
               beta, psi, sigma2) -> np.ndarray:
    """Gradient of the marginal log-likelihood in beta: sum_i X_i' V_i^-1 r_i."""
    spec = spec.resolved(cohort)
    beta, psi, sigma2 = _validate_params(spec, beta, psi, sigma2)
    blocks = _patient_blocks(cohort, feature, spec)
    if not blocks:
        raise InsufficientDataError(f"no observations of {feature!r} in the cohort")
    stacked = _Stacked(blocks)
    factors, _ = _factor(stacked, psi, sigma2)
    score = np.zeros(spec.n_terms)
    for f, v in zip(factors, _whitened_residuals(factors, beta)):
        score += np.einsum("gnp,gn->p", f["U"], v)
    return score


def gls_beta(cohort: Cohort, feature: str, spec: ModelSpec, psi, sigma2) -> np.ndarray:
    """Generalized least-squares coefficients at fixed (Psi, sigma2)."""
    spec = spec.resolved(cohort)
    _, psi, sigma2 = _validate_params(spec, np.zeros(spec.n_terms), psi, sigma2)
    blocks = _patient_blocks(cohort, feature, spec)
    if not blocks:
        raise InsufficientDataError(f"no observations of {feature!r} in the cohort")
    factors, _ = _factor(_Stacked(blocks), psi, sigma2)
    beta, _ = _gls(factors)
    return beta


def fit_mixed(cohort: Cohort, feature: str, spec: ModelSpec,
              max_iter: int = 500, rel_tol: float = 1e-8) -> FittedMixedModel:
    """Maximum-likelihood fit of the mixed model by EM.

    Initialization is deterministic (OLS beta, OLS residual variance,
    Psi = 0.1 sigma2 I).  Each iteration recomputes beta by GLS, evaluates
    the marginal log-likelihood, takes the random-effect posteriors, and
    applies the closed-form (Psi, sigma2) updates; the log-likelihood
    sequence is non-decreasing.  Stops when the relative change drops below
    ``rel_tol``; hitting ``max_iter`` is reported via ``converged=False``,
    not an error.
    """
    spec = spec.resolved(cohort)
    blocks = _patient_blocks(cohort, feature, spec)
    if len(blocks) < 2:
        raise InsufficientDataError("mixed fit needs at least 2 patients with the feature")
    if max(len(b[3]) for b in blocks) < 2:
        raise InsufficientDataError("mixed fit needs at least one patient with >= 2 observations")
    X, y = _pooled(blocks)
    n, p = X.shape
    if n < p:
        raise InsufficientDataError(f"{n} observations cannot identify {p} coefficients")
    beta, _, rank, _ = np.linalg.lstsq(X, y, rcond=None)
    if rank < p:
        raise RankDeficientError(f"pooled design has rank {rank} < {p}")
    q = len(spec.random_indices)

    rss = float(np.sum((y - X @ beta) ** 2))
    # sigma2 must stay positive: exactly collinear data would otherwise zero
    # it and make V singular.
    sigma2_floor = 1e-12 * float(np.mean(y * y)) + 1e-300
    sigma2 = max(rss / (n - p) if n > p else 0.0, sigma2_floor)
    psi = 0.1 * sigma2 * np.eye(q)

    stacked = _Stacked(blocks)
    m = stacked.n_patients
    zt_z = [np.einsum("gnq,gnr->gqr", g["Z"], g["Z"]) for g in stacked.groups]

    ll_path = []
    ll_prev = None
    converged = False
    iterations = 0
    blups_flat = None
    beta_cov = None

    for _ in range(max_iter):
        iterations += 1
        factors, logdet = _factor(stacked, psi, sigma2)
        beta, beta_cov = _gls(factors)
        resid_w = _whitened_residuals(factors, beta)
        ll = -0.5 * (stacked.n_obs * LOG_2PI + logdet
                     + sum(float((v * v).sum()) for v in resid_w))
        if not math.isfinite(ll):
            raise DivergenceError(f"non-finite log-likelihood at iteration {iterations}")
        ll_path.append(ll)

        # E-step at the just-updated beta.
        b_sum = np.zeros((q, q))
        s_sum = 0.0
        blups_flat = []
        for f, v, ztz in zip(factors, resid_w, zt_z):
            g, Wz = f["grp"], f["Wz"]
            bhat = np.einsum("gnq,gn->gq", Wz, v) @ psi          # Psi Z'V^-1 r
            M = np.einsum("gnq,gnr->gqr", Wz, Wz)                # Z'V^-1 Z
            post_cov = psi - np.einsum("qr,grs,st->gqt", psi, M, psi)
            b_sum += np.einsum("gq,gr->qr", bhat, bhat) + post_cov.sum(axis=0)
            e = g["y"] - np.einsum("gnp,p->gn", g["X"], beta) \
                - np.einsum("gnq,gq->gn", g["Z"], bhat)
            s_sum += float((e * e).sum()) + float(np.einsum("gqr,gqr->", ztz, post_cov))
            blups_flat.extend(zip(g["pids"], bhat))

        if ll_prev is not None and abs(ll - ll_prev) <= rel_tol * max(1.0, abs(ll_prev)):
            converged = True
            break
        ll_prev = ll

        psi = _psd_clip(b_sum / m)
        sigma2 = max(s_sum / stacked.n_obs, sigma2_floor)

    blups = {pid: np.array(b) for pid, b in sorted(blups_flat)}
    return FittedMixedModel(
        spec=spec,
        beta=beta,
        psi=psi,
        sigma2=sigma2,
        blups=blups,
        loglik=ll_path[-1],
        iterations=iterations,
        converged=converged,
        beta_cov=beta_cov,
        loglik_path=np.array(ll_path),
    )


def blup(model: FittedMixedModel, history: FeatureSeries) -> np.ndarray:
    """Posterior mean of a new patient's random effect given its history:
    b = Psi Z' (Z Psi Z' + sigma2 I)^-1 (y - X beta)."""
    X = design_matrix(model.spec, history.times())
    Z = X[:, list(model.spec.random_indices)]
    r = history.values() - X @ model.beta
    n = len(r)
    V = Z @ model.psi @ Z.T + model.sigma2 * np.eye(n)
    L = _cholesky_with_jitter(V[None])[0]
    v = np.linalg.solve(L, r)
    return model.psi @ (np.linalg.solve(L, Z).T @ v)


def predict(model, times, b=None):
    """Predicted feature value(s) at the given time(s) in raw weeks.

    Fixed models evaluate x' beta.  Mixed models add z' b when a random
    effect is supplied (it defaults to zero, i.e. the population curve).
    Scalar time in, float out; sequence in, array out.
    """
    scalar = np.isscalar(times) or np.ndim(times) == 0
    X = design_matrix(model.spec, [times] if scalar else times)
    yhat = X @ model.beta
    if b is not None:
        if isinstance(model, FittedFixedModel):
            raise ValidationError("fixed model takes no random effect")
        b = np.asarray(b, dtype=float)
        q = len(model.spec.random_indices)
        if b.shape != (q,):
            raise ValidationError(f"random effect must have shape ({q},), got {b.shape}")
        yhat = yhat + X[:, list(model.spec.random_indices)] @ b
    return float(yhat[0]) if scalar else yhat


def model_to_json_dict(model) -> dict:
    """JSON form of a fitted model; floats survive round-trip exactly."""
    if isinstance(model, FittedMixedModel):
        return {
            "schema_version": 1,
            "model_type": "mixed",
            "spec": model.spec.to_json_dict(),
            "beta": [float(v) for v in model.beta],
            "psi": [float(v) for v in model.psi.ravel()],
            "sigma2": float(model.sigma2),
            "loglik": float(model.loglik),
            "iterations": int(model.iterations),
            "converged": bool(model.converged),
            "blups": {pid: [float(v) for v in b] for pid, b in sorted(model.blups.items())},
            "beta_cov": [float(v) for v in model.beta_cov.ravel()],
        }
    if isinstance(model, FittedFixedModel):
        return {
            "schema_version": 1,
            "model_type": "fixed",
            "spec": model.spec.to_json_dict(),
            "beta": [float(v) for v in model.beta],
            "noise_variance": float(model.noise_variance),
            "n_obs": int(model.n_obs),
        }
    raise ValidationError(f"not a fitted model: {type(model).__name__}")


def model_from_json_dict(d: dict):
    spec = ModelSpec.from_json_dict(d["spec"])
    if d.get("model_type") == "mixed":
        q = len(spec.random_indices)
        p = spec.n_terms
        return FittedMixedModel(
            spec=spec,
            beta=np.array(d["beta"], dtype=float),
            psi=np.array(d["psi"], dtype=float).reshape(q, q),
            sigma2=float(d["sigma2"]),
            blups={pid: np.array(b, dtype=float) for pid, b in d["blups"].items()},
            loglik=float(d["loglik"]),
            iterations=int(d["iterations"]),
            converged=bool(d["converged"]),
            beta_cov=np.array(d["beta_cov"], dtype=float).reshape(p, p),
        )
    if d.get("model_type") == "fixed":
        return FittedFixedModel(
            spec=spec,
            beta=np.array(d["beta"], dtype=float),
            noise_variance=float(d["noise_variance"]),
            n_obs=int(d["n_obs"]),
        )
    raise ValidationError(f"unknown model_type: {d.get('model_type')!r}")


def save_model(model, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model_to_json_dict(model), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_model(path):
    with open(path, encoding="utf-8") as fh:
        return model_from_json_dict(json.load(fh))
