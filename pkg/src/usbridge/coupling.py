"""Static semi-couplings between consecutive snapshots.

The WFR cost ``-2 ln cos(min(|x - y| / 2 delta, pi/2))`` feeds an
optimal entropy-transport (OET) problem with KL marginal relaxations, solved
by generalized Sinkhorn scaling. The OET plan is then split into a
semi-coupling ``(gamma0, gamma1)`` whose entrywise ratio is the per-pair mass
change used as the growth target.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist
from scipy.special import logsumexp

RATIO_CLIP = (1e-8, 1e8)


class ParameterError(ValueError):
    pass


class CouplingError(RuntimeError):
    pass


@dataclass(frozen=True)
class PenaltyParams:
    """Diffusion ``nu``, growth penalty ``delta`` and branching rate ``lambda_branch``.

    Tied by ``delta = sqrt(nu / (2 lambda_branch))``; use :meth:`from_any` to
    fill in the third from two.
    """

    nu: float
    delta: float
    lambda_branch: float

    @classmethod
    def from_any(cls, nu=None, delta=None, lambda_branch=None) -> "PenaltyParams":
        given = [v is not None for v in (nu, delta, lambda_branch)]
        if sum(given) < 2:
            raise ParameterError("need two of nu, delta, lambda_branch")
        for name, v in (("nu", nu), ("delta", delta), ("lambda_branch", lambda_branch)):
            if v is not None and not v > 0:
                raise ParameterError(f"{name} must be positive")
        if delta is None:
            delta = math.sqrt(nu / (2 * lambda_branch))
        elif lambda_branch is None:
            lambda_branch = nu / (2 * delta**2)
        elif nu is None:
            nu = 2 * lambda_branch * delta**2
        elif not math.isclose(delta, math.sqrt(nu / (2 * lambda_branch)), rel_tol=1e-9):
            raise ParameterError("delta != sqrt(nu / (2 lambda_branch))")
        return cls(float(nu), float(delta), float(lambda_branch))


@dataclass
class OetSolution:
    gamma: np.ndarray
    objective: float
    iterations: int
    converged: bool
    eps: float
    err: float = 0.0


@dataclass
class SemiCoupling:
    """Paired plans; ``rows``/``cols`` index the full clouds (mini-batch subsets)."""

    gamma0: np.ndarray
    gamma1: np.ndarray
    rows: np.ndarray = None
    cols: np.ndarray = None
    threshold: float = 0.0
    eps: float = float("nan")
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        n0, n1 = self.gamma0.shape
        if self.rows is None:
            self.rows = np.arange(n0)
        if self.cols is None:
            self.cols = np.arange(n1)

    @property
    def support(self) -> np.ndarray:
        return self.gamma0 > self.threshold

    def mass_ratio(self) -> np.ndarray:
        """``gamma1 / gamma0`` on the support, clipped; NaN off support."""
        out = np.full(self.gamma0.shape, np.nan)
        s = self.support
        out[s] = np.clip(self.gamma1[s] / self.gamma0[s], *RATIO_CLIP)
        return out


def wfr_cost_matrix(X0, X1, delta) -> np.ndarray:
    """Entry (i, j) is ``-2 ln cos(min(|x_i - y_j| / (2 delta), pi/2))``; +inf past the cutoff."""
    if not delta > 0:
        raise ParameterError("delta must be positive")
    X0 = np.atleast_2d(np.asarray(X0, dtype=np.float64))
    X1 = np.atleast_2d(np.asarray(X1, dtype=np.float64))
    if X0.shape[1] != X1.shape[1]:
        raise ParameterError("point clouds differ in dimension")
    angle = cdist(X0, X1) / (2.0 * delta)
    cost = np.full(angle.shape, np.inf)
    inside = angle < np.pi / 2
    cost[inside] = -2.0 * np.log(np.cos(angle[inside]))
    return cost


def default_epsilon(cost) -> float:
    """0.01 times the median finite cost entry (floored to stay positive)."""
    finite = cost[np.isfinite(cost)]
    if finite.size == 0:
        return 1e-2
    med = float(np.median(finite))
    return 0.01 * med if med > 0 else 1e-2 * max(float(finite.max()), 1.0)


def _kl(p, q):
    """Generalised KL, sum p log(p/q) - p + q with 0 log 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if np.any((q == 0) & (p > 0)):
        return math.inf
    pos = p > 0
    return float(np.sum(p[pos] * np.log(p[pos] / q[pos])) - p.sum() + q.sum())


def oet_objective(gamma, mu0, mu1, cost, eps) -> float:
    """``<C, gamma> + KL(gamma 1 | mu0) + KL(gamma^T 1 | mu1) + eps sum(gamma log gamma - gamma)``."""
    pos = gamma > 0
    if np.any(~np.isfinite(cost[pos])):
        return math.inf
    transport = float(np.sum(cost[pos] * gamma[pos]))
    entropy = float(np.sum(gamma[pos] * (np.log(gamma[pos]) - 1.0)))
    return transport + _kl(gamma.sum(1), mu0) + _kl(gamma.sum(0), mu1) + eps * entropy


def solve_oet(mu0, mu1, cost, eps=None, max_iter=100_000, tol=1e-9, rho=1.0,
              translate=True, sinkhorn_warmup=500, newton_max_dim=4000) -> OetSolution:
    """Entropic OET via generalized Sinkhorn scaling.

    Updates are ``a <- (mu0 / K b)^(rho / (rho + eps))`` and the symmetric one
    for ``b``, with ``K = exp(-cost / eps)``. They run on log-potentials with
    kernel absorption: the working kernel is ``exp((F_i + G_j - C_ij) / eps)``
    and is rebuilt from the current potentials when the relative scalings leave
    ``[e^-50, e^50]``; rows whose sum underflows fall back to exact
    log-sum-exp. Each sweep ends with an exact step along the translation
    ``(f + c, g - c)`` of the dual.

    Scaling contracts like ``1 / (1 + eps / rho)`` per sweep, which stalls
    when ``eps`` is tiny against cross-cluster costs. For problems with at most
    ``newton_max_dim`` rows plus columns, scaling runs ``sinkhorn_warmup``
    sweeps and a damped Newton ascent on the concave dual finishes the job.
    Stops when the sup-norm change of the log-scalings is below ``tol``.
    """
    mu0 = np.asarray(mu0, dtype=np.float64).reshape(-1)
    mu1 = np.asarray(mu1, dtype=np.float64).reshape(-1)
    cost = np.asarray(cost, dtype=np.float64)
    if cost.shape != (mu0.size, mu1.size):
        raise ParameterError(f"cost shape {cost.shape} does not match marginals")
    if np.any(mu0 < 0) or np.any(mu1 < 0):
        raise ParameterError("marginals must be nonnegative")
    finite = np.isfinite(cost)
    if eps is None:
        eps = default_epsilon(cost)
    if not eps > 0:
        raise ParameterError("eps must be positive")
    gamma = np.zeros(cost.shape)
    r_ok = (mu0 > 0) & finite.any(axis=1)
    c_ok = (mu1 > 0) & finite.any(axis=0)
    if not (r_ok.any() and c_ok.any()):
        return OetSolution(gamma, float(mu0.sum() + mu1.sum()), 0, True, eps)

    C = cost[np.ix_(r_ok, c_ok)]
    lmu0, lmu1 = np.log(mu0[r_ok]), np.log(mu1[c_ok])
    tau = rho / (rho + eps)
    neg_c = np.where(np.isfinite(C), -C / eps, -np.inf)

    # log-scalings (potentials / eps); F, G are the absorbed reference
    f = np.zeros(C.shape[0])
    g = np.zeros(C.shape[1])
    F, G = f.copy(), g.copy()
    kernel = np.exp(neg_c)

    def rebuild():
        return np.exp(neg_c + F[:, None] + G[None, :])

    def lse_rows(g_):
        # log sum_j exp(g_j - C_ij / eps), i.e. log (K b)_i
        s = kernel @ np.exp(g_ - G)
        out = np.empty_like(s)
        ok = s > 0
        out[ok] = np.log(s[ok]) - F[ok]
        if not ok.all():
            out[~ok] = logsumexp(neg_c[~ok] + g_[None, :], axis=1)
        return out

    def lse_cols(f_):
        s = kernel.T @ np.exp(f_ - F)
        out = np.empty_like(s)
        ok = s > 0
        out[ok] = np.log(s[ok]) - G[ok]
        if not ok.all():
            out[~ok] = logsumexp(neg_c[:, ~ok] + f_[:, None], axis=0)
        return out

    converged = False
    err = math.inf
    it = 0
    n_sub = C.shape[0] + C.shape[1]
    use_newton = n_sub <= newton_max_dim
    budget = min(int(max_iter), sinkhorn_warmup) if use_newton else int(max_iter)
    while it < budget:
        it += 1
        if np.max(np.abs(g - G)) > 50:
            F, G = f.copy(), g.copy()
            kernel = rebuild()
        f_new = tau * (lmu0 - lse_rows(g))
        if np.max(np.abs(f_new - F)) > 50:
            F, G = f_new.copy(), g.copy()
            kernel = rebuild()
        g_new = tau * (lmu1 - lse_cols(f_new))
        if translate:
            # exact dual ascent along (f + c, g - c); removes the global mass mode
            A = logsumexp(lmu0 - eps * f_new / rho)
            B = logsumexp(lmu1 - eps * g_new / rho)
            shift = 0.5 * rho * (A - B) / eps
            f_new = f_new + shift
            g_new = g_new - shift
        err = max(np.max(np.abs(f_new - f)), np.max(np.abs(g_new - g)))
        f, g = f_new, g_new
        if not (np.all(np.isfinite(f)) and np.all(np.isfinite(g))):
            break
        if err < tol:
            converged = True
            break
    if not converged and use_newton and np.all(np.isfinite(f)) and np.all(np.isfinite(g)):
        f, g, converged, err, n_newton = _newton_dual(f, g, neg_c, lmu0, lmu1, eps, rho, tol,
                                                      max(int(max_iter) - it, 0))
        it += n_newton

    sub = np.exp(neg_c + f[:, None] + g[None, :])
    gamma[np.ix_(r_ok, c_ok)] = sub
    obj = oet_objective(gamma, mu0, mu1, cost, eps)
    return OetSolution(gamma, obj, it, converged and math.isfinite(obj), eps, float(err))


def _dual_value(f, g, neg_c, lmu0, lmu1, eps, rho):
    # dual objective divided by eps, in log-scaling coordinates
    with np.errstate(over="ignore"):
        plan = np.exp(neg_c + f[:, None] + g[None, :])
        p0 = np.exp(lmu0 - eps * f / rho)
        p1 = np.exp(lmu1 - eps * g / rho)
    val = -(rho / eps) * (p0.sum() + p1.sum()) - plan.sum()
    return val, plan, p0, p1


def _newton_dual(f, g, neg_c, lmu0, lmu1, eps, rho, tol, max_steps):
    """Damped Newton ascent on the entropic OET dual.

    The negative Hessian (scaled by 1/eps) is
    ``[[diag(r + eps p0 / rho), P], [P^T, diag(c + eps p1 / rho)]]`` with ``P`` the
    current plan, which is positive definite.
    """
    n0 = f.size
    val, plan, p0, p1 = _dual_value(f, g, neg_c, lmu0, lmu1, eps, rho)
    err = math.inf
    for step in range(1, max_steps + 1):
        r, c = plan.sum(axis=1), plan.sum(axis=0)
        grad = np.concatenate([p0 - r, p1 - c])
        hess = np.block([[np.diag(r + eps * p0 / rho), plan], [plan.T, np.diag(c + eps * p1 / rho)]])
        try:
            direction = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            return f, g, False, err, step
        t = 1.0
        while t > 1e-10:
            f_try, g_try = f + t * direction[:n0], g + t * direction[n0:]
            v_try, plan_try, p0_try, p1_try = _dual_value(f_try, g_try, neg_c, lmu0, lmu1, eps, rho)
            if np.isfinite(v_try) and v_try >= val - 1e-12 * abs(val):
                break
            t *= 0.5
        else:
            return f, g, False, err, step
        err = t * float(np.max(np.abs(direction)))
        f, g, val, plan, p0, p1 = f_try, g_try, v_try, plan_try, p0_try, p1_try
        if err < tol:
            return f, g, True, err, step
    return f, g, False, err, max_steps


def _diagonal_partner(i, n_from, n_to):
    if n_from <= 1:
        return 0
    return int(round(i * (n_to - 1) / (n_from - 1)))


def semi_coupling_from_oet(gamma, mu0, mu1, threshold=0.0) -> SemiCoupling:
    """Split an OET plan into ``(gamma0, gamma1)`` with exact marginals.

    ``gamma0 = gamma / rowsum * mu0`` and ``gamma1 = gamma / colsum * mu1``.
    A row with zero mass (a source farther than the cutoff from every target)
    puts all of ``mu0[i]`` on the column nearest the matrix diagonal with
    ``gamma1 = 0`` there, i.e. full death. A zero column is handled the same
    way with ``gamma0 = 0``, so that pair is off support and never sampled.
    """
    gamma = np.asarray(gamma, dtype=np.float64)
    mu0 = np.asarray(mu0, dtype=np.float64).reshape(-1)
    mu1 = np.asarray(mu1, dtype=np.float64).reshape(-1)
    n0, n1 = gamma.shape
    row = gamma.sum(axis=1)
    col = gamma.sum(axis=0)
    gamma0 = np.zeros_like(gamma)
    gamma1 = np.zeros_like(gamma)
    rpos, cpos = row > 0, col > 0
    gamma0[rpos] = gamma[rpos] / row[rpos, None] * mu0[rpos, None]
    gamma1[:, cpos] = gamma[:, cpos] / col[None, cpos] * mu1[None, cpos]
    dead_rows = np.flatnonzero(~rpos & (mu0 > 0))
    born_cols = np.flatnonzero(~cpos & (mu1 > 0))
    for i in dead_rows:
        gamma0[i, _diagonal_partner(i, n0, n1)] = mu0[i]
    for j in born_cols:
        gamma1[_diagonal_partner(j, n1, n0), j] = mu1[j]
    info = {"dead_rows": int(dead_rows.size), "born_cols": int(born_cols.size)}
    return SemiCoupling(gamma0, gamma1, threshold=threshold, info=info)


def product_plan(mu0, mu1) -> np.ndarray:
    """Independent coupling ``mu0 (x) mu1 / sum(mu1)``; the ablation baseline."""
    mu0 = np.asarray(mu0, dtype=np.float64)
    mu1 = np.asarray(mu1, dtype=np.float64)
    return np.outer(mu0, mu1) / mu1.sum()


def semi_coupling(X0, mu0, X1, mu1, delta, eps=None, max_iter=100_000, tol=1e-9,
                  method="oet", strict=True) -> SemiCoupling:
    """Cost, OET solve and split in one call. ``method='product'`` gives the ablation."""
    if method == "product":
        sc = semi_coupling_from_oet(product_plan(mu0, mu1), mu0, mu1)
        sc.info["method"] = "product"
        return sc
    if method != "oet":
        raise ParameterError(f"unknown coupling method {method!r}")
    cost = wfr_cost_matrix(X0, X1, delta)
    sol = solve_oet(mu0, mu1, cost, eps=eps, max_iter=max_iter, tol=tol)
    if strict and not sol.converged:
        raise CouplingError(
            f"OET scaling did not converge after {sol.iterations} iterations (err={sol.err:.3g})"
        )
    sc = semi_coupling_from_oet(sol.gamma, mu0, mu1)
    sc.eps = sol.eps
    sc.info.update(method="oet", iterations=sol.iterations, objective=sol.objective,
                   converged=sol.converged)
    return sc


def pair_sampler(semi: SemiCoupling, batch: int, rng: np.random.Generator):
    """Draw ``batch`` index pairs with probability proportional to ``gamma0``.

    Returns ``(i, j, m0, m1)`` with ``i``/``j`` indexing the full clouds,
    ``m0 = 1`` and ``m1 = gamma1 / gamma0`` (clipped).
    """
    w = np.where(semi.support, semi.gamma0, 0.0).ravel()
    total = w.sum()
    if not total > 0:
        raise CouplingError("semi-coupling has no mass to sample from")
    cdf = np.cumsum(w)
    flat = np.searchsorted(cdf, rng.random(batch) * cdf[-1], side="right")
    flat = np.minimum(flat, w.size - 1)
    n1 = semi.gamma0.shape[1]
    r, c = np.divmod(flat, n1)
    m1 = np.clip(semi.gamma1[r, c] / semi.gamma0[r, c], *RATIO_CLIP)
    return semi.rows[r], semi.cols[c], np.ones(batch), m1


def minibatch_semi_coupling(X0, mu0, X1, mu1, batch_size, delta, rng, n_batches=None,
                            eps=None, max_iter=100_000, tol=1e-9, method="oet"):
    """Yield semi-couplings over independent uniform sub-clouds.

    Sub-cloud weights are rescaled so both sides keep the full-problem mass
    ratio: each side's subsample total becomes ``frac * M`` with
    ``frac = b0 / n0`` the sampled fraction of the source.
    ``batch_size`` of 0 or at least both cloud sizes gives one full-batch coupling.
    """
    mu0 = np.asarray(mu0, dtype=np.float64)
    mu1 = np.asarray(mu1, dtype=np.float64)
    n0, n1 = len(mu0), len(mu1)
    if not batch_size or batch_size >= max(n0, n1):
        yield semi_coupling(X0, mu0, X1, mu1, delta, eps=eps, max_iter=max_iter, tol=tol, method=method)
        return
    if n_batches is None:
        n_batches = math.ceil(max(n0, n1) / batch_size)
    b0, b1 = min(batch_size, n0), min(batch_size, n1)
    frac = b0 / n0
    for _ in range(n_batches):
        i0 = np.sort(rng.choice(n0, b0, replace=False))
        i1 = np.sort(rng.choice(n1, b1, replace=False))
        w0 = mu0[i0] * (frac * mu0.sum() / mu0[i0].sum())
        w1 = mu1[i1] * (frac * mu1.sum() / mu1[i1].sum())
        sc = semi_coupling(X0[i0], w0, X1[i1], w1, delta, eps=eps, max_iter=max_iter, tol=tol,
                           method=method)
        sc.rows, sc.cols = i0, i1
        yield sc


def psi(g):
    """Unit growth penalty ``1 - sqrt(1 + g^2) + g asinh(g)``."""
    g = np.asarray(g, dtype=np.float64)
    return 1.0 - np.sqrt(1.0 + g * g) + g * np.arcsinh(g)


def penalty_psi(g, nu, lambda_branch):
    """``nu * lambda * psi(g / lambda)``; ~ ``nu g^2 / (2 lambda)`` for small g."""
    if not lambda_branch > 0:
        raise ParameterError("lambda_branch must be positive")
    return nu * lambda_branch * psi(np.asarray(g) / lambda_branch)


def penalty_psi_dual(h, nu, lambda_branch):
    """Legendre conjugate of :func:`penalty_psi`: ``nu * lambda * (cosh(h / nu) - 1)``."""
    if not lambda_branch > 0:
        raise ParameterError("lambda_branch must be positive")
    return nu * lambda_branch * (np.cosh(np.asarray(h) / nu) - 1.0)
