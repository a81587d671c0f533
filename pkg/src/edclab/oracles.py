"""Numerical checks of the Gaussian-mixture matching theory.

Q is a 1-D Gaussian mixture (per-component matching), P the single Gaussian
with the same mean and variance (global matching). Entropies and KL are
computed by adaptive quadrature; every report carries its error estimate.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import integrate
from scipy.special import logsumexp, xlogy

QUAD_EPSABS = 1e-9
QUAD_EPSREL = 1e-9
DOMAIN_SIGMAS = 8.0


class OracleError(RuntimeError):
    pass


@dataclass(frozen=True)
class GmmSpec:
    weights: tuple[float, ...]
    means: tuple[float, ...]
    vars: tuple[float, ...]

    def __post_init__(self):
        w, m, v = (np.asarray(a, dtype=float) for a in (self.weights, self.means, self.vars))
        if not (w.shape == m.shape == v.shape) or w.ndim != 1 or w.size == 0:
            raise ValueError("weights, means and vars must be equal-length vectors")
        if (w <= 0).any() or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("weights must be positive and sum to 1")
        if (v <= 0).any():
            raise ValueError("component variances must be positive")
        object.__setattr__(self, "weights", tuple(map(float, w)))
        object.__setattr__(self, "means", tuple(map(float, m)))
        object.__setattr__(self, "vars", tuple(map(float, v)))

    @property
    def arrays(self):
        return np.array(self.weights), np.array(self.means), np.array(self.vars)

    def log_pdf(self, x):
        w, m, v = self.arrays
        x = np.asarray(x, dtype=float)[..., None]
        comp = np.log(w) - 0.5 * np.log(2 * np.pi * v) - (x - m) ** 2 / (2 * v)
        return logsumexp(comp, axis=-1)

    def sample(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        w, m, v = self.arrays
        z = rng.choice(len(w), size=n, p=w)
        return rng.normal(m[z], np.sqrt(v[z])), z


@dataclass
class OracleReport:
    check: str
    lower: float | None
    upper: float | None
    measured: float
    error: float
    passed: bool
    details: dict = field(default_factory=dict)

    def to_record(self) -> dict:
        return asdict(self)


def gmm_moments(g: GmmSpec) -> tuple[float, float]:
    w, m, v = g.arrays
    mean = float(w @ m)
    return mean, float(w @ (m ** 2 + v) - mean ** 2)


# ---------------------------------------------------------------- moments

def _rel(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-300)


def total_variance_check(samples, partition, rtol: float = 1e-6) -> OracleReport:
    """Within-part variance never exceeds the total; total = E[within] + Var[means]."""
    x = np.asarray(samples, dtype=float)
    p = np.asarray(partition)
    parts = np.unique(p)
    sizes = np.array([(p == k).sum() for k in parts], dtype=float)
    if (sizes == 0).any() or len(x) == 0:
        raise OracleError("empty part")
    w = sizes / sizes.sum()
    means = np.array([x[p == k].mean() for k in parts])
    within = float(w @ np.array([x[p == k].var() for k in parts]))
    between = float(w @ (means - w @ means) ** 2)
    total = float(x.var())
    err = _rel(within + between, total)
    ok = within <= total * (1 + rtol) + 1e-15 and err <= rtol
    return OracleReport("total_variance", None, total, within, err, bool(ok),
                        {"between": between, "decomposition": within + between, "parts": len(parts)})


def moment_consistency_check(g: GmmSpec, n: int = 20000, seed: int = 0,
                             partition: str = "true", rtol: float = 1e-8) -> OracleReport:
    """Global ML moments equal the mixture recombination of per-part ML moments."""
    rng = np.random.default_rng(seed)
    x, z = g.sample(n, rng)
    if partition == "random":
        z = rng.integers(0, len(g.weights), size=n)
    parts = np.unique(z)
    sizes = np.array([(z == k).sum() for k in parts], dtype=float)
    if (sizes < 2).any():
        raise OracleError("a part has fewer than 2 samples")
    w = sizes / n
    mu = np.array([x[z == k].mean() for k in parts])
    var = np.array([x[z == k].var() for k in parts])
    rec = GmmSpec(tuple(w / w.sum()), tuple(mu), tuple(np.maximum(var, 1e-300)))
    r_mean, r_var = gmm_moments(rec)
    d_mean = abs(r_mean - x.mean()) / max(abs(x.mean()), x.std(), 1e-300)
    d_var = _rel(r_var, x.var())
    err = max(d_mean, d_var)
    return OracleReport(f"moment_consistency[{partition}]", None, rtol, err, err,
                        bool(err <= rtol), {"mean": float(x.mean()), "var": float(x.var()),
                                            "recombined": (r_mean, r_var), "n": n})


# ---------------------------------------------------------------- quadrature

def _domain(g: GmmSpec) -> tuple[float, float, list[float]]:
    _, m, v = g.arrays
    mean, var = gmm_moments(g)
    s = np.sqrt(v)
    lo = min(mean - DOMAIN_SIGMAS * math.sqrt(var), float((m - DOMAIN_SIGMAS * s).min()))
    hi = max(mean + DOMAIN_SIGMAS * math.sqrt(var), float((m + DOMAIN_SIGMAS * s).max()))
    return lo, hi, sorted(set(float(a) for a in m if lo < a < hi))


def _quad(f, g: GmmSpec) -> tuple[float, float, float]:
    lo, hi, pts = _domain(g)
    with warnings.catch_warnings():
        warnings.simplefilter("error", integrate.IntegrationWarning)
        try:
            val, err = integrate.quad(f, lo, hi, points=pts or None, limit=500,
                                      epsabs=QUAD_EPSABS, epsrel=QUAD_EPSREL)
        except integrate.IntegrationWarning as exc:
            raise OracleError(f"quadrature did not converge: {exc}") from exc
    # mass outside the window, bounded via Gaussian tails of each component
    w, m, v = g.arrays
    tail = float(sum(wi * math.erfc(min(a - lo, hi - a) / math.sqrt(2 * vi))
                     for wi, a, vi in zip(w, m, v)))
    return val, err, tail


def mixture_entropy(g: GmmSpec) -> tuple[float, float]:
    """H(Q) in nats and an error estimate (quadrature + truncated tail)."""
    def integrand(x):
        lq = g.log_pdf(x)
        return -math.exp(lq) * lq
    val, err, tail = _quad(integrand, g)
    return val, err + tail * 50.0


def gaussian_entropy(var: float) -> float:
    return 0.5 * math.log(2 * math.pi * math.e * var)


def entropy_slacks(g: GmmSpec) -> tuple[float, float]:
    """(lower slack, upper slack) so that H(P) - lower <= H(Q) <= H(P) + upper."""
    w, m, v = g.arrays
    e_var = float(w @ v)
    var_mu = float(w @ (m - w @ m) ** 2)
    lower = 0.5 * (math.log(e_var + var_mu) - float(w @ np.log(v)))
    dm2 = (m[:, None] - m[None, :]) ** 2
    pair = dm2 * (v[:, None] + v[None, :]) / (v[:, None] * v[None, :])
    upper = 0.25 * float(w @ pair @ w)
    return lower, upper


def entropy_bounds_check(g: GmmSpec) -> OracleReport:
    _, var = gmm_moments(g)
    hp = gaussian_entropy(var)
    hq, err = mixture_entropy(g)
    lo_s, up_s = entropy_slacks(g)
    lower, upper = hp - lo_s, hp + up_s
    ok = lower - err <= hq <= upper + err
    return OracleReport("entropy_bounds", lower, upper, hq, err, bool(ok),
                        {"H_P": hp, "lower_slack": lo_s, "upper_slack": up_s})


def kl_mixture_to_gaussian(g: GmmSpec) -> tuple[float, float]:
    """D_KL[Q || P] by direct quadrature of q (log q - log p)."""
    mean, var = gmm_moments(g)

    def integrand(x):
        lq = g.log_pdf(x)
        lp = -0.5 * math.log(2 * math.pi * var) - (x - mean) ** 2 / (2 * var)
        return math.exp(lq) * (lq - lp)
    val, err, tail = _quad(integrand, g)
    return val, err + tail * 50.0


def kl_bound(g: GmmSpec) -> float:
    """E_{i~w} E_{j~w} [mu_j^2 / sigma_i^2]."""
    w, m, v = g.arrays
    return float((w @ (1.0 / v)) * (w @ m ** 2))


def kl_bound_check(g: GmmSpec, bound_scale: float = 1.0) -> OracleReport:
    kl, err = kl_mixture_to_gaussian(g)
    bound = kl_bound(g) * bound_scale
    _, var = gmm_moments(g)
    via_entropy = gaussian_entropy(var) - mixture_entropy(g)[0]
    ok = (kl >= -err) and (kl <= bound + err)
    return OracleReport("kl_bound", 0.0, bound, kl, err, bool(ok),
                        {"kl_via_entropy_gap": via_entropy})


# ---------------------------------------------------------------- MI cost

def mutual_information(joint) -> float:
    p = np.asarray(joint, dtype=float)
    if p.ndim != 2 or (p < 0).any() or abs(p.sum() - 1.0) > 1e-9:
        raise OracleError("joint must be a nonnegative 2-D table summing to 1")
    px, py = p.sum(1, keepdims=True), p.sum(0, keepdims=True)
    prod = px * py
    mask = p > 0
    return float(np.sum(xlogy(p[mask], p[mask]) - p[mask] * np.log(prod[mask])))


def mi_cost_demo(joint, k: float = 1.0, eps: float = 1e-6) -> OracleReport:
    """Demonstration of the assumed cost model c = k / (I + eps), not a proof.

    Compares the coupling ``joint`` (real vs training-free) against the
    independent coupling of the same marginals (real vs random).
    """
    if k <= 0 or eps <= 0:
        raise OracleError("k and eps must be positive")
    p = np.asarray(joint, dtype=float)
    i_free = mutual_information(p)
    indep = p.sum(1, keepdims=True) * p.sum(0, keepdims=True)
    i_rand = mutual_information(indep)
    c_free, c_rand = k / (i_free + eps), k / (i_rand + eps)
    ok = (c_free <= c_rand) if i_free >= i_rand else True
    return OracleReport("mi_cost", None, c_rand, c_free, 0.0, bool(ok),
                        {"I_free": i_free, "I_random": i_rand, "k": k, "eps": eps,
                         "note": "demonstration of the assumed cost model"})


# ---------------------------------------------------------------- suite

def random_spec(rng: np.random.Generator, max_components: int = 5) -> GmmSpec:
    c = int(rng.integers(1, max_components + 1))
    # floor every weight at 1/(2c) so each component is well populated when sampled
    w = 0.5 * rng.dirichlet(np.ones(c)) + 0.5 / c
    w = w / w.sum()
    return GmmSpec(tuple(w), tuple(rng.uniform(-3, 3, c)), tuple(rng.uniform(0.5, 2.0, c)))


def run_suite(seed: int = 0, n_random: int = 100, inject_bad_bound: bool = False
              ) -> list[OracleReport]:
    rng = np.random.default_rng(seed)
    reports: list[OracleReport] = []
    ex = GmmSpec((0.5, 0.5), (0.0, 2.0), (1.0, 1.0))

    # total variance: hand example, single part, random partitions
    reports.append(total_variance_check([0, 0, 2, 2], [0, 0, 1, 1]))
    draws = rng.normal(size=10_000)
    reports.append(total_variance_check(draws, np.zeros(len(draws), dtype=int)))
    for _ in range(n_random):
        reports.append(total_variance_check(draws, rng.integers(0, rng.integers(2, 8),
                                                                size=len(draws))))
    # moment consistency
    for t in range(n_random):
        g = random_spec(rng)
        n = math.ceil(1000 / min(g.weights)) * 2
        for part in ("true", "random"):
            try:
                reports.append(moment_consistency_check(g, n, seed + t, part))
            except OracleError as exc:
                reports.append(OracleReport(f"moment_consistency[{part}]", None, None,
                                            math.nan, math.nan, False, {"error": str(exc)}))
    # entropy and KL bounds: worked example + randomized specs
    specs = [ex] + [random_spec(rng) for _ in range(n_random)]
    for g in specs:
        for fn in (entropy_bounds_check, kl_bound_check):
            try:
                rep = fn(g)
            except OracleError as exc:
                rep = OracleReport(fn.__name__, None, None, math.nan, math.nan, False,
                                   {"error": str(exc)})
            rep.details["spec"] = asdict(g)
            reports.append(rep)
    # MI cost demonstration
    reports.append(mi_cost_demo([[0.5, 0.0], [0.0, 0.5]]))
    reports.append(mi_cost_demo([[0.25, 0.25], [0.25, 0.25]]))
    reports.append(mi_cost_demo([[0.2, 0.0, 0.1], [0.0, 0.4, 0.3]]))
    if inject_bad_bound:
        bad = kl_bound_check(ex, bound_scale=-1.0)
        bad.check = "kl_bound[injected]"
        reports.append(bad)
    return reports


def summarize(reports: list[OracleReport]) -> dict[str, tuple[int, int]]:
    out: dict[str, list[int]] = {}
    for r in reports:
        key = r.check.split("[")[0]
        tally = out.setdefault(key, [0, 0])
        tally[0] += int(r.passed)
        tally[1] += 1
    return {k: (a, b) for k, (a, b) in out.items()}
