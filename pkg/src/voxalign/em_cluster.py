"""Two-class Gaussian mixture clustering of intensities by EM."""

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInput

_LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class GaussianMixture2:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    log_likelihoods: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False

    def log_component_densities(self, x):
        x = np.asarray(x, dtype=float)[..., None]
        return np.log(self.weights) - 0.5 * (_LOG_2PI + np.log(self.variances) + (x - self.means) ** 2 / self.variances)

    def posterior_high(self, x):
        """Posterior probability of the higher-mean component."""
        lp = self.log_component_densities(x)
        # p1 = 1 / (1 + exp(l0 - l1)), written stably
        return 0.5 * (1.0 + np.tanh(0.5 * (lp[..., 1] - lp[..., 0])))

    def to_dict(self):
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "variances": self.variances.tolist(),
            "iterations": self.iterations,
            "converged": self.converged,
            "log_likelihood": self.log_likelihoods[-1] if self.log_likelihoods else None,
        }


def _loglik(values, counts, w, mu, var):
    lp = np.log(w) - 0.5 * (_LOG_2PI + np.log(var) + (values[:, None] - mu) ** 2 / var)
    m = lp.max(axis=1, keepdims=True)
    ll = m[:, 0] + np.log(np.exp(lp - m).sum(axis=1))
    resp = np.exp(lp - ll[:, None])
    return float(np.dot(counts, ll)), resp


def fit_em(v, max_iters=200, tol=1e-10):
    """Fit a two-component Gaussian mixture to the intensities of ``v``.

    EM runs on the exact intensity histogram (distinct values with counts).
    Means start at the 25th/75th percentiles (min/max if those coincide),
    weights equal, variances at the global variance.  Variances are floored
    at ``(1e-3 * range)^2``.  Iteration stops when the relative change of the
    log-likelihood drops below ``tol``.

    Raises
    ------
    DegenerateInput
        If the volume has fewer than two distinct intensities.
    """
    data = v.data if hasattr(v, "data") else np.asarray(v, dtype=float)
    values, counts = np.unique(np.ravel(data), return_counts=True)
    if values.size < 2:
        raise DegenerateInput("EM clustering needs at least two distinct intensities")
    counts = counts.astype(float)
    total = counts.sum()
    flat = np.ravel(data)
    floor = (1e-3 * (values[-1] - values[0])) ** 2

    mu = np.percentile(flat, [25.0, 75.0])
    if mu[0] == mu[1]:
        mu = np.array([values[0], values[-1]], dtype=float)
    mean = np.dot(counts, values) / total
    var = np.full(2, max(np.dot(counts, (values - mean) ** 2) / total, floor))
    w = np.array([0.5, 0.5])

    history = []
    ll, resp = _loglik(values, counts, w, mu, var)
    history.append(ll)
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        nk = resp.T @ counts
        nk = np.maximum(nk, 1e-300)
        w = nk / total
        mu = (resp * (counts * values)[:, None]).sum(axis=0) / nk
        var = (resp * (counts[:, None] * (values[:, None] - mu) ** 2)).sum(axis=0) / nk
        var = np.maximum(var, floor)
        ll_new, resp = _loglik(values, counts, w, mu, var)
        if ll_new < ll - 1e-9 * abs(ll):
            raise RuntimeError(f"EM log-likelihood decreased at iteration {it}: {ll} -> {ll_new}")
        history.append(ll_new)
        rel = abs(ll_new - ll) / max(abs(ll), 1e-300)
        ll = ll_new
        if rel < tol:
            converged = True
            break

    order = np.argsort(mu, kind="stable")
    w = w[order]
    w = w / w.sum()
    return GaussianMixture2(w, mu[order], var[order], history, it, converged)


def classify_foreground(v, gmm):
    """Binary mask (float 0/1 volume, same geometry) of voxels whose posterior
    for the higher-mean component exceeds 0.5."""
    post = gmm.posterior_high(v.data)
    return v.with_data((post > 0.5).astype(float))
