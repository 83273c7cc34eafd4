"""Synthetic market generator for the estimation benchmarks.

Each market draws standard-normal attributes, a structural taste shock xi
correlated with attribute 1 (the endogenous, price-like attribute), and
per-attribute raw instruments w_l = strength * (exogenous part of x_l) + noise.
The moment basis h_1..h_K applies a fixed, documented enumeration of
polynomial transforms to the raw instruments. Shares come from the same
mixed-share kernel the estimator uses, evaluated at the true parameters, so
with the same quadrature rule the true theta reproduces the data exactly.

Identification requires the chosen instrument transforms to be informative
for the attributes that actually matter (the support of theta). The default
design realizes that assumption by placing the true support on the leading
attributes, which the default basis covers first; both conventions are
deterministic and documented rather than randomized.

True nonzero coefficients all equal +signal. Since the sign of each gamma
group is unidentified in the model, the generator keeps a fixed positive
convention and the estimator's positive initialization targets the same
branch.
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass

import numpy as np

from .model_core import ConfigurationError, Dataset, MarketData, ModelConfig, Theta, group_index_matrix
from .quadrature import QuadratureRule
from .shares import _mixed_shares

SHARE_UNDERFLOW = 1e-12
MAX_MARKET_RETRIES = 10


@dataclass(frozen=True)
class DgpConfig:
    """Benchmark data-generating design.

    s_beta / s_gamma count the nonzero coordinates (placed on the leading
    attributes), signal is their common magnitude, xi_sd scales the taste
    shock, endog_corr is corr(x_1, xi), and instrument_strength is the
    loading of each raw instrument on its attribute's exogenous part.
    """

    model: ModelConfig
    s_beta: int
    s_gamma: int
    signal: float = 1.0
    xi_sd: float = 0.5
    endog_corr: float = 0.5
    instrument_strength: float = 0.95
    seed: int = 0

    def __post_init__(self):
        L = self.model.L
        if not (0 <= self.s_beta <= L and 0 <= self.s_gamma <= L):
            raise ConfigurationError("s_beta and s_gamma must lie in 0..L")
        if not (0.0 <= abs(self.endog_corr) < 1.0):
            raise ConfigurationError("endog_corr must lie in (-1, 1)")
        if not (0.0 <= self.instrument_strength < 1.0):
            raise ConfigurationError("instrument_strength must lie in [0, 1)")
        if self.xi_sd < 0 or self.signal < 0:
            raise ConfigurationError("xi_sd and signal must be nonnegative")


def true_theta(cfg: DgpConfig) -> Theta:
    L = cfg.model.L
    beta = np.zeros(L)
    beta[: cfg.s_beta] = cfg.signal
    gamma = np.zeros(L)
    gamma[: cfg.s_gamma] = cfg.signal
    return Theta(beta=beta, gamma=gamma)


def closed_form_logit_delta(S: np.ndarray) -> np.ndarray:
    """delta_j = log S_j - log S_0, exact when gamma = 0."""
    S = np.asarray(S, dtype=float)
    s0 = 1.0 - S.sum(axis=-1, keepdims=True)
    return np.log(S) - np.log(s0)


def instrument_transforms(W: np.ndarray, K: int) -> np.ndarray:
    """The fixed basis h_1..h_K applied to raw instruments W (J x L).

    The basis is a low-order polynomial family in the leading m =
    max(1, ceil(K/3)) instruments (capped at L): linear terms w_1..w_m; own
    cross products w_s w_t in lexicographic order; own-by-rival crosses
    w_s q_t with q_t the sum of the other products' w_t (the classic
    rival-characteristics construction), ordered (1,2),(2,1),(1,3),(3,1),...;
    centered squares w_t^2 - 1; then centered higher powers of w_1 if slots
    remain. Products of two instruments are uncorrelated with every linear
    attribute (odd Gaussian moments vanish), so those rows isolate the
    curvature that the random coefficients induce in mean utilities, and the
    rival crosses specifically target cross-product substitution;
    identification of coordinates outside the spanned block rests on
    sparsity of the true parameter. Each transform is scaled to unit
    population variance (exact normal-moment constants), which equalizes the
    sampling noise across moment rows. Every transform has mean zero under
    the instrument law, and validity E[xi h] = 0 holds because W (own and
    rival) is independent of xi by construction. Rival crosses are skipped
    when J = 1 (no rivals).
    """
    J, L = W.shape
    m = min(L, max(1, -(-K // 3)))

    def rival_pairs():
        for s, t in itertools.combinations(range(m), 2):
            yield s, t
            yield t, s

    def enumerate_basis():
        for t in range(m):
            yield W[:, t]
        for s, t in itertools.combinations(range(m), 2):
            yield W[:, s] * W[:, t]
        if J > 1:
            for s, t in rival_pairs():
                q_t = W[:, t].sum() - W[:, t]
                yield W[:, s] * q_t / np.sqrt(J - 1.0)
        for t in range(m):
            yield (W[:, t] ** 2 - 1.0) / np.sqrt(2.0)
        power = 3
        while True:
            # centered powers of w_1 as a last resort for tiny L or large K
            mean = 0.0 if power % 2 else _normal_moment(power)
            var = _normal_moment(2 * power) - mean**2
            yield (W[:, 0] ** power - mean) / np.sqrt(var)
            power += 1

    gen = enumerate_basis()
    return np.column_stack([next(gen) for _ in range(K)])


def _normal_moment(p: int) -> float:
    # E[Z^p] for even p: (p-1)!!
    out = 1.0
    for v in range(p - 1, 0, -2):
        out *= v
    return out


def _market_rng(seed: int, market: int, retry: int) -> np.random.Generator:
    # counter-based streams: independent per (seed, market, retry), order-free
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy=(seed, market, retry))))


def _draw_market(cfg: DgpConfig, theta: Theta, rule: QuadratureRule, market: int, retry: int):
    model = cfg.model
    J, L = model.J, model.L
    rng = _market_rng(cfg.seed, market, retry)
    E = rng.standard_normal((J, L))  # exogenous attribute drivers
    eta = rng.standard_normal((J, L))  # instrument noise
    z = rng.standard_normal(J)  # shock driving xi
    rho = cfg.endog_corr
    a = cfg.instrument_strength

    X = E.copy()
    X[:, 0] = rho * z + np.sqrt(1.0 - rho**2) * E[:, 0]
    xi = cfg.xi_sd * z
    # raw instruments load on the exogenous driver of each attribute
    W = a * E + np.sqrt(1.0 - a**2) * eta
    H = instrument_transforms(W, model.K)

    delta = X @ theta.beta + xi
    nu = group_index_matrix(X, theta.gamma, model)
    S = _mixed_shares(delta[None], nu[None], rule)[0]
    return MarketData(X=X, S=S, H=H, xi_true=xi), S


def simulate(cfg: DgpConfig, rule: QuadratureRule) -> tuple[Dataset, Theta]:
    """Generate a Dataset and the true Theta.

    Markets draw from independent counter-based streams keyed by
    (seed, market_id, retry), so results do not depend on generation order.
    Markets whose shares underflow below 1e-12 (inside or outside) are
    redrawn up to 10 times with a warning.
    """
    theta = true_theta(cfg)
    markets = []
    n_retried = 0
    for i in range(cfg.model.n_markets):
        for retry in range(MAX_MARKET_RETRIES + 1):
            mkt, S = _draw_market(cfg, theta, rule, i, retry)
            s0 = 1.0 - S.sum()
            if S.min() >= SHARE_UNDERFLOW and s0 >= SHARE_UNDERFLOW:
                break
            n_retried += 1
        else:
            raise ConfigurationError(
                f"market {i}: shares kept underflowing below {SHARE_UNDERFLOW} "
                f"after {MAX_MARKET_RETRIES} retries; weaken the signal or xi_sd"
            )
        markets.append(mkt)
    if n_retried:
        warnings.warn(f"redrew {n_retried} market(s) after share underflow", RuntimeWarning, stacklevel=2)
    return Dataset(config=cfg.model, markets=tuple(markets)), theta


def save_truth_json(theta: Theta, path) -> None:
    import json
    from pathlib import Path

    payload = {"beta": theta.beta.tolist(), "gamma": theta.gamma.tolist()}
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def load_truth_json(path) -> Theta:
    import json
    from pathlib import Path

    payload = json.loads(Path(path).read_text())
    return Theta(beta=np.asarray(payload["beta"], float), gamma=np.asarray(payload["gamma"], float))
