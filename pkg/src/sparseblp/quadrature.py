"""Integration rules over the G-dimensional standard-normal taste distribution.

A single rule object is built once per estimation problem and reused for every
share, Jacobian, and moment evaluation so that simulated and estimated shares
see identical integration error (common random numbers in the Monte Carlo
case).
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

MAX_TENSOR_NODES = 1_000_000
DEFAULT_GH_NODES = 11
DEFAULT_MC_DRAWS = 5_000
DEFAULT_MC_SEED = 0


class RuleKind(str, Enum):
    GAUSS_HERMITE = "gauss_hermite"
    MONTE_CARLO = "monte_carlo"


class RuleSizeError(ValueError):
    """Tensor-product rule would exceed the node budget."""


@dataclass(frozen=True)
class QuadratureRule:
    """Nodes (M x G) and nonnegative weights (M,) for E[f(beta_tilde)]."""

    nodes: np.ndarray
    weights: np.ndarray
    kind: RuleKind
    seed: int | None = None

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        weights = np.asarray(self.weights, dtype=float)
        if nodes.ndim != 2 or weights.ndim != 1 or nodes.shape[0] != weights.size:
            raise ValueError(
                f"nodes {nodes.shape} and weights {weights.shape} do not conform"
            )
        if np.any(weights < 0):
            raise ValueError("weights must be nonnegative")
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "weights", weights)

    @property
    def M(self) -> int:
        return self.weights.size

    @property
    def G(self) -> int:
        return self.nodes.shape[1]

    def integrate(self, values: np.ndarray) -> np.ndarray:
        """Weighted sum over the leading node axis of `values`."""
        return np.tensordot(self.weights, values, axes=(0, 0))


def gauss_hermite_rule(G: int, nodes_per_dim: int = DEFAULT_GH_NODES) -> QuadratureRule:
    """Tensor-product Gauss-Hermite rule for N(0, I_G).

    Exact for polynomial integrands of total degree up to 2*nodes_per_dim - 1
    in each coordinate. The tensor grid has nodes_per_dim**G points and is
    refused above MAX_TENSOR_NODES.
    """
    if G <= 0 or nodes_per_dim <= 0:
        raise ValueError("G and nodes_per_dim must be positive")
    m = nodes_per_dim**G
    if m > MAX_TENSOR_NODES:
        raise RuleSizeError(
            f"{nodes_per_dim}**{G} = {m} nodes exceeds {MAX_TENSOR_NODES}; "
            "use monte_carlo_rule for this G"
        )
    # physicists' rule: integral of f(x) exp(-x^2); rescale to N(0,1)
    x, w = np.polynomial.hermite.hermgauss(nodes_per_dim)
    points = x * np.sqrt(2.0)
    weights1d = w / np.sqrt(np.pi)
    grids = np.meshgrid(*([points] * G), indexing="ij")
    nodes = np.column_stack([g.ravel() for g in grids])
    wgrids = np.meshgrid(*([weights1d] * G), indexing="ij")
    weights = np.ones(m)
    for wg in wgrids:
        weights = weights * wg.ravel()
    return QuadratureRule(nodes=nodes, weights=weights, kind=RuleKind.GAUSS_HERMITE)


def monte_carlo_rule(G: int, draws: int = DEFAULT_MC_DRAWS, seed: int = DEFAULT_MC_SEED) -> QuadratureRule:
    """Equal-weight iid standard-normal draws from a PCG64 stream."""
    if G <= 0 or draws <= 0:
        raise ValueError("G and draws must be positive")
    rng = np.random.Generator(np.random.PCG64(seed))
    nodes = rng.standard_normal((draws, G))
    weights = np.full(draws, 1.0 / draws)
    return QuadratureRule(nodes=nodes, weights=weights, kind=RuleKind.MONTE_CARLO, seed=seed)


def default_rule(G: int) -> QuadratureRule:
    """Gauss-Hermite with 11 nodes per dimension for G <= 3, else 5000 MC draws."""
    if G <= 3:
        return gauss_hermite_rule(G, DEFAULT_GH_NODES)
    return monte_carlo_rule(G, DEFAULT_MC_DRAWS, DEFAULT_MC_SEED)
