"""Model configuration, parameter containers, market data, and group indices.

The demand system has J inside goods per market and L observed attributes that
are partitioned into G groups. Consumer tastes for the attributes in group g
share a single standard-normal random coefficient, so the distribution of
utility in a market is summarized by G + 1 linear indices per product: the mean
index x'beta and one group index x_g'gamma_g for each group.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np


class ConfigurationError(ValueError):
    """Raised when dimensions, partitions, or file schemas do not line up."""


def _as_float_array(x, shape, name):
    arr = np.asarray(x, dtype=float)
    if arr.shape != shape:
        raise ConfigurationError(f"{name} has shape {arr.shape}, expected {shape}")
    return arr


@dataclass(frozen=True)
class ModelConfig:
    """Dimensions of the demand system and the attribute-to-group partition.

    Parameters
    ----------
    n_markets : int
        Number of independent markets n.
    J : int
        Products per market (the outside good is extra and has utility 0).
    L : int
        Number of observed product attributes.
    G : int
        Number of random-coefficient groups.
    K : int
        Instrument transforms per product, so the model carries J*K moments.
    partition : sequence of int
        Length-L map from attribute position to its group label in 1..G.
        Every group must receive at least one attribute.
    """

    n_markets: int
    J: int
    L: int
    G: int
    K: int
    partition: tuple[int, ...]

    def __post_init__(self):
        for name in ("n_markets", "J", "L", "G", "K"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v <= 0:
                raise ConfigurationError(f"{name} must be a positive integer, got {v!r}")
        part = tuple(int(g) for g in self.partition)
        object.__setattr__(self, "partition", part)
        if len(part) != self.L:
            raise ConfigurationError(
                f"partition has length {len(part)}, expected L={self.L}"
            )
        if self.G > self.L:
            raise ConfigurationError(f"G={self.G} exceeds L={self.L}")
        seen = set(part)
        if not seen.issubset(range(1, self.G + 1)):
            raise ConfigurationError(
                f"partition labels {sorted(seen)} must lie in 1..G={self.G}"
            )
        missing = set(range(1, self.G + 1)) - seen
        if missing:
            raise ConfigurationError(f"groups {sorted(missing)} receive no attribute")

    @cached_property
    def group_members(self) -> tuple[np.ndarray, ...]:
        """Attribute positions (0-based) belonging to each group 1..G."""
        part = np.asarray(self.partition)
        return tuple(np.flatnonzero(part == g) for g in range(1, self.G + 1))

    @property
    def n_moments(self) -> int:
        return self.J * self.K

    @property
    def n_params(self) -> int:
        return 2 * self.L


@dataclass(frozen=True)
class Theta:
    """Structural parameter: mean tastes beta and loading weights gamma.

    Both blocks have length L. Solvers operate on the stacked 2L vector with
    beta in positions 0..L-1 and gamma in positions L..2L-1.

    The sign of each gamma group is not identified: flipping gamma_g for a
    whole group leaves every share integral unchanged because the random
    coefficients are symmetric around zero. Estimates are stored exactly as
    produced, with no sign normalization.
    """

    beta: np.ndarray
    gamma: np.ndarray

    def __post_init__(self):
        beta = np.atleast_1d(np.asarray(self.beta, dtype=float))
        gamma = np.atleast_1d(np.asarray(self.gamma, dtype=float))
        if beta.ndim != 1 or gamma.ndim != 1 or beta.size != gamma.size:
            raise ConfigurationError(
                f"beta and gamma must be 1-d of equal length, got {beta.shape} and {gamma.shape}"
            )
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "gamma", gamma)

    @property
    def L(self) -> int:
        return self.beta.size

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.beta, self.gamma])

    @classmethod
    def from_stacked(cls, vec: np.ndarray) -> "Theta":
        vec = np.asarray(vec, dtype=float)
        if vec.ndim != 1 or vec.size % 2:
            raise ConfigurationError(f"stacked theta must have even length, got {vec.shape}")
        L = vec.size // 2
        return cls(beta=vec[:L], gamma=vec[L:])

    @classmethod
    def zeros(cls, L: int) -> "Theta":
        return cls(beta=np.zeros(L), gamma=np.zeros(L))


def canonicalize_gamma(theta: Theta, config: ModelConfig) -> Theta:
    """Fix the unidentified gamma group signs to a reporting convention.

    For each group, flip the whole block if its largest-magnitude coordinate
    is negative (ties broken by the earliest attribute position, which
    argmax already gives). Shares and moments are invariant under these
    flips, so this changes nothing the data can see; it only makes
    estimates comparable across runs and against a sign-fixed truth.
    """
    gamma = theta.gamma.copy()
    for members in config.group_members:
        block = gamma[members]
        if block.size and block[np.argmax(np.abs(block))] < 0:
            gamma[members] = -block
    return Theta(beta=theta.beta, gamma=gamma)


@dataclass(frozen=True)
class MarketData:
    """One market: attributes X (J x L), observed shares S (J,), instruments H (J x K)."""

    X: np.ndarray
    S: np.ndarray
    H: np.ndarray
    xi_true: np.ndarray | None = None

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        S = np.asarray(self.S, dtype=float)
        H = np.asarray(self.H, dtype=float)
        if X.ndim != 2 or H.ndim != 2 or S.ndim != 1:
            raise ConfigurationError("X and H must be matrices and S a vector")
        if X.shape[0] != S.size or H.shape[0] != S.size:
            raise ConfigurationError(
                f"row counts disagree: X {X.shape}, H {H.shape}, S {S.shape}"
            )
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "S", S)
        object.__setattr__(self, "H", H)
        if self.xi_true is not None:
            object.__setattr__(self, "xi_true", _as_float_array(self.xi_true, S.shape, "xi_true"))

    @property
    def J(self) -> int:
        return self.S.size


@dataclass(frozen=True)
class Dataset:
    """A balanced panel of markets sharing one ModelConfig."""

    config: ModelConfig
    markets: tuple[MarketData, ...]

    def __post_init__(self):
        object.__setattr__(self, "markets", tuple(self.markets))

    @property
    def n(self) -> int:
        return len(self.markets)

    def stacked_arrays(self):
        """Return (X, S, H) stacked over markets: (n,J,L), (n,J), (n,J,K)."""
        X = np.stack([m.X for m in self.markets])
        S = np.stack([m.S for m in self.markets])
        H = np.stack([m.H for m in self.markets])
        return X, S, H


def compute_indices(market: MarketData, theta: Theta, config: ModelConfig) -> np.ndarray:
    """Per-product linear indices, J x (G+1).

    Column 0 is the mean index x'beta; column g >= 1 is the group index
    x_g'gamma_g built from the attributes mapped to group g.
    """
    if market.X.shape != (market.J, config.L):
        raise ConfigurationError(
            f"X has shape {market.X.shape}, expected {(market.J, config.L)}"
        )
    if theta.L != config.L:
        raise ConfigurationError(f"theta has L={theta.L}, config has L={config.L}")
    nu = np.empty((market.J, config.G + 1))
    nu[:, 0] = market.X @ theta.beta
    for g, members in enumerate(config.group_members, start=1):
        nu[:, g] = market.X[:, members] @ theta.gamma[members]
    return nu


def group_index_matrix(X: np.ndarray, gamma: np.ndarray, config: ModelConfig) -> np.ndarray:
    """Group indices only (columns 1..G of compute_indices), for stacked X.

    X may be (J, L) or (n, J, L); the result has the matching leading shape
    with a trailing G axis.
    """
    out = np.empty(X.shape[:-1] + (config.G,))
    for g, members in enumerate(config.group_members):
        out[..., g] = X[..., members] @ gamma[members]
    return out


def validate_dataset(dataset: Dataset) -> list[str]:
    """Collect schema and sanity violations; purely diagnostic, never raises.

    Checks per market: shares strictly inside (0, 1) with an interior outside
    share, finite attributes and instruments, and dimensions matching the
    config.
    """
    cfg = dataset.config
    problems: list[str] = []
    if dataset.n != cfg.n_markets:
        problems.append(
            f"dataset has {dataset.n} markets, config declares {cfg.n_markets}"
        )
    for i, mkt in enumerate(dataset.markets):
        tag = f"market {i}"
        if mkt.J != cfg.J:
            problems.append(f"{tag}: {mkt.J} products, expected J={cfg.J}")
        if mkt.X.shape[1] != cfg.L:
            problems.append(f"{tag}: X has {mkt.X.shape[1]} columns, expected L={cfg.L}")
        if mkt.H.shape[1] != cfg.K:
            problems.append(f"{tag}: H has {mkt.H.shape[1]} columns, expected K={cfg.K}")
        if not np.all(np.isfinite(mkt.X)):
            problems.append(f"{tag}: non-finite attribute values")
        if not np.all(np.isfinite(mkt.H)):
            problems.append(f"{tag}: non-finite instrument values")
        if not np.all(np.isfinite(mkt.S)):
            problems.append(f"{tag}: non-finite shares")
            continue
        if np.any(mkt.S <= 0.0) or np.any(mkt.S >= 1.0):
            bad = np.flatnonzero((mkt.S <= 0.0) | (mkt.S >= 1.0))
            problems.append(f"{tag}: products {bad.tolist()} have shares outside (0, 1)")
        if mkt.S.sum() >= 1.0:
            problems.append(f"{tag}: inside shares sum to {mkt.S.sum():.6f} >= 1")
    return problems


# ---------------------------------------------------------------------------
# File formats. ModelConfig travels as JSON; datasets travel as CSV with one
# row per (market, product) and columns market_id, product_id, share,
# x_1..x_L, h_1..h_K.
# ---------------------------------------------------------------------------


def save_model_config(config: ModelConfig, path) -> None:
    payload = {
        "n": config.n_markets,
        "J": config.J,
        "L": config.L,
        "G": config.G,
        "K": config.K,
        "partition": list(config.partition),
    }
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def load_model_config(path) -> ModelConfig:
    try:
        payload = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON ({exc})") from exc
    required = {"n", "J", "L", "G", "K", "partition"}
    missing = required - payload.keys()
    if missing:
        raise ConfigurationError(f"{path}: missing config keys {sorted(missing)}")
    return ModelConfig(
        n_markets=int(payload["n"]),
        J=int(payload["J"]),
        L=int(payload["L"]),
        G=int(payload["G"]),
        K=int(payload["K"]),
        partition=tuple(int(g) for g in payload["partition"]),
    )


def dataset_header(config: ModelConfig) -> list[str]:
    return (
        ["market_id", "product_id", "share"]
        + [f"x_{l}" for l in range(1, config.L + 1)]
        + [f"h_{k}" for k in range(1, config.K + 1)]
    )


def save_dataset_csv(dataset: Dataset, path) -> None:
    cfg = dataset.config
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(dataset_header(cfg))
        for i, mkt in enumerate(dataset.markets, start=1):
            for j in range(mkt.J):
                row = [i, j + 1, repr(float(mkt.S[j]))]
                row += [repr(float(v)) for v in mkt.X[j]]
                row += [repr(float(v)) for v in mkt.H[j]]
                writer.writerow(row)


def load_dataset_csv(path, config: ModelConfig) -> Dataset:
    expected = dataset_header(config)
    rows_by_market: dict[int, list[tuple[int, list[float]]]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != expected:
            raise ConfigurationError(
                f"{path}: header mismatch; expected {expected[:4]}... with "
                f"L={config.L}, K={config.K}"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(expected):
                raise ConfigurationError(f"{path}:{lineno}: expected {len(expected)} fields")
            try:
                market_id = int(row[0])
                product_id = int(row[1])
                values = [float(v) for v in row[2:]]
            except ValueError as exc:
                raise ConfigurationError(f"{path}:{lineno}: {exc}") from exc
            rows_by_market.setdefault(market_id, []).append((product_id, values))
    markets = []
    for market_id in sorted(rows_by_market):
        rows = sorted(rows_by_market[market_id])
        if [pid for pid, _ in rows] != list(range(1, config.J + 1)):
            raise ConfigurationError(
                f"{path}: market {market_id} does not contain products 1..{config.J}"
            )
        block = np.array([vals for _, vals in rows])
        markets.append(
            MarketData(
                X=block[:, 1 : 1 + config.L],
                S=block[:, 0],
                H=block[:, 1 + config.L :],
            )
        )
    if len(markets) != config.n_markets:
        raise ConfigurationError(
            f"{path}: {len(markets)} markets found, config declares {config.n_markets}"
        )
    return Dataset(config=config, markets=tuple(markets))
