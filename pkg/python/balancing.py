"""
Balancing and Truncation
========================

Contragredient transformations of Gramian pairs, coordinate changes of plants
and vertex sets, balanced truncation and truncation error bounds.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import scipy.linalg

from error_handler import DimensionError, NumericalError, PreconditionError
from lmi import cholesky_lower, sym, sym_eigh
from sysmodel import PlantModel, TransformedField, TruncatedField, VertexSet

logger = logging.getLogger(__name__)

GAP_TOLERANCE = 1e-10


class BalancingKind(Enum):
    GD = "GD"
    LQG = "LQG"
    HINF = "Hinf"


def balancing_transform(X: np.ndarray, Y: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Square-root contragredient transform of an SPD pair.

    X = L L^T, L^T Y L = U diag(lam) U^T (lam descending), T^-1 = L U lam^(-1/4).
    Then T X T^T = T^-T Y T^-1 = diag(sqrt(lam)).

    Returns:
        (T, T_inv, sigma) with sigma descending
    """
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if X.ndim != 2 or X.shape != Y.shape or X.shape[0] != X.shape[1]:
        raise DimensionError(f"Gramians must be square of equal size, got {X.shape} and {Y.shape}")
    L = cholesky_lower(X, "first Gramian")
    lam, U = sym_eigh(L.T @ sym(Y) @ L)
    lam, U = lam[::-1], U[:, ::-1]
    # sign convention: largest component of each eigenvector is positive
    pivots = np.argmax(np.abs(U), axis=0)
    U = U * np.sign(U[pivots, np.arange(U.shape[1])])
    if lam[-1] <= 0.0:
        raise NumericalError(f"second Gramian is not positive definite (eigenvalue {lam[-1]:.3e})")
    quarter = lam ** 0.25
    T_inv = (L @ U) / quarter
    T = (quarter[:, None] * U.T) @ scipy.linalg.solve_triangular(L, np.eye(L.shape[0]), lower=True)
    return T, T_inv, np.sqrt(lam)


def contragredient(X: np.ndarray, Y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """T and sigma with T X T^T = T^-T Y T^-1 = diag(sigma)"""
    T, _, sigma = balancing_transform(X, Y)
    return T, sigma


def balancing_residual(X: np.ndarray, Y: np.ndarray, T: np.ndarray, T_inv: np.ndarray,
                       sigma: np.ndarray) -> Tuple[float, float]:
    """Relative residuals of T X T^T and T^-T Y T^-1 against diag(sigma)"""
    S = np.diag(sigma)
    rx = np.linalg.norm(T @ X @ T.T - S) / np.linalg.norm(X)
    ry = np.linalg.norm(T_inv.T @ Y @ T_inv - S) / np.linalg.norm(Y)
    return float(rx), float(ry)


def transform_plant(plant: PlantModel, vertices: Optional[VertexSet], T: np.ndarray,
                    T_inv: Optional[np.ndarray] = None) -> Tuple[PlantModel, Optional[VertexSet]]:
    """Change of coordinates z = T x: f -> T f(T^-1 z), B -> T B, C -> C T^-1, A_i -> T A_i T^-1"""
    T = np.asarray(T, dtype=float)
    if T.shape != (plant.n, plant.n):
        raise DimensionError(f"transform has shape {T.shape}, plant has n = {plant.n}")
    if T_inv is None:
        if np.linalg.cond(T) > 1e14:
            raise NumericalError("coordinate transform is singular")
        T_inv = scipy.linalg.inv(T)
    transformed = PlantModel(TransformedField(plant.field, T, T_inv), T @ plant.B, plant.C @ T_inv,
                             plant.epsilon, plant.name, None, plant.x_shift, plant.u_shift, plant.D)
    return transformed, (vertices.transformed(T, T_inv) if vertices is not None else None)


@dataclass
class BalancedRealization:
    T: np.ndarray
    T_inv: np.ndarray
    sigma: np.ndarray
    plant: PlantModel
    vertices: Optional[VertexSet]
    kind: BalancingKind = BalancingKind.GD
    blocks: Optional[List[int]] = None
    residual: Tuple[float, float] = (0.0, 0.0)

    @property
    def n(self) -> int:
        return len(self.sigma)

    def to_dict(self) -> Dict[str, object]:
        return {"kind": self.kind.value, "sigma": self.sigma.tolist(), "blocks": self.blocks,
                "residual": list(self.residual)}


def balance(plant: PlantModel, vertices: Optional[VertexSet], X: np.ndarray, Y: np.ndarray,
            kind: BalancingKind = BalancingKind.GD) -> BalancedRealization:
    """Balance a plant and its vertex set with respect to the Gramian pair (X, Y)"""
    T, T_inv, sigma = balancing_transform(X, Y)
    balanced_plant, balanced_vertices = transform_plant(plant, vertices, T, T_inv)
    residual = balancing_residual(X, Y, T, T_inv, sigma)
    logger.info(f"✅ {kind.value} balanced: sigma = {np.array2string(sigma, precision=4)}")
    return BalancedRealization(T, T_inv, sigma, balanced_plant, balanced_vertices, kind, None, residual)


def mask_blocks(mask: np.ndarray) -> List[int]:
    """Block sizes of a block-diagonal mask with contiguous blocks"""
    mask = np.asarray(mask, dtype=bool)
    n = mask.shape[0]
    sizes, start = [], 0
    while start < n:
        end = start + 1
        while end < n and mask[start, end]:
            end += 1
        sizes.append(end - start)
        start = end
    return sizes


def balance_blocks(plant: PlantModel, vertices: Optional[VertexSet], X: np.ndarray, Y: np.ndarray,
                   blocks: Sequence[int], kind: BalancingKind = BalancingKind.GD) -> BalancedRealization:
    """
    Structure-preserving balancing of block-diagonal Gramians: one contragredient
    transform per block, assembled block-diagonally so the block partition of
    the state survives. sigma is descending within each block only.
    """
    if sum(blocks) != plant.n:
        raise DimensionError(f"blocks {list(blocks)} do not add up to n = {plant.n}")
    offsets = np.cumsum([0] + list(blocks))
    Ts, T_invs, sigmas = [], [], []
    for lo, hi in zip(offsets[:-1], offsets[1:]):
        outside = np.concatenate([np.abs(X[lo:hi, :lo]).ravel(), np.abs(X[lo:hi, hi:]).ravel(),
                                  np.abs(Y[lo:hi, :lo]).ravel(), np.abs(Y[lo:hi, hi:]).ravel()])
        if outside.size and outside.max() > 1e-9 * max(np.abs(X).max(), np.abs(Y).max()):
            raise PreconditionError("structure-preserving balancing needs block-diagonal Gramians")
        T, T_inv, sigma = balancing_transform(X[lo:hi, lo:hi], Y[lo:hi, lo:hi])
        Ts.append(T)
        T_invs.append(T_inv)
        sigmas.append(sigma)
    T = scipy.linalg.block_diag(*Ts)
    T_inv = scipy.linalg.block_diag(*T_invs)
    sigma = np.concatenate(sigmas)
    balanced_plant, balanced_vertices = transform_plant(plant, vertices, T, T_inv)
    residual = balancing_residual(X, Y, T, T_inv, sigma)
    return BalancedRealization(T, T_inv, sigma, balanced_plant, balanced_vertices, kind,
                               list(blocks), residual)


@dataclass
class ReducedModel:
    r: int
    plant: PlantModel
    vertices: Optional[VertexSet]
    sigma: np.ndarray
    bound: float
    kept: List[int] = field(default_factory=list)
    certified: bool = False
    notes: List[str] = field(default_factory=list)

    @property
    def B1(self) -> np.ndarray:
        return self.plant.B

    @property
    def C1(self) -> np.ndarray:
        return self.plant.C

    def to_dict(self) -> Dict[str, object]:
        return {"r": self.r, "bound": self.bound, "certified": self.certified,
                "kept_states": self.kept, "B1": self.B1.tolist(), "C1": self.C1.tolist(),
                "notes": list(self.notes)}


def check_gap(sigma: np.ndarray, r: int):
    """Refuse truncation orders where sigma_r and sigma_{r+1} coincide"""
    if r < len(sigma) and sigma[r - 1] - sigma[r] <= GAP_TOLERANCE * max(1.0, sigma[0]):
        raise PreconditionError(f"sigma_{r} = {sigma[r - 1]:.12g} and sigma_{r + 1} = {sigma[r]:.12g} "
                                f"are not separated; choose another order")


def _leading_reduction(plant: PlantModel, vertices: Optional[VertexSet], r: int) -> Tuple[PlantModel, Optional[VertexSet]]:
    reduced = PlantModel(TruncatedField(plant.field, r), plant.B[:r, :], plant.C[:, :r],
                         plant.epsilon, f"{plant.name}_r{r}")
    return reduced, (vertices.leading_block(r) if vertices is not None else None)


def truncate(balanced: BalancedRealization, r: int) -> ReducedModel:
    """
    Keep the first r balanced states: reduced field x_r -> f1(x_r, 0), leading
    blocks of B, C and of every vertex.
    """
    n = balanced.n
    if not 1 <= r <= n:
        raise DimensionError(f"truncation order {r} outside 1..{n}")
    if balanced.blocks is not None:
        raise PreconditionError("structure-preserving realizations are truncated with truncate_blocks")
    check_gap(balanced.sigma, r)
    plant, vertices = _leading_reduction(balanced.plant, balanced.vertices, r)
    return ReducedModel(r, plant, vertices, balanced.sigma, error_bound(balanced.sigma, r),
                        list(range(r)))


def truncate_blocks(balanced: BalancedRealization, orders: Sequence[int]) -> ReducedModel:
    """Keep the leading orders[k] states of every block (structure-preserving truncation)"""
    if balanced.blocks is None or len(orders) != len(balanced.blocks):
        raise DimensionError("one order per block is required")
    offsets = np.cumsum([0] + list(balanced.blocks))
    kept: List[int] = []
    for k, (order, size) in enumerate(zip(orders, balanced.blocks)):
        if not 0 <= order <= size:
            raise DimensionError(f"block {k} has {size} states, cannot keep {order}")
        block_sigma = balanced.sigma[offsets[k]:offsets[k + 1]]
        if order:
            check_gap(block_sigma, order)
        kept.extend(range(offsets[k], offsets[k] + order))
    if not kept:
        raise DimensionError("truncation keeps no state")
    dropped = [i for i in range(balanced.n) if i not in kept]
    order_perm = kept + dropped
    P = np.eye(balanced.n)[order_perm]
    plant, vertices = transform_plant(balanced.plant, balanced.vertices, P, P.T)
    r = len(kept)
    reduced_plant, reduced_vertices = _leading_reduction(plant, vertices, r)
    bound = 2.0 * float(np.sum(balanced.sigma[dropped]))
    return ReducedModel(r, reduced_plant, reduced_vertices, balanced.sigma, bound, kept)


def error_bound(sigma: Sequence[float], r: int) -> float:
    """2 * (sigma_{r+1} + ... + sigma_n)"""
    sigma = np.asarray(sigma, dtype=float)
    if not 0 <= r <= len(sigma):
        raise DimensionError(f"order {r} outside 0..{len(sigma)}")
    return 2.0 * float(np.sum(sigma[r:]))


def bound_table(sigma: Sequence[float]) -> pd.DataFrame:
    """Error bound for every truncation order r = 1..n"""
    sigma = np.asarray(sigma, dtype=float)
    orders = np.arange(1, len(sigma) + 1)
    return pd.DataFrame({"r": orders, "sigma_r": sigma,
                         "bound": [error_bound(sigma, int(r)) for r in orders]})


def choose_order(sigma: Sequence[float], threshold: float) -> int:
    """Smallest r whose error bound does not exceed the threshold"""
    sigma = np.asarray(sigma, dtype=float)
    for r in range(1, len(sigma) + 1):
        if error_bound(sigma, r) <= threshold:
            return r
    return len(sigma)
