"""SVD split of a radar matrix into wall, target and noise subspaces.

Singular components at or above ``mean(s) - alpha * std(s)`` are wall clutter;
the remaining spectrum is cut by an AIC model-order estimate into target
(large) and noise (flat tail) components.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

AIC_FLOOR = 1e-300


@dataclass(frozen=True)
class SeparationParams:
    alpha: float = 1.0
    max_rank: int | None = None

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if self.max_rank is not None and self.max_rank < 1:
            raise ValueError("max_rank must be >= 1")


@dataclass
class SubspaceTriple:
    target: np.ndarray
    wall: np.ndarray
    noise: np.ndarray
    sigma: np.ndarray
    sigma_d: float
    aic_index: int | None
    wall_idx: np.ndarray
    target_idx: np.ndarray
    noise_idx: np.ndarray

    def report(self) -> dict:
        return {
            "sigma": self.sigma.tolist(),
            "sigma_d": self.sigma_d,
            "aic_index": self.aic_index,
            "wall_idx": self.wall_idx.tolist(),
            "target_idx": self.target_idx.tolist(),
            "noise_idx": self.noise_idx.tolist(),
        }


def svd_full(m: np.ndarray):
    """Thin SVD ``m = U diag(s) V^H`` with ``s`` descending; returns ``(U, s, V)``."""
    m = np.asarray(m)
    if m.ndim != 2 or m.size == 0:
        raise ValueError(f"svd needs a non-empty matrix, got shape {m.shape}")
    try:
        u, s, vh = np.linalg.svd(m, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(f"SVD did not converge for a {m.shape[0]}x{m.shape[1]} matrix") from exc
    return u, s, vh.conj().T


def wall_threshold(sigma: np.ndarray, alpha: float) -> float:
    """``mean(sigma) - alpha * std(sigma)`` with the population standard deviation."""
    sigma = np.asarray(sigma, dtype=np.float64)
    if sigma.size < 2:
        raise ValueError("wall threshold needs at least 2 singular values")
    return float(sigma.mean() - alpha * sigma.std())


def aic_values(sigma: np.ndarray, n_obs: int) -> np.ndarray:
    """AIC(i) for i = 1..M-1, eigenvalues taken as ``sigma**2``."""
    lam = np.maximum(np.asarray(sigma, dtype=np.float64) ** 2, AIC_FLOOR)
    M = lam.size
    out = np.empty(M - 1)
    for i in range(1, M):
        tail = lam[i:]
        k = M - i
        log_ratio = k * np.log(tail.mean()) - np.log(tail).sum()
        out[i - 1] = n_obs * log_ratio + 0.5 * (2 * M - i) * i * np.log(n_obs)
    return out


def aic_noise_index(sigma: np.ndarray, n_obs: int) -> int:
    """Number of signal components; entries past it are noise.

    Ties go to the smallest index.  A completely flat spectrum returns ``M - 1``.
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    M = sigma.size
    if M < 2:
        raise ValueError("AIC needs at least 2 singular values")
    if n_obs < 2:
        raise ValueError("AIC needs at least 2 observations")
    if np.all(sigma == sigma[0]):
        return M - 1
    return int(np.argmin(aic_values(sigma, n_obs))) + 1


def _partial(u, s, v, idx, shape, dtype):
    if idx.size == 0:
        return np.zeros(shape, dtype=dtype)
    return (u[:, idx] * s[idx]) @ v[:, idx].conj().T


def svd_separate(m: np.ndarray, p: SeparationParams = SeparationParams(), n_obs: int | None = None) -> SubspaceTriple:
    m = np.asarray(m)
    u, s, v = svd_full(m)
    n_obs = m.shape[0] if n_obs is None else int(n_obs)
    order = np.arange(s.size)
    if p.max_rank is not None:
        # components past the cap are treated as noise outright
        s_eff = s[: p.max_rank]
    else:
        s_eff = s
    if s_eff.size >= 2:
        sigma_d = wall_threshold(s_eff, p.alpha)
    else:
        sigma_d = float(s_eff[0]) if s_eff.size else 0.0
    wall = order[: s_eff.size][s_eff >= sigma_d]
    rest = order[: s_eff.size][s_eff < sigma_d]
    aic_index = None
    if rest.size >= 2:
        aic_index = aic_noise_index(s[rest], n_obs)
        target, noise = rest[:aic_index], rest[aic_index:]
    else:
        target, noise = rest, rest[:0]
    noise = np.concatenate([noise, order[s_eff.size :]])
    dtype = np.result_type(m.dtype, np.float64)
    return SubspaceTriple(
        target=_partial(u, s, v, target, m.shape, dtype),
        wall=_partial(u, s, v, wall, m.shape, dtype),
        noise=_partial(u, s, v, noise, m.shape, dtype),
        sigma=s,
        sigma_d=sigma_d,
        aic_index=aic_index,
        wall_idx=wall,
        target_idx=target,
        noise_idx=noise,
    )
