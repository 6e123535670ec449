"""Reference implementations used only by the tests.

Each one is written independently of the package code it checks: plain loops,
textbook formulas, no shared helpers.
"""

import math

import numpy as np


def jacobi_svd(a, tol=1e-15, max_sweeps=80):
    """One-sided (Hestenes) Jacobi SVD of a complex matrix with rows >= cols.

    Returns ``(U, s, V)`` with ``s`` descending.
    """
    u = np.array(a, dtype=np.complex128)
    n = u.shape[1]
    v = np.eye(n, dtype=np.complex128)
    for _ in range(max_sweeps):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                alpha = np.vdot(u[:, p], u[:, p]).real
                beta = np.vdot(u[:, q], u[:, q]).real
                gamma = np.vdot(u[:, p], u[:, q])
                g = abs(gamma)
                if g <= tol * math.sqrt(alpha * beta) or g == 0.0:
                    continue
                rotated = True
                phase = gamma / g
                uq = u[:, q] * np.conj(phase)
                vq = v[:, q] * np.conj(phase)
                zeta = (beta - alpha) / (2.0 * g)
                t = (1.0 if zeta >= 0 else -1.0) / (abs(zeta) + math.sqrt(1.0 + zeta * zeta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = c * t
                up, vp = u[:, p].copy(), v[:, p].copy()
                u[:, p], u[:, q] = c * up - s * uq, s * up + c * uq
                v[:, p], v[:, q] = c * vp - s * vq, s * vp + c * vq
        if not rotated:
            break
    sig = np.linalg.norm(u, axis=0)
    order = np.argsort(-sig, kind="stable")
    sig, u, v = sig[order], u[:, order], v[:, order]
    nz = sig > 0
    u[:, nz] = u[:, nz] / sig[nz]
    return u, sig, v


def aic_brute_force(sigma, n_obs):
    """Literal AIC(i) for i = 1..M-1 with eigenvalues sigma**2, evaluated with products."""
    lam = [max(float(x) ** 2, 1e-300) for x in sigma]
    m = len(lam)
    out = []
    for i in range(1, m):
        tail = lam[i:]
        k = len(tail)
        am = sum(tail) / k
        prod = 1.0
        for x in tail:
            prod *= x / am  # ratio form keeps the product in range
        out.append(n_obs * math.log(1.0 / prod) + 0.5 * (2 * m - i) * i * math.log(n_obs))
    return out


def dft_inverse(row, n):
    """Zero-padded inverse DFT by the defining sum, 1/n scaling."""
    row = np.asarray(row, dtype=np.complex128)
    k = np.arange(row.size)
    return np.array([np.sum(row * np.exp(2j * np.pi * k * j / n)) / n for j in range(n)])


def bilinear_pixel_centres(n_in, n_out):
    """Plain (non-antialiased) bilinear weights, half-pixel centres, edge clamped."""
    w = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        x = (i + 0.5) * scale - 0.5
        x = min(max(x, 0.0), n_in - 1)
        lo = int(math.floor(x))
        hi = min(lo + 1, n_in - 1)
        f = x - lo
        w[i, lo] += 1 - f
        w[i, hi] += f
    return w


def central_difference(f, x, eps=1e-5):
    """Numerical gradient of scalar ``f`` at array ``x`` (every coordinate)."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = f(x)
        flat[i] = old - eps
        fm = f(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * eps)
    return g


def rel_err(a, b, floor=1e-8):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))
