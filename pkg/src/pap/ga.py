"""Gradient alignment: trace statistics and the one-layer ReLU convolution model.

The second half of the module studies a single bias-free, stride-1
convolution followed by ReLU, written as ``y = relu(W x)`` with ``W`` the
unrolled (m x n) kernel matrix and loss ``L(x) = |y|^2 / m``. Two
consecutive lifting steps are compared with and without the update of the
first step (``ga_dot`` vs ``pga_dot``).
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

log = logging.getLogger(__name__)


@dataclass
class GradientTrace:
    """Flattened float64 copies of the gradients seen during generation.

    Steps ``1..dense`` are kept; after that every ``stride``-th step (never,
    when ``stride`` is 0).
    """

    method: str = ""
    model_hash: str = ""
    dense: int = 256
    stride: int = 0
    steps: list[int] = field(default_factory=list)
    vectors: list[np.ndarray] = field(default_factory=list)

    def wants(self, step: int) -> bool:
        return step <= self.dense or (self.stride > 0 and step % self.stride == 0)

    def record(self, step: int, grad: np.ndarray) -> None:
        if self.wants(step):
            self.steps.append(int(step))
            self.vectors.append(np.asarray(grad, dtype=np.float64).ravel().copy())

    def __len__(self) -> int:
        return len(self.vectors)

    def as_array(self) -> np.ndarray:
        if not self.vectors:
            return np.zeros((0, 0))
        return np.stack(self.vectors)


def ga_cosine(trace, consecutive: bool = False) -> float:
    """Mean off-diagonal cosine similarity of a gradient sequence.

    ``trace`` is a GradientTrace or an (N, D) array. With ``consecutive``
    only the pairs (i, i+1) are averaged. Zero vectors count as similarity 0
    against everything.
    """
    v = trace.as_array() if isinstance(trace, GradientTrace) else np.asarray(trace, dtype=np.float64)
    v = v.reshape(len(v), -1)
    n = len(v)
    if n < 2:
        raise ValueError("gradient alignment needs at least two gradients")
    norms = np.linalg.norm(v, axis=1)
    zero = norms == 0
    if zero.any():
        log.warning("%d zero-norm gradients in trace treated as similarity 0", int(zero.sum()))
    u = np.where(zero[:, None], 0.0, v / np.where(zero, 1.0, norms)[:, None])
    if consecutive:
        return float(np.mean(np.einsum("ij,ij->i", u[:-1], u[1:])))
    s = u @ u.T
    return float((s.sum() - np.trace(s)) / (n * (n - 1)))


# -- unrolled convolution -----------------------------------------------------


def _support(in_size: int, ks: int) -> np.ndarray:
    """Column index of each kernel tap for each output position: [m, ks*ks]."""
    out = in_size - ks + 1
    if out < 1:
        raise ValueError(f"kernel {ks} larger than input {in_size}")
    r, c = np.meshgrid(np.arange(out), np.arange(out), indexing="ij")
    a, b = np.meshgrid(np.arange(ks), np.arange(ks), indexing="ij")
    return ((r.ravel()[:, None] + a.ravel()[None]) * in_size + c.ravel()[:, None] + b.ravel()[None])


def unrolled_conv(kernel: np.ndarray, in_size: int) -> np.ndarray:
    """Matrix W with ``W @ im.ravel() == conv(im, kernel).ravel()`` (stride 1, no padding).

    ``kernel`` may be [ks, ks] or a stack [T, ks, ks]; the result is [m, n]
    or [T, m, n] with n = in_size**2 and m = (in_size - ks + 1)**2.
    """
    kernel = np.asarray(kernel, dtype=np.float64)
    single = kernel.ndim == 2
    k = kernel[None] if single else kernel
    ks = k.shape[-1]
    cols = _support(in_size, ks)
    m = cols.shape[0]
    w = np.zeros((k.shape[0], m, in_size * in_size))
    rows = np.repeat(np.arange(m), ks * ks)
    w[:, rows, cols.ravel()] = np.tile(k.reshape(k.shape[0], -1), (1, m))
    return w[0] if single else w


def lifting_loss(x: np.ndarray, w: np.ndarray) -> float:
    y = np.maximum(w @ x, 0)
    return float(y @ y / w.shape[0])


def lifting_grad(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    m = w.shape[0]
    return (2.0 / m) * (w.T @ np.maximum(w @ x, 0))


def _second_step_shift(x1, w, alpha, orthogonal_rows):
    m = w.shape[-2]
    if orthogonal_rows:
        u1 = np.einsum("...mn,...n->...m", w, x1)
        return (2.0 * alpha / m) * np.maximum(u1, 0) * np.einsum("...mn,...mn->...m", w, w)
    g1 = _grad(x1, w)
    return alpha * np.einsum("...mn,...n->...m", w, g1)


def _grad(x, w, shift=0.0):
    m = w.shape[-2]
    u = np.einsum("...mn,...n->...m", w, x) + shift
    return (2.0 / m) * np.einsum("...mn,...m->...n", w, np.maximum(u, 0))


def ga_dot(x1, x2, w, alpha: float, orthogonal_rows: bool = False) -> float:
    """Dot product of the first-step gradient with the second-step gradient.

    The second step is evaluated at ``x2 + alpha * dL/dx1``. With
    ``orthogonal_rows`` the shift keeps only the diagonal terms
    ``(2 alpha / m) relu(w_i x1) |w_i|^2`` (exact when distinct rows of W
    are orthogonal).
    """
    g1 = _grad(x1, w)
    g2 = _grad(x2, w, _second_step_shift(x1, w, alpha, orthogonal_rows))
    return np.einsum("...n,...n->...", g2, g1)


def pga_dot(x1, x2, w, alpha: float = 0.0) -> float:
    """Same as ``ga_dot`` but ignoring the first update (``alpha`` is unused)."""
    return np.einsum("...n,...n->...", _grad(x2, w), _grad(x1, w))


def ga_gap(x1, x2, w, alpha: float) -> np.ndarray:
    """``ga_dot - pga_dot`` as a sum of per-row terms, each non-negative.

    Row i contributes ``(2/m) (relu(u_i + alpha v_i) - relu(u_i)) v_i`` with
    ``u = W x2`` and ``v = W dL/dx1``.
    """
    m = w.shape[-2]
    v = np.einsum("...mn,...n->...m", w, _grad(x1, w))
    u = np.einsum("...mn,...n->...m", w, x2)
    return (2.0 / m) * np.sum((np.maximum(u + alpha * v, 0) - np.maximum(u, 0)) * v, axis=-1)


@dataclass
class TheoremResult:
    alpha: float
    num_trials: int
    mean_ga: float
    mean_pga: float
    stderr_ga: float
    stderr_pga: float
    mean_gap: float
    stderr_gap: float
    min_gap: float
    frac_nonnegative: float
    ga: np.ndarray = field(repr=False)
    pga: np.ndarray = field(repr=False)
    gap: np.ndarray = field(repr=False)

    def record(self) -> dict:
        d = asdict(self)
        for k in ("ga", "pga", "gap"):
            d.pop(k)
        return d


def _draws(in_size, ks, num_trials, seed, chunk):
    for start in range(0, num_trials, chunk):
        size = min(chunk, num_trials - start)
        rng = np.random.default_rng([seed, start // chunk])
        kernels = rng.standard_normal((size, ks, ks))
        x1 = rng.standard_normal((size, in_size * in_size))
        x2 = rng.standard_normal((size, in_size * in_size))
        yield unrolled_conv(kernels, in_size), x1, x2


def _stderr(a: np.ndarray) -> float:
    return float(a.std(ddof=1) / np.sqrt(len(a))) if len(a) > 1 else 0.0


def theorem_check(
    in_size: int = 8,
    ks: int = 3,
    alpha: float = 0.1,
    num_trials: int = 100_000,
    seed: int = 0,
    chunk: int = 4096,
) -> TheoremResult:
    """Monte-Carlo estimate of GA and PGA with standard-normal kernel and inputs.

    Draws depend only on ``seed`` (not on ``alpha``), so sweeps over alpha
    share the same samples.
    """
    ga, pga, gap = [], [], []
    for w, x1, x2 in _draws(in_size, ks, num_trials, seed, chunk):
        ga.append(ga_dot(x1, x2, w, alpha))
        pga.append(pga_dot(x1, x2, w))
        gap.append(ga_gap(x1, x2, w, alpha))
    ga, pga, gap = np.concatenate(ga), np.concatenate(pga), np.concatenate(gap)
    return TheoremResult(
        alpha, num_trials,
        float(ga.mean()), float(pga.mean()), _stderr(ga), _stderr(pga),
        float(gap.mean()), _stderr(gap), float(gap.min()), float(np.mean(gap >= 0)),
        ga, pga, gap,
    )


@dataclass
class Lemma1Result:
    ks: int
    num_trials: int
    diag_mean: float
    diag_stderr: float
    offdiag_mean: float
    offdiag_stderr: float
    matrix: np.ndarray = field(repr=False)

    def record(self) -> dict:
        d = asdict(self)
        d.pop("matrix")
        return d


def lemma1_check(in_size: int = 8, ks: int = 3, num_trials: int = 10_000, seed: int = 0, chunk: int = 2048) -> Lemma1Result:
    """Empirical E[w_i w_j^T] over random standard-normal kernels."""
    m = (in_size - ks + 1) ** 2
    total = np.zeros((m, m))
    diag, off = [], []
    mask = ~np.eye(m, dtype=bool)
    for start in range(0, num_trials, chunk):
        size = min(chunk, num_trials - start)
        rng = np.random.default_rng([seed, start // chunk])
        w = unrolled_conv(rng.standard_normal((size, ks, ks)), in_size)
        g = w @ w.transpose(0, 2, 1)
        total += g.sum(axis=0)
        diag.append(np.einsum("tii->t", g) / m)
        off.append(g[:, mask].mean(axis=1) if m > 1 else np.zeros(size))
    diag, off = np.concatenate(diag), np.concatenate(off)
    return Lemma1Result(
        ks, num_trials, float(diag.mean()), _stderr(diag), float(off.mean()), _stderr(off), total / num_trials
    )


def lemma2_probability(n: int, support: int) -> float:
    """P(two random ``support``-subsets of n positions are disjoint)."""
    if n < 2 * support:
        return 0.0
    return math.comb(n - support, support) / math.comb(n, support)


def geometric_disjoint_fraction(in_size: int, ks: int) -> float:
    """Fraction of distinct row pairs of the unrolled conv with disjoint supports."""
    sup = _support(in_size, ks)
    m = len(sup)
    if m < 2:
        return float("nan")
    occ = np.zeros((m, in_size * in_size), dtype=bool)
    occ[np.repeat(np.arange(m), ks * ks), sup.ravel()] = True
    overlap = occ.astype(np.int64) @ occ.T.astype(np.int64)
    disjoint = (overlap == 0).sum()  # diagonal never disjoint
    return float(disjoint / (m * (m - 1)))


@dataclass
class Lemma2Result:
    n: int
    support: int
    draws: int
    analytic: float
    frequency: float
    stderr: float
    geometric_fraction: float | None

    def record(self) -> dict:
        return asdict(self)


def lemma2_check(n: int = 36, ks: int = 2, draws: int = 100_000, seed: int = 0, support: int | None = None) -> Lemma2Result:
    """Analytic vs sampled disjointness probability of two random supports.

    ``support`` overrides ``ks * ks`` (useful for non-square support sizes).
    The disjoint-row fraction of the real unrolled convolution is reported
    when n is a perfect square.
    """
    s = ks * ks if support is None else support
    analytic = lemma2_probability(n, s)
    rng = np.random.default_rng(seed)
    hits = 0
    done = 0
    chunk = 20_000
    while done < draws:
        size = min(chunk, draws - done)
        a = np.argsort(rng.random((size, n)), axis=1)[:, :s]
        b = np.argsort(rng.random((size, n)), axis=1)[:, :s]
        ma = np.zeros((size, n), dtype=bool)
        mb = np.zeros((size, n), dtype=bool)
        np.put_along_axis(ma, a, True, axis=1)
        np.put_along_axis(mb, b, True, axis=1)
        hits += int((~(ma & mb).any(axis=1)).sum())
        done += size
    freq = hits / draws
    stderr = math.sqrt(max(analytic * (1 - analytic), 1e-300) / draws)
    side = math.isqrt(n)
    geo = None
    if support is None and side * side == n and side >= ks:
        geo = geometric_disjoint_fraction(side, ks)
    return Lemma2Result(n, s, draws, analytic, freq, stderr, geo)


def write_analysis_json(path, ga_values: dict, checks: dict | None = None) -> None:
    doc = {"ga": {k: float(v) for k, v in sorted(ga_values.items())}}
    if checks:
        doc["checks"] = checks
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
