"""Kernel scoring functions used as softmax logits, plus their analytic gradients.

Nine kernels are supported, identified by short names:

    lin   inner product
    log   -log(||w - h||^p + 1)
    pow   -||w - h||^p
    pol   (alpha * w.h + c)^p, p a positive integer
    rbf   exp(-gamma * ||w - h||^2)
    ssg   log-integral of two spherical Gaussians (closed form)
    mog   sum of ssg terms over all Gaussian pairs (log-of-sum variant
          available behind ``mog_log_of_sum``)
    hpb   negative hyperbolic (Poincare ball) distance
    wav   cos(||w - h||^2 / a) * exp(-||w - h||^2 / b)

Every operation here is a pure function of its inputs. Batched variants
compute squared distances from cached norms and one inner-product matrix
(the norm-expansion trick), never materializing per-pair difference vectors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import (
    DimensionMismatch,
    HpbOutsideBall,
    NonFiniteScore,
    WrongKernelKind,
)

KINDS = ("lin", "log", "pow", "pol", "rbf", "ssg", "mog", "hpb", "wav")

# Kernels whose score is a function of the squared distance ||w - h||^2
# (hpb additionally depends on the two norms).
DISTANCE_KINDS = ("log", "pow", "rbf", "wav", "hpb")

# Kernels that take Gaussian parameters instead of plain vectors.
GAUSSIAN_KINDS = ("ssg", "mog")

# Margin kept between hpb vectors and the unit sphere.
BALL_MARGIN = 1e-5

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class KernelSpec:
    """One kernel kind plus its hyperparameters.

    ``alpha`` and ``gamma`` default to None, meaning 1/d resolved against
    the vector dimension at evaluation time (1 when no dimension applies,
    e.g. radial curve emission).
    """

    kind: str
    p: float = 2.0
    alpha: Optional[float] = None
    c: float = 1.0
    gamma: Optional[float] = None
    a: float = 1.0
    b: float = 1.0
    num_gauss: int = 2
    learn_variances: bool = True
    mog_log_of_sum: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if self.kind in ("log", "pow", "pol"):
            if not self.p > 0:
                raise ValueError(f"{self.kind}: p must be positive, got {self.p}")
            if self.kind == "pol" and (self.p != int(self.p)):
                raise ValueError(f"pol: p must be a positive integer, got {self.p}")
        if self.gamma is not None and not self.gamma > 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        if not self.a > 0 or not self.b > 0:
            raise ValueError("a and b must be positive")
        if self.num_gauss < 1:
            raise ValueError("num_gauss must be >= 1")

    def resolved_alpha(self, d: Optional[int] = None) -> float:
        if self.alpha is not None:
            return self.alpha
        return 1.0 / d if d else 1.0

    def resolved_gamma(self, d: Optional[int] = None) -> float:
        if self.gamma is not None:
            return self.gamma
        return 1.0 / d if d else 1.0

    def to_dict(self) -> dict:
        out = {"kind": self.kind}
        for name in ("p", "alpha", "c", "gamma", "a", "b", "num_gauss",
                     "learn_variances", "mog_log_of_sum"):
            out[name] = getattr(self, name)
        return out

    @staticmethod
    def from_dict(d: dict) -> "KernelSpec":
        return KernelSpec(**d)


@dataclass
class GaussianParams:
    """A spherical Gaussian: mean vector plus a scalar log-variance.

    The variance is stored in the log domain so sigma^2 > 0 holds by
    construction.
    """

    mean: np.ndarray
    log_var: float = 0.0

    @property
    def var(self) -> float:
        return math.exp(self.log_var)


@dataclass
class KernelGrad:
    """Analytic partial derivatives of a kernel score.

    For ssg/mog, ``d_w``/``d_h`` are gradients with respect to the Gaussian
    means (shape (G, d) for mog) and the log-variance gradients are filled
    in. ``singular`` flags the zero subgradient returned at the w == h
    singularity of log/pow with p < 2 and of hpb.
    """

    d_w: np.ndarray
    d_h: np.ndarray
    d_w_log_var: Optional[np.ndarray] = None
    d_h_log_var: Optional[np.ndarray] = None
    singular: bool = False


def _as_vec(x, name: str) -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise DimensionMismatch(f"{name} must be a 1-D vector, got shape {v.shape}")
    return v


def _check_pair(w, h):
    w = _as_vec(w, "w")
    h = _as_vec(h, "h")
    if w.shape != h.shape:
        raise DimensionMismatch(f"w has shape {w.shape}, h has shape {h.shape}")
    return w, h


def _check_finite(value, context: str):
    if not np.all(np.isfinite(value)):
        raise NonFiniteScore(f"non-finite score in {context}")
    return value


def _sq_dist(w_norm_sq, h_norm_sq, dot):
    """Norm-expansion squared distance, clamped at 0 against FP cancellation."""
    return np.maximum(w_norm_sq + h_norm_sq - 2.0 * dot, 0.0)


# ---------------------------------------------------------------------------
# Radial profiles phi(x), x = squared distance, for log/pow/rbf/wav.
# ---------------------------------------------------------------------------

def _phi(spec: KernelSpec, x, gamma: float):
    if spec.kind == "pow":
        return -np.power(x, 0.5 * spec.p)
    if spec.kind == "log":
        return -np.log1p(np.power(x, 0.5 * spec.p))
    if spec.kind == "rbf":
        return np.exp(-gamma * np.asarray(x, dtype=np.float64))
    if spec.kind == "wav":
        x = np.asarray(x, dtype=np.float64)
        return np.cos(x / spec.a) * np.exp(-x / spec.b)
    raise WrongKernelKind(f"{spec.kind} has no radial profile")


def _dphi_dx(spec: KernelSpec, x, gamma: float):
    """d phi / d x. At x = 0 with p < 2 the result is non-finite; callers
    mask those entries and raise the singular flag."""
    x = np.asarray(x, dtype=np.float64)
    if spec.kind == "pow":
        with np.errstate(divide="ignore", invalid="ignore"):
            return -0.5 * spec.p * np.power(x, 0.5 * spec.p - 1.0)
    if spec.kind == "log":
        with np.errstate(divide="ignore", invalid="ignore"):
            xp = np.power(x, 0.5 * spec.p)
            return -0.5 * spec.p * np.power(x, 0.5 * spec.p - 1.0) / (xp + 1.0)
    if spec.kind == "rbf":
        return -gamma * np.exp(-gamma * x)
    if spec.kind == "wav":
        decay = np.exp(-x / spec.b)
        return -decay * (np.sin(x / spec.a) / spec.a + np.cos(x / spec.a) / spec.b)
    raise WrongKernelKind(f"{spec.kind} has no radial profile")


def _radial_singular_at_zero(spec: KernelSpec) -> bool:
    return spec.kind in ("log", "pow") and spec.p < 2.0


def radial_profile(spec: KernelSpec, x):
    """(score, d score / d x) as a function of squared distance x.

    Used by the curve emitter. hpb is profiled at zero vector norms,
    ssg/mog at d = 1 with unit variances. alpha/gamma resolve to 1 here.
    """
    x = np.asarray(x, dtype=np.float64)
    kind = spec.kind
    if kind in ("log", "pow", "rbf", "wav"):
        gamma = spec.resolved_gamma(None)
        return _phi(spec, x, gamma), _dphi_dx(spec, x, gamma)
    if kind == "hpb":
        z = 1.0 + 2.0 * x
        s = -np.arccosh(z)
        with np.errstate(divide="ignore"):
            ds = -2.0 / np.sqrt(z * z - 1.0)
        return s, ds
    if kind == "ssg":
        sv = 2.0  # both log-variances 0
        return (-0.5 * (LOG_2PI + math.log(sv)) - x / (2.0 * sv),
                np.full_like(x, -1.0 / (2.0 * sv)))
    if kind == "mog":
        g = spec.num_gauss
        sv = 2.0
        term = -0.5 * (LOG_2PI + math.log(sv)) - x / (2.0 * sv)
        if spec.mog_log_of_sum:
            # equal pairs collapse: LSE of identical terms
            return term, np.full_like(x, -1.0 / (2.0 * sv))
        return g * g * term, np.full_like(x, -g * g / (2.0 * sv))
    if kind == "lin":
        # profiled against the dot product instead of a distance
        return x.copy(), np.ones_like(x)
    if kind == "pol":
        alpha = spec.resolved_alpha(None)
        base = alpha * x + spec.c
        p = int(spec.p)
        return base ** p, p * alpha * base ** (p - 1)
    raise WrongKernelKind(kind)


# ---------------------------------------------------------------------------
# Scalar score / grad
# ---------------------------------------------------------------------------

def _ssg_log_integral(x: float, s: float, d: int) -> float:
    """log of the integral of two spherical Gaussians with squared mean
    distance x and summed variance s, in d dimensions."""
    return -0.5 * d * (LOG_2PI + math.log(s)) - x / (2.0 * s)


def _gauss_list(g, spec: KernelSpec, name: str) -> list:
    if isinstance(g, GaussianParams):
        g = [g]
    if g is None or len(g) != spec.num_gauss:
        raise DimensionMismatch(
            f"{name}: mog expects {spec.num_gauss} GaussianParams")
    return list(g)


def score(spec: KernelSpec, w=None, h=None, w_gauss=None, h_gauss=None) -> float:
    """S_kind(w, h) per the kernel definitions in the module docstring.

    For ssg pass one GaussianParams per side, for mog a sequence of
    ``spec.num_gauss`` of them; w/h are ignored for those kinds.
    """
    kind = spec.kind
    if kind == "ssg":
        if not isinstance(w_gauss, GaussianParams) or not isinstance(h_gauss, GaussianParams):
            raise DimensionMismatch("ssg requires GaussianParams for both sides")
        mw, mh = _check_pair(w_gauss.mean, h_gauss.mean)
        d = mw.shape[0]
        s = w_gauss.var + h_gauss.var
        x = float(np.dot(mw - mh, mw - mh))
        return float(_check_finite(_ssg_log_integral(x, s, d), "ssg"))
    if kind == "mog":
        gw = _gauss_list(w_gauss, spec, "w_gauss")
        gh = _gauss_list(h_gauss, spec, "h_gauss")
        d = _as_vec(gw[0].mean, "mean").shape[0]
        terms = []
        for gi in gw:
            for gj in gh:
                mi, mj = _check_pair(gi.mean, gj.mean)
                s = gi.var + gj.var
                x = float(np.dot(mi - mj, mi - mj))
                terms.append(_ssg_log_integral(x, s, d))
        if spec.mog_log_of_sum:
            terms = np.asarray(terms)
            m = terms.max()
            val = m + math.log(np.exp(terms - m).sum()) - 2.0 * math.log(spec.num_gauss)
        else:
            val = float(sum(terms))
        return float(_check_finite(val, "mog"))

    w, h = _check_pair(w, h)
    d = w.shape[0]
    if kind == "lin":
        return float(_check_finite(np.dot(w, h), "lin"))
    if kind == "pol":
        alpha = spec.resolved_alpha(d)
        base = alpha * float(np.dot(w, h)) + spec.c
        return float(_check_finite(base ** int(spec.p), "pol"))
    if kind == "hpb":
        wn = float(np.dot(w, w))
        hn = float(np.dot(h, h))
        if wn >= 1.0 or hn >= 1.0:
            raise HpbOutsideBall(f"norms^2 ({wn:.4g}, {hn:.4g}) must be < 1")
        x = _sq_dist(wn, hn, float(np.dot(w, h)))
        z = max(1.0 + 2.0 * x / ((1.0 - wn) * (1.0 - hn)), 1.0)
        return float(_check_finite(-math.acosh(z), "hpb"))
    # radial kernels
    diff = w - h
    x = float(np.dot(diff, diff))
    gamma = spec.resolved_gamma(d)
    return float(_check_finite(_phi(spec, x, gamma), spec.kind))


def score_via_trick(spec: KernelSpec, w_norm_sq: float, h_norm_sq: float,
                    dot: float) -> float:
    """Score a distance-based kernel from cached norms and a dot product.

    The squared distance is recovered via the norm expansion
    ||w - h||^2 = ||w||^2 + ||h||^2 - 2 w.h, clamped at 0.
    """
    if spec.kind not in DISTANCE_KINDS:
        raise WrongKernelKind(
            f"norm-expansion trick is vacuous for {spec.kind!r}")
    if w_norm_sq < 0 or h_norm_sq < 0:
        raise DimensionMismatch("squared norms must be nonnegative")
    x = float(_sq_dist(w_norm_sq, h_norm_sq, dot))
    if spec.kind == "hpb":
        if w_norm_sq >= 1.0 or h_norm_sq >= 1.0:
            raise HpbOutsideBall("norms^2 must be < 1")
        z = max(1.0 + 2.0 * x / ((1.0 - w_norm_sq) * (1.0 - h_norm_sq)), 1.0)
        return float(_check_finite(-math.acosh(z), "hpb"))
    gamma = spec.resolved_gamma(None) if spec.gamma is not None else None
    # gamma default 1/d needs the dimension, which the trick does not see;
    # callers relying on the default must resolve it into the spec first.
    if spec.kind == "rbf" and gamma is None:
        raise WrongKernelKind("rbf via trick needs an explicit gamma")
    return float(_check_finite(_phi(spec, x, gamma), spec.kind))


def grad(spec: KernelSpec, w=None, h=None, w_gauss=None, h_gauss=None) -> KernelGrad:
    """Analytic gradient of score() with respect to its vector arguments
    (and log-variances for ssg/mog)."""
    kind = spec.kind
    if kind == "ssg":
        mw, mh = _check_pair(w_gauss.mean, h_gauss.mean)
        d = mw.shape[0]
        s = w_gauss.var + h_gauss.var
        diff = mw - mh
        x = float(np.dot(diff, diff))
        d_mw = -diff / s
        ds = -0.5 * d / s + x / (2.0 * s * s)
        return KernelGrad(
            d_w=d_mw, d_h=-d_mw,
            d_w_log_var=np.float64(ds * w_gauss.var),
            d_h_log_var=np.float64(ds * h_gauss.var))
    if kind == "mog":
        gw = _gauss_list(w_gauss, spec, "w_gauss")
        gh = _gauss_list(h_gauss, spec, "h_gauss")
        G = spec.num_gauss
        d = _as_vec(gw[0].mean, "mean").shape[0]
        ell = np.empty((G, G))
        for i, gi in enumerate(gw):
            for j, gj in enumerate(gh):
                mi, mj = _check_pair(gi.mean, gj.mean)
                s = gi.var + gj.var
                x = float(np.dot(mi - mj, mi - mj))
                ell[i, j] = _ssg_log_integral(x, s, d)
        if spec.mog_log_of_sum:
            wgt = np.exp(ell - ell.max())
            wgt /= wgt.sum()
        else:
            wgt = np.ones((G, G))
        d_w = np.zeros((G, d))
        d_h = np.zeros((G, d))
        d_wlv = np.zeros(G)
        d_hlv = np.zeros(G)
        for i, gi in enumerate(gw):
            for j, gj in enumerate(gh):
                s = gi.var + gj.var
                diff = np.asarray(gi.mean, dtype=np.float64) - np.asarray(gj.mean, dtype=np.float64)
                x = float(np.dot(diff, diff))
                ds = -0.5 * d / s + x / (2.0 * s * s)
                d_w[i] += wgt[i, j] * (-diff / s)
                d_h[j] += wgt[i, j] * (diff / s)
                d_wlv[i] += wgt[i, j] * ds * gi.var
                d_hlv[j] += wgt[i, j] * ds * gj.var
        return KernelGrad(d_w=d_w, d_h=d_h, d_w_log_var=d_wlv, d_h_log_var=d_hlv)

    w, h = _check_pair(w, h)
    d = w.shape[0]
    if kind == "lin":
        return KernelGrad(d_w=h.copy(), d_h=w.copy())
    if kind == "pol":
        alpha = spec.resolved_alpha(d)
        p = int(spec.p)
        base = alpha * float(np.dot(w, h)) + spec.c
        coef = p * alpha * base ** (p - 1)
        return KernelGrad(d_w=coef * h, d_h=coef * w)
    if kind == "hpb":
        wn = float(np.dot(w, w))
        hn = float(np.dot(h, h))
        if wn >= 1.0 or hn >= 1.0:
            raise HpbOutsideBall(f"norms^2 ({wn:.4g}, {hn:.4g}) must be < 1")
        A = 1.0 - wn
        B = 1.0 - hn
        x = _sq_dist(wn, hn, float(np.dot(w, h)))
        z = 1.0 + 2.0 * x / (A * B)
        if z <= 1.0:
            # distance kink at w == h: documented zero subgradient
            return KernelGrad(d_w=np.zeros(d), d_h=np.zeros(d), singular=True)
        coef = -1.0 / math.sqrt(z * z - 1.0)
        dz_dw = 4.0 * (w - h) / (A * B) + 4.0 * x * w / (A * A * B)
        dz_dh = 4.0 * (h - w) / (A * B) + 4.0 * x * h / (A * B * B)
        return KernelGrad(d_w=coef * dz_dw, d_h=coef * dz_dh)
    # radial kernels
    diff = w - h
    x = float(np.dot(diff, diff))
    if x == 0.0 and _radial_singular_at_zero(spec):
        return KernelGrad(d_w=np.zeros(d), d_h=np.zeros(d), singular=True)
    gamma = spec.resolved_gamma(d)
    dphi = float(_dphi_dx(spec, x, gamma))
    return KernelGrad(d_w=2.0 * dphi * diff, d_h=-2.0 * dphi * diff)


# ---------------------------------------------------------------------------
# Batched logits and the matching backward pass
# ---------------------------------------------------------------------------

@dataclass
class LogitCache:
    """Intermediates of forward_logits needed by backward_logits."""

    spec: KernelSpec
    W: np.ndarray
    H: np.ndarray
    logits: np.ndarray
    dots: Optional[np.ndarray] = None
    x: Optional[np.ndarray] = None
    extras: dict = field(default_factory=dict)


def forward_logits(spec: KernelSpec, W: np.ndarray, H: np.ndarray,
                   word_log_vars: Optional[np.ndarray] = None,
                   comp_log_vars: Optional[np.ndarray] = None) -> tuple:
    """Logit matrix L with L[b, v] = score(spec, W[:, v], H[b]).

    W is d x V (columns are word vectors), H is B x d. ssg expects
    ``word_log_vars`` of shape (V,) and a scalar ``comp_log_vars``; mog
    expects (V, G) and (G,). Returns (L, LogitCache).
    """
    W = np.asarray(W, dtype=np.float64)
    H = np.asarray(H, dtype=np.float64)
    if W.ndim != 2 or H.ndim != 2 or W.shape[0] != H.shape[1]:
        raise DimensionMismatch(f"W {W.shape} vs H {H.shape}")
    d, V = W.shape
    if V < 2:
        raise DimensionMismatch("need V >= 2")
    kind = spec.kind
    dots = H @ W  # B x V
    cache = LogitCache(spec=spec, W=W, H=H, logits=None, dots=dots)

    if kind == "lin":
        L = dots
    elif kind == "pol":
        alpha = spec.resolved_alpha(d)
        p = int(spec.p)
        base = alpha * dots + spec.c
        L = base ** p
        cache.extras["base"] = base
        cache.extras["alpha"] = alpha
    else:
        wn = np.einsum("dv,dv->v", W, W)
        hn = np.einsum("bd,bd->b", H, H)
        x = _sq_dist(wn[None, :], hn[:, None], dots)
        cache.x = x
        if kind in ("log", "pow", "rbf", "wav"):
            gamma = spec.resolved_gamma(d)
            L = _phi(spec, x, gamma)
            cache.extras["gamma"] = gamma
        elif kind == "hpb":
            if np.any(wn >= 1.0):
                raise HpbOutsideBall(f"word column {int(np.argmax(wn >= 1.0))} has norm >= 1")
            if np.any(hn >= 1.0):
                raise HpbOutsideBall(f"context row {int(np.argmax(hn >= 1.0))} has norm >= 1")
            A = 1.0 - wn   # V
            Bn = 1.0 - hn  # B
            z = np.maximum(1.0 + 2.0 * x / (Bn[:, None] * A[None, :]), 1.0)
            L = -np.arccosh(z)
            cache.extras.update(A=A, Bn=Bn, z=z)
        elif kind == "ssg":
            sv = np.exp(np.asarray(word_log_vars, dtype=np.float64)) + math.exp(float(comp_log_vars))
            L = -0.5 * d * (LOG_2PI + np.log(sv))[None, :] - x / (2.0 * sv)[None, :]
            cache.extras.update(sv=sv, word_log_vars=np.asarray(word_log_vars, dtype=np.float64),
                                comp_log_vars=float(comp_log_vars))
        elif kind == "mog":
            wlv = np.asarray(word_log_vars, dtype=np.float64)  # V x G
            clv = np.asarray(comp_log_vars, dtype=np.float64)  # G
            s = np.exp(wlv)[:, :, None] + np.exp(clv)[None, None, :]  # V x G x G
            if spec.mog_log_of_sum:
                ell = (-0.5 * d * (LOG_2PI + np.log(s))[None, :, :, :]
                       - x[:, :, None, None] / (2.0 * s)[None, :, :, :])  # B x V x G x G
                flat = ell.reshape(ell.shape[0], ell.shape[1], -1)
                m = flat.max(axis=2)
                L = m + np.log(np.exp(flat - m[:, :, None]).sum(axis=2)) \
                    - 2.0 * math.log(spec.num_gauss)
                cache.extras["ell"] = ell
            else:
                c1 = (LOG_2PI + np.log(s)).sum(axis=(1, 2))  # V
                c2 = (1.0 / (2.0 * s)).sum(axis=(1, 2))      # V
                L = -0.5 * d * c1[None, :] - x * c2[None, :]
            cache.extras.update(s=s, wlv=wlv, clv=clv)
        else:
            raise WrongKernelKind(kind)

    if not np.all(np.isfinite(L)):
        b, v = np.argwhere(~np.isfinite(L))[0]
        raise NonFiniteScore(f"non-finite {kind} logit at (b={b}, v={v})")
    cache.logits = L
    return L, cache


def batch_logits(spec: KernelSpec, W: np.ndarray, H: np.ndarray,
                 word_log_vars=None, comp_log_vars=None) -> np.ndarray:
    """forward_logits without the cache."""
    L, _ = forward_logits(spec, W, H, word_log_vars, comp_log_vars)
    return L


def backward_logits(spec: KernelSpec, cache: LogitCache, dL: np.ndarray):
    """Backpropagate dLoss/dL through forward_logits.

    Returns (dW, dH, d_word_log_vars, d_comp_log_vars); the last two are
    None for kernels without Gaussian parameters.
    """
    W, H = cache.W, cache.H
    d = W.shape[0]
    kind = spec.kind
    d_wlv = None
    d_clv = None

    if kind == "lin":
        return H.T @ dL, dL @ W.T, None, None
    if kind == "pol":
        p = int(spec.p)
        alpha = cache.extras["alpha"]
        base = cache.extras["base"]
        dD = dL * (p * alpha * base ** (p - 1))
        return H.T @ dD, dD @ W.T, None, None

    x = cache.x
    if kind in ("log", "pow", "rbf", "wav"):
        gamma = cache.extras["gamma"]
        with np.errstate(divide="ignore", invalid="ignore"):
            dphi = _dphi_dx(spec, x, gamma)
        if _radial_singular_at_zero(spec):
            dphi = np.where(x == 0.0, 0.0, dphi)  # zero subgradient
        dx = dL * dphi
    elif kind == "hpb":
        A = cache.extras["A"]
        Bn = cache.extras["Bn"]
        z = cache.extras["z"]
        with np.errstate(divide="ignore", invalid="ignore"):
            dz = np.where(z > 1.0, -dL / np.sqrt(z * z - 1.0), 0.0)
        inv_ab = 1.0 / (Bn[:, None] * A[None, :])
        dx = dz * 2.0 * inv_ab
        # d z / d A_v = -2 x / (A^2 B); dA_v/dW_v = -2 W_v
        gA = (dz * (-2.0 * x) * inv_ab / A[None, :]).sum(axis=0)   # V
        gB = (dz * (-2.0 * x) * inv_ab / Bn[:, None]).sum(axis=1)  # B
        dW_extra = -2.0 * W * gA[None, :]
        dH_extra = -2.0 * H * gB[:, None]
        dW = 2.0 * (W * dx.sum(axis=0)[None, :] - H.T @ dx) + dW_extra
        dH = 2.0 * (H * dx.sum(axis=1)[:, None] - dx @ W.T) + dH_extra
        return dW, dH, None, None
    elif kind == "ssg":
        sv = cache.extras["sv"]
        dx = dL * (-1.0 / (2.0 * sv))[None, :]
        ds = dL * ((-0.5 * d / sv)[None, :] + x / (2.0 * sv * sv)[None, :])
        ds_v = ds.sum(axis=0)  # V
        d_wlv = ds_v * np.exp(cache.extras["word_log_vars"])
        d_clv = np.float64(ds_v.sum() * math.exp(cache.extras["comp_log_vars"]))
    elif kind == "mog":
        s = cache.extras["s"]          # V x G x G
        wlv = cache.extras["wlv"]
        clv = cache.extras["clv"]
        if spec.mog_log_of_sum:
            ell = cache.extras["ell"]  # B x V x G x G
            B_, V_ = dL.shape
            flat = ell.reshape(B_, V_, -1)
            m = flat.max(axis=2, keepdims=True)
            e = np.exp(flat - m)
            wgt = (e / e.sum(axis=2, keepdims=True)).reshape(ell.shape)  # pair posteriors
            dell = dL[:, :, None, None] * wgt
            dx = (dell * (-1.0 / (2.0 * s))[None, :, :, :]).sum(axis=(2, 3))
            ds_pair = (dell * ((-0.5 * d / s)[None, :, :, :]
                               + x[:, :, None, None] / (2.0 * s * s)[None, :, :, :])
                       ).sum(axis=0)  # V x G x G
        else:
            u = dL.sum(axis=0)            # V
            r = (dL * x).sum(axis=0)      # V
            c2 = (1.0 / (2.0 * s)).sum(axis=(1, 2))
            dx = dL * (-c2)[None, :]
            ds_pair = (-0.5 * d / s) * u[:, None, None] + (1.0 / (2.0 * s * s)) * r[:, None, None]
        d_wlv = ds_pair.sum(axis=2) * np.exp(wlv)       # V x G
        d_clv = ds_pair.sum(axis=(0, 1)) * np.exp(clv)  # G
    else:
        raise WrongKernelKind(kind)

    dW = 2.0 * (W * dx.sum(axis=0)[None, :] - H.T @ dx)
    dH = 2.0 * (H * dx.sum(axis=1)[:, None] - dx @ W.T)
    return dW, dH, d_wlv, d_clv


def project_to_ball(W: np.ndarray, margin: float = BALL_MARGIN) -> np.ndarray:
    """Rescale columns of W (in place) so every column norm is <= 1 - margin."""
    norms = np.sqrt(np.einsum("dv,dv->v", W, W))
    limit = 1.0 - margin
    over = norms > limit
    if np.any(over):
        W[:, over] *= limit / norms[over]
    return W
