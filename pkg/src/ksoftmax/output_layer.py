"""Generalized mixture-of-kernels softmax output layer.

The posterior is a convex combination of per-component softmaxes,

    p(w_v | h) = sum_k pi_k(h) * softmax_v(S_k(W_v, h_k~)),

with context-dependent mixture weights pi_k = softmax_k(M_k . h) and
per-component transformed contexts h_k~ = tanh(C_k^T h). The projection
matrix W is tied across components. All probability arithmetic is done in
the log domain; mixed logits are never softmaxed jointly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from . import kernels
from .errors import DimensionMismatch, HpbOutsideBall, NonFiniteScore, TargetOutOfRange
from .kernels import KernelSpec, BALL_MARGIN


@dataclass(frozen=True)
class MixtureConfig:
    components: tuple
    d: int
    V: int
    rho: float = 0.0
    tie_projection: bool = True
    reg_across_data: bool = False

    def __post_init__(self):
        if len(self.components) < 1:
            raise ValueError("need at least one mixture component")
        if not self.tie_projection:
            raise ValueError("untied projection matrices are not supported")
        if self.rho < 0:
            raise ValueError("rho must be nonnegative")
        gs = {s.num_gauss for s in self.components if s.kind == "mog"}
        if len(gs) > 1:
            raise ValueError("all mog components must share num_gauss")
        object.__setattr__(self, "components", tuple(self.components))

    @property
    def K(self) -> int:
        return len(self.components)

    @property
    def transform_contexts_enabled(self) -> bool:
        return self.K > 1

    @property
    def num_gauss(self) -> int:
        for s in self.components:
            if s.kind == "mog":
                return s.num_gauss
        return 1

    @property
    def needs_word_vars(self) -> bool:
        return any(s.kind in kernels.GAUSSIAN_KINDS for s in self.components)

    @property
    def has_hpb(self) -> bool:
        return any(s.kind == "hpb" for s in self.components)

    def to_dict(self) -> dict:
        return {
            "components": [s.to_dict() for s in self.components],
            "d": self.d, "V": self.V, "rho": self.rho,
            "tie_projection": self.tie_projection,
            "reg_across_data": self.reg_across_data,
        }

    @staticmethod
    def from_dict(d: dict) -> "MixtureConfig":
        d = dict(d)
        d["components"] = tuple(KernelSpec.from_dict(c) for c in d["components"])
        return MixtureConfig(**d)


@dataclass
class OutputParams:
    """Trainable tensors of the output layer.

    M and C exist only when K > 1 (individual kernels keep exact parameter
    parity with the plain linear softmax). word_log_vars is (V,) when only
    ssg components need it, (V, G) when a mog component is present;
    component_log_vars holds one array per component (shape () for ssg,
    (G,) for mog, None otherwise).
    """

    W: np.ndarray
    M: Optional[np.ndarray] = None
    C: Optional[np.ndarray] = None  # K x d x d
    word_log_vars: Optional[np.ndarray] = None
    component_log_vars: Optional[list] = None


def init_output_params(config: MixtureConfig, rng: np.random.Generator) -> OutputParams:
    d, V, K = config.d, config.V, config.K
    scale = 1.0 / math.sqrt(d)
    W = rng.uniform(-scale, scale, size=(d, V))
    M = rng.uniform(-scale, scale, size=(d, K)) if K > 1 else None
    C = rng.uniform(-scale, scale, size=(K, d, d)) if K > 1 else None
    word_lv = None
    if config.needs_word_vars:
        has_mog = any(s.kind == "mog" for s in config.components)
        word_lv = np.zeros((V, config.num_gauss)) if has_mog else np.zeros(V)
    comp_lv = []
    for spec in config.components:
        if spec.kind == "ssg":
            comp_lv.append(np.zeros(()))
        elif spec.kind == "mog":
            comp_lv.append(np.zeros(spec.num_gauss))
        else:
            comp_lv.append(None)
    if config.has_hpb:
        kernels.project_to_ball(W)
    return OutputParams(W=W, M=M, C=C, word_log_vars=word_lv,
                        component_log_vars=comp_lv)


@dataclass
class ForwardCache:
    """Everything backward() needs from a posterior/loss forward pass."""

    H: np.ndarray
    pi: np.ndarray            # B x K
    log_pi: np.ndarray        # B x K
    lsm: np.ndarray           # K x B x V, per-component log-softmax
    log_posterior: np.ndarray # B x V
    h_tilde: list             # K tanh outputs (or H itself when K = 1)
    h_eff: list               # contexts actually fed to the kernels
    hpb_scale: list           # per-component context scaling (1.0 if none)
    kernel_caches: list
    reg_term: float = 0.0


def _log_softmax(a: np.ndarray) -> np.ndarray:
    m = a.max(axis=-1, keepdims=True)
    z = a - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def mixture_weights(M: Optional[np.ndarray], H: np.ndarray) -> np.ndarray:
    """pi[b, k] = softmax over k of M_k . h_b, with max-subtraction."""
    H = np.asarray(H, dtype=np.float64)
    if M is None:
        return np.ones((H.shape[0], 1))
    if M.shape[0] != H.shape[1]:
        raise DimensionMismatch(f"M {M.shape} vs H {H.shape}")
    return np.exp(_log_softmax(H @ M))


def transform_contexts(C: np.ndarray, H: np.ndarray) -> list:
    """h_k~ = tanh(C_k^T h) for each component; returns K arrays of B x d."""
    H = np.asarray(H, dtype=np.float64)
    return [np.tanh(H @ C[k]) for k in range(C.shape[0])]


def _forward(config: MixtureConfig, params: OutputParams, H: np.ndarray) -> ForwardCache:
    H = np.asarray(H, dtype=np.float64)
    if H.ndim != 2 or H.shape[1] != config.d:
        raise DimensionMismatch(f"H {H.shape} vs d={config.d}")
    K = config.K
    B = H.shape[0]
    if K > 1:
        log_pi = _log_softmax(H @ params.M)
        h_tilde = transform_contexts(params.C, H)
    else:
        log_pi = np.zeros((B, 1))
        h_tilde = [H]
    pi = np.exp(log_pi)

    lsm = np.empty((K, B, config.V))
    caches = []
    h_eff = []
    scales = []
    for k, spec in enumerate(config.components):
        hk = h_tilde[k]
        scale = 1.0
        if spec.kind == "hpb":
            # tanh-bounded contexts have norm <= sqrt(d); a constant rescale
            # keeps them strictly inside the unit ball
            scale = (1.0 - BALL_MARGIN) / math.sqrt(config.d)
            hk = hk * scale
        if spec.kind == "ssg":
            wlv = params.word_log_vars[:, 0] if params.word_log_vars.ndim == 2 \
                else params.word_log_vars
            clv = params.component_log_vars[k]
            L, cache = kernels.forward_logits(spec, params.W, hk, wlv, float(clv))
        elif spec.kind == "mog":
            L, cache = kernels.forward_logits(
                spec, params.W, hk, params.word_log_vars,
                params.component_log_vars[k])
        else:
            try:
                L, cache = kernels.forward_logits(spec, params.W, hk)
            except NonFiniteScore as e:
                raise NonFiniteScore(f"component {k} ({spec.kind}): {e}") from e
        lsm[k] = _log_softmax(L)
        caches.append(cache)
        h_eff.append(hk)
        scales.append(scale)

    # log p(v | b) = LSE_k(log pi + lsm)
    mix = log_pi.T[:, :, None] + lsm  # K x B x V
    m = mix.max(axis=0)
    log_post = m + np.log(np.exp(mix - m[None]).sum(axis=0))
    return ForwardCache(H=H, pi=pi, log_pi=log_pi, lsm=lsm,
                        log_posterior=log_post, h_tilde=h_tilde, h_eff=h_eff,
                        hpb_scale=scales, kernel_caches=caches)


def posterior(config: MixtureConfig, params: OutputParams, H: np.ndarray):
    """(probs B x V, ForwardCache); probs is the convex combination of
    per-component softmaxes."""
    cache = _forward(config, params, H)
    probs = np.einsum("bk,kbv->bv", cache.pi, np.exp(cache.lsm))
    return probs, cache


def _pi_variance(pi: np.ndarray, across_data: bool) -> float:
    if across_data:
        # variance of each component's weight across the batch, averaged over K
        return float(pi.var(axis=0).sum() / pi.shape[1])
    # population variance over components, per datum, averaged over the batch
    return float(pi.var(axis=1).mean())


def loss(config: MixtureConfig, params: OutputParams, H: np.ndarray,
         targets: np.ndarray):
    """Mean cross-entropy plus the scaled mixture-weight variance penalty.

    Returns (scalar loss, ForwardCache); the cache records the regularizer
    term separately.
    """
    targets = np.asarray(targets)
    if targets.ndim != 1:
        raise DimensionMismatch("targets must be a 1-D id array")
    if np.any(targets < 0) or np.any(targets >= config.V):
        bad = targets[(targets < 0) | (targets >= config.V)][0]
        raise TargetOutOfRange(f"target id {bad} outside [0, {config.V})")
    cache = _forward(config, params, H)
    B = H.shape[0]
    ce = -float(cache.log_posterior[np.arange(B), targets].mean())
    reg = config.rho * _pi_variance(cache.pi, config.reg_across_data)
    cache.reg_term = reg
    return ce + reg, cache


@dataclass
class OutputGrads:
    dW: np.ndarray
    dM: Optional[np.ndarray]
    dC: Optional[np.ndarray]
    d_word_log_vars: Optional[np.ndarray]
    d_component_log_vars: Optional[list]
    dH: np.ndarray


def backward(config: MixtureConfig, params: OutputParams, cache: ForwardCache,
             targets: np.ndarray) -> OutputGrads:
    """Analytic gradients of loss() with respect to every output-layer
    tensor, plus dL/dH for the encoder."""
    targets = np.asarray(targets)
    H = cache.H
    B, d = H.shape
    K = config.K
    rows = np.arange(B)

    # responsibilities at the target: q[b,k] = pi_k p_k(t) / p(t)
    lsm_t = cache.lsm[:, rows, targets].T        # B x K
    q = np.exp(cache.log_pi + lsm_t - cache.log_posterior[rows, targets][:, None])

    dW = np.zeros_like(params.W)
    dH = np.zeros((B, d))
    dM = np.zeros_like(params.M) if params.M is not None else None
    dC = np.zeros_like(params.C) if params.C is not None else None
    d_wlv = np.zeros_like(params.word_log_vars) if params.word_log_vars is not None else None
    d_clv = ([np.zeros_like(v) if v is not None else None
              for v in params.component_log_vars]
             if params.component_log_vars is not None else None)

    for k, spec in enumerate(config.components):
        pk = np.exp(cache.lsm[k])  # B x V
        dL = (q[:, k:k + 1] / B) * pk
        dL[rows, targets] -= q[:, k] / B
        dWk, dHk, dwlv_k, dclv_k = kernels.backward_logits(
            spec, cache.kernel_caches[k], dL)
        dW += dWk
        if dwlv_k is not None:
            if spec.kind == "ssg" and d_wlv.ndim == 2:
                d_wlv[:, 0] += dwlv_k
            else:
                d_wlv += dwlv_k
        if dclv_k is not None:
            d_clv[k] += dclv_k
        dHk = dHk * cache.hpb_scale[k]
        if K > 1:
            ht = cache.h_tilde[k]
            dpre = dHk * (1.0 - ht * ht)
            dC[k] = H.T @ dpre
            dH += dpre @ params.C[k].T
        else:
            dH += dHk

    if K > 1:
        dA = (cache.pi - q) / B  # d CE / d (H M)
        # regularizer through the pi softmax
        if config.rho > 0:
            pi = cache.pi
            if config.reg_across_data:
                g = (2.0 * config.rho / (K * B)) * (pi - pi.mean(axis=0, keepdims=True))
            else:
                g = (2.0 * config.rho / (K * B)) * pi
            dA += pi * (g - (g * pi).sum(axis=1, keepdims=True))
        dM = H.T @ dA
        dH += dA @ params.M.T

    return OutputGrads(dW=dW, dM=dM, dC=dC, d_word_log_vars=d_wlv,
                       d_component_log_vars=d_clv, dH=dH)
