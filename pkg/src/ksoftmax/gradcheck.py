"""Central finite-difference verification of analytic gradients.

Used by the `gradcheck` CLI subcommand and the acceptance suite. An
elementwise comparison passes when the absolute difference is below the
floor or the relative error is below the tolerance.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Callable, Sequence

import numpy as np

from . import encoder as encoder_mod
from . import kernels
from . import output_layer
from .kernels import GaussianParams, KernelSpec

FD_STEP = 1e-5
REL_TOL = 1e-4
ABS_FLOOR = 1e-7


def central_diff(f: Callable[[np.ndarray], float], x: np.ndarray,
                 eps: float = FD_STEP) -> np.ndarray:
    """Central finite-difference gradient of scalar f at x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = g.reshape(-1)
    xf = x.reshape(-1)
    for i in range(xf.size):
        orig = xf[i]
        xf[i] = orig + eps
        fp = f(x)
        xf[i] = orig - eps
        fm = f(x)
        xf[i] = orig
        flat[i] = (fp - fm) / (2.0 * eps)
    return g


def agree(analytic: np.ndarray, numeric: np.ndarray,
          rel_tol: float = REL_TOL, abs_floor: float = ABS_FLOOR) -> bool:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    diff = np.abs(analytic - numeric)
    denom = np.maximum(np.abs(analytic), np.abs(numeric))
    ok = (diff <= abs_floor) | (diff <= rel_tol * denom)
    return bool(np.all(ok))


def _random_spec(kind: str, rng: np.random.Generator) -> KernelSpec:
    if kind in ("log", "pow"):
        return KernelSpec(kind, p=float(rng.uniform(1.2, 3.0)))
    if kind == "pol":
        return KernelSpec(kind, p=float(rng.integers(1, 4)),
                          alpha=float(rng.uniform(0.1, 1.0)),
                          c=float(rng.uniform(0.0, 1.0)))
    if kind == "rbf":
        return KernelSpec(kind, gamma=float(rng.uniform(0.1, 2.0)))
    if kind == "wav":
        return KernelSpec(kind, a=float(rng.uniform(0.5, 2.0)),
                          b=float(rng.uniform(0.5, 2.0)))
    if kind == "mog":
        return KernelSpec(kind, num_gauss=2,
                          mog_log_of_sum=bool(rng.integers(0, 2)))
    return KernelSpec(kind)


def _random_inputs(kind: str, d: int, rng: np.random.Generator):
    if kind == "hpb":
        # keep both vectors safely inside the unit ball
        w = rng.uniform(-1.0, 1.0, d)
        w *= rng.uniform(0.1, 0.8) / np.linalg.norm(w)
        h = rng.uniform(-1.0, 1.0, d)
        h *= rng.uniform(0.1, 0.8) / np.linalg.norm(h)
        return w, h
    return rng.uniform(-2.0, 2.0, d), rng.uniform(-2.0, 2.0, d)


def check_kernel(kind: str, dims: Sequence[int] = (2, 8, 32),
                 trials: int = 100, seed: int = 0) -> list:
    """Analytic vs finite-difference gradients for one kernel kind.

    Returns a list of failure descriptions (empty when all comparisons
    pass)."""
    rng = np.random.default_rng(seed)
    failures = []
    for d in dims:
        for trial in range(trials):
            spec = _random_spec(kind, rng)
            if kind == "ssg":
                gw = GaussianParams(rng.uniform(-2, 2, d), float(rng.normal(0, 0.5)))
                gh = GaussianParams(rng.uniform(-2, 2, d), float(rng.normal(0, 0.5)))
                g = kernels.grad(spec, w_gauss=gw, h_gauss=gh)
                checks = [
                    (g.d_w, central_diff(lambda m: kernels.score(
                        spec, w_gauss=GaussianParams(m, gw.log_var), h_gauss=gh), gw.mean.copy())),
                    (g.d_h, central_diff(lambda m: kernels.score(
                        spec, w_gauss=gw, h_gauss=GaussianParams(m, gh.log_var)), gh.mean.copy())),
                    (g.d_w_log_var, central_diff(lambda lv: kernels.score(
                        spec, w_gauss=GaussianParams(gw.mean, float(lv)), h_gauss=gh),
                        np.asarray(gw.log_var))),
                    (g.d_h_log_var, central_diff(lambda lv: kernels.score(
                        spec, w_gauss=gw, h_gauss=GaussianParams(gh.mean, float(lv))),
                        np.asarray(gh.log_var))),
                ]
            elif kind == "mog":
                G = spec.num_gauss
                gw = [GaussianParams(rng.uniform(-2, 2, d), float(rng.normal(0, 0.5)))
                      for _ in range(G)]
                gh = [GaussianParams(rng.uniform(-2, 2, d), float(rng.normal(0, 0.5)))
                      for _ in range(G)]
                g = kernels.grad(spec, w_gauss=gw, h_gauss=gh)
                checks = []
                for i in range(G):
                    def f_mean(m, i=i):
                        side = [GaussianParams(m, gw[i].log_var) if j == i else gw[j]
                                for j in range(G)]
                        return kernels.score(spec, w_gauss=side, h_gauss=gh)
                    checks.append((g.d_w[i], central_diff(f_mean, gw[i].mean.copy())))

                    def f_lv(lv, i=i):
                        side = [GaussianParams(gw[i].mean, float(lv)) if j == i else gw[j]
                                for j in range(G)]
                        return kernels.score(spec, w_gauss=side, h_gauss=gh)
                    checks.append((g.d_w_log_var[i],
                                   central_diff(f_lv, np.asarray(gw[i].log_var))))

                    def f_mean_h(m, i=i):
                        side = [GaussianParams(m, gh[i].log_var) if j == i else gh[j]
                                for j in range(G)]
                        return kernels.score(spec, w_gauss=gw, h_gauss=side)
                    checks.append((g.d_h[i], central_diff(f_mean_h, gh[i].mean.copy())))

                    def f_lv_h(lv, i=i):
                        side = [GaussianParams(gh[i].mean, float(lv)) if j == i else gh[j]
                                for j in range(G)]
                        return kernels.score(spec, w_gauss=gw, h_gauss=side)
                    checks.append((g.d_h_log_var[i],
                                   central_diff(f_lv_h, np.asarray(gh[i].log_var))))
            else:
                w, h = _random_inputs(kind, d, rng)
                g = kernels.grad(spec, w, h)
                checks = [
                    (g.d_w, central_diff(lambda v: kernels.score(spec, v, h), w.copy())),
                    (g.d_h, central_diff(lambda v: kernels.score(spec, w, v), h.copy())),
                ]
            for analytic, numeric in checks:
                if not agree(analytic, numeric):
                    failures.append(
                        f"{kind} d={d} trial={trial}: analytic {analytic} "
                        f"vs numeric {numeric}")
    return failures


def _flatten_params(state) -> tuple:
    """(vector, setter) over every trainable tensor of a TrainState-like
    object exposing named tensors through training.named_tensors."""
    from . import training
    tensors = training.named_tensors(state)
    sizes = [(name, np.asarray(arr).shape, np.asarray(arr).size)
             for name, arr in tensors]
    vec = np.concatenate([np.asarray(arr).reshape(-1) for _, arr in tensors])

    def setter(v):
        off = 0
        for (name, arr), (_, shape, size) in zip(tensors, sizes):
            arr[...] = v[off:off + size].reshape(shape)
            off += size
    return vec, setter, tensors


def check_pipeline(config, V: int, B: int = 2, seed: int = 0,
                   rel_tol: float = REL_TOL) -> list:
    """Finite-difference audit of the full encoder + output-layer loss
    gradient for a TrainConfig. Returns failure descriptions."""
    from . import training

    rng = np.random.default_rng(seed)
    state = training.init_state(config, V)
    windows = rng.integers(0, V, size=(B, config.n))
    targets = rng.integers(0, V, size=B)

    def loss_of_state():
        H, _ = encoder_mod.encode(state.enc, windows)
        val, _ = output_layer.loss(state.mixture, state.out, H, targets)
        return val

    H, enc_cache = encoder_mod.encode(state.enc, windows)
    _, cache = output_layer.loss(state.mixture, state.out, H, targets)
    out_grads = output_layer.backward(state.mixture, state.out, cache, targets)
    enc_grads = encoder_mod.encode_backward(state.enc, enc_cache, out_grads.dH)
    grads = training._gather_grads(state, enc_grads, out_grads)

    failures = []
    vec, setter, tensors = _flatten_params(state)
    analytic = []
    for name, arr in tensors:
        analytic.append(grads.get(name, np.zeros_like(np.asarray(arr))).reshape(-1))
    analytic = np.concatenate(analytic)

    base = vec.copy()
    numeric = np.zeros_like(base)
    for i in range(base.size):
        pert = base.copy()
        pert[i] = base[i] + FD_STEP
        setter(pert)
        fp = loss_of_state()
        pert[i] = base[i] - FD_STEP
        setter(pert)
        fm = loss_of_state()
        numeric[i] = (fp - fm) / (2.0 * FD_STEP)
    setter(base)

    if not agree(analytic, numeric, rel_tol=rel_tol):
        diff = np.abs(analytic - numeric)
        denom = np.maximum(np.abs(analytic), np.abs(numeric))
        bad = ~((diff <= ABS_FLOOR) | (diff <= rel_tol * denom))
        idx = np.argwhere(bad).reshape(-1)
        off = 0
        names = []
        for name, arr in tensors:
            size = np.asarray(arr).size
            for i in idx:
                if off <= i < off + size:
                    names.append(name)
            off += size
        failures.append(
            f"pipeline mismatch in {sorted(set(names))}: "
            f"max rel err {float(np.max(diff[bad] / np.maximum(denom[bad], 1e-300))):.3g}")
    return failures
