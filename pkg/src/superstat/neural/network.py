"""Recurrent summary network and (warped) Gaussian posterior heads, with hand-written backprop.

Layout (all float64):

* LSTM ``Wx (D, 4H)``, ``Wh (H, 4H)``, ``b (4H)``; gate blocks ordered
  input, forget, output, candidate.
* Head trunk ``W1 (H, M)``, ``b1 (M)`` with tanh, then a linear read-out
  ``W2 (M, P)``, ``b2 (P)`` holding every head output side by side.

For each ``t`` the read-out is split into

* eta head: mean ``mu_eta`` and Cholesky factor ``L_eta``,
* theta head: ``m``, coupling matrix ``C`` and Cholesky factor ``L_theta`` with
  ``mu_theta = m + C z_eta``.

Both densities live in the unbounded (transformed) parameter space.  Cholesky
diagonals are ``scale * softplus(raw) + MIN_DIAG``.

With ``warp`` each head also emits a per-dimension skew ``e`` and tail weight
``d`` (bounded by ``SKEW_MAX`` and ``LOG_TAIL_MAX``).  The whitened residual
``u = L^{-1}(y - mu)`` then follows a sinh-arcsinh law,
``sinh(d asinh(u) - e) ~ N(0, 1)`` per coordinate, which reduces to the
Gaussian at ``e = 0, d = 1``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np
from numba import njit
from scipy.special import expit

MIN_DIAG = 1e-4
SKEW_MAX = 3.0
LOG_TAIL_MAX = float(np.log(3.0))
LOG_2PI = np.log(2.0 * np.pi)
PARAM_ORDER = ("Wx", "Wh", "b", "W1", "b1", "W2", "b2")


class NumericError(ArithmeticError):
    """Non-finite values inside the network."""


def softplus(x):
    return np.logaddexp(0.0, x)


@dataclass(frozen=True)
class NetworkConfig:
    input_dim: int
    theta_dim: int
    eta_dim: int
    hidden: int = 128
    head_hidden: int = 128
    diag_scale: float = 1.0
    warp: bool = False

    @property
    def n_tril(self) -> tuple[int, int]:
        return self.eta_dim * (self.eta_dim - 1) // 2, self.theta_dim * (self.theta_dim - 1) // 2

    def slices(self) -> dict[str, slice]:
        de, d = self.eta_dim, self.theta_dim
        oe, ot = self.n_tril
        sizes = [
            ("mu_eta", de),
            ("diag_eta", de),
            ("off_eta", oe),
            ("m", d),
            ("coupling", d * de),
            ("diag_theta", d),
            ("off_theta", ot),
        ]
        if self.warp:
            sizes += [("skew_eta", de), ("tail_eta", de), ("skew_theta", d), ("tail_theta", d)]
        out, start = {}, 0
        for name, n in sizes:
            out[name] = slice(start, start + n)
            start += n
        return out

    @property
    def output_dim(self) -> int:
        return max(s.stop for s in self.slices().values())

    def shapes(self) -> dict[str, tuple[int, ...]]:
        D, H, M, P = self.input_dim, self.hidden, self.head_hidden, self.output_dim
        return {
            "Wx": (D, 4 * H),
            "Wh": (H, 4 * H),
            "b": (4 * H,),
            "W1": (H, M),
            "b1": (M,),
            "W2": (M, P),
            "b2": (P,),
        }

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class NetworkWeights:
    config: NetworkConfig
    params: dict[str, np.ndarray]

    def __post_init__(self):
        for name, shape in self.config.shapes().items():
            if self.params[name].shape != shape:
                raise ValueError(f"weight {name} has shape {self.params[name].shape}, expected {shape}")

    def copy(self) -> "NetworkWeights":
        return NetworkWeights(self.config, {k: v.copy() for k, v in self.params.items()})

    def flat(self) -> np.ndarray:
        return np.concatenate([self.params[k].ravel() for k in PARAM_ORDER])

    @classmethod
    def from_flat(cls, config: NetworkConfig, vec: np.ndarray) -> "NetworkWeights":
        params, start = {}, 0
        for name in PARAM_ORDER:
            shape = config.shapes()[name]
            n = int(np.prod(shape))
            params[name] = np.array(vec[start : start + n], float).reshape(shape)
            start += n
        if start != vec.size:
            raise ValueError(f"flat weight vector has {vec.size} entries, expected {start}")
        return cls(config, params)

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.params.values())


def _orthogonal(n: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def init_weights(config: NetworkConfig, rng: np.random.Generator) -> NetworkWeights:
    """Orthogonal recurrent blocks, Glorot-uniform input and trunk, forget bias 1.

    The read-out starts at zero, so every head initially emits mean 0,
    marginal sds ``diag_scale * softplus(0) + MIN_DIAG`` and no warp.
    """
    D, H, M, P = config.input_dim, config.hidden, config.head_hidden, config.output_dim
    lim_x = np.sqrt(6.0 / (D + 4 * H))
    lim_1 = np.sqrt(6.0 / (H + M))
    b = np.zeros(4 * H)
    b[H : 2 * H] = 1.0
    params = {
        "Wx": rng.uniform(-lim_x, lim_x, (D, 4 * H)),
        "Wh": np.concatenate([_orthogonal(H, rng) for _ in range(4)], axis=1),
        "b": b,
        "W1": rng.uniform(-lim_1, lim_1, (H, M)),
        "b1": np.zeros(M),
        "W2": np.zeros((M, P)),
        "b2": np.zeros(P),
    }
    return NetworkWeights(config, params)


# --------------------------------------------------------------------------
# LSTM


@njit(cache=True)
def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


@njit(cache=True)
def _forward_loop(pre, Wh, hs, gates, cs, tcs, keep):
    B, T, H4 = pre.shape
    H = H4 // 4
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    for t in range(T):
        a = pre[:, t] + h @ Wh
        for n in range(B):
            for k in range(H):
                i = _sigmoid(a[n, k])
                f = _sigmoid(a[n, H + k])
                o = _sigmoid(a[n, 2 * H + k])
                g = np.tanh(a[n, 3 * H + k])
                c[n, k] = f * c[n, k] + i * g
                tc = np.tanh(c[n, k])
                h[n, k] = o * tc
                hs[n, t, k] = h[n, k]
                if keep:
                    gates[n, t, k] = i
                    gates[n, t, H + k] = f
                    gates[n, t, 2 * H + k] = o
                    gates[n, t, 3 * H + k] = g
                    cs[n, t, k] = c[n, k]
                    tcs[n, t, k] = tc


@njit(cache=True)
def _backward_loop(dhs, gates, cs, tcs, WhT, dA):
    B, T, H = dhs.shape
    dh_next = np.zeros((B, H))
    dc_next = np.zeros((B, H))
    for t in range(T - 1, -1, -1):
        for n in range(B):
            for k in range(H):
                i = gates[n, t, k]
                f = gates[n, t, H + k]
                o = gates[n, t, 2 * H + k]
                g = gates[n, t, 3 * H + k]
                tc = tcs[n, t, k]
                c_prev = cs[n, t - 1, k] if t > 0 else 0.0
                dh = dhs[n, t, k] + dh_next[n, k]
                dc = dh * o * (1.0 - tc * tc) + dc_next[n, k]
                dA[n, t, k] = dc * g * i * (1.0 - i)
                dA[n, t, H + k] = dc * c_prev * f * (1.0 - f)
                dA[n, t, 2 * H + k] = dh * tc * o * (1.0 - o)
                dA[n, t, 3 * H + k] = dc * i * (1.0 - g * g)
                dc_next[n, k] = dc * f
        dh_next = np.ascontiguousarray(dA[:, t]) @ WhT


def lstm_forward(params: dict, X: np.ndarray, keep_cache: bool = True):
    """Run the LSTM over ``X`` of shape ``(B, T, D)`` from ``h_0 = c_0 = 0``.

    Returns hidden states ``(B, T, H)`` and, if ``keep_cache``, the gate
    activations needed by :func:`lstm_backward`.
    """
    Wh = np.ascontiguousarray(params["Wh"], dtype=np.float64)
    B, T, _ = X.shape
    H = Wh.shape[0]
    pre = np.ascontiguousarray(X @ params["Wx"] + params["b"], dtype=np.float64)
    hs = np.empty((B, T, H))
    shape = (B, T, 4 * H) if keep_cache else (1, 1, 4)
    gates = np.empty(shape)
    cs = np.empty(shape[:2] + (H if keep_cache else 1,))
    tcs = np.empty_like(cs)
    _forward_loop(pre, Wh, hs, gates, cs, tcs, keep_cache)
    if not np.all(np.isfinite(hs)):
        bad = int(np.argmax(~np.all(np.isfinite(hs), axis=(0, 2))))
        raise NumericError(f"non-finite LSTM activation at time step {bad + 1}")
    cache = (X, gates, cs, tcs, hs) if keep_cache else None
    return hs, cache


def lstm_backward(params: dict, dhs: np.ndarray, cache) -> dict:
    """Backpropagation through time given ``dL/dh_t`` for every ``t``."""
    X, gates, cs, tcs, hs = cache
    B, T, H = hs.shape
    dA = np.empty((B, T, 4 * H))
    _backward_loop(np.ascontiguousarray(dhs, dtype=np.float64), gates, cs, tcs,
                   np.ascontiguousarray(params["Wh"].T), dA)
    h_prev = np.concatenate([np.zeros((B, 1, H)), hs[:, :-1]], axis=1)
    flat_a = dA.reshape(B * T, 4 * H)
    return {
        "Wx": X.reshape(B * T, -1).T @ flat_a,
        "Wh": h_prev.reshape(B * T, H).T @ flat_a,
        "b": flat_a.sum(axis=0),
    }


# --------------------------------------------------------------------------
# Gaussian pieces


def build_cholesky(raw_diag: np.ndarray, off: np.ndarray, scale: float) -> np.ndarray:
    """Lower-triangular factors ``(..., d, d)`` from raw head outputs."""
    d = raw_diag.shape[-1]
    L = np.zeros(raw_diag.shape + (d,))
    idx = np.arange(d)
    L[..., idx, idx] = scale * softplus(raw_diag) + MIN_DIAG
    rows, cols = np.tril_indices(d, -1)
    L[..., rows, cols] = off
    return L


def forward_substitution(L: np.ndarray, r: np.ndarray) -> np.ndarray:
    """Solve ``L u = r`` for lower-triangular ``L`` over leading batch dims."""
    d = r.shape[-1]
    u = np.empty_like(r)
    for i in range(d):
        acc = r[..., i]
        if i:
            acc = acc - np.einsum("...j,...j->...", L[..., i, :i], u[..., :i])
        u[..., i] = acc / L[..., i, i]
    return u


def back_substitution(L: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Solve ``L^T w = u``."""
    d = u.shape[-1]
    w = np.empty_like(u)
    for i in range(d - 1, -1, -1):
        acc = u[..., i]
        if i < d - 1:
            acc = acc - np.einsum("...j,...j->...", L[..., i + 1 :, i], w[..., i + 1 :])
        w[..., i] = acc / L[..., i, i]
    return w


def gaussian_log_density(y: np.ndarray, mu: np.ndarray, L: np.ndarray):
    """``log N(y | mu, L L^T)`` and the whitened residual ``u = L^{-1}(y - mu)``."""
    d = y.shape[-1]
    u = forward_substitution(L, y - mu)
    diag = np.diagonal(L, axis1=-2, axis2=-1)
    ll = -0.5 * np.sum(u * u, axis=-1) - np.sum(np.log(diag), axis=-1) - 0.5 * d * LOG_2PI
    return ll, u


def gaussian_log_density_grads(u: np.ndarray, L: np.ndarray, v: np.ndarray | None = None):
    """Gradients of the log density w.r.t. ``mu`` and the lower triangle of ``L``.

    ``v`` is minus the derivative of the whitened log density at ``u``
    (``u`` itself for the Gaussian).
    """
    v = u if v is None else v
    w = back_substitution(L, v)
    dL = np.tril(w[..., :, None] * u[..., None, :])
    d = u.shape[-1]
    idx = np.arange(d)
    dL[..., idx, idx] -= 1.0 / L[..., idx, idx]
    return w, dL


def bounded(raw: np.ndarray, top: float):
    """``top * tanh(raw / top)`` and its derivative."""
    th = np.tanh(raw / top)
    return top * th, 1.0 - th * th


def warp_log_density(u: np.ndarray, skew: np.ndarray, log_tail: np.ndarray):
    """Per-coordinate sinh-arcsinh log density at whitened ``u``, summed over the last axis.

    Returns ``(ll, v, d_skew, d_log_tail)`` where ``v = -d ll / d u``.
    """
    tail = np.exp(log_tail)
    s = np.arcsinh(u)
    a = tail * s - skew
    w, c = np.sinh(a), np.cosh(a)
    ll = np.sum(-0.5 * w * w + log_tail + np.log(c) - 0.5 * np.log1p(u * u), axis=-1) - 0.5 * u.shape[-1] * LOG_2PI
    da = np.tanh(a) - w * c
    v = -(da * tail / np.sqrt(1.0 + u * u) - u / (1.0 + u * u))
    return ll, v, -da, 1.0 + tail * s * da


def warp_sample(eps: np.ndarray, skew: np.ndarray, log_tail: np.ndarray) -> np.ndarray:
    """Whitened residuals ``u`` from standard normal ``eps``."""
    return np.sinh((np.arcsinh(eps) + skew) * np.exp(-log_tail))


# --------------------------------------------------------------------------
# heads


@dataclass
class HeadOutputs:
    """Per-step Gaussian parameters in transformed space."""

    mu_eta: np.ndarray  # (..., d_eta)
    L_eta: np.ndarray  # (..., d_eta, d_eta)
    m: np.ndarray  # (..., d)
    coupling: np.ndarray  # (..., d, d_eta)
    L_theta: np.ndarray  # (..., d, d)
    skew_eta: np.ndarray | None = None  # (..., d_eta); None without warp
    log_tail_eta: np.ndarray | None = None
    skew_theta: np.ndarray | None = None  # (..., d)
    log_tail_theta: np.ndarray | None = None

    @property
    def warped(self) -> bool:
        return self.skew_theta is not None

    def index(self, idx) -> "HeadOutputs":
        return HeadOutputs(*(None if x is None else x[idx] for x in astuple_shallow(self)))

    def mu_theta(self, z_eta: np.ndarray) -> np.ndarray:
        return self.m + np.einsum("...ij,...j->...i", self.coupling, z_eta)


def astuple_shallow(h: HeadOutputs) -> tuple:
    return tuple(getattr(h, f.name) for f in fields(h))


def split_outputs(config: NetworkConfig, out: np.ndarray) -> HeadOutputs:
    sl = config.slices()
    lead = out.shape[:-1]
    d, de = config.theta_dim, config.eta_dim
    warp = {}
    if config.warp:
        for part in ("eta", "theta"):
            warp[f"skew_{part}"] = bounded(out[..., sl[f"skew_{part}"]], SKEW_MAX)[0]
            warp[f"log_tail_{part}"] = bounded(out[..., sl[f"tail_{part}"]], LOG_TAIL_MAX)[0]
    return HeadOutputs(
        mu_eta=out[..., sl["mu_eta"]],
        L_eta=build_cholesky(out[..., sl["diag_eta"]], out[..., sl["off_eta"]], config.diag_scale),
        m=out[..., sl["m"]],
        coupling=out[..., sl["coupling"]].reshape(lead + (d, de)),
        L_theta=build_cholesky(out[..., sl["diag_theta"]], out[..., sl["off_theta"]], config.diag_scale),
        **warp,
    )


def head_forward(params: dict, hs: np.ndarray):
    g = np.tanh(hs @ params["W1"] + params["b1"])
    return g @ params["W2"] + params["b2"], g


def posterior_heads(weights: NetworkWeights, h: np.ndarray) -> HeadOutputs:
    """Gaussian parameters of ``q(eta | h_t)`` and ``q(theta_t | h_t, eta)``."""
    out, _ = head_forward(weights.params, np.asarray(h, float))
    if not np.all(np.isfinite(out)):
        raise NumericError("non-finite posterior head output")
    return split_outputs(weights.config, out)


def summarize(weights: NetworkWeights, X: np.ndarray) -> HeadOutputs:
    """One forward pass over encoded series ``X (B, T, D)``."""
    hs, _ = lstm_forward(weights.params, X, keep_cache=False)
    return posterior_heads(weights, hs)


# --------------------------------------------------------------------------
# loss


def _raw_grad(dL: np.ndarray, raw: np.ndarray, scale: float):
    d = raw.shape[-1]
    idx = np.arange(d)
    rows, cols = np.tril_indices(d, -1)
    return dL[..., idx, idx] * scale * expit(raw), dL[..., rows, cols]


def _warped(ll_gauss, u, skew, log_tail):
    """Swap the whitened standard normal part of ``ll_gauss`` for the warped one."""
    ll_w, v, ds, dl = warp_log_density(u, skew, log_tail)
    base = -0.5 * np.sum(u * u, axis=-1) - 0.5 * u.shape[-1] * LOG_2PI
    return ll_gauss - base + ll_w, v, ds, dl


def loss_and_grad(
    weights: NetworkWeights,
    X: np.ndarray,
    z_theta: np.ndarray,
    z_eta: np.ndarray,
    log_jac: np.ndarray | None = None,
    need_grad: bool = True,
):
    """Negative log posterior summed over time, averaged over the batch.

    ``X`` is ``(B, T, D)``, ``z_theta`` ``(B, T, d)``, ``z_eta`` ``(B, d_eta)``
    (all transformed).  ``log_jac`` ``(B,)`` adds the change-of-variables
    terms so the value refers to the original parameter space; it carries no
    gradient.  Returns ``(loss, grads, per_step)`` where ``per_step`` is the
    ``(B, T)`` table of log densities (for diagnostics).
    """
    cfg = weights.config
    p = weights.params
    B, T, _ = X.shape
    hs, cache = lstm_forward(p, X, keep_cache=need_grad)
    out, g = head_forward(p, hs)
    heads = split_outputs(cfg, out)
    ze = np.broadcast_to(z_eta[:, None, :], (B, T, cfg.eta_dim))

    ll_theta, u_t = gaussian_log_density(z_theta, heads.mu_theta(ze), heads.L_theta)
    if cfg.warp:
        ll_theta, v_t, ds_t, dl_t = _warped(ll_theta, u_t, heads.skew_theta, heads.log_tail_theta)
    per_step = ll_theta
    if cfg.eta_dim:
        ll_eta, u_e = gaussian_log_density(ze, heads.mu_eta, heads.L_eta)
        if cfg.warp:
            ll_eta, v_e, ds_e, dl_e = _warped(ll_eta, u_e, heads.skew_eta, heads.log_tail_eta)
        per_step = per_step + ll_eta
    loss = -per_step.sum() / B
    if log_jac is not None:
        loss -= float(np.mean(log_jac))
    if not np.isfinite(loss):
        bad = np.argwhere(~np.isfinite(per_step))
        where = f" (first at batch item {bad[0][0]}, t={bad[0][1] + 1})" if len(bad) else ""
        raise NumericError(f"non-finite training loss{where}")
    if not need_grad:
        return loss, None, per_step

    sl = cfg.slices()
    dout = np.zeros_like(out)
    w_t, dL_t = gaussian_log_density_grads(u_t, heads.L_theta, v_t if cfg.warp else None)
    if cfg.warp:
        dout[..., sl["skew_theta"]] = ds_t * bounded(out[..., sl["skew_theta"]], SKEW_MAX)[1]
        dout[..., sl["tail_theta"]] = dl_t * bounded(out[..., sl["tail_theta"]], LOG_TAIL_MAX)[1]
    dout[..., sl["m"]] = w_t
    dout[..., sl["coupling"]] = (w_t[..., :, None] * ze[..., None, :]).reshape(B, T, -1)
    dd, doff = _raw_grad(dL_t, out[..., sl["diag_theta"]], cfg.diag_scale)
    dout[..., sl["diag_theta"]] = dd
    dout[..., sl["off_theta"]] = doff
    if cfg.eta_dim:
        w_e, dL_e = gaussian_log_density_grads(u_e, heads.L_eta, v_e if cfg.warp else None)
        if cfg.warp:
            dout[..., sl["skew_eta"]] = ds_e * bounded(out[..., sl["skew_eta"]], SKEW_MAX)[1]
            dout[..., sl["tail_eta"]] = dl_e * bounded(out[..., sl["tail_eta"]], LOG_TAIL_MAX)[1]
        dout[..., sl["mu_eta"]] = w_e
        dd, doff = _raw_grad(dL_e, out[..., sl["diag_eta"]], cfg.diag_scale)
        dout[..., sl["diag_eta"]] = dd
        dout[..., sl["off_eta"]] = doff
    dout *= -1.0 / B

    M = g.shape[-1]
    H = hs.shape[-1]
    flat_out = dout.reshape(B * T, -1)
    grads = {
        "W2": g.reshape(B * T, M).T @ flat_out,
        "b2": flat_out.sum(axis=0),
    }
    da1 = (dout @ p["W2"].T) * (1.0 - g * g)
    flat_a1 = da1.reshape(B * T, M)
    grads["W1"] = hs.reshape(B * T, H).T @ flat_a1
    grads["b1"] = flat_a1.sum(axis=0)
    grads.update(lstm_backward(p, da1 @ p["W1"].T, cache))
    return loss, grads, per_step
