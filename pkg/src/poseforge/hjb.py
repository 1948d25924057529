"""EDM sampling with guided inner optimization, an exact Gaussian-mixture
denoiser, and the closed-form optimal-control law that motivates the guidance.

Samples are ``(n, d)`` arrays, one row per chain. Noise level equals time
(``sigma(t) = t``), with unit signal scale.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .nnet import AdamState, NonFiniteError, adam_step


class SamplerDivergedError(ValueError):
    """The denoiser or guidance loss produced a non-finite value."""


# --------------------------------------------------------------------- mixtures

@dataclass(frozen=True, eq=False)
class GmmSpec:
    """Isotropic Gaussian mixture: weights ``(K,)``, means ``(K, d)``, stds ``(K,)``."""

    weights: np.ndarray
    means: np.ndarray
    stds: np.ndarray

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=np.float64))
        mu = np.asarray(self.means, dtype=np.float64)
        if mu.ndim == 1:
            mu = mu[:, None]
        s = np.atleast_1d(np.asarray(self.stds, dtype=np.float64))
        if mu.ndim != 2 or not (len(w) == len(mu) == len(s)) or len(w) == 0:
            raise ValueError("weights, means and stds must describe the same components")
        if mu.shape[1] not in (1, 2):
            raise ValueError(f"dimension must be 1 or 2, got {mu.shape[1]}")
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be positive and sum to 1")
        if np.any(s <= 0) or not np.all(np.isfinite(np.concatenate([w, mu.ravel(), s]))):
            raise ValueError("stds must be positive and all values finite")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "stds", s)

    @property
    def dim(self):
        return self.means.shape[1]

    @classmethod
    def single(cls, mean, std):
        return cls([1.0], [np.atleast_1d(mean)], [std])

    @classmethod
    def two_mode(cls, offset=2.0, std=0.3):
        return cls([0.5, 0.5], [[-offset], [offset]], [std, std])

    def to_dict(self):
        return {"components": [{"weight": float(w), "mean": m.tolist(), "std": float(s)}
                               for w, m, s in zip(self.weights, self.means, self.stds)]}

    @classmethod
    def from_dict(cls, doc):
        try:
            comps = doc["components"]
            return cls([c["weight"] for c in comps],
                       [np.atleast_1d(c["mean"]) for c in comps],
                       [c["std"] for c in comps])
        except (KeyError, TypeError) as exc:
            raise ValueError(f"invalid mixture document: {exc}") from exc

    def sample(self, rng, n):
        k = rng.choice(len(self.weights), size=n, p=self.weights)
        return self.means[k] + self.stds[k, None] * rng.standard_normal((n, self.dim))


def _as_rows(x, dim):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim <= 1
    X = x.reshape(1, -1) if single else x
    if X.shape[1] != dim:
        raise ValueError(f"expected dimension {dim}, got {X.shape[1]}")
    return X, single


def gmm_denoiser(x, t, gmm):
    """Posterior mean ``E[x0 | x0 + t*eps = x]`` for ``x0 ~ gmm``.

    ``x`` is a ``d``-vector or an ``(n, d)`` batch.
    """
    if not t > 0:
        raise ValueError(f"t must be > 0, got {t}")
    X, single = _as_rows(x, gmm.dim)
    var = gmm.stds ** 2 + t * t                                   # (K,)
    sq = ((X[:, None, :] - gmm.means[None]) ** 2).sum(axis=-1)    # (n, K)
    logp = np.log(gmm.weights) - 0.5 * gmm.dim * np.log(2 * np.pi * var) - 0.5 * sq / var
    logp -= logp.max(axis=1, keepdims=True)
    resp = np.exp(logp)
    resp /= resp.sum(axis=1, keepdims=True)
    s2 = gmm.stds ** 2
    post = (s2[None, :, None] * X[:, None, :] + t * t * gmm.means[None]) / var[None, :, None]
    out = (resp[..., None] * post).sum(axis=1)
    return out[0] if single else out


def gmm_denoiser_oracle(x, t, gmm, n_nodes=400_001):
    """Trapezoid-rule posterior mean for a 1-D mixture.

    The grid spans every component's ``mean +- 10 std`` together with
    ``x +- 10 t``, which contains all of the posterior mass.
    """
    if gmm.dim != 1:
        raise ValueError("oracle is defined for 1-D mixtures only")
    x = float(np.asarray(x).reshape(-1)[0])
    mu, s = gmm.means[:, 0], gmm.stds
    lo = min(float((mu - 10 * s).min()), x - 10 * t)
    hi = max(float((mu + 10 * s).max()), x + 10 * t)
    x0 = np.linspace(lo, hi, max(int(n_nodes), 200_001))
    comp = (np.log(gmm.weights)[:, None] - np.log(s)[:, None]
            - 0.5 * ((x0[None] - mu[:, None]) / s[:, None]) ** 2)
    cmax = comp.max(axis=0)
    log_prior = cmax + np.log(np.exp(comp - cmax).sum(axis=0))
    log_f = log_prior - 0.5 * ((x - x0) / t) ** 2
    f = np.exp(log_f - log_f.max())
    return np.array([np.trapezoid(x0 * f, x0) / np.trapezoid(f, x0)])


def mode_shares(samples, gmm):
    """Fraction of samples whose nearest component mean is each component."""
    X, _ = _as_rows(samples, gmm.dim)
    d = ((X[:, None, :] - gmm.means[None]) ** 2).sum(axis=-1)
    return np.bincount(d.argmin(axis=1), minlength=len(gmm.weights)) / len(X)


# --------------------------------------------------------------------- guidance

@dataclass(frozen=True, eq=False)
class GuidanceLoss:
    """``quadratic``: ``0.5 ||A x - y||^2``; ``cosine``: ``1 - cos(F x, F y)``."""

    kind: str
    matrix: np.ndarray
    target: np.ndarray

    def __post_init__(self):
        if self.kind not in ("quadratic", "cosine"):
            raise ValueError(f"unknown guidance kind {self.kind!r}")
        M = np.atleast_2d(np.asarray(self.matrix, dtype=np.float64))
        y = np.atleast_1d(np.asarray(self.target, dtype=np.float64))
        want = M.shape[0] if self.kind == "quadratic" else M.shape[1]
        if y.shape != (want,):
            raise ValueError(f"target must have shape ({want},), got {y.shape}")
        object.__setattr__(self, "matrix", M)
        object.__setattr__(self, "target", y)

    @property
    def dim(self):
        return self.matrix.shape[1]

    @classmethod
    def quadratic(cls, target, matrix=None):
        y = np.atleast_1d(np.asarray(target, dtype=np.float64))
        return cls("quadratic", np.eye(len(y)) if matrix is None else matrix, y)

    @classmethod
    def cosine(cls, target, matrix=None):
        y = np.atleast_1d(np.asarray(target, dtype=np.float64))
        return cls("cosine", np.eye(len(y)) if matrix is None else matrix, y)

    def value_and_grad(self, x):
        """Per-row loss ``(n,)`` and gradient ``(n, d)`` for a batch ``(n, d)``."""
        X = np.asarray(x, dtype=np.float64)
        M = self.matrix
        if self.kind == "quadratic":
            r = X @ M.T - self.target
            return 0.5 * (r * r).sum(axis=1), r @ M
        a = X @ M.T
        b = M @ self.target
        na = np.linalg.norm(a, axis=1)
        nb = np.linalg.norm(b)
        if nb == 0 or np.any(na == 0):
            raise SamplerDivergedError("cosine guidance undefined at a zero feature")
        cos = (a @ b) / (na * nb)
        dcos = b[None] / (na[:, None] * nb) - cos[:, None] * a / (na * na)[:, None]
        return np.maximum(1.0 - cos, 0.0), -dcos @ M

    def __call__(self, x):
        return self.value_and_grad(np.atleast_2d(x))[0]

    def to_dict(self):
        return {"kind": self.kind, "matrix": self.matrix.tolist(), "target": self.target.tolist()}

    @classmethod
    def from_dict(cls, doc):
        try:
            return cls(doc["kind"], doc["matrix"], doc["target"])
        except (KeyError, TypeError) as exc:
            raise ValueError(f"invalid guidance document: {exc}") from exc


def face_optimize(x_pred, loss, k=10, eta=0.03):
    """``k`` Adam steps on a detached copy of ``x_pred`` (one row per chain)."""
    if k < 0:
        raise ValueError("k must be >= 0")
    if not eta > 0:
        raise ValueError("eta must be > 0")
    x = np.array(x_pred, dtype=np.float64)
    if k == 0:
        return x
    single = x.ndim <= 1
    X = x.reshape(1, -1) if single else x
    state = AdamState(lr=eta)
    for _ in range(k):
        val, grad = loss.value_and_grad(X)
        if not np.all(np.isfinite(val)):
            raise SamplerDivergedError("non-finite guidance loss")
        try:
            X, state = adam_step(X, grad, state)
        except NonFiniteError as exc:
            raise SamplerDivergedError(str(exc)) from exc
    return X[0] if single else X


# ---------------------------------------------------------------------- sampler

@dataclass
class GuidanceConfig:
    loss: GuidanceLoss
    k: int = 10
    eta: float = 0.03
    window: tuple = (0, 10)

    def __post_init__(self):
        if self.k < 0:
            raise ValueError("k must be >= 0")
        if not self.eta > 0:
            raise ValueError("eta must be > 0")
        lo, hi = (int(v) for v in self.window)
        if not 0 <= lo <= hi:
            raise ValueError("window must satisfy 0 <= start <= stop")
        self.window = (lo, hi)

    def active(self, step):
        return self.window[0] <= step < self.window[1]

    def to_dict(self):
        return {"loss": self.loss.to_dict(), "k": self.k, "eta": self.eta,
                "window": list(self.window)}

    @classmethod
    def from_dict(cls, doc):
        doc = dict(doc)
        doc["loss"] = GuidanceLoss.from_dict(doc["loss"])
        if "window" in doc:
            doc["window"] = tuple(doc["window"])
        return cls(**doc)


@dataclass
class SamplerConfig:
    n_steps: int = 40
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    rho: float = 7.0
    S_churn: float = 0.0
    S_noise: float = 1.0
    S_tmin: float = 0.0
    S_tmax: float = math.inf
    guidance: GuidanceConfig | None = None

    def __post_init__(self):
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ValueError("n_steps must be an integer >= 1")
        self.n_steps = int(self.n_steps)
        if not 0 < self.sigma_min < self.sigma_max:
            raise ValueError("need 0 < sigma_min < sigma_max")
        if not self.rho > 0:
            raise ValueError("rho must be > 0")
        if self.S_tmin > self.S_tmax:
            raise ValueError("S_tmin must not exceed S_tmax")
        if self.S_churn < 0 or self.S_noise < 0:
            raise ValueError("S_churn and S_noise must be >= 0")
        if self.guidance is not None and self.guidance.window[1] > self.n_steps:
            raise ValueError("guidance window must lie inside [0, n_steps)")

    @classmethod
    def guided(cls, loss, n_steps=40, k=10, eta=0.03, window=(0, 10), **kw):
        """Churned configuration used for guided runs."""
        kw = {"S_churn": 2.5, "S_tmin": 0.05, "S_tmax": 50.0, **kw}
        return cls(n_steps=n_steps, guidance=GuidanceConfig(loss, k, eta, window), **kw)

    def to_dict(self):
        doc = {k: getattr(self, k) for k in ("n_steps", "sigma_min", "sigma_max", "rho",
                                             "S_churn", "S_noise", "S_tmin", "S_tmax")}
        if math.isinf(doc["S_tmax"]):
            doc["S_tmax"] = "inf"
        doc["guidance"] = None if self.guidance is None else self.guidance.to_dict()
        return doc

    @classmethod
    def from_dict(cls, doc):
        doc = dict(doc)
        unknown = set(doc) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ValueError(f"unknown sampler fields: {sorted(unknown)}")
        if isinstance(doc.get("S_tmax"), str):
            doc["S_tmax"] = float(doc["S_tmax"])
        if doc.get("guidance") is not None:
            doc["guidance"] = GuidanceConfig.from_dict(doc["guidance"])
        return cls(**doc)


def karras_schedule(cfg):
    """``t_0 > ... > t_{N-1} = sigma_min`` followed by ``t_N = 0``."""
    n = cfg.n_steps
    if n < 1:
        raise ValueError("n_steps must be >= 1")
    a, b = cfg.sigma_max ** (1 / cfg.rho), cfg.sigma_min ** (1 / cfg.rho)
    frac = np.arange(n) / (n - 1) if n > 1 else np.zeros(1)
    t = (a + frac * (b - a)) ** cfg.rho
    return np.append(t, 0.0)


@dataclass
class SampleTrace:
    t: np.ndarray               # (N,)
    gamma: np.ndarray           # (N,)
    x_pred_before: np.ndarray   # (N, n, d)
    x_pred_after: np.ndarray    # (N, n, d)
    loss_before: np.ndarray | None = None   # (N, n); NaN where guidance is inactive
    loss_after: np.ndarray | None = None

    def rows(self):
        """``(chain, step, t, gamma, loss_before, loss_after)``, step-major."""
        out = []
        N, n = self.x_pred_before.shape[:2]
        for i in range(N):
            for c in range(n):
                lb = la = None
                if self.loss_before is not None and np.isfinite(self.loss_before[i, c]):
                    lb, la = float(self.loss_before[i, c]), float(self.loss_after[i, c])
                out.append((c, i, float(self.t[i]), float(self.gamma[i]), lb, la))
        return out


@dataclass
class SampleResult:
    samples: np.ndarray
    trace: SampleTrace | None = field(default=None)


def _checked(x, what):
    if not np.all(np.isfinite(x)):
        raise SamplerDivergedError(f"non-finite {what}")
    return x


def edm_sample(denoiser, cfg, rng, n_samples, dim=1, trace=False):
    """Stochastic Heun sampler with optional guidance of the denoised estimate.

    ``denoiser(x, t)`` maps an ``(n, d)`` batch to its denoised estimate. All
    chains advance together and share ``rng``.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    ts = karras_schedule(cfg)
    N = cfg.n_steps
    g = cfg.guidance
    if g is not None and g.loss.dim != dim:
        raise ValueError("guidance loss dimension does not match samples")
    gamma_max = min(cfg.S_churn / N, math.sqrt(2.0) - 1.0)
    x = rng.standard_normal((n_samples, dim)) * ts[0]
    rec = None
    if trace:
        rec = SampleTrace(ts[:N].copy(), np.zeros(N), np.zeros((N, n_samples, dim)),
                          np.zeros((N, n_samples, dim)))
        if g is not None:
            rec.loss_before = np.full((N, n_samples), np.nan)
            rec.loss_after = np.full((N, n_samples), np.nan)
    for i in range(N):
        t_cur, t_next = ts[i], ts[i + 1]
        gamma = gamma_max if cfg.S_tmin <= t_cur <= cfg.S_tmax else 0.0
        t_hat = t_cur + gamma * t_cur
        if gamma > 0:
            eps = rng.standard_normal(x.shape) * cfg.S_noise
            x_hat = x + math.sqrt(t_hat * t_hat - t_cur * t_cur) * eps
        else:
            x_hat = x
        x_pred = _checked(np.asarray(denoiser(x_hat, t_hat), dtype=np.float64), "denoiser output")
        before = x_pred
        if g is not None and g.active(i):
            x_pred = face_optimize(x_pred, g.loss, g.k, g.eta)
            if trace:
                rec.loss_before[i] = g.loss.value_and_grad(before)[0]
                rec.loss_after[i] = g.loss.value_and_grad(x_pred)[0]
        if trace:
            rec.gamma[i] = gamma
            rec.x_pred_before[i] = before
            rec.x_pred_after[i] = x_pred
        d = (x_hat - x_pred) / t_hat
        x_next = x_hat + (t_next - t_hat) * d
        if t_next != 0:
            x_pred2 = _checked(np.asarray(denoiser(x_next, t_next), dtype=np.float64),
                               "denoiser output")
            d2 = (x_next - x_pred2) / t_next
            x_next = x_hat + (t_next - t_hat) * (0.5 * d + 0.5 * d2)
        x = x_next
    return SampleResult(x, rec)


# ------------------------------------------------------------- optimal control

def control_time(t_prime, t_max):
    """Map a denoising time ``t'`` in ``[0, t_max]`` to control time ``1 - t'/t_max``."""
    return 1.0 - np.asarray(t_prime, dtype=np.float64) / t_max


def optimal_control(x1, Xt, t, r):
    """``c* = r (x1 - X_t) / (1 + r (1 - t))``."""
    denom = 1.0 + r * (1.0 - t)
    if not denom > 0:
        raise ValueError("need 1 + r(1 - t) > 0")
    return r * (np.asarray(x1, dtype=np.float64) - np.asarray(Xt, dtype=np.float64)) / denom


def hamiltonian(c, costate):
    """``H(c) = -0.5 ||c||^2 + costate . c``; stationary at ``c = costate``."""
    c = np.asarray(c, dtype=np.float64)
    return float(-0.5 * np.dot(c.ravel(), c.ravel()) + np.dot(np.ravel(costate), c.ravel()))


def hamiltonian_grad_fd(c, costate, rel_step=1e-3):
    """Central-difference ``dH/dc``.

    Central differences are exact for a quadratic, so the step only trades
    off roundoff; it is taken relative to ``|c|``.
    """
    c = np.atleast_1d(np.asarray(c, dtype=np.float64))
    g = np.zeros_like(c)
    for j in range(c.size):
        h = rel_step * max(1.0, abs(float(c.flat[j])))
        e = np.zeros_like(c)
        e.flat[j] = h
        g.flat[j] = (hamiltonian(c + e, costate) - hamiltonian(c - e, costate)) / (2 * h)
    return g


def simulate_controlled_ode(X0, x1, r, n_steps=10_000):
    """RK4 integration of ``dX/dt = optimal_control(x1, X, t, r)`` over ``[0, 1]``."""
    if n_steps < 1000:
        raise ValueError("n_steps must be >= 1000")
    X = np.array(X0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    h = 1.0 / n_steps
    for i in range(n_steps):
        t = i * h
        k1 = optimal_control(x1, X, t, r)
        k2 = optimal_control(x1, X + 0.5 * h * k1, t + 0.5 * h, r)
        k3 = optimal_control(x1, X + 0.5 * h * k2, t + 0.5 * h, r)
        k4 = optimal_control(x1, X + h * k3, t + h, r)
        X = X + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return X


def controlled_ode_law(X0, x1, r):
    """Closed-form ``|X1 - x1| = |X0 - x1| / (1 + r)``."""
    return np.abs(np.asarray(X0, dtype=np.float64) - np.asarray(x1, dtype=np.float64)) / (1.0 + r)
