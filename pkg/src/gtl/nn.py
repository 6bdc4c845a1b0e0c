"""Dense-algebra kernels with hand-written backward passes.

All kernels operate on float64 arrays (row-major, samples along axis 0)
and are deterministic given their inputs and, where sampling is involved,
the supplied generator. Forward functions that participate in
backpropagation return a cache object that the matching backward function
consumes; caches hold exactly what the analytic gradient needs.

Numerical guards baked in here:
  - log-variances are clamped to [LOGVAR_MIN, LOGVAR_MAX] before
    exponentiation,
  - softmax subtracts the row max before exponentiating,
  - batch normalization adds ``eps`` inside the square root.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

LOGVAR_MIN = -30.0
LOGVAR_MAX = 20.0


class DimensionError(ValueError):
    """Raised when operand shapes do not conform."""


def _as_matrix(x, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {x.shape}")
    return x


# ---------------------------------------------------------------------------
# dense
# ---------------------------------------------------------------------------

def dense_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """out = x @ w + b, with b broadcast over rows."""
    x = _as_matrix(x, "x")
    w = _as_matrix(w, "w")
    b = np.asarray(b, dtype=np.float64)
    if x.shape[1] != w.shape[0]:
        raise DimensionError(
            f"dense: input width {x.shape[1]} != weight rows {w.shape[0]}"
        )
    if b.shape != (w.shape[1],):
        raise DimensionError(f"dense: bias shape {b.shape} != ({w.shape[1]},)")
    return x @ w + b


def dense_backward(x, w, d_out):
    """Gradients of a dense layer: (dX, dW, db)."""
    x = _as_matrix(x, "x")
    w = _as_matrix(w, "w")
    d_out = _as_matrix(d_out, "d_out")
    if d_out.shape != (x.shape[0], w.shape[1]):
        raise DimensionError(
            f"dense backward: d_out shape {d_out.shape} != {(x.shape[0], w.shape[1])}"
        )
    dx = d_out @ w.T
    dw = x.T @ d_out
    db = d_out.sum(axis=0)
    return dx, dw, db


# ---------------------------------------------------------------------------
# relu
# ---------------------------------------------------------------------------

def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def relu_backward(x: np.ndarray, d_out: np.ndarray) -> np.ndarray:
    return d_out * (x > 0.0)


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

@dataclass
class BatchNormState:
    """Learnable scale/shift plus running statistics for one BN layer.

    ``gamma``/``beta`` are learnable; the running statistics are updated
    only by train-mode forward passes (convex blend with ``momentum``) and
    consumed by eval-mode passes, which are deterministic.
    """

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def create(cls, n: int, momentum: float = 0.1, eps: float = 1e-5) -> "BatchNormState":
        return cls(
            gamma=np.ones(n),
            beta=np.zeros(n),
            running_mean=np.zeros(n),
            running_var=np.ones(n),
            momentum=momentum,
            eps=eps,
        )


def batchnorm_forward(x, state: BatchNormState, train: bool, update_running: bool = True):
    """Returns (out, cache). Train mode normalizes with batch statistics
    (biased variance) and needs at least 2 samples; eval mode uses the
    running statistics only."""
    x = _as_matrix(x, "x")
    if x.shape[1] != state.gamma.shape[0]:
        raise DimensionError(
            f"batchnorm: feature width {x.shape[1]} != {state.gamma.shape[0]}"
        )
    if train:
        if x.shape[0] < 2:
            raise ValueError(
                "train-mode batchnorm needs a batch of at least 2 samples "
                "(variance of a single sample is undefined)"
            )
        mean = x.mean(axis=0)
        var = x.var(axis=0)
        inv_std = 1.0 / np.sqrt(var + state.eps)
        x_norm = (x - mean) * inv_std
        if update_running:
            # in place: checkpoint buffers alias these arrays
            m = state.momentum
            state.running_mean *= 1.0 - m
            state.running_mean += m * mean
            state.running_var *= 1.0 - m
            state.running_var += m * var
        cache = ("train", x_norm, inv_std, state.gamma)
    else:
        inv_std = 1.0 / np.sqrt(state.running_var + state.eps)
        x_norm = (x - state.running_mean) * inv_std
        cache = ("eval", x_norm, inv_std, state.gamma)
    return x_norm * state.gamma + state.beta, cache


def batchnorm_backward(cache, d_out):
    """Returns (dx, dgamma, dbeta) for the cached forward pass."""
    kind, x_norm, inv_std, gamma = cache
    d_out = _as_matrix(d_out, "d_out")
    dgamma = (d_out * x_norm).sum(axis=0)
    dbeta = d_out.sum(axis=0)
    d_norm = d_out * gamma
    if kind == "eval":
        # running statistics are constants
        return d_norm * inv_std, dgamma, dbeta
    n = x_norm.shape[0]
    dx = (
        d_norm - d_norm.mean(axis=0) - x_norm * (d_norm * x_norm).mean(axis=0)
    ) * inv_std
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------------
# dropout (inverted scaling: eval-mode output needs no rescale)
# ---------------------------------------------------------------------------

def dropout_forward(x, rate: float, rng: np.random.Generator | None, train: bool):
    """Returns (out, mask). mask is None when the layer is an identity
    (eval mode or rate 0); otherwise kept units are pre-scaled by
    1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    x = np.asarray(x, dtype=np.float64)
    if not train or rate == 0.0:
        return x, None
    if rng is None:
        raise ValueError("train-mode dropout with rate > 0 needs an rng")
    keep = 1.0 - rate
    mask = (rng.random(x.shape) >= rate) / keep
    return x * mask, mask


def dropout_backward(mask, d_out):
    if mask is None:
        return d_out
    return d_out * mask


# ---------------------------------------------------------------------------
# softmax / cross-entropy
# ---------------------------------------------------------------------------

def softmax(logits: np.ndarray) -> np.ndarray:
    logits = _as_matrix(logits, "logits")
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean negative log-likelihood over the batch.

    Returns (loss, dLogits) with dLogits = (softmax - one_hot) / B.
    """
    logits = _as_matrix(logits, "logits")
    labels = np.asarray(labels)
    b, c = logits.shape
    if labels.shape != (b,):
        raise DimensionError(f"labels shape {labels.shape} != ({b},)")
    if labels.min() < 0 or labels.max() >= c:
        raise IndexError(f"labels must lie in [0, {c}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = -log_probs[np.arange(b), labels].mean()
    d_logits = np.exp(log_probs)
    d_logits[np.arange(b), labels] -= 1.0
    d_logits /= b
    return float(loss), d_logits


# ---------------------------------------------------------------------------
# Gaussian KL to the standard-normal prior
# ---------------------------------------------------------------------------

def gaussian_kl(mu, logvar) -> float:
    """KL(N(mu, e^logvar) || N(0, I)), summed over latent dims and
    averaged over the batch. Nonnegative; zero iff mu=0 and logvar=0."""
    mu = _as_matrix(mu, "mu")
    logvar = _as_matrix(logvar, "logvar")
    if mu.shape != logvar.shape:
        raise DimensionError(f"mu shape {mu.shape} != logvar shape {logvar.shape}")
    per_sample = 0.5 * (mu**2 + np.exp(logvar) - 1.0 - logvar).sum(axis=1)
    return float(per_sample.mean())


def gaussian_kl_backward(mu, logvar, d_loss: float = 1.0):
    """Gradients of gaussian_kl w.r.t. mu and logvar."""
    b = mu.shape[0]
    d_mu = d_loss * mu / b
    d_logvar = d_loss * 0.5 * (np.exp(logvar) - 1.0) / b
    return d_mu, d_logvar


VAR_MIN = 1e-8


def gaussian_kl_moments(mean, var) -> float:
    """KL(N(mean, var) || N(0, I)) expressed in (mean, variance) moments,
    for posteriors whose variance is derived rather than parameterized as
    a log. Same reduction as gaussian_kl; var is floored at VAR_MIN."""
    mean = _as_matrix(mean, "mean")
    var = np.maximum(_as_matrix(var, "var"), VAR_MIN)
    per_sample = 0.5 * (mean**2 + var - 1.0 - np.log(var)).sum(axis=1)
    return float(per_sample.mean())


def gaussian_kl_moments_backward(mean, var, d_loss: float = 1.0):
    """Gradients of gaussian_kl_moments; zero where var hit the floor."""
    b = mean.shape[0]
    floored = np.maximum(var, VAR_MIN)
    d_mean = d_loss * mean / b
    d_var = d_loss * 0.5 * (1.0 - 1.0 / floored) / b
    d_var = d_var * (var > VAR_MIN)
    return d_mean, d_var


# ---------------------------------------------------------------------------
# reparameterization
# ---------------------------------------------------------------------------

def clamp_logvar(logvar: np.ndarray) -> np.ndarray:
    return np.clip(logvar, LOGVAR_MIN, LOGVAR_MAX)


def reparameterize(mu, logvar, rng: np.random.Generator | None, eps=None):
    """z = mu + exp(logvar/2) * eps with eps ~ N(0, I).

    Returns (z, eps); pass ``eps`` explicitly to pin the noise (gradient
    checking). logvar is expected pre-clamped by the caller.
    """
    mu = _as_matrix(mu, "mu")
    logvar = _as_matrix(logvar, "logvar")
    if mu.shape != logvar.shape:
        raise DimensionError(f"mu shape {mu.shape} != logvar shape {logvar.shape}")
    if eps is None:
        if rng is None:
            raise ValueError("reparameterize needs an rng when eps is not given")
        eps = rng.standard_normal(mu.shape)
    return mu + np.exp(0.5 * logvar) * eps, eps


def reparameterize_backward(logvar, eps, d_z):
    """Gradients w.r.t. (mu, logvar): identity for mu,
    0.5*exp(logvar/2)*eps for logvar."""
    return d_z, d_z * 0.5 * np.exp(0.5 * logvar) * eps


# ---------------------------------------------------------------------------
# parameter groups and Adam
# ---------------------------------------------------------------------------

@dataclass
class ParamGroup:
    """A named bundle of weights with matching gradient slots.

    ``buffers`` holds non-learnable state (batch-norm running statistics)
    that belongs to the group for checkpointing and the freeze contract
    but is never touched by the optimizer.
    """

    name: str
    weights: dict[str, np.ndarray] = field(default_factory=dict)
    grads: dict[str, np.ndarray] = field(default_factory=dict)
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    frozen: bool = False

    def add(self, name: str, value: np.ndarray) -> np.ndarray:
        value = np.asarray(value, dtype=np.float64)
        self.weights[name] = value
        self.grads[name] = np.zeros_like(value)
        return value

    def zero_grads(self) -> None:
        for g in self.grads.values():
            g[...] = 0.0

    def checksum_bytes(self) -> bytes:
        parts = []
        for name in sorted(self.weights):
            parts.append(self.weights[name].tobytes())
        for name in sorted(self.buffers):
            parts.append(self.buffers[name].tobytes())
        return b"".join(parts)


@dataclass
class AdamState:
    """Adam with decoupled weight decay and bias-corrected moments."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_group(cls, group: ParamGroup, lr: float, weight_decay: float = 0.0,
                  beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        state = cls(lr=lr, beta1=beta1, beta2=beta2, eps=eps, weight_decay=weight_decay)
        for name, w in group.weights.items():
            state.m[name] = np.zeros_like(w)
            state.v[name] = np.zeros_like(w)
        return state


def adam_step(group: ParamGroup, state: AdamState) -> None:
    """One optimizer step over every weight in the group.

    Decoupled weight decay (w -= lr*wd*w) is applied before the moment
    update. Calling on a frozen group is a warned no-op that leaves the
    weights bit-identical.
    """
    if group.frozen:
        warnings.warn(f"adam_step called on frozen group {group.name!r}; skipped",
                      stacklevel=2)
        return
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, w in group.weights.items():
        g = group.grads[name]
        if state.weight_decay != 0.0:
            w -= state.lr * state.weight_decay * w
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        w -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


# ---------------------------------------------------------------------------
# finite-difference gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckEntry:
    group: str
    tensor: str
    index: int
    analytic: float
    numeric: float
    rel_err: float


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst: GradCheckEntry | None
    entries_checked: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol

    def summary(self) -> str:
        if self.worst is None:
            return "gradient check: no entries checked"
        w = self.worst
        status = "PASS" if self.passed else "FAIL"
        return (
            f"gradient check {status}: max rel err {self.max_rel_err:.3e} "
            f"(tol {self.tol:.1e}) at {w.group}/{w.tensor}[{w.index}] "
            f"analytic={w.analytic:.6e} numeric={w.numeric:.6e} "
            f"over {self.entries_checked} entries"
        )


def _rel_err(a: float, n: float) -> float:
    # guarded relative error: entries smaller than 1 compare absolutely,
    # which keeps finite-difference roundoff from dominating near zero
    return abs(a - n) / max(abs(a), abs(n), 1.0)


def gradient_check(closure, groups, tol: float = 1e-4, step: float = 1e-5,
                   max_entries_per_tensor: int = 16,
                   rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    ``closure(compute_grads)`` must return the scalar loss; when
    ``compute_grads`` is true it must also populate ``group.grads`` for
    every group. The closure has to be deterministic across calls (fixed
    sampling noise, dropout off). Frozen groups are excluded. Tensors
    larger than ``max_entries_per_tensor`` are subsampled with ``rng``.
    """
    groups = [g for g in groups if not g.frozen]
    for g in groups:
        g.zero_grads()
    closure(True)
    analytic = {g.name: {k: v.copy() for k, v in g.grads.items()} for g in groups}

    worst = None
    max_err = 0.0
    checked = 0
    for group in groups:
        for name, w in group.weights.items():
            flat = w.reshape(-1)
            n = flat.size
            if n <= max_entries_per_tensor:
                indices = np.arange(n)
            else:
                if rng is None:
                    raise ValueError("rng required to subsample large tensors")
                indices = rng.choice(n, size=max_entries_per_tensor, replace=False)
            for idx in indices:
                idx = int(idx)
                orig = flat[idx]
                flat[idx] = orig + step
                loss_plus = closure(False)
                flat[idx] = orig - step
                loss_minus = closure(False)
                flat[idx] = orig
                numeric = (loss_plus - loss_minus) / (2.0 * step)
                ana = float(analytic[group.name][name].reshape(-1)[idx])
                err = _rel_err(ana, numeric)
                checked += 1
                if err > max_err or worst is None:
                    max_err = err
                    worst = GradCheckEntry(group.name, name, idx, ana, numeric, err)
    return GradCheckReport(max_rel_err=max_err, worst=worst,
                           entries_checked=checked, tol=tol)
