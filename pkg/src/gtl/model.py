"""The generative transfer network.

A feature vector x is encoded into an isotropic-Gaussian posterior over a
latent code z = (z_c, z_m): the first block is the class-intrinsic
concept, the second the in-modality disturbance. A bank of gated linear
experts estimates a domain variable u_hat from the encoder's shared
hidden activation; a linear aggregator fuses u_hat with z_m into z_m',
and the generator reconstructs x from (z_c, z_m'). A two-layer linear
classifier reads class logits off z_c.

Layer structure (defaults in parentheses):

    encoder     dense Dx(1280) -> H(256), batchnorm, relu, dropout
                mu head H -> Nc+Nm(192);  logvar head H -> Nc+Nm
    disturbance gate dense H -> d(128), softmax over domains
                experts dense H -> d*Nm, reshaped to (B, d, Nm)
                u_hat = sum_j gate_j * expert_j        (B, Nm)
    aggregator  dense 2*Nm -> Nm on [u_hat; z_m]
    generator   dense Nc+Nm -> H, batchnorm, relu, dropout; dense H -> Dx
    classifier  dense Nc -> Dx; dense Dx -> C

The training objective prices the latents the generator actually
consumes: the KL regularizer covers the concept block (z_c) and the
aggregated disturbance (z_m'). Because the aggregator is linear, the
z_m' posterior is Gaussian with mean dense([u_hat; mu_m]) and variance
(W_m^2)-weighted sums of the z_m variances (diagonal reading), so the KL
stays in closed form. Pricing z_m' rather than raw z_m matters: u_hat is
a deterministic function of the input, and leaving it outside the
regularizer opens a cost-free information path that drains z_c of class
signal.

Ablation wiring:
    "full"   everything above.
    "no_zm"  the disturbance latent is removed: only z_c is sampled and
             regularized, the generator decodes [z_c; zeros], and the
             gate/expert/aggregator parameters cannot affect any output.
    "no_z"   no latent variables at all; the classifier reads the raw
             feature vector directly (input width Dx).

Backpropagation is written by hand in `loss_and_grads`; every gradient it
produces is covered by the finite-difference harness in `gtl.nn`.
"""

from __future__ import annotations

import copy
import hashlib
import io
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from .nn import (
    BatchNormState,
    DimensionError,
    ParamGroup,
    batchnorm_backward,
    batchnorm_forward,
    clamp_logvar,
    dense_backward,
    dense_forward,
    dropout_backward,
    dropout_forward,
    gaussian_kl,
    gaussian_kl_backward,
    gaussian_kl_moments,
    gaussian_kl_moments_backward,
    relu_backward,
    relu_forward,
    reparameterize,
    reparameterize_backward,
    softmax,
    softmax_cross_entropy,
)

ABLATIONS = ("full", "no_z", "no_zm")

GROUP_ENCODER = "encoder"
GROUP_DISTURBANCE = "disturbance"
GROUP_AGGREGATOR = "aggregator"
GROUP_GENERATOR = "generator"
GROUP_CLASSIFIER = "classifier"
GROUP_ORDER = (GROUP_ENCODER, GROUP_DISTURBANCE, GROUP_AGGREGATOR,
               GROUP_GENERATOR, GROUP_CLASSIFIER)

# groups trained by the reconstruction objective (the classifier is not)
REPRESENTATION_GROUPS = (GROUP_ENCODER, GROUP_DISTURBANCE, GROUP_AGGREGATOR,
                         GROUP_GENERATOR)


@dataclass
class ModelDims:
    """Layer widths. C is the classifier output count and is set whenever
    the classifier is (re)built for a concrete label set."""

    Dx: int = 1280
    Nc: int = 128
    Nm: int = 64
    H: int = 256
    d: int = 128
    C: int = 0

    def validate(self) -> None:
        for name in ("Dx", "Nc", "Nm", "H", "d"):
            if getattr(self, name) <= 0:
                raise ValueError(f"ModelDims.{name} must be positive")

    @property
    def latent(self) -> int:
        return self.Nc + self.Nm


@dataclass
class LatentSample:
    """Everything one forward pass produced on the latent path. Fields on
    paths an ablation disables are None.

    ``z_m_prime_mean``/``z_m_prime_var`` are the moments of the aggregated
    disturbance's posterior (the aggregator is linear, so they are exact up
    to the diagonal-covariance reading); the regularizer prices this
    distribution rather than the raw z_m posterior."""

    hidden: np.ndarray
    mu: np.ndarray | None = None
    logvar: np.ndarray | None = None
    z_c: np.ndarray | None = None
    z_m: np.ndarray | None = None
    u_hat: np.ndarray | None = None
    z_m_prime: np.ndarray | None = None
    z_m_prime_mean: np.ndarray | None = None
    z_m_prime_var: np.ndarray | None = None
    gates: np.ndarray | None = None


@dataclass
class GtlParams:
    """All learnable parameter groups plus the label bookkeeping needed to
    validate transfer (base and novel label sets must stay disjoint)."""

    dims: ModelDims
    ablation: str
    groups: dict[str, ParamGroup]
    class_labels: list[int] = field(default_factory=list)
    base_labels: list[int] = field(default_factory=list)

    def group(self, name: str) -> ParamGroup:
        return self.groups[name]

    def zero_grads(self) -> None:
        for g in self.groups.values():
            g.zero_grads()

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in GROUP_ORDER:
            h.update(self.groups[name].checksum_bytes())
        return h.hexdigest()

    def group_checksum(self, name: str) -> str:
        return hashlib.sha256(self.groups[name].checksum_bytes()).hexdigest()

    def copy(self) -> "GtlParams":
        return copy.deepcopy(self)


def _glorot(rng: np.random.Generator, n_in: int, n_out: int) -> np.ndarray:
    scale = np.sqrt(2.0 / (n_in + n_out))
    return rng.normal(0.0, scale, size=(n_in, n_out))


def _classifier_in_width(dims: ModelDims, ablation: str) -> int:
    return dims.Dx if ablation == "no_z" else dims.Nc


def init_params(dims: ModelDims, rng: np.random.Generator,
                ablation: str = "full") -> GtlParams:
    """Fresh parameters; draw order is fixed so a seed pins every tensor.

    All five groups are always materialized regardless of ablation; the
    ablation only changes which paths the forward pass wires up.
    """
    if ablation not in ABLATIONS:
        raise ValueError(f"unknown ablation {ablation!r}, expected one of {ABLATIONS}")
    dims = replace(dims)
    dims.validate()
    lat = dims.latent

    enc = ParamGroup(GROUP_ENCODER)
    enc.add("hidden_w", _glorot(rng, dims.Dx, dims.H))
    enc.add("hidden_b", np.zeros(dims.H))
    enc.add("bn_gamma", np.ones(dims.H))
    enc.add("bn_beta", np.zeros(dims.H))
    enc.buffers["bn_mean"] = np.zeros(dims.H)
    enc.buffers["bn_var"] = np.ones(dims.H)
    enc.add("mu_w", _glorot(rng, dims.H, lat))
    enc.add("mu_b", np.zeros(lat))
    enc.add("logvar_w", _glorot(rng, dims.H, lat))
    enc.add("logvar_b", np.zeros(lat))

    dist = ParamGroup(GROUP_DISTURBANCE)
    dist.add("gate_w", _glorot(rng, dims.H, dims.d))
    dist.add("gate_b", np.zeros(dims.d))
    dist.add("experts_w", _glorot(rng, dims.H, dims.d * dims.Nm))
    dist.add("experts_b", np.zeros(dims.d * dims.Nm))

    agg = ParamGroup(GROUP_AGGREGATOR)
    agg.add("w", _glorot(rng, 2 * dims.Nm, dims.Nm))
    agg.add("b", np.zeros(dims.Nm))

    gen = ParamGroup(GROUP_GENERATOR)
    gen.add("hidden_w", _glorot(rng, lat, dims.H))
    gen.add("hidden_b", np.zeros(dims.H))
    gen.add("bn_gamma", np.ones(dims.H))
    gen.add("bn_beta", np.zeros(dims.H))
    gen.buffers["bn_mean"] = np.zeros(dims.H)
    gen.buffers["bn_var"] = np.ones(dims.H)
    gen.add("out_w", _glorot(rng, dims.H, dims.Dx))
    gen.add("out_b", np.zeros(dims.Dx))

    groups = {g.name: g for g in (enc, dist, agg, gen)}
    params = GtlParams(dims=dims, ablation=ablation, groups=groups)
    groups[GROUP_CLASSIFIER] = _build_classifier(dims, ablation, rng)
    if dims.C > 0:
        params.class_labels = list(range(dims.C))
    return params


def _build_classifier(dims: ModelDims, ablation: str,
                      rng: np.random.Generator) -> ParamGroup:
    n_in = _classifier_in_width(dims, ablation)
    n_out = max(dims.C, 1)
    cls = ParamGroup(GROUP_CLASSIFIER)
    cls.add("hidden_w", _glorot(rng, n_in, dims.Dx))
    cls.add("hidden_b", np.zeros(dims.Dx))
    cls.add("out_w", _glorot(rng, dims.Dx, n_out))
    cls.add("out_b", np.zeros(n_out))
    return cls


def reinit_classifier(params: GtlParams, labels: list[int],
                      rng: np.random.Generator) -> None:
    """Replace the classifier with a fresh one for a new label set.

    Used whenever the class set changes (base vs novel); the new weights
    depend only on the rng stream, never on the previous classifier.
    """
    labels = sorted(labels)
    params.dims.C = len(labels)
    params.class_labels = labels
    params.groups[GROUP_CLASSIFIER] = _build_classifier(params.dims,
                                                        params.ablation, rng)


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------

@dataclass
class ForwardState:
    """Latents plus every intermediate the backward sweep needs."""

    sample: LatentSample
    x_hat: np.ndarray | None
    logits: np.ndarray | None
    mode: str
    cache: dict


class GtlModel:
    """Stateless wiring around a GtlParams bundle.

    Batch-norm state objects are views onto the group tensors, so
    optimizer steps and checkpoint loads act on one storage.
    """

    def __init__(self, params: GtlParams, dropout_rate: float = 0.5):
        self.params = params
        self.dropout_rate = dropout_rate
        self.enc_bn = self._bn_view(params.group(GROUP_ENCODER))
        self.gen_bn = self._bn_view(params.group(GROUP_GENERATOR))

    @staticmethod
    def _bn_view(group: ParamGroup) -> BatchNormState:
        return BatchNormState(
            gamma=group.weights["bn_gamma"],
            beta=group.weights["bn_beta"],
            running_mean=group.buffers["bn_mean"],
            running_var=group.buffers["bn_var"],
        )

    @property
    def dims(self) -> ModelDims:
        return self.params.dims

    @property
    def ablation(self) -> str:
        return self.params.ablation

    # -- public ops -------------------------------------------------------

    def encode(self, x, mode: str, rng=None) -> LatentSample:
        """Posterior pass: hidden, mu, logvar, and the (z_c, z_m) split.
        Train mode samples via reparameterization; eval mode sets z = mu."""
        if self.ablation == "no_z":
            raise ValueError("ablation no_z has no posterior to encode")
        state = self._forward(x, mode, rng, encode_only=True)
        return state.sample

    def estimate_disturbance(self, hidden):
        """(u_hat, gates) from the shared hidden activation: gates are a
        softmax over d latent domains, u_hat the gated expert blend."""
        hidden = np.asarray(hidden, dtype=np.float64)
        g = self.params.group(GROUP_DISTURBANCE)
        gates = softmax(dense_forward(hidden, g.weights["gate_w"], g.weights["gate_b"]))
        experts = dense_forward(hidden, g.weights["experts_w"], g.weights["experts_b"])
        experts = experts.reshape(hidden.shape[0], self.dims.d, self.dims.Nm)
        u_hat = np.einsum("bd,bdn->bn", gates, experts)
        return u_hat, gates

    def aggregate(self, u_hat, z_m):
        """z_m' = dense([u_hat; z_m])."""
        u_hat = np.asarray(u_hat, dtype=np.float64)
        z_m = np.asarray(z_m, dtype=np.float64)
        if u_hat.shape != z_m.shape or u_hat.shape[1] != self.dims.Nm:
            raise DimensionError(
                f"aggregate: expected two (B, {self.dims.Nm}) inputs, got "
                f"{u_hat.shape} and {z_m.shape}"
            )
        g = self.params.group(GROUP_AGGREGATOR)
        return dense_forward(np.hstack([u_hat, z_m]), g.weights["w"], g.weights["b"])

    def decode(self, z_c, z_m_prime, mode: str, rng=None):
        """Reconstruction x_hat from (z_c, z_m'); eval mode is
        deterministic (running batch-norm statistics, no dropout)."""
        z_c = np.asarray(z_c, dtype=np.float64)
        z_m_prime = np.asarray(z_m_prime, dtype=np.float64)
        if z_c.shape[1] != self.dims.Nc or z_m_prime.shape[1] != self.dims.Nm:
            raise DimensionError(
                f"decode: expected widths ({self.dims.Nc}, {self.dims.Nm}), got "
                f"({z_c.shape[1]}, {z_m_prime.shape[1]})"
            )
        gen = self.params.group(GROUP_GENERATOR)
        train = mode == "train" and not gen.frozen
        x_hat, _ = self._decode_with_cache(np.hstack([z_c, z_m_prime]), train, rng,
                                           update_running=train)
        return x_hat

    def classify(self, z_c):
        """Class probabilities from z_c (rows sum to 1)."""
        return softmax(self.classify_logits(z_c))

    def classify_logits(self, z_c):
        z_c = np.asarray(z_c, dtype=np.float64)
        cls = self.params.group(GROUP_CLASSIFIER)
        expected = cls.weights["hidden_w"].shape[0]
        if z_c.shape[1] != expected:
            raise DimensionError(
                f"classify: input width {z_c.shape[1]} != classifier width {expected}"
            )
        hidden = dense_forward(z_c, cls.weights["hidden_w"], cls.weights["hidden_b"])
        return dense_forward(hidden, cls.weights["out_w"], cls.weights["out_b"])

    def forward_full(self, x, mode: str, rng=None, ablation: str | None = None):
        """Full wiring: encode -> estimate_disturbance -> aggregate ->
        decode, plus classify(z_c). Returns (LatentSample, x_hat, logits)."""
        state = self._forward(x, mode, rng, ablation=ablation)
        return state.sample, state.x_hat, state.logits

    # -- internal forward with caches --------------------------------------

    def _decode_with_cache(self, dec_in, train: bool, rng, update_running: bool):
        gen = self.params.group(GROUP_GENERATOR)
        g_pre = dense_forward(dec_in, gen.weights["hidden_w"], gen.weights["hidden_b"])
        g_bn, bn_cache = batchnorm_forward(g_pre, self.gen_bn, train=train,
                                           update_running=update_running)
        g_relu = relu_forward(g_bn)
        g_drop, drop_mask = dropout_forward(g_relu, self.dropout_rate, rng, train=train)
        x_hat = dense_forward(g_drop, gen.weights["out_w"], gen.weights["out_b"])
        cache = {"dec_in": dec_in, "g_pre": g_pre, "bn": bn_cache, "g_bn": g_bn,
                 "drop": drop_mask, "g_drop": g_drop}
        return x_hat, cache

    def _forward(self, x, mode: str, rng=None, ablation: str | None = None,
                 fixed_eps=None, bn_eval: bool = False,
                 encode_only: bool = False) -> ForwardState:
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        ablation = self.ablation if ablation is None else ablation
        if ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {ablation!r}")
        if ablation != self.ablation and "no_z" in (ablation, self.ablation):
            raise ValueError(
                f"parameters built for ablation {self.ablation!r} cannot run "
                f"{ablation!r} (classifier widths differ)"
            )
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.dims.Dx:
            raise DimensionError(
                f"expected features of shape (B, Dx={self.dims.Dx}), got {x.shape}"
            )
        dims = self.dims
        train = mode == "train"
        cache: dict = {"x": x, "ablation": ablation}

        if ablation == "no_z":
            # no latent machinery: the classifier reads the features as-is
            sample = LatentSample(hidden=x)
            logits = None if encode_only else self.classify_logits(x)
            return ForwardState(sample=sample, x_hat=None, logits=logits,
                                mode=mode, cache=cache)

        # encoder
        enc = self.params.group(GROUP_ENCODER)
        enc_train = train and not enc.frozen
        h_pre = dense_forward(x, enc.weights["hidden_w"], enc.weights["hidden_b"])
        h_bn, cache["enc_bn"] = batchnorm_forward(
            h_pre, self.enc_bn, train=enc_train and not bn_eval,
            update_running=enc_train and not bn_eval)
        h_relu = relu_forward(h_bn)
        h, cache["enc_drop"] = dropout_forward(h_relu, self.dropout_rate, rng,
                                               train=enc_train)
        cache.update(h_pre=h_pre, h_bn=h_bn, h=h)

        mu = dense_forward(h, enc.weights["mu_w"], enc.weights["mu_b"])
        logvar_raw = dense_forward(h, enc.weights["logvar_w"], enc.weights["logvar_b"])
        logvar = clamp_logvar(logvar_raw)
        cache.update(mu=mu, logvar_raw=logvar_raw, logvar=logvar)

        if ablation == "no_zm":
            # the disturbance latent is removed: sample the concept block
            # only, decode it padded with zeros
            mu_c, logvar_c = mu[:, :dims.Nc], logvar[:, :dims.Nc]
            if train:
                z_c, eps = reparameterize(mu_c, logvar_c, rng, eps=fixed_eps)
            else:
                z_c, eps = mu_c, None
            cache["eps"] = eps
            sample = LatentSample(hidden=h, mu=mu, logvar=logvar, z_c=z_c)
            if encode_only:
                return ForwardState(sample=sample, x_hat=None, logits=None,
                                    mode=mode, cache=cache)
            z_m_prime = np.zeros((x.shape[0], dims.Nm))
        else:
            if train:
                z, eps = reparameterize(mu, logvar, rng, eps=fixed_eps)
            else:
                z, eps = mu, None
            cache["eps"] = eps
            z_c, z_m = z[:, :dims.Nc], z[:, dims.Nc:]
            sample = LatentSample(hidden=h, mu=mu, logvar=logvar, z_c=z_c, z_m=z_m)
            if encode_only:
                return ForwardState(sample=sample, x_hat=None, logits=None,
                                    mode=mode, cache=cache)

            dist = self.params.group(GROUP_DISTURBANCE)
            gate_logits = dense_forward(h, dist.weights["gate_w"],
                                        dist.weights["gate_b"])
            gates = softmax(gate_logits)
            experts_flat = dense_forward(h, dist.weights["experts_w"],
                                         dist.weights["experts_b"])
            experts = experts_flat.reshape(x.shape[0], dims.d, dims.Nm)
            u_hat = np.einsum("bd,bdn->bn", gates, experts)

            # sample path feeds the generator; the posterior moments of
            # z_m' (linear image of the z_m posterior shifted by u_hat)
            # feed the regularizer
            agg = self.params.group(GROUP_AGGREGATOR)
            agg_w, agg_b = agg.weights["w"], agg.weights["b"]
            agg_in = np.hstack([u_hat, z_m])
            z_m_prime = dense_forward(agg_in, agg_w, agg_b)
            mu_m, logvar_m = mu[:, dims.Nc:], logvar[:, dims.Nc:]
            agg_in_mean = np.hstack([u_hat, mu_m])
            zmp_mean = dense_forward(agg_in_mean, agg_w, agg_b)
            sigma2_m = np.exp(logvar_m)
            w_m = agg_w[dims.Nm:, :]
            zmp_var = sigma2_m @ (w_m * w_m)
            cache.update(gates=gates, experts=experts, agg_in=agg_in,
                         agg_in_mean=agg_in_mean, sigma2_m=sigma2_m,
                         zmp_mean=zmp_mean, zmp_var=zmp_var)
            sample.gates = gates
            sample.u_hat = u_hat
            sample.z_m_prime = z_m_prime
            sample.z_m_prime_mean = zmp_mean
            sample.z_m_prime_var = zmp_var

        dec_in = np.hstack([z_c, z_m_prime])
        gen = self.params.group(GROUP_GENERATOR)
        gen_train = train and not gen.frozen
        x_hat, cache["dec"] = self._decode_with_cache(
            dec_in, gen_train and not bn_eval, rng,
            update_running=gen_train and not bn_eval)

        logits = self.classify_logits(z_c)
        cache["cls_in"] = z_c
        return ForwardState(sample=sample, x_hat=x_hat, logits=logits,
                            mode=mode, cache=cache)

    # -- fused loss + gradients --------------------------------------------

    def loss_and_grads(self, x, labels=None, losses=("elbo",),
                       kl_weight: float = 1.0, mode: str = "train", rng=None,
                       fixed_eps=None, bn_eval: bool = False,
                       ablation: str | None = None):
        """Forward pass, loss, and one backward sweep.

        ``losses`` is a subset of {"elbo", "ce"}; requested terms are
        summed and their gradients accumulated into ``group.grads`` (the
        caller zeroes grads). Returns (total, parts) where parts carries
        the term breakdown.
        """
        ablation = self.ablation if ablation is None else ablation
        losses = tuple(losses)
        if not losses:
            raise ValueError("at least one loss term required")
        if "ce" in losses and labels is None:
            raise ValueError("ce loss needs labels")
        if ablation == "no_z" and "elbo" in losses:
            raise ValueError("ablation no_z has no latent variables, no elbo")

        state = self._forward(x, mode, rng, ablation=ablation,
                              fixed_eps=fixed_eps, bn_eval=bn_eval)
        c = state.cache
        dims = self.dims
        nc = dims.Nc
        b = x.shape[0]
        train = state.mode == "train"
        parts: dict[str, float] = {}
        total = 0.0

        d_logits = None
        if "ce" in losses:
            ce, d_logits = softmax_cross_entropy(state.logits, labels)
            parts["ce"] = ce
            total += ce

        if ablation == "no_z":
            if d_logits is not None:
                cls = self.params.group(GROUP_CLASSIFIER)
                self._backward_classifier(x, cls, d_logits)
            return total, parts

        d_mu = np.zeros_like(c["mu"])
        d_logvar = np.zeros_like(c["logvar"])

        if ablation == "no_zm":
            d_z_c = np.zeros((b, nc))
            if "elbo" in losses:
                mu_c, logvar_c = c["mu"][:, :nc], c["logvar"][:, :nc]
                recon = float(((x - state.x_hat) ** 2).sum() / b)
                kl = gaussian_kl(mu_c, logvar_c)
                parts.update(recon=recon, kl=kl, elbo=recon + kl_weight * kl)
                total += parts["elbo"]
                d_x_hat = 2.0 * (state.x_hat - x) / b
                d_dec_in = self._backward_decoder(c["dec"], d_x_hat)
                d_z_c += d_dec_in[:, :nc]  # the z_m' slot is constant zero
                dk_mu, dk_lv = gaussian_kl_backward(mu_c, logvar_c, kl_weight)
                d_mu[:, :nc] += dk_mu
                d_logvar[:, :nc] += dk_lv
            if d_logits is not None:
                cls = self.params.group(GROUP_CLASSIFIER)
                d_z_c += self._backward_classifier(c["cls_in"], cls, d_logits)
            if train:
                dz_mu, dz_lv = reparameterize_backward(c["logvar"][:, :nc],
                                                       c["eps"], d_z_c)
                d_mu[:, :nc] += dz_mu
                d_logvar[:, :nc] += dz_lv
            else:
                d_mu[:, :nc] += d_z_c
            d_h_dist = 0.0
        else:
            d_z = np.zeros((b, dims.latent))
            d_u_hat = np.zeros((b, dims.Nm))
            d_h_dist = 0.0
            if "elbo" in losses:
                mu_c, logvar_c = c["mu"][:, :nc], c["logvar"][:, :nc]
                recon = float(((x - state.x_hat) ** 2).sum() / b)
                kl = gaussian_kl(mu_c, logvar_c) + gaussian_kl_moments(
                    c["zmp_mean"], c["zmp_var"])
                parts.update(recon=recon, kl=kl, elbo=recon + kl_weight * kl)
                total += parts["elbo"]
                d_x_hat = 2.0 * (state.x_hat - x) / b
                d_dec_in = self._backward_decoder(c["dec"], d_x_hat)
                d_z[:, :nc] += d_dec_in[:, :nc]

                agg = self.params.group(GROUP_AGGREGATOR)
                agg_w = agg.weights["w"]
                # sample path into the generator
                d_agg_in, dw, db = dense_backward(c["agg_in"], agg_w,
                                                  d_dec_in[:, nc:])
                agg.grads["w"] += dw
                agg.grads["b"] += db
                d_u_hat += d_agg_in[:, :dims.Nm]
                d_z[:, nc:] += d_agg_in[:, dims.Nm:]

                # regularizer seeds
                dk_mu, dk_lv = gaussian_kl_backward(mu_c, logvar_c, kl_weight)
                d_mu[:, :nc] += dk_mu
                d_logvar[:, :nc] += dk_lv
                d_zmp_mean, d_zmp_var = gaussian_kl_moments_backward(
                    c["zmp_mean"], c["zmp_var"], kl_weight)
                # mean path: zmp_mean = [u_hat; mu_m] @ W + b
                d_agg_in_mean, dw, db = dense_backward(c["agg_in_mean"], agg_w,
                                                       d_zmp_mean)
                agg.grads["w"] += dw
                agg.grads["b"] += db
                d_u_hat += d_agg_in_mean[:, :dims.Nm]
                d_mu[:, nc:] += d_agg_in_mean[:, dims.Nm:]
                # variance path: zmp_var = sigma2_m @ (w_m * w_m)
                w_m = agg_w[dims.Nm:, :]
                d_sigma2 = d_zmp_var @ (w_m * w_m).T
                d_logvar[:, nc:] += d_sigma2 * c["sigma2_m"]
                agg.grads["w"][dims.Nm:, :] += (
                    2.0 * w_m * (c["sigma2_m"].T @ d_zmp_var))
                d_h_dist = self._backward_disturbance(c, d_u_hat)
            if d_logits is not None:
                cls = self.params.group(GROUP_CLASSIFIER)
                d_z[:, :nc] += self._backward_classifier(c["cls_in"], cls, d_logits)
            if train:
                dz_mu, dz_lv = reparameterize_backward(c["logvar"], c["eps"], d_z)
                d_mu += dz_mu
                d_logvar += dz_lv
            else:
                d_mu += d_z

        d_logvar *= (c["logvar_raw"] > nn.LOGVAR_MIN) & (c["logvar_raw"] < nn.LOGVAR_MAX)

        enc = self.params.group(GROUP_ENCODER)
        d_h_mu, dw, db = dense_backward(c["h"], enc.weights["mu_w"], d_mu)
        enc.grads["mu_w"] += dw
        enc.grads["mu_b"] += db
        d_h_lv, dw, db = dense_backward(c["h"], enc.weights["logvar_w"], d_logvar)
        enc.grads["logvar_w"] += dw
        enc.grads["logvar_b"] += db
        self._backward_encoder_trunk(c, d_h_mu + d_h_lv + d_h_dist)
        return total, parts

    def _backward_classifier(self, cls_in, cls: ParamGroup, d_logits):
        hidden = dense_forward(cls_in, cls.weights["hidden_w"],
                               cls.weights["hidden_b"])
        d_hidden, dw, db = dense_backward(hidden, cls.weights["out_w"], d_logits)
        cls.grads["out_w"] += dw
        cls.grads["out_b"] += db
        d_in, dw, db = dense_backward(cls_in, cls.weights["hidden_w"], d_hidden)
        cls.grads["hidden_w"] += dw
        cls.grads["hidden_b"] += db
        return d_in

    def _backward_decoder(self, dec_cache, d_x_hat):
        gen = self.params.group(GROUP_GENERATOR)
        d_g_drop, dw, db = dense_backward(dec_cache["g_drop"], gen.weights["out_w"],
                                          d_x_hat)
        gen.grads["out_w"] += dw
        gen.grads["out_b"] += db
        d_g_relu = dropout_backward(dec_cache["drop"], d_g_drop)
        d_g_bn = relu_backward(dec_cache["g_bn"], d_g_relu)
        d_g_pre, dgamma, dbeta = batchnorm_backward(dec_cache["bn"], d_g_bn)
        gen.grads["bn_gamma"] += dgamma
        gen.grads["bn_beta"] += dbeta
        d_dec_in, dw, db = dense_backward(dec_cache["dec_in"],
                                          gen.weights["hidden_w"], d_g_pre)
        gen.grads["hidden_w"] += dw
        gen.grads["hidden_b"] += db
        return d_dec_in

    def _backward_disturbance(self, c, d_u_hat):
        """Backward through the gated experts and the gate softmax;
        returns the hidden-activation gradient contribution."""
        gates, experts = c["gates"], c["experts"]
        d_experts = gates[:, :, None] * d_u_hat[:, None, :]
        d_gates = (experts * d_u_hat[:, None, :]).sum(axis=2)
        # softmax backward over the domain axis
        d_gate_logits = gates * (d_gates - (d_gates * gates).sum(axis=1, keepdims=True))

        dist = self.params.group(GROUP_DISTURBANCE)
        d_experts_flat = d_experts.reshape(d_experts.shape[0], -1)
        d_h_e, dw, db = dense_backward(c["h"], dist.weights["experts_w"],
                                       d_experts_flat)
        dist.grads["experts_w"] += dw
        dist.grads["experts_b"] += db
        d_h_g, dw, db = dense_backward(c["h"], dist.weights["gate_w"], d_gate_logits)
        dist.grads["gate_w"] += dw
        dist.grads["gate_b"] += db
        return d_h_e + d_h_g

    def _backward_encoder_trunk(self, c, d_h):
        enc = self.params.group(GROUP_ENCODER)
        d_h_relu = dropout_backward(c["enc_drop"], d_h)
        d_h_bn = relu_backward(c["h_bn"], d_h_relu)
        d_h_pre, dgamma, dbeta = batchnorm_backward(c["enc_bn"], d_h_bn)
        enc.grads["bn_gamma"] += dgamma
        enc.grads["bn_beta"] += dbeta
        _, dw, db = dense_backward(c["x"], enc.weights["hidden_w"], d_h_pre)
        enc.grads["hidden_w"] += dw
        enc.grads["hidden_b"] += db


# ---------------------------------------------------------------------------
# losses (forward-only contracts; training uses GtlModel.loss_and_grads)
# ---------------------------------------------------------------------------

def elbo_loss(x, sample: LatentSample, x_hat, kl_weight: float = 1.0):
    """Minimized negative ELBO under a unit-variance Gaussian likelihood.

    Reconstruction: squared error summed over features, averaged over
    the batch. Regularizer: KL of the posterior the generator consumes,
    q(z_c, z_m' | x), to the standard-normal prior — the concept block in
    (mu, logvar) form plus the aggregated disturbance in moment form.
    Under the no_zm ablation only the concept block exists.
    Returns (loss, {"recon": ..., "kl": ...})."""
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise DimensionError(f"x shape {x.shape} != x_hat shape {x_hat.shape}")
    recon = float(((x - x_hat) ** 2).sum() / x.shape[0])
    nc = sample.z_c.shape[1]
    kl = gaussian_kl(sample.mu[:, :nc], sample.logvar[:, :nc])
    if sample.z_m_prime_mean is not None:
        kl += gaussian_kl_moments(sample.z_m_prime_mean, sample.z_m_prime_var)
    return recon + kl_weight * kl, {"recon": recon, "kl": kl}


def ce_loss(logits, labels) -> float:
    """Cross-entropy computed from logits (log-sum-exp form)."""
    loss, _ = softmax_cross_entropy(logits, labels)
    return loss


# ---------------------------------------------------------------------------
# checkpoint codec
# ---------------------------------------------------------------------------
#
# Little-endian binary layout (version 1):
#
#   magic           4 bytes  "GTLP"
#   version         u32      1
#   dims            6 x u32  Dx, Nc, Nm, H, d, C
#   ablation        u16 length + utf-8 bytes
#   class_labels    u32 count + i64 x count
#   base_labels     u32 count + i64 x count
#   group_count     u32
#   per group:
#     name          u16 length + utf-8 bytes
#     frozen        u8
#     tensor_count  u32
#     per tensor:
#       name        u16 length + utf-8 bytes
#       kind        u8   (0 = weight, 1 = buffer)
#       rank        u8
#       dims        u32 x rank
#       values      f64 x prod(dims)

CHECKPOINT_MAGIC = b"GTLP"
CHECKPOINT_VERSION = 1


class CheckpointFormatError(ValueError):
    """Raised on malformed checkpoint bytes."""


def _write_str(out: io.BufferedIOBase, s: str) -> None:
    raw = s.encode("utf-8")
    out.write(struct.pack("<H", len(raw)))
    out.write(raw)


def _write_tensor(out, name: str, kind: int, arr: np.ndarray) -> None:
    _write_str(out, name)
    out.write(struct.pack("<BB", kind, arr.ndim))
    out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    out.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def save_checkpoint(params: GtlParams, path) -> None:
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        d = params.dims
        f.write(struct.pack("<6I", d.Dx, d.Nc, d.Nm, d.H, d.d, d.C))
        _write_str(f, params.ablation)
        for labels in (params.class_labels, params.base_labels):
            f.write(struct.pack("<I", len(labels)))
            f.write(struct.pack(f"<{len(labels)}q", *labels))
        f.write(struct.pack("<I", len(GROUP_ORDER)))
        for gname in GROUP_ORDER:
            group = params.groups[gname]
            _write_str(f, gname)
            f.write(struct.pack("<B", int(group.frozen)))
            tensors = [(n, 0, a) for n, a in group.weights.items()]
            tensors += [(n, 1, a) for n, a in group.buffers.items()]
            f.write(struct.pack("<I", len(tensors)))
            for name, kind, arr in tensors:
                _write_tensor(f, name, kind, arr)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointFormatError(
                f"truncated checkpoint: needed {n} bytes at offset {self.pos}, "
                f"file has {len(self.data)}"
            )
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def read_str(self) -> str:
        (n,) = self.unpack("<H")
        return self.take(n).decode("utf-8")


def load_checkpoint(path) -> GtlParams:
    with open(path, "rb") as f:
        r = _Reader(f.read())
    if r.take(4) != CHECKPOINT_MAGIC:
        raise CheckpointFormatError("bad magic: not a GTLP checkpoint")
    (version,) = r.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    dx, nc, nm, h, d, c = r.unpack("<6I")
    dims = ModelDims(Dx=dx, Nc=nc, Nm=nm, H=h, d=d, C=c)
    ablation = r.read_str()
    if ablation not in ABLATIONS:
        raise CheckpointFormatError(f"unknown ablation tag {ablation!r}")
    label_lists = []
    for _ in range(2):
        (n,) = r.unpack("<I")
        label_lists.append(list(r.unpack(f"<{n}q")))
    (group_count,) = r.unpack("<I")
    groups = {}
    for _ in range(group_count):
        gname = r.read_str()
        (frozen,) = r.unpack("<B")
        (tcount,) = r.unpack("<I")
        group = ParamGroup(gname, frozen=bool(frozen))
        for _ in range(tcount):
            tname = r.read_str()
            kind, rank = r.unpack("<BB")
            shape = r.unpack(f"<{rank}I")
            count = int(np.prod(shape)) if rank else 1
            arr = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape).copy()
            if kind == 0:
                group.add(tname, arr)
            else:
                group.buffers[tname] = arr
        groups[gname] = group
    if r.pos != len(r.data):
        raise CheckpointFormatError(
            f"{len(r.data) - r.pos} trailing bytes at offset {r.pos}"
        )
    missing = [g for g in GROUP_ORDER if g not in groups]
    if missing:
        raise CheckpointFormatError(f"checkpoint missing groups: {missing}")
    return GtlParams(dims=dims, ablation=ablation, groups=groups,
                     class_labels=label_lists[0], base_labels=label_lists[1])
