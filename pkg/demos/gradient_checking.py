"""Finite-difference verification of the hand-written gradients.

Every backward pass in this package is derived by hand, so the project
leans on a central-difference harness as its safety net. This script
checks the complete model (reconstruction + KL + cross-entropy) and then
deliberately corrupts one gradient to show the harness catching it.

Run from the repository root:  python3 demos/gradient_checking.py
"""

from gtl.model import GtlModel, ModelDims, ce_loss, elbo_loss, init_params
from gtl.nn import gradient_check
from gtl.rng import make_rng

dims = ModelDims(Dx=32, Nc=8, Nm=4, H=16, d=4, C=5)
rng = make_rng(0)
params = init_params(dims, rng)
model = GtlModel(params, dropout_rate=0.0)  # dropout off: the loss must be
                                            # deterministic across closure calls
x = rng.normal(size=(8, dims.Dx))
labels = rng.integers(0, dims.C, size=8)
eps = rng.standard_normal((8, dims.latent))  # pinned sampling noise


def closure(compute_grads):
    if compute_grads:
        params.zero_grads()
        total, _ = model.loss_and_grads(x, labels=labels, losses=("elbo", "ce"),
                                        mode="train", fixed_eps=eps)
        return total
    state = model._forward(x, "train", fixed_eps=eps)
    loss, _ = elbo_loss(x, state.sample, state.x_hat)
    return loss + ce_loss(state.logits, labels)


report = gradient_check(closure, params.groups.values(), tol=1e-4,
                        max_entries_per_tensor=8, rng=make_rng(1))
print(report.summary())

# freeze the generator: its entries drop out of the check set
params.group("generator").frozen = True
frozen_report = gradient_check(closure, params.groups.values(), tol=1e-4,
                               max_entries_per_tensor=8, rng=make_rng(1))
print(f"with generator frozen: {frozen_report.entries_checked} entries "
      f"(was {report.entries_checked})")
params.group("generator").frozen = False


def corrupted(compute_grads):
    loss = closure(compute_grads)
    if compute_grads:
        params.group("aggregator").grads["w"] *= 1.5  # wrong on purpose
    return loss


bad = gradient_check(corrupted, params.groups.values(), tol=1e-4,
                     max_entries_per_tensor=8, rng=make_rng(1))
print(f"corrupted backward detected: {not bad.passed} "
      f"(worst at {bad.worst.group}/{bad.worst.tensor})")
