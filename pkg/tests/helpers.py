"""Shared fixtures for gradient checks on the full codec."""

import numpy as np

from liclab import codec as C
from liclab import tensor as T
from liclab.adapters import Structure, init_adapter_set

TOY_SHAPE = (2, 3, 16, 16)  # smallest input the four stride-2 stages accept
HYPER_RELU_BIASES = ("h_a.stack1.conv.bias", "h_s.stack1.tconv.bias", "h_s.stack2.tconv.bias", "g_ep.conv1.bias")


def smooth_toy_model(seed: int = 1) -> C.CodecModel:
    """A float64 codec whose loss is smooth within +-1e-3 of every parameter.

    Central differences with h=1e-3 are only meaningful away from kinks, so:
    GDN gammas sit off the non-negativity floor, biases are nonzero, the
    ReLUs in the hyperprior path are strictly active, and g_ep is scaled so
    sigma stays inside its clamp and no bin probability hits the floor.
    """
    model = C.CodecModel.initialize(seed, dtype=np.float64)
    rng = T.make_rng(seed, 0x70F)
    for p in model.param_list():
        if p.name.endswith("gamma"):
            c = p.shape[0]
            p.data = T.nonneg_init(0.1 * np.eye(c) + 0.01 * rng.random((c, c)), np.float64)
        if p.name.endswith("bias"):
            p.data = rng.normal(0, 0.1, p.shape)
        if p.name in HYPER_RELU_BIASES:
            p.data = p.data + 0.5
    model["g_ep.conv2.weight"].data *= 0.2
    return model


def perturbed_adapters(model: C.CodecModel, structure: Structure, seed: int = 2):
    """Adapters moved slightly away from identity (gammas off their floor)."""
    aset = init_adapter_set(model, structure, seed=seed)
    rng = T.make_rng(seed, 0xADA)
    for p in aset.params():
        if p.name.endswith("gamma"):
            p.data = T.nonneg_init(0.01 + 0.01 * rng.random(p.shape), np.float64)
        else:
            p.data = (p.data + rng.normal(0, 0.02, p.shape)).astype(np.float64)
    return aset


def toy_images(seed: int = 8) -> np.ndarray:
    return T.make_rng(seed).random(TOY_SHAPE)


def full_loss_fn(model, adapters, x, lmbda=0.01, noise_seed=3):
    """Deterministic stage-1 RD loss (noise drawn from a fresh seeded stream each call)."""

    def loss():
        x_hat, bundle = C.forward(model, adapters, x, C.QuantMode.NOISE, T.make_rng(noise_seed))
        return C.rd_loss(x, x_hat, bundle, lmbda).loss

    return loss


ACCEPTANCE_LINES: list[str] = []
