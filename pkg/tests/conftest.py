import pytest

from malora import autodiff as ad, moe
from malora.linalg import Rng


@pytest.fixture
def rng():
    return Rng(42)


def tiny_geometry(n_experts=3, base_rank=2, lam=0.5, beta=1.3, top_k=2, **kw):
    d, r_bar = moe.derive_geometry(base_rank, n_experts, lam)
    return moe.MaloraGeometry(
        n_experts, base_rank, lam, d, r_bar, beta=beta, top_k=top_k, **kw
    )


def make_malora_layer(seed=3, flags=moe.AblationFlags(), n=7, m=5, n_experts=3,
                      base_rank=2, lam=0.5, beta=1.3, top_k=2, d=None, r_bar=None,
                      live=True, name="L"):
    """Small layer for gradient and oracle tests; ``live`` moves the
    zero-initialized side off zero so every gradient path carries signal."""
    rng = Rng(seed)
    base_w = rng.normal((m, n), scale=0.3)
    if d is not None:
        geom = moe.MaloraGeometry.explicit(n_experts, base_rank, d, r_bar,
                                           beta=beta, top_k=top_k)
    else:
        geom = moe.MaloraGeometry.from_lambda(n_experts, base_rank, lam,
                                              beta=beta, top_k=top_k)
    layer = moe.init_malora(base_w, geom, rng.child(1), flags=flags, name=name)
    if live:
        pr = rng.child(2)
        zero_side = layer.downs if flags.decompose_b_side else layer.ups
        for arr in zero_side:
            arr[:] = pr.uniform(-0.3, 0.3, arr.shape)
    return layer


def make_molora_layer(seed=3, n=7, m=5, n_experts=3, rank=2, top_k=2,
                      asy=False, live=True, identical=False, name="L"):
    rng = Rng(seed)
    base_w = rng.normal((m, n), scale=0.3)
    layer = moe.init_molora(base_w, n_experts, rank, top_k, rng.child(1),
                            asy=asy, identical_expert_init=identical, name=name)
    if live:
        pr = rng.child(2)
        for arr in layer.ups:
            arr[:] = pr.uniform(-0.3, 0.3, arr.shape)
    return layer


def layer_loss_builder(layer, forward_fn, x, targets, balance=0.01):
    def build(tape, params):
        y, stats = forward_fn(layer, tape.const(x), tape)
        loss = ad.mse_loss(y, targets)
        if balance:
            loss = ad.add(loss, moe.balance_loss(stats, balance))
        return loss
    return build
