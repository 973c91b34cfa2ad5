"""Finite-difference checks of every loss path through the network, plus
routing-isolation and stop-gradient contracts."""
import numpy as np
import pytest

from moesimvae import autodiff as ad
from moesimvae import losses
from moesimvae.config import ModelConfig
from moesimvae.model import MoESimVAE, gate

RTOL, ATOL = 1e-3, 1e-5


def small_model(**kw):
    cfg = ModelConfig(input_dim=6, latent_dim=3, num_experts=3, encoder_hidden=(5,), expert_hidden=(4,),
                      clustering_hidden=(4,), **kw)
    with ad.precision(np.float64):
        return MoESimVAE(cfg, seed=3, dtype=np.float64)


def batch(n=8, seed=0):
    rng = np.random.default_rng(seed)
    return rng.uniform(0.05, 0.95, size=(n, 6))


def similarity_for(x):
    d = ((x[:, None] - x[None]) ** 2).sum(-1)
    S = (d < np.median(d)).astype(np.uint8)
    S = S | S.T
    np.fill_diagonal(S, 1)
    return S


def loss_paths(model, x):
    """Scalar closures per loss path. DEPICT targets are frozen at the
    unperturbed clean probabilities, since no gradient flows through them."""
    S = similarity_for(x)
    Q = losses.depict_targets(model.forward(x).P.data)

    def forward():
        return model.forward(x, training=True, rng=np.random.default_rng(11))

    def reconst():
        out = forward()
        return losses.reconstruction_bce(x, out.x_reconst)

    def kl():
        out = forward()
        return losses.kl_mixture(out.z, out.P, out.assignments)

    def similarity():
        out = forward()
        return losses.similarity_bce(S, out.P)

    def depict():
        out = forward()
        return losses.depict_loss(Q, out.P_noisy)

    def total():
        out = forward()
        t, _ = losses.total_loss(losses.reconstruction_bce(x, out.x_reconst),
                                 losses.kl_mixture(out.z, out.P, out.assignments),
                                 losses.similarity_bce(S, out.P),
                                 losses.depict_loss(Q, out.P_noisy), 0.7, 1.3)
        return t

    return {"reconst": reconst, "kl": kl, "similarity": similarity, "depict": depict, "total": total}


def analytic_grads(model, fn):
    with ad.precision(np.float64):
        for p in model.params.values():
            p.grad = None
        tape = ad.Tape()
        with tape:
            loss = fn()
        tape.backward(loss)
    return {n: (None if p.grad is None else p.grad.copy()) for n, p in model.params.items()}


def fd_check(model, fn, prefixes):
    grads = analytic_grads(model, fn)
    checked = failed = 0
    for name, p in model.params.items():
        if not name.startswith(prefixes):
            continue
        with ad.precision(np.float64):
            num = ad.numerical_grad(lambda: float(fn().data), p.data, h=1e-6)
        ana = grads[name] if grads[name] is not None else np.zeros_like(num)
        ok = np.isclose(ana, num, rtol=RTOL, atol=ATOL)
        checked += ok.size
        failed += int((~ok).sum())
    return checked, failed


@pytest.mark.parametrize("path,prefixes", [
    ("reconst", ("encoder", "expert")),
    ("kl", ("encoder",)),
    ("similarity", ("encoder", "cluster")),
    ("depict", ("encoder", "cluster")),
    ("total", ("encoder", "cluster", "expert")),
])
def test_finite_difference(path, prefixes):
    model = small_model()
    x = batch()
    checked, failed = fd_check(model, loss_paths(model, x)[path], prefixes)
    assert checked > 0
    assert failed == 0, f"{failed}/{checked} gradient entries disagree"


def test_finite_difference_soft_routing_reaches_clustering_network():
    model = small_model(soft_routing=True)
    x = batch()
    fn = loss_paths(model, x)["reconst"]
    checked, failed = fd_check(model, fn, ("encoder", "cluster", "expert"))
    assert failed == 0
    grads = analytic_grads(model, fn)
    assert any(np.abs(grads[n]).max() > 0 for n in grads if n.startswith("cluster"))


def test_hard_gating_blocks_reconstruction_gradient_to_clustering_network():
    model = small_model()
    grads = analytic_grads(model, loss_paths(model, batch())["reconst"])
    for name, g in grads.items():
        if name.startswith("cluster"):
            assert g is None or not np.any(g), name


def test_kl_does_not_touch_clustering_network_or_experts():
    model = small_model()
    grads = analytic_grads(model, loss_paths(model, batch())["kl"])
    for name, g in grads.items():
        if name.startswith(("cluster", "expert")):
            assert g is None or not np.any(g), name


def test_clustering_losses_do_not_touch_experts():
    model = small_model()
    paths = loss_paths(model, batch())
    for path in ("similarity", "depict"):
        grads = analytic_grads(model, paths[path])
        for name, g in grads.items():
            if name.startswith("expert"):
                assert g is None or not np.any(g), (path, name)


def test_unrouted_expert_receives_no_gradient():
    model = small_model()
    x = batch(12)
    z = model.encode(x)
    # force every sample to expert 0 and 2, none to 1
    assign = np.where(np.arange(12) % 2 == 0, 0, 2)

    def fn():
        return losses.reconstruction_bce(x, model.decode(model.encode(x), assign))
    grads = analytic_grads(model, fn)
    for name in model.expert_params(1):
        assert grads[name] is None
    for name in model.expert_params(0):
        assert np.any(grads[name])
    assert z.shape == (12, 3)


def test_expert_gradient_depends_only_on_its_own_samples():
    model = small_model()
    x = batch(10)
    assign = np.array([0, 1, 0, 2, 1, 0, 2, 2, 1, 0])
    n = len(x)

    def full():
        return losses.reconstruction_bce(x, model.decode(model.encode(x), assign))
    g_full = analytic_grads(model, full)
    for k in range(3):
        idx = np.flatnonzero(assign == k)

        def sub():
            xs = x[idx]
            return losses.reconstruction_bce(xs, model.decode(model.encode(xs), np.full(len(idx), k)))
        g_sub = analytic_grads(model, sub)
        for name in model.expert_params(k):
            np.testing.assert_allclose(g_full[name], g_sub[name] * len(idx) / n, rtol=1e-10, atol=1e-14)


def test_depict_targets_are_constants():
    model = small_model()
    x = batch()
    out = model.forward(x)

    def with_q_tensor():
        o = model.forward(x, training=True, rng=np.random.default_rng(11))
        return losses.depict_loss(losses.depict_targets(o.P), o.P_noisy)

    def with_frozen_q():
        o = model.forward(x, training=True, rng=np.random.default_rng(11))
        return losses.depict_loss(q_fixed, o.P_noisy)
    q_fixed = losses.depict_targets(out.P.data)
    a = analytic_grads(model, with_q_tensor)
    b = analytic_grads(model, with_frozen_q)
    for name in a:
        if a[name] is None:
            assert b[name] is None
        else:
            np.testing.assert_array_equal(a[name], b[name])


def test_gate_ties_go_to_lowest_index():
    np.testing.assert_array_equal(gate(np.array([[0.5, 0.5], [0.2, 0.8], [1 / 3, 1 / 3]])), [0, 1, 0])
