"""Shared builders for the test suite: tiny networks, loss closures, finite differences."""
from __future__ import annotations

import numpy as np

from thsg import autodiff as ad
from thsg.autodiff import Tensor
from thsg.losses import (
    LossWeights,
    Stage1Batch,
    Stage2Batch,
    embedding_objective,
    loss_dg1,
    loss_dg2,
    loss_g1,
    loss_g2,
)
from thsg.networks import init_bundle
from thsg.plm import stretch_pair
from thsg.trainer import TrainConfig

TINY = dict(embedding_dim=5, f_hidden=10, gen_hidden=8, disc_hidden=8)
INPUT_DIM = 6
NUM_CLASSES = 4


def tiny_config(**overrides):
    return TrainConfig(**{**TINY, **overrides})


def tiny_bundle(seed=0, num_classes=NUM_CLASSES):
    return init_bundle(tiny_config(), seed, INPUT_DIM, num_classes)


def unit_rows(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


class LossCase:
    """Fixed inputs plus a closure rebuilding one loss from the current parameters."""

    def __init__(self, name, seed=0, rows=3, l_g_running=0.7):
        self.name = name
        rng = np.random.default_rng(seed)
        self.nets = tiny_bundle(seed)
        d = self.nets.embedding_dim
        self.w = LossWeights(l_g_running=l_g_running)
        self.features = rng.normal(size=(3 * rows, INPUT_DIM))
        self.a, self.p, self.n = (unit_rows(rng, rows, d) for _ in range(3))
        self.lam = rng.uniform(0.05, 0.8, size=rows)
        self.pos = rng.integers(0, NUM_CLASSES, size=rows)
        self.neg = (self.pos + 1 + rng.integers(0, NUM_CLASSES - 1, size=rows)) % NUM_CLASSES
        self.rows = rows

    def stage1(self):
        a_star, p_star = stretch_pair(self.a, self.p, self.lam)
        return Stage1Batch(
            Tensor(self.a), Tensor(self.p), Tensor(a_star), Tensor(p_star),
            self.nets.G1(a_star), self.nets.G1(p_star), self.pos,
        )

    def stage2(self):
        G2 = self.nets.G2
        a_p, p_p = self.a, self.p
        return Stage2Batch(
            Tensor(a_p), Tensor(p_p), Tensor(self.n), G2(a_p), G2(p_p), G2(self.n), self.pos, self.neg
        )

    def embedding_loss(self):
        nets, r = self.nets, self.rows
        X = nets.F(Tensor(self.features))
        a, p, n = (ad.rows(X, np.arange(k * r, (k + 1) * r)) for k in range(3))
        xa, xp = stretch_pair(a, p, self.lam)
        a_p, p_p = nets.G1(xa), nets.G1(xp)
        hat = (nets.G2(a_p), nets.G2(p_p), nets.G2(n))
        return embedding_objective((a, p, n), (a_p, p_p), hat, (self.pos, self.neg), nets, self.w)

    def loss(self):
        if self.name == "L_G1":
            return loss_g1(self.stage1(), self.nets, self.w)
        if self.name == "L_DG1":
            return loss_dg1(self.stage1(), self.nets)
        if self.name == "L_G2":
            return loss_g2(self.stage2(), self.nets, self.w)
        if self.name == "L_DG2":
            return loss_dg2(self.stage2(), self.nets, NUM_CLASSES)
        if self.name == "L_F":
            return self.embedding_loss()
        raise KeyError(self.name)

    # parameters each loss is differentiated with respect to during training;
    # discriminator losses see generated samples as constants
    TRAINED = {
        "L_G1": ("G1",), "L_DG1": ("D_G1",), "L_G2": ("G2",), "L_DG2": ("D_G2",), "L_F": ("F", "C_F"),
    }

    def parameters(self):
        return [p for name in self.TRAINED[self.name] for p in getattr(self.nets, name).parameters()]


def relative_error(a, b, floor=1e-6):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def finite_difference(fn, params, h=1e-5):
    """Central differences of scalar ``fn()`` w.r.t. every entry of ``params``."""
    grads = []
    for p in params:
        g = np.zeros_like(p.data)
        it = np.nditer(p.data, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = p.data[idx]
            p.data[idx] = orig + h
            up = fn()
            p.data[idx] = orig - h
            down = fn()
            p.data[idx] = orig
            g[idx] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def gradient_check(case, h=1e-5):
    """Max relative error between autodiff and central differences for ``case``."""
    params = case.parameters()
    for net in case.nets.networks().values():
        for p in net.parameters():
            p.grad = None
    ad.backward(case.loss())
    analytic = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    numeric = finite_difference(lambda: case.loss().item(), params, h)
    return max(float(relative_error(a, n).max()) for a, n in zip(analytic, numeric))


# criterion number -> (title, passed, detail); printed by the conftest summary hook
ACCEPTANCE_RESULTS = {}
