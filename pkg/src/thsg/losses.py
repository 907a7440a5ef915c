"""Losses for the embedding network, both generators and both discriminators.

Conventions used throughout:

* per-role terms (anchor, positive, negative, ...) are summed;
* each role's term is averaged over the rows of the batch;
* D_G1 label 1 means "real pair", 0 means "generated pair";
* D_G2 logit 0 is the generated class, ground-truth class c is logit c + 1.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError
from .networks import FAKE_CLASS, discriminate_pair

LG_FLOOR = 1e-8
REAL, FAKE = 1, 0


@dataclass
class LossWeights:
    beta: float = 0.5
    phi: float = 0.5
    eta: float = 0.3
    mu: float = 0.3
    nu: float = 0.2
    tau: float = 0.2
    l_g_running: float = 5.0

    def __post_init__(self):
        if not 1.0 - 2.0 * self.eta > 0:
            raise ContractError(f"1 - 2*eta must be positive (eta={self.eta})")
        if not 1.0 - 2.0 * self.eta - self.mu > 0:
            raise ContractError(f"1 - 2*eta - mu must be positive (eta={self.eta}, mu={self.mu})")

    @property
    def w_o(self):
        return adaptive_weights(self.l_g_running, self.beta, self.phi)[0]

    @property
    def w_l(self):
        return self.phi

    @property
    def w_h(self):
        return adaptive_weights(self.l_g_running, self.beta, self.phi)[2]

    @property
    def tau_r(self):
        return tau_r(self.l_g_running, self.nu, self.beta)


def adaptive_weights(l_g_running, beta, phi):
    """(w_o, w_l, w_h): original-triplet weight fades as the generator loss drops."""
    w_o = math.exp(-beta / max(float(l_g_running), LG_FLOOR))
    return w_o, phi, 1.0 - w_o


def tau_r(l_g2, nu, beta):
    """Reverse-triplet margin; grows towards ``nu`` as the G2 loss shrinks."""
    return nu * (1.0 - math.exp(-beta / max(float(l_g2), LG_FLOOR)))


def _is_raw(*xs):
    return not any(isinstance(x, Tensor) for x in xs)


def triplet_loss(a, p, n, tau):
    """Hinge ``[|a-p|^2 - |a-n|^2 + tau]_+``, averaged over rows.

    Plain vectors give a float; Tensors give a differentiable 1x1 Tensor.
    """
    raw = _is_raw(a, p, n)
    a, p, n = ad.as_tensor(a), ad.as_tensor(p), ad.as_tensor(n)
    if not (a.shape == p.shape == n.shape):
        raise ContractError(f"triplet shapes differ: {a.shape}, {p.shape}, {n.shape}")
    gap = ad.row_sqnorm(a - p) - ad.row_sqnorm(a - n) + tau
    out = ad.mean(ad.relu(gap))
    return out.item() if raw else out


def reverse_triplet(a_hat, p_hat, n_hat, margin):
    """Hinge ``[|a-n|^2 - |a-p|^2 + margin]_+``: pulls the negative in."""
    raw = _is_raw(a_hat, p_hat, n_hat)
    a_hat, p_hat, n_hat = ad.as_tensor(a_hat), ad.as_tensor(p_hat), ad.as_tensor(n_hat)
    gap = ad.row_sqnorm(a_hat - n_hat) - ad.row_sqnorm(a_hat - p_hat) + margin
    out = ad.mean(ad.relu(gap))
    return out.item() if raw else out


def art_loss(a_prime, p_prime, n, nets, tau_r_value):
    """Adaptive reverse triplet loss of G2's outputs for (a', p', n)."""
    raw = _is_raw(a_prime, p_prime, n)
    G2 = nets.G2
    out = reverse_triplet(G2(a_prime), G2(p_prime), G2(n), tau_r_value)
    return out.item() if raw else out


def softmax_ce(logits, labels):
    return ad.softmax_ce(logits, labels)


@dataclass
class Stage1Batch:
    """Aligned rows: originals (a, p), stretched (a*, p*), generated (a', p')."""

    a: Tensor
    p: Tensor
    a_star: Tensor
    p_star: Tensor
    a_prime: Tensor
    p_prime: Tensor
    labels: np.ndarray

    def __post_init__(self):
        shapes = {t.shape for t in (self.a, self.p, self.a_star, self.p_star, self.a_prime, self.p_prime)}
        if len(shapes) != 1:
            raise ContractError(f"Stage1Batch tensors are misaligned: {sorted(shapes)}")
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.shape[0] != self.a.shape[0]:
            raise ContractError("Stage1Batch needs one label per row")


@dataclass
class Stage2Batch:
    """Aligned rows: inputs (a', p', n) and G2 outputs (a^, p^, n^)."""

    a_prime: Tensor
    p_prime: Tensor
    n: Tensor
    a_hat: Tensor
    p_hat: Tensor
    n_hat: Tensor
    pos_labels: np.ndarray
    neg_labels: np.ndarray

    def __post_init__(self):
        shapes = {t.shape for t in (self.a_prime, self.p_prime, self.n, self.a_hat, self.p_hat, self.n_hat)}
        if len(shapes) != 1:
            raise ContractError(f"Stage2Batch tensors are misaligned: {sorted(shapes)}")
        self.pos_labels = np.asarray(self.pos_labels, dtype=np.int64)
        self.neg_labels = np.asarray(self.neg_labels, dtype=np.int64)
        rows = self.a_prime.shape[0]
        if self.pos_labels.shape[0] != rows or self.neg_labels.shape[0] != rows:
            raise ContractError("Stage2Batch needs one positive and one negative label per row")


def _class_loss(C_F, tensors, labels):
    """Sum over roles of the batch-mean classifier cross-entropy."""
    total = None
    for t, lab in zip(tensors, labels):
        term = ad.softmax_ce(C_F(t), lab)
        total = term if total is None else total + term
    return total


def loss_g1_parts(batch, nets):
    C_F, D = nets.C_F, nets.D_G1
    lab = batch.labels
    ones = np.full(lab.shape[0], REAL)
    cls = _class_loss(C_F, (batch.a_prime, batch.p_prime), (lab, lab))
    adv = ad.softmax_ce(discriminate_pair(D, batch.a_prime, batch.a_star), ones) + ad.softmax_ce(
        discriminate_pair(D, batch.p_prime, batch.p_star), ones
    )
    rec = ad.mean(ad.row_sqnorm(batch.a_star - batch.a_prime)) + ad.mean(
        ad.row_sqnorm(batch.p_star - batch.p_prime)
    )
    return {"class": cls, "adv": adv, "rec": rec}


def loss_g1(batch, nets, w):
    parts = loss_g1_parts(batch, nets)
    return w.eta * (parts["class"] + parts["adv"]) + (1.0 - 2.0 * w.eta) * parts["rec"]


def loss_dg1(batch, nets):
    """Conditional discriminator loss; generated pairs enter as constants."""
    D = nets.D_G1
    n = batch.labels.shape[0]
    real, fake = np.full(n, REAL), np.full(n, FAKE)
    a_star, p_star = batch.a_star.detach(), batch.p_star.detach()
    real_term = ad.softmax_ce(discriminate_pair(D, batch.a.detach(), a_star), real) + ad.softmax_ce(
        discriminate_pair(D, batch.p.detach(), p_star), real
    )
    fake_term = ad.softmax_ce(discriminate_pair(D, batch.a_prime.detach(), a_star), fake) + ad.softmax_ce(
        discriminate_pair(D, batch.p_prime.detach(), p_star), fake
    )
    return 0.5 * (real_term + fake_term)


def loss_g2_parts(batch, nets, w):
    C_F, D = nets.C_F, nets.D_G2
    hats = (batch.a_hat, batch.p_hat, batch.n_hat)
    labels = (batch.pos_labels, batch.pos_labels, batch.neg_labels)
    art = reverse_triplet(batch.a_hat, batch.p_hat, batch.n_hat, w.tau_r)
    rec = ad.mean(ad.row_sqnorm(batch.a_prime - batch.a_hat)) + ad.mean(
        ad.row_sqnorm(batch.p_prime - batch.p_hat)
    )
    cls = _class_loss(C_F, hats, labels)
    adv = _class_loss(D, hats, [lab + 1 for lab in labels])
    return {"art": art, "rec": rec, "class": cls, "adv": adv}


def loss_g2(batch, nets, w):
    parts = loss_g2_parts(batch, nets, w)
    return (
        w.mu * parts["art"]
        + (1.0 - 2.0 * w.eta - w.mu) * parts["rec"]
        + w.eta * (parts["class"] + parts["adv"])
    )


def loss_dg2(batch, nets, C):
    D = nets.D_G2
    if D.out_dim != C + 1:
        raise ContractError(f"D_G2 must have {C + 1} outputs, has {D.out_dim}")
    rows = batch.pos_labels.shape[0]
    fake = np.full(rows, FAKE_CLASS)
    real_in = (batch.a_prime.detach(), batch.p_prime.detach(), batch.n.detach())
    real_lab = (batch.pos_labels + 1, batch.pos_labels + 1, batch.neg_labels + 1)
    fake_in = tuple(t.detach() for t in (batch.a_hat, batch.p_hat, batch.n_hat))
    total = _class_loss(D, real_in, real_lab) + _class_loss(D, fake_in, (fake, fake, fake))
    return total * (1.0 / (C + 1))


def embedding_objective(X, X_prime, X_hat, labels, nets, w, mined_loss=None, classify_hat=True):
    """Adaptively weighted objective for F (and the shared classifier).

    ``X`` and ``X_hat`` are (anchor, positive, negative) tensors, ``X_prime``
    is (a', p') or None, ``labels`` is (anchor/positive labels, negative
    labels).  ``X_hat=None`` drops the generated-triplet term.  With
    ``mined_loss`` the original-triplet term is replaced by it.
    ``classify_hat=False`` keeps X_hat out of the category loss (used when
    X_hat reuses tensors already classified elsewhere).
    """
    pos_lab, neg_lab = (np.asarray(l, dtype=np.int64) for l in labels)
    a, p, n = X
    rows = a.shape[0]
    if pos_lab.shape[0] != rows or neg_lab.shape[0] != rows:
        raise ContractError("embedding_objective needs one label pair per triplet")
    for group in (X_prime, X_hat):
        if group is not None and any(t.shape != a.shape for t in group):
            raise ContractError("X, X' and X^ must be aligned by triplet")

    w_o, w_l, w_h = adaptive_weights(w.l_g_running, w.beta, w.phi)
    if X_hat is None:
        w_o, w_h = 1.0, 0.0
    org = mined_loss if mined_loss is not None else triplet_loss(a, p, n, w.tau)
    total = w_o * org
    if w_l:
        tensors = [a, p, n]
        labs = [pos_lab, pos_lab, neg_lab]
        if X_prime is not None:
            tensors += list(X_prime)
            labs += [pos_lab, pos_lab]
        if X_hat is not None and classify_hat:
            tensors += list(X_hat)
            labs += [pos_lab, pos_lab, neg_lab]
        total = total + w_l * _class_loss(nets.C_F, tensors, labs)
    if X_hat is not None and w_h:
        total = total + w_h * triplet_loss(*X_hat, w.tau)
    return total
