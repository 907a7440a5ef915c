"""Training loop: pre-train F, then per batch update G1/D_G1, G2/D_G2 and F.

Three modes share the loop:

``thsg``      both generation stages feed the embedding objective;
``no_g2``     only stage 1 runs, the hard triplet is (a', p', n);
``baseline``  plain triplet loss on mined triplets, no generators.
"""
from __future__ import annotations

import contextlib
import csv
import dataclasses
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Tensor
from .dataset import BalancedBatchSampler, FeatureDataset
from .errors import ConfigError, ContractError, TrainingDiverged
from .evaluation import evaluate
from .losses import (
    LossWeights,
    Stage1Batch,
    Stage2Batch,
    embedding_objective,
    loss_dg1,
    loss_dg2,
    loss_g1,
    loss_g2,
    triplet_loss,
)
from .mining import MinerKind, mine
from .networks import EmbeddingBatch, ModelBundle, embed, init_bundle, save_checkpoint
from .plm import PlmState, compute_lambda, stretch_pair, update_threshold

log = logging.getLogger(__name__)

MODES = ("thsg", "no_g2", "baseline")
LOG_FIELDS = ("L_F", "L_G1", "L_DG1", "L_G2", "L_DG2", "w_o", "w_h", "tau_r", "d_t")


@dataclass
class TrainConfig:
    alpha: float = 0.2
    gamma: float = 0.8
    eta: float = 0.3
    beta: float = 0.5
    mu: float = 0.3
    phi: float = 0.5
    nu: float = 0.2
    tau: float = 0.2
    lr_f: float = 1e-3
    lr_classifier: float = 1e-3
    lr_disc: float = 1e-4
    lr_gen: float = 1e-3
    weight_decay: float = 4e-4
    batch_size: int = 32
    epochs: int = 20
    pretrain_epochs: int = 5
    embedding_dim: int = 16
    classes_per_batch: int = 8
    samples_per_class: int = 4
    miner: str = "random"
    seed: int = 0
    f_hidden: int = 64
    gen_hidden: int = 32
    disc_hidden: int = 32
    mode: str = "thsg"
    train_fraction: float = 0.5
    ema_decay: float = 0.9
    grad_clip: float = 5.0
    dw_lower: float = 0.5
    dw_upper: float = 1.4
    dw_clip: float = 1e4
    eval_every: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not 1.0 - 2.0 * self.eta - self.mu > 0:
            raise ConfigError(f"1 - 2*eta - mu must be positive (eta={self.eta}, mu={self.mu})")
        for name in ("lr_f", "lr_classifier", "lr_disc", "lr_gen"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.classes_per_batch * self.samples_per_class != self.batch_size:
            raise ConfigError(
                f"classes_per_batch * samples_per_class = "
                f"{self.classes_per_batch * self.samples_per_class} != batch_size = {self.batch_size}"
            )
        if self.alpha <= 0 or self.gamma < 0:
            raise ConfigError("need alpha > 0 and gamma >= 0")
        if self.epochs < 0 or self.pretrain_epochs < 0:
            raise ConfigError("epochs and pretrain_epochs must be >= 0")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {'|'.join(MODES)}, got {self.mode!r}")
        try:
            self.miner = MinerKind.parse(self.miner).value
        except ContractError as exc:
            raise ConfigError(str(exc)) from None
        if not 0 <= self.ema_decay < 1:
            raise ConfigError("ema_decay must lie in [0, 1)")

    def weights(self):
        return LossWeights(
            beta=self.beta, phi=self.phi, eta=self.eta, mu=self.mu, nu=self.nu, tau=self.tau,
            l_g_running=10.0 * self.beta,
        )

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_text(self):
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in dataclasses.fields(self))


FULL_SCALE_PRESETS = {
    "cub": dict(phi=0.5, epochs=150),
    "cars": dict(phi=0.25, epochs=150),
    "sop": dict(phi=0.2, epochs=100),
}


def full_scale_config(dataset="cub", **overrides):
    """Full-scale settings: 512-d embeddings, batch 128, generators 128 -> 512."""
    base = dict(
        lr_f=1e-5, lr_classifier=1e-3, lr_disc=1e-4, lr_gen=1e-3, weight_decay=4e-4,
        batch_size=128, classes_per_batch=32, samples_per_class=4, embedding_dim=512,
        f_hidden=512, gen_hidden=128, disc_hidden=128,
    )
    base.update(FULL_SCALE_PRESETS[dataset])
    base.update(overrides)
    return TrainConfig(**base)


def _convert(field_, raw):
    kind = field_.type if isinstance(field_.type, str) else field_.type.__name__
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{field_.name}: cannot parse {raw!r} as {kind}") from None
    return raw


def parse_config(text, required=True):
    """Parse ``key = value`` lines into a TrainConfig.

    Unknown keys are errors; with ``required`` every field must appear.
    """
    fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if not sep:
            raise ConfigError(f"line {lineno}: expected key = value")
        if key not in fields:
            raise ConfigError(f"unknown config key {key!r} (line {lineno})")
        if key in values:
            raise ConfigError(f"duplicate config key {key!r} (line {lineno})")
        values[key] = _convert(fields[key], raw)
    if required:
        missing = [k for k in fields if k not in values]
        if missing:
            raise ConfigError(f"missing config key {missing[0]!r}" + (
                f" (and {len(missing) - 1} more)" if len(missing) > 1 else ""))
    return TrainConfig(**values)


def load_config(path, required=True):
    with open(path) as fh:
        return parse_config(fh.read(), required=required)


@dataclass
class TrainResult:
    bundle: ModelBundle
    logs: list
    reports: list = field(default_factory=list)
    trainer: Trainer | None = None


@contextlib.contextmanager
def _diverges_as(name):
    """Report non-finite values raised inside the block as divergence of ``name``."""
    try:
        yield
    except TrainingDiverged:
        raise
    except FloatingPointError as exc:
        raise TrainingDiverged(name, str(exc)) from None


class Trainer:
    """Holds networks, optimiser states and the PLM / loss-weight schedules."""

    def __init__(self, config, input_dim, num_classes, bundle=None):
        self.config = config
        self.num_classes = num_classes
        seeds = np.random.SeedSequence(config.seed).spawn(4)
        self.bundle = bundle if bundle is not None else init_bundle(config, seeds[0], input_dim, num_classes)
        self.sampler_rng = np.random.default_rng(seeds[1])
        self.miner_rng = np.random.default_rng(seeds[2])
        self.eval_seed = int(seeds[3].generate_state(1)[0])
        self.plm = PlmState(alpha=config.alpha, gamma=config.gamma)
        self.weights = config.weights()
        self.l_g1_running = 10.0 * config.beta
        lr = {
            "F": config.lr_f, "C_F": config.lr_classifier,
            "G1": config.lr_gen, "G2": config.lr_gen,
            "D_G1": config.lr_disc, "D_G2": config.lr_disc,
        }
        self.optim = {
            name: AdamState(net.parameters(), lr=lr[name], weight_decay=config.weight_decay)
            for name, net in self.bundle.networks().items()
        }

    # -- helpers -----------------------------------------------------------

    def _grads(self, loss, name, nets):
        """Gradients of ``loss`` for the parameters of ``nets``, clipped jointly."""
        params = [p for net in nets for p in getattr(self.bundle, net).parameters()]
        for p in params:
            p.grad = None
        with _diverges_as(name):
            ad.backward(loss)
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
        grads, norm = ad.clip_grad_norm(grads, self.config.grad_clip)
        if not math.isfinite(norm):
            raise TrainingDiverged(name, "gradient is not finite")
        return grads

    def _step(self, net, grads):
        ad.adam_step(self.optim[net], grads)

    def _eval_loss(self, name, fn, *args, **kwargs):
        with _diverges_as(name):
            loss = fn(*args, **kwargs)
        if not math.isfinite(loss.item()):
            raise TrainingDiverged(name)
        return loss

    def _triplets(self, X, labels, kind=MinerKind.RANDOM):
        c = self.config
        return mine(kind, EmbeddingBatch(X, labels), c.tau, self.miner_rng,
                    dw_lower=c.dw_lower, dw_upper=c.dw_upper, dw_clip=c.dw_clip)

    # -- phases -------------------------------------------------------------

    def pretrain_batch(self, features, labels):
        """One F / C_F step on triplet + category loss (no generated samples)."""
        nets, w = self.bundle, self.weights
        with _diverges_as("L_F"):
            X0 = embed(nets.F, features).embeddings
        trip = self._triplets(X0, labels)
        ai, pi, ni = trip.T
        self.plm.bootstrap(np.linalg.norm(X0[ai] - X0[pi], axis=1))
        with _diverges_as("L_F"):
            X = nets.F(Tensor(features))
        parts = (ad.rows(X, ai), ad.rows(X, pi), ad.rows(X, ni))
        lab = (labels[ai], labels[ni])
        loss = self._eval_loss("L_F", embedding_objective, parts, None, None, lab, nets, w)
        grads = self._grads(loss, "L_F", ("F", "C_F"))
        self._split_step(("F", "C_F"), grads)
        return loss.item()

    def _split_step(self, names, grads):
        i = 0
        for name in names:
            k = len(getattr(self.bundle, name).parameters())
            self._step(name, grads[i : i + k])
            i += k

    def _objective(self, features, labels, trip, lam, X0):
        """Embedding objective with fresh F, G1 and G2 forwards on one tape."""
        c, nets, w = self.config, self.bundle, self.weights
        ai, pi, ni = trip.T
        rows = len(ai)
        X = nets.F(Tensor(features))
        a, p, n = ad.rows(X, ai), ad.rows(X, pi), ad.rows(X, ni)
        mined = None
        if c.miner != MinerKind.RANDOM.value:
            mt = self._triplets(X0, labels, MinerKind.parse(c.miner))
            mined = triplet_loss(ad.rows(X, mt[:, 0]), ad.rows(X, mt[:, 1]), ad.rows(X, mt[:, 2]), c.tau)
        lab = (labels[ai], labels[ni])
        if c.mode == "baseline":
            return embedding_objective((a, p, n), None, None, lab, nets, w, mined)
        xa, xp = stretch_pair(a, p, lam)
        g1 = nets.G1(ad.concat([xa, xp], axis=0))
        a_p, p_p = ad.rows(g1, np.arange(rows)), ad.rows(g1, np.arange(rows, 2 * rows))
        if c.mode == "thsg":
            g2 = nets.G2(ad.concat([a_p, p_p, n], axis=0))
            hat = tuple(ad.rows(g2, np.arange(k * rows, (k + 1) * rows)) for k in range(3))
            return embedding_objective((a, p, n), (a_p, p_p), hat, lab, nets, w, mined)
        # without G2 the hard triplet is (a', p', n); n is already classified above
        return embedding_objective((a, p, n), (a_p, p_p), (a_p, p_p, n), lab, nets, w, mined,
                                   classify_hat=False)

    def train_batch(self, features, labels):
        """One pass of the per-batch update order; returns the log record."""
        c, nets, w = self.config, self.bundle, self.weights
        features = np.asarray(features, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        nan = float("nan")
        record = dict.fromkeys(LOG_FIELDS, nan)
        mode = c.mode
        if mode == "no_g2":
            w.l_g_running = self.l_g1_running

        # (1) extract X, stretch anchor-positive pairs, generate X'
        with _diverges_as("L_F"):
            X0 = embed(nets.F, features).embeddings
        trip = self._triplets(X0, labels)
        ai, pi, ni = trip.T
        pos_lab, neg_lab = labels[ai], labels[ni]
        a0, p0, n0 = X0[ai], X0[pi], X0[ni]
        d_ap = np.linalg.norm(a0 - p0, axis=1)
        self.plm.bootstrap(d_ap)
        self.plm.observe(d_ap)
        lam = compute_lambda(d_ap, self.plm)
        record["d_t"] = self.plm.d_t
        a_star, p_star = stretch_pair(a0, p0, lam)
        rows = len(ai)

        if mode != "baseline":
            # (2) G1 and D_G1 from the same forward state
            with _diverges_as("L_G1"):
                g1_out = nets.G1(Tensor(np.vstack([a_star, p_star])))
            s1 = Stage1Batch(
                Tensor(a0), Tensor(p0), Tensor(a_star), Tensor(p_star),
                ad.rows(g1_out, np.arange(rows)), ad.rows(g1_out, np.arange(rows, 2 * rows)),
                pos_lab,
            )
            l_g1 = self._eval_loss("L_G1", loss_g1, s1, nets, w)
            l_dg1 = self._eval_loss("L_DG1", loss_dg1, s1, nets)
            g_grads = self._grads(l_g1, "L_G1", ("G1",))
            d_grads = self._grads(l_dg1, "L_DG1", ("D_G1",))
            self._step("G1", g_grads)
            self._step("D_G1", d_grads)
            record["L_G1"], record["L_DG1"] = l_g1.item(), l_dg1.item()
            self.l_g1_running = c.ema_decay * self.l_g1_running + (1 - c.ema_decay) * record["L_G1"]

        if mode == "thsg":
            # (3) re-extract X' with the updated G1, (4) generate X^
            with _diverges_as("L_G2"):
                ap_prime = nets.G1(Tensor(np.vstack([a_star, p_star]))).data
                a_p, p_p = ap_prime[:rows], ap_prime[rows:]
                g2_out = nets.G2(Tensor(np.vstack([a_p, p_p, n0])))
            s2 = Stage2Batch(
                Tensor(a_p), Tensor(p_p), Tensor(n0),
                ad.rows(g2_out, np.arange(rows)),
                ad.rows(g2_out, np.arange(rows, 2 * rows)),
                ad.rows(g2_out, np.arange(2 * rows, 3 * rows)),
                pos_lab, neg_lab,
            )
            # (5) G2 and D_G2
            l_g2 = self._eval_loss("L_G2", loss_g2, s2, nets, w)
            l_dg2 = self._eval_loss("L_DG2", loss_dg2, s2, nets, self.num_classes)
            g_grads = self._grads(l_g2, "L_G2", ("G2",))
            d_grads = self._grads(l_dg2, "L_DG2", ("D_G2",))
            self._step("G2", g_grads)
            self._step("D_G2", d_grads)
            record["L_G2"], record["L_DG2"] = l_g2.item(), l_dg2.item()
            record["tau_r"] = w.tau_r

        # (6)-(7) re-extract everything through the updated generators, update F and C_F
        loss = self._eval_loss("L_F", self._objective, features, labels, trip, lam, X0)
        w_o, w_h = (1.0, 0.0) if mode == "baseline" else (w.w_o, w.w_h)
        grads = self._grads(loss, "L_F", ("F", "C_F"))
        self._split_step(("F", "C_F"), grads)
        record["L_F"], record["w_o"], record["w_h"] = loss.item(), w_o, w_h

        if mode == "thsg":
            w.l_g_running = c.ema_decay * w.l_g_running + (1 - c.ema_decay) * record["L_G2"]
        return record

    def end_epoch(self):
        update_threshold(self.plm)


def batches_per_epoch(ds, config):
    return max(1, len(ds) // config.batch_size)


def pretrain(trainer, data):
    """Run ``pretrain_epochs`` epochs of F-only updates; returns mean losses."""
    c = trainer.config
    sampler = BalancedBatchSampler(data, c.classes_per_batch, c.samples_per_class, trainer.sampler_rng)
    means = []
    for _ in range(c.pretrain_epochs):
        losses = []
        for _ in range(batches_per_epoch(data, c)):
            idx = sampler.sample()
            losses.append(trainer.pretrain_batch(data.features[idx], data.labels[idx]))
        means.append(float(np.mean(losses)))
    return means


def write_log_csv(records, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("batch",) + LOG_FIELDS)
        for i, rec in enumerate(records):
            writer.writerow([i] + [repr(float(rec[k])) for k in LOG_FIELDS])


def check_dataset(ds, config):
    if not isinstance(ds, FeatureDataset):
        raise ContractError("training data must be a FeatureDataset")
    if ds.num_classes < 2:
        raise ContractError("training needs at least 2 classes")
    if ds.num_classes < config.classes_per_batch:
        raise ContractError(
            f"classes_per_batch={config.classes_per_batch} exceeds the {ds.num_classes} training classes"
        )
    sizes = np.bincount(ds.labels, minlength=ds.num_classes)
    if (sizes < 2).any():
        raise ContractError(f"classes {np.flatnonzero(sizes < 2).tolist()} have fewer than 2 samples")


def train(data, config, test=None, out_dir=None, ks=(1, 2, 4, 8), on_epoch=None):
    """Pre-train, then ``config.epochs`` epochs of per-batch updates.

    ``test`` (class-disjoint held-out data) is evaluated every
    ``config.eval_every`` epochs and after the last one.  With ``out_dir``
    each epoch writes ``epoch_<N>/model.thsg`` and ``epoch_<N>/log.csv``.
    """
    check_dataset(data, config)
    trainer = Trainer(config, data.dim, data.num_classes)
    pretrain(trainer, data)
    sampler = BalancedBatchSampler(data, config.classes_per_batch, config.samples_per_class, trainer.sampler_rng)
    logs, reports = [], []
    for epoch in range(1, config.epochs + 1):
        records = []
        for _ in range(batches_per_epoch(data, config)):
            idx = sampler.sample()
            records.append(trainer.train_batch(data.features[idx], data.labels[idx]))
        trainer.end_epoch()
        logs.append(records)
        report = None
        last = epoch == config.epochs
        if test is not None and (last or (config.eval_every and epoch % config.eval_every == 0)):
            report = evaluate(embed(trainer.bundle.F, test.features, test.labels), ks, seed=trainer.eval_seed)
            reports.append((epoch, report))
            log.info("epoch %d R@1=%.4f", epoch, report.recall.get(1, float("nan")))
        if out_dir is not None:
            epoch_dir = os.path.join(out_dir, f"epoch_{epoch}")
            os.makedirs(epoch_dir, exist_ok=True)
            save_checkpoint(trainer.bundle, os.path.join(epoch_dir, "model.thsg"))
            write_log_csv(records, os.path.join(epoch_dir, "log.csv"))
        if on_epoch is not None:
            on_epoch(epoch, trainer, records, report)
    if config.epochs == 0 and test is not None:
        reports.append((0, evaluate(embed(trainer.bundle.F, test.features, test.labels), ks, seed=trainer.eval_seed)))
    return TrainResult(trainer.bundle, logs, reports, trainer)
