import csv
import math

import numpy as np
import pytest

from thsg import plm
from thsg.dataset import FeatureDataset, generate_gaussian_mixture
from thsg.errors import ConfigError, ContractError, TrainingDiverged
from thsg.losses import triplet_loss
from thsg.networks import embed, init_bundle, load_checkpoint
from thsg.trainer import (
    LOG_FIELDS,
    TrainConfig,
    Trainer,
    load_config,
    full_scale_config,
    parse_config,
    pretrain,
    train,
)


def small_config(**overrides):
    base = dict(
        embedding_dim=8, f_hidden=16, gen_hidden=8, disc_hidden=8, batch_size=16,
        classes_per_batch=4, samples_per_class=4, epochs=2, pretrain_epochs=1, seed=3,
    )
    return TrainConfig(**{**base, **overrides})


@pytest.fixture(scope="module")
def data():
    return generate_gaussian_mixture(4, 20, 8, 1.0, 0.3, seed=0)


def snapshot(bundle):
    return {name: [p.data.copy() for p in net.parameters()] for name, net in bundle.networks().items()}


def changed(before, bundle):
    after = snapshot(bundle)
    return {name for name in before
            if any(not np.array_equal(a, b) for a, b in zip(before[name], after[name]))}


def test_zero_epochs_and_zero_pretraining_leave_initial_bundle(data):
    config = small_config(epochs=0, pretrain_epochs=0)
    result = train(data, config)
    fresh = Trainer(config, data.dim, data.num_classes).bundle
    assert changed(snapshot(fresh), result.bundle) == set()
    assert result.logs == []


def test_zero_epochs_returns_pretrained_bundle(data):
    config = small_config(epochs=0, pretrain_epochs=1)
    result = train(data, config)
    fresh = Trainer(config, data.dim, data.num_classes).bundle
    assert changed(snapshot(fresh), result.bundle) == {"F", "C_F"}


def mean_triplet_loss(F, ds, tau=0.2):
    x = embed(F, ds.features).embeddings
    lab = ds.labels
    a, p, n = [], [], []
    for i in range(len(lab)):
        for j in range(len(lab)):
            if i != j and lab[i] == lab[j]:
                for k in np.flatnonzero(lab != lab[i]):
                    a.append(x[i]), p.append(x[j]), n.append(x[k])
    return triplet_loss(np.array(a), np.array(p), np.array(n), tau)


def toy_two_class():
    rng = np.random.default_rng(0)
    x = np.vstack([rng.normal(0, 0.3, (12, 4)) + [2, 0, 0, 0], rng.normal(0, 0.3, (12, 4)) - [2, 0, 0, 0]])
    return FeatureDataset(x, np.repeat([0, 1], 12), 2)


def test_pretraining_reduces_triplet_loss_on_separable_toy():
    ds = toy_two_class()
    config = small_config(classes_per_batch=2, samples_per_class=4, batch_size=8, pretrain_epochs=20)
    trainer = Trainer(config, ds.dim, 2)
    before = mean_triplet_loss(trainer.bundle.F, ds)
    pretrain(trainer, ds)
    assert mean_triplet_loss(trainer.bundle.F, ds) < before


def test_trained_toy_separates_classes():
    ds = toy_two_class()
    config = small_config(classes_per_batch=2, samples_per_class=4, batch_size=8, epochs=10)
    bundle = train(ds, config).bundle
    x = embed(bundle.F, ds.features).embeddings
    d = np.linalg.norm(x[:, None] - x[None], axis=2)
    same = ds.labels[:, None] == ds.labels[None]
    off = ~np.eye(len(x), dtype=bool)
    assert d[~same].mean() > d[same & off].mean()


def test_pretraining_is_deterministic(data):
    config = small_config(pretrain_epochs=2)
    t1, t2 = Trainer(config, data.dim, 4), Trainer(config, data.dim, 4)
    assert pretrain(t1, data) == pretrain(t2, data)
    assert changed(snapshot(t1.bundle), t2.bundle) == set()


@pytest.mark.parametrize("mode, expected", [
    ("thsg", {"F", "G1", "D_G1", "G2", "D_G2", "C_F"}),
    ("no_g2", {"F", "G1", "D_G1", "C_F"}),
    ("baseline", {"F", "C_F"}),
])
def test_update_scope_of_one_batch(data, mode, expected):
    config = small_config(mode=mode, weight_decay=0.0)
    trainer = Trainer(config, data.dim, data.num_classes)
    pretrain(trainer, data)
    before = snapshot(trainer.bundle)
    idx = np.arange(0, 80, 5)
    record = trainer.train_batch(data.features[idx], data.labels[idx])
    assert changed(before, trainer.bundle) == expected
    assert set(record) == set(LOG_FIELDS)
    assert record["w_o"] + record["w_h"] == pytest.approx(1.0, abs=1e-15)


def test_log_records_and_loss_traces(data):
    result = train(data, small_config(epochs=3))
    assert len(result.logs) == 3
    assert all(len(epoch) == len(data) // 16 for epoch in result.logs)
    for rec in (r for epoch in result.logs for r in epoch):
        assert all(math.isfinite(rec[k]) for k in LOG_FIELDS)
        assert rec["w_o"] + rec["w_h"] == pytest.approx(1.0, abs=1e-15)
        assert 0 <= rec["tau_r"] < 0.2


def test_baseline_records_leave_generator_fields_empty(data):
    rec = train(data, small_config(mode="baseline", epochs=1)).logs[0][0]
    assert math.isnan(rec["L_G1"]) and math.isnan(rec["L_G2"])
    assert rec["w_o"] == 1.0 and rec["w_h"] == 0.0


def test_identical_seeds_give_identical_trajectories(data):
    a = train(data, small_config(epochs=2))
    b = train(data, small_config(epochs=2))
    assert [[r["L_F"] for r in e] for e in a.logs] == [[r["L_F"] for r in e] for e in b.logs]
    c = train(data, small_config(epochs=2, seed=4))
    assert [r["L_F"] for r in a.logs[0]] != [r["L_F"] for r in c.logs[0]]


def test_threshold_is_previous_epoch_mean(data, monkeypatch):
    observed = []
    original = plm.PlmState.observe

    def spy(self, distances):
        observed.append(np.asarray(distances, dtype=np.float64).copy())
        original(self, distances)

    monkeypatch.setattr(plm.PlmState, "observe", spy)
    result = train(data, small_config(epochs=4))
    per_epoch = len(result.logs[0])
    for e in range(1, 4):
        dists = np.concatenate(observed[(e - 1) * per_epoch : e * per_epoch])
        for rec in result.logs[e]:
            assert abs(rec["d_t"] - dists.mean()) < 1e-12


def test_nan_aborts_with_loss_name(data):
    trainer = Trainer(small_config(), data.dim, data.num_classes)
    trainer.bundle.G1.weights[0].data[0, 0] = np.inf
    idx = np.arange(0, 80, 5)
    with pytest.raises(TrainingDiverged, match="L_G1") as info:
        trainer.train_batch(data.features[idx], data.labels[idx])
    assert info.value.loss_name == "L_G1"


def test_mining_combination_runs(data):
    for miner in ("semihard", "softhard", "distance_weighted"):
        result = train(data, small_config(miner=miner, epochs=1))
        assert all(math.isfinite(r["L_F"]) for r in result.logs[0])


def test_checkpoint_directory_layout(data, tmp_path):
    result = train(data, small_config(epochs=2), test=data, out_dir=tmp_path)
    for epoch in (1, 2):
        d = tmp_path / f"epoch_{epoch}"
        assert (d / "model.thsg").exists()
        with open(d / "log.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["batch", "L_F", "L_G1", "L_DG1", "L_G2", "L_DG2", "w_o", "w_h", "tau_r", "d_t"]
        assert len(rows) == 1 + len(result.logs[epoch - 1])
    loaded = load_checkpoint(tmp_path / "epoch_2" / "model.thsg")
    assert changed(snapshot(result.bundle), loaded) == set()
    assert [e for e, _ in result.reports] == [1, 2]


def test_dataset_contract_checked_before_training():
    ds = generate_gaussian_mixture(3, 5, 4, seed=0)
    with pytest.raises(ContractError, match="classes_per_batch"):
        train(ds, small_config())


# -- configuration -------------------------------------------------------------------


def test_config_invariants():
    with pytest.raises(ConfigError, match="1 - 2\\*eta - mu"):
        TrainConfig(eta=0.4, mu=0.3)
    with pytest.raises(ConfigError, match="batch_size"):
        TrainConfig(batch_size=30)
    with pytest.raises(ConfigError, match="lr_disc"):
        TrainConfig(lr_disc=0.0)
    with pytest.raises(ConfigError, match="miner"):
        TrainConfig(miner="hardest")


def test_config_text_round_trip(tmp_path):
    config = small_config(miner="softhard", phi=0.25)
    path = tmp_path / "c.cfg"
    path.write_text(config.to_text())
    assert load_config(path) == config


def test_config_errors_name_the_key():
    text = TrainConfig().to_text()
    with pytest.raises(ConfigError, match="'bogus'"):
        parse_config(text + "bogus = 1\n")
    with pytest.raises(ConfigError, match="duplicate config key 'seed'"):
        parse_config(text + "seed = 2\n")
    missing = "".join(line + "\n" for line in text.splitlines() if not line.startswith("nu "))
    with pytest.raises(ConfigError, match="missing config key 'nu'"):
        parse_config(missing)
    with pytest.raises(ConfigError, match="epochs"):
        parse_config(text.replace("epochs = 20", "epochs = many"))
    assert parse_config("seed = 9  # comment\n", required=False).seed == 9


def test_full_scale_config_values():
    c = full_scale_config("cub")
    assert (c.lr_f, c.lr_classifier, c.lr_disc, c.lr_gen, c.weight_decay) == (1e-5, 1e-3, 1e-4, 1e-3, 4e-4)
    assert (c.batch_size, c.embedding_dim, c.gen_hidden) == (128, 512, 128)
    assert (c.alpha, c.gamma, c.eta, c.beta, c.mu, c.tau, c.nu) == (0.2, 0.8, 0.3, 0.5, 0.3, 0.2, 0.2)
    assert [full_scale_config(d).phi for d in ("cub", "cars", "sop")] == [0.5, 0.25, 0.2]
    bundle = init_bundle(c.replace(f_hidden=8), 0, 4, 3)
    assert bundle.G1.dims == [512, 128, 512]
