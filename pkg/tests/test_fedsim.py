import numpy as np
import pytest

from tnalign.data import gen_blobs
from tnalign.errors import ConfigError
from tnalign.fedsim import (FederatedConfig, aggregate, dirichlet_partition, local_update,
                            run_federated)
from tnalign.mask import reverse_mask, sample_mask
from tnalign.nncore import NetworkSpec, build_network

SPEC = NetworkSpec((4, 12, 3), seed=0)


@pytest.fixture(scope="module")
def split():
    full = gen_blobs(3, 120, 4, 3.0, seed=1)
    return full.subset(slice(0, 300)), full.subset(slice(300, None))


def labels10(n_per_class=300):
    return np.repeat(np.arange(10), n_per_class)


def small_cfg(**kw):
    base = dict(n_clients=4, rounds=2, local_epochs=2, dir=0.5, lr0=0.05, batch_size=16,
                partition_seed=1, mask_seed=2, selection_seed=3, training_seed=4)
    base.update(kw)
    return FederatedConfig(**base)


def test_config_validation():
    with pytest.raises(ConfigError):
        FederatedConfig(method="fedprox")
    with pytest.raises(ConfigError):
        FederatedConfig(n_clients=1)
    with pytest.raises(ConfigError):
        FederatedConfig(dir=0.0)
    with pytest.raises(ConfigError):
        FederatedConfig(selection_ratio=0.0)


@pytest.mark.parametrize("dir", [0.01, 0.1, 1.0, 100.0])
def test_partition_is_a_partition(dir):
    y = labels10(50)
    part = dirichlet_partition(y, 20, dir, seed=5)
    allidx = np.concatenate(part.assignment)
    assert np.array_equal(np.sort(allidx), np.arange(y.size))
    assert (part.sizes > 0).all()
    assert part.histograms.sum() == y.size


def test_partition_deterministic():
    y = labels10(30)
    a, b = dirichlet_partition(y, 7, 0.3, 9), dirichlet_partition(y, 7, 0.3, 9)
    assert all(np.array_equal(x, z) for x, z in zip(a.assignment, b.assignment))


def test_partition_too_few_samples():
    with pytest.raises(ConfigError):
        dirichlet_partition([0, 1, 2], 5, 1.0, 0)


def test_high_dir_is_near_uniform():
    for seed in range(3):
        part = dirichlet_partition(labels10(), 20, 100.0, seed)
        shares = part.histograms / part.histograms.sum(axis=1, keepdims=True)
        assert shares.max() <= 2 * 0.1


def test_low_dir_is_skewed():
    for seed in range(3):
        part = dirichlet_partition(labels10(), 20, 0.1, seed)
        h = np.sort(part.histograms, axis=1)[:, ::-1]
        top3 = h[:, :3].sum(axis=1) / h.sum(axis=1)
        assert np.median(top3) >= 0.8


def test_local_update_with_frozen_mask(split):
    tr, _ = split
    net = build_network(SPEC)
    frozen = sample_mask(SPEC, 1.0, 0)
    out = local_update(net, tr, 3, 0.1, 16, frozen, momentum=0.9, weight_decay=1e-3)
    assert np.array_equal(out, net.params)


def test_pnu_single_epoch_only_runs_reverse_phase(split):
    tr, _ = split
    net = build_network(SPEC)
    m = sample_mask(SPEC, 0.4, 1)
    out = local_update(net, tr, 1, 0.1, 16, m, two_phase=True)
    # with E = 1 the first phase is empty, so only coordinates free in the reverse mask move
    assert np.array_equal(out[m.bits], net.params[m.bits])
    assert not np.array_equal(out[~m.bits], net.params[~m.bits])


def test_pnu_mask_and_reverse_cover_everything():
    m = sample_mask(SPEC, 0.4, 3)
    assert (m.bits | reverse_mask(m).bits).all()


def test_aggregate_examples():
    w = np.array([1.0, 2.0, 3.0])
    assert np.array_equal(aggregate([w], [1.0]), w)
    a, b = np.array([0.0, 4.0]), np.array([2.0, 0.0])
    assert aggregate([a, b], [0.5, 0.5]).tolist() == [1.0, 2.0]
    with pytest.raises(ConfigError):
        aggregate([a, b], [0.5, 0.4])
    with pytest.raises(ConfigError):
        aggregate([a, b], [1.0])


def test_aggregate_keeps_agreeing_coordinates_exact(rng):
    anchor = rng.normal(size=50)
    clients = []
    for _ in range(5):
        c = anchor.copy()
        c[25:] += rng.normal(size=25)
        clients.append(c)
    lam = rng.dirichlet(np.ones(5))
    lam /= lam.sum()
    out = aggregate(clients, lam, anchor=anchor)
    assert np.array_equal(out[:25], anchor[:25])


def test_fedpfn_rho0_equals_fedavg(split):
    tr, te = split
    r1, m1 = run_federated(small_cfg(method="fedavg"), SPEC, tr, te, return_model=True)
    r2, m2 = run_federated(small_cfg(method="fedpfn", rho=0.0), SPEC, tr, te, return_model=True)
    assert np.array_equal(m1.params, m2.params)
    assert r1.to_csv() == r2.to_csv()


@pytest.mark.parametrize("method", ["fedavg", "fedpfn", "fedpnu"])
def test_client_order_independence(split, method):
    tr, te = split
    cfg = small_cfg(method=method)
    _, a = run_federated(cfg, SPEC, tr, te, return_model=True)
    _, b = run_federated(cfg, SPEC, tr, te, client_order=[3, 1, 0, 2], return_model=True)
    _, c = run_federated(cfg, SPEC, tr, te, threads=3, return_model=True)
    assert np.array_equal(a.params, b.params)
    assert np.array_equal(a.params, c.params)


def test_frozen_coordinates_reach_consensus(split):
    tr, te = split
    cfg = small_cfg(method="fedpfn", rounds=1, rho=0.5)
    _, model = run_federated(cfg, SPEC, tr, te, return_model=True)
    from tnalign.nncore import derive_seed
    m = sample_mask(SPEC, 0.5, derive_seed(cfg.mask_seed, 0))
    start = build_network(SPEC).params
    assert np.array_equal(model.params[~m.bits], start[~m.bits])
    assert not np.array_equal(model.params[m.bits], start[m.bits])


def test_single_client_single_round(split):
    tr, te = split
    cfg = small_cfg(n_clients=2, rounds=1, selection_ratio=0.5)
    report, model = run_federated(cfg, SPEC, tr, te, return_model=True)
    (cid,) = report.rounds[0].selected
    assert report.rounds[0].lambdas == [1.0]
    from tnalign.fedsim import dirichlet_partition as dp
    from tnalign.nncore import derive_seed
    part = dp(tr.targets, 2, cfg.dir, cfg.partition_seed)
    local = local_update(build_network(SPEC), tr.subset(part.assignment[cid]), cfg.local_epochs,
                         cfg.lr0, cfg.batch_size, momentum=cfg.momentum,
                         weight_decay=cfg.weight_decay,
                         seed=derive_seed(cfg.training_seed, 0, cid))
    assert np.array_equal(model.params, local)


def test_lambda_renormalized_over_selection(split):
    tr, te = split
    report = run_federated(small_cfg(n_clients=4, selection_ratio=0.5), SPEC, tr, te)
    sizes = np.array(report.client_sizes)
    for r in report.rounds:
        expect = sizes[r.selected] / sizes[r.selected].sum()
        assert np.allclose(r.lambdas, expect) and abs(sum(r.lambdas) - 1) < 1e-9


def test_report_shape_and_lr_decay(split):
    tr, te = split
    report = run_federated(small_cfg(rounds=6), SPEC, tr, te)
    assert len(report.rounds) == 6
    assert report.rounds[1].lr == pytest.approx(0.05 * 0.99)
    assert report.final_accuracy == pytest.approx(np.mean([r.test_acc for r in report.rounds[-5:]]))
    assert report.config["dir"] == 0.5
    assert report.to_csv().splitlines()[0] == "round,test_loss,test_acc,lr"


def test_run_is_deterministic(split):
    tr, te = split
    a = run_federated(small_cfg(method="fedpnu"), SPEC, tr, te)
    b = run_federated(small_cfg(method="fedpnu"), SPEC, tr, te)
    assert a.to_json() == b.to_json()
