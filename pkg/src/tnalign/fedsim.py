"""Single-process federated simulator: FedAvg, FedPFN and FedPNU.

FedPFN broadcasts one random gradient mask per round and every selected
client trains under it. FedPNU trains ``E // 2`` local epochs under the mask
and the remaining epochs under its complement.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .connect import _anchored_average, parallel_map
from .errors import ConfigError, TnalignError
from .mask import GradientMask, reverse_mask, sample_mask
from .nncore import (Dataset, LayeredNetwork, NetworkSpec, OptimizerState, build_network,
                     derive_seed, evaluate, train, unflatten)

METHODS = ("fedavg", "fedpfn", "fedpnu")


@dataclass(frozen=True)
class FederatedConfig:
    n_clients: int = 20
    rounds: int = 30
    local_epochs: int = 5
    method: str = "fedavg"
    rho: float = 0.4
    dir: float = 0.1
    selection_ratio: float = 1.0
    lr0: float = 0.08
    lr_decay: float = 0.99
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 128
    partition_seed: int = 0
    mask_seed: int = 0
    selection_seed: int = 0
    training_seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.rounds < 1 or self.local_epochs < 1 or self.n_clients < 2:
            raise ConfigError("need rounds >= 1, local_epochs >= 1 and n_clients >= 2")
        if not 0.0 <= self.rho <= 1.0:
            raise ConfigError("rho must lie in [0, 1]")
        if not self.dir > 0:
            raise ConfigError("dir must be positive")
        if not 0.0 < self.selection_ratio <= 1.0:
            raise ConfigError("selection_ratio must lie in (0, 1]")
        if self.batch_size < 1 or self.lr0 < 0 or self.lr_decay <= 0:
            raise ConfigError("need batch_size >= 1, lr0 >= 0 and lr_decay > 0")

    @property
    def clients_per_round(self) -> int:
        return max(1, int(round(self.selection_ratio * self.n_clients)))


@dataclass
class ClientPartition:
    assignment: list  # sorted index arrays, one per client
    histograms: np.ndarray  # (n_clients, n_classes)

    @property
    def sizes(self):
        return np.array([a.size for a in self.assignment])


def dirichlet_partition(labels, n_clients: int, dir: float, seed) -> ClientPartition:
    """Split each class by Dirichlet(dir) proportions; empty clients then steal
    the highest index of the currently largest client."""
    labels = np.asarray(labels)
    if not dir > 0:
        raise ConfigError("dir must be positive")
    if n_clients < 1 or labels.size < n_clients:
        raise ConfigError(f"{labels.size} samples cannot fill {n_clients} clients")
    rng = np.random.default_rng(seed)
    classes = np.unique(labels)
    buckets = [[] for _ in range(n_clients)]
    for c in classes:
        idx = rng.permutation(np.flatnonzero(labels == c))
        props = rng.dirichlet(np.full(n_clients, dir))
        cuts = (np.cumsum(props)[:-1] * idx.size).astype(np.int64)
        for k, part in enumerate(np.split(idx, cuts)):
            buckets[k].append(part)
    assignment = [np.sort(np.concatenate(b)).astype(np.int64) for b in buckets]
    for k in range(n_clients):
        if assignment[k].size == 0:
            donor = int(np.argmax([a.size for a in assignment]))
            assignment[k] = assignment[donor][-1:]
            assignment[donor] = assignment[donor][:-1]
    hist = np.array([[np.count_nonzero(labels[a] == c) for c in classes] for a in assignment])
    return ClientPartition(assignment, hist)


def local_update(start: LayeredNetwork, data: Dataset, epochs: int, lr: float,
                 batch_size: int, mask: Optional[GradientMask] = None,
                 two_phase: bool = False, momentum: float = 0.0,
                 weight_decay: float = 0.0, seed: int = 0) -> np.ndarray:
    """Train a copy of ``start``; returns its parameter vector.

    With ``two_phase`` the first ``epochs // 2`` epochs use ``mask`` and the
    rest its complement, sharing one optimizer state.
    """
    net = start.copy()
    state = OptimizerState(lr, momentum, weight_decay)
    if two_phase:
        if mask is None:
            raise ConfigError("two-phase local training needs a mask")
        first = epochs // 2
        train(net, data, first, batch_size, state, mask, derive_seed(seed, 0))
        train(net, data, epochs - first, batch_size, state, reverse_mask(mask),
              derive_seed(seed, 1))
    else:
        train(net, data, epochs, batch_size, state, mask, seed)
    return net.params


def aggregate(client_params: Sequence[np.ndarray], lambdas: Sequence[float],
              anchor: Optional[np.ndarray] = None) -> np.ndarray:
    """``anchor + sum_i lambda_i (w_i - anchor)``; equal to the plain weighted
    average, but coordinates every client left at ``anchor`` stay bit-exact."""
    lambdas = np.asarray(lambdas, dtype=np.float64)
    if len(client_params) == 0 or lambdas.shape != (len(client_params),):
        raise ConfigError("need one aggregation weight per client")
    if np.any(lambdas < 0) or abs(lambdas.sum() - 1.0) > 1e-9:
        raise ConfigError(f"aggregation weights must be non-negative and sum to 1, "
                          f"got {lambdas.sum()}")
    if len(client_params) == 1:
        return np.array(client_params[0], dtype=np.float64)
    if anchor is None:
        anchor = client_params[0]
    return _anchored_average(np.asarray(anchor, dtype=np.float64),
                             [np.asarray(p) for p in client_params], lambdas)


@dataclass
class RoundRecord:
    round: int
    test_loss: float
    test_acc: Optional[float]
    lr: float
    selected: list
    lambdas: list


@dataclass
class FederatedRunReport:
    config: dict
    spec: dict
    client_sizes: list
    rounds: list = field(default_factory=list)
    lambda_renormalized: bool = True

    @property
    def final_accuracy(self) -> Optional[float]:
        accs = [r.test_acc for r in self.rounds[-5:]]
        return None if None in accs else float(np.mean(accs))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["final_accuracy"] = self.final_accuracy
        return d

    def to_json(self, extra: dict | None = None) -> str:
        d = self.to_dict()
        if extra:
            d.update(extra)
        return json.dumps(d, indent=2, sort_keys=True)

    def to_csv(self, comment: str | None = None) -> str:
        buf = io.StringIO()
        if comment:
            buf.write(f"# {comment}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["round", "test_loss", "test_acc", "lr"])
        for r in self.rounds:
            acc = "" if r.test_acc is None else repr(r.test_acc)
            w.writerow([r.round, repr(r.test_loss), acc, repr(r.lr)])
        return buf.getvalue()


class ClientError(TnalignError):
    def __init__(self, msg, client_id, round_):
        super().__init__(msg)
        self.client_id = client_id
        self.round = round_


def run_federated(cfg: FederatedConfig, spec: NetworkSpec, train_data: Dataset,
                  test_data: Dataset, threads: int = 1,
                  client_order: Optional[Sequence[int]] = None,
                  return_model: bool = False):
    """Run ``cfg.rounds`` rounds. ``client_order`` only changes the order in
    which local updates are executed; aggregation is always in client-id order."""
    if not train_data.is_classification:
        raise ConfigError("the federated simulator partitions by class labels")
    part = dirichlet_partition(train_data.targets, cfg.n_clients, cfg.dir, cfg.partition_seed)
    sizes = part.sizes
    shards = [train_data.subset(a) for a in part.assignment]
    global_net = build_network(spec)
    report = FederatedRunReport(asdict(cfg), spec.to_dict(), sizes.tolist())
    lr = cfg.lr0
    for t in range(cfg.rounds):
        sel_rng = np.random.default_rng(derive_seed(cfg.selection_seed, t))
        selected = np.sort(sel_rng.choice(cfg.n_clients, cfg.clients_per_round, replace=False))
        mask = None
        if cfg.method != "fedavg":
            mask = sample_mask(spec, cfg.rho, derive_seed(cfg.mask_seed, t))
        order = list(selected) if client_order is None else [
            c for c in client_order if c in set(selected.tolist())]
        if sorted(order) != selected.tolist():
            raise ConfigError("client_order must contain every selected client exactly once")

        def work(cid, t=t, lr=lr, mask=mask):
            try:
                return cid, local_update(
                    global_net, shards[cid], cfg.local_epochs, lr, cfg.batch_size, mask,
                    two_phase=cfg.method == "fedpnu", momentum=cfg.momentum,
                    weight_decay=cfg.weight_decay,
                    seed=derive_seed(cfg.training_seed, t, int(cid)))
            except TnalignError as exc:
                raise ClientError(f"client {cid} failed in round {t}: {exc}", int(cid), t) from exc

        results = dict(parallel_map(work, order, threads))
        lam = sizes[selected] / sizes[selected].sum()
        new = aggregate([results[c] for c in selected], lam, anchor=global_net.params)
        global_net = unflatten(spec, new)
        m = evaluate(global_net, test_data)
        report.rounds.append(RoundRecord(t, m.loss, m.accuracy, lr, selected.tolist(),
                                         lam.tolist()))
        lr *= cfg.lr_decay
    return (report, global_net) if return_model else report
