"""FedAvg vs FedPFN on a small non-IID blob problem."""
from tnalign.data import gen_blobs
from tnalign.fedsim import FederatedConfig, run_federated
from tnalign.nncore import NetworkSpec

full = gen_blobs(5, 200, 8, 2.0, seed=0)
train, test = full.subset(slice(0, 800)), full.subset(slice(800, None))
spec = NetworkSpec((8, 32, 5), seed=0)

for method in ("fedavg", "fedpfn", "fedpnu"):
    cfg = FederatedConfig(n_clients=10, rounds=10, local_epochs=2, method=method, dir=0.3,
                          lr0=0.05)
    report = run_federated(cfg, spec, train, test)
    print(f"{method:7s} final accuracy {report.final_accuracy:.3f}")
