"""Barrier between two SGD replicas on a 1-D polynomial, with and without a shared mask.

Both replicas start from one init and differ only in batch order.
"""
from tnalign.connect import barrier_report, sweep
from tnalign.data import gen_polynomial
from tnalign.mask import sample_mask
from tnalign.nncore import NetworkSpec, OptimizerState, build_network, derive_seed, train

data = gen_polynomial("poly2", 100, 0.05, seed=0)
spec = NetworkSpec((1, 200, 1), seed=1000, output_head="linear")
init = build_network(spec)

for rho in (0.0, 0.4):
    mask = sample_mask(spec, rho, seed=77) if rho else None
    pair = []
    for r in range(2):
        net = init.copy()
        train(net, data, 100, 10, OptimizerState(0.05), mask, shuffle_seed=derive_seed(0, r))
        pair.append(net)
    rep = barrier_report(sweep(*pair, data))
    print(f"rho={rho}: loss barrier {rep.loss_barrier:.4f} (worst at alpha={rep.loss_argmax_alpha:.2f})")
