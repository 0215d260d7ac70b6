"""Weight matching undoes a hidden-neuron shuffle exactly."""
import numpy as np

from tnalign.nncore import NetworkSpec, build_network
from tnalign.perm import NetworkPermutation, apply_permutation, weight_match

spec = NetworkSpec((16, 64, 64, 4), seed=0)
a = build_network(spec)
b = apply_permutation(a, NetworkPermutation.random(spec, seed=5))
print("distance before:", np.linalg.norm(a.params - b.params))

res = weight_match(a, b)
aligned = apply_permutation(b, res.perm)
print(f"distance after {res.sweeps_used} sweeps:", np.linalg.norm(a.params - aligned.params))
