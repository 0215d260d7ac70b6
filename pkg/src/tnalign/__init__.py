"""Training-time neuron alignment: masked SGD, linear mode connectivity,
permutation matching, a bound checker and a federated simulator."""

__version__ = "0.1.0"
