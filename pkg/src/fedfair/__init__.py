"""Federated learning simulator with fair aggregation (q-FFL, TERM),
personalisation losses (EWC, KD, FedProx), round-scheduled
personalisation-aware training, post-training adaptation and
relative-accuracy fairness reports."""

__version__ = "0.1.0"
