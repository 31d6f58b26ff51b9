"""icflow: a deterministic runtime for distributed iterative-convergent
machine learning, with a bounded-staleness parameter store, structure-aware
scheduling, managed communication, and a simulated cluster."""

__version__ = "0.1.0"
