"""cqcalc: a typed wire calculus for classical/quantum processes.

The package bundles a concrete finite-dimensional semantics for string
diagrams over classical and quantum registers (`regcalc`), a diagram IR
with a small textual front end (`diagram`), an epsilon-budgeted rewrite
engine with shipped proof scripts (`rewrite`), classical-quantum state
duplication utilities (`duplication`), a spot-checking CHSH protocol
simulator with min-entropy certification (`protocol`), Toeplitz-based
seeded extraction and the doubling/expansion pipeline (`extractor`), and
a batch CLI (`cli`).
"""

__version__ = "0.1.0"

FORMAT_VERSION = 1
