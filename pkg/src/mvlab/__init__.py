"""Spectral simulation of noisy McKean–Vlasov equations on the torus.

Modules: ``spectral`` (grids, transforms, Sobolev norms), ``noise`` (transport
noise fields), ``flow`` (stochastic characteristics), ``solver`` (SPDE time
stepping), ``steady`` (stationary states and linear thresholds), ``lyapunov``
(top exponents), ``particles`` (interacting particle systems) and
``experiments`` (campaigns, CSV output and acceptance checks).
"""

__version__ = "0.1.0"
