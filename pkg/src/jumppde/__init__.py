"""Simulation and verification toolkit for boundary stabilization of 2x2
linear hyperbolic PDEs whose coefficients jump along a continuous-time
Markov chain.

Subpackages cover the plant parameters (`params`), the jump processes
(`markov`), the backstepping kernel solver and transform (`kernels`), the
branch/trunk surrogate of the kernel map (`operator`), the time-domain
plant solver (`sim`), empirical mean-square stability checks
(`stability`), and the freeway traffic case study (`traffic`).
"""

__version__ = "0.1.0"
