"""Z2 invariants of time-reversal-invariant insulators via sewing matrices,
Wess-Zumino amplitudes (basic-gerbe holonomy) and Chern-Simons actions."""

__version__ = "0.1.0"
