"""Heat equation: conforming hp-FEM in space, dG(q) in time, and an
equilibrated-flux a posteriori estimator for the L2(H1) error."""

__version__ = "0.1.0"
