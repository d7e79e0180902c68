"""kinedyn: physics-constrained motion state estimation.

A kinematic observation stream is fused with a PD-controlled rigid-body
simulation through a Kalman filter whose gain (and a few dynamics heads) are
predicted by a small recurrent network, trained end-to-end through the
physics. See the README for the CLI entry points.
"""

from . import autodiff, quaternions, skeleton, dynamics  # noqa: F401

__version__ = "0.1.0"
