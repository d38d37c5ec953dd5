"""qalaskit: multiparametric T1/T2/PD/IE mapping from five-contrast QALAS data.

Two interchangeable estimation engines over one closed-form signal model:
grid-based dictionary matching and self-supervised per-voxel network fitting
trained through the physics forward model, plus synthetic phantoms, volume
I/O, and evaluation metrics.
"""

__version__ = "0.1.0"
