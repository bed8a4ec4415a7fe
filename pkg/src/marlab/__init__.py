"""marlab: a desk-scale cooperative multi-agent RL laboratory.

Value-factorization algorithms (VDN, QMIX, Qatten, QPLEX, OW-QMIX, LICA,
VMIX, RIIT) over a small tape-based autodiff core, with matrix-game and
predator-prey benchmarks and reproducible ablation presets.
"""

from .kernels import BACKEND_NAME as kernel_backend

__version__ = "0.1.0"
__all__ = ["kernel_backend", "__version__"]
