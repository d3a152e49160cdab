"""Video transformers for word-level sign language recognition, built on a
small numpy autodiff core.

Submodules are imported explicitly (``from vslr import tensor``) so that the
command line entry point can pin BLAS thread counts before numpy loads.
"""

__version__ = "0.1.0"
