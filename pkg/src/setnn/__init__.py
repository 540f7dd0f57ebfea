"""Permutation-invariant and permutation-equivariant neural models over sets.

Subpackages cover a float64 reverse-mode tensor engine (`autodiff`), set
models and algebraic permutation checks (`layers`), exact sum-of-powers set
embeddings with root-recovery inversion (`powersum`), a Beta-Binomial set
expansion scorer (`bayes`), synthetic set-supervised task generators
(`tasks`), and a small training/evaluation driver with a CLI (`train`,
`cli`).
"""

from setnn.autodiff import Tape, Tensor, apply_primitive, backprop, grad_check

__version__ = "0.1.0"

__all__ = [
    "Tape",
    "Tensor",
    "apply_primitive",
    "backprop",
    "grad_check",
    "__version__",
]
