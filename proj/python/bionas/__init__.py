"""Joint search over network operators and bio-inspired learning rules.

Thin python surface over the native core: tensor primitives, feedback-rule
matrices, the synthetic dataset generator, and the search / train / attack
entry points. All heavy lifting happens in C++; config dicts mirror the
key=value files the CLI accepts (values are stringified).
"""

from ._core import (
    BionasConfigError,
    BionasDataError,
    BionasNumericError,
    attack,
    conv2d,
    feedback_matrix,
    gen_synthetic,
    matmul,
    op_tokens,
    pool2d,
    relu,
    rule_tokens,
    search,
    set_precision,
    softmax_cross_entropy,
    train,
    __version__,
)

__all__ = [
    "BionasConfigError",
    "BionasDataError",
    "BionasNumericError",
    "attack",
    "conv2d",
    "feedback_matrix",
    "gen_synthetic",
    "matmul",
    "op_tokens",
    "pool2d",
    "relu",
    "rule_tokens",
    "search",
    "set_precision",
    "softmax_cross_entropy",
    "train",
    "__version__",
]
