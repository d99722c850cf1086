"""Machine-independent cost proxy for transformer forward passes.

Counts multiply-accumulates of a forward pass over ``new`` tokens that attend
causally to ``cached`` earlier tokens:

* attention: the i-th new token attends to ``cached + i + 1`` keys, so the
  key count is ``new * cached + new * (new + 1) / 2``, each costing
  ``heads * head_dim`` per layer.
* dense: ``ffn_constant`` per token per layer (QKV, output and MLP
  projections: ``3d^2 + d^2 + 2 * ffn_mult * d^2``).

The attention term is split-additive: processing a sequence in one pass or in
any number of consecutive chunks costs exactly the same, which is what makes
cache reuse savings exact to account for.
"""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class LmShape:
    layers: int = 4
    heads: int = 4
    head_dim: int = 16
    ffn_mult: int = 4

    @property
    def dim(self) -> int:
        return self.heads * self.head_dim

    @property
    def ffn_constant(self) -> int:
        d = self.dim
        return (4 + 2 * self.ffn_mult) * d * d


def attended_keys(cached: int, new: int) -> int:
    return new * cached + new * (new + 1) // 2


def cost_model(prefix_cached: int, new: int, shape: LmShape = LmShape()) -> int:
    """FLOP proxy for running ``new`` tokens on top of ``prefix_cached`` cached ones."""
    if prefix_cached < 0 or new < 0:
        raise ValueError("token counts must be non-negative")
    attention = attended_keys(prefix_cached, new) * shape.heads * shape.head_dim * shape.layers
    dense = new * shape.ffn_constant * shape.layers
    return attention + dense
