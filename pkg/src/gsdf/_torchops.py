"""Small torch helpers shared across modules."""

import torch


class _GatherRows(torch.autograd.Function):
    """Row gather whose backward is a serial index_add (bitwise deterministic).

    Plain advanced-indexing backward scatters in parallel; with duplicate
    indices the float accumulation order varies run to run, which breaks the
    pipeline's byte-identical reproducibility contract.
    """

    @staticmethod
    def forward(ctx, table, index):
        ctx.save_for_backward(index)
        ctx.table_shape = table.shape
        return table[index]

    @staticmethod
    def backward(ctx, grad_out):
        (index,) = ctx.saved_tensors
        grad = torch.zeros(ctx.table_shape, dtype=grad_out.dtype)
        grad.index_add_(0, index, grad_out.contiguous())
        return grad, None


def gather_rows(table: torch.Tensor, index: torch.Tensor) -> torch.Tensor:
    """table[index] with a deterministic backward under duplicate indices."""
    if table.requires_grad:
        return _GatherRows.apply(table, index)
    return table[index]
