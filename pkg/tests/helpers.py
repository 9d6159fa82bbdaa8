"""Shared test utilities: finite-difference gradients and relative error."""

import torch


def rel_err(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def finite_difference(fn, tensor: torch.Tensor, index: tuple, h: float = 1e-6) -> float:
    """Central finite difference of scalar fn w.r.t. tensor[index]."""
    with torch.no_grad():
        orig = tensor[index].item()
        tensor[index] = orig + h
        up = float(fn())
        tensor[index] = orig - h
        down = float(fn())
        tensor[index] = orig
    return (up - down) / (2.0 * h)


def check_grad_against_fd(
    fn,
    tensor: torch.Tensor,
    analytic: torch.Tensor | None,
    n_coords: int = 20,
    seed: int = 0,
    h: float = 1e-6,
    tol: float = 1e-4,
    grad_floor: float = 1e-6,
) -> None:
    """Compare analytic gradients to central differences at random coordinates.

    `analytic` is the gradient tensor (None means identically zero, e.g.
    bucketized paths). Coordinates where both gradients are below
    `grad_floor` count as agreeing.
    """
    gen = torch.Generator().manual_seed(seed)
    numel = tensor.numel()
    n_coords = min(n_coords, numel)
    flat_choices = torch.randperm(numel, generator=gen)[:n_coords]
    for flat in flat_choices.tolist():
        index = tuple(
            int(x) for x in torch.unravel_index(torch.tensor(flat), tensor.shape)
        )
        fd = finite_difference(fn, tensor, index, h)
        an = 0.0 if analytic is None else float(analytic[index])
        if abs(fd) < grad_floor and abs(an) < grad_floor:
            continue
        assert rel_err(an, fd) < tol, (
            f"gradient mismatch at {index}: analytic {an}, finite-difference {fd}"
        )
