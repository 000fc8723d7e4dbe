"""Central finite-difference gradient checking for torch modules.

The analytic gradients come from a single backward pass; the reference comes
from re-evaluating the loss with every parameter entry nudged +-step. Use
double precision modules, or the subtraction noise swamps the comparison.
"""

import torch


def fd_group_errors(make_loss, module, step=1e-5):
    """Relative error per parameter tensor between analytic and FD gradients.

    make_loss: () -> scalar tensor, re-evaluated many times; must read the
        module's live parameters each call.

    Returns: dict of parameter name -> relative L2 error, where the FD side
    perturbs one scalar entry at a time (central differences).
    """
    params = {n: p for n, p in module.named_parameters() if p.requires_grad}
    for p in params.values():
        p.grad = None
    make_loss().backward()
    analytic = {
        n: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
        for n, p in params.items()
    }

    errors = {}
    for name, p in params.items():
        flat = p.detach().reshape(-1)
        fd = torch.zeros_like(flat)
        for i in range(flat.numel()):
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + step
            plus = make_loss().item()
            with torch.no_grad():
                flat[i] = orig - step
            minus = make_loss().item()
            with torch.no_grad():
                flat[i] = orig
            fd[i] = (plus - minus) / (2.0 * step)
        a = analytic[name].reshape(-1)
        denom = max(fd.norm().item(), a.norm().item(), 1e-12)
        errors[name] = (fd - a).norm().item() / denom
    return errors
