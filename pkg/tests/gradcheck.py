"""Central finite-difference gradient checks shared by unit and acceptance tests."""
import torch

from mumo.base_lm import ModelConfig, init_model, lm_loss
from mumo.mumo_head import MonoHead, joint_loss


def sampled_fd_errors(params: dict[str, torch.Tensor], loss_fn, n: int = 20, eps: float = 1e-3,
                      seed: int = 0) -> list[float]:
    """Relative errors between autograd and central differences at `n` random coordinates."""
    for p in params.values():
        p.grad = None
    loss_fn().backward()
    g = torch.Generator().manual_seed(seed)
    names = sorted(params)
    errs = []
    for _ in range(n):
        name = names[int(torch.randint(len(names), (1,), generator=g))]
        p = params[name]
        idx = int(torch.randint(p.numel(), (1,), generator=g))
        flat = p.data.view(-1)
        old = flat[idx].item()
        with torch.no_grad():
            flat[idx] = old + eps
            up = loss_fn().item()
            flat[idx] = old - eps
            down = loss_fn().item()
            flat[idx] = old
        num = (up - down) / (2 * eps)
        ana = p.grad.view(-1)[idx].item()
        errs.append(abs(ana - num) / max(abs(ana), abs(num), 1e-8))
    return errs


def base_gradcheck(seed: int = 0) -> list[float]:
    model = init_model(ModelConfig(vocab_size=300, d_multi=16, n_layers=2, n_heads=2, context_len=32, seed=seed))
    model.double()
    batch = torch.randint(0, 300, (2, 12), generator=torch.Generator().manual_seed(seed))
    return sampled_fd_errors(dict(model.named_parameters()), lambda: lm_loss(model, batch), seed=seed)


def head_gradcheck(seed: int = 0) -> list[float]:
    g = torch.Generator().manual_seed(seed)
    model = init_model(ModelConfig(vocab_size=300, d_multi=16, n_layers=2, n_heads=2, context_len=32, seed=seed))
    model.double()
    head = MonoHead(16, 40).double()
    with torch.no_grad():
        for p in head.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=torch.float64) * 0.3)
    h = torch.randn(24, 16, generator=g, dtype=torch.float64) * 3
    t = torch.randint(0, 340, (24,), generator=g)
    return sampled_fd_errors(dict(head.named_parameters()), lambda: joint_loss(model, head, h, t), seed=seed)
