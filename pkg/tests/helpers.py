"""Shared test utilities."""

import torch

from cft import numerics as nx
from cft.dethead import focal_loss, reg_l1_loss
from cft.encodings import sinusoidal_encode
from cft.va import multihead_attention


def rel_err(a: torch.Tensor, b: torch.Tensor) -> float:
    """Max abs difference scaled by the larger magnitude (floored at 1e-8)."""
    scale = max(float(a.abs().max()), float(b.abs().max()), 1e-8)
    return float((a - b).abs().max()) / scale


def grad_check(fn, *inputs: torch.Tensor, eps: float = 1e-6, max_entries: int | None = None, seed: int = 0) -> float:
    """Worst relative error between autograd and central differences of scalar ``fn(*inputs)``."""
    for x in inputs:
        x.grad = None
    out = fn(*inputs)
    nx.backward(out)
    worst = 0.0
    g = torch.Generator().manual_seed(seed)
    for x in inputs:
        n = x.numel()
        idx = range(n) if max_entries is None or n <= max_entries else torch.randperm(n, generator=g)[:max_entries].tolist()
        num = nx.finite_difference_grad(lambda: fn(*inputs), x, eps, idx).reshape(-1)
        ana = x.grad.reshape(-1)
        idx = list(idx)
        worst = max(worst, rel_err(ana[idx], num[idx]))
    return worst


def maxdiff(a: torch.Tensor, b: torch.Tensor) -> float:
    return float((a - b).detach().abs().max())


def leaf(*shape, gen, scale=1.0):
    return (torch.randn(*shape, generator=gen) * scale).requires_grad_(True)


# (name, build) where build(generator) -> (leaf inputs, scalar fn of those inputs)
OP_CASES = [
    ("matmul", lambda g: ((leaf(2, 3, 4, gen=g), leaf(4, 5, gen=g)), lambda a, b: nx.matmul(a, b).sin().sum())),
    ("linear", lambda g: ((leaf(3, 4, gen=g), leaf(5, 4, gen=g), leaf(5, gen=g)),
                          lambda x, w, b: nx.linear(x, w, b).pow(2).sum())),
    ("conv2d", lambda g: ((leaf(1, 2, 5, 5, gen=g), leaf(3, 2, 3, 3, gen=g), leaf(3, gen=g)),
                          lambda x, w, b: nx.conv2d(x, w, b, stride=2, padding=1).pow(2).sum())),
    ("conv_transpose2d", lambda g: ((leaf(1, 3, 3, 3, gen=g), leaf(3, 2, 2, 2, gen=g), leaf(2, gen=g)),
                                    lambda x, w, b: nx.conv_transpose2d(x, w, b).pow(2).sum())),
    ("softmax", lambda g: ((leaf(3, 6, gen=g),), lambda x: (nx.softmax(x) * torch.arange(6.0)).sum())),
    ("masked_softmax", lambda g: ((leaf(3, 6, gen=g),),
                                  lambda x: (nx.softmax(x, mask=torch.arange(6) % 2 == 0) * torch.arange(6.0)).sum())),
    ("layer_norm", lambda g: ((leaf(4, 6, gen=g), leaf(6, gen=g), leaf(6, gen=g)),
                              lambda x, w, b: (nx.layer_norm(x, w, b) * torch.arange(6.0)).sum())),
    ("sigmoid", lambda g: ((leaf(7, gen=g),), lambda x: nx.sigmoid(x).pow(3).sum())),
    ("add_mul", lambda g: ((leaf(3, 4, gen=g), leaf(4, gen=g)),
                           lambda a, b: nx.elementwise_mul(nx.add(a, b), b).sum())),
    ("concat", lambda g: ((leaf(2, 3, gen=g), leaf(2, 2, gen=g)),
                          lambda a, b: (nx.concat([a, b], axis=-1) ** 2 * torch.arange(5.0)).sum())),
    ("ffn", lambda g: ((leaf(3, 4, gen=g), leaf(8, 4, gen=g), leaf(8, gen=g, scale=0.1), leaf(2, 8, gen=g),
                        leaf(2, gen=g)), lambda x, w1, b1, w2, b2: nx.ffn(x, w1, b1, w2, b2).pow(2).sum())),
    ("focal_loss", lambda g: ((leaf(2, 3, 4, gen=g),),
                              lambda x: focal_loss(nx.sigmoid(x), torch.linspace(0, 1, 24).reshape(2, 3, 4) ** 3))),
    ("reg_l1", lambda g: ((leaf(2, 3, 4, gen=g),),
                          lambda x: reg_l1_loss(x, torch.full((2, 3, 4), 5.0), torch.arange(12).reshape(3, 4) % 3 == 0))),
    ("sinusoid", lambda g: ((leaf(5, gen=g),), lambda x: (sinusoidal_encode(x, 8) * torch.arange(8.0)).sum())),
    ("attention", lambda g: ((leaf(1, 4, 8, gen=g), leaf(1, 6, 8, gen=g), leaf(1, 6, 8, gen=g)),
                             lambda q, k, v: multihead_attention(q, k, v, 2, key_mask=torch.arange(6) != 2)[0]
                             .pow(2).sum())),
]


# criterion number -> [(check, passed, detail)], printed as one line per criterion at session end
ACCEPTANCE: dict[int, list[tuple[str, bool, str]]] = {}


def record(criterion: int, check: str, passed: bool, detail: str = "") -> bool:
    ACCEPTANCE.setdefault(criterion, []).append((check, bool(passed), detail))
    print(f"[criterion {criterion}] {'PASS' if passed else 'FAIL'} {check} {detail}".rstrip())
    return bool(passed)
