"""Random-case equivalence between the training backend and the reference
convolutions. Exercised by the test suite and the verify-backend CLI."""

from __future__ import annotations

import numpy as np
import torch

from . import convref
from .archzoo import StandardBlock


def _rand_case(rng):
    n = int(rng.integers(1, 3))
    c = int(rng.integers(1, 6))
    h = int(rng.integers(4, 9))
    w = int(rng.integers(4, 9))
    k = int(rng.choice([3, 5, 7]))
    stride = int(rng.integers(1, 3))
    padding = int(rng.integers(0, k // 2 + 1))
    if k > h + 2 * padding or k > w + 2 * padding:
        padding = k // 2
    return n, c, h, w, k, stride, padding


def run_equivalence(cases: int = 100, seed: int = 0, block_cases: int = 10) -> dict:
    """Compare backend depthwise/pointwise layers and the composed block
    against the brute-force references on random shapes and seeds.

    Returns max absolute deviations; the backend runs in its native float32
    while the reference accumulates in float64.
    """
    rng = np.random.default_rng(seed)
    max_dw = 0.0
    max_pw = 0.0
    for _ in range(cases):
        n, c, h, w, k, stride, padding = _rand_case(rng)
        x = rng.standard_normal((n, c, h, w)).astype(np.float32)
        conv = torch.nn.Conv2d(c, c, k, stride=stride, padding=padding, groups=c)
        with torch.no_grad():
            torch.nn.init.normal_(conv.weight, std=0.5)
            torch.nn.init.normal_(conv.bias, std=0.5)
            got = conv(torch.from_numpy(x)).numpy()
        want = convref.depthwise_conv_ref(
            x,
            conv.weight.detach().numpy()[:, 0],
            stride=stride,
            padding=padding,
            bias=conv.bias.detach().numpy(),
        )
        max_dw = max(max_dw, float(np.abs(got - want).max()))

        c_out = int(rng.integers(1, 7))
        lin = torch.nn.Linear(c, c_out)
        with torch.no_grad():
            torch.nn.init.normal_(lin.weight, std=0.5)
            torch.nn.init.normal_(lin.bias, std=0.5)
            got = lin(torch.from_numpy(x).permute(0, 2, 3, 1)).permute(0, 3, 1, 2).numpy()
        want = convref.pointwise_conv_ref(
            x, lin.weight.detach().numpy(), bias=lin.bias.detach().numpy()
        )
        max_pw = max(max_pw, float(np.abs(got - want).max()))

    max_block = 0.0
    for _ in range(block_cases):
        c = int(rng.integers(2, 9))
        k = int(rng.choice([3, 5, 7]))
        h = int(rng.integers(k, k + 4))
        x = rng.standard_normal((1, c, h, h)).astype(np.float32)
        block = StandardBlock(c, k)
        with torch.no_grad():
            for p in block.parameters():
                p.normal_(std=0.3, generator=torch.Generator().manual_seed(int(rng.integers(1 << 31))))
            got = block(torch.from_numpy(x)).numpy()
        want = convref.ds_block_ref(
            x,
            block.dwconv.weight.detach().numpy()[:, 0],
            block.pw_expand.weight.detach().numpy(),
            block.pw_project.weight.detach().numpy(),
            dw_bias=block.dwconv.bias.detach().numpy(),
            b1=block.pw_expand.bias.detach().numpy(),
            b2=block.pw_project.bias.detach().numpy(),
            norm_gamma=block.norm.weight.detach().numpy(),
            norm_beta=block.norm.bias.detach().numpy(),
            eps=block.norm.eps,
        )
        max_block = max(max_block, float(np.abs(got - want).max()))

    return {
        "cases": cases,
        "block_cases": block_cases,
        "max_abs_depthwise": max_dw,
        "max_abs_pointwise": max_pw,
        "max_abs_block": max_block,
    }
