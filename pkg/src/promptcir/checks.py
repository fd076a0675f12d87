"""Finite-difference verification suite for every differentiable block.

Each named check builds a small float64 instance of one block, runs a
scalar loss through it, and compares tape gradients against central
differences at randomly sampled coordinates of every parameter tensor plus
the input. Exposed both to tests and to the `gradcheck` CLI subcommand.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .blocks import GDFN, MDTA, TransformerBlock
from .hat import HAB, OCAB, RHAG
from .network import build, micro_config
from .prompt import PromptBank, PromptInteraction

BLOCK_TOLERANCE = 1e-4
MODEL_TOLERANCE = 1e-3


def _input(rng, shape):
    return T.Tensor(rng.normal(size=shape), requires_grad=True)


def _loss(module, x):
    return lambda: T.mean_(T.square(module(x)))


def _run(module, x, rng, max_coords=2):
    module.cast_(np.float64)
    wrt = [x] + [p for _, p in module.named_parameters()]
    return T.finite_difference_check(_loss(module, x), wrt,
                                     max_coords=max_coords, rng=rng)


def check_mdta(seed):
    rng = np.random.default_rng(seed)
    return _run(MDTA(rng, dim=4, heads=2), _input(rng, (1, 4, 6, 5)), rng)


def check_gdfn(seed):
    rng = np.random.default_rng(seed)
    return _run(GDFN(rng, dim=3), _input(rng, (1, 3, 5, 4)), rng)


def check_transformer_block(seed):
    rng = np.random.default_rng(seed)
    return _run(TransformerBlock(rng, dim=4, heads=2),
                _input(rng, (1, 4, 5, 6)), rng)


def check_hab(seed):
    rng = np.random.default_rng(seed)
    block = HAB(rng, dim=4, heads=2, window=4, shift=2)
    return _run(block, _input(rng, (1, 4, 8, 8)), rng)


def check_ocab(seed):
    rng = np.random.default_rng(seed)
    block = OCAB(rng, dim=4, heads=2, window=4, overlap_ratio=0.5)
    return _run(block, _input(rng, (1, 4, 8, 8)), rng)


def check_rhag(seed):
    rng = np.random.default_rng(seed)
    group = RHAG(rng, dim=4, heads=2, depth=2, window=4)
    return _run(group, _input(rng, (1, 4, 8, 8)), rng)


def check_dpm(seed):
    rng = np.random.default_rng(seed)
    return _run(PromptBank(rng, in_channels=3, n_bases=3, prompt_dim=4),
                _input(rng, (1, 3, 5, 6)), rng)


def check_pim(seed):
    rng = np.random.default_rng(seed)
    inter = PromptInteraction(rng, channels=4, prompt_dim=4, heads=2)
    inter.cast_(np.float64)
    feat = _input(rng, (1, 4, 5, 5))
    prompt = _input(rng, (1, 4, 5, 5))
    wrt = [feat, prompt] + [p for _, p in inter.named_parameters()]
    return T.finite_difference_check(
        lambda: T.mean_(T.square(inter(feat, prompt))), wrt, max_coords=2,
        rng=rng)


def check_micro_model(seed):
    rng = np.random.default_rng(seed)
    model = build(micro_config(), seed=seed)
    model.cast_(np.float64)
    x = T.Tensor(rng.uniform(0.2, 0.8, size=(1, 3, 16, 16)),
                 requires_grad=True)
    target = T.Tensor(rng.uniform(0.0, 1.0, size=(1, 3, 16, 16)))
    wrt = [x, model.embed.weight, model.head.weight, model.head.bias,
           model.prompt1.gen.bases, model.prompt3.gen.weight_generator.weight,
           model.up2.conv.weight, model.reduce1.weight,
           model.down3.conv.weight]
    return T.finite_difference_check(
        lambda: T.mean_(T.abs_(model(x, training=True) - target)), wrt,
        max_coords=2, rng=rng)


CHECKS = {
    "mdta": (check_mdta, BLOCK_TOLERANCE),
    "gdfn": (check_gdfn, BLOCK_TOLERANCE),
    "transformer_block": (check_transformer_block, BLOCK_TOLERANCE),
    "hab": (check_hab, BLOCK_TOLERANCE),
    "ocab": (check_ocab, BLOCK_TOLERANCE),
    "rhag": (check_rhag, BLOCK_TOLERANCE),
    "dpm": (check_dpm, BLOCK_TOLERANCE),
    "pim": (check_pim, BLOCK_TOLERANCE),
    "micro_model": (check_micro_model, MODEL_TOLERANCE),
}


def run_gradchecks(modules=None, seeds=10, log=None):
    """Run the suite. Returns a list of result dicts, one per (module, seed)."""
    names = list(CHECKS) if modules is None else list(modules)
    unknown = [n for n in names if n not in CHECKS]
    if unknown:
        raise ValueError(f"unknown gradcheck module(s) {unknown}; "
                         f"available: {sorted(CHECKS)}")
    results = []
    for name in names:
        fn, tol = CHECKS[name]
        for seed in range(seeds):
            err = fn(seed)
            ok = err < tol
            results.append({"module": name, "seed": seed, "error": err,
                            "tolerance": tol, "ok": ok})
            if log is not None:
                log(f"{name:>18} seed {seed}  rel err {err:.3e}  "
                    f"tol {tol:.0e}  {'ok' if ok else 'FAIL'}")
    return results


def all_ok(results):
    return all(r["ok"] for r in results)
