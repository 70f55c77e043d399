"""Finite-difference gradient suite run by ``lstsd gradcheck`` and the acceptance tests."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .distill import TeacherStore, assemble_loss
from .models import ModelArch, forward, init_params

TOLERANCE = 1e-5


@dataclass(frozen=True)
class CheckResult:
    name: str
    max_rel_error: float
    coords: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def _leaf(rng, *shape, scale=1.0) -> ad.Tensor:
    return ad.Tensor(rng.normal(size=shape) * scale, requires_grad=True)


def _ops(rng) -> list[tuple[str, object, list[ad.Tensor]]]:
    a, b = _leaf(rng, 3, 4), _leaf(rng, 4, 2)
    x, w, bias = _leaf(rng, 2, 2, 5, 5), _leaf(rng, 3, 2, 3, 3), _leaf(rng, 3)
    pool_in = _leaf(rng, 2, 2, 4, 6)
    r = _leaf(rng, 5, 4)
    # keep relu inputs away from the kink
    r.data[np.abs(r.data) < 0.05] += 0.1
    logits = _leaf(rng, 4, 5)
    labels = rng.integers(0, 5, 4)
    teacher = ad.softmax_t(rng.normal(size=(4, 5)), 2.0).data
    proj = {k: rng.normal(size=s) for k, s in {"mm": (3, 2), "conv": (2, 3, 3, 3), "pool": (2, 2, 2, 3), "relu": (5, 4), "sm": (4, 5)}.items()}
    return [
        ("matmul", lambda: (ad.matmul(a, b) * proj["mm"]).sum(), [a, b]),
        ("conv2d", lambda: (ad.conv2d(x, w, stride=2, pad=1, bias=bias) * proj["conv"]).sum(), [x, w, bias]),
        ("maxpool2d", lambda: (ad.maxpool2d(pool_in) * proj["pool"]).sum(), [pool_in]),
        ("relu", lambda: (ad.relu(r) * proj["relu"]).sum(), [r]),
        ("softmax_t", lambda: (ad.softmax_t(logits, 2.0) * proj["sm"]).sum(), [logits]),
        ("log_softmax_t", lambda: (ad.log_softmax_t(logits, 2.0) * proj["sm"]).sum(), [logits]),
        ("cross_entropy", lambda: ad.cross_entropy(logits, labels), [logits]),
        ("kl_divergence", lambda: ad.kl_divergence(logits, teacher, 2.0), [logits]),
        ("kl_divergence_reverse", lambda: ad.kl_divergence(logits, teacher, 2.0, reverse=True), [logits]),
    ]


def lstsd_objective_check(seed: int = 0, instances: int = 2) -> CheckResult:
    """Full CE + long/short KL objective on an MLP(2-16-3) in mini-generation 2.

    The network has 99 parameters, so every coordinate is checked on each of
    ``instances`` independent draws of inputs, teachers and initialisation.
    """
    arch = ModelArch("mlp", (2,), 3, (16,))
    worst, coords = 0.0, 0
    for k in range(instances):
        rng = np.random.default_rng([seed, k])
        params = init_params(arch, seed * 1000 + k)
        x = rng.normal(size=(8, 2))
        y = rng.integers(0, 3, 8)
        ids = np.arange(8)
        store = TeacherStore(8, 3)
        store.record_short(ids, rng.normal(size=(8, 3)))
        store.record_long(ids, rng.normal(size=(8, 3)), final_epoch=True)
        leaves = list(params.values())

        def loss():
            return assemble_loss(forward(params, arch, x), y, store, ids, 2.4, 4.0, 2.0, mini_gen_index=2)[0]

        worst = max(worst, ad.gradcheck(loss, leaves))
        coords += params.count
    return CheckResult("lstsd_objective_mlp_2_16_3", worst, coords)


def run_suite(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    for name, fn, leaves in _ops(rng):
        err = ad.gradcheck(fn, leaves)
        results.append(CheckResult(name, err, sum(t.data.size for t in leaves)))
    results.append(lstsd_objective_check(seed))
    return results


def main() -> int:
    start = time.perf_counter()
    results = run_suite()
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<28} max rel err {r.max_rel_error:.3e} over {r.coords} coords")
    print(f"{len(results)} checks in {time.perf_counter() - start:.2f}s")
    return 0 if all(r.passed for r in results) else 1
