"""Central finite-difference checks of every loss operation's autograd gradient."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np
import torch

from . import losses

STEP = 1e-4
TOLERANCE = 1e-3
_GRAD_FLOOR = 1e-6
# keep the variance hinge and probabilities away from kinks/clamps the step could cross
_HINGE_MARGIN = 1e-2


@dataclass
class GradcheckResult:
    operation: str
    instances: int
    max_relative_error: float

    @property
    def passed(self) -> bool:
        return self.max_relative_error < TOLERANCE


def numeric_gradients(fn: Callable[..., torch.Tensor], inputs: Sequence[torch.Tensor],
                      step: float = STEP) -> List[torch.Tensor]:
    grads = []
    for x in inputs:
        g = torch.zeros_like(x)
        flat, gflat = x.view(-1), g.view(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + step
            up = fn(*inputs).item()
            flat[i] = orig - step
            down = fn(*inputs).item()
            flat[i] = orig
            gflat[i] = (up - down) / (2 * step)
        grads.append(g)
    return grads


def analytic_gradients(fn: Callable[..., torch.Tensor], inputs: Sequence[torch.Tensor]) -> List[torch.Tensor]:
    leaves = [x.detach().clone().requires_grad_(True) for x in inputs]
    return list(torch.autograd.grad(fn(*leaves), leaves, allow_unused=True, materialize_grads=True))


def relative_error(analytic: Sequence[torch.Tensor], numeric: Sequence[torch.Tensor]) -> float:
    a = torch.cat([g.reshape(-1) for g in analytic])
    n = torch.cat([g.reshape(-1) for g in numeric])
    denom = max(a.norm().item(), n.norm().item(), _GRAD_FLOOR)
    return (a - n).norm().item() / denom


def check(fn: Callable[..., torch.Tensor], inputs: Sequence[torch.Tensor], step: float = STEP) -> float:
    inputs = [x.detach().clone().to(torch.float64) for x in inputs]
    with torch.no_grad():
        numeric = numeric_gradients(fn, inputs, step)
    return relative_error(analytic_gradients(fn, inputs), numeric)


# ---------------------------------------------------------------------------
# random instances

W = losses.LossWeights()


def _matrix(rng: np.random.Generator, b: int, f: int) -> torch.Tensor:
    scale = rng.uniform(0.2, 2.0)
    return torch.from_numpy(scale * rng.standard_normal((b, f)) + rng.standard_normal(f))


def _probs(rng: np.random.Generator, b: int) -> torch.Tensor:
    return torch.from_numpy(rng.uniform(0.05, 0.95, size=b))


def _hinge_safe(z: torch.Tensor) -> bool:
    std = torch.sqrt(z.var(dim=0, unbiased=W.unbiased_variance) + W.epsilon)
    return bool(((W.gamma - std).abs() > _HINGE_MARGIN).all())


def _draw(rng: np.random.Generator, op: str) -> Tuple[Callable, List[torch.Tensor]]:
    b = int(rng.integers(2, 9))
    f = int(rng.integers(1, 7))
    if op == "invariance":
        return losses.invariance_term, [_matrix(rng, b, f), _matrix(rng, b, f)]
    if op == "variance":
        while True:
            z = _matrix(rng, b, f)
            if _hinge_safe(z):
                return (lambda z: losses.variance_term(z, W.gamma, W.epsilon, W.unbiased_variance)), [z]
    if op == "covariance":
        return losses.covariance_term, [_matrix(rng, b, f)]
    if op in ("corr_pos", "corr_neg"):
        return losses.diagonal_correlation, [_matrix(rng, b, f), _matrix(rng, b, f)]
    if op == "tnc":
        def tnc(dp, dn, yt, yl, yk):
            return losses.tnc_loss(dp, dn, yt, yl, yk, W, "modified").total

        return tnc, [_probs(rng, b), _probs(rng, b), _matrix(rng, b, f), _matrix(rng, b, f), _matrix(rng, b, f)]
    if op == "vnibcreg":
        fz = int(rng.integers(1, 7))

        def total(zt, zl, yt, yl, yk, dp, dn):
            return losses.vnibcreg_loss(zt, zl, yt, yl, yk, dp, dn, W, "modified").total

        while True:
            zt, zl = _matrix(rng, b, fz), _matrix(rng, b, fz)
            if _hinge_safe(zt) and _hinge_safe(zl):
                break
        return total, [zt, zl, _matrix(rng, b, f), _matrix(rng, b, f), _matrix(rng, b, f),
                       _probs(rng, b), _probs(rng, b)]
    raise ValueError(f"unknown operation {op!r}")


OPERATIONS: Dict[str, str] = {
    "invariance": "s(Z_t, Z_l)",
    "variance": "v(Z)",
    "covariance": "c(Z)",
    "corr_pos": "c_p(Y_t, Y_l)",
    "corr_neg": "c_n(Y_t, Y_k)",
    "tnc": "L_tnc (modified)",
    "vnibcreg": "L_vnibcreg",
}


def run_suite(instances: int = 100, seed: int = 0, step: float = STEP) -> List[GradcheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    for op in OPERATIONS:
        worst = 0.0
        for _ in range(instances):
            fn, inputs = _draw(rng, op)
            worst = max(worst, check(fn, inputs, step))
        results.append(GradcheckResult(op, instances, worst))
    return results


def format_table(results: Sequence[GradcheckResult]) -> str:
    lines = [f"{'operation':<22} {'instances':>9} {'max rel err':>12}  status"]
    for r in results:
        lines.append(f"{OPERATIONS[r.operation]:<22} {r.instances:>9} {r.max_relative_error:>12.3e}  "
                     f"{'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
