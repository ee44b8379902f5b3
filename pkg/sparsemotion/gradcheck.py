"""Central finite-difference verification of ``backward``.

``finite_diff_check`` compares analytic gradients from the tape against
``(f(p + eps) - f(p - eps)) / 2eps`` coordinate by coordinate. Large
parameters are sampled (seeded) rather than scanned exhaustively.

``run_suite`` evaluates every registered loss of the package on toy shapes at
64-bit precision; it backs the ``gradcheck`` CLI command.
"""

from __future__ import annotations

import logging
import time
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from sparsemotion.tensorcore import Tensor, backward, default_dtype, no_grad

logger = logging.getLogger(__name__)

# Relative error denominator floor; keeps near-zero gradients from inflating
# the ratio with pure roundoff.
REL_FLOOR = 1e-3


@dataclass
class GradCheckReport:
    per_param: dict[str, float]
    tolerance: float
    checked: int
    elapsed_s: float = 0.0

    @property
    def max_error(self) -> float:
        return max(self.per_param.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def worst(self) -> tuple[str, float] | None:
        if not self.per_param:
            return None
        name = max(self.per_param, key=self.per_param.__getitem__)
        return name, self.per_param[name]

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "max_error": self.max_error,
            "tolerance": self.tolerance,
            "checked": self.checked,
            "elapsed_s": round(self.elapsed_s, 3),
            "per_param": self.per_param,
        }


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor] | Sequence[Tensor],
    epsilon: float = 1e-5,
    tolerance: float = 1e-4,
    max_checks_per_param: int = 24,
    seed: int = 0,
) -> GradCheckReport:
    """Check analytic gradients of ``f`` against central differences.

    Args:
        f: Deterministic closure returning a scalar loss from the current
            parameter values.
        params: Parameters to check, by name or as a sequence.
        epsilon: Finite-difference step.
        tolerance: Pass threshold on the max relative error.
        max_checks_per_param: Coordinates sampled per parameter.
        seed: Seed for the coordinate sample.

    Returns:
        A report with the max relative error per parameter.
    """
    if not isinstance(params, Mapping):
        params = {p.name or f"param{i}": p for i, p in enumerate(params)}
    start = time.perf_counter()
    for p in params.values():
        p.zero_grad()
    backward(f())
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }

    rng = np.random.default_rng(seed)
    per_param: dict[str, float] = {}
    checked = 0
    with no_grad():
        for name, p in params.items():
            p.data = np.ascontiguousarray(p.data)
            flat = p.data.reshape(-1)
            n = flat.size
            coords = (
                np.arange(n)
                if n <= max_checks_per_param
                else rng.choice(n, size=max_checks_per_param, replace=False)
            )
            worst = 0.0
            for c in coords:
                original = flat[c]
                flat[c] = original + epsilon
                plus = f().item()
                flat[c] = original - epsilon
                minus = f().item()
                flat[c] = original
                numeric = (plus - minus) / (2.0 * epsilon)
                exact = float(analytic[name].reshape(-1)[c])
                denom = max(abs(exact), abs(numeric), REL_FLOOR)
                worst = max(worst, abs(exact - numeric) / denom)
                checked += 1
            per_param[name] = worst
    report = GradCheckReport(
        per_param=per_param,
        tolerance=tolerance,
        checked=checked,
        elapsed_s=time.perf_counter() - start,
    )
    if not report.passed:
        logger.warning("Gradient check failed: worst %s", report.worst())
    return report


@dataclass
class SuiteResult:
    reports: dict[str, GradCheckReport] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.reports.values())

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "losses": {name: r.to_dict() for name, r in self.reports.items()},
        }


def registered_checks() -> dict[str, Callable[[], tuple[Callable[[], Tensor], dict[str, Tensor]]]]:
    """Named builders returning ``(loss_closure, params)`` on toy shapes.

    Imports are local: the loss owners import this module's checker in
    their own tests.
    """
    from sparsemotion import interpnet, moe, trainer

    return {
        "cross_entropy_smoothed": _cross_entropy_case,
        "moe_load_balance": moe.gradcheck_case,
        "interp_velocity": lambda: interpnet.gradcheck_case("vel"),
        "interp_acceleration": lambda: interpnet.gradcheck_case("acc"),
        "interp_total": lambda: interpnet.gradcheck_case("interp"),
        "stage_pretrain": lambda: trainer.gradcheck_case("pretrain"),
        "stage_s1": lambda: trainer.gradcheck_case("s1"),
        "stage_s2": lambda: trainer.gradcheck_case("s2"),
    }


def _cross_entropy_case() -> tuple[Callable[[], Tensor], dict[str, Tensor]]:
    from sparsemotion.tensorcore import Parameter, cross_entropy

    rng = np.random.default_rng(3)
    logits = Parameter(rng.normal(size=(2, 3, 7)), name="logits")
    targets = rng.integers(0, 7, size=(2, 3))
    ignore = np.zeros((2, 3), dtype=bool)
    ignore[1, 2] = True
    return (
        lambda: cross_entropy(logits, targets, label_smoothing=0.1, ignore_mask=ignore).value,
        {"logits": logits},
    )


def run_suite(
    names: Sequence[str] | None = None,
    epsilon: float = 1e-5,
    tolerance: float = 1e-4,
) -> SuiteResult:
    """Run the registered gradient checks at 64-bit precision."""
    checks = registered_checks()
    selected = list(names) if names else list(checks)
    result = SuiteResult()
    with default_dtype(np.float64):
        for name in selected:
            loss_fn, params = checks[name]()
            report = finite_diff_check(loss_fn, params, epsilon=epsilon, tolerance=tolerance)
            logger.info(
                "gradcheck %s: max_rel_err=%.2e (%s)",
                name,
                report.max_error,
                "ok" if report.passed else "FAIL",
            )
            result.reports[name] = report
    return result
