"""Gradient verification harness behind the grad-check CLI command.

Three scopes: the raw simulator's parameter-shift derivatives, the bottleneck
composite, and a reduced full model, each compared against central finite
differences at the tolerances contracted for that scope.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import quanv
from .layers import softmax_cross_entropy
from .model import HybridUNet, ModelConfig
from .qsim import GateOp, expectations, parameter_shift_grad, run_circuit
from .tensor import Tensor


@dataclass
class CheckResult:
    name: str
    passed: bool
    max_err: float
    tolerance: float
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: max err {self.max_err:.3e} (tolerance {self.tolerance:.0e}) {self.detail}".rstrip()


def _fd_expectation_grad(num_qubits, gates, obs, index, h=1e-6):
    out = []
    for shift in (h, -h):
        shifted = list(gates)
        g = gates[index]
        shifted[index] = GateOp(g.kind, g.qubits, g.angle + shift)
        out.append(expectations(run_circuit(num_qubits, shifted), obs))
    return (out[0] - out[1]) / (2 * h)


def check_qsim(seed: int = 0, circuits: int = 20, tol: float = 1e-6) -> CheckResult:
    """Parameter-shift vs finite differences on random small circuits."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(circuits):
        n = int(rng.integers(1, 5))
        gates = []
        for _ in range(int(rng.integers(3, 10))):
            kind = ("RX", "RY", "RZ", "CNOT")[rng.integers(0, 4 if n > 1 else 3)]
            if kind == "CNOT":
                c, t = rng.choice(n, size=2, replace=False)
                gates.append(GateOp("CNOT", (int(c), int(t))))
            else:
                gates.append(GateOp(kind, (int(rng.integers(0, n)),), float(rng.uniform(-np.pi, np.pi))))
        obs = [("Z", q) for q in range(n)] + [("X", q) for q in range(n)]
        for i, g in enumerate(gates):
            if not g.is_rotation:
                continue
            ps = parameter_shift_grad(n, gates, obs, i)
            fd = _fd_expectation_grad(n, gates, obs, i)
            worst = max(worst, float(np.abs(ps - fd).max()))
    return CheckResult("qsim parameter-shift vs finite differences", worst < tol, worst, tol)


def _rel_err(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-7) -> float:
    denom = np.maximum(np.abs(numeric), floor / 1e-4)
    return float((np.abs(analytic - numeric) / np.maximum(denom, 1e-300)).max())


def _max_mismatch(analytic, numeric, rel_tol=1e-4, abs_floor=1e-7):
    """Largest violation ratio of |a-n| <= max(abs_floor, rel_tol*|n|)."""
    tol = np.maximum(abs_floor, rel_tol * np.abs(numeric))
    return float((np.abs(analytic - numeric) / tol).max())


def check_bottleneck(seed: int = 0, tol: float = 1e-4) -> CheckResult:
    """Autodiff + parameter-shift backward of the bottleneck vs finite
    differences over every trainable parameter and the input."""
    rng = np.random.default_rng(seed)
    n, c, h, w = 2, 6, 4, 4
    params = quanv.QuanvParams.create(c, h, w, rng)
    x = Tensor(rng.normal(0, 0.5, (n, c, h, w)), requires_grad=True)
    readout = Tensor(rng.normal(0, 1.0, (n, c, h, w)))

    def loss_value() -> float:
        out = quanv.quantum_bottleneck(x, params)
        return (out * readout).sum().item()

    out = quanv.quantum_bottleneck(x, params)
    loss = (out * readout).sum()
    loss.backward()

    targets = [
        ("input", x),
        ("circuit_angles", params.circuit_angles),
        ("pre.kernel", params.pre_conv.kernel),
        ("pre.bias", params.pre_conv.bias),
        ("post.weight", params.post_weight),
        ("post.bias", params.post_bias),
    ]
    worst = 0.0
    hstep = 1e-5
    for name, t in targets:
        flat = t.data.reshape(-1)
        fd = np.empty_like(flat)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + hstep
            up = loss_value()
            flat[i] = keep - hstep
            dn = loss_value()
            flat[i] = keep
            fd[i] = (up - dn) / (2 * hstep)
        worst = max(worst, _max_mismatch(t.grad.reshape(-1), fd))
    return CheckResult(
        "bottleneck end-to-end gradients vs finite differences",
        worst < 1.0,
        worst,
        1.0,
        detail=f"(violation ratio of rel {tol:.0e} / abs floor 1e-7)",
    )


def check_model(seed: int = 0, max_params: int | None = None) -> CheckResult:
    """Reduced model (16x16 input, width 2, 2 down blocks, quantum
    bottleneck): every parameter gradient vs finite differences."""
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(base_width=2, depth=2, input_size=16, num_classes=3, bottleneck="quantum")
    model = HybridUNet(cfg, seed=seed)
    images = rng.uniform(0, 1, (2, 3, 16, 16))
    masks = rng.integers(0, cfg.num_classes, (2, 16, 16))

    def loss_value() -> float:
        logits = model.forward(Tensor(images), training=True, update_stats=False)
        return softmax_cross_entropy(logits, masks).item()

    logits = model.forward(Tensor(images), training=True, update_stats=False)
    loss = softmax_cross_entropy(logits, masks)
    loss.backward()

    worst = 0.0
    hstep = 1e-6  # keeps ReLU/pool kink crossings out of the FD interval
    checked = 0
    for name, t in model.named_parameters():
        flat = t.data.reshape(-1)
        grads = t.grad.reshape(-1)
        for i in range(flat.size):
            if max_params is not None and checked >= max_params:
                break
            keep = flat[i]
            flat[i] = keep + hstep
            up = loss_value()
            flat[i] = keep - hstep
            dn = loss_value()
            flat[i] = keep
            fd = (up - dn) / (2 * hstep)
            worst = max(worst, _max_mismatch(np.array([grads[i]]), np.array([fd])))
            checked += 1
    return CheckResult(
        "reduced-model gradients vs finite differences",
        worst < 1.0,
        worst,
        1.0,
        detail=f"({checked} parameters, violation ratio of rel 1e-4 / abs floor 1e-7)",
    )


def run_scope(scope: str, seed: int = 0) -> list[CheckResult]:
    if scope == "qsim":
        return [check_qsim(seed)]
    if scope == "bottleneck":
        return [check_bottleneck(seed)]
    if scope == "model":
        return [check_model(seed)]
    raise ValueError(f"unknown grad-check scope {scope!r} (expected qsim, bottleneck or model)")
