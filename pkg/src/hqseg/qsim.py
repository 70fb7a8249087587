"""Noiseless dense statevector simulator for up to 16 qubits.

Conventions, pinned for reproducibility and for the matrix oracles in the
test suite:

* qubit 0 is the least-significant bit of the basis-state index;
* rotations use the half-angle convention R_A(theta) = exp(-i*theta*A/2),
  e.g. RY(theta) = [[cos t/2, -sin t/2], [sin t/2, cos t/2]];
* gates update the 2^n amplitudes in place, one gate at a time; full unitary
  materialization is left to the test oracles.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

MAX_QUBITS = 16

ROTATION_KINDS = ("RX", "RY", "RZ")
GATE_KINDS = ROTATION_KINDS + ("CNOT",)


@dataclass(frozen=True)
class GateOp:
    """One circuit operation: a rotation (single target, angle) or a CNOT."""

    kind: str
    qubits: tuple[int, ...]
    angle: float | None = None

    def __post_init__(self):
        if self.kind not in GATE_KINDS:
            raise ValueError(f"unknown gate kind {self.kind!r}")
        if self.kind == "CNOT":
            if len(self.qubits) != 2:
                raise ValueError(f"CNOT needs (control, target), got {self.qubits}")
            if self.angle is not None:
                raise ValueError("CNOT takes no angle")
        else:
            if len(self.qubits) != 1:
                raise ValueError(f"{self.kind} acts on one qubit, got {self.qubits}")
            if self.angle is None:
                raise ValueError(f"{self.kind} requires an angle")

    @property
    def is_rotation(self) -> bool:
        return self.kind in ROTATION_KINDS


class StateVector:
    """2^n complex amplitudes over n qubits, starting in |0...0>."""

    def __init__(self, num_qubits: int, amps: np.ndarray | None = None):
        if not 1 <= num_qubits <= MAX_QUBITS:
            raise ValueError(f"num_qubits must be in [1,{MAX_QUBITS}], got {num_qubits}")
        self.num_qubits = num_qubits
        dim = 1 << num_qubits
        if amps is None:
            self.amps = np.zeros(dim, dtype=np.complex128)
            self.amps[0] = 1.0
        else:
            amps = np.asarray(amps, dtype=np.complex128)
            if amps.shape != (dim,):
                raise ValueError(f"amplitude array must have shape ({dim},), got {amps.shape}")
            self.amps = amps.copy()

    def copy(self) -> "StateVector":
        return StateVector(self.num_qubits, self.amps)

    def norm_error(self) -> float:
        return abs(1.0 - float(np.sum(np.abs(self.amps) ** 2)))

    def _check_qubit(self, q: int) -> None:
        if not 0 <= q < self.num_qubits:
            raise ValueError(f"qubit index {q} out of range for {self.num_qubits} qubits")

    def apply_rotation(self, axis: str, q: int, theta: float) -> "StateVector":
        """Apply RX/RY/RZ(theta) to qubit q in place."""
        self._check_qubit(q)
        half = 0.5 * theta
        view = self.amps.reshape(-1, 2, 1 << q)
        if axis == "Z":
            view[:, 0, :] *= np.exp(-1j * half)
            view[:, 1, :] *= np.exp(1j * half)
            return self
        c, s = np.cos(half), np.sin(half)
        a0 = view[:, 0, :].copy()
        a1 = view[:, 1, :]
        if axis == "X":
            view[:, 0, :] = c * a0 - 1j * s * a1
            view[:, 1, :] = -1j * s * a0 + c * a1
        elif axis == "Y":
            view[:, 0, :] = c * a0 - s * a1
            view[:, 1, :] = s * a0 + c * a1
        else:
            raise ValueError(f"rotation axis must be X, Y or Z, got {axis!r}")
        return self

    def apply_cnot(self, control: int, target: int) -> "StateVector":
        """Swap amplitudes of basis states differing in the target bit
        wherever the control bit is set."""
        self._check_qubit(control)
        self._check_qubit(target)
        if control == target:
            raise ValueError(f"CNOT control and target must differ, both are {control}")
        n = self.num_qubits
        view = self.amps.reshape([2] * n)  # axis k <-> qubit n-1-k
        ac, at = n - 1 - control, n - 1 - target
        sel0 = [slice(None)] * n
        sel1 = [slice(None)] * n
        sel0[ac] = sel1[ac] = 1
        sel0[at], sel1[at] = 0, 1
        tmp = view[tuple(sel0)].copy()
        view[tuple(sel0)] = view[tuple(sel1)]
        view[tuple(sel1)] = tmp
        return self

    def apply(self, gate: GateOp) -> "StateVector":
        if gate.kind == "CNOT":
            return self.apply_cnot(gate.qubits[0], gate.qubits[1])
        return self.apply_rotation(gate.kind[1], gate.qubits[0], gate.angle)

    def expectation(self, basis: str, q: int) -> float:
        """Exact <Z_q> or <X_q>; always in [-1, 1]."""
        self._check_qubit(q)
        view = self.amps.reshape(-1, 2, 1 << q)
        if basis == "Z":
            p0 = float(np.sum(np.abs(view[:, 0, :]) ** 2))
            p1 = float(np.sum(np.abs(view[:, 1, :]) ** 2))
            return p0 - p1
        if basis == "X":
            return 2.0 * float(np.sum(np.conj(view[:, 0, :]) * view[:, 1, :]).real)
        raise ValueError(f"measurement basis must be Z or X, got {basis!r}")


def run_circuit(
    num_qubits: int, gates: Iterable[GateOp], init: StateVector | None = None
) -> StateVector:
    """Apply gates in order, starting from |0...0> or a copy of ``init``."""
    state = StateVector(num_qubits) if init is None else init.copy()
    for gate in gates:
        state.apply(gate)
    return state


def expectations(state: StateVector, observables: Sequence[tuple[str, int]]) -> np.ndarray:
    return np.array([state.expectation(basis, q) for basis, q in observables])


def parameter_shift_grad(
    num_qubits: int,
    gates: Sequence[GateOp],
    observables: Sequence[tuple[str, int]],
    param_index: int,
    init: StateVector | None = None,
) -> np.ndarray:
    """d<O>/d(angle of gates[param_index]) for every observable, via the exact
    parameter-shift rule: (<O>(theta+pi/2) - <O>(theta-pi/2)) / 2."""
    gate = gates[param_index]
    if not gate.is_rotation:
        raise ValueError(
            f"parameter index {param_index} is a {gate.kind}, not a rotation angle"
        )
    shifted = list(gates)
    results = []
    for shift in (np.pi / 2, -np.pi / 2):
        shifted[param_index] = GateOp(gate.kind, gate.qubits, gate.angle + shift)
        state = run_circuit(num_qubits, shifted, init)
        results.append(expectations(state, observables))
    return (results[0] - results[1]) / 2.0


def circuit_text(gates: Iterable[GateOp]) -> str:
    """One line per gate: 'RX q3 angle=...' or 'CNOT q0 q1'."""
    lines = []
    for g in gates:
        if g.kind == "CNOT":
            lines.append(f"CNOT q{g.qubits[0]} q{g.qubits[1]}")
        else:
            lines.append(f"{g.kind} q{g.qubits[0]} angle={g.angle:+.12f}")
    return "\n".join(lines)
