"""Quantum bottleneck: pre-quantum interface, rotation encoding, two-pass
separable quanvolution with a shared-parameter 2-qubit filter, multi-basis
measurement and the post-quantum remap. Differentiable end to end.

The 4x4 feature grid maps to 16 qubits, qubit index = 4*row + col. The filter

    F(theta, phi) = [RY(phi1) x RY(phi2)] . CNOT . [RY(theta1) x RY(theta2)]

is applied along every row (row filter) and then down every column (column
filter), each pass reusing its own 4 angles, for 8 trainable angles total.

Two equivalent evaluation routes exist:

* the statevector route (:func:`encode`, :func:`quanvolve`,
  :func:`measure_multibasis`) applies gates to the dense 2^16 amplitude
  vector via :mod:`hqseg.qsim` — the reference semantics;
* a fast factorized route used by training. Row-pass applications touch
  disjoint row quartets and column-pass applications disjoint column
  quartets, and every observable is single-qubit, so expectations reduce
  exactly to 4-qubit row states, per-qubit reduced density matrices and
  4-qubit column density evolution. The test suite pins both routes
  together to 1e-12.

Gradients of the 8 shared filter angles and the 48 encoding angles use the
parameter-shift rule, shifting every occurrence of a shared angle separately
and summing, exactly as hardware execution would require.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import Conv2dParams, adaptive_average_pool, conv2d, linear
from .qsim import GateOp, StateVector
from .tensor import Tensor

GRID = 4
NUM_QUBITS = GRID * GRID
NUM_FILTER_ANGLES = 8
NUM_ENCODING_ANGLES = NUM_QUBITS * 3
MEASUREMENT_DIM = 2 * NUM_QUBITS

LAYOUTS = ("chain", "disjoint")

OBSERVABLES: list[tuple[str, int]] = [("Z", q) for q in range(NUM_QUBITS)] + [
    ("X", q) for q in range(NUM_QUBITS)
]

_CNOT_LOW_CONTROL = np.eye(4, dtype=np.complex128)[[0, 3, 2, 1]]


def qubit_index(row: int, col: int) -> int:
    return GRID * row + col


def pair_offsets(layout: str) -> tuple[int, ...]:
    """Start offsets of the 2-qubit pairs along a line of 4 qubits."""
    if layout == "chain":
        return (0, 1, 2)
    if layout == "disjoint":
        return (0, 2)
    raise ValueError(f"filter layout must be one of {LAYOUTS}, got {layout!r}")


def filter_schedule(layout: str = "chain") -> list[tuple[int, int, int]]:
    """(qa, qb, filter_id) triples in application order: the row pass
    (filter 0) sweeps each row left to right, then the column pass
    (filter 1) sweeps each column top to bottom."""
    offs = pair_offsets(layout)
    sched = []
    for r in range(GRID):
        for c in offs:
            sched.append((qubit_index(r, c), qubit_index(r, c + 1), 0))
    for c in range(GRID):
        for r in offs:
            sched.append((qubit_index(r, c), qubit_index(r + 1, c), 1))
    return sched


# --------------------------------------------------------------------------
# statevector route (reference semantics)
# --------------------------------------------------------------------------


def _check_features(features: np.ndarray) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    if features.shape != (3, GRID, GRID):
        raise ValueError(f"encode expects features [3,{GRID},{GRID}], got {features.shape}")
    if np.abs(features).max() > 1.0:
        bad = float(features.flat[np.abs(features).argmax()])
        raise ValueError(f"encoded feature {bad} outside [-1, 1]")
    return features


def encoding_gates(features: np.ndarray) -> list[GateOp]:
    """48 rotations: per grid cell (r,c), RX(pi*f1), RY(pi*f2), RZ(pi*f3)
    on qubit 4r+c."""
    features = _check_features(features)
    gates = []
    for r in range(GRID):
        for c in range(GRID):
            q = qubit_index(r, c)
            for kind, ch in (("RX", 0), ("RY", 1), ("RZ", 2)):
                gates.append(GateOp(kind, (q,), np.pi * features[ch, r, c]))
    return gates


def encode(features: np.ndarray) -> StateVector:
    """Map a [3,4,4] feature grid in [-1,1] onto the 16-qubit register."""
    state = StateVector(NUM_QUBITS)
    for gate in encoding_gates(features):
        state.apply(gate)
    return state


def filter_gates(qa: int, qb: int, theta, phi) -> list[GateOp]:
    t1, t2 = (float(v) for v in theta)
    p1, p2 = (float(v) for v in phi)
    return [
        GateOp("RY", (qa,), t1),
        GateOp("RY", (qb,), t2),
        GateOp("CNOT", (qa, qb)),
        GateOp("RY", (qa,), p1),
        GateOp("RY", (qb,), p2),
    ]


def apply_filter_F(state: StateVector, qa: int, qb: int, theta, phi) -> StateVector:
    """Apply the 2-qubit filter: RY(theta1) on qa and RY(theta2) on qb, CNOT
    with control qa, then RY(phi1) on qa and RY(phi2) on qb."""
    if qa == qb:
        raise ValueError(f"filter qubits must differ, both are {qa}")
    for gate in filter_gates(qa, qb, theta, phi):
        state.apply(gate)
    return state


def quanv_gates(filter_angles: np.ndarray, layout: str = "chain") -> list[GateOp]:
    """Gate list of the full two-pass quanvolution (5 gates per application)."""
    a = np.asarray(filter_angles, dtype=np.float64)
    if a.shape != (NUM_FILTER_ANGLES,):
        raise ValueError(f"filter angles must have shape (8,), got {a.shape}")
    gates = []
    for qa, qb, f in filter_schedule(layout):
        gates.extend(filter_gates(qa, qb, a[4 * f : 4 * f + 2], a[4 * f + 2 : 4 * f + 4]))
    return gates


def quanvolve(state: StateVector, filter_angles: np.ndarray, layout: str = "chain") -> StateVector:
    """Run the row pass then the column pass over a 16-qubit state."""
    if state.num_qubits != NUM_QUBITS:
        raise ValueError(f"quanvolve needs {NUM_QUBITS} qubits, got {state.num_qubits}")
    for gate in quanv_gates(filter_angles, layout):
        state.apply(gate)
    return state


def measure_multibasis(state: StateVector) -> np.ndarray:
    """[<Z_0>..<Z_15>, <X_0>..<X_15>] as a length-32 float vector."""
    if state.num_qubits != NUM_QUBITS:
        raise ValueError(f"multi-basis readout needs {NUM_QUBITS} qubits, got {state.num_qubits}")
    out = np.empty(MEASUREMENT_DIM)
    for q in range(NUM_QUBITS):
        out[q] = state.expectation("Z", q)
        out[NUM_QUBITS + q] = state.expectation("X", q)
    return out


def bottleneck_gates(features: np.ndarray, filter_angles: np.ndarray, layout: str = "chain") -> list[GateOp]:
    """Full circuit: 48 encoding rotations followed by the quanvolution."""
    return encoding_gates(features) + quanv_gates(filter_angles, layout)


def measure_statevector_route(
    features: np.ndarray, filter_angles: np.ndarray, layout: str = "chain"
) -> np.ndarray:
    """Reference evaluation through the dense simulator."""
    state = encode(features)
    quanvolve(state, filter_angles, layout)
    return measure_multibasis(state)


# --------------------------------------------------------------------------
# factorized fast route
# --------------------------------------------------------------------------


def _ry_stack(theta: np.ndarray) -> np.ndarray:
    """[..., 2, 2] RY matrices for an angle array."""
    c, s = np.cos(theta / 2), np.sin(theta / 2)
    out = np.empty(theta.shape + (2, 2), dtype=np.complex128)
    out[..., 0, 0] = c
    out[..., 0, 1] = -s
    out[..., 1, 0] = s
    out[..., 1, 1] = c
    return out


def _filter_matrices(slots: np.ndarray) -> np.ndarray:
    """Fused 4x4 filter unitaries from slot angles [..., 4] =
    (theta1, theta2, phi1, phi2); the pair's first qubit is the low bit."""
    t1 = _ry_stack(slots[..., 0])
    t2 = _ry_stack(slots[..., 1])
    p1 = _ry_stack(slots[..., 2])
    p2 = _ry_stack(slots[..., 3])

    def kron(hi, lo):
        m = np.einsum("...bB,...aA->...baBA", hi, lo)
        return m.reshape(m.shape[:-4] + (4, 4))

    return kron(p2, p1) @ _CNOT_LOW_CONTROL @ kron(t2, t1)


def _apply_pair_to_states(psi: np.ndarray, mats: np.ndarray, j: int) -> np.ndarray:
    """2-qubit gate on local bits (j, j+1) of stacked 4-qubit states.

    psi: [S, L, 16]; mats: [S, L, 4, 4]."""
    s, l, _ = psi.shape
    hi, lo = 1 << (2 - j), 1 << j
    t = psi.reshape(s, l, hi, 4, lo)
    return np.einsum("srpq,srhql->srhpl", mats, t, optimize=True).reshape(s, l, 16)


def _apply_pair_to_densities(dens: np.ndarray, mats: np.ndarray, j: int) -> np.ndarray:
    """U . D . U^dagger on local bits (j, j+1) of stacked 4-qubit densities.

    dens: [S, L, 16, 16]; mats: [S, L, 4, 4]."""
    s, l = dens.shape[:2]
    hi, lo = 1 << (2 - j), 1 << j
    t = dens.reshape(s, l, hi, 4, lo, 16)
    t = np.einsum("srpq,srhqlK->srhplK", mats, t, optimize=True).reshape(s, l, 16, 16)
    t = t.reshape(s, l, 16, hi, 4, lo)
    t = np.einsum("srpq,srKhql->srKhpl", np.conj(mats), t, optimize=True)
    return t.reshape(s, l, 16, 16)


def evaluate_measurements(
    enc_angles: np.ndarray,
    row_slots: np.ndarray,
    col_slots: np.ndarray,
    layout: str = "chain",
) -> np.ndarray:
    """Exact [Z..., X...] expectations for a stack of parameter assignments.

    enc_angles: [S, 16, 3] rotation angles (RX, RY, RZ per qubit);
    row_slots/col_slots: [S, 4, P, 4] per-line, per-pair filter angles, with
    P pairs per line given by the layout. Returns [S, 32].
    """
    offs = pair_offsets(layout)
    s = enc_angles.shape[0]
    if enc_angles.shape != (s, NUM_QUBITS, 3):
        raise ValueError(f"enc_angles must be [S,16,3], got {enc_angles.shape}")
    expect_slots = (s, GRID, len(offs), 4)
    if row_slots.shape != expect_slots or col_slots.shape != expect_slots:
        raise ValueError(
            f"slot arrays must have shape {expect_slots}, got {row_slots.shape} / {col_slots.shape}"
        )

    # per-qubit encoded vectors: RZ(g) RY(b) RX(a) |0>
    a, b, g = enc_angles[..., 0], enc_angles[..., 1], enc_angles[..., 2]
    x0 = np.cos(a / 2) + 0j
    x1 = -1j * np.sin(a / 2)
    cb, sb = np.cos(b / 2), np.sin(b / 2)
    y0 = cb * x0 - sb * x1
    y1 = sb * x0 + cb * x1
    u0 = np.exp(-1j * g / 2) * y0
    u1 = np.exp(1j * g / 2) * y1  # [S, 16]

    # row product states [S, 4, 16]; local bit c <-> column c
    u = np.stack([u0, u1], axis=-1).reshape(s, GRID, GRID, 2)
    rho = np.einsum(
        "srd,src,srb,sra->srdcba",
        u[:, :, 3],
        u[:, :, 2],
        u[:, :, 1],
        u[:, :, 0],
        optimize=True,
    ).reshape(s, GRID, 16)

    # row pass
    for p, j in enumerate(offs):
        rho = _apply_pair_to_states(rho, _filter_matrices(row_slots[:, :, p]), j)

    # per-qubit reduced densities sigma [S, row, col, 2, 2]
    sigma = np.empty((s, GRID, GRID, 2, 2), dtype=np.complex128)
    t = rho.reshape(s, GRID, 2, 2, 2, 2)  # axes: bit3, bit2, bit1, bit0
    for c in range(GRID):
        tc = np.moveaxis(t, 2 + (3 - c), 2).reshape(s, GRID, 2, 8)
        sigma[:, :, c] = np.einsum("srax,srbx->srab", tc, np.conj(tc), optimize=True)

    # column 4-qubit densities [S, col, 16, 16]; local bit r <-> row r
    dens = np.einsum(
        "szAa,szBb,szCc,szDd->szABCDabcd",
        sigma[:, 3],
        sigma[:, 2],
        sigma[:, 1],
        sigma[:, 0],
        optimize=True,
    ).reshape(s, GRID, 16, 16)

    # column pass
    for p, j in enumerate(offs):
        dens = _apply_pair_to_densities(dens, _filter_matrices(col_slots[:, :, p]), j)

    # single-qubit expectations from partial traces
    out = np.empty((s, MEASUREMENT_DIM))
    t = dens.reshape((s, GRID) + (2,) * 8)
    for r in range(GRID):
        tc = np.moveaxis(t, (2 + (3 - r), 6 + (3 - r)), (2, 3)).reshape(s, GRID, 2, 2, 8, 8)
        tau = np.einsum("szabii->szab", tc)
        for c in range(GRID):
            q = qubit_index(r, c)
            out[:, q] = tau[:, c, 0, 0].real - tau[:, c, 1, 1].real
            out[:, NUM_QUBITS + q] = 2.0 * tau[:, c, 0, 1].real
    return out


# --------------------------------------------------------------------------
# differentiable bottleneck op
# --------------------------------------------------------------------------


def _grid_to_qubit_angles(features: np.ndarray) -> np.ndarray:
    """[N,3,4,4] features -> [N,16,3] rotation angles (pi scaling applied)."""
    return np.pi * np.moveaxis(features, 1, 3).reshape(features.shape[0], NUM_QUBITS, 3)


def _base_slots(filter_angles: np.ndarray, n: int, num_pairs: int, filter_id: int) -> np.ndarray:
    block = filter_angles[4 * filter_id : 4 * filter_id + 4]
    return np.broadcast_to(block, (n, GRID, num_pairs, 4)).copy()


def quanv_measure(features: Tensor, circuit_angles: Tensor, layout: str = "chain") -> Tensor:
    """Differentiable map from pre-Q features [N,3,4,4] in [-1,1] to the
    32-entry multi-basis measurement vector per batch element.

    Forward scales features by pi, encodes, quanvolves and measures (via the
    factorized route). Backward applies the parameter-shift rule to every
    rotation occurrence: 2 evaluations per encoding angle and per shared-angle
    occurrence, summed over occurrences and batch for the 8 filter angles.
    """
    if features.ndim != 4 or features.shape[1:] != (3, GRID, GRID):
        raise ValueError(f"quanv_measure expects [N,3,{GRID},{GRID}], got {features.shape}")
    if circuit_angles.shape != (NUM_FILTER_ANGLES,):
        raise ValueError(f"circuit_angles must have shape (8,), got {circuit_angles.shape}")
    if np.abs(features.data).max() > 1.0:
        bad = float(features.data.flat[np.abs(features.data).argmax()])
        raise ValueError(f"encoded feature {bad} outside [-1, 1]")

    n = features.shape[0]
    offs = pair_offsets(layout)
    num_pairs = len(offs)
    enc = _grid_to_qubit_angles(features.data)  # [N,16,3]
    row_base = _base_slots(circuit_angles.data, n, num_pairs, 0)
    col_base = _base_slots(circuit_angles.data, n, num_pairs, 1)
    meas = evaluate_measurements(enc, row_base, col_base, layout)

    def vjp(grad):
        shift = np.pi / 2
        n_enc = NUM_ENCODING_ANGLES
        n_slot = GRID * num_pairs * 4  # angle occurrences per pass
        v = 2 * (n_enc + 2 * n_slot)

        encs = np.broadcast_to(enc[:, None], (n, v, NUM_QUBITS, 3)).copy()
        rows = np.broadcast_to(row_base[:, None], (n, v, GRID, num_pairs, 4)).copy()
        cols = np.broadcast_to(col_base[:, None], (n, v, GRID, num_pairs, 4)).copy()

        j = np.arange(n_enc)
        encs[:, j, j // 3, j % 3] += shift
        encs[:, n_enc + j, j // 3, j % 3] -= shift
        i = np.arange(n_slot)
        line, rest = i // (num_pairs * 4), i % (num_pairs * 4)
        pos, ang = rest // 4, rest % 4
        o = 2 * n_enc
        rows[:, o + i, line, pos, ang] += shift
        rows[:, o + n_slot + i, line, pos, ang] -= shift
        o += 2 * n_slot
        cols[:, o + i, line, pos, ang] += shift
        cols[:, o + n_slot + i, line, pos, ang] -= shift

        meas_v = evaluate_measurements(
            encs.reshape(n * v, NUM_QUBITS, 3),
            rows.reshape(n * v, GRID, num_pairs, 4),
            cols.reshape(n * v, GRID, num_pairs, 4),
            layout,
        ).reshape(n, v, MEASUREMENT_DIM)

        def family(offset, count):
            return (meas_v[:, offset : offset + count] - meas_v[:, offset + count : offset + 2 * count]) / 2.0

        d_enc = family(0, n_enc)  # [N, 48, 32]
        d_row = family(2 * n_enc, n_slot)
        d_col = family(2 * n_enc + 2 * n_slot, n_slot)

        g_enc = np.einsum("nk,njk->nj", grad, d_enc)  # [N, 48]
        g_features = np.pi * np.moveaxis(
            g_enc.reshape(n, GRID, GRID, 3), 3, 1
        )

        g_angles = np.empty(NUM_FILTER_ANGLES)
        g_angles[0:4] = np.einsum("nk,nik->i", grad, d_row).reshape(GRID * num_pairs, 4).sum(axis=0)
        g_angles[4:8] = np.einsum("nk,nik->i", grad, d_col).reshape(GRID * num_pairs, 4).sum(axis=0)
        return np.ascontiguousarray(g_features), g_angles

    return Tensor(meas)._attach("quanv_measure", (features, circuit_angles), vjp)


# --------------------------------------------------------------------------
# classical interfaces around the circuit
# --------------------------------------------------------------------------


@dataclass
class QuanvParams:
    """All trainable state of the bottleneck: exactly 8 circuit angles shared
    across every filter application, plus the pre/post interface weights."""

    circuit_angles: Tensor  # [8]: thetaR1, thetaR2, phiR1, phiR2, thetaC1, ...
    pre_conv: Conv2dParams  # 1x1, C_b -> 3
    post_weight: Tensor  # [32, C_b*H_b*W_b]
    post_bias: Tensor  # [C_b*H_b*W_b]
    layout: str = "chain"

    @property
    def theta_row(self) -> np.ndarray:
        return self.circuit_angles.data[0:2]

    @property
    def phi_row(self) -> np.ndarray:
        return self.circuit_angles.data[2:4]

    @property
    def theta_col(self) -> np.ndarray:
        return self.circuit_angles.data[4:6]

    @property
    def phi_col(self) -> np.ndarray:
        return self.circuit_angles.data[6:8]

    @staticmethod
    def create(
        channels: int, out_h: int, out_w: int, rng: np.random.Generator, layout: str = "chain"
    ) -> "QuanvParams":
        pair_offsets(layout)  # validate early
        flat = channels * out_h * out_w
        return QuanvParams(
            circuit_angles=Tensor(rng.uniform(-np.pi / 4, np.pi / 4, NUM_FILTER_ANGLES), requires_grad=True),
            pre_conv=Conv2dParams(
                kernel=Tensor(rng.normal(0.0, np.sqrt(2.0 / channels), (3, channels, 1, 1)), requires_grad=True),
                bias=Tensor(np.zeros(3), requires_grad=True),
            ),
            post_weight=Tensor(
                rng.normal(0.0, np.sqrt(2.0 / MEASUREMENT_DIM), (MEASUREMENT_DIM, flat)),
                requires_grad=True,
            ),
            post_bias=Tensor(np.zeros(flat), requires_grad=True),
            layout=layout,
        )


def pre_q_interface(x: Tensor, params: QuanvParams) -> Tensor:
    """Pool to the 4x4 grid, project to 3 channels, squash into (-1, 1)."""
    if x.ndim != 4:
        raise ValueError(f"pre-Q interface expects [N,C,H,W], got {x.shape}")
    if x.shape[2] < GRID or x.shape[3] < GRID:
        raise ValueError(
            f"pre-Q interface needs spatial extents >= {GRID}, got {x.shape[2:]}"
        )
    pooled = adaptive_average_pool(x, GRID, GRID)
    return conv2d(pooled, params.pre_conv).tanh()


def post_q_interface(v: Tensor, params: QuanvParams, out_shape: tuple[int, int, int]) -> Tensor:
    """Linear 32 -> C*H*W, reshaped to the bottleneck feature map."""
    c, h, w = out_shape
    if v.ndim != 2 or v.shape[1] != MEASUREMENT_DIM:
        raise ValueError(f"post-Q interface expects [N,{MEASUREMENT_DIM}], got {v.shape}")
    if params.post_weight.shape != (MEASUREMENT_DIM, c * h * w):
        raise ValueError(
            f"post-Q weights {params.post_weight.shape} cannot map "
            f"{MEASUREMENT_DIM} -> {c}*{h}*{w}"
        )
    out = linear(v, params.post_weight, params.post_bias)
    return out.reshape(v.shape[0], c, h, w)


def quantum_bottleneck(x: Tensor, params: QuanvParams) -> Tensor:
    """pre-Q -> encode -> quanvolve -> measure -> post-Q, batched over N.

    Output has the same [N,C,H,W] shape as the input feature map.
    """
    n, c, h, w = x.shape
    squashed = pre_q_interface(x, params)
    meas = quanv_measure(squashed, params.circuit_angles, params.layout)
    return post_q_interface(meas, params, (c, h, w))
