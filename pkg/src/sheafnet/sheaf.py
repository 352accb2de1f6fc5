"""Cellular-sheaf encoding of a feedforward ReLU network.

The underlying graph is a path with one vertex per intermediate quantity:

    v_x -- v_z1 -- v_a1 -- v_z2 -- ... -- v_ak -- v_z{k+1} -- v_y

Stalks: v_x carries the input extended with a ones block (R^{n0+n1}); each
post-activation vertex v_al carries [a_l; ones] (R^{n_l+n_{l+1}}); the
pre-activation and output vertices carry plain vectors. Edges encode one
computation step each: a weight edge compares z_l with the extended weight
matrix [W|diag(b)] applied to the upstream extended activation, an activation
edge compares a_l with the masked z_l, and the output edge compares y_hat
with phi(z_{k+1}). The input stalk and the ones blocks are held fixed
(boundary data); everything else diffuses.

For identity output the output edge is redundant (y_hat = z_{k+1} at
equilibrium) and is dropped from the dynamics; the y_hat block then mirrors
z_{k+1}. It is still assembled in the coboundary for structural checks.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .model import (
    ActivationPattern,
    ConfigError,
    ConstructionError,
    DimensionError,
    ForwardTrace,
    NetworkSpec,
    UnsupportedStructureError,
    forward_pass,
    phi_apply,
    phi_jacobian_apply,
    relu_pattern,
)

HARD = "hard"


def extend_weight(W, b) -> np.ndarray:
    """[W | diag(b)]: absorbs the bias into the weight-edge restriction map."""
    W = np.asarray(W, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64).ravel()
    if W.ndim != 2 or b.shape[0] != W.shape[0]:
        raise DimensionError(f"bias length {b.shape} does not match weight rows {W.shape}")
    return np.hstack([W, np.diag(b)])


def extend_activation(a, next_dim: int) -> np.ndarray:
    """[a; 1,...,1] with next_dim trailing ones (columnwise for 2-d input)."""
    a = np.asarray(a, dtype=np.float64)
    if next_dim < 1:
        raise DimensionError("next_dim must be positive")
    if a.ndim == 1:
        return np.concatenate([a, np.ones(next_dim)])
    return np.vstack([a, np.ones((next_dim, a.shape[1]))])


@dataclass(frozen=True)
class PinSpec:
    """Pin a subset of coordinates toward target values.

    layer: hidden-layer index l (pins post-activation coordinates a_l),
           or "output" / "input".
    gamma: positive coupling strength, or HARD to clamp the coordinates
           (moving them into the boundary set).
    """

    layer: int | str
    indices: tuple[int, ...]
    targets: np.ndarray
    gamma: float | str = HARD

    def __post_init__(self):
        object.__setattr__(self, "indices", tuple(int(i) for i in self.indices))
        object.__setattr__(self, "targets", np.asarray(self.targets, dtype=np.float64).ravel())
        if len(self.indices) != self.targets.shape[0]:
            raise DimensionError("one target per pinned coordinate required")
        if self.gamma != HARD and not (isinstance(self.gamma, (int, float)) and self.gamma >= 0):
            raise ConfigError(f"gamma must be positive or {HARD!r}, got {self.gamma!r}")

    @property
    def hard(self) -> bool:
        return self.gamma == HARD


@dataclass(frozen=True)
class Edge:
    kind: str  # "weight" | "activation" | "output" | "pin"
    layer: int | None
    name: str
    pin: PinSpec | None = None


@dataclass
class NeuralSheaf:
    """Structure of the sheaf built from a NetworkSpec.

    The structure (stalk dimensions, boundary set, edges) is immutable and
    shareable; the referenced spec's weight arrays are what training evolves.
    ``output_pinned`` means the v_y stalk is boundary data (targets), the
    training configuration. Identity-output sheaves without a pinned output
    are "mirrored": y_hat is identified with z_{k+1} and the output edge is
    dropped from the dynamics.
    """

    spec: NetworkSpec
    pins: tuple[PinSpec, ...] = ()
    output_pinned: bool = False
    vertex_names: list[str] = field(init=False, repr=False)
    vertex_dims: list[int] = field(init=False, repr=False)
    fixed: list[np.ndarray] = field(init=False, repr=False)
    edges: list[Edge] = field(init=False, repr=False)

    def __post_init__(self):
        dims = self.spec.layer_dims
        k = self.spec.k
        names, vdims = ["x"], [dims[0] + dims[1]]
        for l in range(1, k + 1):
            names += [f"z{l}", f"a{l}"]
            vdims += [dims[l], dims[l] + dims[l + 1]]
        names += [f"z{k + 1}", "y"]
        vdims += [dims[k + 1], dims[k + 1]]
        self.vertex_names, self.vertex_dims = names, vdims

        fixed = [np.zeros(d, dtype=bool) for d in vdims]
        fixed[0][:] = True
        for l in range(1, k + 1):
            fixed[2 * l][dims[l]:] = True
        if self.mirrored or self.output_pinned:
            fixed[-1][:] = True
        for pin in self.pins:
            self._validate_pin(pin)
            if pin.hard:
                vi, off = self._pin_vertex(pin)
                for j in pin.indices:
                    fixed[vi][off + j] = True
        self.fixed = fixed

        edges = []
        for l in range(1, k + 2):
            edges.append(Edge("weight", l, f"W{l}"))
            if l <= k:
                edges.append(Edge("activation", l, f"R{l}"))
        edges.append(Edge("output", None, "OUT"))
        for i, pin in enumerate(self.pins):
            if not pin.hard:
                edges.append(Edge("pin", None, f"PIN{i + 1}", pin=pin))
        self.edges = edges

    # -- structure ------------------------------------------------------------

    @property
    def k(self) -> int:
        return self.spec.k

    @property
    def layer_dims(self) -> list[int]:
        return self.spec.layer_dims

    @property
    def mirrored(self) -> bool:
        """y_hat identified with z_{k+1} (identity output, output not pinned)."""
        return self.spec.output_activation == "identity" and not self.output_pinned

    def z_index(self, l: int) -> int:
        """Vertex index of v_z(l), l = 1..k+1."""
        return 2 * l - 1

    def a_index(self, l: int) -> int:
        """Vertex index of v_a(l), l = 1..k; l = 0 gives v_x."""
        return 2 * l

    @property
    def y_index(self) -> int:
        return 2 * self.k + 2

    def _pin_vertex(self, pin: PinSpec) -> tuple[int, int]:
        """(vertex index, coordinate offset) the pin acts on."""
        if pin.layer == "input":
            return 0, 0
        if pin.layer == "output":
            # Identity output: the output stalk of the reduced system is
            # z_{k+1}; nonlinear outputs pin the y stalk itself.
            if self.spec.output_activation == "identity":
                return self.z_index(self.k + 1), 0
            return self.y_index, 0
        return self.a_index(int(pin.layer)), 0

    def _validate_pin(self, pin: PinSpec) -> None:
        dims = self.spec.layer_dims
        if pin.layer == "input":
            limit = dims[0]
        elif pin.layer == "output":
            limit = dims[-1]
        elif isinstance(pin.layer, int) and 1 <= pin.layer <= self.k:
            limit = dims[pin.layer]
        else:
            raise ConfigError(f"pin layer {pin.layer!r} not in this network")
        for j in pin.indices:
            if not 0 <= j < limit:
                raise ConfigError(f"pin index {j} outside the {limit} pinnable coordinates (ones blocks are already fixed)")

    @property
    def boundary_size(self) -> int:
        """Number of fixed coordinates: input stalk, ones blocks, hard pins."""
        total = sum(int(m.sum()) for m in self.fixed)
        if self.mirrored:
            total -= self.vertex_dims[-1]  # mirrored y is eliminated, not boundary
        return total

    def without_pins(self) -> "NeuralSheaf":
        return replace(self, pins=())

    # -- cochains ---------------------------------------------------------------

    def cochain(self, x=None, init="zeros", rng=None, targets=None, width=None) -> "Cochain":
        """Build a full state with boundary data applied.

        init: "zeros" | "random" | a ForwardTrace | a Cochain to copy blocks from.
        x is the input (n0,) or (n0, M); targets fill the pinned output block
        when the sheaf has output_pinned.
        """
        if width is None:
            for ref in (x, targets):
                if ref is not None and np.ndim(ref) == 2:
                    width = np.shape(ref)[1]
            width = width or 1
        blocks = [np.zeros((d, width)) for d in self.vertex_dims]
        if isinstance(init, ForwardTrace):
            for l in range(1, self.k + 2):
                blocks[self.z_index(l)][:] = _col(init.z[l - 1], width)
            for l in range(1, self.k + 1):
                blocks[self.a_index(l)][: self.layer_dims[l]] = _col(init.a[l - 1], width)
            blocks[self.y_index][:] = _col(init.y_hat, width)
        elif isinstance(init, Cochain):
            blocks = [b.copy() for b in init.blocks]
        elif init == "random":
            if rng is None:
                rng = np.random.default_rng(0)
            for b in blocks:
                b[:] = rng.standard_normal(b.shape)
        elif init != "zeros":
            raise ConfigError(f"unknown init {init!r}")
        c = Cochain(self, blocks)
        c.apply_boundary(x=x, targets=targets)
        return c


def _col(v, width: int) -> np.ndarray:
    """Column layout; 1-d data becomes a single column broadcastable to width."""
    v = np.asarray(v, dtype=np.float64)
    return v.reshape(-1, 1) if v.ndim == 1 else v


def build_sheaf(spec: NetworkSpec) -> NeuralSheaf:
    if not isinstance(spec, NetworkSpec):
        raise ConstructionError("build_sheaf expects a NetworkSpec")
    return NeuralSheaf(spec)


@dataclass
class Cochain:
    """One vector (or an n x M matrix) per vertex stalk.

    Fixed coordinates (input stalk, ones blocks, hard pins, pinned output)
    hold the boundary data in place; free coordinates are whatever the
    dynamics left there. For mirrored sheaves the y block duplicates z_{k+1}.
    """

    sheaf: NeuralSheaf
    blocks: list[np.ndarray]

    def __post_init__(self):
        self.blocks = [np.asarray(b, dtype=np.float64) for b in self.blocks]
        for b, d in zip(self.blocks, self.sheaf.vertex_dims):
            if b.ndim != 2 or b.shape[0] != d:
                raise DimensionError(f"block of shape {b.shape} does not match stalk dimension {d}")

    @property
    def width(self) -> int:
        return self.blocks[0].shape[1]

    def copy(self) -> "Cochain":
        return Cochain(self.sheaf, [b.copy() for b in self.blocks])

    def z(self, l: int) -> np.ndarray:
        return self.blocks[self.sheaf.z_index(l)]

    def a_ext(self, l: int) -> np.ndarray:
        """Extended activation block; l = 0 is the extended input."""
        return self.blocks[self.sheaf.a_index(l)]

    def a(self, l: int) -> np.ndarray:
        return self.blocks[self.sheaf.a_index(l)][: self.sheaf.layer_dims[l]]

    @property
    def y_hat(self) -> np.ndarray:
        return self.blocks[self.sheaf.y_index]

    @property
    def x_input(self) -> np.ndarray:
        return self.blocks[0][: self.sheaf.layer_dims[0]]

    def pattern(self) -> ActivationPattern:
        return ActivationPattern([relu_pattern(self.z(l)) for l in range(1, self.sheaf.k + 1)])

    def z_list(self) -> list[np.ndarray]:
        return [self.z(l) for l in range(1, self.sheaf.k + 2)]

    def apply_boundary(self, x=None, targets=None) -> None:
        """Write boundary data into the fixed coordinates (and sync mirrors)."""
        sh = self.sheaf
        dims = sh.layer_dims
        if x is not None:
            self.blocks[0][: dims[0]] = _col(x, self.width)
        self.blocks[0][dims[0]:] = 1.0
        for l in range(1, sh.k + 1):
            self.blocks[sh.a_index(l)][dims[l]:] = 1.0
        for pin in sh.pins:
            if pin.hard:
                vi, off = sh._pin_vertex(pin)
                idx = [off + j for j in pin.indices]
                self.blocks[vi][idx] = _col(pin.targets, self.width)
        if sh.output_pinned and targets is not None:
            self.blocks[sh.y_index][:] = _col(targets, self.width)
        if sh.mirrored:
            self.blocks[sh.y_index][:] = self.z(sh.k + 1)

    def sync_mirror(self) -> None:
        if self.sheaf.mirrored:
            self.blocks[self.sheaf.y_index][:] = self.z(self.sheaf.k + 1)


# -- coboundary and discord ----------------------------------------------------

def _masks_of(sheaf: NeuralSheaf, x: Cochain, pattern) -> list[np.ndarray]:
    if pattern is None:
        return [relu_pattern(x.z(l)) for l in range(1, sheaf.k + 1)]
    masks = pattern.masks if isinstance(pattern, ActivationPattern) else list(pattern)
    out = []
    for l in range(1, sheaf.k + 1):
        m = np.asarray(masks[l - 1], dtype=np.float64)
        out.append(m.reshape(-1, 1) if m.ndim == 1 else m)
    return out


def weight_edge_value(spec: NetworkSpec, l: int, up_ext: np.ndarray, z: np.ndarray) -> np.ndarray:
    """z(l) - [W|diag(b)] a_ext(l-1); the ones part carries the bias."""
    n_prev = spec.layer_dims[l - 1]
    wa = spec.weights[l - 1] @ up_ext[:n_prev] + spec.biases[l - 1][:, None] * up_ext[n_prev:]
    return z - wa


def coboundary_apply(sheaf: NeuralSheaf, x: Cochain, pattern=None) -> dict[str, np.ndarray]:
    """Per-edge discrepancy vectors, oriented downstream minus upstream."""
    spec = sheaf.spec
    masks = _masks_of(sheaf, x, pattern)
    values: dict[str, np.ndarray] = {}
    for edge in sheaf.edges:
        if edge.kind == "weight":
            l = edge.layer
            values[edge.name] = weight_edge_value(spec, l, x.a_ext(l - 1), x.z(l))
        elif edge.kind == "activation":
            l = edge.layer
            values[edge.name] = x.a(l) - masks[l - 1] * x.z(l)
        elif edge.kind == "output":
            values[edge.name] = x.y_hat - phi_apply(spec.output_activation, x.z(sheaf.k + 1))
        else:  # soft pin
            pin = edge.pin
            vi, off = sheaf._pin_vertex(pin)
            idx = [off + j for j in pin.indices]
            g = np.sqrt(float(pin.gamma))
            values[edge.name] = g * (x.blocks[vi][idx] - _col(pin.targets, x.width))
    return values


def total_discord(sheaf: NeuralSheaf, x: Cochain, pattern=None) -> tuple[float, dict[str, float]]:
    """(sum over edges of ||edge value||^2, per-edge breakdown).

    The pattern is recomputed from the current z blocks unless given.
    """
    values = coboundary_apply(sheaf, x, pattern)
    per_edge = {name: float((v * v).sum()) for name, v in values.items()}
    return sum(per_edge.values()), per_edge


# -- free-coordinate layout ----------------------------------------------------

@dataclass(frozen=True)
class LayoutBlock:
    name: str
    vertex: int
    keep: np.ndarray  # coordinate indices within the stalk that are free
    start: int
    stop: int


@dataclass(frozen=True)
class FreeLayout:
    blocks: tuple[LayoutBlock, ...]
    size: int

    def slices(self) -> dict[str, slice]:
        return {b.name: slice(b.start, b.stop) for b in self.blocks}


def free_layout(sheaf: NeuralSheaf, include_yhat: bool = False) -> FreeLayout:
    """Flat indexing of the free coordinates in path order: z1, a1, ..., z_{k+1}[, yhat]."""
    entries, pos = [], 0
    k = sheaf.k
    order: list[tuple[str, int]] = []
    for l in range(1, k + 1):
        order += [(f"z{l}", sheaf.z_index(l)), (f"a{l}", sheaf.a_index(l))]
    order.append((f"z{k + 1}", sheaf.z_index(k + 1)))
    if include_yhat:
        order.append(("yhat", sheaf.y_index))
    for name, vi in order:
        free = ~sheaf.fixed[vi]
        if name == "yhat":
            free = np.ones(sheaf.vertex_dims[vi], dtype=bool)
        keep = np.flatnonzero(free)
        entries.append(LayoutBlock(name, vi, keep, pos, pos + keep.size))
        pos += keep.size
    return FreeLayout(tuple(entries), pos)


def flatten_free(sheaf: NeuralSheaf, blocks: list[np.ndarray], layout: FreeLayout) -> np.ndarray:
    cols = [blocks[b.vertex][b.keep] for b in layout.blocks]
    return np.concatenate(cols, axis=0)


def unflatten_free(sheaf: NeuralSheaf, flat: np.ndarray, layout: FreeLayout, out: list[np.ndarray]) -> None:
    for b in layout.blocks:
        out[b.vertex][b.keep] = flat[b.start: b.stop]


# -- restricted coboundary and Laplacian ----------------------------------------

def _require_plain(sheaf: NeuralSheaf, what: str) -> None:
    if sheaf.pins or sheaf.output_pinned:
        raise UnsupportedStructureError(f"{what} requires an unpinned sheaf")
    if sheaf.spec.output_activation != "identity":
        raise UnsupportedStructureError(f"{what} requires identity output activation")


def assemble_delta_omega(sheaf: NeuralSheaf, pattern) -> np.ndarray:
    """Restricted coboundary on the free coordinates (z1, a1, ..., z_{k+1}, yhat).

    Square and block lower-unitriangular: identity diagonal blocks from each
    edge's downstream endpoint, sub-diagonal blocks -R(l), -W(l+1), -I.
    """
    _require_plain(sheaf, "assemble_delta_omega")
    spec, k = sheaf.spec, sheaf.k
    dims = spec.layer_dims
    masks = pattern.masks if isinstance(pattern, ActivationPattern) else list(pattern)
    masks = [np.asarray(m, dtype=np.float64).ravel() for m in masks]
    layout = free_layout(sheaf, include_yhat=True)
    sl = layout.slices()
    n = layout.size
    delta = np.zeros((n, n))
    row = 0
    for l in range(1, k + 2):
        nl = dims[l]
        delta[row: row + nl, sl[f"z{l}"]] = np.eye(nl)
        if l >= 2:
            delta[row: row + nl, sl[f"a{l - 1}"]] = -spec.weights[l - 1]
        row += nl
        if l <= k:
            delta[row: row + nl, sl[f"a{l}"]] = np.eye(nl)
            delta[row: row + nl, sl[f"z{l}"]] = -np.diag(masks[l - 1])
            row += nl
    nout = dims[k + 1]
    delta[row: row + nout, sl["yhat"]] = np.eye(nout)
    delta[row: row + nout, sl[f"z{k + 1}"]] = -np.eye(nout)
    return delta


def unitriangular_det(sheaf: NeuralSheaf, pattern) -> float:
    """det of the restricted coboundary; the structural contract is exactly 1."""
    return float(np.linalg.det(assemble_delta_omega(sheaf, pattern)))


def restricted_laplacian(sheaf: NeuralSheaf, pattern, reduced: bool = True, z_out=None) -> np.ndarray:
    """L[free, free] assembled edge by edge.

    reduced=True drops y_hat (Schur elimination for identity output; for other
    activations it is the Laplacian of the linear subgraph). reduced=False
    includes the output edge and the y_hat block; nonlinear outputs then use
    the local linearization J_phi at z_out as the upstream map.

    Soft pins add gamma * P^T P on the pinned stalk diagonal; hard-pinned
    coordinates are boundary and simply absent. A pinned-output (training)
    sheaf with identity activation gains the output edge's identity
    contribution on the z_{k+1} diagonal.
    """
    spec, k = sheaf.spec, sheaf.k
    dims = spec.layer_dims
    masks = pattern.masks if isinstance(pattern, ActivationPattern) else list(pattern)
    masks = [np.asarray(m, dtype=np.float64).ravel() for m in masks]
    include_yhat = not reduced
    if include_yhat and sheaf.output_pinned:
        raise UnsupportedStructureError("full form: y_hat is boundary on a pinned-output sheaf")
    layout = free_layout(sheaf, include_yhat=include_yhat)
    L = np.zeros((layout.size, layout.size))
    keep = {b.name: b.keep for b in layout.blocks}
    sl = layout.slices()

    def add(bi: str, bj: str, M: np.ndarray) -> None:
        L[sl[bi], sl[bj]] += M[np.ix_(keep[bi], keep[bj])]

    for l in range(1, k + 2):
        nl, npr = dims[l], dims[l - 1]
        add(f"z{l}", f"z{l}", np.eye(nl))
        if l >= 2:
            W = spec.weights[l - 1]
            add(f"a{l - 1}", f"a{l - 1}", W.T @ W)
            add(f"z{l}", f"a{l - 1}", -W)
            add(f"a{l - 1}", f"z{l}", -W.T)
    for l in range(1, k + 1):
        nl = dims[l]
        R = np.diag(masks[l - 1])
        add(f"a{l}", f"a{l}", np.eye(nl))
        add(f"z{l}", f"z{l}", R)
        add(f"a{l}", f"z{l}", -R)
        add(f"z{l}", f"a{l}", -R)
    zk1 = f"z{k + 1}"
    if include_yhat:
        nout = dims[k + 1]
        if spec.output_activation == "identity":
            J = np.eye(nout)
        else:
            if z_out is None:
                raise ConfigError("full form with a nonlinear output needs the operating point z_out")
            ones = np.eye(nout)
            J = np.column_stack([phi_jacobian_apply(spec.output_activation, np.asarray(z_out, dtype=np.float64), ones[:, i]) for i in range(nout)])
        add(zk1, zk1, J.T @ J)
        add("yhat", "yhat", np.eye(nout))
        add(zk1, "yhat", -J.T)
        add("yhat", zk1, -J)
    elif sheaf.output_pinned and spec.output_activation == "identity":
        add(zk1, zk1, np.eye(dims[k + 1]))
    for pin in sheaf.pins:
        if pin.hard:
            continue
        vi, off = sheaf._pin_vertex(pin)
        name = sheaf.vertex_names[vi]
        if name == "x" or (name == "y" and not include_yhat):
            continue  # no free coordinates there
        name = "yhat" if name == "y" else name
        M = np.zeros((sheaf.vertex_dims[vi], sheaf.vertex_dims[vi]))
        for j in pin.indices:
            M[off + j, off + j] = float(pin.gamma)
        add(name, name, M)
    return L


def harmonic_extension(sheaf: NeuralSheaf, x, pattern: ActivationPattern | None = None) -> Cochain:
    """Unique zero-discrepancy extension of the boundary data for a frozen pattern.

    Forward substitution in the unitriangular system is exactly the forward
    pass with that pattern; pattern=None uses the self-consistent one.
    """
    if sheaf.pins or sheaf.output_pinned:
        raise UnsupportedStructureError("harmonic_extension requires an unpinned sheaf")
    trace = forward_pass(sheaf.spec, x, pattern)
    return sheaf.cochain(x=x, init=trace)
