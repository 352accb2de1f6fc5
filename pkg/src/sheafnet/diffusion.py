"""Restricted sheaf heat equation with state-dependent ReLU switching.

Forward Euler on the free coordinates; the activation pattern is recomputed
from the current pre-activations at every step (the discrete stand-in for the
fast selection rule at switching surfaces). Identity-output sheaves run the
reduced system with y_hat mirroring z_{k+1}; nonlinear outputs evolve the
output pair through the local adjoint J_phi.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .losses import LossSpec, loss_gradient
from .model import (
    ConfigError,
    DivergenceError,
    UnsupportedStructureError,
    phi_apply,
    phi_jacobian_apply,
    relu_pattern,
)
from .sheaf import (
    Cochain,
    NeuralSheaf,
    PinSpec,
    HARD,
    coboundary_apply,
    flatten_free,
    free_layout,
    restricted_laplacian,
)

__all__ = [
    "DiffusionConfig", "PinSpec", "HARD", "Trajectory", "apply_pin",
    "free_velocity", "batch_free_velocity", "output_velocity", "euler_step",
    "run_diffusion", "energy", "detect_crossings", "solve_equilibrium",
]


@dataclass
class DiffusionConfig:
    alpha: float = 1.0
    dt: float = 0.01
    max_steps: int = 100_000
    tol: float = 1e-10          # sup-norm of the free velocity
    record_every: int = 1
    record_crossings: bool = True
    record_energy: bool = False
    seed: int = 0
    guard: float = 1e12         # divergence bound on any coordinate
    eps_slide: float = 1e-6
    slide_steps: int = 20

    def __post_init__(self):
        if self.tol <= 0 or self.dt <= 0 or self.alpha <= 0:
            raise ConfigError("alpha, dt and tol must be positive")


# -- the force engine ----------------------------------------------------------

def _output_force(sheaf: NeuralSheaf, z: np.ndarray, y: np.ndarray, loss: LossSpec) -> np.ndarray:
    """Force on z_{k+1} from the output edge when the y stalk holds targets."""
    phi = sheaf.spec.output_activation
    if loss.kind == "cross_entropy":
        if phi not in ("softmax", "sigmoid"):
            raise ConfigError("cross_entropy requires a softmax or sigmoid output")
        return phi_apply(phi, z) - y
    if phi == "identity":
        return loss_gradient(z - y, loss)
    return phi_jacobian_apply(phi, z, loss_gradient(phi_apply(phi, z) - y, loss))


def _gradient(sheaf: NeuralSheaf, blocks: list[np.ndarray], masks: list[np.ndarray],
              loss: LossSpec = LossSpec.squared()) -> tuple[list[np.ndarray], dict[str, float]]:
    """Gradient of the discrepancy potential wrt every stalk block.

    Fixed coordinates receive gradient too; callers zero them. Also returns
    the squared discrepancy per edge (the discord decomposition).
    """
    spec, k = sheaf.spec, sheaf.k
    dims = spec.layer_dims
    g = [np.zeros_like(b) for b in blocks]
    edge_sq: dict[str, float] = {}
    zi, ai, yi = sheaf.z_index, sheaf.a_index, sheaf.y_index
    for l in range(1, k + 2):
        up = blocks[ai(l - 1)]
        n_prev = dims[l - 1]
        W, b = spec.weights[l - 1], spec.biases[l - 1]
        d = blocks[zi(l)] - (W @ up[:n_prev] + b[:, None] * up[n_prev:])
        edge_sq[f"W{l}"] = float((d * d).sum())
        g[zi(l)] += d
        if l >= 2:
            g[ai(l - 1)][:n_prev] -= W.T @ d
    for l in range(1, k + 1):
        m = masks[l - 1]
        d = blocks[ai(l)][: dims[l]] - m * blocks[zi(l)]
        edge_sq[f"R{l}"] = float((d * d).sum())
        g[ai(l)][: dims[l]] += d
        g[zi(l)] -= m * d
    z_last = blocks[zi(k + 1)]
    if sheaf.output_pinned:
        d = blocks[yi] - phi_apply(spec.output_activation, z_last)
        edge_sq["OUT"] = float((d * d).sum())
        g[zi(k + 1)] += _output_force(sheaf, z_last, blocks[yi], loss)
    elif sheaf.mirrored:
        edge_sq["OUT"] = float(((blocks[yi] - z_last) ** 2).sum())
    else:
        d = blocks[yi] - phi_apply(spec.output_activation, z_last)
        edge_sq["OUT"] = float((d * d).sum())
        g[yi] += d
        g[zi(k + 1)] -= phi_jacobian_apply(spec.output_activation, z_last, d)
    for idx, pin in enumerate(p for p in sheaf.pins if not p.hard):
        vi, off = sheaf._pin_vertex(pin)
        rows = [off + j for j in pin.indices]
        d = blocks[vi][rows] - pin.targets[:, None]
        edge_sq[f"PIN{idx + 1}"] = float(pin.gamma) * float((d * d).sum())
        g[vi][rows] += float(pin.gamma) * d
    return g, edge_sq


def _zero_fixed(sheaf: NeuralSheaf, g: list[np.ndarray]) -> None:
    for gi, mask in zip(g, sheaf.fixed):
        gi[mask] = 0.0


def _masks(sheaf: NeuralSheaf, blocks: list[np.ndarray]) -> list[np.ndarray]:
    return [relu_pattern(blocks[sheaf.z_index(l)]) for l in range(1, sheaf.k + 1)]


def free_velocity(sheaf: NeuralSheaf, x: Cochain, alpha: float = 1.0,
                  loss: LossSpec | str = "squared") -> list[np.ndarray]:
    """-alpha (L[free,free] w + L[free,fixed] u), pattern from the current state.

    Returned per vertex block, zero on fixed coordinates (and on the mirrored
    y block, which follows z_{k+1} rather than flowing).
    """
    g, _ = _gradient(sheaf, x.blocks, _masks(sheaf, x.blocks), LossSpec.parse(loss))
    _zero_fixed(sheaf, g)
    return [-alpha * gi for gi in g]


def batch_free_velocity(sheaf: NeuralSheaf, x: Cochain, alpha: float = 1.0) -> list[np.ndarray]:
    """Columnwise free velocity: each column uses its own activation mask.

    The engine is natively batched (masks are per-column), so this is the
    same computation as ``free_velocity``; the per-column-loop equivalence is
    a tested contract.
    """
    return free_velocity(sheaf, x, alpha)


def output_velocity(z_out, y_hat, phi: str, alpha: float = 1.0, wa=None) -> tuple[np.ndarray, np.ndarray]:
    """Velocities of the output pair (z_{k+1}, y_hat).

    dz = -alpha [ (z - wa) + J_phi(z)^T (phi(z) - y_hat) ], wa being the
    weight-edge prediction (defaults to zero); dy = -alpha (y_hat - phi(z)).
    """
    z = np.asarray(z_out, dtype=np.float64)
    y = np.asarray(y_hat, dtype=np.float64)
    wa = np.zeros_like(z) if wa is None else np.asarray(wa, dtype=np.float64)
    d = phi_apply(phi, z) - y
    dz = -alpha * ((z - wa) + phi_jacobian_apply(phi, z, d))
    dy = alpha * d
    return dz, dy


def euler_step(sheaf: NeuralSheaf, x: Cochain, config: DiffusionConfig, step: int = 0) -> Cochain:
    """x + dt * velocity on the free coordinates; fixed coordinates unchanged."""
    v = free_velocity(sheaf, x, config.alpha)
    out = Cochain(sheaf, [b + config.dt * vi for b, vi in zip(x.blocks, v)])
    out.sync_mirror()
    _check_state(out.blocks, config.guard, step)
    return out


def _check_state(blocks: list[np.ndarray], guard: float, step: int) -> None:
    for b in blocks:
        if not np.isfinite(b).all() or np.abs(b).max() > guard:
            raise DivergenceError(step)


# -- pins ------------------------------------------------------------------------

def apply_pin(sheaf: NeuralSheaf, pin: PinSpec) -> NeuralSheaf:
    """New sheaf with the pin attached.

    Soft pins add a penalty edge with maps sqrt(gamma) P_J / sqrt(gamma) I
    toward a stubborn vertex holding the targets; hard pins move the
    coordinates into the boundary set. The original sheaf is not modified.
    """
    sheaf._validate_pin(pin)
    return replace(sheaf, pins=sheaf.pins + (pin,))


# -- energy ----------------------------------------------------------------------

def energy(sheaf: NeuralSheaf, x: Cochain, pattern=None) -> float:
    """E = 1/2 w^T L w + w^T L[free,fixed] u + 1/2 ||phi(z_{k+1}) - y_hat||^2.

    Evaluated edge-wise with the pattern frozen (recomputed from the state
    unless given): the quadratic part is the summed squared discrepancy of the
    weight, activation and pin edges minus its value at the zero free state,
    which removes the u-only constant. Continuous across mask flips since
    ReLU(0) = 0 either way.
    """
    masks = _masks(sheaf, x.blocks) if pattern is None else [
        np.asarray(m, dtype=np.float64).reshape(-1, 1) if np.ndim(m) == 1 else np.asarray(m, dtype=np.float64)
        for m in (pattern.masks if hasattr(pattern, "masks") else pattern)
    ]

    def quad(blocks):
        vals = _gradient(sheaf, blocks, masks)[1]
        return 0.5 * sum(v for name, v in vals.items() if name != "OUT")

    boundary_blocks = [np.where(f[:, None], b, 0.0) for f, b in zip(sheaf.fixed, x.blocks)]
    e = quad(x.blocks) - quad(boundary_blocks)
    z_last = x.z(sheaf.k + 1)
    if not sheaf.mirrored:
        out = phi_apply(sheaf.spec.output_activation, z_last) - x.y_hat
        e += 0.5 * float((out * out).sum())
    else:
        out = z_last - x.y_hat
        e += 0.5 * float((out * out).sum())
    return float(e)


# -- trajectories -----------------------------------------------------------------

@dataclass
class Trajectory:
    steps: np.ndarray
    discord_total: np.ndarray
    discord_per_edge: dict[str, np.ndarray]
    output: np.ndarray                      # (n_records, n_out, width)
    crossings: list[tuple[int, int, int, int]]   # (step, layer, coord, direction)
    sliding_episodes: list[tuple[int, int, int, int]]  # (layer, coord, start, end)
    final_cochain: Cochain
    converged: bool
    steps_taken: int
    final_velocity: float
    energy: np.ndarray | None = None

    @property
    def monotone(self) -> bool:
        """Discord nonincreasing along the recorded series (1e-12 slack)."""
        return bool(np.all(np.diff(self.discord_total) <= 1e-12))

    def to_csv(self, path) -> None:
        from .cli import write_csv  # local import; formatting lives with the CLI

        if self.output.shape[2] != 1:
            raise ConfigError("trajectory CSV export is defined for single-input runs")
        n_out = self.output.shape[1]
        header = ["step", "discord_total"] + [f"discord_edge_{n}" for n in self.discord_per_edge] + [
            f"y_hat_{i}" for i in range(n_out)]
        rows = []
        for i, s in enumerate(self.steps):
            row = [int(s), self.discord_total[i]]
            row += [series[i] for series in self.discord_per_edge.values()]
            row += [self.output[i, j, 0] for j in range(n_out)]
            rows.append(row)
        write_csv(path, header, rows)

    def crossings_to_csv(self, path) -> None:
        from .cli import write_csv

        write_csv(path, ["step", "layer", "coord", "direction"], [list(c) for c in self.crossings])


def run_diffusion(sheaf: NeuralSheaf, x=None, config: DiffusionConfig | None = None,
                  init="random", targets=None) -> Trajectory:
    """Integrate until the free velocity sup-norm drops below tol (or max_steps).

    init: "random" (free coordinates i.i.d. standard normal, seeded),
    "zeros", a ForwardTrace, or a Cochain. x is the network input; it may be
    omitted when init is a Cochain that already carries boundary data.
    """
    config = config or DiffusionConfig()
    rng = np.random.default_rng(config.seed)
    if isinstance(init, Cochain) and x is None:
        state = init.copy()
        state.apply_boundary()
    else:
        state = sheaf.cochain(x=x, init=init, rng=rng, targets=targets)
    blocks = state.blocks
    k, dims = sheaf.k, sheaf.layer_dims
    alpha, dt = config.alpha, config.dt

    hidden_slices = []
    pos = 0
    for l in range(1, k + 1):
        hidden_slices.append((l, pos, pos + dims[l]))
        pos += dims[l]
    n_hidden = pos

    rec_steps, rec_total, rec_out, rec_energy = [], [], [], []
    rec_edges: dict[str, list[float]] = {}
    crossings: list[tuple[int, int, int, int]] = []
    episodes: list[tuple[int, int, int, int]] = []
    prev_sign = None
    run_len = np.zeros((n_hidden, blocks[0].shape[1]), dtype=np.int64)

    def hidden_z():
        return np.concatenate([blocks[sheaf.z_index(l)] for l in range(1, k + 1)], axis=0) if k else np.zeros((0, blocks[0].shape[1]))

    def record(step, total, edge_sq):
        rec_steps.append(step)
        rec_total.append(total)
        for name, v in edge_sq.items():
            rec_edges.setdefault(name, []).append(v)
        rec_out.append(blocks[sheaf.y_index].copy())
        if config.record_energy:
            rec_energy.append(energy(sheaf, state))

    def coord_of(flat):
        for l, start, stop in hidden_slices:
            if start <= flat < stop:
                return l, flat - start
        raise IndexError(flat)

    converged = False
    step = 0
    final_vel = np.inf
    for step in range(config.max_steps + 1):
        masks = _masks(sheaf, blocks)
        g, edge_sq = _gradient(sheaf, blocks, masks)
        _zero_fixed(sheaf, g)
        vel = alpha * max((np.abs(gi).max() if gi.size else 0.0) for gi in g)
        total = sum(edge_sq.values())
        if step % config.record_every == 0:
            record(step, total, edge_sq)
        if config.record_crossings and k > 0:
            zh = hidden_z()
            sign = zh >= 0
            if prev_sign is not None:
                flips = sign != prev_sign
                for flat, col in zip(*np.nonzero(flips)):
                    l, c = coord_of(int(flat))
                    crossings.append((step, l, int(c), +1 if sign[flat, col] else -1))
            prev_sign = sign
            small = np.abs(zh) < config.eps_slide
            ended = (~small) & (run_len >= config.slide_steps)
            for flat, col in zip(*np.nonzero(ended)):
                l, c = coord_of(int(flat))
                episodes.append((l, int(c), step - int(run_len[flat, col]), step - 1))
            run_len = np.where(small, run_len + 1, 0)
        if vel < config.tol:
            converged = True
            final_vel = vel
            if rec_steps[-1] != step:
                record(step, total, edge_sq)
            break
        if step == config.max_steps:
            final_vel = vel
            if rec_steps[-1] != step:
                record(step, total, edge_sq)
            break
        for b, gi in zip(blocks, g):
            b -= dt * alpha * gi
        state.sync_mirror()
        _check_state(blocks, config.guard, step + 1)

    if config.record_crossings and k > 0:
        open_runs = run_len >= config.slide_steps
        for flat, col in zip(*np.nonzero(open_runs)):
            l, c = coord_of(int(flat))
            episodes.append((l, int(c), step - int(run_len[flat, col]) + 1, step))

    edge_names = [e.name for e in sheaf.edges]
    return Trajectory(
        steps=np.asarray(rec_steps),
        discord_total=np.asarray(rec_total),
        discord_per_edge={n: np.asarray(rec_edges[n]) for n in edge_names if n in rec_edges},
        output=np.stack(rec_out) if rec_out else np.zeros((0, dims[-1], 1)),
        crossings=crossings,
        sliding_episodes=episodes,
        final_cochain=state,
        converged=converged,
        steps_taken=step,
        final_velocity=float(final_vel),
        energy=np.asarray(rec_energy) if config.record_energy else None,
    )


def detect_crossings(z_history: np.ndarray, hidden_dims=None, eps_slide: float = 1e-6,
                     slide_steps: int = 20):
    """Crossings and sliding episodes from a dense (T, n_hidden) z history.

    A crossing is a sign flip (z >= 0 convention) between consecutive steps; a
    sliding episode is >= slide_steps consecutive steps with |z| < eps_slide.
    hidden_dims maps flat coordinates to (layer, coord); a single hidden layer
    is assumed when omitted.
    """
    zh = np.asarray(z_history, dtype=np.float64)
    if zh.ndim != 2:
        raise ConfigError("z_history must be (steps, hidden coords)")
    hidden_dims = list(hidden_dims) if hidden_dims is not None else [zh.shape[1]]
    offsets = np.cumsum([0] + hidden_dims)

    def coord_of(flat):
        l = int(np.searchsorted(offsets, flat, side="right"))
        return l, int(flat - offsets[l - 1])

    sign = zh >= 0
    crossings = []
    for t in range(1, zh.shape[0]):
        for flat in np.nonzero(sign[t] != sign[t - 1])[0]:
            l, c = coord_of(int(flat))
            crossings.append((t, l, c, +1 if sign[t, flat] else -1))
    episodes = []
    small = np.abs(zh) < eps_slide
    for flat in range(zh.shape[1]):
        run = 0
        for t in range(zh.shape[0]):
            if small[t, flat]:
                run += 1
            else:
                if run >= slide_steps:
                    l, c = coord_of(flat)
                    episodes.append((l, c, t - run, t - 1))
                run = 0
        if run >= slide_steps:
            l, c = coord_of(flat)
            episodes.append((l, c, zh.shape[0] - run, zh.shape[0] - 1))
    return crossings, episodes


# -- direct equilibria --------------------------------------------------------------

@dataclass
class EquilibriumInfo:
    iterations: int
    self_consistent: bool
    sliding: list[tuple[int, int]] = field(default_factory=list)  # (layer, coord) constrained to z = 0


def solve_equilibrium(sheaf: NeuralSheaf, x=None, targets=None, state: Cochain | None = None,
                      max_iters: int = 80) -> tuple[Cochain, EquilibriumInfo]:
    """Stationary state of the (possibly pinned) dynamics by direct linear solves.

    Freezes an activation pattern, solves the frozen-pattern stationarity
    system L w = c, re-derives the pattern from the solution and repeats until
    self-consistent. If the pattern cycles (the equilibrium sits on a ReLU
    boundary), the flip-flopping coordinates are constrained to z = 0 and the
    reduced system is re-solved. Identity output with quadratic potentials
    only; stiff soft pins (large gamma) are exactly what this path is for,
    since forward Euler would need dt ~ 1/gamma.
    """
    if sheaf.spec.output_activation != "identity":
        raise UnsupportedStructureError("direct equilibria are implemented for identity output")
    cold = state is None
    if cold:
        state = sheaf.cochain(x=x, init="zeros", targets=targets)
    width = state.width
    if width == 1:
        return _solve_column(sheaf, state, max_iters, cold)
    cols, infos = [], []
    for m in range(width):
        col = Cochain(sheaf, [b[:, m: m + 1].copy() for b in state.blocks])
        sol, info = _solve_column(sheaf, col, max_iters, cold)
        cols.append(sol)
        infos.append(info)
    merged = Cochain(sheaf, [np.concatenate([c.blocks[i] for c in cols], axis=1) for i in range(len(state.blocks))])
    info = EquilibriumInfo(
        iterations=max(i.iterations for i in infos),
        self_consistent=all(i.self_consistent for i in infos),
        sliding=sorted({s for i in infos for s in i.sliding}),
    )
    return merged, info


def _solve_column(sheaf: NeuralSheaf, state: Cochain, max_iters: int,
                  cold: bool = False) -> tuple[Cochain, EquilibriumInfo]:
    k = sheaf.k
    layout = free_layout(sheaf)
    if cold:
        # start from the forward-pass pattern of the boundary input
        from .model import forward_pass

        masks = [m.reshape(-1, 1) for m in forward_pass(sheaf.spec, state.x_input[:, 0]).pattern.masks]
    else:
        masks = _masks(sheaf, state.blocks)
    zero_blocks = [np.where(f[:, None], b, 0.0) for f, b in zip(sheaf.fixed, state.blocks)]
    constrained: set[int] = set()  # flat layout indices held at z = 0
    seen: dict[bytes, int] = {}
    sol_state = state.copy()
    it = 0
    self_consistent = False
    for it in range(max_iters):
        A = restricted_laplacian(sheaf, [m.ravel() for m in masks], reduced=True)
        g0, _ = _gradient(sheaf, zero_blocks, masks)
        _zero_fixed(sheaf, g0)
        c = -flatten_free(sheaf, g0, layout)[:, 0]
        if constrained:
            idx = sorted(constrained)
            A = A.copy()
            A[idx, :] = 0.0
            A[:, idx] = 0.0
            for i in idx:
                A[i, i] = 1.0
            c = c.copy()
            c[idx] = 0.0
        w = np.linalg.solve(A, c)
        for b in layout.blocks:
            sol_state.blocks[b.vertex][b.keep, 0] = w[b.start: b.stop]
        sol_state.sync_mirror()
        new_masks = _masks(sheaf, sol_state.blocks)
        if all((a == b).all() for a, b in zip(new_masks, masks)):
            self_consistent = True
            break
        key = b"".join(m.tobytes() for m in new_masks)
        if key in seen:
            flips = _flat_mask_diff(sheaf, layout, masks, new_masks)
            constrained |= flips
            seen.clear()
        else:
            seen[key] = it
        masks = new_masks
    sliding = []
    for flat in sorted(constrained):
        for b in layout.blocks:
            if b.start <= flat < b.stop and b.name.startswith("z"):
                sliding.append((int(b.name[1:]), int(b.keep[flat - b.start])))
    return sol_state, EquilibriumInfo(iterations=it + 1, self_consistent=self_consistent, sliding=sliding)


def _flat_mask_diff(sheaf, layout, masks_a, masks_b) -> set[int]:
    flips: set[int] = set()
    for l in range(1, sheaf.k + 1):
        diff = np.flatnonzero(masks_a[l - 1].ravel() != masks_b[l - 1].ravel())
        for b in layout.blocks:
            if b.name == f"z{l}":
                keep_pos = {coord: b.start + i for i, coord in enumerate(b.keep)}
                for c in diff:
                    if int(c) in keep_pos:
                        flips.add(keep_pos[int(c)])
    return flips
