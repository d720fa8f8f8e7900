"""Zero-data calibration of codebooks and assignment ratios.

The floating-point model first generates denoising trajectories from
pure noise, caching every block's input and output at every timestep.
Calibration then runs the quantized blocks on those cached FP inputs —
never on their own outputs, so error cannot accumulate across steps —
and descends a joint objective L = lambda_d * L_d + lambda_r * L_r:
L_d matches block outputs, L_r pushes each sub-vector's candidate
ratios toward one-hot. When a layer's L_r falls below the freeze
threshold its assignments are finalized and only its codebook keeps
training. No calibration images or labels are involved at any point.

Also here: the per-codeword gradient-coherence diagnostic (do
sub-vectors sharing a codeword pull it the same way?) and the
candidate-position tally of where finalized assignments land.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import dit, tensor as T, vq
from .modelio import parse_container, write_container
from .tensor import Tensor


# smallest ratio kept on the simplex; log(floor) stays well inside float32
_RATIO_FLOOR = 1e-12


class CalibrationDiverged(Exception):
    """Loss became non-finite; carries a diagnostic snapshot."""

    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass(frozen=True)
class CalibConfig:
    lambda_d: float = 1.0
    lambda_r: float = 1.0
    lambda_freeze: float = 1e-4
    lr_ratio: float = 5e-2
    lr_codebook: float = 1e-4
    batch: int = 16
    iters: int = 500
    n: int = 2
    mode: str = "full"  # full | codebook_only | none
    seed: int = 0
    tune_extras: bool = False  # also step in-block biases (baseline protocol)

    def __post_init__(self):
        if self.lambda_d < 0 or self.lambda_r < 0:
            raise ValueError("loss weights must be non-negative")
        if self.lr_ratio <= 0 or self.lr_codebook < 0:
            raise ValueError("learning rates must be positive")
        if self.n < 1:
            raise ValueError("candidate count must be >= 1")
        if self.batch < 1 or self.iters < 0:
            raise ValueError("bad batch/iteration budget")
        if self.mode not in ("full", "codebook_only", "none"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.lambda_freeze <= 0:
            raise ValueError("freeze threshold must be positive")


# ---------------------------------------------------------------------------
# trajectory cache
# ---------------------------------------------------------------------------


@dataclass
class TrajectoryCache:
    """FP denoising trajectories with per-block IO at every timestep."""

    config: dit.DiTConfig
    trajectories: list[dit.Trajectory]

    def __post_init__(self):
        t_expect = list(range(self.config.timesteps, 0, -1))
        for traj in self.trajectories:
            if [s.t for s in traj.steps] != t_expect:
                raise ValueError("trajectory must cover every timestep T..1")
            for step in traj.steps:
                if len(step.block_inputs) != self.config.depth:
                    raise ValueError("trajectory lacks per-block records")

    @property
    def size(self) -> int:
        return len(self.trajectories)

    def step(self, traj_idx: int, t: int) -> dit.StepRecord:
        traj = self.trajectories[traj_idx]
        rec = traj.steps[self.config.timesteps - t]
        assert rec.t == t
        return rec


def build_cache(
    fp_params: dict[str, np.ndarray],
    config: dit.DiTConfig,
    num_trajectories: int = 16,
    seed: int = 0,
) -> TrajectoryCache:
    """Sample trajectories from the FP model, labels cycling over the
    class set, seeds drawn sequentially from ``seed``."""
    trajs = []
    for i in range(num_trajectories):
        y = 1 + i % config.classes
        trajs.append(
            dit.ddpm_sample(fp_params, y=y, config=config, seed=seed + i)
        )
    return TrajectoryCache(config=config, trajectories=trajs)


def save_cache(path, cache: TrajectoryCache) -> None:
    tensors: dict[str, np.ndarray] = {}
    meta = {
        "kind": "trajectory-cache",
        "count": str(cache.size),
        "config": json.dumps(cache.config.to_dict(), sort_keys=True),
    }
    for i, traj in enumerate(cache.trajectories):
        meta[f"traj{i}.y"] = str(traj.y)
        meta[f"traj{i}.seed"] = str(traj.seed)
        tensors[f"traj{i}.final"] = traj.final
        for step in traj.steps:
            base = f"traj{i}.t{step.t}"
            tensors[f"{base}.z"] = step.z
            for b, (zi, zo) in enumerate(zip(step.block_inputs, step.block_outputs)):
                tensors[f"{base}.b{b}.in"] = zi
                tensors[f"{base}.b{b}.out"] = zo
    with open(path, "wb") as f:
        f.write(write_container(tensors, meta))


def load_cache(path) -> TrajectoryCache:
    with open(path, "rb") as f:
        container = parse_container(f.read())
    meta = container.metadata
    if meta.get("kind") != "trajectory-cache":
        raise ValueError("not a trajectory cache file")
    config = dit.DiTConfig.from_dict(json.loads(meta["config"]))
    trajs = []
    for i in range(int(meta["count"])):
        steps = []
        for t in range(config.timesteps, 0, -1):
            base = f"traj{i}.t{t}"
            steps.append(
                dit.StepRecord(
                    t=t,
                    z=container.tensors[f"{base}.z"],
                    block_inputs=[
                        container.tensors[f"{base}.b{b}.in"]
                        for b in range(config.depth)
                    ],
                    block_outputs=[
                        container.tensors[f"{base}.b{b}.out"]
                        for b in range(config.depth)
                    ],
                )
            )
        trajs.append(
            dit.Trajectory(
                y=int(meta[f"traj{i}.y"]),
                seed=int(meta[f"traj{i}.seed"]),
                steps=steps,
                final=container.tensors[f"traj{i}.final"],
            )
        )
    return TrajectoryCache(config=config, trajectories=trajs)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def loss_ld(fp_outputs, q_outputs) -> Tensor:
    """Sum over blocks of the per-element mean squared output gap for a
    single cached sample."""
    if len(fp_outputs) != len(q_outputs):
        raise ValueError("block lists must align")
    total = None
    for fp, q in zip(fp_outputs, q_outputs):
        q = q if isinstance(q, Tensor) else Tensor(q)
        if tuple(np.shape(fp)) != q.shape:
            raise ValueError(f"block output shapes differ: {np.shape(fp)} vs {q.shape}")
        term = T.mean_square_error(q, Tensor(np.asarray(fp, dtype=np.float32)))
        total = term if total is None else T.add(total, term)
    if total is None:
        raise ValueError("need at least one block")
    return total


def loss_lr(ratios: np.ndarray) -> float:
    """Mean over sub-vectors of sum_n (1 - |2 r_n - 1|); 0 iff one-hot."""
    r = np.asarray(ratios, dtype=np.float64)
    if r.ndim != 2:
        raise ValueError(f"expected (subvectors, n) ratios, got shape {r.shape}")
    return float((1.0 - np.abs(2.0 * r - 1.0)).sum() / r.shape[0])


def _pull_gradient(r: np.ndarray, rows: int, lam: float) -> np.ndarray:
    """Closed-form subgradient of the one-hot ratio loss for one layer.

    ``1 - |2r - 1|`` is piecewise linear, so its gradient is a constant
    push away from 1/2 on either side; keeping it out of the autograd
    graph lets the tie at exactly r = 1/2 be broken deterministically.
    The uniform init for n = 2 sits exactly on that kink, and there the
    subgradient is chosen to favor position 0 — the nearest codeword,
    matching the lowest-index tie policy used everywhere else.  Without
    it the first step off the uniform init is decided by whichever way
    the first minibatch happens to lean, and assignment selection
    degrades to a coin flip.  With it, a row only leaves its nearest
    codeword when the data gradient overpowers the pull for long enough
    to cross back over the kink.
    """
    sgn = np.sign(2.0 * r - 1.0)
    tie = sgn == 0.0
    if tie.any():
        keep = np.zeros(r.shape, dtype=bool)
        keep[:, 0] = True
        sgn = np.where(tie & keep, 1.0, np.where(tie, -1.0, sgn))
    return (-2.0 * lam / rows) * sgn.astype(np.float32)


# ---------------------------------------------------------------------------
# layer state
# ---------------------------------------------------------------------------


@dataclass
class LayerState:
    """One quantized layer mid-calibration.

    ``ratios`` is the working calibration parameter: the per-candidate
    mixing weights updated directly by the optimizer and projected back
    onto the simplex.  It starts from the candidate set's softmax ratios
    and is folded back into the stored logits whenever the layer
    freezes, so the durable representation stays the candidate set.
    """

    name: str
    shape: vq.LayerShape
    codebook: np.ndarray  # (k, d) float32, updated in place over the run
    cand: vq.CandidateSet
    assignments: np.ndarray | None = None  # fixed once frozen
    ratios: np.ndarray | None = None  # (S, n) float32 working copy

    def hard_assignments(self) -> np.ndarray:
        if self.assignments is not None:
            return self.assignments
        return vq.finalize(self.cand)

    def hard_weight(self) -> np.ndarray:
        return vq.reconstruct_hard(self.codebook, self.hard_assignments(), self.shape)

    def sync_logits(self) -> None:
        """Store the working ratios as log-space logits on the candidate set.

        log is monotone, so argmax and tie order survive; softmax of the
        stored logits recovers the ratios up to normalization.
        """
        if self.ratios is not None:
            self.cand.logits = np.log(np.maximum(self.ratios, 1e-30)).astype(
                np.float32
            )

    def snap_ratios(self) -> None:
        """Collapse the working ratios onto the winning candidate.

        Selecting an assignment is final: once a row's choice is made
        its mixing weight is exactly one, so the weighted and the hard
        reconstruction coincide and the stored state carries no residual
        softness from rows that were still in flight when the layer's
        mean crossed the freeze threshold.  Ties go to the lowest
        position, i.e. the nearer codeword.
        """
        if self.ratios is not None:
            win = np.argmax(self.ratios, axis=1)  # first max wins ties
            onehot = np.zeros_like(self.ratios)
            onehot[np.arange(len(win)), win] = 1.0
            self.ratios = onehot


def clone_states(states: dict[str, LayerState]) -> dict[str, LayerState]:
    out = {}
    for name, s in states.items():
        out[name] = LayerState(
            name=s.name,
            shape=s.shape,
            codebook=s.codebook.copy(),
            cand=vq.CandidateSet(
                candidates=s.cand.candidates.copy(),
                logits=s.cand.logits.copy(),
                frozen=s.cand.frozen,
            ),
            assignments=None if s.assignments is None else s.assignments.copy(),
            ratios=None if s.ratios is None else s.ratios.copy(),
        )
    return out


def quantize_layers(
    params: dict[str, np.ndarray],
    names: list[str],
    d: int,
    k: int,
    n: int,
    seed: int = 0,
) -> dict[str, LayerState]:
    """K-Means codebook + top-n candidate sets for every named matrix.

    Each layer gets its own deterministic seed so layers are
    independent of dict ordering.
    """
    states: dict[str, LayerState] = {}
    for idx, name in enumerate(sorted(names)):
        w = params[name]
        shape = vq.LayerShape(o=w.shape[0], i=w.shape[1], d=d, k=k)
        sub = vq.split_subvectors(w, d)
        res = vq.kmeans(sub, k=k, seed=seed + idx)
        cand = vq.build_candidates(sub, res.codebook, n=n)
        states[name] = LayerState(
            name=name, shape=shape, codebook=res.codebook, cand=cand
        )
    return states


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class RMSProp:
    """Running-mean-of-squared-gradients scaling, one slot per key."""

    def __init__(self, decay: float = 0.99, eps: float = 1e-8):
        self.decay = decay
        self.eps = eps
        self.sq: dict[str, np.ndarray] = {}

    def step(self, key: str, grad: np.ndarray, lr: float) -> np.ndarray:
        g = grad.astype(np.float64)
        v = self.sq.get(key)
        if v is None:
            # seed the running mean with the first observation so the first
            # step is lr-sized rather than lr/sqrt(1-decay) (a 10x overshoot
            # that would hard-commit ratios on a single minibatch sign)
            v = g * g
        else:
            v = self.decay * v + (1.0 - self.decay) * g * g
        self.sq[key] = v
        return (lr * g / (np.sqrt(v) + self.eps)).astype(np.float32)


# ---------------------------------------------------------------------------
# calibration loop
# ---------------------------------------------------------------------------


@dataclass
class CalibResult:
    states: dict[str, LayerState]
    assignments: dict[str, np.ndarray]  # finalized for every layer
    log: list[dict] = field(repr=False)
    frozen_at: dict[str, int] = field(default_factory=dict)  # name -> iter


def _restrict_candidates(states: dict[str, LayerState], n: int) -> None:
    for s in states.values():
        if s.cand.n > n:
            s.cand = vq.CandidateSet(
                candidates=s.cand.candidates[:, :n].copy(),
                logits=s.cand.logits[:, :n].copy(),
                frozen=s.cand.frozen,
            )


def _layer_weight_tensor(state: LayerState, extras: dict) -> Tensor:
    """Differentiable reconstructed weight; leaves land in ``extras``.

    Unfrozen layers mix candidate codewords with the working ratio
    array as a leaf: the optimizer steps the ratios themselves, so the
    pull toward one-hot keeps a constant gradient magnitude all the way
    to the boundary instead of vanishing through a softmax Jacobian.
    """
    cb = Tensor(state.codebook, requires_grad=True)
    extras["codebook"] = cb
    if state.cand.frozen:
        sub = T.gather_rows(cb, state.assignments)
        extras["ratios"] = None
    else:
        if state.ratios is None:
            state.ratios = state.cand.ratios().astype(np.float32)
        ratios = Tensor(state.ratios, requires_grad=True)
        sub = T.weighted_rows(cb, ratios, state.cand.candidates)
        extras["ratios"] = ratios
    return T.reshape(sub, (state.shape.o, state.shape.i))


def calibrate(
    fp_params: dict[str, np.ndarray],
    states: dict[str, LayerState],
    config: dit.DiTConfig,
    cal: CalibConfig,
    cache: TrajectoryCache,
) -> CalibResult:
    """Joint codebook/ratio descent over cached FP block IO.

    Mutates ``states`` in place (codebooks, ratios, freeze flags) and
    returns them with finalized assignments for every layer. Candidate
    ratios are optimized directly — adaptive steps on the ratio values,
    floored and renormalized back onto the simplex — so the one-hot
    pull keeps full strength near the boundary instead of vanishing
    through a softmax Jacobian. Layers freeze individually when their
    ratio loss drops below ``cal.lambda_freeze``; frozen layers keep
    receiving codebook updates. ``mode="codebook_only"`` restricts
    candidate sets to the single nearest codeword, whose ratio the
    simplex projection pins at exactly 1, so L_r is zero and every
    layer freezes on the first iteration; ``mode="none"`` skips updates
    entirely.
    """
    layer_names = sorted(states)
    log: list[dict] = []
    frozen_at: dict[str, int] = {}
    if cal.mode == "none":
        assignments = {n: states[n].hard_assignments() for n in layer_names}
        for n in layer_names:
            states[n].assignments = assignments[n]
            states[n].cand.frozen = True
        return CalibResult(states=states, assignments=assignments, log=log)

    n_eff = 1 if cal.mode == "codebook_only" else cal.n
    _restrict_candidates(states, n_eff)

    fp_tensors = dit.param_tensors(fp_params)
    rng = np.random.default_rng(cal.seed)
    opt = RMSProp()
    # optional baseline protocol: also tune in-block 1-D parameters
    extra_names = (
        [
            name
            for name, arr in fp_params.items()
            if name.startswith("block") and arr.ndim == 1
        ]
        if cal.tune_extras
        else []
    )
    tuned_extras = {name: fp_params[name].copy() for name in extra_names}

    for it in range(cal.iters):
        traj_idx = rng.integers(cache.size, size=cal.batch)
        ts = rng.integers(1, config.timesteps + 1, size=cal.batch)

        leaves: dict[str, dict] = {}
        p: dict[str, Tensor] = dict(fp_tensors)
        for name in layer_names:
            slots: dict = {}
            p[name] = _layer_weight_tensor(states[name], slots)
            leaves[name] = slots
        extra_leaves = {}
        for name in extra_names:
            t_leaf = Tensor(tuned_extras[name], requires_grad=True)
            p[name] = t_leaf
            extra_leaves[name] = t_leaf

        ld_sum = None
        for bi in range(cal.batch):
            rec = cache.step(int(traj_idx[bi]), int(ts[bi]))
            y = cache.trajectories[int(traj_idx[bi])].y
            c = dit.condition_embed(fp_tensors, int(ts[bi]), y, config)
            q_outs = []
            for b in range(config.depth):
                z_in = Tensor(rec.block_inputs[b])
                q_outs.append(dit.dit_block(z_in, c, p, b, config.heads))
            sample_ld = loss_ld(rec.block_outputs, q_outs)
            ld_sum = sample_ld if ld_sum is None else T.add(ld_sum, sample_ld)
        ld_t = T.scale(ld_sum, 1.0 / cal.batch)
        total = T.scale(ld_t, cal.lambda_d)

        # the piecewise-linear ratio loss lives outside the graph: its
        # value is tracked for logging and freezing, its subgradient is
        # added to the ratio gradients in closed form (_pull_gradient)
        lr_val = sum(
            loss_lr(states[name].ratios)
            for name in layer_names
            if states[name].ratios is not None and not states[name].cand.frozen
        )

        if not np.isfinite(total.item()):
            raise CalibrationDiverged(
                f"loss became non-finite at iteration {it}",
                snapshot={
                    "iter": it,
                    "L_d": ld_t.item(),
                    "L_r": lr_val,
                    "t": ts.tolist(),
                    "last_records": log[-5:],
                },
            )
        total.backward()

        for name in layer_names:
            state = states[name]
            slots = leaves[name]
            state.codebook -= opt.step(
                f"{name}.codebook", slots["codebook"].grad, cal.lr_codebook
            )
            if slots["ratios"] is not None:
                g = slots["ratios"].grad + _pull_gradient(
                    state.ratios, state.shape.num_subvectors, cal.lambda_r
                )
                delta = opt.step(f"{name}.ratios", g, cal.lr_ratio)
                # direct ratio descent, then back onto the simplex: floor and
                # renormalize. Common-mode movement of a row cancels out, so
                # only the differential (which candidate wins) survives, and
                # an n=1 row is pinned at exactly 1.
                r = np.clip(state.ratios - delta, _RATIO_FLOOR, None)
                state.ratios = (r / r.sum(axis=1, keepdims=True)).astype(np.float32)
        for name in extra_names:
            tuned_extras[name] -= opt.step(
                f"{name}.extra", extra_leaves[name].grad, cal.lr_codebook
            )
            fp_tensors[name] = Tensor(tuned_extras[name])

        for name in layer_names:
            state = states[name]
            if not np.all(np.isfinite(state.codebook)) or (
                state.ratios is not None and not np.all(np.isfinite(state.ratios))
            ):
                raise CalibrationDiverged(
                    f"layer {name!r} left the finite range at iteration {it}",
                    snapshot={
                        "iter": it,
                        "layer": name,
                        "L_d": ld_t.item(),
                        "L_r": lr_val,
                        "last_records": log[-5:],
                    },
                )

        for name in layer_names:
            state = states[name]
            if state.cand.frozen:
                continue
            working = (
                state.ratios if state.ratios is not None else state.cand.ratios()
            )
            if loss_lr(working) < cal.lambda_freeze:
                state.snap_ratios()
                state.sync_logits()
                state.assignments = vq.finalize(state.cand)
                state.cand.frozen = True
                frozen_at[name] = it

        log.append(
            {
                "iter": it,
                "t": ts.tolist(),
                "L_d": round(ld_t.item(), 10),
                "L_r": round(lr_val, 10),
                "L": round(cal.lambda_d * ld_t.item() + cal.lambda_r * lr_val, 10),
                "frozen": sum(1 for s in states.values() if s.cand.frozen),
            }
        )

    assignments = {}
    for name in layer_names:
        state = states[name]
        if state.assignments is None:
            state.sync_logits()
            state.assignments = vq.finalize(state.cand)
        assignments[name] = state.assignments
    return CalibResult(
        states=states, assignments=assignments, log=log, frozen_at=frozen_at
    )


# ---------------------------------------------------------------------------
# evaluation over the cache
# ---------------------------------------------------------------------------


def block_output_error(
    fp_params: dict[str, np.ndarray],
    weights: dict[str, np.ndarray],
    config: dit.DiTConfig,
    cache: TrajectoryCache,
    limit: int | None = None,
) -> float:
    """Mean over cached samples of the summed per-block output MSE when
    the named weights are replaced by ``weights``; the quantized blocks
    read cached FP inputs."""
    p = dit.param_tensors(fp_params)
    for name, w in weights.items():
        p[name] = Tensor(w)
    total = 0.0
    count = 0
    for ti, traj in enumerate(cache.trajectories):
        for rec in traj.steps:
            if limit is not None and count >= limit:
                return total / count
            c = dit.condition_embed(p, rec.t, traj.y, config)
            sample = 0.0
            for b in range(config.depth):
                out = dit.dit_block(Tensor(rec.block_inputs[b]), c, p, b, config.heads)
                diff = out.data.astype(np.float64) - rec.block_outputs[b]
                sample += float((diff * diff).mean())
            total += sample
            count += 1
    if count == 0:
        raise ValueError("empty cache")
    return total / count


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------


def mean_pairwise_cosine(vectors: np.ndarray) -> float:
    """Mean cosine over all unordered pairs of the given row vectors."""
    v = np.asarray(vectors, dtype=np.float64)
    norms = np.linalg.norm(v, axis=1)
    keep = norms > 1e-12
    v = v[keep] / norms[keep][:, None]
    m = v.shape[0]
    if m < 2:
        raise ValueError("need at least two non-degenerate vectors")
    s = v.sum(axis=0)
    return float((s @ s - m) / (m * (m - 1)))


def _subvector_grads(
    fp_params: dict[str, np.ndarray],
    states: dict[str, LayerState],
    assignments: dict[str, np.ndarray],
    config: dit.DiTConfig,
    cache: TrajectoryCache,
    samples: list[tuple[int, int]],
) -> dict[str, np.ndarray]:
    """d L_d / d w-hat per sub-vector, from hard-reconstructed weights."""
    p = dit.param_tensors(fp_params)
    leaves: dict[str, Tensor] = {}
    for name, state in states.items():
        w_hat = vq.reconstruct_hard(state.codebook, assignments[name], state.shape)
        leaf = Tensor(w_hat, requires_grad=True)
        leaves[name] = leaf
        p[name] = leaf
    total = None
    for traj_idx, t in samples:
        rec = cache.step(traj_idx, t)
        y = cache.trajectories[traj_idx].y
        c = dit.condition_embed(p, t, y, config)
        q_outs = [
            dit.dit_block(Tensor(rec.block_inputs[b]), c, p, b, config.heads)
            for b in range(config.depth)
        ]
        term = loss_ld(rec.block_outputs, q_outs)
        total = term if total is None else T.add(total, term)
    T.scale(total, 1.0 / len(samples)).backward()
    return {
        name: vq.split_subvectors(leaf.grad, states[name].shape.d)
        for name, leaf in leaves.items()
    }


@dataclass
class GradCosineReport:
    """Per-codeword gradient coherence before vs after assignment
    calibration (codebooks fixed throughout)."""

    before: dict[str, np.ndarray]  # layer -> cosines of codewords with >= 2 members
    after: dict[str, np.ndarray]
    mean_before: float
    mean_after: float


def _codeword_cosines(
    grads: np.ndarray, assignments: np.ndarray, k: int
) -> np.ndarray:
    out = []
    order = np.argsort(assignments, kind="stable")
    sorted_assign = assignments[order]
    bounds = np.searchsorted(sorted_assign, np.arange(k + 1))
    for c in range(k):
        members = order[bounds[c] : bounds[c + 1]]
        if members.size < 2:
            continue
        g = grads[members]
        norms = np.linalg.norm(g, axis=1)
        g = g[norms > 1e-12]
        if g.shape[0] < 2:
            continue
        out.append(mean_pairwise_cosine(g))
    return np.asarray(out, dtype=np.float64)


def grad_cosine_report(
    fp_params: dict[str, np.ndarray],
    states: dict[str, LayerState],
    config: dit.DiTConfig,
    cache: TrajectoryCache,
    cal: CalibConfig,
    sample_size: int = 16,
) -> GradCosineReport:
    """Measure gradient coherence per codeword, then recalibrate the
    assignments only (codebook learning rate forced to zero) and
    measure again with the same cached samples."""
    rng = np.random.default_rng(cal.seed)
    samples = [
        (int(rng.integers(cache.size)), int(rng.integers(1, config.timesteps + 1)))
        for _ in range(sample_size)
    ]

    before_states = clone_states(states)
    before_assign = {n: s.cand.candidates[:, 0].copy() for n, s in before_states.items()}
    grads0 = _subvector_grads(
        fp_params, before_states, before_assign, config, cache, samples
    )
    before = {
        n: _codeword_cosines(grads0[n], before_assign[n], s.shape.k)
        for n, s in before_states.items()
    }

    assign_only = CalibConfig(
        lambda_d=cal.lambda_d,
        lambda_r=cal.lambda_r,
        lambda_freeze=cal.lambda_freeze,
        lr_ratio=cal.lr_ratio,
        lr_codebook=0.0,
        batch=cal.batch,
        iters=cal.iters,
        n=cal.n,
        mode="full",
        seed=cal.seed,
    )
    after_states = clone_states(states)
    result = calibrate(fp_params, after_states, config, assign_only, cache)
    grads1 = _subvector_grads(
        fp_params, after_states, result.assignments, config, cache, samples
    )
    after = {
        n: _codeword_cosines(grads1[n], result.assignments[n], s.shape.k)
        for n, s in after_states.items()
    }

    def pooled(d):
        vals = np.concatenate([v for v in d.values() if v.size]) if d else np.array([])
        return float(vals.mean()) if vals.size else float("nan")

    return GradCosineReport(
        before=before,
        after=after,
        mean_before=pooled(before),
        mean_after=pooled(after),
    )


def candidate_position_report(
    assignments: np.ndarray, cand: vq.CandidateSet
) -> np.ndarray:
    """Fraction of final assignments landing at each candidate position
    (position 0 = nearest codeword at build time)."""
    matches = assignments[:, None] == cand.candidates
    if not matches.any(axis=1).all():
        raise ValueError("some assignment is not among its candidates")
    pos = np.argmax(matches, axis=1)
    counts = np.bincount(pos, minlength=cand.n)
    return counts / counts.sum()
