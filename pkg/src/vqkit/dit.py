"""Desk-scale conditional diffusion transformer over token latents.

The model is N residual blocks, each adaptive-layer-norm + multi-head
self-attention followed by adaptive-layer-norm + pointwise feedforward,
wrapped in input/output projections. Timestep and class label embed
into a conditioning vector c; each adaLN instance regresses its own
(gamma, beta) from c with a single linear map and computes
LN(z)*(1+gamma)+beta. No gating term, no patchify, no learned sigma:
the blocks are the quantization subject, everything else is plumbing.

Weights live in a flat name->array dict; forward functions take the
same dict with arrays wrapped as tensors so gradients can flow to any
subset of parameters. Matrices are stored (out, in), matching the
o x i layout the quantizer slices into row sub-vectors.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

BETA_START = 1e-4
BETA_END = 2e-2

# per-block 2-D weights eligible for quantization, in forward order
QUANT_SUFFIXES = (
    "adaln1.w",
    "attn.wq",
    "attn.wk",
    "attn.wv",
    "attn.wo",
    "adaln2.w",
    "pf.w1",
    "pf.w2",
)


@dataclass(frozen=True)
class DiTConfig:
    depth: int = 2
    d_in: int = 64
    heads: int = 4
    n_tok: int = 16
    classes: int = 10
    timesteps: int = 10
    cfg_scale: float = 1.0

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.heads < 1 or self.d_in % self.heads != 0:
            raise ValueError(f"heads={self.heads} must divide d_in={self.d_in}")
        if self.d_in % 2 != 0:
            raise ValueError("d_in must be even for the sinusoidal embedding")
        if self.timesteps < 2:
            raise ValueError("need at least 2 timesteps")
        if self.classes < 1:
            raise ValueError("need at least 1 class")
        if self.n_tok < 1:
            raise ValueError("need at least 1 token")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DiTConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


def quantizable_layer_names(config: DiTConfig) -> list[str]:
    return [
        f"block{b}.{suffix}"
        for b in range(config.depth)
        for suffix in QUANT_SUFFIXES
    ]


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


def init_params(config: DiTConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """Random float32 weights; matrices are (out, in), fan-in scaled.

    Class row 0 is the reserved null class used by classifier-free
    guidance; labels occupy rows 1..classes.
    """
    rng = np.random.default_rng(seed)
    d = config.d_in
    p: dict[str, np.ndarray] = {}

    def mat(out_w, in_w, gain=1.0):
        return (gain / np.sqrt(in_w) * rng.standard_normal((out_w, in_w))).astype(
            np.float32
        )

    def zeros(width):
        return np.zeros(width, dtype=np.float32)

    p["proj_in.w"], p["proj_in.b"] = mat(d, d), zeros(d)
    p["proj_out.w"], p["proj_out.b"] = mat(d, d), zeros(d)
    p["cond.time1.w"], p["cond.time1.b"] = mat(d, d), zeros(d)
    p["cond.time2.w"], p["cond.time2.b"] = mat(d, d), zeros(d)
    p["cond.class_emb"] = rng.standard_normal((config.classes + 1, d)).astype(
        np.float32
    )
    for b in range(config.depth):
        # small gain keeps the regressed (gamma, beta) mild at init
        p[f"block{b}.adaln1.w"] = mat(2 * d, d, gain=0.1)
        p[f"block{b}.adaln1.b"] = zeros(2 * d)
        p[f"block{b}.adaln2.w"] = mat(2 * d, d, gain=0.1)
        p[f"block{b}.adaln2.b"] = zeros(2 * d)
        for proj in ("q", "k", "v", "o"):
            p[f"block{b}.attn.w{proj}"] = mat(d, d)
            p[f"block{b}.attn.b{proj}"] = zeros(d)
        p[f"block{b}.pf.w1"], p[f"block{b}.pf.b1"] = mat(4 * d, d), zeros(4 * d)
        p[f"block{b}.pf.w2"], p[f"block{b}.pf.b2"] = mat(d, 4 * d), zeros(d)
    return p


def param_tensors(params: dict[str, np.ndarray]) -> dict[str, Tensor]:
    """Wrap a weight dict as constant tensors for forward evaluation."""
    return {k: Tensor(v) for k, v in params.items()}


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    # weights are (out, in); activations are (rows, in)
    return T.add(T.matmul(x, T.transpose(w)), b)


# ---------------------------------------------------------------------------
# conditioning
# ---------------------------------------------------------------------------


def sinusoidal_embed(t: int, dim: int) -> np.ndarray:
    """Fixed (1, dim) timestep embedding: cos/sin halves over a
    log-spaced frequency ladder."""
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half, dtype=np.float64) / half)
    ang = float(t) * freqs
    return np.concatenate([np.cos(ang), np.sin(ang)])[None, :].astype(np.float32)


def condition_embed(p: dict[str, Tensor], t: int, y: int, config: DiTConfig) -> Tensor:
    """Conditioning row c = MLP(sinusoidal(t)) + class_emb[y], shape (1, d_in).

    y = 0 selects the reserved null class.
    """
    if not 1 <= t <= config.timesteps:
        raise ValueError(f"timestep {t} outside [1, {config.timesteps}]")
    if not 0 <= y <= config.classes:
        raise ValueError(f"class label {y} outside [0, {config.classes}]")
    h = Tensor(sinusoidal_embed(t, config.d_in))
    h = _linear(h, p["cond.time1.w"], p["cond.time1.b"])
    h = T.gelu(h)
    h = _linear(h, p["cond.time2.w"], p["cond.time2.b"])
    cls = T.gather_rows(p["cond.class_emb"], np.array([y]))
    return T.add(h, cls)


# ---------------------------------------------------------------------------
# block pieces
# ---------------------------------------------------------------------------


def adaln(z: Tensor, c: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """LN(z) * (1 + gamma) + beta with (gamma, beta) = w c + b split in half."""
    d = z.shape[-1]
    if w.shape != (2 * d, d):
        raise ValueError(f"adaln map must be {2 * d}x{d}, got {w.shape}")
    gb = _linear(c, w, b)  # (1, 2d)
    gamma = T.slice_last(gb, 0, d)
    beta = T.slice_last(gb, d, 2 * d)
    return T.add(T.mul(T.layer_norm(z), T.add_const(gamma, 1.0)), beta)


def mhsa(
    x: Tensor,
    p: dict[str, Tensor],
    prefix: str,
    heads: int,
    attn_sink: list | None = None,
) -> Tensor:
    """Scaled dot-product self-attention over tokens, heads as
    contiguous column groups. ``attn_sink`` collects each head's
    post-softmax matrix as a plain array."""
    d = x.shape[-1]
    dh = d // heads
    q = _linear(x, p[f"{prefix}.wq"], p[f"{prefix}.bq"])
    k = _linear(x, p[f"{prefix}.wk"], p[f"{prefix}.bk"])
    v = _linear(x, p[f"{prefix}.wv"], p[f"{prefix}.bv"])
    outs = []
    for h in range(heads):
        lo, hi = h * dh, (h + 1) * dh
        qh = T.slice_last(q, lo, hi)
        kh = T.slice_last(k, lo, hi)
        vh = T.slice_last(v, lo, hi)
        logits = T.scale(T.matmul(qh, T.transpose(kh)), 1.0 / np.sqrt(dh))
        attn = T.softmax(logits)
        if attn_sink is not None:
            attn_sink.append(attn.data.copy())
        outs.append(T.matmul(attn, vh))
    return _linear(T.concat_last(outs), p[f"{prefix}.wo"], p[f"{prefix}.bo"])


def pointwise_ff(x: Tensor, p: dict[str, Tensor], prefix: str) -> Tensor:
    h = T.gelu(T.add(T.matmul(x, T.transpose(p[f"{prefix}.w1"])), p[f"{prefix}.b1"]))
    return T.add(T.matmul(h, T.transpose(p[f"{prefix}.w2"])), p[f"{prefix}.b2"])


def dit_block(
    z: Tensor,
    c: Tensor,
    p: dict[str, Tensor],
    block: int,
    heads: int,
    attn_sink: list | None = None,
) -> Tensor:
    pre = f"block{block}"
    z = T.add(
        z,
        mhsa(
            adaln(z, c, p[f"{pre}.adaln1.w"], p[f"{pre}.adaln1.b"]),
            p,
            f"{pre}.attn",
            heads,
            attn_sink,
        ),
    )
    z = T.add(z, pointwise_ff(adaln(z, c, p[f"{pre}.adaln2.w"], p[f"{pre}.adaln2.b"]), p, f"{pre}.pf"))
    return z


def model_forward(
    p: dict[str, Tensor],
    z: Tensor,
    t: int,
    y: int,
    config: DiTConfig,
    record: list | None = None,
    attn_sink: list | None = None,
) -> Tensor:
    """Predict per-token noise for latent z at timestep t, label y.

    ``record``, when given, receives one (block_input, block_output)
    array pair per block.
    """
    if z.shape != (config.n_tok, config.d_in):
        raise ValueError(
            f"latent must be {config.n_tok}x{config.d_in}, got {z.shape}"
        )
    c = condition_embed(p, t, y, config)
    h = _linear(z, p["proj_in.w"], p["proj_in.b"])
    for b in range(config.depth):
        before = h.data.copy()
        h = dit_block(h, c, p, b, config.heads, attn_sink)
        if record is not None:
            record.append((before, h.data.copy()))
    return _linear(h, p["proj_out.w"], p["proj_out.b"])


# ---------------------------------------------------------------------------
# DDPM sampling
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray  # (T,) float64, betas[idx] covers timestep idx+1
    alphas: np.ndarray
    alpha_bars: np.ndarray


def linear_schedule(timesteps: int) -> NoiseSchedule:
    betas = np.linspace(BETA_START, BETA_END, timesteps, dtype=np.float64)
    alphas = 1.0 - betas
    return NoiseSchedule(
        betas=betas, alphas=alphas, alpha_bars=np.cumprod(alphas)
    )


@dataclass
class SampleState:
    """Denoising state: latent z_t at timestep t for class label y."""

    z: np.ndarray
    t: int
    y: int

    def __post_init__(self):
        if self.t < 1:
            raise ValueError(f"timestep index must be >= 1, got {self.t}")


@dataclass
class StepRecord:
    t: int
    z: np.ndarray  # latent entering this step
    block_inputs: list[np.ndarray]
    block_outputs: list[np.ndarray]


@dataclass
class Trajectory:
    y: int
    seed: int
    steps: list[StepRecord] = field(default_factory=list)  # ordered t = T..1
    final: np.ndarray | None = None


def ddpm_sample(
    params: dict[str, np.ndarray],
    y: int,
    config: DiTConfig,
    seed: int = 0,
    collect_blocks: bool = True,
) -> Trajectory:
    """Ancestral sampling from pure noise under the linear beta schedule.

    With cfg_scale != 1 each step makes a conditional and a null-class
    pass and combines them as eps_u + cfg_scale*(eps_c - eps_u); block
    inputs/outputs are recorded from the conditional pass only.
    """
    if not 1 <= y <= config.classes:
        raise ValueError(f"class label {y} outside [1, {config.classes}]")
    sched = linear_schedule(config.timesteps)
    rng = np.random.default_rng(seed)
    p = param_tensors(params)
    z = rng.standard_normal((config.n_tok, config.d_in)).astype(np.float32)
    traj = Trajectory(y=y, seed=seed)
    state = SampleState(z=z, t=config.timesteps, y=y)
    while True:
        t = state.t
        record: list | None = [] if collect_blocks else None
        eps = model_forward(p, Tensor(state.z), t, y, config, record=record).data
        if config.cfg_scale != 1.0:
            eps_null = model_forward(p, Tensor(state.z), t, 0, config).data
            eps = eps_null + np.float32(config.cfg_scale) * (eps - eps_null)
        traj.steps.append(
            StepRecord(
                t=t,
                z=state.z.copy(),
                block_inputs=[io[0] for io in record] if record is not None else [],
                block_outputs=[io[1] for io in record] if record is not None else [],
            )
        )
        beta = sched.betas[t - 1]
        alpha = sched.alphas[t - 1]
        abar = sched.alpha_bars[t - 1]
        mean = (state.z.astype(np.float64) - beta / np.sqrt(1.0 - abar) * eps) / np.sqrt(alpha)
        if t > 1:
            noise = rng.standard_normal(state.z.shape)
            z_next = (mean + np.sqrt(beta) * noise).astype(np.float32)
            state = SampleState(z=z_next, t=t - 1, y=y)
        else:
            traj.final = mean.astype(np.float32)
            return traj
