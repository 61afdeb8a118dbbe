"""Toy attention distillation: fit the student's feature maps to a frozen teacher.

Teacher and student are single transformer blocks ``f(A(x) + x)`` sharing
projection and feed-forward weights. The teacher's ``A`` is full
bidirectional softmax attention; the student's is causal chunked hybrid
attention. Only the student's per-head query/key feature maps are trained,
on the mean absolute gap between the two blocks' outputs. Gradients are
computed by a hand-written reverse pass (see :func:`grad_phi`).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .attention import (
    ACTIVATIONS,
    EPS_DEN,
    FeatureMap,
    ProjectionWeights,
    feature_map_preactivation,
    merge_heads,
    project_qkv,
    shifted_elu,
    shifted_elu_grad,
    softmax_attention,
    split_heads,
)
from .chunking import ChunkLayout, hybrid_attention_full, make_layout, partition_tokens, range_indices, softmax_partial
from .errors import DivergenceError, NonFiniteError, ShapeError
from .numerics import Rng, dtype_for, precision_of, random_tensor


@dataclass
class FeedForward:
    """Row-wise ``act(u w1 + b1) w2 + b2``."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    activation: str = "tanh"

    @classmethod
    def random(cls, rng: Rng, d: int, hidden: int | None = None, precision: str = "double") -> "FeedForward":
        hidden = 2 * d if hidden is None else hidden
        dt = dtype_for(precision)
        w1 = random_tensor(rng, (d, hidden), "normal", precision) / math.sqrt(d)
        w2 = random_tensor(rng, (hidden, d), "normal", precision) / math.sqrt(hidden)
        return cls(w1, np.zeros(hidden, dt), w2, np.zeros(d, dt))

    def __call__(self, u: np.ndarray) -> np.ndarray:
        act = ACTIVATIONS[self.activation][0]
        return act(u @ self.w1 + self.b1) @ self.w2 + self.b2

    def arrays(self) -> list[np.ndarray]:
        return [self.w1, self.b1, self.w2, self.b2]


@dataclass
class ToyBlock:
    variant: str  # "softmax-full" or "hybrid-causal"
    weights: ProjectionWeights
    ffn: FeedForward
    n_heads: int
    layout: ChunkLayout | None = None
    phi_q: list[FeatureMap] = field(default_factory=list)
    phi_k: list[FeatureMap] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.variant not in ("softmax-full", "hybrid-causal"):
            raise ValueError(f"unknown block variant {self.variant!r}")
        if self.weights.dim % self.n_heads:
            raise ShapeError("model width must divide evenly into heads")
        if self.variant == "hybrid-causal":
            if self.layout is None or len(self.phi_q) != self.n_heads or len(self.phi_k) != self.n_heads:
                raise ValueError("hybrid block needs a layout and one feature map per head")

    @property
    def head_dim(self) -> int:
        return self.weights.dim // self.n_heads

    def attention(self, x: np.ndarray) -> np.ndarray:
        if self.variant == "softmax-full":
            q, k, v = (split_heads(a, self.n_heads) for a in project_qkv(x, self.weights))
            return merge_heads([softmax_attention(q[h], k[h], v[h]) for h in range(self.n_heads)])
        return hybrid_attention_full(x, self.weights, self.phi_q, self.phi_k, self.layout, causal=True)

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """``(A(x), f(A(x) + x))``."""
        a = self.attention(x)
        return a, self.ffn(a + x)

    def output(self, x: np.ndarray, match: str = "block") -> np.ndarray:
        a, y = self.forward(x)
        return y if match == "block" else a


def make_teacher(rng: Rng, d_model: int, n_heads: int, precision: str = "double") -> ToyBlock:
    weights = ProjectionWeights.random(rng.spawn(1), d_model, precision)
    ffn = FeedForward.random(rng.spawn(2), d_model, precision=precision)
    return ToyBlock("softmax-full", weights, ffn, n_heads)


def make_student(teacher: ToyBlock, layout: ChunkLayout, rng: Rng, degree: int = 2, hidden: int | None = None,
                 out: int | None = None, nonneg_mode: str = "shifted-elu", activation: str = "tanh") -> ToyBlock:
    prec = precision_of(teacher.weights.w_q)
    d = teacher.head_dim
    if layout.D != d:
        raise ShapeError(f"layout head dim {layout.D} != block head dim {d}")
    maps = [
        FeatureMap.init(rng.spawn(100 + i), d, hidden, out, degree, nonneg_mode, activation, prec)
        for i in range(2 * teacher.n_heads)
    ]
    return ToyBlock("hybrid-causal", teacher.weights, teacher.ffn, teacher.n_heads, layout,
                    maps[:teacher.n_heads], maps[teacher.n_heads:])


# --- data ------------------------------------------------------------------

@dataclass(frozen=True)
class DistillSample:
    """One synthetic block input, reproducible from its identifiers.

    ``eps_seed``, ``prompt_id`` and ``step_id`` stand in for the noise draw,
    the prompt and the denoising step of a real diffusion trajectory.
    """

    eps_seed: int
    prompt_id: int
    step_id: int
    x: np.ndarray

    @classmethod
    def draw(cls, eps_seed: int, prompt_id: int, step_id: int, n_tokens: int, d_model: int,
             precision: str = "double") -> "DistillSample":
        rng = Rng(eps_seed, (prompt_id << 20) + step_id)
        # global scale log-uniform on [0.5, 2]
        scale = math.exp(rng.generator.uniform(math.log(0.5), math.log(2.0)))
        x = random_tensor(rng, (n_tokens, d_model), "normal", precision) * scale
        return cls(eps_seed, prompt_id, step_id, x.astype(dtype_for(precision)))


N_DENOISE_STEPS = 50


def training_sample(cfg: "DistillConfig", k: int, n_tokens: int, d_model: int, precision: str) -> DistillSample:
    return DistillSample.draw(cfg.seed, k // N_DENOISE_STEPS, k % N_DENOISE_STEPS, n_tokens, d_model, precision)


def heldout_samples(cfg: "DistillConfig", n_tokens: int, d_model: int, precision: str) -> list[DistillSample]:
    seed = cfg.seed + 1_000_003
    return [DistillSample.draw(seed, i, (7 * i) % N_DENOISE_STEPS, n_tokens, d_model, precision)
            for i in range(cfg.n_heldout)]


# --- loss and gradients ----------------------------------------------------

def distill_loss(y_teacher: np.ndarray, y_student: np.ndarray) -> float:
    if y_teacher.shape != y_student.shape:
        raise ShapeError(f"shape mismatch {y_teacher.shape} vs {y_student.shape}")
    return float(np.mean(np.abs(y_teacher - y_student)))


def _phi_forward(fm: FeatureMap, x: np.ndarray) -> tuple[np.ndarray, dict]:
    pre, hidden, emb = feature_map_preactivation(fm, x)
    base = shifted_elu(emb) if fm.nonneg_mode == "shifted-elu" else emb
    width = base.shape[1] // fm.degree
    out = np.concatenate(
        [base[:, i * width:(i + 1) * width] ** (i + 1) for i in range(fm.degree)], axis=1
    )
    return out, {"x": x, "pre": pre, "hidden": hidden, "emb": emb, "base": base}


def _phi_backward(fm: FeatureMap, cache: dict, dout: np.ndarray) -> dict[str, np.ndarray]:
    base = cache["base"]
    width = base.shape[1] // fm.degree
    dbase = np.empty_like(base)
    for i in range(fm.degree):
        sl = slice(i * width, (i + 1) * width)
        dbase[:, sl] = dout[:, sl] * (i + 1) * base[:, sl] ** i
    demb = dbase * shifted_elu_grad(cache["emb"]) if fm.nonneg_mode == "shifted-elu" else dbase
    dhidden = demb @ fm.w2.T
    dpre = dhidden * ACTIVATIONS[fm.activation][1](cache["pre"])
    return {
        "w1": cache["x"].T @ dpre,
        "b1": dpre.sum(axis=0),
        "w2": cache["hidden"].T @ demb,
        "b2": demb.sum(axis=0),
    }


@dataclass
class PhiGrads:
    q: list[dict[str, np.ndarray]]
    k: list[dict[str, np.ndarray]]

    def flat(self) -> np.ndarray:
        return np.concatenate([g[n].ravel() for side in (self.q, self.k) for g in side for n in ("w1", "b1", "w2", "b2")])

    def plus(self, other: "PhiGrads") -> "PhiGrads":
        return PhiGrads([{n: a[n] + b[n] for n in a} for a, b in zip(self.q, other.q)],
                        [{n: a[n] + b[n] for n in a} for a, b in zip(self.k, other.k)])

    def scaled(self, factor: float) -> "PhiGrads":
        return PhiGrads([{n: a * factor for n, a in g.items()} for g in self.q],
                        [{n: a * factor for n, a in g.items()} for g in self.k])


def _student_forward(block: ToyBlock, x: np.ndarray):
    lay = block.layout
    prec = precision_of(x)
    eps = EPS_DEN[prec]
    scale = 1.0 / math.sqrt(lay.D)
    q, k, v = (split_heads(a, block.n_heads) for a in project_qkv(x, block.weights))
    heads = []
    outs = []
    for h in range(block.n_heads):
        fq, cq = _phi_forward(block.phi_q[h], q[h])
        fk, ck = _phi_forward(block.phi_k[h], k[h])
        chunks = []
        rows = []
        for t in range(lay.n_chunks):
            part = partition_tokens(lay, t, causal=True)
            lo, hi = lay.chunk_range(t)
            sidx = range_indices(part.softmax)
            a_S, n_S, _ = softmax_partial(q[h][lo:hi], k[h][sidx], v[h][sidx], scale)
            lidx = range_indices(part.linear)
            s = fk[lidx].T @ v[h][lidx]
            z = fk[lidx].sum(axis=0)
            num = a_S + fq[lo:hi] @ s
            den = n_S + (fq[lo:hi] @ z)[:, None]
            clamped = den < eps
            den_eff = np.where(clamped, eps, den)
            y = num / den_eff
            chunks.append({"lo": lo, "hi": hi, "lidx": lidx, "s": s, "z": z, "den": den_eff,
                           "clamped": clamped, "y": y})
            rows.append(y)
        heads.append({"fq": fq, "fk": fk, "cq": cq, "ck": ck, "v": v[h], "chunks": chunks})
        outs.append(np.concatenate(rows, axis=0))
    attn = merge_heads(outs)
    act, dact = ACTIVATIONS[block.ffn.activation]
    u = attn + x
    pre = u @ block.ffn.w1 + block.ffn.b1
    y_block = act(pre) @ block.ffn.w2 + block.ffn.b2
    return attn, y_block, {"heads": heads, "pre": pre}


def grad_phi(block: ToyBlock, x: np.ndarray, y_teacher: np.ndarray, match: str = "block",
             scale: float = 1.0) -> tuple[float, PhiGrads]:
    """Loss and exact gradients w.r.t. every feature-map parameter.

    ``scale`` multiplies the loss (and so the gradients). Where the student
    and teacher outputs coincide exactly the subgradient 0 is used.
    """
    if block.variant != "hybrid-causal":
        raise ValueError("gradients are defined for the hybrid student only")
    attn, y_block, cache = _student_forward(block, x)
    y_student = y_block if match == "block" else attn
    loss = scale * distill_loss(y_teacher, y_student)
    dy = scale * np.sign(y_student - y_teacher) / y_student.size

    if match == "block":
        dact = ACTIVATIONS[block.ffn.activation][1]
        dpre = (dy @ block.ffn.w2.T) * dact(cache["pre"])
        dattn = dpre @ block.ffn.w1.T
    else:
        dattn = dy
    d_heads = split_heads(dattn, block.n_heads)

    grads_q, grads_k = [], []
    for h, hc in enumerate(cache["heads"]):
        fq, fk, v = hc["fq"], hc["fk"], hc["v"]
        dfq = np.zeros_like(fq)
        dfk = np.zeros_like(fk)
        for ch in hc["chunks"]:
            lo, hi = ch["lo"], ch["hi"]
            g = d_heads[h][lo:hi]
            dnum = g / ch["den"]
            dden = -(g * ch["y"]).sum(axis=1, keepdims=True) / ch["den"]
            dden = np.where(ch["clamped"], 0.0, dden)
            # a_L = fq s, n_L = fq z
            dfq[lo:hi] += dnum @ ch["s"].T + dden * ch["z"][None, :]
            lidx = ch["lidx"]
            if lidx.size:
                ds = fq[lo:hi].T @ dnum
                dz = (fq[lo:hi].T @ dden)[:, 0]
                dfk[lidx] += v[lidx] @ ds.T + dz[None, :]
        grads_q.append(_phi_backward(block.phi_q[h], hc["cq"], dfq))
        grads_k.append(_phi_backward(block.phi_k[h], hc["ck"], dfk))
    grads = PhiGrads(grads_q, grads_k)
    if not np.all(np.isfinite(grads.flat())):
        raise NonFiniteError("non-finite feature-map gradient")
    return loss, grads


# --- training --------------------------------------------------------------

@dataclass
class DistillConfig:
    lr: float = 1e-3
    steps: int = 500
    batch_size: int = 1
    seed: int = 7
    optimizer: str = "sgd"  # or "adamw"
    weight_decay: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    match: str = "block"  # or "attention"
    n_heldout: int = 8
    eval_every: int = 50

    def __post_init__(self) -> None:
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")
        if self.optimizer not in ("sgd", "adamw"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.match not in ("block", "attention"):
            raise ValueError(f"match must be 'block' or 'attention', got {self.match!r}")


@dataclass
class TraceRow:
    step: int
    train_loss: float | None
    heldout_loss: float | None


@dataclass
class DistillResult:
    phi_q: list[FeatureMap]
    phi_k: list[FeatureMap]
    trace: list[TraceRow]

    @property
    def initial_heldout(self) -> float:
        return next(r.heldout_loss for r in self.trace if r.heldout_loss is not None)

    @property
    def final_heldout(self) -> float:
        return [r.heldout_loss for r in self.trace if r.heldout_loss is not None][-1]

    def train_losses(self) -> list[float]:
        return [r.train_loss for r in self.trace if r.train_loss is not None]


def heldout_loss(teacher: ToyBlock, student: ToyBlock, samples: Sequence[DistillSample], match: str) -> float:
    return float(np.mean([distill_loss(teacher.output(s.x, match), student.output(s.x, match)) for s in samples]))


def _check_shared(teacher: ToyBlock, student: ToyBlock) -> None:
    pairs = list(zip((teacher.weights.w_q, teacher.weights.w_k, teacher.weights.w_v),
                     (student.weights.w_q, student.weights.w_k, student.weights.w_v)))
    pairs += list(zip(teacher.ffn.arrays(), student.ffn.arrays()))
    if teacher.ffn.activation != student.ffn.activation or not all(np.array_equal(a, b) for a, b in pairs):
        raise ValueError("teacher and student must share projection and feed-forward weights exactly")


class _Adam:
    def __init__(self, cfg: DistillConfig):
        self.cfg = cfg
        self.m: dict = {}
        self.v: dict = {}
        self.t = 0

    def update(self, key, p: np.ndarray, g: np.ndarray) -> np.ndarray:
        b1, b2 = self.cfg.betas
        m = b1 * self.m.get(key, 0.0) + (1 - b1) * g
        v = b2 * self.v.get(key, 0.0) + (1 - b2) * g * g
        self.m[key], self.v[key] = m, v
        mhat = m / (1 - b1 ** self.t)
        vhat = v / (1 - b2 ** self.t)
        p = p * (1 - self.cfg.lr * self.cfg.weight_decay)
        return p - self.cfg.lr * mhat / (np.sqrt(vhat) + self.cfg.adam_eps)


def _apply_update(maps: list[FeatureMap], grads: list[dict], cfg: DistillConfig, opt: _Adam | None, side: str) -> list[FeatureMap]:
    new = []
    for h, (fm, g) in enumerate(zip(maps, grads)):
        params = {}
        for name, p in fm.params().items():
            if opt is None:
                params[name] = p - cfg.lr * g[name]
            else:
                params[name] = opt.update((side, h, name), p, g[name])
        new.append(fm.with_params(params))
    return new


def train_distill(teacher: ToyBlock, student: ToyBlock, cfg: DistillConfig) -> DistillResult:
    """Gradient descent on the student's feature maps; everything else frozen.

    Trace row ``s`` describes the parameters after ``s`` updates: the
    training loss of the sample used for update ``s`` (absent on the final
    row) and, every ``eval_every`` steps and at the end, the held-out loss.
    """
    _check_shared(teacher, student)
    if student.variant != "hybrid-causal" or teacher.variant != "softmax-full":
        raise ValueError("expected a softmax teacher and a hybrid student")
    prec = precision_of(teacher.weights.w_q)
    n_tokens = student.layout.N
    d_model = teacher.weights.dim
    held = heldout_samples(cfg, n_tokens, d_model, prec)
    held_targets = [teacher.output(s.x, cfg.match) for s in held]

    def evaluate(block: ToyBlock) -> float:
        return float(np.mean([distill_loss(t, block.output(s.x, cfg.match)) for s, t in zip(held, held_targets)]))

    opt = _Adam(cfg) if cfg.optimizer == "adamw" else None
    cur = ToyBlock(student.variant, student.weights, student.ffn, student.n_heads, student.layout,
                   [m.copy() for m in student.phi_q], [m.copy() for m in student.phi_k])
    trace = []
    for step in range(cfg.steps + 1):
        held_now = None
        if step % cfg.eval_every == 0 or step == cfg.steps:
            held_now = evaluate(cur)
            if not math.isfinite(held_now):
                raise DivergenceError(step, "held-out loss became non-finite")
        if step == cfg.steps:
            trace.append(TraceRow(step, None, held_now))
            break
        total = 0.0
        acc = None
        for b in range(cfg.batch_size):
            sample = training_sample(cfg, step * cfg.batch_size + b, n_tokens, d_model, prec)
            try:
                loss, g = grad_phi(cur, sample.x, teacher.output(sample.x, cfg.match), cfg.match,
                                   scale=1.0 / cfg.batch_size)
            except (NonFiniteError, FloatingPointError) as exc:
                raise DivergenceError(step, str(exc)) from exc
            total += loss
            acc = g if acc is None else acc.plus(g)
        if not math.isfinite(total):
            raise DivergenceError(step)
        trace.append(TraceRow(step, total, held_now))
        if opt is not None:
            opt.t += 1
        cur.phi_q = _apply_update(cur.phi_q, acc.q, cfg, opt, "q")
        cur.phi_k = _apply_update(cur.phi_k, acc.k, cfg, opt, "k")
    return DistillResult(cur.phi_q, cur.phi_k, trace)


def write_trace(result: DistillResult, path: str | Path, precision: str = "double") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(f"# precision={precision}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "train_loss", "heldout_loss"])
        for r in result.trace:
            w.writerow([r.step, "" if r.train_loss is None else repr(r.train_loss),
                        "" if r.heldout_loss is None else repr(r.heldout_loss)])
    return path


@dataclass(frozen=True)
class ToySetup:
    T: int = 12
    H: int = 2
    W: int = 2
    d_model: int = 16
    heads: int = 2
    T_c: int = 2
    T_o: int = 1
    degree: int = 2
    hidden: int | None = None
    out: int | None = None
    nonneg_mode: str = "shifted-elu"
    activation: str = "tanh"
    precision: str = "double"


def build_toy(setup: ToySetup, seed: int) -> tuple[ToyBlock, ToyBlock]:
    rng = Rng(seed)
    teacher = make_teacher(rng, setup.d_model, setup.heads, setup.precision)
    layout = make_layout(setup.T, setup.H, setup.W, setup.d_model // setup.heads, setup.T_c, setup.T_o)
    student = make_student(teacher, layout, rng, setup.degree, setup.hidden, setup.out,
                           setup.nonneg_mode, setup.activation)
    return teacher, student

