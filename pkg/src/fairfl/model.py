"""Bidirectional-GRU attention model with an adversarial sensitive-attribute head.

Pipeline for a padded batch of visit sequences::

    v_t  = ReLU(x_t We + be)                      (zero on padded steps)
    h_t  = [gru_fwd(v)_t ; gru_bwd(v)_t]          (2h wide)
    q    = h at the last real visit
    c    = sum_i softmax_i(q Wa h_i^T) h_i         (real visits only)
    rep  = tanh([q ; c] Wr)                        (2h wide, no bias)
    out  = rep Wo + bo                             (outcome logit)
    sens = rep Ws + bs                             (sensitive-attribute logits)

Training minimizes ``(1 - alpha) * L_out - alpha * L_sens`` for every parameter
except the ``sens`` head, which minimizes ``L_sens`` on its own.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from fairfl import kernels
from fairfl.diffcore import (
    Adam,
    NonFiniteError,
    ParamVector,
    activation_backward,
    activation_forward,
    affine_backward,
    affine_forward,
    bce_with_logits,
    sigmoid,
    softmax_ce,
)

SENS_PARAMS = ("sens.W", "sens.b")


@dataclass(frozen=True)
class ModelConfig:
    code_vocab_size: int
    n_sens_classes: int
    embed_size: int = 32
    hidden_size: int = 16
    max_visits: int = 8
    alpha: float = 0.3
    seed: int = 0

    def __post_init__(self):
        for name in ("code_vocab_size", "n_sens_classes", "embed_size", "hidden_size", "max_visits"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")

    @property
    def rep_size(self) -> int:
        return 2 * self.hidden_size

    def layout(self) -> tuple:
        """Canonical parameter layout shared by every client built from this config."""
        E, m, h, s = self.code_vocab_size, self.embed_size, self.hidden_size, self.n_sens_classes
        return (
            ("embed.W", E, m),
            ("embed.b", 1, m),
            ("gru_fwd.Wx", m, 3 * h),
            ("gru_fwd.Wh", h, 3 * h),
            ("gru_fwd.b", 1, 3 * h),
            ("gru_bwd.Wx", m, 3 * h),
            ("gru_bwd.Wh", h, 3 * h),
            ("gru_bwd.b", 1, 3 * h),
            ("attn.W", 2 * h, 2 * h),
            ("rep.W", 4 * h, 2 * h),
            ("out.W", 2 * h, 1),
            ("out.b", 1, 1),
            ("sens.W", 2 * h, s),
            ("sens.b", 1, s),
        )

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PatientBatch:
    visits: np.ndarray  # (B, T, E) multi-hot
    mask: np.ndarray  # (B, T), 1 for real visits, left-aligned
    outcome: np.ndarray  # (B,)
    sens: np.ndarray  # (B,)

    def __post_init__(self):
        self.visits = np.asarray(self.visits, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=np.float64)
        self.outcome = np.asarray(self.outcome, dtype=np.float64).ravel()
        self.sens = np.asarray(self.sens, dtype=np.int64).ravel()
        B, T = self.mask.shape
        if self.visits.shape[:2] != (B, T):
            raise ValueError("visits and mask disagree on (batch, time)")
        if len(self.outcome) != B or len(self.sens) != B:
            raise ValueError("one outcome and one sensitive id per patient")
        lengths = self.mask.sum(axis=1)
        if (lengths < 1).any():
            raise ValueError("every patient needs at least one real visit")
        prefix = np.arange(T)[None, :] < lengths[:, None]
        if not np.array_equal(prefix, self.mask > 0):
            raise ValueError("visit mask must be a left-aligned prefix")

    def __len__(self):
        return self.mask.shape[0]

    @property
    def lengths(self) -> np.ndarray:
        return self.mask.sum(axis=1).astype(np.int64)

    @classmethod
    def from_records(cls, records, code_vocab_size: int, pad_to: int | None = None) -> "PatientBatch":
        T = max(len(r.visits) for r in records)
        if pad_to is not None:
            if pad_to < T:
                raise ValueError(f"a patient has {T} visits, more than pad_to={pad_to}")
            T = pad_to
        B = len(records)
        visits = np.zeros((B, T, code_vocab_size))
        mask = np.zeros((B, T))
        for b, rec in enumerate(records):
            for t, codes in enumerate(rec.visits):
                visits[b, t, list(codes)] = 1.0
                mask[b, t] = 1.0
        return cls(
            visits,
            mask,
            np.array([r.outcome for r in records]),
            np.array([r.sens for r in records]),
        )

    def subset(self, idx) -> "PatientBatch":
        idx = np.asarray(idx)
        vis, mask = self.visits[idx], self.mask[idx]
        T = int(mask.sum(axis=1).max())
        return PatientBatch(vis[:, :T], mask[:, :T], self.outcome[idx], self.sens[idx])


@dataclass
class ForwardTrace:
    embeddings: np.ndarray
    h_fwd: np.ndarray
    h_bwd: np.ndarray
    H: np.ndarray
    last_index: np.ndarray
    query: np.ndarray
    attention: np.ndarray
    context: np.ndarray
    rep: np.ndarray
    out_logit: np.ndarray
    sens_logits: np.ndarray
    caches: dict = field(default_factory=dict, repr=False)


@dataclass
class StepResult:
    loss_out: float
    loss_sens: float
    alpha: float
    grads: dict  # gradient of L_Dip for every parameter
    adversary_grads: dict  # gradient of L_sens for the sens head

    @property
    def loss_dip(self) -> float:
        return (1.0 - self.alpha) * self.loss_out - self.alpha * self.loss_sens

    def update_grads(self) -> dict:
        """Gradients actually applied: L_Dip everywhere except the sens head."""
        merged = dict(self.grads)
        merged.update(self.adversary_grads)
        return merged


# ---------------------------------------------------------------- pieces


def embed_visits(visits, mask, W, b):
    pre, aff = affine_forward(visits, W, b)
    v, act = activation_forward(pre, "relu")
    return v * mask[..., None], (aff, act)


def encode(embeddings, mask, params):
    """Run both GRU directions; return ``(H, last_index, cache)``."""
    out = {}
    for d, reverse in (("gru_fwd", False), ("gru_bwd", True)):
        xp, aff = affine_forward(embeddings, params[f"{d}.Wx"], params[f"{d}.b"])
        hs, scan = kernels.gru_scan_forward(xp, mask, params[f"{d}.Wh"], reverse)
        out[d] = (hs, aff, scan)
    H = np.concatenate([out["gru_fwd"][0], out["gru_bwd"][0]], axis=-1) * mask[..., None]
    last = mask.sum(axis=1).astype(np.int64) - 1
    if (last < 0).any():
        raise ValueError("patient with no real visits")
    return H, last, out


def attend(query, H, mask, Wa):
    """General attention of ``query`` over the real visits in ``H``."""
    keys = query @ Wa
    scores = np.einsum("bd,btd->bt", keys, H)
    scores = np.where(mask > 0, scores, -np.inf)
    scores -= scores.max(axis=1, keepdims=True)
    weights = np.exp(scores)
    weights /= weights.sum(axis=1, keepdims=True)
    context = np.einsum("bt,btd->bd", weights, H)
    return context, weights, keys


def attend_backward(d_context, query, H, weights, keys, Wa):
    dH = weights[..., None] * d_context[:, None, :]
    dw = np.einsum("btd,bd->bt", H, d_context)
    ds = weights * (dw - (weights * dw).sum(axis=1, keepdims=True))
    dkeys = np.einsum("bt,btd->bd", ds, H)
    dH += ds[..., None] * keys[:, None, :]
    return dH, dkeys @ Wa.T, query.T @ dkeys


def represent(query, context, Wr):
    u = np.concatenate([query, context], axis=1)
    return np.tanh(u @ Wr), u


def heads(rep, params):
    out = rep @ params["out.W"] + params["out.b"]
    sens = rep @ params["sens.W"] + params["sens.b"]
    return out[:, 0], sens


# ---------------------------------------------------------------- model


class DipoleModel:
    """Parameters live in one flat float64 vector; ``params`` holds views into it."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator | None = None):
        self.config = config
        self.layout = config.layout()
        size = sum(r * c for _, r, c in self.layout)
        self.flat = np.zeros(size)
        self.params = {}
        offset = 0
        for name, rows, cols in self.layout:
            self.params[name] = self.flat[offset : offset + rows * cols].reshape(rows, cols)
            offset += rows * cols
        self.initialize(rng if rng is not None else np.random.default_rng(config.seed))

    def initialize(self, rng: np.random.Generator) -> None:
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
        for name, rows, cols in self.layout:
            if name.endswith(".b"):
                self.params[name][:] = 0.0
            else:
                bound = np.sqrt(1.0 / rows)
                self.params[name][:] = rng.uniform(-bound, bound, size=(rows, cols))

    # -- parameter exchange
    def get_params(self) -> ParamVector:
        return ParamVector(self.layout, self.flat.copy())

    def set_params(self, pv: ParamVector) -> None:
        if pv.layout != tuple(tuple(e) for e in self.layout):
            raise ValueError("parameter layout mismatch")
        self.flat[:] = pv.values

    @property
    def n_params(self) -> int:
        return self.flat.size

    # -- forward / backward
    def forward(self, batch: PatientBatch) -> ForwardTrace:
        p = self.params
        if batch.visits.shape[-1] != self.config.code_vocab_size:
            raise ValueError(
                f"visit vectors have {batch.visits.shape[-1]} codes, model expects "
                f"{self.config.code_vocab_size}"
            )
        mask = batch.mask
        v, emb_cache = embed_visits(batch.visits, mask, p["embed.W"], p["embed.b"])
        H, last, enc_cache = encode(v, mask, p)
        rows = np.arange(len(last))
        q = H[rows, last]
        c, weights, keys = attend(q, H, mask, p["attn.W"])
        rep, u = represent(q, c, p["rep.W"])
        out, sens = heads(rep, p)
        h = self.config.hidden_size
        return ForwardTrace(
            embeddings=v,
            h_fwd=H[..., :h],
            h_bwd=H[..., h:],
            H=H,
            last_index=last,
            query=q,
            attention=weights,
            context=c,
            rep=rep,
            out_logit=out,
            sens_logits=sens,
            caches={"emb": emb_cache, "enc": enc_cache, "keys": keys, "u": u},
        )

    def backward(self, batch: PatientBatch, trace: ForwardTrace, d_out, d_sens) -> dict:
        """Gradients of ``sum(d_out * out_logit) + sum(d_sens * sens_logits)``."""
        p = self.params
        g = {}
        rep = trace.rep
        g["out.W"] = rep.T @ d_out[:, None]
        g["out.b"] = np.array([[d_out.sum()]])
        g["sens.W"] = rep.T @ d_sens
        g["sens.b"] = d_sens.sum(axis=0, keepdims=True)
        d_rep = d_out[:, None] @ p["out.W"].T + d_sens @ p["sens.W"].T
        self._encoder_backward(batch, trace, d_rep, g)
        return g

    def _encoder_backward(self, batch, trace, d_rep, g) -> None:
        p = self.params
        mask = batch.mask
        h2 = 2 * self.config.hidden_size
        u = trace.caches["u"]
        d_pre = d_rep * (1.0 - trace.rep**2)
        g["rep.W"] = u.T @ d_pre
        du = d_pre @ p["rep.W"].T
        dq, dc = du[:, :h2], du[:, h2:]
        dH, dq_attn, g["attn.W"] = attend_backward(
            dc, trace.query, trace.H, trace.attention, trace.caches["keys"], p["attn.W"]
        )
        dq = dq + dq_attn
        dH[np.arange(len(trace.last_index)), trace.last_index] += dq
        dH *= mask[..., None]
        h = self.config.hidden_size
        dv = np.zeros_like(trace.embeddings)
        enc = trace.caches["enc"]
        for d, reverse, sl in (("gru_fwd", False, slice(0, h)), ("gru_bwd", True, slice(h, h2))):
            _, aff, scan = enc[d]
            dxp, g[f"{d}.Wh"] = kernels.gru_scan_backward(
                np.ascontiguousarray(dH[..., sl]), mask, p[f"{d}.Wh"], scan, reverse
            )
            dvd, g[f"{d}.Wx"], g[f"{d}.b"] = affine_backward(dxp, aff)
            dv += dvd
        dv *= mask[..., None]
        aff, act = trace.caches["emb"]
        d_pre_emb = activation_backward(dv, act)
        _, g["embed.W"], g["embed.b"] = affine_backward(d_pre_emb, aff)

    def losses(self, batch: PatientBatch, trace: ForwardTrace | None = None):
        trace = trace if trace is not None else self.forward(batch)
        l_out, d_out = bce_with_logits(trace.out_logit, batch.outcome)
        l_sens, d_sens = softmax_ce(trace.sens_logits, batch.sens)
        return l_out, l_sens, d_out, d_sens, trace

    def loss_dip(self, batch: PatientBatch, alpha: float) -> float:
        l_out, l_sens, *_ = self.losses(batch)
        return (1.0 - alpha) * l_out - alpha * l_sens

    def compute_gradients(self, batch: PatientBatch, alpha: float) -> StepResult:
        """One forward pass and one reverse sweep for both objectives.

        The sens-branch gradient entering the representation is scaled by
        ``-alpha`` and the outcome branch by ``1 - alpha`` (gradient reversal).
        """
        if not 0.0 <= alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        l_out, l_sens, d_out, d_sens, trace = self.losses(batch)
        if not (np.isfinite(l_out) and np.isfinite(l_sens)):
            raise NonFiniteError("non-finite training loss")
        grads = self.backward(batch, trace, (1.0 - alpha) * d_out, -alpha * d_sens)
        adversary = {
            "sens.W": trace.rep.T @ d_sens,
            "sens.b": d_sens.sum(axis=0, keepdims=True),
        }
        return StepResult(l_out, l_sens, alpha, grads, adversary)

    def flat_gradient(self, grads: dict) -> np.ndarray:
        return np.concatenate([np.asarray(grads[name]).ravel() for name, _, _ in self.layout])

    def train_step(self, batch: PatientBatch, alpha: float, optimizer) -> tuple[float, float]:
        """Adversarial update of all parameters from one forward pass.

        Returns ``(L_out, L_sens)``.
        """
        result = self.compute_gradients(batch, alpha)
        update = self.flat_gradient(result.update_grads())
        if not np.all(np.isfinite(update)):
            raise NonFiniteError("non-finite gradient")
        optimizer.step(self.flat, update)
        return result.loss_out, result.loss_sens

    # -- inference
    def representations(self, batch: PatientBatch) -> np.ndarray:
        return self.forward(batch).rep

    def predict(self, batch: PatientBatch) -> tuple[np.ndarray, np.ndarray]:
        """Outcome probabilities and predicted sensitive class per patient."""
        trace = self.forward(batch)
        return sigmoid(trace.out_logit), trace.sens_logits.argmax(axis=1)


def make_batches(records, code_vocab_size: int, batch_size: int, rng: np.random.Generator | None):
    """Yield padded batches, shuffled when ``rng`` is given."""
    order = np.arange(len(records))
    if rng is not None:
        rng.shuffle(order)
    for start in range(0, len(order), batch_size):
        chunk = [records[i] for i in order[start : start + batch_size]]
        yield PatientBatch.from_records(chunk, code_vocab_size)


def train_epochs(model: DipoleModel, records, epochs: int, alpha: float, optimizer,
                 batch_size: int, rng: np.random.Generator) -> list:
    history = []
    for _ in range(epochs):
        for batch in make_batches(records, model.config.code_vocab_size, batch_size, rng):
            history.append(model.train_step(batch, alpha, optimizer))
    return history


def predict_records(model: DipoleModel, records, batch_size: int = 256):
    probs, sens = [], []
    for start in range(0, len(records), batch_size):
        batch = PatientBatch.from_records(records[start : start + batch_size], model.config.code_vocab_size)
        p, s = model.predict(batch)
        probs.append(p)
        sens.append(s)
    return np.concatenate(probs), np.concatenate(sens)


def default_optimizer(learning_rate: float = 1e-3) -> Adam:
    return Adam(learning_rate)
