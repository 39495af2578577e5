"""Discriminator over (state, action) pairs: clipped logistic output, the
offline importance-weighted loss, the squared-error posterior regularizer with
its decaying weight schedule, the online variant weighted by shift scores, BC
weight extraction, and the pointwise-optimum solver used by the theory checks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, NumericError, ShapeError
from .numeric import (
    MlpNetwork,
    backward,
    forward,
    init_mlp,
    interleave_grads,
    mlp_params,
    pack_floats,
    read_record_file,
    take_floats,
    write_record_file,
)

CLIP_LO = 0.01
CLIP_HI = 0.99


@dataclass
class DiscriminatorModel:
    """Single-output MLP on concatenated (s, a); logistic squash then a hard
    clip to [clip_lo, clip_hi]. The clip is a true clamp: gradients vanish on
    the clipped region."""

    net: MlpNetwork
    clip_lo: float = CLIP_LO
    clip_hi: float = CLIP_HI

    @property
    def state_action_dim(self) -> int:
        return self.net.in_dim


def init_discriminator(state_dim: int, action_dim: int, hidden_dims=(64, 64),
                       activation: str = "relu",
                       rng: np.random.Generator | None = None) -> DiscriminatorModel:
    if rng is None:
        rng = np.random.default_rng(0)
    net = init_mlp((state_dim + action_dim, *hidden_dims, 1), activation, rng)
    return DiscriminatorModel(net=net)


def _concat_sa(states, actions) -> tuple[np.ndarray, bool]:
    states = np.asarray(states, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.float64)
    single = states.ndim == 1
    if single != (actions.ndim == 1):
        raise ShapeError("states and actions must both be single or both batched")
    if single:
        return np.concatenate([states, actions])[None, :], True
    if states.shape[0] != actions.shape[0]:
        raise ShapeError(
            f"batch mismatch: {states.shape[0]} states vs {actions.shape[0]} actions"
        )
    return np.concatenate([states, actions], axis=1), False


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _forward_clipped(model: DiscriminatorModel, x: np.ndarray):
    """Returns (d, active): clipped outputs and the mask where the clip is not
    binding (gradient flows only there)."""
    z = forward(model.net, x)[:, 0]
    sig = _sigmoid(z)
    d = np.clip(sig, model.clip_lo, model.clip_hi)
    active = (sig > model.clip_lo) & (sig < model.clip_hi)
    return d, active


def disc_forward(model: DiscriminatorModel, s, a):
    """Clipped discriminator output in [clip_lo, clip_hi]; scalar for single
    inputs, (N,) for batches."""
    x, single = _concat_sa(s, a)
    d, _ = _forward_clipped(model, x)
    return float(d[0]) if single else d


def bc_weight(model: DiscriminatorModel, s, a):
    """Odds d/(1-d) of the clipped output; bounded in [lo/(1-lo), hi/(1-hi)]."""
    d = disc_forward(model, s, a)
    return d / (1.0 - d)


def _resolve_weights(fn_or_values, states, actions, what: str) -> np.ndarray:
    values = fn_or_values(states, actions) if callable(fn_or_values) else fn_or_values
    values = np.atleast_1d(np.asarray(values, dtype=np.float64))
    if values.shape[0] != np.asarray(states).shape[0]:
        raise ShapeError(f"{what} count {values.shape[0]} != batch size")
    if not np.all(np.isfinite(values)):
        raise DataError(f"non-finite {what}")
    if np.any(values < 0):
        raise DataError(f"negative {what}")
    return values


def _two_class_terms(model: DiscriminatorModel, expert_batch, other_batch, other_weights):
    """Shared core of the offline and online losses:
    mean_E[-log d] + mean_other[-w * log(1-d)], gradients through d only."""
    xe, single_e = _concat_sa(*expert_batch)
    xo, single_o = _concat_sa(*other_batch)
    if single_e or single_o:
        raise ShapeError("loss batches must be 2-D")
    ne, no = xe.shape[0], xo.shape[0]
    if ne == 0 or no == 0:
        raise DataError("empty batch in discriminator loss")
    de, me = _forward_clipped(model, xe)
    do, mo = _forward_clipped(model, xo)
    w = _resolve_weights(other_weights, other_batch[0], other_batch[1], "per-sample weight")
    loss = float(np.mean(-np.log(de)) + np.mean(-w * np.log(1.0 - do)))
    dz_e = -(1.0 - de) * me / ne
    dz_o = w * do * mo / no
    x = np.vstack([xe, xo])
    dz = np.concatenate([dz_e, dz_o])
    return loss, x, dz


def offline_disc_loss(model: DiscriminatorModel, expert_batch, supp_batch, ratio_fn):
    """Expert term plus density-ratio-weighted supplementary term.

    expert_batch and supp_batch are (states, actions) pairs; ratio_fn is either
    a callable (states, actions) -> ratios or a precomputed ratio array. Ratios
    are stop-gradient constants.
    Returns (loss, grads) with grads aligned to mlp_params(model.net).
    """
    loss, x, dz = _two_class_terms(model, expert_batch, supp_batch, ratio_fn)
    w_grads, b_grads, _ = backward(model.net, x, dz[:, None])
    return loss, interleave_grads(w_grads, b_grads)


def online_disc_loss(model: DiscriminatorModel, expert_batch, online_batch):
    """Expert term plus shift-score-weighted term over online experience.

    online_batch is (states, actions, shift_scores) with scores in [0, 1].
    """
    if len(online_batch) != 3:
        raise ShapeError("online_batch must be (states, actions, shift_scores)")
    states, actions, scores = online_batch
    scores = np.atleast_1d(np.asarray(scores, dtype=np.float64))
    if np.any(scores < 0) or np.any(scores > 1):
        raise DataError("shift scores must lie in [0, 1]")
    loss, x, dz = _two_class_terms(model, expert_batch, (states, actions), scores)
    w_grads, b_grads, _ = backward(model.net, x, dz[:, None])
    return loss, interleave_grads(w_grads, b_grads)


def reg_loss(model: DiscriminatorModel, mixed_batch, target_fn):
    """Mean squared deviation between the clipped output and the posterior
    target p_E/(p_E + p_S). Targets are stop-gradient constants."""
    x, single = _concat_sa(*mixed_batch)
    if single:
        raise ShapeError("mixed_batch must be 2-D")
    n = x.shape[0]
    if n == 0:
        raise DataError("empty regularizer batch")
    d, mask = _forward_clipped(model, x)
    t = _resolve_weights(target_fn, mixed_batch[0], mixed_batch[1], "regularizer target")
    if np.any(t > 1):
        raise DataError("regularizer target above 1")
    diff = d - t
    loss = float(np.mean(diff * diff))
    dz = 2.0 * diff * d * (1.0 - d) * mask / n
    w_grads, b_grads, _ = backward(model.net, x, dz[:, None])
    return loss, interleave_grads(w_grads, b_grads)


def combined_offline_loss(model: DiscriminatorModel, expert_batch, supp_batch,
                          mixed_batch, ratio_fn, target_fn, reg_weight: float):
    """Offline loss plus reg_weight times the regularizer.

    reg_weight = 0 short-circuits to offline_disc_loss exactly (the ablation
    path); otherwise reg_weight must lie in (0, 1].
    """
    if reg_weight == 0.0:
        return offline_disc_loss(model, expert_batch, supp_batch, ratio_fn)
    if not (0.0 < reg_weight <= 1.0):
        raise ConfigError(f"reg_weight must lie in (0, 1], got {reg_weight}")
    base_loss, base_grads = offline_disc_loss(model, expert_batch, supp_batch, ratio_fn)
    r_loss, r_grads = reg_loss(model, mixed_batch, target_fn)
    loss = base_loss + reg_weight * r_loss
    grads = [g + reg_weight * h for g, h in zip(base_grads, r_grads)]
    return loss, grads


def pooled_bce_loss(model: DiscriminatorModel, states, actions, labels):
    """Per-sample binary cross-entropy averaged over one pooled batch
    (label 1 = expert). Used for held-out evaluation and the boundary-bias
    demonstration, where class imbalance must flow through the sampling."""
    x, single = _concat_sa(states, actions)
    if single:
        raise ShapeError("pooled batch must be 2-D")
    y = np.atleast_1d(np.asarray(labels, dtype=np.float64))
    if y.shape[0] != x.shape[0]:
        raise ShapeError("label count does not match batch size")
    if np.any((y != 0.0) & (y != 1.0)):
        raise DataError("labels must be 0 or 1")
    n = x.shape[0]
    d, mask = _forward_clipped(model, x)
    loss = float(np.mean(-y * np.log(d) - (1.0 - y) * np.log(1.0 - d)))
    dz = (-y * (1.0 - d) + (1.0 - y) * d) * mask / n
    w_grads, b_grads, _ = backward(model.net, x, dz[:, None])
    return loss, interleave_grads(w_grads, b_grads)


def eval_bce(model: DiscriminatorModel, states, actions, labels) -> float:
    """Evaluation-only pooled BCE (no gradients)."""
    x, _ = _concat_sa(states, actions)
    y = np.atleast_1d(np.asarray(labels, dtype=np.float64))
    d, _ = _forward_clipped(model, x)
    return float(np.mean(-y * np.log(d) - (1.0 - y) * np.log(1.0 - d)))


def disc_params(model: DiscriminatorModel) -> list[np.ndarray]:
    return mlp_params(model.net)


# ---------------------------------------------------------------------------
# Regularizer weight schedule


@dataclass(frozen=True)
class RegWeightSchedule:
    """1 up to the cutoff step, then 1/(1 + ln(t - cutoff + 1)). Natural log.
    Non-increasing and always in (0, 1]."""

    cutoff_step: int = 10000

    def value_at(self, step: int) -> float:
        if step < 0:
            raise ConfigError(f"step must be >= 0, got {step}")
        if step <= self.cutoff_step:
            return 1.0
        return 1.0 / (1.0 + math.log(step - self.cutoff_step + 1))


def reg_weight_at(step: int, cutoff_step: int = 10000) -> float:
    return RegWeightSchedule(cutoff_step=cutoff_step).value_at(step)


# ---------------------------------------------------------------------------
# Pointwise optimum of the regularized population objective


def posterior_target(p_expert: float, p_supp: float) -> float:
    """p_E/(p_E + p_S), the unbiased posterior the regularizer pulls toward."""
    return p_expert / (p_expert + p_supp)


def pointwise_optimum(p_expert: float, p_supp: float, expert_coef: float = 1.0,
                      supp_coef: float = 1.0, reg_weight: float = 0.0,
                      mix_density: float = 1.0, tol: float = 1e-10) -> float:
    """Root in (0,1) of the stationarity condition of the pointwise objective:

        -expert_coef*p_expert/d + supp_coef*p_supp/(1-d)
            + 2*reg_weight*mix_density*(d - posterior_target) = 0

    The left side is strictly increasing in d, so bisection finds the unique
    optimum to absolute tolerance tol. With reg_weight = 0 this is the closed
    form p_expert/(p_expert + (supp_coef/expert_coef)*p_supp); as reg_weight
    grows it moves monotonically to the posterior target.
    """
    for name, v in (("p_expert", p_expert), ("p_supp", p_supp),
                    ("expert_coef", expert_coef), ("supp_coef", supp_coef)):
        if not (v > 0 and np.isfinite(v)):
            raise ConfigError(f"{name} must be positive and finite, got {v}")
    if reg_weight < 0 or mix_density < 0:
        raise ConfigError("reg_weight and mix_density must be non-negative")

    target = posterior_target(p_expert, p_supp)

    def f(d: float) -> float:
        return (-expert_coef * p_expert / d + supp_coef * p_supp / (1.0 - d)
                + 2.0 * reg_weight * mix_density * (d - target))

    lo, hi = 1e-15, 1.0 - 1e-15
    if f(lo) > 0 or f(hi) < 0:
        raise NumericError("stationarity condition has no sign change on (0,1)")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if f(mid) <= 0:
            lo = mid
        else:
            hi = mid
        if hi - lo < tol:
            break
    return 0.5 * (lo + hi)


# ---------------------------------------------------------------------------
# Checkpoints


def save_discriminator(path, model: DiscriminatorModel, extra: dict | None = None) -> None:
    fields = dict(extra or {})
    fields["layer_dims"] = ",".join(str(d) for d in model.net.layer_dims)
    fields["activation"] = model.net.activation
    fields["clip_lo"] = repr(model.clip_lo)
    fields["clip_hi"] = repr(model.clip_hi)
    write_record_file(path, "disc", fields, pack_floats(mlp_params(model.net)))


def load_discriminator(path) -> tuple[DiscriminatorModel, dict]:
    fields, payload = read_record_file(path, "disc")
    try:
        dims = tuple(int(d) for d in fields["layer_dims"].split(","))
        activation = fields["activation"]
        clip_lo = float(fields["clip_lo"])
        clip_hi = float(fields["clip_hi"])
    except (KeyError, ValueError) as e:
        raise DataError(f"{path}: malformed discriminator header") from e
    weights = []
    biases = []
    offset = 0
    for i in range(len(dims) - 1):
        w, offset = take_floats(payload, offset, (dims[i + 1], dims[i]))
        b, offset = take_floats(payload, offset, (dims[i + 1],))
        weights.append(w)
        biases.append(b)
    if offset != len(payload):
        raise DataError(f"{path}: {len(payload) - offset} unexpected trailing bytes")
    net = MlpNetwork(layer_dims=dims, weights=weights, biases=biases, activation=activation)
    model = DiscriminatorModel(net=net, clip_lo=clip_lo, clip_hi=clip_hi)
    known = {"layer_dims", "activation", "clip_lo", "clip_hi"}
    return model, {k: v for k, v in fields.items() if k not in known}


def clone_discriminator(model: DiscriminatorModel) -> DiscriminatorModel:
    from .numeric import clone_mlp

    return DiscriminatorModel(net=clone_mlp(model.net), clip_lo=model.clip_lo,
                              clip_hi=model.clip_hi)
