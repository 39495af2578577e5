"""Diagonal-Gaussian stochastic policy: sampling, likelihood, and the weighted
behavior-cloning objective, plus the shared training loop used for the main
policy and for the reference policies that back the density models.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, NumericError, ShapeError
from .numeric import (
    MlpNetwork,
    adam_step,
    backward,
    forward,
    gaussian_log_prob,
    init_adam,
    init_mlp,
    interleave_grads,
    mlp_params,
    named_generator,
    pack_floats,
    read_record_file,
    take_floats,
    write_record_file,
)

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0


@dataclass
class GaussianPolicy:
    """Action mean from an MLP; one learned log-std per action dimension.

    log_std stays inside [LOG_STD_MIN, LOG_STD_MAX]; the training loop projects
    it back after every optimizer step. Sampled actions are clamped to the
    action bounds, the likelihood is the unclamped Gaussian.
    """

    mean_net: MlpNetwork
    log_std: np.ndarray
    state_dim: int
    action_dim: int
    action_low: np.ndarray
    action_high: np.ndarray
    provenance: str = ""

    def __post_init__(self):
        if self.mean_net.out_dim != self.action_dim:
            raise ShapeError(
                f"mean_net output dim {self.mean_net.out_dim} != action_dim {self.action_dim}"
            )
        if self.mean_net.in_dim != self.state_dim:
            raise ShapeError(
                f"mean_net input dim {self.mean_net.in_dim} != state_dim {self.state_dim}"
            )


@dataclass
class PolicyTrainConfig:
    hidden_dims: tuple[int, ...] = (64, 64)
    activation: str = "tanh"
    learning_rate: float = 5e-4
    batch_size: int = 64
    steps: int = 5000
    init_log_std: float = 0.0
    action_low: np.ndarray | None = None
    action_high: np.ndarray | None = None
    label: str = "ref"


def init_policy(state_dim: int, action_dim: int, action_low, action_high,
                hidden_dims=(64, 64), activation: str = "tanh",
                init_log_std: float = 0.0, rng: np.random.Generator | None = None,
                provenance: str = "") -> GaussianPolicy:
    if rng is None:
        rng = np.random.default_rng(0)
    dims = (state_dim, *hidden_dims, action_dim)
    net = init_mlp(dims, activation, rng)
    log_std = np.full(action_dim, float(np.clip(init_log_std, LOG_STD_MIN, LOG_STD_MAX)))
    return GaussianPolicy(
        mean_net=net,
        log_std=log_std,
        state_dim=state_dim,
        action_dim=action_dim,
        action_low=np.asarray(action_low, dtype=np.float64),
        action_high=np.asarray(action_high, dtype=np.float64),
        provenance=provenance,
    )


def action_mean(policy: GaussianPolicy, s) -> np.ndarray:
    return forward(policy.mean_net, s)


def sample_action(policy: GaussianPolicy, s, rng: np.random.Generator | None = None,
                  deterministic: bool = False) -> np.ndarray:
    """Draw a ~ N(mu(s), diag sigma^2), clamped to bounds. Deterministic mode
    returns the clamped mean."""
    mu = forward(policy.mean_net, s)
    if not deterministic:
        if rng is None:
            raise ConfigError("stochastic sampling needs an rng")
        mu = mu + rng.standard_normal(policy.action_dim) * np.exp(policy.log_std)
    return np.clip(mu, policy.action_low, policy.action_high)


def log_prob(policy: GaussianPolicy, s, a):
    """Unclamped Gaussian log-likelihood of a at state s. Batched when s, a
    carry a leading axis."""
    mu = forward(policy.mean_net, s)
    return gaussian_log_prob(mu, policy.log_std, a)


def policy_params(policy: GaussianPolicy) -> list[np.ndarray]:
    """Trainable arrays in a fixed order: mean-net params, then log_std."""
    return mlp_params(policy.mean_net) + [policy.log_std]


def weighted_bc_loss(policy: GaussianPolicy, states, actions, weights):
    """Mean over the batch of -weight * log_prob(s, a), with exact gradients.

    Returns (loss, grads) where grads aligns with policy_params(policy).
    """
    states = np.asarray(states, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if states.ndim != 2 or actions.ndim != 2 or weights.ndim != 1:
        raise ShapeError("expected states (B,ds), actions (B,da), weights (B,)")
    n = states.shape[0]
    if n == 0:
        raise DataError("weighted BC batch is empty")
    if not (actions.shape[0] == n and weights.shape[0] == n):
        raise ShapeError("batch size mismatch between states, actions, weights")
    if not np.all(np.isfinite(weights)):
        raise DataError("non-finite BC weight in batch")
    if np.any(weights < 0):
        raise DataError("negative BC weight in batch")

    mu = forward(policy.mean_net, states)
    inv_var = np.exp(-2.0 * policy.log_std)
    diff = mu - actions
    nll = 0.5 * np.sum(np.log(2.0 * np.pi) + 2.0 * policy.log_std + diff * diff * inv_var, axis=1)
    loss = float(np.mean(weights * nll))

    scaled = (weights / n)[:, None]
    upstream_mu = scaled * diff * inv_var
    w_grads, b_grads, _ = backward(policy.mean_net, states, upstream_mu)
    log_std_grad = np.sum(scaled * (1.0 - diff * diff * inv_var), axis=0)
    grads = interleave_grads(w_grads, b_grads) + [log_std_grad]
    return loss, grads


def run_weighted_bc(policy: GaussianPolicy, states, actions, weights, steps: int,
                    batch_size: int, learning_rate: float, rng: np.random.Generator,
                    record_every: int = 0) -> list[tuple[int, float]]:
    """Adam training loop over uniformly resampled batches.

    Shared by plain BC, reference-policy training, and the weighted main run, so
    the unweighted paths are the weighted path with weights fixed at 1.
    Returns (step, loss) pairs; always includes the first and last step when
    record_every > 0.
    """
    states = np.asarray(states, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    n = states.shape[0]
    if n == 0:
        raise ConfigError("cannot train on an empty dataset")
    params = policy_params(policy)
    opt = init_adam(params, learning_rate=learning_rate)
    history: list[tuple[int, float]] = []
    for step in range(1, steps + 1):
        idx = rng.integers(0, n, size=batch_size)
        loss, grads = weighted_bc_loss(policy, states[idx], actions[idx], weights[idx])
        if not np.isfinite(loss):
            raise NumericError(f"non-finite BC loss at step {step}")
        adam_step(params, grads, opt)
        np.clip(policy.log_std, LOG_STD_MIN, LOG_STD_MAX, out=policy.log_std)
        if record_every and (step == 1 or step == steps or step % record_every == 0):
            history.append((step, loss))
    return history


def train_reference_policy(demos, config: PolicyTrainConfig, seed: int,
                           record_every: int = 0,
                           history: list | None = None) -> GaussianPolicy:
    """BC with unit weights on one demonstration set; the result is only used
    as a conditional-density surrogate, so the budget is modest.

    demos must expose .states (N,ds) and .actions (N,da) arrays plus a
    provenance_label() string. When a history list is supplied, (step, loss)
    records land there at the record_every cadence.
    """
    states = np.asarray(demos.states, dtype=np.float64)
    actions = np.asarray(demos.actions, dtype=np.float64)
    if states.size == 0:
        raise ConfigError("reference policy needs a non-empty demonstration set")
    if config.action_low is None or config.action_high is None:
        raise ConfigError("config must carry action bounds")
    provenance = demos.provenance_label() if hasattr(demos, "provenance_label") else ""
    init_rng = named_generator(seed, f"ref_policy_init_{config.label}")
    pol = init_policy(
        states.shape[1], actions.shape[1], config.action_low, config.action_high,
        hidden_dims=config.hidden_dims, activation=config.activation,
        init_log_std=config.init_log_std, rng=init_rng, provenance=provenance,
    )
    train_rng = named_generator(seed, f"ref_policy_train_{config.label}")
    recorded = run_weighted_bc(pol, states, actions, np.ones(len(states)), config.steps,
                               config.batch_size, config.learning_rate, train_rng,
                               record_every=record_every)
    if history is not None:
        history.extend(recorded)
    return pol


def save_policy(path, policy: GaussianPolicy, extra: dict | None = None) -> None:
    fields = dict(extra or {})
    fields["layer_dims"] = ",".join(str(d) for d in policy.mean_net.layer_dims)
    fields["activation"] = policy.mean_net.activation
    fields["state_dim"] = policy.state_dim
    fields["action_dim"] = policy.action_dim
    fields["provenance"] = policy.provenance or "-"
    arrays = mlp_params(policy.mean_net) + [policy.log_std, policy.action_low, policy.action_high]
    write_record_file(path, "policy", fields, pack_floats(arrays))


def load_policy(path) -> tuple[GaussianPolicy, dict]:
    fields, payload = read_record_file(path, "policy")
    try:
        dims = tuple(int(d) for d in fields["layer_dims"].split(","))
        activation = fields["activation"]
        state_dim = int(fields["state_dim"])
        action_dim = int(fields["action_dim"])
        provenance = fields["provenance"]
    except (KeyError, ValueError) as e:
        raise DataError(f"{path}: malformed policy header") from e
    weights = []
    biases = []
    offset = 0
    for i in range(len(dims) - 1):
        w, offset = take_floats(payload, offset, (dims[i + 1], dims[i]))
        b, offset = take_floats(payload, offset, (dims[i + 1],))
        weights.append(w)
        biases.append(b)
    log_std, offset = take_floats(payload, offset, (action_dim,))
    low, offset = take_floats(payload, offset, (action_dim,))
    high, offset = take_floats(payload, offset, (action_dim,))
    if offset != len(payload):
        raise DataError(f"{path}: {len(payload) - offset} unexpected trailing bytes")
    net = MlpNetwork(layer_dims=dims, weights=weights, biases=biases, activation=activation)
    pol = GaussianPolicy(
        mean_net=net, log_std=log_std, state_dim=state_dim, action_dim=action_dim,
        action_low=low, action_high=high,
        provenance="" if provenance == "-" else provenance,
    )
    known = {"layer_dims", "activation", "state_dim", "action_dim", "provenance"}
    return pol, {k: v for k, v in fields.items() if k not in known}


def clone_policy(policy: GaussianPolicy) -> GaussianPolicy:
    from .numeric import clone_mlp

    return GaussianPolicy(
        mean_net=clone_mlp(policy.mean_net),
        log_std=policy.log_std.copy(),
        state_dim=policy.state_dim,
        action_dim=policy.action_dim,
        action_low=policy.action_low.copy(),
        action_high=policy.action_high.copy(),
        provenance=policy.provenance,
    )
