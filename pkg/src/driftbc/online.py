"""Online phase: per-step shift scoring, patience-gated update triggering,
bounded experience collection, and triggered discriminator + policy refreshes.

The inference loop is strictly sequential: observe, score, act, maybe update.
A state's shift score is the mean of the two state-density membership scores,
computed on the observed (possibly noisy) state, since that is all the agent
sees at inference time. Updates train clones and swap them in only on success,
so a failed update leaves the deployed models bit-identical.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import envs
from .configio import Stopwatch
from .demos import DemoSet
from .density import GmmModel, membership_score
from .discriminator import (bc_weight, clone_discriminator, disc_params,
                            online_disc_loss)
from .errors import ConfigError, DataError, NumericError
from .numeric import adam_step, init_adam, named_generator
from .offline import OfflineArtifacts
from .policy import clone_policy, run_weighted_bc, sample_action

KAPPA_THRESHOLD = 0.4
PATIENCE = 20
BUFFER_CAPACITY = 2000
UPDATE_DISC_STEPS = 50
UPDATE_POLICY_STEPS = 50
ADAPT_MODES = ("on", "off", "always")


@dataclass
class ShiftDetector:
    """Counts consecutive low-score steps and collects online experience.

    The buffer holds (state, action, score) triples with oldest-first
    eviction; it is not cleared by a trigger, so later updates see the
    accumulated recent experience.
    """

    kappa_threshold: float = KAPPA_THRESHOLD
    patience: int = PATIENCE
    buffer_capacity: int = BUFFER_CAPACITY
    consecutive_count: int = 0
    buffer: deque = field(default_factory=lambda: deque(maxlen=BUFFER_CAPACITY))


def make_detector(kappa_threshold: float = KAPPA_THRESHOLD,
                  patience: int = PATIENCE,
                  buffer_capacity: int = BUFFER_CAPACITY) -> ShiftDetector:
    if not 0.0 <= kappa_threshold <= 1.0:
        raise ConfigError("kappa_threshold must lie in [0, 1]")
    if patience < 1:
        raise ConfigError("patience must be at least 1")
    if buffer_capacity < 1:
        raise ConfigError("buffer_capacity must be at least 1")
    return ShiftDetector(kappa_threshold=kappa_threshold, patience=patience,
                         buffer_capacity=buffer_capacity,
                         buffer=deque(maxlen=buffer_capacity))


def kappa(s, gmm_expert: GmmModel, gmm_supp: GmmModel):
    """Mean of the two calibrated membership scores; scalar for a single
    state, (N,) for a batch."""
    score = 0.5 * (membership_score(gmm_expert, s) + membership_score(gmm_supp, s))
    return float(score) if np.ndim(score) == 0 else score


def append_experience(detector: ShiftDetector, s, a, kappa_value: float) -> None:
    detector.buffer.append((np.array(s, dtype=np.float64),
                            np.array(a, dtype=np.float64), float(kappa_value)))


def observe_step(detector: ShiftDetector, s, a, kappa_value: float) -> bool:
    """Patience-gated trigger rule: a low score extends the current run and
    stores the experience; an in-distribution score resets the run. Returns
    True when the run reaches the patience length, resetting the count."""
    if kappa_value < detector.kappa_threshold:
        detector.consecutive_count += 1
        append_experience(detector, s, a, kappa_value)
    else:
        detector.consecutive_count = 0
    if detector.consecutive_count >= detector.patience:
        detector.consecutive_count = 0
        return True
    return False


def buffer_snapshot(detector: ShiftDetector):
    """Freeze the buffer into (states, actions, scores) arrays."""
    if not detector.buffer:
        raise DataError("online experience buffer is empty")
    states = np.stack([item[0] for item in detector.buffer])
    actions = np.stack([item[1] for item in detector.buffer])
    scores = np.array([item[2] for item in detector.buffer])
    return states, actions, scores


@dataclass(frozen=True)
class OnlineUpdateConfig:
    disc_steps: int = UPDATE_DISC_STEPS
    policy_steps: int = UPDATE_POLICY_STEPS
    batch_size: int = 64
    learning_rate: float = 5e-4

    def __post_init__(self):
        if self.disc_steps < 1 or self.policy_steps < 1:
            raise ConfigError("per-trigger step counts must be positive")


def online_update(artifacts: OfflineArtifacts, snapshot, expert_demos: DemoSet,
                  config: OnlineUpdateConfig, seed: int, update_index: int) -> bool:
    """One triggered refresh: discriminator steps on expert-vs-online batches
    with the stored shift scores, then policy steps over the union of expert
    demos and online experience, weighted by the refreshed discriminator.

    Trains clones and installs them only if every step stays finite; on a
    non-finite loss the deployed models are left untouched and False is
    returned. The state-density models are never modified.
    """
    states_x, actions_x, scores_x = snapshot
    states_x = np.atleast_2d(states_x)
    actions_x = np.atleast_2d(actions_x)
    scores_x = np.atleast_1d(scores_x)
    if states_x.shape[0] == 0:
        raise DataError("online update needs a non-empty snapshot")
    if artifacts.discriminator is None:
        raise ConfigError("online updates need the discriminator artifact")

    s_e, a_e = expert_demos.states, expert_demos.actions
    n_e, n_x = s_e.shape[0], states_x.shape[0]
    disc = clone_discriminator(artifacts.discriminator)
    policy = clone_policy(artifacts.policy)
    try:
        rng = named_generator(seed, f"online_update{update_index}_disc")
        params = disc_params(disc)
        opt = init_adam(params, learning_rate=config.learning_rate)
        for step in range(1, config.disc_steps + 1):
            idx_e = rng.integers(0, n_e, size=config.batch_size)
            idx_x = rng.integers(0, n_x, size=config.batch_size)
            loss, grads = online_disc_loss(
                disc, (s_e[idx_e], a_e[idx_e]),
                (states_x[idx_x], actions_x[idx_x], scores_x[idx_x]))
            if not np.isfinite(loss):
                raise NumericError(f"non-finite online disc loss at step {step}")
            adam_step(params, grads, opt)

        s_all = np.concatenate([s_e, states_x])
        a_all = np.concatenate([a_e, actions_x])
        weights = np.asarray(bc_weight(disc, s_all, a_all), dtype=np.float64)
        run_weighted_bc(policy, s_all, a_all, weights, config.policy_steps,
                        config.batch_size, config.learning_rate,
                        named_generator(seed, f"online_update{update_index}_policy"))
    except NumericError:
        return False
    artifacts.discriminator = disc
    artifacts.policy = policy
    return True


# --------------------------------------------------------------- run loop


@dataclass(frozen=True)
class StepRecord:
    episode: int
    step: int
    kappa: float
    triggered: bool
    update_wall_ms: int


@dataclass
class OnlineResult:
    episode_returns: np.ndarray
    records: list[StepRecord]
    update_invocations: int = 0
    failed_updates: int = 0
    update_wall_ms_total: int = 0


def run_online(artifacts: OfflineArtifacts, expert_demos: DemoSet, sigma: float,
               episodes: int, adapt: str = "on", seed: int = 0,
               kappa_threshold: float = KAPPA_THRESHOLD, patience: int = PATIENCE,
               buffer_capacity: int = BUFFER_CAPACITY,
               update_config: OnlineUpdateConfig | None = None) -> OnlineResult:
    """Roll episodes under observation noise, scoring every observed state.

    adapt="on" uses the patience gate; "always" stores every step and updates
    every patience steps of the run unconditionally; "off" only logs.
    Updates happen mid-episode and block the loop. The consecutive count
    starts fresh each episode since a reset breaks any ongoing shift run.
    Mutates artifacts.policy / artifacts.discriminator under on/always.
    """
    if adapt not in ADAPT_MODES:
        raise ConfigError(f"adapt must be one of {ADAPT_MODES}, got {adapt!r}")
    if episodes < 1:
        raise ConfigError("episodes must be positive")
    if artifacts.gmm_expert is None or artifacts.gmm_supp is None:
        raise ConfigError("online run needs both state-density artifacts")
    if update_config is None:
        update_config = OnlineUpdateConfig()

    spec = envs.make_spec(artifacts.config.env_id)
    detector = make_detector(kappa_threshold, patience, buffer_capacity)
    returns = np.zeros(episodes)
    records: list[StepRecord] = []
    result = OnlineResult(episode_returns=returns, records=records)
    global_step = 0
    update_index = 0

    for ep in range(episodes):
        env_rng = named_generator(seed, f"online_ep{ep}_env")
        obs_rng = named_generator(seed, f"online_ep{ep}_obs")
        act_rng = named_generator(seed, f"online_ep{ep}_act")
        wrapper = envs.NoiseWrapper(sigma=sigma, rng=obs_rng)
        state = envs.reset(spec, env_rng)
        detector.consecutive_count = 0
        ep_return = 0.0

        for step in range(spec.horizon):
            obs = envs.observe(wrapper, state)
            k = kappa(obs, artifacts.gmm_expert, artifacts.gmm_supp)
            action = sample_action(artifacts.policy, obs, rng=act_rng)
            state, reward, done = envs.step(spec, state, action)
            ep_return += reward
            global_step += 1

            if adapt == "on":
                triggered = observe_step(detector, obs, action, k)
            elif adapt == "always":
                append_experience(detector, obs, action, k)
                triggered = global_step % detector.patience == 0
            else:
                triggered = False

            wall = 0
            if triggered:
                watch = Stopwatch()
                ok = online_update(artifacts, buffer_snapshot(detector),
                                   expert_demos, update_config, seed, update_index)
                wall = watch.ms()
                update_index += 1
                result.update_invocations += 1
                result.update_wall_ms_total += wall
                if not ok:
                    result.failed_updates += 1
            records.append(StepRecord(ep, step, k, triggered, wall))
            if done:
                break
        returns[ep] = ep_return
    return result


# ------------------------------------------------------------- trigger log


def format_trigger_log(records) -> str:
    lines = [f"episode={r.episode} step={r.step} kappa={float(r.kappa)!r} "
             f"triggered={int(r.triggered)} wall_ms={r.update_wall_ms}"
             for r in records]
    return "\n".join(lines) + "\n" if lines else ""


def parse_trigger_log(text: str) -> list[StepRecord]:
    records = []
    for i, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            parts = dict(tok.split("=", 1) for tok in line.split())
            records.append(StepRecord(int(parts["episode"]), int(parts["step"]),
                                      float(parts["kappa"]),
                                      bool(int(parts["triggered"])),
                                      int(parts["wall_ms"])))
        except (KeyError, ValueError):
            raise DataError(f"malformed trigger log line {i}: {line!r}") from None
    return records


def validate_trigger_log(records, kappa_threshold: float = KAPPA_THRESHOLD,
                         patience: int = PATIENCE) -> int:
    """Replay the patience gate over a step log, asserting every trigger flag
    matches the rule; episode boundaries reset the count. Returns the trigger
    count; raises DataError naming the first violating record."""
    count = 0
    triggers = 0
    current_ep = None
    for r in records:
        if r.episode != current_ep:
            current_ep = r.episode
            count = 0
        if r.kappa < kappa_threshold:
            count += 1
        else:
            count = 0
        expected = count >= patience
        if expected:
            count = 0
            triggers += 1
        if r.triggered != expected:
            raise DataError(f"trigger log violates the gating rule at episode "
                            f"{r.episode} step {r.step}: logged "
                            f"{r.triggered}, rule says {expected}")
    return triggers
