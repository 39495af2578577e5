"""Tiered demonstration sets: generation from scripted controllers, mixing,
and a bit-exact on-disk format.

A set stores flat sample columns plus run-length tier bookkeeping, so a mixed
set remembers which contiguous block came from which tier. Episode ids are
renumbered on mixing to stay unique within a set.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError
from .numeric import format_header, named_generator, parse_header
from .policy import PolicyTrainConfig, sample_action, train_reference_policy
from . import envs

TIERS = ("expert", "medium", "medium_replay_like", "random")
MEDIUM_ACTION_NOISE = 0.3
# medium_replay_like rolls out a BC policy stopped at this fraction of the
# reference-policy budget
MRL_BUDGET_FRACTION = 0.2
MRL_SOURCE_EPISODES = 10

DEMO_KIND = "demoset"
REFRET_KIND = "refret"


@dataclass(frozen=True)
class TierRun:
    """One contiguous block of samples generated under a single tier."""

    tier: str
    episodes: int
    samples: int


@dataclass(frozen=True)
class DemoSample:
    state: np.ndarray
    action: np.ndarray
    episode_id: int
    step_index: int
    tier: str


@dataclass(eq=False)
class DemoSet:
    env_id: str
    state_dim: int
    action_dim: int
    seed: int
    states: np.ndarray        # (N, state_dim)
    actions: np.ndarray       # (N, action_dim)
    episode_ids: np.ndarray   # (N,) int32
    step_indices: np.ndarray  # (N,) int32
    tier_runs: tuple[TierRun, ...]
    # generation-time log, not serialized
    episode_returns: np.ndarray | None = dataclasses.field(default=None, repr=False)

    @property
    def n_samples(self) -> int:
        return int(self.states.shape[0])

    @property
    def n_episodes(self) -> int:
        return sum(run.episodes for run in self.tier_runs)

    def provenance_label(self) -> str:
        seen: list[str] = []
        for run in self.tier_runs:
            if run.tier not in seen:
                seen.append(run.tier)
        return "+".join(seen)

    def tier_of(self, i: int) -> str:
        if not 0 <= i < self.n_samples:
            raise ConfigError(f"sample index {i} out of range [0, {self.n_samples})")
        offset = 0
        for run in self.tier_runs:
            offset += run.samples
            if i < offset:
                return run.tier
        raise DataError("tier runs cover fewer samples than stored")

    def sample(self, i: int) -> DemoSample:
        tier = self.tier_of(i)
        return DemoSample(self.states[i], self.actions[i],
                          int(self.episode_ids[i]), int(self.step_indices[i]), tier)

    def iter_samples(self):
        for i in range(self.n_samples):
            yield self.sample(i)


def _check_consistent(demos: DemoSet) -> None:
    n = demos.n_samples
    if not (demos.actions.shape[0] == demos.episode_ids.shape[0]
            == demos.step_indices.shape[0] == n):
        raise DataError("demo column lengths disagree")
    if sum(run.samples for run in demos.tier_runs) != n:
        raise DataError("tier runs do not cover the stored samples")


def _mrl_policy(spec: envs.EnvSpec, seed: int):
    """Under-trained BC policy used as the medium_replay_like behavior."""
    source = generate_tier(spec, "expert", MRL_SOURCE_EPISODES, seed)
    steps = max(1, int(PolicyTrainConfig.__dataclass_fields__["steps"].default
                       * MRL_BUDGET_FRACTION))
    config = PolicyTrainConfig(steps=steps, action_low=spec.action_low,
                               action_high=spec.action_high,
                               label=f"mrl_{spec.env_id}")
    return train_reference_policy(source, config, seed)


def generate_tier(spec: envs.EnvSpec, tier: str, episodes: int, seed: int) -> DemoSet:
    """Roll out one tier's behavior policy; true states only, no observation
    noise. Deterministic given (spec, tier, episodes, seed)."""
    if tier not in TIERS:
        raise ConfigError(f"unknown tier {tier!r}; valid: {', '.join(TIERS)}")
    if episodes < 1:
        raise ConfigError("episodes must be >= 1")

    mrl = _mrl_policy(spec, seed) if tier == "medium_replay_like" else None

    states, actions, ep_ids, step_ids, returns = [], [], [], [], []
    for ep in range(episodes):
        # env stream is shared across tiers so same-seed tiers start from the
        # same states; that pairing makes tier-separation comparisons tight
        env_rng = named_generator(seed, f"ep{ep}_env")
        act_rng = named_generator(seed, f"{tier}_ep{ep}_act")

        if tier == "expert":
            act = lambda s: envs.scripted_expert(spec, s)
        elif tier == "medium":
            act = lambda s: np.clip(
                envs.scripted_expert(spec, s)
                + act_rng.standard_normal(spec.action_dim) * MEDIUM_ACTION_NOISE,
                spec.action_low, spec.action_high)
        elif tier == "random":
            act = lambda s: act_rng.uniform(spec.action_low, spec.action_high)
        else:
            act = lambda s: sample_action(mrl, s, act_rng)

        rec = envs.rollout(spec, act, env_rng)
        states.append(rec.true_states)
        actions.append(rec.actions)
        ep_ids.append(np.full(len(rec), ep, dtype=np.int32))
        step_ids.append(np.arange(len(rec), dtype=np.int32))
        returns.append(rec.total_return)

    all_states = np.concatenate(states)
    return DemoSet(
        env_id=spec.env_id,
        state_dim=spec.state_dim,
        action_dim=spec.action_dim,
        seed=seed,
        states=all_states,
        actions=np.concatenate(actions),
        episode_ids=np.concatenate(ep_ids),
        step_indices=np.concatenate(step_ids),
        tier_runs=(TierRun(tier, episodes, all_states.shape[0]),),
        episode_returns=np.array(returns),
    )


def mix_supplementary(tiers, proportions=None) -> DemoSet:
    """Concatenate tier sets in the given order, keeping the leading
    proportion of each set's episodes (whole episodes only)."""
    tiers = list(tiers)
    if not tiers:
        raise ConfigError("need at least one demo set to mix")
    if proportions is None:
        proportions = [1.0] * len(tiers)
    if len(proportions) != len(tiers):
        raise ConfigError("one proportion per demo set required")
    head = tiers[0]
    for ds in tiers[1:]:
        if ds.env_id != head.env_id:
            raise DataError(f"cannot mix env {ds.env_id!r} into {head.env_id!r}")
        if ds.state_dim != head.state_dim or ds.action_dim != head.action_dim:
            raise DataError("cannot mix demo sets with different dimensions")

    states, actions, ep_ids, step_ids, runs = [], [], [], [], []
    ep_offset = 0
    for ds, prop in zip(tiers, proportions):
        if not 0.0 < prop <= 1.0:
            raise ConfigError(f"proportion {prop} outside (0, 1]")
        _check_consistent(ds)
        sample_offset = 0
        for run in ds.tier_runs:
            run_slice = slice(sample_offset, sample_offset + run.samples)
            run_eps = ds.episode_ids[run_slice]
            keep_eps = max(1, int(round(prop * run.episodes)))
            # episode ids within a run are 0..episodes-1 in generation order
            base = run_eps.min() if run.samples else 0
            mask = run_eps < base + keep_eps
            states.append(ds.states[run_slice][mask])
            actions.append(ds.actions[run_slice][mask])
            kept = run_eps[mask]
            ep_ids.append((kept - base + ep_offset).astype(np.int32))
            step_ids.append(ds.step_indices[run_slice][mask])
            runs.append(TierRun(run.tier, keep_eps, int(mask.sum())))
            ep_offset += keep_eps
            sample_offset += run.samples

    return DemoSet(
        env_id=head.env_id,
        state_dim=head.state_dim,
        action_dim=head.action_dim,
        seed=head.seed,
        states=np.concatenate(states),
        actions=np.concatenate(actions),
        episode_ids=np.concatenate(ep_ids),
        step_indices=np.concatenate(step_ids),
        tier_runs=tuple(runs),
    )


def split_holdout(demos: DemoSet, fraction: float = 0.1) -> tuple[DemoSet, DemoSet]:
    """Per tier run, the trailing floor(fraction * episodes) episodes become
    the held-out set. A run too small to spare one episode keeps all its
    episodes for training and contributes its last episode to the held-out
    side anyway, so both splits stay usable at extreme imbalance."""
    if not 0.0 < fraction < 1.0:
        raise ConfigError(f"holdout fraction {fraction} outside (0, 1)")
    _check_consistent(demos)

    def build(pieces, runs):
        return DemoSet(
            env_id=demos.env_id, state_dim=demos.state_dim,
            action_dim=demos.action_dim, seed=demos.seed,
            states=np.concatenate([p[0] for p in pieces]),
            actions=np.concatenate([p[1] for p in pieces]),
            episode_ids=np.concatenate([p[2] for p in pieces]),
            step_indices=np.concatenate([p[3] for p in pieces]),
            tier_runs=tuple(runs),
        )

    train_pieces, train_runs, hold_pieces, hold_runs = [], [], [], []
    sample_offset = 0
    train_off = hold_off = 0
    for run in demos.tier_runs:
        run_slice = slice(sample_offset, sample_offset + run.samples)
        run_eps = demos.episode_ids[run_slice]
        base = run_eps.min() if run.samples else 0
        n_hold = int(np.floor(fraction * run.episodes))
        overlap = n_hold == 0
        n_train = run.episodes if overlap else run.episodes - n_hold
        train_mask = run_eps < base + n_train
        hold_mask = run_eps >= base + (run.episodes - max(n_hold, 1))

        train_pieces.append((demos.states[run_slice][train_mask],
                             demos.actions[run_slice][train_mask],
                             (run_eps[train_mask] - base + train_off).astype(np.int32),
                             demos.step_indices[run_slice][train_mask]))
        train_runs.append(TierRun(run.tier, n_train, int(train_mask.sum())))
        train_off += n_train

        first_hold = base + (run.episodes - max(n_hold, 1))
        hold_pieces.append((demos.states[run_slice][hold_mask],
                            demos.actions[run_slice][hold_mask],
                            (run_eps[hold_mask] - first_hold + hold_off).astype(np.int32),
                            demos.step_indices[run_slice][hold_mask]))
        hold_runs.append(TierRun(run.tier, max(n_hold, 1), int(hold_mask.sum())))
        hold_off += max(n_hold, 1)
        sample_offset += run.samples

    return build(train_pieces, train_runs), build(hold_pieces, hold_runs)


# ------------------------------------------------------------------ storage


def _row_dtype(state_dim: int, action_dim: int) -> np.dtype:
    return np.dtype([("ep", "<i4"), ("step", "<i4"),
                     ("s", "<f8", (state_dim,)), ("a", "<f8", (action_dim,))])


def save_demoset(path, demos: DemoSet) -> None:
    _check_consistent(demos)
    tiers = ",".join(f"{r.tier}:{r.episodes}:{r.samples}" for r in demos.tier_runs)
    fields = {
        "env_id": demos.env_id,
        "state_dim": demos.state_dim,
        "action_dim": demos.action_dim,
        "seed": demos.seed,
        "episodes": demos.n_episodes,
        "samples": demos.n_samples,
        "tiers": tiers,
    }
    rows = np.empty(demos.n_samples, dtype=_row_dtype(demos.state_dim, demos.action_dim))
    rows["ep"] = demos.episode_ids
    rows["step"] = demos.step_indices
    rows["s"] = demos.states
    rows["a"] = demos.actions
    with open(path, "wb") as fh:
        fh.write(format_header(DEMO_KIND, fields).encode("ascii"))
        fh.write(rows.tobytes())


def load_demoset(path) -> DemoSet:
    with open(path, "rb") as fh:
        header_line = fh.readline()
        payload = fh.read()
    try:
        text = header_line.decode("ascii").rstrip("\n")
    except UnicodeDecodeError as exc:
        raise DataError(f"demo header is not ascii: {exc}") from None
    kind, fields = parse_header(text)
    if kind != DEMO_KIND:
        raise DataError(f"expected a {DEMO_KIND} file, found kind {kind!r}")
    try:
        state_dim = int(fields["state_dim"])
        action_dim = int(fields["action_dim"])
        seed = int(fields["seed"])
        declared = int(fields["samples"])
        env_id = fields["env_id"]
        tier_text = fields["tiers"]
    except KeyError as exc:
        raise DataError(f"demo header missing field {exc.args[0]!r}") from None
    if state_dim < 1 or action_dim < 1:
        raise DataError(f"demo header has bad dims {state_dim}/{action_dim}")
    if env_id in envs.ENV_IDS:
        spec = envs.make_spec(env_id)
        if (spec.state_dim, spec.action_dim) != (state_dim, action_dim):
            raise DataError(
                f"dimension inconsistency: {env_id} has dims "
                f"{spec.state_dim}/{spec.action_dim}, header says {state_dim}/{action_dim}")

    runs = []
    for part in tier_text.split(","):
        try:
            tier, eps, samps = part.split(":")
            runs.append(TierRun(tier, int(eps), int(samps)))
        except ValueError:
            raise DataError(f"malformed tier entry {part!r} in demo header") from None
        if runs[-1].tier not in TIERS:
            raise DataError(f"unknown tier {runs[-1].tier!r} in demo header")
    if sum(r.samples for r in runs) != declared:
        raise DataError("demo header tier samples do not sum to the declared count")

    dtype = _row_dtype(state_dim, action_dim)
    row_size = dtype.itemsize
    n_full, leftover = divmod(len(payload), row_size)
    if leftover:
        raise DataError(
            f"demo file ends mid-row: row {n_full} has {leftover} of {row_size} "
            f"bytes (need {row_size - leftover} more); a row that narrow would "
            f"not match the declared dims {state_dim}/{action_dim}")
    if n_full < declared:
        missing = (declared - n_full) * row_size
        raise DataError(f"demo file truncated: header declares {declared} "
                        f"samples, found {n_full} ({missing} bytes missing)")
    if n_full > declared:
        raise DataError(f"demo file has {n_full - declared} rows beyond the "
                        f"declared {declared} samples")

    rows = np.frombuffer(payload, dtype=dtype)
    return DemoSet(
        env_id=env_id, state_dim=state_dim, action_dim=action_dim, seed=seed,
        states=rows["s"].copy(), actions=rows["a"].copy(),
        episode_ids=rows["ep"].copy(), step_indices=rows["step"].copy(),
        tier_runs=tuple(runs),
    )


# -------------------------------------------------------- reference returns


@dataclass(frozen=True)
class ReferenceReturns:
    env_id: str
    expert_return: float
    random_return: float
    episodes: int
    seed: int


def measure_reference_returns(spec: envs.EnvSpec, episodes: int = 100,
                              seed: int = 0) -> ReferenceReturns:
    """Mean scripted-expert and uniform-random returns, measured on the same
    episode streams the tier generator uses."""
    expert = generate_tier(spec, "expert", episodes, seed)
    random_tier = generate_tier(spec, "random", episodes, seed)
    return ReferenceReturns(
        env_id=spec.env_id,
        expert_return=float(np.mean(expert.episode_returns)),
        random_return=float(np.mean(random_tier.episode_returns)),
        episodes=episodes,
        seed=seed,
    )


def save_reference_returns(path, ref: ReferenceReturns) -> None:
    fields = {
        "env_id": ref.env_id,
        "expert_return": repr(ref.expert_return),
        "random_return": repr(ref.random_return),
        "episodes": ref.episodes,
        "seed": ref.seed,
    }
    with open(path, "w", encoding="ascii") as fh:
        fh.write(format_header(REFRET_KIND, fields))


def load_reference_returns(path) -> ReferenceReturns:
    with open(path, encoding="ascii") as fh:
        text = fh.readline().rstrip("\n")
    kind, fields = parse_header(text)
    if kind != REFRET_KIND:
        raise DataError(f"expected a {REFRET_KIND} file, found kind {kind!r}")
    try:
        return ReferenceReturns(
            env_id=fields["env_id"],
            expert_return=float(fields["expert_return"]),
            random_return=float(fields["random_return"]),
            episodes=int(fields["episodes"]),
            seed=int(fields["seed"]),
        )
    except (KeyError, ValueError) as exc:
        raise DataError(f"bad reference-returns file: {exc}") from None
