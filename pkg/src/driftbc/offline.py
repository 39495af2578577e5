"""Offline phase: reference policies on each demo pool, state-density models,
discriminator training with the decaying posterior regularizer, then
discriminator-weighted behavior cloning.

Stages run strictly in that order. Density ratios and regression targets are
precomputed over the training samples and treated as constants during
discriminator training; the main policy's weights come from the finished
discriminator. Every stage appends to one metrics log and all randomness
derives from the single config seed through named streams.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, replace

import numpy as np

from . import configio, envs
from .demos import DemoSet, load_demoset, split_holdout
from .density import (DEFAULT_ALPHA, DEFAULT_COV_FLOOR, DEFAULT_K,
                      DEFAULT_RATIO_MAX, DEFAULT_RATIO_MIN, GmmModel,
                      JointDensityModel, density_ratio, fit_gmm,
                      joint_log_density, load_gmm, save_gmm)
from .discriminator import (DiscriminatorModel, bc_weight, combined_offline_loss,
                            disc_params, eval_bce, init_discriminator,
                            load_discriminator, reg_weight_at, save_discriminator)
from .errors import ConfigError, DataError, NumericError
from .numeric import adam_step, init_adam, named_generator
from .policy import (GaussianPolicy, PolicyTrainConfig, init_policy, load_policy,
                     run_weighted_bc, save_policy, train_reference_policy)

DEFAULT_REF_STEPS = 5000
DEFAULT_DISC_STEPS = 20000
DEFAULT_BC_STEPS = 30000
DEFAULT_REG_CUTOFF = 10000
DISC_EVAL_POINTS = 20

POLICY_FILE = "policy.ckpt"
DISC_FILE = "discriminator.ckpt"
REF_EXPERT_FILE = "ref_policy_expert.ckpt"
REF_SUPP_FILE = "ref_policy_supp.ckpt"
GMM_EXPERT_FILE = "gmm_expert.ckpt"
GMM_SUPP_FILE = "gmm_supp.ckpt"
METRICS_FILE = "metrics.log"
CONFIG_FILE = "config.txt"
CHECKPOINT_FILES = (POLICY_FILE, DISC_FILE, REF_EXPERT_FILE, REF_SUPP_FILE,
                    GMM_EXPERT_FILE, GMM_SUPP_FILE)


@dataclass(frozen=True)
class OfflineConfig:
    env_id: str
    expert_demos: str
    supp_demos: str = ""
    seed: int = 0
    ref_steps: int = DEFAULT_REF_STEPS
    disc_steps: int = DEFAULT_DISC_STEPS
    bc_steps: int = DEFAULT_BC_STEPS
    reg_cutoff: int = DEFAULT_REG_CUTOFF
    gmm_k: int = DEFAULT_K
    gmm_alpha: float = DEFAULT_ALPHA
    gmm_cov_floor: float = DEFAULT_COV_FLOOR
    ratio_min: float = DEFAULT_RATIO_MIN
    ratio_max: float = DEFAULT_RATIO_MAX
    learning_rate: float = 5e-4
    batch_size: int = 64
    holdout_fraction: float = 0.1
    disable_reg: bool = False
    plain_bc: bool = False

    def __post_init__(self):
        if self.env_id not in envs.ENV_IDS:
            raise ConfigError(f"unknown env_id {self.env_id!r}")
        for name in ("ref_steps", "disc_steps", "bc_steps"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2")
        if not self.expert_demos:
            raise ConfigError("expert_demos path is required")
        if not self.supp_demos and not self.plain_bc:
            raise ConfigError("supp_demos path is required unless plain_bc is set")

    @classmethod
    def from_dict(cls, cfg: dict) -> "OfflineConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(cfg) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        return cls(
            env_id=configio.as_str(cfg, "env_id"),
            expert_demos=configio.as_str(cfg, "expert_demos"),
            supp_demos=configio.as_str(cfg, "supp_demos", ""),
            seed=configio.as_int(cfg, "seed", 0),
            ref_steps=configio.as_int(cfg, "ref_steps", DEFAULT_REF_STEPS),
            disc_steps=configio.as_int(cfg, "disc_steps", DEFAULT_DISC_STEPS),
            bc_steps=configio.as_int(cfg, "bc_steps", DEFAULT_BC_STEPS),
            reg_cutoff=configio.as_int(cfg, "reg_cutoff", DEFAULT_REG_CUTOFF),
            gmm_k=configio.as_int(cfg, "gmm_k", DEFAULT_K),
            gmm_alpha=configio.as_float(cfg, "gmm_alpha", DEFAULT_ALPHA),
            gmm_cov_floor=configio.as_float(cfg, "gmm_cov_floor", DEFAULT_COV_FLOOR),
            ratio_min=configio.as_float(cfg, "ratio_min", DEFAULT_RATIO_MIN),
            ratio_max=configio.as_float(cfg, "ratio_max", DEFAULT_RATIO_MAX),
            learning_rate=configio.as_float(cfg, "learning_rate", 5e-4),
            batch_size=configio.as_int(cfg, "batch_size", 64),
            holdout_fraction=configio.as_float(cfg, "holdout_fraction", 0.1),
            disable_reg=configio.as_bool(cfg, "disable_reg", False),
            plain_bc=configio.as_bool(cfg, "plain_bc", False),
        )

    def to_dict(self) -> dict[str, str]:
        out = {}
        for name in self.__dataclass_fields__:
            value = getattr(self, name)
            out[name] = str(value).lower() if isinstance(value, bool) else str(value)
        return out

    def hash(self) -> str:
        return configio.config_hash(self.to_dict())


@dataclass
class OfflineArtifacts:
    config: OfflineConfig
    policy: GaussianPolicy
    discriminator: DiscriminatorModel | None = None
    ref_expert: GaussianPolicy | None = None
    ref_supp: GaussianPolicy | None = None
    gmm_expert: GmmModel | None = None
    gmm_supp: GmmModel | None = None
    metrics: str = ""

    def joint_models(self) -> tuple[JointDensityModel, JointDensityModel]:
        if self.ref_expert is None or self.gmm_expert is None \
                or self.ref_supp is None or self.gmm_supp is None:
            raise ConfigError("density artifacts are missing (plain_bc run?)")
        return (JointDensityModel(self.ref_expert, self.gmm_expert),
                JointDensityModel(self.ref_supp, self.gmm_supp))


def _stable_logistic(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _load_demo_file(path: str, env_id: str) -> DemoSet:
    if not os.path.exists(path):
        raise DataError(f"missing demo file {path!r}")
    ds = load_demoset(path)
    if ds.env_id != env_id:
        raise DataError(f"demo file {path!r} is for env {ds.env_id!r}, "
                        f"config says {env_id!r}")
    return ds


def compute_bc_weights(disc: DiscriminatorModel | None, states, actions) -> np.ndarray:
    """Per-sample odds weights for weighted BC; requires a trained
    discriminator."""
    if disc is None:
        raise ConfigError("weighted BC requires a trained discriminator "
                          "(use plain_bc for the unweighted ablation)")
    return np.asarray(bc_weight(disc, states, actions), dtype=np.float64)


def eval_discriminator(disc: DiscriminatorModel, held_out_expert, held_out_supp) -> float:
    """Unweighted binary cross-entropy on held-out splits; expert labeled 1."""
    se, ae = held_out_expert
    ss, as_ = held_out_supp
    se, ae = np.atleast_2d(se), np.atleast_2d(ae)
    ss, as_ = np.atleast_2d(ss), np.atleast_2d(as_)
    if se.shape[0] == 0 or ss.shape[0] == 0:
        raise DataError("held-out evaluation needs samples on both sides")
    states = np.concatenate([se, ss])
    actions = np.concatenate([ae, as_])
    labels = np.concatenate([np.ones(se.shape[0]), np.zeros(ss.shape[0])])
    return eval_bce(disc, states, actions, labels)


class _MetricsLog:
    def __init__(self):
        self.lines: list[str] = []
        self.watch = configio.Stopwatch()

    def add(self, stage: str, step: int, loss: float, lam: float = 0.0) -> None:
        self.lines.append(f"stage={stage} step={step} loss={float(loss)!r} "
                          f"lambda={float(lam)!r} wall_ms={self.watch.ms()}")

    def add_history(self, stage: str, history, lam: float = 0.0) -> None:
        for step, loss in history:
            self.add(stage, step, loss, lam)

    def text(self) -> str:
        return "\n".join(self.lines) + "\n" if self.lines else ""


def _train_discriminator(config: OfflineConfig, disc: DiscriminatorModel,
                         expert_train: DemoSet, supp_train: DemoSet,
                         ratios: np.ndarray, targets_e: np.ndarray,
                         targets_s: np.ndarray, holdout: tuple, log: _MetricsLog) -> None:
    s_e, a_e = expert_train.states, expert_train.actions
    s_s, a_s = supp_train.states, supp_train.actions
    n_e, n_s = s_e.shape[0], s_s.shape[0]
    half = config.batch_size // 2
    rng = named_generator(config.seed, "disc_batch")
    params = disc_params(disc)
    opt = init_adam(params, learning_rate=config.learning_rate)
    eval_every = max(1, config.disc_steps // DISC_EVAL_POINTS)

    for step in range(1, config.disc_steps + 1):
        idx_e = rng.integers(0, n_e, size=config.batch_size)
        idx_s = rng.integers(0, n_s, size=config.batch_size)
        expert_batch = (s_e[idx_e], a_e[idx_e])
        supp_batch = (s_s[idx_s], a_s[idx_s])
        lam = 0.0 if config.disable_reg else reg_weight_at(step, config.reg_cutoff)
        try:
            if lam == 0.0:
                loss, grads = combined_offline_loss(
                    disc, expert_batch, supp_batch, None, ratios[idx_s], None, 0.0)
            else:
                # regularizer batch: leading halves of both class batches
                mixed_batch = (np.concatenate([s_e[idx_e[:half]], s_s[idx_s[:half]]]),
                               np.concatenate([a_e[idx_e[:half]], a_s[idx_s[:half]]]))
                mixed_targets = np.concatenate([targets_e[idx_e[:half]],
                                                targets_s[idx_s[:half]]])
                loss, grads = combined_offline_loss(
                    disc, expert_batch, supp_batch, mixed_batch, ratios[idx_s],
                    mixed_targets, lam)
        except NumericError as exc:
            raise NumericError(
                f"discriminator training aborted at step {step}: {exc}") from exc
        if not np.isfinite(loss):
            raise NumericError(f"non-finite discriminator loss at step {step}")
        adam_step(params, grads, opt)
        log.add("disc", step, loss, lam)
        if step % eval_every == 0 or step == config.disc_steps:
            log.add("disc_eval", step, eval_discriminator(disc, *holdout), lam)


def run_offline(config: OfflineConfig) -> OfflineArtifacts:
    log = _MetricsLog()
    spec = envs.make_spec(config.env_id)

    expert_all = _load_demo_file(config.expert_demos, config.env_id)
    supp_all = (_load_demo_file(config.supp_demos, config.env_id)
                if config.supp_demos else None)
    expert_train, expert_hold = split_holdout(expert_all, config.holdout_fraction)
    supp_train = supp_hold = None
    if supp_all is not None:
        supp_train, supp_hold = split_holdout(supp_all, config.holdout_fraction)

    ref_expert = ref_supp = gmm_expert = gmm_supp = disc = None
    if config.plain_bc:
        if supp_train is not None:
            bc_states = np.concatenate([expert_train.states, supp_train.states])
            bc_actions = np.concatenate([expert_train.actions, supp_train.actions])
        else:
            bc_states, bc_actions = expert_train.states, expert_train.actions
        weights = np.ones(bc_states.shape[0])
    else:
        ref_cfg = PolicyTrainConfig(steps=config.ref_steps,
                                    learning_rate=config.learning_rate,
                                    batch_size=config.batch_size,
                                    action_low=spec.action_low,
                                    action_high=spec.action_high, label="expert")
        hist: list = []
        ref_expert = train_reference_policy(expert_train, ref_cfg, config.seed,
                                            record_every=1, history=hist)
        log.add_history("ref_expert", hist)
        hist = []
        ref_supp = train_reference_policy(supp_train, replace(ref_cfg, label="supp"),
                                          config.seed, record_every=1, history=hist)
        log.add_history("ref_supp", hist)

        gmm_expert = fit_gmm(
            expert_train.states, n_components=config.gmm_k,
            seed=int(named_generator(config.seed, "gmm_expert").integers(2 ** 31)),
            alpha=config.gmm_alpha, cov_floor=config.gmm_cov_floor,
            provenance=expert_train.provenance_label())
        log.add_history("gmm_expert",
                        list(enumerate(gmm_expert.ll_history, start=1)))
        gmm_supp = fit_gmm(
            supp_train.states, n_components=config.gmm_k,
            seed=int(named_generator(config.seed, "gmm_supp").integers(2 ** 31)),
            alpha=config.gmm_alpha, cov_floor=config.gmm_cov_floor,
            provenance=supp_train.provenance_label())
        log.add_history("gmm_supp", list(enumerate(gmm_supp.ll_history, start=1)))

        joint_e = JointDensityModel(ref_expert, gmm_expert)
        joint_s = JointDensityModel(ref_supp, gmm_supp)
        # frozen per-sample quantities: supplementary-over-expert ratios and
        # posterior targets sigma(log pE - log pS)
        ratios = density_ratio(joint_e, joint_s, supp_train.states,
                               supp_train.actions, config.ratio_min, config.ratio_max)
        diff_e = (joint_log_density(joint_e, expert_train.states, expert_train.actions)
                  - joint_log_density(joint_s, expert_train.states, expert_train.actions))
        diff_s = (joint_log_density(joint_e, supp_train.states, supp_train.actions)
                  - joint_log_density(joint_s, supp_train.states, supp_train.actions))
        targets_e = _stable_logistic(np.atleast_1d(diff_e))
        targets_s = _stable_logistic(np.atleast_1d(diff_s))

        disc = init_discriminator(spec.state_dim, spec.action_dim,
                                  rng=named_generator(config.seed, "disc_init"))
        holdout = ((expert_hold.states, expert_hold.actions),
                   (supp_hold.states, supp_hold.actions))
        _train_discriminator(config, disc, expert_train, supp_train, ratios,
                             targets_e, targets_s, holdout, log)

        bc_states = np.concatenate([expert_train.states, supp_train.states])
        bc_actions = np.concatenate([expert_train.actions, supp_train.actions])
        weights = compute_bc_weights(disc, bc_states, bc_actions)

    policy = init_policy(spec.state_dim, spec.action_dim, spec.action_low,
                         spec.action_high,
                         rng=named_generator(config.seed, "policy_init"),
                         provenance="main")
    bc_hist = run_weighted_bc(policy, bc_states, bc_actions, weights,
                              config.bc_steps, config.batch_size,
                              config.learning_rate,
                              named_generator(config.seed, "policy_train"),
                              record_every=1)
    log.add_history("bc", bc_hist)

    return OfflineArtifacts(config=config, policy=policy, discriminator=disc,
                            ref_expert=ref_expert, ref_supp=ref_supp,
                            gmm_expert=gmm_expert, gmm_supp=gmm_supp,
                            metrics=log.text())


# ----------------------------------------------------------------- storage


def save_offline_artifacts(out_dir, artifacts: OfflineArtifacts) -> list[str]:
    os.makedirs(out_dir, exist_ok=True)
    extra = {"config_hash": artifacts.config.hash(), "seed": artifacts.config.seed}
    written = []

    def emit(name, saver, model):
        if model is not None:
            saver(os.path.join(out_dir, name), model, extra)
            written.append(name)

    emit(POLICY_FILE, save_policy, artifacts.policy)
    emit(DISC_FILE, save_discriminator, artifacts.discriminator)
    emit(REF_EXPERT_FILE, save_policy, artifacts.ref_expert)
    emit(REF_SUPP_FILE, save_policy, artifacts.ref_supp)
    emit(GMM_EXPERT_FILE, save_gmm, artifacts.gmm_expert)
    emit(GMM_SUPP_FILE, save_gmm, artifacts.gmm_supp)

    configio.write_text_atomic(os.path.join(out_dir, METRICS_FILE), artifacts.metrics)
    written.append(METRICS_FILE)
    configio.write_text_atomic(os.path.join(out_dir, CONFIG_FILE),
                               configio.format_config(artifacts.config.to_dict()))
    written.append(CONFIG_FILE)
    return written


def load_offline_artifacts(out_dir, require_full: bool = True) -> OfflineArtifacts:
    cfg_path = os.path.join(out_dir, CONFIG_FILE)
    if not os.path.exists(cfg_path):
        raise DataError(f"missing artifact {CONFIG_FILE!r} in {out_dir}")
    config = OfflineConfig.from_dict(configio.load_config(cfg_path))

    required = CHECKPOINT_FILES if require_full else (POLICY_FILE,)
    missing = [name for name in required
               if not os.path.exists(os.path.join(out_dir, name))]
    if missing:
        raise DataError(f"incomplete artifacts in {out_dir}: missing "
                        f"{', '.join(sorted(missing))}")

    def maybe(name, loader):
        path = os.path.join(out_dir, name)
        if not os.path.exists(path):
            return None
        model, extras = loader(path)
        stamp = extras.get("config_hash")
        if stamp is not None and stamp != config.hash():
            raise DataError(f"artifact {name!r} carries config hash {stamp}, "
                            f"directory config hashes to {config.hash()}")
        return model

    metrics_path = os.path.join(out_dir, METRICS_FILE)
    metrics = ""
    if os.path.exists(metrics_path):
        with open(metrics_path, encoding="utf-8") as fh:
            metrics = fh.read()

    return OfflineArtifacts(
        config=config,
        policy=maybe(POLICY_FILE, load_policy),
        discriminator=maybe(DISC_FILE, load_discriminator),
        ref_expert=maybe(REF_EXPERT_FILE, load_policy),
        ref_supp=maybe(REF_SUPP_FILE, load_policy),
        gmm_expert=maybe(GMM_EXPERT_FILE, load_gmm),
        gmm_supp=maybe(GMM_SUPP_FILE, load_gmm),
        metrics=metrics,
    )
