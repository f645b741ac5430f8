"""Supervised pretraining, rollout collection, returns, and PPO updates.

Training loop per epoch: play one bargaining episode in each of M parallel
environments (fresh instances, uniformly drawn start rounds), store every
decision as a transition, then per agent:

  1. compute discounted returns G (truncated episodes bootstrap from the
     state-value critic on the fictitious round-T+1 state);
  2. regress the proposing-state critic V on propose-turn returns and the
     responding Q critic (one slot per response) on respond-turn returns
     at the taken action;
  3. recompute advantages with the updated critics: propose turns use
     G - V(s), respond turns use the counterfactual baseline
     G - sum_a pi(a|s) Q(s,a); each (agent, kind) batch is normalized to
     zero mean and unit deviation;
  4. ascend the clipped PPO surrogate (or plain policy gradient in
     REINFORCE mode) with an entropy bonus, Adam, and global-norm clipping;
  5. fold the epoch's raw observations into the agent's running normalizer.

Evaluation runs deterministically on a fixed instance set with frozen
normalizer statistics. All randomness flows from named numpy streams, so a
seed pins the entire run, including checkpoints, bit for bit.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import __version__
from .bargaining import (
    OBS_DIM,
    BargainEnv,
    EpisodeOutcome,
    encode_observation,
    play_episodes,
    sample_training_start_round,
)
from .baselines import evaluate_policies
from .coalition_values import ValueOracle, characteristic_table
from .instances import generate_instances
from .policy import (
    ActorNet,
    ActorPolicy,
    CriticQNet,
    CriticVNet,
    PolicyFault,
    PretrainNet,
    RunningNormalizer,
    init_module_,
    load_checkpoint,
    load_module_arrays_,
    module_arrays,
    propose_log_prob_entropy,
    respond_log_prob_entropy,
    save_checkpoint,
)
from .rng import RngStream

log = logging.getLogger("coalroute.training")

AGENTS = (1, 2, 3)


class ConfigError(ValueError):
    """Invalid or unknown training configuration values."""


class TrainingDiverged(RuntimeError):
    """Non-finite loss or gradient; last good parameters were checkpointed."""


@dataclass
class TrainConfig:
    gamma: float = 0.95
    learner_gamma: float | None = None
    T: int = 10
    num_envs: int = 2048
    lr: float = 3e-4
    grad_clip: float = 1.0
    clip_eps: float = 0.05
    entropy_coef: float = 0.01
    ppo_passes: int = 1
    critic_steps: int = 5
    epochs: int = 10000
    eval_every: int = 100
    eval_episodes: int = 2048
    hidden: int = 256
    trunk_width: int = 256
    algo: str = "ppo"
    pretrain_records: int = 100_000
    pretrain_epochs: int = 10
    pretrain_batch: int = 512
    pretrain_lr: float = 1e-3
    seed: int = 0

    @property
    def discount(self) -> float:
        return self.gamma if self.learner_gamma is None else self.learner_gamma

    def validate(self) -> None:
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f"gamma must be in [0, 1], got {self.gamma}")
        if self.learner_gamma is not None and not 0.0 <= self.learner_gamma <= 1.0:
            raise ConfigError(f"learner_gamma must be in [0, 1], got {self.learner_gamma}")
        if self.T < 1:
            raise ConfigError(f"T must be >= 1, got {self.T}")
        if self.num_envs < 1:
            raise ConfigError(f"num_envs must be >= 1, got {self.num_envs}")
        if self.clip_eps <= 0:
            raise ConfigError(f"clip_eps must be > 0, got {self.clip_eps}")
        if self.lr <= 0 or self.pretrain_lr <= 0:
            raise ConfigError("learning rates must be > 0")
        if self.entropy_coef < 0:
            raise ConfigError(f"entropy_coef must be >= 0, got {self.entropy_coef}")
        if self.algo not in ("ppo", "reinforce"):
            raise ConfigError(f"algo must be 'ppo' or 'reinforce', got {self.algo!r}")
        for name in ("ppo_passes", "critic_steps", "eval_every", "eval_episodes",
                     "hidden", "trunk_width", "pretrain_batch", "pretrain_epochs"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.pretrain_records < 10:
            raise ConfigError(f"pretrain_records must be >= 10, got {self.pretrain_records}")
        if self.seed < 0:
            raise ConfigError(f"seed must be >= 0, got {self.seed}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        config = cls(**data)
        config.validate()
        return config

    def to_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        with open(path, "r", encoding="utf-8") as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"malformed config file: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
        return cls.from_dict(data)


# ---------------------------------------------------------------------------
# Pretraining
# ---------------------------------------------------------------------------


@dataclass
class PretrainResult:
    train_mse: float
    test_mse: float
    baseline_mse: float
    improvement: float
    n_train: int
    n_test: int


def build_pretrain_dataset(stream: RngStream, n: int) -> tuple[np.ndarray, np.ndarray]:
    """(delivery rows, coalition bits) -> v(C) records for supervised fitting."""
    instances = generate_instances(stream.child("instances"), n)
    mask_rng = stream.child("masks").generator()
    masks = mask_rng.integers(1, 8, size=n)
    features = np.empty((n, 51))
    targets = np.empty(n)
    for i, inst in enumerate(instances):
        features[i, :48] = inst.as_matrix().reshape(-1)
        features[i, 48:] = [(masks[i] >> (a - 1)) & 1 for a in AGENTS]
        targets[i] = ValueOracle(inst).value(int(masks[i]))
    return features, targets


def pretrain(
    config: TrainConfig, stream: RngStream
) -> tuple[PretrainNet, RunningNormalizer, PretrainResult]:
    """Fit the feature extractor to coalition values; returns held-out MSE."""
    features, targets = build_pretrain_dataset(
        stream.child("data"), config.pretrain_records
    )
    n_train = int(0.8 * len(targets))
    train_x, test_x = features[:n_train], features[n_train:]
    train_y, test_y = targets[:n_train], targets[n_train:]

    normalizer = RunningNormalizer(51)
    normalizer.update(train_x)
    train_xn = torch.from_numpy(normalizer.apply(train_x))
    test_xn = torch.from_numpy(normalizer.apply(test_x))
    train_yt = torch.from_numpy(train_y)
    test_yt = torch.from_numpy(test_y)

    net = PretrainNet(hidden=config.hidden)
    init_rng = stream.child("init").generator()
    init_module_(net, init_rng)
    optim = torch.optim.Adam(net.parameters(), lr=config.pretrain_lr)
    batch_rng = stream.child("batches").generator()

    for epoch in range(config.pretrain_epochs):
        perm = batch_rng.permutation(n_train)
        for start in range(0, n_train, config.pretrain_batch):
            idx = torch.from_numpy(perm[start : start + config.pretrain_batch])
            pred = net(train_xn[idx])
            loss = torch.mean((pred - train_yt[idx]) ** 2)
            if not torch.isfinite(loss):
                raise PolicyFault(f"pretrain loss diverged at epoch {epoch}")
            optim.zero_grad()
            loss.backward()
            optim.step()

    with torch.no_grad():
        train_mse = torch.mean((net(train_xn) - train_yt) ** 2).item()
        test_mse = torch.mean((net(test_xn) - test_yt) ** 2).item()
    baseline = float(np.mean((test_y - train_y.mean()) ** 2))
    result = PretrainResult(
        train_mse=train_mse,
        test_mse=test_mse,
        baseline_mse=baseline,
        improvement=1.0 - test_mse / baseline if baseline > 0 else 0.0,
        n_train=n_train,
        n_test=len(test_y),
    )
    return net, normalizer, result


def save_pretrain(path, net: PretrainNet, result: PretrainResult, config: TrainConfig) -> None:
    meta = {
        "kind": "pretrain",
        "version": __version__,
        "hidden": config.hidden,
        "result": asdict(result),
    }
    save_checkpoint(path, meta, module_arrays("pretrain", net))


def load_pretrain_extractor_arrays(path) -> tuple[dict, dict[str, np.ndarray]]:
    meta, arrays = load_checkpoint(path)
    if meta.get("kind") != "pretrain":
        raise PolicyFault(f"expected a pretrain checkpoint, got kind {meta.get('kind')!r}")
    extractor = {
        name[len("pretrain.extractor.") :]: value
        for name, value in arrays.items()
        if name.startswith("pretrain.extractor.")
    }
    if not extractor:
        raise PolicyFault("pretrain checkpoint holds no extractor arrays")
    return meta, extractor


# ---------------------------------------------------------------------------
# Transition collection
# ---------------------------------------------------------------------------


class RolloutRecorder:
    """Accumulates batched driver decisions into per-agent transition arrays."""

    def __init__(self):
        self._propose = {a: [] for a in AGENTS}
        self._respond = {a: [] for a in AGENTS}

    def on_propose(self, agent, idxs, obs, bits, payoffs, ts, aux):
        self._propose[agent].append(
            {
                "obs": np.asarray(obs, dtype=np.float64),
                "norm_obs": np.asarray(aux["norm_obs"], dtype=np.float64),
                "bits": np.asarray(bits, dtype=np.float64),
                "payoff": np.asarray(payoffs, dtype=np.float64),
                "log_prob": np.asarray(aux["log_prob"], dtype=np.float64),
                "env": np.asarray(idxs, dtype=np.int64),
                "t": np.asarray(ts, dtype=np.int64),
            }
        )

    def on_respond(self, agent, idxs, obs, accepts, ts, aux):
        self._respond[agent].append(
            {
                "obs": np.asarray(obs, dtype=np.float64),
                "norm_obs": np.asarray(aux["norm_obs"], dtype=np.float64),
                "accept": np.asarray(accepts, dtype=np.float64),
                "log_prob": np.asarray(aux["log_prob"], dtype=np.float64),
                "env": np.asarray(idxs, dtype=np.int64),
                "t": np.asarray(ts, dtype=np.int64),
            }
        )

    @staticmethod
    def _concat(blocks: list[dict], keys: Sequence[str]) -> dict[str, np.ndarray]:
        if not blocks:
            return {k: np.empty((0,)) for k in keys}
        return {k: np.concatenate([b[k] for b in blocks], axis=0) for k in keys}

    def propose_batch(self, agent: int) -> dict[str, np.ndarray]:
        return self._concat(
            self._propose[agent],
            ("obs", "norm_obs", "bits", "payoff", "log_prob", "env", "t"),
        )

    def respond_batch(self, agent: int) -> dict[str, np.ndarray]:
        return self._concat(
            self._respond[agent],
            ("obs", "norm_obs", "accept", "log_prob", "env", "t"),
        )


def compute_returns(
    ts: np.ndarray,
    final_rounds: np.ndarray,
    truncated: np.ndarray,
    rewards: np.ndarray,
    bootstrap_values: np.ndarray,
    gamma: float,
    T: int,
) -> np.ndarray:
    """Per-transition discounted return.

    Rewards land only at agreement, so G = gamma^(t_end - t) * r; truncated
    episodes replace the reward with the critic's value of the fictitious
    round-T+1 state, discounted from the cut: G = gamma^(T + 1 - t) * V.
    """
    ts = np.asarray(ts, dtype=np.float64)
    agree = np.asarray(final_rounds, dtype=np.float64) - ts
    return np.where(
        np.asarray(truncated, dtype=bool),
        gamma ** (T + 1.0 - ts) * np.asarray(bootstrap_values, dtype=np.float64),
        gamma**agree * np.asarray(rewards, dtype=np.float64),
    )


def normalize_advantages(adv: np.ndarray, label: str = "") -> np.ndarray:
    """Zero-mean unit-std batch normalization; skipped when std vanishes."""
    if adv.size < 2:
        return adv
    std = adv.std()
    if std < 1e-12:
        log.warning("advantage batch %s has zero deviation; normalization skipped", label)
        return adv
    return (adv - adv.mean()) / std


def counterfactual_baseline(accept_prob: torch.Tensor, q_values: torch.Tensor) -> torch.Tensor:
    """Counterfactual response baseline sum_a pi(a|s) Q(s,a)."""
    return accept_prob * q_values[:, CriticQNet.ACCEPT] + (1.0 - accept_prob) * q_values[
        :, CriticQNet.REJECT
    ]


# ---------------------------------------------------------------------------
# Trainer
# ---------------------------------------------------------------------------


METRIC_COLUMNS = [
    "epoch",
    "return_1", "return_2", "return_3",
    "accuracy",
    "abs_gap", "rel_gap",
    "rounds_mean",
    "agreement_rate",
    "share_1", "share_2", "share_3",
    "self_share",
    "entropy",
    "actor_loss", "critic_v_loss", "critic_q_loss",
]


class Trainer:
    def __init__(self, config: TrainConfig, extractor_arrays: dict[str, np.ndarray] | None = None):
        config.validate()
        torch.set_num_threads(1)
        self.config = config
        self.stream = RngStream(config.seed, "train")
        self.rollout_rng = self.stream.child("rollouts").generator()
        self._eval_stream = self.stream.child("eval-episodes")

        self.actors: dict[int, ActorNet] = {}
        self.critics_v: dict[int, CriticVNet] = {}
        self.critics_q: dict[int, CriticQNet] = {}
        self.normalizers: dict[int, RunningNormalizer] = {}
        self.opt_actor: dict[int, torch.optim.Adam] = {}
        self.opt_v: dict[int, torch.optim.Adam] = {}
        self.opt_q: dict[int, torch.optim.Adam] = {}
        for a in AGENTS:
            actor = ActorNet(hidden=config.hidden, trunk_width=config.trunk_width)
            critic_v = CriticVNet(hidden=config.hidden, trunk_width=config.trunk_width)
            critic_q = CriticQNet(hidden=config.hidden, trunk_width=config.trunk_width)
            init_module_(actor, self.stream.child(f"init/agent{a}/actor").generator())
            init_module_(critic_v, self.stream.child(f"init/agent{a}/critic_v").generator())
            init_module_(critic_q, self.stream.child(f"init/agent{a}/critic_q").generator())
            if extractor_arrays is not None:
                keyed = {f"extractor.{k}": v for k, v in extractor_arrays.items()}
                for net in (actor, critic_v, critic_q):
                    load_module_arrays_(net.extractor, "extractor", keyed)
            self.actors[a] = actor
            self.critics_v[a] = critic_v
            self.critics_q[a] = critic_q
            self.normalizers[a] = RunningNormalizer(OBS_DIM)
            self.opt_actor[a] = torch.optim.Adam(actor.parameters(), lr=config.lr)
            self.opt_v[a] = torch.optim.Adam(critic_v.parameters(), lr=config.lr)
            self.opt_q[a] = torch.optim.Adam(critic_q.parameters(), lr=config.lr)

        self.policies = [ActorPolicy(a, self.actors[a], self.normalizers[a]) for a in AGENTS]
        self.eval_instances = generate_instances(
            self.stream.child("eval-instances"), config.eval_episodes
        )
        self.eval_tables = [characteristic_table(inst) for inst in self.eval_instances]
        self.epoch = 0
        self.last_update_stats = {
            "entropy": float("nan"),
            "actor_loss": float("nan"),
            "critic_v_loss": float("nan"),
            "critic_q_loss": float("nan"),
        }

    # -- rollouts ----------------------------------------------------------

    def collect_rollouts(self) -> tuple[RolloutRecorder, list[EpisodeOutcome], list[BargainEnv]]:
        cfg = self.config
        instances = generate_instances(
            self.stream.child(f"instances/epoch{self.epoch}"), cfg.num_envs
        )
        start_rounds = [
            sample_training_start_round(self.rollout_rng, cfg.T) for _ in range(cfg.num_envs)
        ]
        recorder = RolloutRecorder()
        outcomes, envs = play_episodes(
            instances,
            self.policies,
            T=cfg.T,
            rng=self.rollout_rng,
            start_rounds=start_rounds,
            recorder=recorder,
        )
        return recorder, outcomes, envs

    # -- update ------------------------------------------------------------

    def _bootstrap_values(self, agent: int, env_ids: np.ndarray, envs, truncated_mask):
        """V(s_{T+1}) per transition for truncated episodes, else 0."""
        values = np.zeros(len(env_ids))
        trunc_ids = [int(i) for i, tr in zip(env_ids, truncated_mask) if tr]
        if not trunc_ids:
            return values
        unique = sorted(set(trunc_ids))
        obs = np.stack(
            [
                encode_observation(envs[i].fictitious_bootstrap_state(), agent, self.config.T)
                for i in unique
            ]
        )
        with torch.no_grad():
            v = self.critics_v[agent](
                torch.from_numpy(self.normalizers[agent].apply(obs))
            ).numpy()
        lookup = dict(zip(unique, v))
        for k, (i, tr) in enumerate(zip(env_ids, truncated_mask)):
            if tr:
                values[k] = lookup[int(i)]
        return values

    def _returns_for(self, agent, batch, outcomes, envs) -> np.ndarray:
        env_ids = batch["env"].astype(int)
        final_rounds = np.array([outcomes[i].final_round for i in env_ids], dtype=np.float64)
        truncated = np.array([outcomes[i].truncated for i in env_ids], dtype=bool)
        rewards = np.array([outcomes[i].rewards[agent - 1] for i in env_ids], dtype=np.float64)
        boots = self._bootstrap_values(agent, env_ids, envs, truncated)
        return compute_returns(
            batch["t"], final_rounds, truncated, rewards, boots,
            self.config.discount, self.config.T,
        )

    def _fit_critic(self, optim, net, obs, target, pick=None) -> float:
        last = float("nan")
        for _ in range(self.config.critic_steps):
            out = net(obs)
            pred = out.gather(1, pick).squeeze(1) if pick is not None else out
            loss = torch.mean((pred - target) ** 2)
            self._guard_finite(loss, "critic loss")
            optim.zero_grad()
            loss.backward()
            norm = torch.nn.utils.clip_grad_norm_(net.parameters(), self.config.grad_clip)
            self._guard_finite(norm, "critic gradient norm")
            optim.step()
            last = loss.item()
        return last

    def _guard_finite(self, value: torch.Tensor, what: str) -> None:
        if not torch.isfinite(value).all():
            path = getattr(self, "_diverge_path", None)
            if path is not None:
                self.save_full_checkpoint(path)
                raise TrainingDiverged(
                    f"non-finite {what} at epoch {self.epoch}; "
                    f"last good parameters saved to {path}"
                )
            raise TrainingDiverged(f"non-finite {what} at epoch {self.epoch}")

    def update(self, recorder: RolloutRecorder, outcomes, envs) -> dict[str, float]:
        stats = {"entropy": [], "actor_loss": [], "critic_v_loss": [], "critic_q_loss": []}
        for a in AGENTS:
            prop = recorder.propose_batch(a)
            resp = recorder.respond_batch(a)
            n_prop, n_resp = len(prop["log_prob"]), len(resp["log_prob"])
            if n_prop == 0 and n_resp == 0:
                continue

            g_prop = self._returns_for(a, prop, outcomes, envs) if n_prop else np.empty(0)
            g_resp = self._returns_for(a, resp, outcomes, envs) if n_resp else np.empty(0)

            v_loss = q_loss = float("nan")
            if n_prop:
                obs_p = torch.from_numpy(prop["norm_obs"])
                v_loss = self._fit_critic(
                    self.opt_v[a], self.critics_v[a], obs_p, torch.from_numpy(g_prop)
                )
            if n_resp:
                obs_r = torch.from_numpy(resp["norm_obs"])
                pick = torch.from_numpy(resp["accept"].astype(np.int64)).unsqueeze(1)
                q_loss = self._fit_critic(
                    self.opt_q[a], self.critics_q[a], obs_r, torch.from_numpy(g_resp), pick
                )

            adv_p = adv_r = None
            if n_prop:
                with torch.no_grad():
                    v_hat = self.critics_v[a](obs_p).numpy()
                adv_p = normalize_advantages(g_prop - v_hat, f"agent{a}/propose")
            if n_resp:
                with torch.no_grad():
                    q_hat = self.critics_q[a](obs_r)
                    accept_prob = torch.sigmoid(self.actors[a].response_logit(obs_r))
                    baseline = counterfactual_baseline(accept_prob, q_hat).numpy()
                adv_r = normalize_advantages(g_resp - baseline, f"agent{a}/respond")

            actor_loss, entropy = self._actor_step(a, prop, resp, adv_p, adv_r)
            stats["actor_loss"].append(actor_loss)
            stats["entropy"].append(entropy)
            if n_prop:
                stats["critic_v_loss"].append(v_loss)
            if n_resp:
                stats["critic_q_loss"].append(q_loss)

            raw_obs = [b["obs"] for b in (prop, resp) if len(b["log_prob"])]
            self.normalizers[a].update(np.concatenate(raw_obs, axis=0))

        result = {
            k: float(np.mean(v)) if v else float("nan") for k, v in stats.items()
        }
        self.last_update_stats = result
        return result

    def _actor_step(self, a, prop, resp, adv_p, adv_r) -> tuple[float, float]:
        cfg = self.config
        net = self.actors[a]
        n_prop = len(prop["log_prob"])
        n_resp = len(resp["log_prob"])
        last_loss = last_entropy = float("nan")
        for _ in range(cfg.ppo_passes):
            pieces_surr, pieces_ent = [], []
            if n_prop:
                lp, ent = propose_log_prob_entropy(
                    net,
                    torch.from_numpy(prop["norm_obs"]),
                    torch.from_numpy(prop["bits"]),
                    torch.from_numpy(prop["payoff"]),
                    a - 1,
                )
                pieces_surr.append(self._surrogate(lp, prop["log_prob"], adv_p))
                pieces_ent.append(ent)
            if n_resp:
                lp, ent = respond_log_prob_entropy(
                    net,
                    torch.from_numpy(resp["norm_obs"]),
                    torch.from_numpy(resp["accept"]),
                )
                pieces_surr.append(self._surrogate(lp, resp["log_prob"], adv_r))
                pieces_ent.append(ent)
            surrogate = torch.cat(pieces_surr).mean()
            entropy = torch.cat(pieces_ent).mean()
            loss = -(surrogate + cfg.entropy_coef * entropy)
            self._guard_finite(loss, "actor loss")
            self.opt_actor[a].zero_grad()
            loss.backward()
            norm = torch.nn.utils.clip_grad_norm_(net.parameters(), cfg.grad_clip)
            self._guard_finite(norm, "actor gradient norm")
            self.opt_actor[a].step()
            last_loss = loss.item()
            last_entropy = entropy.item()
        return last_loss, last_entropy

    def _surrogate(self, lp, behavior_lp, adv) -> torch.Tensor:
        adv_t = torch.from_numpy(np.asarray(adv, dtype=np.float64))
        if self.config.algo == "reinforce":
            return lp * adv_t
        ratio = torch.exp(lp - torch.from_numpy(behavior_lp))
        eps = self.config.clip_eps
        return torch.minimum(
            ratio * adv_t, torch.clamp(ratio, 1.0 - eps, 1.0 + eps) * adv_t
        )

    # -- evaluation and persistence -----------------------------------------

    def evaluate(self):
        report, outcomes = evaluate_policies(
            self.eval_instances,
            self.policies,
            T=self.config.T,
            rng=self._eval_stream.generator(),
            tables=self.eval_tables,
            deterministic=True,
            label=f"epoch-{self.epoch}",
        )
        return report, outcomes

    def metrics_row(self, report, outcomes) -> dict[str, float]:
        rewards = np.stack([o.rewards for o in outcomes])
        agreed = [o for o in outcomes if o.agreed_mask is not None]
        shares = (
            np.stack([o.agreed_payoff for o in agreed]).mean(axis=0)
            if agreed
            else np.full(3, np.nan)
        )
        row = {
            "epoch": self.epoch,
            "return_1": rewards[:, 0].mean(),
            "return_2": rewards[:, 1].mean(),
            "return_3": rewards[:, 2].mean(),
            "accuracy": report.accuracy.pooled,
            "abs_gap": report.gaps.phi_per_capita,
            "rel_gap": report.gaps.eta_per_capita,
            "rounds_mean": report.rounds.mean_rounds,
            "agreement_rate": report.rounds.agreement_rate,
            "share_1": shares[0],
            "share_2": shares[1],
            "share_3": shares[2],
            "self_share": report.proposer_self_share,
            "entropy": self.last_update_stats["entropy"],
            "actor_loss": self.last_update_stats["actor_loss"],
            "critic_v_loss": self.last_update_stats["critic_v_loss"],
            "critic_q_loss": self.last_update_stats["critic_q_loss"],
        }
        return row

    def save_full_checkpoint(self, path) -> None:
        arrays: dict[str, np.ndarray] = {}
        for a in AGENTS:
            arrays.update(module_arrays(f"agent{a}.actor", self.actors[a]))
            arrays.update(module_arrays(f"agent{a}.critic_v", self.critics_v[a]))
            arrays.update(module_arrays(f"agent{a}.critic_q", self.critics_q[a]))
            for name, value in self.normalizers[a].state_arrays().items():
                arrays[f"agent{a}.norm.{name}"] = value
        meta = {
            "kind": "training",
            "version": __version__,
            "epoch": self.epoch,
            "config": self.config.to_dict(),
        }
        save_checkpoint(path, meta, arrays)

    def run(self, workdir) -> Path:
        """Full loop: epoch-0 eval, train/eval cycles, checkpoints, metrics CSV."""
        workdir = Path(workdir)
        workdir.mkdir(parents=True, exist_ok=True)
        self._diverge_path = workdir / "diverged.ckpt"
        self.config.to_json(workdir / "config.json")
        metrics_path = workdir / "metrics.csv"
        with open(metrics_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(METRIC_COLUMNS)
            report, outcomes = self.evaluate()
            self._write_row(writer, self.metrics_row(report, outcomes))
            fh.flush()
            log.info("epoch 0: accuracy %.4f rounds %.3f",
                     report.accuracy.pooled, report.rounds.mean_rounds)
            for epoch in range(1, self.config.epochs + 1):
                self.epoch = epoch
                recorder, outcomes, envs = self.collect_rollouts()
                self.update(recorder, outcomes, envs)
                if epoch % self.config.eval_every == 0 or epoch == self.config.epochs:
                    report, eval_outcomes = self.evaluate()
                    self._write_row(writer, self.metrics_row(report, eval_outcomes))
                    fh.flush()
                    self.save_full_checkpoint(workdir / f"ckpt-{epoch:06d}.bin")
                    log.info(
                        "epoch %d: accuracy %.4f rounds %.3f self-share %.4f",
                        epoch, report.accuracy.pooled,
                        report.rounds.mean_rounds, report.proposer_self_share,
                    )
        self.save_full_checkpoint(workdir / "final.bin")
        return metrics_path

    @staticmethod
    def _write_row(writer, row: dict) -> None:
        writer.writerow(
            [row["epoch"]] + [repr(float(row[c])) for c in METRIC_COLUMNS[1:]]
        )


def load_trained_policies(path):
    """Rebuild actors and normalizers from a full training checkpoint."""
    meta, arrays = load_checkpoint(path)
    if meta.get("kind") != "training":
        raise PolicyFault(f"expected a training checkpoint, got kind {meta.get('kind')!r}")
    config = TrainConfig.from_dict(meta["config"])
    policies = []
    for a in AGENTS:
        actor = ActorNet(hidden=config.hidden, trunk_width=config.trunk_width)
        load_module_arrays_(actor, f"agent{a}.actor", arrays)
        normalizer = RunningNormalizer(OBS_DIM)
        normalizer.load_state_arrays(
            {
                "count": arrays[f"agent{a}.norm.count"],
                "mean": arrays[f"agent{a}.norm.mean"],
                "m2": arrays[f"agent{a}.norm.m2"],
            }
        )
        policies.append(ActorPolicy(a, actor, normalizer))
    return meta, config, policies
