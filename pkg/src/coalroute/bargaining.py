"""Random-proposer alternating-offers coalition bargaining over an instance.

Protocol per round t = 1..T: a uniformly drawn proposer names a coalition
(that must include itself) and a payoff split of the coalition's
collaboration gain; the other members respond sequentially in a uniformly
shuffled order. Any rejection ends the round and a fresh proposer is drawn
for round t+1; unanimous acceptance ends the episode and each member i
receives x_i * v(C), undiscounted (return computation applies the discount).
Reaching the end of round T without agreement truncates the episode.

Design decisions baked into the environment:
  - The proposer's own membership bit is always repaired on.
  - A proposal whose repaired coalition is the proposer alone cannot form
    (a coalition needs at least two members to gain anything): under the
    default ``singleton_rule="auto_reject"`` it is treated as an immediate
    rejection and the round advances; under ``"terminate"`` (used for
    random-bot round-statistics) the episode ends with zero payoffs.
  - Payoff vectors are repaired by zeroing non-members and renormalizing
    member shares to sum to one, so the agreed gain is exhausted.
  - v(C) is looked up lazily, only when an agreement actually forms.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Sequence

import numpy as np

from .coalition_values import ValueOracle, mask_of
from .instances import Instance

N_AGENTS = 3
OBS_DIM = 62  # 12*4 delivery rows + c,x,r (9) + t/T + one-hot proposer + acting flag
EXTRACTOR_DIM = 51  # delivery rows + coalition vector
AUX_DIM = 14  # c, x, r, t/T, one-hot proposer, acting flag


class EnvInputError(ValueError):
    """Raised on protocol misuse (wrong phase, bad start round, bad shapes)."""


class Phase(Enum):
    PROPOSING = "proposing"
    RESPONDING = "responding"
    DONE = "done"


@dataclass
class BargainState:
    """Snapshot of the public bargaining state.

    ``deliveries`` is the (12, 4) instance matrix; ``c``/``x``/``r`` hold the
    current proposal's coalition bits, payoff split, and accumulated accepts;
    ``t`` the round, ``p`` the proposer, ``phase`` whose kind of turn it is.
    """

    deliveries: np.ndarray
    c: np.ndarray
    x: np.ndarray
    r: np.ndarray
    t: int
    p: int
    phase: Phase
    responder_queue: tuple[int, ...] = ()
    responder_pos: int = 0

    @property
    def acting_agent(self) -> int | None:
        if self.phase is Phase.PROPOSING:
            return self.p
        if self.phase is Phase.RESPONDING:
            return self.responder_queue[self.responder_pos]
        return None

    @property
    def a(self) -> int:
        """1 while the proposer is choosing, 0 otherwise."""
        return 1 if self.phase is Phase.PROPOSING else 0


@dataclass(frozen=True)
class StepOutcome:
    state: BargainState
    rewards: np.ndarray
    terminated: bool
    truncated: bool


def encode_observation(state: BargainState, agent: int, T: int) -> np.ndarray:
    """Fixed-width observation of `state` from `agent`'s seat.

    Layout: flattened delivery rows (48), c (3), x (3), r (3), t/T (1),
    one-hot proposer (3), acting flag (1). The acting flag is 1 only when
    the viewing agent is the proposer about to propose; every other field
    is public and identical across agents.
    """
    obs = np.empty(OBS_DIM, dtype=np.float64)
    obs[0:48] = state.deliveries.reshape(-1)
    obs[48:51] = state.c
    obs[51:54] = state.x
    obs[54:57] = state.r
    obs[57] = state.t / T
    obs[58:61] = 0.0
    obs[57 + state.p] = 1.0
    obs[61] = 1.0 if (state.phase is Phase.PROPOSING and state.p == agent) else 0.0
    return obs


def sample_training_start_round(rng: np.random.Generator, T: int) -> int:
    """Uniform start round over {1, ..., T-1} (the skill-retention reset)."""
    return int(rng.integers(1, max(2, T)))


@dataclass
class Proposal:
    proposer: int
    mask: int
    payoff: np.ndarray
    round: int


@dataclass
class Agreement:
    mask: int
    payoff: np.ndarray
    value: float
    round: int


class BargainEnv:
    """One bargaining episode over one instance.

    ``value_fn`` maps a coalition bitmask to v(C); pass None to skip value
    lookups (round-statistics runs), in which case agreements pay zero.
    """

    def __init__(
        self,
        instance: Instance,
        value_fn: Callable[[int], float] | None,
        T: int = 10,
        singleton_rule: str = "auto_reject",
        rng: np.random.Generator | None = None,
    ):
        if T < 1:
            raise EnvInputError(f"T must be >= 1, got {T}")
        if singleton_rule not in ("auto_reject", "terminate"):
            raise EnvInputError(f"unknown singleton rule {singleton_rule!r}")
        self.instance = instance
        self.value_fn = value_fn
        self.T = T
        self.singleton_rule = singleton_rule
        self._rng = rng if rng is not None else np.random.default_rng()
        self._deliveries = instance.as_matrix()
        self.state: BargainState | None = None
        self.terminated = False
        self.truncated = False
        self.first_proposal: Proposal | None = None
        self.agreement: Agreement | None = None
        self.final_rewards = np.zeros(N_AGENTS)
        self.start_round = 1
        self._bootstrap_state: BargainState | None = None

    # -- lifecycle ---------------------------------------------------------

    def reset(self, start_round: int = 1) -> BargainState:
        if not 1 <= start_round <= max(1, self.T - 1):
            raise EnvInputError(
                f"start_round must be in 1..{max(1, self.T - 1)}, got {start_round}"
            )
        self.state = BargainState(
            deliveries=self._deliveries,
            c=np.zeros(N_AGENTS),
            x=np.zeros(N_AGENTS),
            r=np.zeros(N_AGENTS),
            t=start_round,
            p=int(self._rng.integers(1, N_AGENTS + 1)),
            phase=Phase.PROPOSING,
        )
        self.terminated = False
        self.truncated = False
        self.first_proposal = None
        self.agreement = None
        self.final_rewards = np.zeros(N_AGENTS)
        self.start_round = start_round
        self._bootstrap_state = None
        return self.state

    @property
    def done(self) -> bool:
        return self.terminated or self.truncated

    @property
    def phase(self) -> Phase:
        return self.state.phase if self.state is not None and not self.done else Phase.DONE

    @property
    def current_responder(self) -> int | None:
        if self.phase is Phase.RESPONDING:
            return self.state.acting_agent
        return None

    @property
    def rounds_used(self) -> int:
        """Rounds consumed by the episode (truncation uses all T)."""
        return self.state.t

    # -- dynamics ----------------------------------------------------------

    def step_propose(self, coalition_bits: Sequence[float], payoff: Sequence[float]) -> StepOutcome:
        if self.state is None:
            raise EnvInputError("reset() must be called before stepping")
        if self.done or self.state.phase is not Phase.PROPOSING:
            raise EnvInputError("step_propose called outside a proposing turn")
        state = self.state
        p = state.p

        mask_vec = np.asarray(coalition_bits, dtype=np.float64).reshape(N_AGENTS) != 0.0
        mask_vec[p - 1] = True  # the proposer always belongs to its own proposal
        members = tuple(a for a in (1, 2, 3) if mask_vec[a - 1])
        mask = mask_of(members)

        x = np.asarray(payoff, dtype=np.float64).reshape(N_AGENTS).copy()
        x[~mask_vec] = 0.0
        total = x.sum()
        if total <= 1e-12:
            x[mask_vec] = 1.0 / len(members)
        else:
            x /= total

        if self.first_proposal is None:
            self.first_proposal = Proposal(proposer=p, mask=mask, payoff=x.copy(), round=state.t)

        if len(members) == 1:
            if self.singleton_rule == "terminate":
                self.terminated = True
                self.agreement = Agreement(mask=mask, payoff=x.copy(), value=0.0, round=state.t)
                state.phase = Phase.DONE
                return StepOutcome(state, np.zeros(N_AGENTS), terminated=True, truncated=False)
            return self._advance_round()

        state.c = mask_vec.astype(np.float64)
        state.x = x
        state.r = np.zeros(N_AGENTS)
        responders = [a for a in members if a != p]
        order = self._rng.permutation(len(responders))
        state.responder_queue = tuple(responders[i] for i in order)
        state.responder_pos = 0
        state.phase = Phase.RESPONDING
        return StepOutcome(state, np.zeros(N_AGENTS), terminated=False, truncated=False)

    def step_respond(self, accept: bool) -> StepOutcome:
        if self.state is None:
            raise EnvInputError("reset() must be called before stepping")
        if self.done or self.state.phase is not Phase.RESPONDING:
            raise EnvInputError("step_respond called outside a responding turn")
        state = self.state
        responder = state.acting_agent

        if not accept:
            return self._advance_round()

        state.r[responder - 1] = 1.0
        state.responder_pos += 1
        if state.responder_pos < len(state.responder_queue):
            return StepOutcome(state, np.zeros(N_AGENTS), terminated=False, truncated=False)

        mask = mask_of(a for a in (1, 2, 3) if state.c[a - 1])
        value = float(self.value_fn(mask)) if self.value_fn is not None else 0.0
        rewards = state.x * value
        self.terminated = True
        self.agreement = Agreement(mask=mask, payoff=state.x.copy(), value=value, round=state.t)
        self.final_rewards = rewards.copy()
        state.phase = Phase.DONE
        return StepOutcome(state, rewards, terminated=True, truncated=False)

    def _advance_round(self) -> StepOutcome:
        state = self.state
        if state.t >= self.T:
            self.truncated = True
            state.phase = Phase.DONE
            return StepOutcome(state, np.zeros(N_AGENTS), terminated=False, truncated=True)
        state.t += 1
        state.p = int(self._rng.integers(1, N_AGENTS + 1))
        state.c = np.zeros(N_AGENTS)
        state.x = np.zeros(N_AGENTS)
        state.r = np.zeros(N_AGENTS)
        state.responder_queue = ()
        state.responder_pos = 0
        state.phase = Phase.PROPOSING
        return StepOutcome(state, np.zeros(N_AGENTS), terminated=False, truncated=False)

    def fictitious_bootstrap_state(self) -> BargainState:
        """Round-T+1 state used only to query critics after truncation.

        Never stepped; the proposer is freshly drawn once and cached so
        repeated calls see the same state.
        """
        if not self.truncated:
            raise EnvInputError("bootstrap state exists only for truncated episodes")
        if self._bootstrap_state is None:
            self._bootstrap_state = BargainState(
                deliveries=self._deliveries,
                c=np.zeros(N_AGENTS),
                x=np.zeros(N_AGENTS),
                r=np.zeros(N_AGENTS),
                t=self.T + 1,
                p=int(self._rng.integers(1, N_AGENTS + 1)),
                phase=Phase.PROPOSING,
            )
        return self._bootstrap_state


# ---------------------------------------------------------------------------
# Batched episode driver
# ---------------------------------------------------------------------------


@dataclass
class EpisodeOutcome:
    """Summary of one finished episode, used by metrics and the trainer."""

    index: int
    start_round: int
    first_proposer: int | None
    first_mask: int | None
    first_payoff: np.ndarray | None
    agreed_mask: int | None
    agreed_payoff: np.ndarray | None
    agreed_value: float | None
    agreed_round: int | None
    final_round: int
    truncated: bool
    rewards: np.ndarray = field(default_factory=lambda: np.zeros(N_AGENTS))

    @property
    def proposer_self_share(self) -> float | None:
        if self.first_proposer is None or self.first_payoff is None:
            return None
        return float(self.first_payoff[self.first_proposer - 1])


class TrajectoryLogger:
    """JSON-lines step log: one record per environment transition."""

    def __init__(self, path):
        self._fh = open(path, "w", encoding="utf-8")

    def log(self, record: dict) -> None:
        self._fh.write(json.dumps(record, sort_keys=True) + "\n")

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_trajectory(path) -> list[dict]:
    with open(path, "r", encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _log_step(logger, env_index, env, agent, action: dict, outcome: StepOutcome):
    state = outcome.state
    logger.log(
        {
            "episode": env_index,
            "t": int(state.t),
            "proposer": int(state.p),
            "actor": int(agent),
            "action": action,
            "state": {"c": state.c.tolist(), "x": state.x.tolist(), "r": state.r.tolist()},
            "rewards": outcome.rewards.tolist(),
            "terminated": bool(outcome.terminated),
            "truncated": bool(outcome.truncated),
        }
    )


def play_episodes(
    instances: Sequence[Instance],
    policies: Sequence,
    *,
    T: int = 10,
    rng: np.random.Generator,
    start_rounds: Sequence[int] | None = None,
    deterministic: bool = False,
    compute_values: bool = True,
    value_fns: Sequence[Callable[[int], float]] | None = None,
    singleton_rule: str = "auto_reject",
    recorder=None,
    logger: TrajectoryLogger | None = None,
) -> tuple[list[EpisodeOutcome], list[BargainEnv]]:
    """Run one episode per instance, batching same-seat decisions.

    ``policies`` holds one policy per agent seat; each must expose
    ``propose(envs, obs, rng, deterministic) -> (coalition_bits, payoffs, aux)``
    and ``respond(envs, obs, rng, deterministic) -> (accepts, aux)`` over a
    batch. Environments advance in fixed index order, so a single shared
    ``rng`` yields reproducible runs. ``recorder`` (optional) receives every
    batched decision for transition collection.
    """
    if len(policies) != N_AGENTS:
        raise EnvInputError(f"need one policy per agent, got {len(policies)}")
    n = len(instances)
    envs: list[BargainEnv] = []
    for i, inst in enumerate(instances):
        if value_fns is not None:
            value_fn = value_fns[i]
        elif compute_values:
            value_fn = ValueOracle(inst).value
        else:
            value_fn = None
        envs.append(BargainEnv(inst, value_fn, T=T, singleton_rule=singleton_rule, rng=rng))
    for i, env in enumerate(envs):
        env.reset(start_rounds[i] if start_rounds is not None else 1)

    active = set(range(n))
    outcomes: list[EpisodeOutcome | None] = [None] * n

    def finalize(i: int) -> None:
        env = envs[i]
        first = env.first_proposal
        agreement = env.agreement
        outcomes[i] = EpisodeOutcome(
            index=i,
            start_round=env.start_round,
            first_proposer=first.proposer if first else None,
            first_mask=first.mask if first else None,
            first_payoff=first.payoff if first else None,
            agreed_mask=agreement.mask if agreement else None,
            agreed_payoff=agreement.payoff if agreement else None,
            agreed_value=agreement.value if agreement else None,
            agreed_round=agreement.round if agreement else None,
            final_round=env.rounds_used,
            truncated=env.truncated,
            rewards=env.final_rewards.copy(),
        )
        active.discard(i)

    while active:
        for agent in (1, 2, 3):
            idxs = [
                i
                for i in sorted(active)
                if envs[i].phase is Phase.PROPOSING and envs[i].state.p == agent
            ]
            if not idxs:
                continue
            obs = np.stack([encode_observation(envs[i].state, agent, T) for i in idxs])
            ts = [envs[i].state.t for i in idxs]
            bits, payoffs, aux = policies[agent - 1].propose(
                [envs[i] for i in idxs], obs, rng, deterministic
            )
            if recorder is not None:
                recorder.on_propose(agent, idxs, obs, bits, payoffs, ts, aux)
            for k, i in enumerate(idxs):
                out = envs[i].step_propose(bits[k], payoffs[k])
                if logger is not None:
                    _log_step(
                        logger, i, envs[i], agent,
                        {"coalition": np.asarray(bits[k], dtype=float).tolist(),
                         "payoff": np.asarray(payoffs[k], dtype=float).tolist()},
                        out,
                    )
                if envs[i].done:
                    finalize(i)
        for agent in (1, 2, 3):
            idxs = [i for i in sorted(active) if envs[i].current_responder == agent]
            if not idxs:
                continue
            obs = np.stack([encode_observation(envs[i].state, agent, T) for i in idxs])
            ts = [envs[i].state.t for i in idxs]
            accepts, aux = policies[agent - 1].respond(
                [envs[i] for i in idxs], obs, rng, deterministic
            )
            if recorder is not None:
                recorder.on_respond(agent, idxs, obs, accepts, ts, aux)
            for k, i in enumerate(idxs):
                out = envs[i].step_respond(bool(accepts[k]))
                if logger is not None:
                    _log_step(logger, i, envs[i], agent, {"accept": bool(accepts[k])}, out)
                if envs[i].done:
                    finalize(i)

    return outcomes, envs
