"""Actor and critic networks, action distributions, and normalization.

Architecture: a shared-shape feature extractor (two dense tanh layers)
embeds the delivery table plus the coalition vector; an actor adds three
heads on top of it:

  - coalition head: linear on the embedding, 3 independent Bernoulli logits
    (the actor's own membership bit is forced on by the environment and is
    excluded from densities and entropies);
  - proposal head: a dense trunk over [embedding, auxiliary features]
    followed by a linear layer whose outputs pass through softplus + 1.001
    to become Dirichlet concentrations; non-member concentrations are
    forced to exactly 1.001, and the payoff split is sampled and scored on
    the member sub-simplex;
  - response head: single Bernoulli logit on the trunk output.

Critics mirror the trunk and emit a scalar state value (proposing turns)
or a two-slot action value over {reject, accept} (responding turns).

Everything runs in float64 and draws all randomness from numpy generators
(including parameter initialization), so runs are reproducible without
touching torch's global RNG.
"""

from __future__ import annotations

import json
import math
import struct
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .bargaining import AUX_DIM, EXTRACTOR_DIM, OBS_DIM

ALPHA_OFFSET = 1.001
HIDDEN_DEFAULT = 256
STD_FLOOR = 1e-8

CHECKPOINT_MAGIC = b"CRCK"
CHECKPOINT_VERSION = 1


class PolicyFault(RuntimeError):
    """Non-finite activations or malformed checkpoint data."""


# ---------------------------------------------------------------------------
# Networks
# ---------------------------------------------------------------------------


def init_linear_(layer: nn.Linear, rng: np.random.Generator) -> None:
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) init drawn from `rng`."""
    fan_in = layer.weight.shape[1]
    bound = 1.0 / math.sqrt(fan_in)
    with torch.no_grad():
        layer.weight.copy_(
            torch.from_numpy(rng.uniform(-bound, bound, size=tuple(layer.weight.shape)))
        )
        layer.bias.copy_(
            torch.from_numpy(rng.uniform(-bound, bound, size=tuple(layer.bias.shape)))
        )


def init_module_(module: nn.Module, rng: np.random.Generator) -> None:
    for layer in module.modules():
        if isinstance(layer, nn.Linear):
            init_linear_(layer, rng)


class FeatureExtractor(nn.Module):
    """Two dense tanh layers over [delivery rows, coalition vector]."""

    def __init__(self, hidden: int = HIDDEN_DEFAULT):
        super().__init__()
        self.fc1 = nn.Linear(EXTRACTOR_DIM, hidden, dtype=torch.float64)
        self.fc2 = nn.Linear(hidden, hidden, dtype=torch.float64)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.tanh(self.fc2(torch.tanh(self.fc1(x))))


class PretrainNet(nn.Module):
    """Extractor plus a scalar head, fit to coalition values before training."""

    def __init__(self, hidden: int = HIDDEN_DEFAULT):
        super().__init__()
        self.extractor = FeatureExtractor(hidden)
        self.head = nn.Linear(hidden, 1, dtype=torch.float64)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.extractor(x)).squeeze(-1)


class _TrunkNet(nn.Module):
    """Shared shape for actor heads and critics: extractor + aux trunk."""

    def __init__(self, hidden: int = HIDDEN_DEFAULT, trunk_width: int = HIDDEN_DEFAULT):
        super().__init__()
        self.extractor = FeatureExtractor(hidden)
        self.trunk = nn.Linear(hidden + AUX_DIM, trunk_width, dtype=torch.float64)

    def embed(self, obs: torch.Tensor) -> torch.Tensor:
        return self.extractor(obs[:, :EXTRACTOR_DIM])

    def trunk_out(self, obs: torch.Tensor, emb: torch.Tensor | None = None) -> torch.Tensor:
        if emb is None:
            emb = self.embed(obs)
        aux = obs[:, EXTRACTOR_DIM - 3 : OBS_DIM]
        return torch.tanh(self.trunk(torch.cat([emb, aux], dim=1)))


class ActorNet(_TrunkNet):
    def __init__(self, hidden: int = HIDDEN_DEFAULT, trunk_width: int = HIDDEN_DEFAULT):
        super().__init__(hidden, trunk_width)
        self.coalition_head = nn.Linear(hidden, 3, dtype=torch.float64)
        self.proposal_head = nn.Linear(trunk_width, 3, dtype=torch.float64)
        self.response_head = nn.Linear(trunk_width, 1, dtype=torch.float64)

    def coalition_logits(self, obs: torch.Tensor) -> torch.Tensor:
        return self.coalition_head(self.embed(obs))

    def propose_heads(self, obs: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(coalition logits, raw proposal logits) for a batch of observations."""
        emb = self.embed(obs)
        trunk = self.trunk_out(obs, emb)
        return self.coalition_head(emb), self.proposal_head(trunk)

    def response_logit(self, obs: torch.Tensor) -> torch.Tensor:
        return self.response_head(self.trunk_out(obs)).squeeze(-1)


class CriticVNet(_TrunkNet):
    """State value for proposing turns."""

    def __init__(self, hidden: int = HIDDEN_DEFAULT, trunk_width: int = HIDDEN_DEFAULT):
        super().__init__(hidden, trunk_width)
        self.head = nn.Linear(trunk_width, 1, dtype=torch.float64)

    def forward(self, obs: torch.Tensor) -> torch.Tensor:
        return self.head(self.trunk_out(obs)).squeeze(-1)


class CriticQNet(_TrunkNet):
    """Action value over {reject, accept} for responding turns."""

    REJECT, ACCEPT = 0, 1

    def __init__(self, hidden: int = HIDDEN_DEFAULT, trunk_width: int = HIDDEN_DEFAULT):
        super().__init__(hidden, trunk_width)
        self.head = nn.Linear(trunk_width, 2, dtype=torch.float64)

    def forward(self, obs: torch.Tensor) -> torch.Tensor:
        return self.head(self.trunk_out(obs))


# ---------------------------------------------------------------------------
# Distributions
# ---------------------------------------------------------------------------


def masked_alphas(raw_logits: torch.Tensor, member_mask: torch.Tensor) -> torch.Tensor:
    """Softplus concentrations with non-members pinned to exactly 1.001."""
    offset = torch.tensor(ALPHA_OFFSET, dtype=raw_logits.dtype)
    return torch.where(
        member_mask.bool(),
        nn.functional.softplus(raw_logits) + offset,
        offset.expand_as(raw_logits),
    )


def coalition_log_prob_entropy(
    logits: torch.Tensor, bits: torch.Tensor, own_index: int
) -> tuple[torch.Tensor, torch.Tensor]:
    """Joint Bernoulli log-mass and entropy over the two free membership bits.

    The actor's own bit is repaired on by the environment, so it carries no
    probability mass and is excluded here.
    """
    dist = torch.distributions.Bernoulli(logits=logits)
    free = torch.ones_like(logits)
    free[:, own_index] = 0.0
    log_prob = (dist.log_prob(bits) * free).sum(dim=1)
    entropy = (dist.entropy() * free).sum(dim=1)
    return log_prob, entropy


def dirichlet_log_prob_entropy(
    alphas: torch.Tensor, payoff: torch.Tensor, member_mask: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """Exact Dirichlet log-density and entropy on the member sub-simplex.

    Non-member payoff entries are zero and contribute nothing; a
    single-member proposal is the point mass (log-density and entropy 0).
    """
    mask = member_mask.to(alphas.dtype)
    k = mask.sum(dim=1)
    alpha0 = (alphas * mask).sum(dim=1)
    lgamma_terms = (torch.lgamma(alphas) * mask).sum(dim=1)
    safe_payoff = torch.where(member_mask.bool(), payoff, torch.ones_like(payoff))
    log_x = (torch.where(member_mask.bool(), torch.log(safe_payoff), torch.zeros_like(payoff)))
    log_prob = (
        torch.lgamma(alpha0) - lgamma_terms + ((alphas - 1.0) * log_x * mask).sum(dim=1)
    )
    entropy = (
        lgamma_terms
        - torch.lgamma(alpha0)
        + (alpha0 - k) * torch.digamma(alpha0)
        - ((alphas - 1.0) * torch.digamma(alphas) * mask).sum(dim=1)
    )
    return log_prob, entropy


def response_log_prob_entropy(
    logit: torch.Tensor, accept: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    dist = torch.distributions.Bernoulli(logits=logit)
    return dist.log_prob(accept), dist.entropy()


def dirichlet_mode(alphas: np.ndarray, member_mask: np.ndarray) -> np.ndarray:
    """Mode (alpha_i - 1)/(alpha0 - K) over members, zero elsewhere.

    Well-defined because every member concentration exceeds 1.
    """
    alphas = np.asarray(alphas, dtype=np.float64)
    mask = np.asarray(member_mask, dtype=bool)
    k = mask.sum(axis=-1, keepdims=True)
    alpha0 = np.where(mask, alphas, 0.0).sum(axis=-1, keepdims=True)
    mode = np.where(mask, (alphas - 1.0) / (alpha0 - k), 0.0)
    return mode


def sample_member_dirichlet(
    rng: np.random.Generator, alphas: np.ndarray, member_mask: np.ndarray
) -> np.ndarray:
    """Sample the member sub-simplex Dirichlet via normalized gammas.

    Gammas are drawn for all slots to keep the stream layout fixed; only
    member draws enter the normalization, which is exactly a Dirichlet over
    the member concentrations.
    """
    gammas = rng.gamma(np.asarray(alphas, dtype=np.float64))
    masked = np.where(np.asarray(member_mask, dtype=bool), gammas, 0.0)
    return masked / masked.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# Joint action densities used by the trainer
# ---------------------------------------------------------------------------


def propose_log_prob_entropy(
    net: ActorNet,
    norm_obs: torch.Tensor,
    bits: torch.Tensor,
    payoff: torch.Tensor,
    own_index: int,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Joint density of (coalition bits, member payoff split) and its entropy."""
    c_logits, raw = net.propose_heads(norm_obs)
    lp_c, ent_c = coalition_log_prob_entropy(c_logits, bits, own_index)
    alphas = masked_alphas(raw, bits)
    lp_d, ent_d = dirichlet_log_prob_entropy(alphas, payoff, bits)
    return lp_c + lp_d, ent_c + ent_d


def respond_log_prob_entropy(
    net: ActorNet, norm_obs: torch.Tensor, accept: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    logit = net.response_logit(norm_obs)
    return response_log_prob_entropy(logit, accept)


# ---------------------------------------------------------------------------
# Observation normalization
# ---------------------------------------------------------------------------


class RunningNormalizer:
    """Per-feature Welford accumulator with a merge-based batch update.

    `apply` is the identity until the first update; afterwards it returns
    (x - mean)/max(std, 1e-8) with population std. Statistics only move
    when `update` is called, so evaluation runs on frozen values.
    """

    def __init__(self, dim: int):
        self.dim = dim
        self.count = 0.0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros(dim)

    def update(self, batch: np.ndarray) -> None:
        batch = np.asarray(batch, dtype=np.float64).reshape(-1, self.dim)
        n = batch.shape[0]
        if n == 0:
            return
        batch_mean = batch.mean(axis=0)
        batch_m2 = ((batch - batch_mean) ** 2).sum(axis=0)
        delta = batch_mean - self.mean
        total = self.count + n
        self.mean = self.mean + delta * (n / total)
        self.m2 = self.m2 + batch_m2 + delta**2 * (self.count * n / total)
        self.count = total

    @property
    def std(self) -> np.ndarray:
        if self.count <= 0:
            return np.ones(self.dim)
        return np.sqrt(self.m2 / self.count)

    def apply(self, batch: np.ndarray) -> np.ndarray:
        batch = np.asarray(batch, dtype=np.float64)
        if self.count <= 0:
            return batch.copy()
        return (batch - self.mean) / np.maximum(self.std, STD_FLOOR)

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {
            "count": np.array([self.count]),
            "mean": self.mean.copy(),
            "m2": self.m2.copy(),
        }

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        if arrays["mean"].shape != (self.dim,) or arrays["m2"].shape != (self.dim,):
            raise PolicyFault(
                f"normalizer shape mismatch: expected ({self.dim},), "
                f"got {arrays['mean'].shape}"
            )
        self.count = float(arrays["count"][0])
        self.mean = arrays["mean"].astype(np.float64).copy()
        self.m2 = arrays["m2"].astype(np.float64).copy()


# ---------------------------------------------------------------------------
# Rollout adapter
# ---------------------------------------------------------------------------


def _check_finite(name: str, tensor: torch.Tensor) -> None:
    if not torch.isfinite(tensor).all():
        raise PolicyFault(
            f"non-finite values in {name}: "
            f"min={tensor.min().item()!r} max={tensor.max().item()!r}"
        )


class ActorPolicy:
    """Bridges an ActorNet to the batched episode driver.

    Samples with numpy generators, evaluates densities with torch, and
    reports per-decision auxiliaries (normalized observation, behavior
    log-prob) for the trainer's transition store.
    """

    def __init__(self, agent: int, net: ActorNet, normalizer: RunningNormalizer):
        self.agent = agent
        self.net = net
        self.normalizer = normalizer

    def propose(self, envs, obs, rng, deterministic):
        own = self.agent - 1
        norm_obs = self.normalizer.apply(obs)
        t_obs = torch.from_numpy(norm_obs)
        with torch.no_grad():
            c_logits, raw = self.net.propose_heads(t_obs)
            _check_finite(f"agent {self.agent} coalition logits", c_logits)
            _check_finite(f"agent {self.agent} proposal logits", raw)
            probs = torch.sigmoid(c_logits).numpy()
            if deterministic:
                bits = (probs > 0.5).astype(np.float64)
            else:
                bits = (rng.random(probs.shape) < probs).astype(np.float64)
            bits[:, own] = 1.0
            t_bits = torch.from_numpy(bits)
            alphas = masked_alphas(raw, t_bits)
            if deterministic:
                payoff = dirichlet_mode(alphas.numpy(), bits)
            else:
                payoff = sample_member_dirichlet(rng, alphas.numpy(), bits)
            t_payoff = torch.from_numpy(payoff)
            lp_c, _ = coalition_log_prob_entropy(c_logits, t_bits, own)
            lp_d, _ = dirichlet_log_prob_entropy(alphas, t_payoff, t_bits)
        aux = {"norm_obs": norm_obs, "log_prob": (lp_c + lp_d).numpy()}
        return bits, payoff, aux

    def respond(self, envs, obs, rng, deterministic):
        norm_obs = self.normalizer.apply(obs)
        t_obs = torch.from_numpy(norm_obs)
        with torch.no_grad():
            logit = self.net.response_logit(t_obs)
            _check_finite(f"agent {self.agent} response logit", logit)
            prob = torch.sigmoid(logit).numpy()
        if deterministic:
            accepts = prob > 0.5
        else:
            accepts = rng.random(prob.shape) < prob
        with torch.no_grad():
            lp, _ = respond_log_prob_entropy(
                self.net, t_obs, torch.from_numpy(accepts.astype(np.float64))
            )
        aux = {"norm_obs": norm_obs, "log_prob": lp.numpy(), "accept_prob": prob}
        return accepts, aux


# ---------------------------------------------------------------------------
# Checkpoint container
# ---------------------------------------------------------------------------


def save_checkpoint(path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    """Versioned binary container: JSON header + little-endian float64 blobs."""
    names = sorted(arrays)
    header = {
        "meta": meta,
        "arrays": [{"name": n, "shape": list(arrays[n].shape)} for n in names],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(arrays[n], dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise PolicyFault(f"not a checkpoint file (magic {magic!r})")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise PolicyFault(f"unsupported checkpoint version {version}")
        (header_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        arrays = {}
        for entry in header["arrays"]:
            shape = tuple(entry["shape"])
            n_items = int(np.prod(shape)) if shape else 1
            buf = fh.read(n_items * 8)
            if len(buf) != n_items * 8:
                raise PolicyFault(f"truncated checkpoint array {entry['name']!r}")
            arrays[entry["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
        return header["meta"], arrays


def module_arrays(prefix: str, module: nn.Module) -> dict[str, np.ndarray]:
    return {
        f"{prefix}.{name}": param.detach().numpy().copy()
        for name, param in module.named_parameters()
    }


def load_module_arrays_(module: nn.Module, prefix: str, arrays: dict[str, np.ndarray]) -> None:
    with torch.no_grad():
        for name, param in module.named_parameters():
            key = f"{prefix}.{name}"
            if key not in arrays:
                raise PolicyFault(f"checkpoint missing array {key!r}")
            value = arrays[key]
            if tuple(value.shape) != tuple(param.shape):
                raise PolicyFault(
                    f"shape mismatch for {key!r}: checkpoint {tuple(value.shape)}, "
                    f"model {tuple(param.shape)}"
                )
            param.copy_(torch.from_numpy(value))
