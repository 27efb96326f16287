from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

CHECKPOINT_FORMAT_VERSION = 1
OBS_DIM = 12
DISCRETE_HIDDEN = 128
HEAD_HIDDEN = 24
INITIAL_LOG_STD = math.log(0.5)
NORM_EPS = 1e-8

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class ActionLayout:
    """Learnable dimension of every discrete action plus the two feasibility groups
    (group 0: free space, group 1: in contact). The same index may appear in both groups."""

    dims: tuple[int, ...]
    groups: tuple[tuple[int, ...], tuple[int, ...]]
    names: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if len(self.groups) != 2:
            raise ValueError(f"expected 2 action groups, got {len(self.groups)}")
        covered: set[int] = set()
        for g, members in enumerate(self.groups):
            if not members:
                raise ValueError(f"action group {g} is empty")
            for idx in members:
                if not 0 <= idx < len(self.dims):
                    raise ValueError(f"action group {g} references unknown action {idx}")
            covered.update(members)
        if covered != set(range(len(self.dims))):
            missing = sorted(set(range(len(self.dims))) - covered)
            raise ValueError(f"actions {missing} belong to no group")
        if any(d < 0 for d in self.dims):
            raise ValueError(f"negative action dimension in {self.dims}")

    @property
    def n_actions(self) -> int:
        return len(self.dims)

    @property
    def max_dim(self) -> int:
        return max(self.dims) if self.dims else 0

    def position(self, group: int, action: int) -> int:
        try:
            return self.groups[group].index(action)
        except ValueError:
            raise ValueError(f"action {action} is not feasible in group {group}") from None

    def to_dict(self) -> dict:
        return {"dims": list(self.dims), "groups": [list(g) for g in self.groups], "names": list(self.names)}

    @classmethod
    def from_dict(cls, data: Mapping) -> "ActionLayout":
        return cls(
            dims=tuple(int(d) for d in data["dims"]),
            groups=tuple(tuple(int(i) for i in g) for g in data["groups"]),  # type: ignore[arg-type]
            names=tuple(data.get("names", ())),
        )


@dataclass(frozen=True, eq=False)
class HybridAction:
    """Discrete action index plus its parameters in normalized [-1, 1] space (unclipped samples)."""

    mp_index: int
    params: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self) -> None:
        object.__setattr__(self, "mp_index", int(self.mp_index))
        object.__setattr__(self, "params", np.asarray(self.params, dtype=float).reshape(-1))


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


@dataclass(frozen=True, eq=False)
class ActionDistribution:
    """π^d over one feasibility group together with the Gaussian heads of that group's actions."""

    group: int
    actions: tuple[int, ...]
    logits: np.ndarray
    means: Mapping[int, np.ndarray]
    log_stds: Mapping[int, np.ndarray]

    @property
    def log_probs(self) -> np.ndarray:
        return _log_softmax(self.logits)

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs)

    def categorical_entropy(self) -> float:
        lp = self.log_probs
        return float(-(np.exp(lp) * lp).sum())

    def log_prob(self, action: HybridAction) -> float:
        if action.mp_index not in self.actions:
            raise ValueError(f"action {action.mp_index} is not feasible in group {self.group}")
        logp = float(self.log_probs[self.actions.index(action.mp_index)])
        mean = self.means.get(action.mp_index)
        if mean is None or mean.size == 0:
            return logp
        log_std = self.log_stds[action.mp_index]
        z = (action.params - mean) / np.exp(log_std)
        return logp + float(np.sum(-0.5 * z * z - log_std - 0.5 * _LOG_2PI))

    def entropy(self, mp_index: int) -> float:
        log_std = self.log_stds.get(mp_index)
        head = 0.0 if log_std is None else float(np.sum(log_std + 0.5 * (1.0 + _LOG_2PI)))
        return self.categorical_entropy() + head


@dataclass(frozen=True, eq=False)
class LossInfo:
    loss: float
    policy_loss: float
    value_loss: float
    entropy: float
    approx_kl: float
    clip_fraction: float
    max_ratio_deviation: float


def _init_linear(rng: np.random.Generator, n_in: int, n_out: int, gain: float) -> np.ndarray:
    # scaled orthogonal init, as usual for PPO MLPs
    a = rng.normal(size=(max(n_in, n_out), min(n_in, n_out)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    w = q if n_in >= n_out else q.T
    return np.ascontiguousarray(gain * w[:n_in, :n_out])


class Policy:
    """Hybrid actor-critic: a shared normalization layer, one categorical subnet per feasibility
    group, one Gaussian head per action with parameters, and a value net.

    Weights are stored in ``params`` as ``(in, out)`` matrices keyed ``<net>.w<k>`` / ``<net>.b<k>``.
    """

    def __init__(
        self,
        layout: ActionLayout,
        *,
        obs_dim: int = OBS_DIM,
        discrete_hidden: int = DISCRETE_HIDDEN,
        head_hidden: int = HEAD_HIDDEN,
        log_std_init: float = INITIAL_LOG_STD,
        seed: int = 0,
    ) -> None:
        self.layout = layout
        self.obs_dim = obs_dim
        self.discrete_hidden = discrete_hidden
        self.head_hidden = head_hidden
        self.meta: dict = {}
        self.norm_mean = np.zeros(obs_dim)
        self.norm_var = np.ones(obs_dim)
        self.norm_count = 0.0
        rng = np.random.default_rng(seed)
        self.params: dict[str, np.ndarray] = {
            "bn.gamma": np.ones(obs_dim),
            "bn.beta": np.zeros(obs_dim),
        }
        for g, members in enumerate(layout.groups):
            self._add_mlp(rng, f"disc{g}", [obs_dim, discrete_hidden, discrete_hidden, len(members)])
        for idx, dim in enumerate(layout.dims):
            if dim > 0:
                self._add_mlp(rng, f"head{idx}", [obs_dim, head_hidden, head_hidden, dim])
                self.params[f"head{idx}.log_std"] = np.full(dim, float(log_std_init))
        self._add_mlp(rng, "value", [obs_dim, head_hidden, head_hidden, 1], out_gain=1.0)

    def _add_mlp(self, rng: np.random.Generator, prefix: str, sizes: Sequence[int], out_gain: float = 0.01) -> None:
        n_layers = len(sizes) - 1
        for k in range(n_layers):
            gain = out_gain if k == n_layers - 1 else math.sqrt(2.0)
            self.params[f"{prefix}.w{k}"] = _init_linear(rng, sizes[k], sizes[k + 1], gain)
            self.params[f"{prefix}.b{k}"] = np.zeros(sizes[k + 1])

    def _n_layers(self, prefix: str) -> int:
        n = 0
        while f"{prefix}.w{n}" in self.params:
            n += 1
        return n

    # ---- forward pieces -------------------------------------------------------------

    def _standardize(self, obs: np.ndarray) -> np.ndarray:
        return (obs - self.norm_mean) / np.sqrt(self.norm_var + NORM_EPS)

    def normalize(self, obs: np.ndarray) -> np.ndarray:
        return self._standardize(obs) * self.params["bn.gamma"] + self.params["bn.beta"]

    def _mlp(self, prefix: str, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        n_layers = self._n_layers(prefix)
        acts = [x]
        h = x
        for k in range(n_layers):
            z = h @ self.params[f"{prefix}.w{k}"] + self.params[f"{prefix}.b{k}"]
            h = np.tanh(z) if k < n_layers - 1 else z
            acts.append(h)
        return h, acts

    def _mlp_backward(self, prefix: str, acts: list[np.ndarray], grad_out: np.ndarray, grads: dict[str, np.ndarray]) -> np.ndarray:
        n_layers = len(acts) - 1
        g = grad_out
        for k in reversed(range(n_layers)):
            if k < n_layers - 1:
                g = g * (1.0 - acts[k + 1] ** 2)
            grads[f"{prefix}.w{k}"] += acts[k].T @ g
            grads[f"{prefix}.b{k}"] += g.sum(axis=0)
            g = g @ self.params[f"{prefix}.w{k}"].T
        return g

    @staticmethod
    def _check_obs(obs) -> np.ndarray:
        obs = np.asarray(obs, dtype=float)
        if not np.all(np.isfinite(obs)):
            raise ValueError(f"non-finite observation: {obs!r}")
        return obs

    def forward(self, obs, contact: bool | int) -> ActionDistribution:
        """Distribution over the feasible group selected by ``contact`` for a single observation."""
        obs = self._check_obs(obs).reshape(1, self.obs_dim)
        group = int(bool(contact))
        x = self.normalize(obs)
        logits, _ = self._mlp(f"disc{group}", x)
        members = self.layout.groups[group]
        means: dict[int, np.ndarray] = {}
        log_stds: dict[int, np.ndarray] = {}
        for idx in members:
            if self.layout.dims[idx] > 0:
                mean, _ = self._mlp(f"head{idx}", x)
                means[idx] = mean[0]
                log_stds[idx] = self.params[f"head{idx}.log_std"].copy()
        return ActionDistribution(group=group, actions=members, logits=logits[0], means=means, log_stds=log_stds)

    def sample(self, dist: ActionDistribution, rng: np.random.Generator) -> tuple[HybridAction, float]:
        probs = dist.probs
        pos = int(rng.choice(len(dist.actions), p=probs / probs.sum()))
        idx = dist.actions[pos]
        mean = dist.means.get(idx)
        if mean is None:
            action = HybridAction(idx)
        else:
            action = HybridAction(idx, mean + np.exp(dist.log_stds[idx]) * rng.standard_normal(mean.shape[0]))
        return action, dist.log_prob(action)

    def act(self, obs, contact: bool | int, *, rng: Optional[np.random.Generator] = None, deterministic: bool = False) -> HybridAction:
        dist = self.forward(obs, contact)
        if deterministic:
            idx = dist.actions[int(np.argmax(dist.logits))]
            mean = dist.means.get(idx)
            return HybridAction(idx, np.zeros(0) if mean is None else mean)
        if rng is None:
            raise ValueError("stochastic act() needs an rng")
        return self.sample(dist, rng)[0]

    def log_prob_and_entropy(self, obs, contact: bool | int, action: HybridAction) -> tuple[float, float]:
        dist = self.forward(obs, contact)
        return dist.log_prob(action), dist.entropy(action.mp_index)

    def value(self, obs) -> float:
        obs = self._check_obs(obs).reshape(1, self.obs_dim)
        v, _ = self._mlp("value", self.normalize(obs))
        return float(v[0, 0])

    def values(self, obs) -> np.ndarray:
        obs = self._check_obs(obs).reshape(-1, self.obs_dim)
        v, _ = self._mlp("value", self.normalize(obs))
        return v[:, 0]

    # ---- batched log-probs and the PPO loss -----------------------------------------

    def _batch_terms(self, obs: np.ndarray, groups: np.ndarray, actions: np.ndarray, params: np.ndarray):
        x = self.normalize(obs)
        n = obs.shape[0]
        logp = np.zeros(n)
        entropy = np.zeros(n)
        caches: dict[str, tuple] = {}
        for g in (0, 1):
            rows = np.flatnonzero(groups == g)
            if rows.size == 0:
                continue
            logits, acts = self._mlp(f"disc{g}", x[rows])
            lsm = _log_softmax(logits)
            pos = np.array([self.layout.position(g, int(a)) for a in actions[rows]], dtype=int)
            probs = np.exp(lsm)
            ent = -(probs * lsm).sum(axis=1)
            logp[rows] += lsm[np.arange(rows.size), pos]
            entropy[rows] += ent
            caches[f"disc{g}"] = (rows, acts, probs, lsm, pos, ent)
        for idx, dim in enumerate(self.layout.dims):
            if dim == 0:
                continue
            rows = np.flatnonzero(actions == idx)
            if rows.size == 0:
                continue
            mean, acts = self._mlp(f"head{idx}", x[rows])
            log_std = self.params[f"head{idx}.log_std"]
            z = (params[rows, :dim] - mean) / np.exp(log_std)
            logp[rows] += np.sum(-0.5 * z * z - log_std - 0.5 * _LOG_2PI, axis=1)
            entropy[rows] += float(np.sum(log_std + 0.5 * (1.0 + _LOG_2PI)))
            caches[f"head{idx}"] = (rows, acts, z, log_std)
        v, v_acts = self._mlp("value", x)
        caches["value"] = (np.arange(n), v_acts)
        return x, logp, entropy, v[:, 0], caches

    def batch_log_prob(self, obs, groups, actions, params) -> np.ndarray:
        obs = self._check_obs(obs).reshape(-1, self.obs_dim)
        _, logp, _, _, _ = self._batch_terms(obs, np.asarray(groups), np.asarray(actions), np.asarray(params, dtype=float).reshape(obs.shape[0], -1))
        return logp

    def loss_and_grad(
        self,
        obs,
        groups,
        actions,
        params,
        old_log_probs,
        advantages,
        returns,
        *,
        clip_ratio: float,
        entropy_coef: float,
        value_coef: float,
    ) -> tuple[LossInfo, dict[str, np.ndarray]]:
        """Clipped-surrogate PPO loss on a minibatch and its exact gradient w.r.t. every parameter.

        loss = −mean(min(ρA, clip(ρ)A)) + value_coef·mean((V − R)²) − entropy_coef·mean(H)
        """
        obs = self._check_obs(obs).reshape(-1, self.obs_dim)
        groups = np.asarray(groups, dtype=int)
        actions = np.asarray(actions, dtype=int)
        n = obs.shape[0]
        params = np.asarray(params, dtype=float).reshape(n, -1)
        old = np.asarray(old_log_probs, dtype=float)
        adv = np.asarray(advantages, dtype=float)
        ret = np.asarray(returns, dtype=float)

        x, logp, entropy, v, caches = self._batch_terms(obs, groups, actions, params)
        ratio = np.exp(logp - old)
        surr1 = ratio * adv
        surr2 = np.clip(ratio, 1.0 - clip_ratio, 1.0 + clip_ratio) * adv
        unclipped = surr1 <= surr2
        policy_loss = -float(np.mean(np.minimum(surr1, surr2)))
        value_loss = float(np.mean((v - ret) ** 2))
        mean_entropy = float(np.mean(entropy))
        loss = policy_loss + value_coef * value_loss - entropy_coef * mean_entropy

        grads = {name: np.zeros_like(p) for name, p in self.params.items()}
        d_logp = np.where(unclipped, -ratio * adv, 0.0) / n
        d_ent = -entropy_coef / n
        g_x = np.zeros_like(x)
        for key, cache in caches.items():
            if key.startswith("disc"):
                rows, acts, probs, lsm, pos, ent = cache
                onehot = np.zeros_like(probs)
                onehot[np.arange(rows.size), pos] = 1.0
                # dH/dz_j = −p_j (log p_j + H)
                g_logits = d_logp[rows, None] * (onehot - probs) + d_ent * (-probs * (lsm + ent[:, None]))
                g_x[rows] += self._mlp_backward(key, acts, g_logits, grads)
            elif key.startswith("head"):
                rows, acts, z, log_std = cache
                std = np.exp(log_std)
                g_mean = d_logp[rows, None] * z / std
                grads[f"{key}.log_std"] += (d_logp[rows, None] * (z * z - 1.0)).sum(axis=0) + d_ent * rows.size
                g_x[rows] += self._mlp_backward(key, acts, g_mean, grads)
            else:
                rows, acts = cache
                g_v = (value_coef * 2.0 * (v - ret) / n)[:, None]
                g_x += self._mlp_backward("value", acts, g_v, grads)
        grads["bn.gamma"] += (g_x * self._standardize(obs)).sum(axis=0)
        grads["bn.beta"] += g_x.sum(axis=0)

        with np.errstate(invalid="ignore"):
            approx_kl = float(np.mean(old - logp))
        info = LossInfo(
            loss=loss,
            policy_loss=policy_loss,
            value_loss=value_loss,
            entropy=mean_entropy,
            approx_kl=approx_kl,
            clip_fraction=float(np.mean(np.abs(ratio - 1.0) > clip_ratio)),
            max_ratio_deviation=float(np.max(np.abs(ratio - 1.0))) if n else 0.0,
        )
        return info, grads

    # ---- normalization statistics ---------------------------------------------------

    def update_normalizer(self, obs) -> None:
        """Fold a batch into the running mean/variance (count-weighted merge)."""
        obs = self._check_obs(obs).reshape(-1, self.obs_dim)
        n = float(obs.shape[0])
        if n == 0:
            return
        batch_mean = obs.mean(axis=0)
        batch_var = obs.var(axis=0)
        total = self.norm_count + n
        delta = batch_mean - self.norm_mean
        mean = self.norm_mean + delta * n / total
        m2 = self.norm_var * self.norm_count + batch_var * n + delta**2 * self.norm_count * n / total
        self.norm_mean = mean
        self.norm_var = m2 / total
        self.norm_count = total

    # ---- checkpoints ----------------------------------------------------------------

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(p)) for p in self.params.values())

    def copy(self) -> "Policy":
        other = Policy.__new__(Policy)
        other.layout = self.layout
        other.obs_dim = self.obs_dim
        other.discrete_hidden = self.discrete_hidden
        other.head_hidden = self.head_hidden
        other.meta = dict(self.meta)
        other.norm_mean = self.norm_mean.copy()
        other.norm_var = self.norm_var.copy()
        other.norm_count = self.norm_count
        other.params = {k: v.copy() for k, v in self.params.items()}
        return other

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = {f"param.{k}": v for k, v in self.params.items()}
        arrays["norm.mean"] = self.norm_mean
        arrays["norm.var"] = self.norm_var
        arrays["norm.count"] = np.array(self.norm_count)
        return arrays

    def header(self, extra: Optional[Mapping] = None) -> dict:
        header = {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "layout": self.layout.to_dict(),
            "obs_dim": self.obs_dim,
            "discrete_hidden": self.discrete_hidden,
            "head_hidden": self.head_hidden,
        }
        header.update(self.meta)
        if extra:
            header.update(extra)
        return header

    def save(self, path: str | Path, meta: Optional[Mapping] = None) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("wb") as fh:
            np.savez(fh, __meta__=np.array(json.dumps(self.header(meta), sort_keys=True)), **self.state_arrays())
        return path

    @classmethod
    def from_arrays(cls, header: Mapping, arrays: Mapping[str, np.ndarray]) -> "Policy":
        if header.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format_version {header.get('format_version')!r}")
        policy = cls.__new__(cls)
        policy.layout = ActionLayout.from_dict(header["layout"])
        policy.obs_dim = int(header["obs_dim"])
        policy.discrete_hidden = int(header["discrete_hidden"])
        policy.head_hidden = int(header["head_hidden"])
        policy.meta = {k: v for k, v in header.items() if k not in ("format_version", "layout", "obs_dim", "discrete_hidden", "head_hidden")}
        try:
            policy.norm_mean = np.array(arrays["norm.mean"], dtype=float)
            policy.norm_var = np.array(arrays["norm.var"], dtype=float)
            policy.norm_count = float(arrays["norm.count"])
        except KeyError as exc:
            raise ValueError(f"checkpoint is missing normalization statistics: {exc}") from None
        policy.params = {k[len("param."):]: np.array(v, dtype=float) for k, v in arrays.items() if k.startswith("param.")}
        expected = cls(policy.layout, obs_dim=policy.obs_dim, discrete_hidden=policy.discrete_hidden, head_hidden=policy.head_hidden).params
        for name, ref in expected.items():
            got = policy.params.get(name)
            if got is None or got.shape != ref.shape:
                raise ValueError(f"checkpoint parameter {name!r} missing or has wrong shape")
        return policy

    @classmethod
    def load(cls, path: str | Path) -> "Policy":
        path = Path(path)
        with np.load(path, allow_pickle=False) as data:
            if "__meta__" not in data.files:
                raise ValueError(f"{path}: not a policy checkpoint (no __meta__ record)")
            header = json.loads(str(data["__meta__"]))
            arrays = {k: data[k] for k in data.files if k != "__meta__"}
        return cls.from_arrays(header, arrays)


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return float(math.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_grads(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = global_norm(grads)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


class Adam:
    """Adam over a parameter dict, updated in place."""

    def __init__(self, params: dict[str, np.ndarray], lr: float, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-5) -> None:
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: Mapping[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k, g in grads.items():
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            self.params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
