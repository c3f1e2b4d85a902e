"""PPO with GAE and the auxiliary attention objective.

The actor-critic shares one conv backbone; an optional attention stage
(foveal or patch) modulates the feature map before the policy trunk.
Training follows standard clipped PPO.  When the foveal arm trains with
a positive attention-loss weight, triplets mined from the contrastive
buffer contribute an auxiliary term that is added to the first
minibatch loss of the first epoch, so the combined objective is
backpropagated in a single backward pass and a single optimizer step;
its gradients reach only the gaze head.

Randomness is split into independent streams (env placement, weight
init, action sampling, minibatch shuffling, triplet mining) spawned
from the master seed, so arms that never touch a stream stay bitwise
identical to arms that do not have it at all.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import contrastive as Cn
from . import tensor as T
from .contrastive import ContrastiveBuffer, contrastive_terms, mine_triplets
from .envs import VecPushEnv
from .nn import Adam, Linear, Module, clip_grad_norm
from .perception import ConvBackbone, FovealAttention, PatchAttention
from .tensor import DTensor, backward, no_grad

log = logging.getLogger(__name__)

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
LOG_2PI = float(np.log(2.0 * np.pi))

VARIANTS = ("baseline", "patch", "foveal")


class TrainingDiverged(RuntimeError):
    """Raised when an update produces a non-finite loss."""


class ActorCritic(Module):
    """Conv encoder -> optional attention -> shared trunk -> Gaussian policy + value."""

    def __init__(self, rng, variant="foveal", image_hw=(64, 64), sigma_target=0.1,
                 action_dim=2, log_std_init=0.0, dtype=np.float32):
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
        self.variant = variant
        self.backbone = ConvBackbone(rng, in_hw=image_hw, dtype=dtype)
        c, (fh, fw) = self.backbone.out_channels, self.backbone.out_hw
        self.flat_dim = c * fh * fw
        if variant == "foveal":
            self.attention = FovealAttention(rng, in_channels=c, feat_hw=(fh, fw),
                                             sigma_target=sigma_target, dtype=dtype)
        elif variant == "patch":
            self.attention = PatchAttention(rng, in_channels=c, dtype=dtype)
        else:
            self.attention = None
        self.trunk = Linear(self.flat_dim, 512, rng=rng, gain=np.sqrt(2.0), dtype=dtype)
        self.policy_head = Linear(512, action_dim, rng=rng, gain=0.01, dtype=dtype)
        self.value_head = Linear(512, 1, rng=rng, gain=1.0, dtype=dtype)
        self.log_std = DTensor(np.full(action_dim, log_std_init, dtype=dtype),
                               requires_grad=True, dtype=dtype)
        self.action_dim = action_dim

    def forward(self, obs):
        """obs: uint8 (B, H, W, 3).  Returns tensors for loss construction."""
        f = self.backbone.encode(obs)
        if self.attention is not None:
            att = self.attention(f)
            flat = att["flat"]
        else:
            att = None
            flat = T.reshape(f, (f.shape[0], self.flat_dim))
        h = T.relu(self.trunk(flat))
        mean = self.policy_head(h)
        value = T.reshape(self.value_head(h), (h.shape[0],))
        log_std = T.clamp(self.log_std, LOG_STD_MIN, LOG_STD_MAX)
        return {"feature_map": f, "attention": att, "mean": mean,
                "value": value, "log_std": log_std}

    def act(self, obs, rng):
        """Sample actions for a rollout step (no graph recorded)."""
        with no_grad():
            out = self.forward(obs)
        mean = out["mean"].data
        log_std = out["log_std"].data
        std = np.exp(log_std)
        noise = rng.standard_normal(mean.shape).astype(mean.dtype)
        actions = mean + std * noise
        logp = gaussian_logprob_np(actions, mean, log_std)
        return actions, logp, out["value"].data, out


def gaussian_logprob_np(actions, mean, log_std):
    """Diagonal-Gaussian log density, numpy mirror of the tensor version."""
    z = (actions - mean) * np.exp(-log_std)
    return -0.5 * (z * z).sum(axis=-1) - log_std.sum() - 0.5 * actions.shape[-1] * LOG_2PI


def gaussian_logprob(actions, mean, log_std):
    """Differentiable log density; actions is a constant (B, d) array."""
    a = DTensor(np.asarray(actions), dtype=mean.dtype)
    z = T.mul(T.sub(a, mean), T.exp(T.neg(log_std)))
    quad = T.scale(T.tsum(T.mul(z, z), axis=1), -0.5)
    const = -0.5 * a.shape[1] * LOG_2PI
    return T.add(T.add(quad, T.neg(T.tsum(log_std))), const)


def gaussian_entropy(log_std):
    """Entropy of the diagonal Gaussian (state-independent, scalar)."""
    d = log_std.shape[0]
    return T.add(T.tsum(log_std), 0.5 * d * (1.0 + LOG_2PI))


def compute_gae(rewards, values, dones, last_values, gamma, lam):
    """Standard GAE recursion over (T, E) arrays; returns (advantages, returns)."""
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    nonterminal = 1.0 - np.asarray(dones, dtype=np.float64)
    steps = rewards.shape[0]
    adv = np.zeros_like(rewards)
    lastgae = np.zeros(rewards.shape[1], dtype=np.float64)
    for t in reversed(range(steps)):
        next_values = last_values if t == steps - 1 else values[t + 1]
        delta = rewards[t] + gamma * next_values * nonterminal[t] - values[t]
        lastgae = delta + gamma * lam * nonterminal[t] * lastgae
        adv[t] = lastgae
    return adv, adv + values


@dataclass
class RolloutBatch:
    """One iteration of experience, laid out (T, E, ...)."""

    observations: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    dones: np.ndarray
    advantages: np.ndarray = None
    returns: np.ndarray = None

    @property
    def num_samples(self):
        return self.observations.shape[0] * self.observations.shape[1]

    def flat(self, arr):
        return arr.reshape(self.num_samples, *arr.shape[2:])

    def finalize(self, last_values, gamma, lam):
        self.advantages, self.returns = compute_gae(
            self.rewards, self.values, self.dones, last_values, gamma, lam
        )


@dataclass
class PPOConfig:
    learning_rate: float = 3e-4
    gamma: float = 0.9
    gae_lambda: float = 0.9
    clip_range: float = 0.2
    epochs: int = 8
    num_minibatches: int = 32
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    log_std_init: float = 0.0
    max_grad_norm: float = 0.5
    target_kl: float = 0.2
    lambda_attn: float = 0.1
    lambda_spread: float = 0.1
    triplet_margin: float = 0.5
    sigma_target: float = 0.1
    buffer_capacity: int = 100_000
    n_anchors: int = 1024
    knn_k: int = 16
    update_freq: int = 1


def ppo_update(agent, optimizer, batch, cfg, shuffle_rng, aux_loss_fn=None,
               lambda_attn=0.0):
    """Clipped-surrogate PPO over the batch; optionally one auxiliary term.

    ``aux_loss_fn`` (if given) is evaluated exactly once, on the first
    minibatch of the first epoch; its loss joins that minibatch's
    backward so the iteration still performs one combined gradient step
    for the total objective.
    """
    n = batch.num_samples
    obs = batch.flat(batch.observations)
    actions = batch.flat(batch.actions)
    old_logp = batch.flat(batch.log_probs).astype(np.float64)
    returns = batch.flat(batch.returns).astype(np.float32)
    adv = batch.flat(batch.advantages)

    stats = {"loss_policy": [], "loss_value": [], "entropy": [], "approx_kl": [],
             "clip_frac": [], "loss_rl": [], "grad_norm": []}
    aux_stats = {}
    stop = False
    epochs_run = 0
    for epoch in range(cfg.epochs):
        epochs_run += 1
        perm = shuffle_rng.permutation(n)
        for k, mb in enumerate(np.array_split(perm, cfg.num_minibatches)):
            out = agent.forward(obs[mb])
            logp = gaussian_logprob(actions[mb], out["mean"], out["log_std"])
            logratio = T.sub(logp, old_logp[mb].astype(np.float32))
            ratio = T.exp(logratio)
            # Normalizing inside the minibatch (rather than once over the
            # whole batch) keeps the scale of the surrogate stable across
            # minibatches and lets rare high-advantage samples stand out
            # within their own slice.
            a = adv[mb]
            mb_adv = DTensor(((a - a.mean()) / (a.std() + 1e-8)).astype(np.float32))
            surr1 = T.mul(ratio, mb_adv)
            surr2 = T.mul(T.clamp(ratio, 1.0 - cfg.clip_range, 1.0 + cfg.clip_range), mb_adv)
            loss_policy = T.neg(T.tmean(T.minimum(surr1, surr2)))
            diff = T.sub(out["value"], returns[mb])
            loss_value = T.tmean(T.mul(diff, diff))
            entropy = gaussian_entropy(out["log_std"])
            loss = T.sub(
                T.add(loss_policy, T.scale(loss_value, cfg.value_coef)),
                T.scale(entropy, cfg.entropy_coef),
            )
            loss_rl = float(loss.data)
            if aux_loss_fn is not None and epoch == 0 and k == 0:
                aux, aux_stats = aux_loss_fn()
                if aux is not None:
                    loss = T.add(loss, T.scale(aux, lambda_attn))
            if not np.isfinite(loss.data):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch} minibatch {k}: "
                    f"policy={float(loss_policy.data)} value={float(loss_value.data)}"
                )
            optimizer.zero_grad()
            backward(loss)
            grad_norm = clip_grad_norm(optimizer.params, cfg.max_grad_norm)
            optimizer.step()

            with np.errstate(over="ignore"):
                ratio_np = ratio.data.astype(np.float64)
            approx_kl = float(np.mean((ratio_np - 1.0) - np.log(ratio_np)))
            stats["loss_policy"].append(float(loss_policy.data))
            stats["loss_value"].append(float(loss_value.data))
            stats["entropy"].append(float(entropy.data))
            stats["approx_kl"].append(approx_kl)
            stats["clip_frac"].append(float(np.mean(np.abs(ratio_np - 1.0) > cfg.clip_range)))
            stats["loss_rl"].append(loss_rl)
            stats["grad_norm"].append(grad_norm)
            if approx_kl > cfg.target_kl:
                stop = True
                break
        if stop:
            break
    result = {key: float(np.mean(vals)) for key, vals in stats.items()}
    result["epochs_run"] = epochs_run
    result["minibatches_run"] = len(stats["approx_kl"])
    result["kl_stopped"] = float(stop)
    result.update({f"aux_{k}": v for k, v in aux_stats.items()})
    return result


@dataclass
class TrainerConfig:
    seed: int = 0
    variant: str = "foveal"
    contrastive: bool = True  # master switch; also off when lambda_attn == 0
    clutter: bool = False
    num_envs: int = 64
    num_steps: int = 16
    episode_len: int = 50
    total_steps: int = 100_000
    ppo: PPOConfig = field(default_factory=PPOConfig)


class Trainer:
    """Owns the vectorized env, agent, buffer, and the iteration loop."""

    def __init__(self, cfg):
        self.cfg = cfg
        ss = np.random.SeedSequence(cfg.seed)
        env_ss, init_ss, act_ss, shuffle_ss, mine_ss = ss.spawn(5)
        self.venv = VecPushEnv(cfg.num_envs, seed=env_ss, clutter=cfg.clutter,
                               episode_len=cfg.episode_len)
        self.agent = ActorCritic(np.random.default_rng(init_ss), variant=cfg.variant,
                                 sigma_target=cfg.ppo.sigma_target,
                                 log_std_init=cfg.ppo.log_std_init)
        self.optimizer = Adam(self.agent.param_tensors(), lr=cfg.ppo.learning_rate)
        self.action_rng = np.random.default_rng(act_ss)
        self.shuffle_rng = np.random.default_rng(shuffle_ss)
        self.mining_rng = np.random.default_rng(mine_ss)
        self.use_contrastive = (cfg.variant == "foveal" and cfg.contrastive
                                and cfg.ppo.lambda_attn > 0)
        self.buffer = ContrastiveBuffer(cfg.ppo.buffer_capacity) if self.use_contrastive else None
        self._pending = [[] for _ in range(cfg.num_envs)] if self.use_contrastive else None
        self.obs = self.venv.reset()
        self.iteration = 0
        self.global_step = 0
        self.episodes_done = 0
        # carried forward over iterations with no completed episode
        self._last_success_rate = 0.0
        self._last_return_mean = 0.0
        self._last_return_std = 0.0

    @property
    def steps_per_iteration(self):
        return self.cfg.num_envs * self.cfg.num_steps

    def collect_rollout(self):
        """Step the vec env for T steps; track episodes and (optionally) features."""
        cfg = self.cfg
        shape_t = (cfg.num_steps, cfg.num_envs)
        batch = RolloutBatch(
            observations=np.zeros((*shape_t, *self.obs.shape[1:]), dtype=np.uint8),
            actions=np.zeros((*shape_t, self.agent.action_dim), dtype=np.float32),
            log_probs=np.zeros(shape_t, dtype=np.float32),
            rewards=np.zeros(shape_t, dtype=np.float64),
            values=np.zeros(shape_t, dtype=np.float32),
            dones=np.zeros(shape_t, dtype=np.float32),
        )
        ep_returns, ep_successes = [], []
        gaze_sums = None
        for t in range(cfg.num_steps):
            batch.observations[t] = self.obs
            actions, logp, values, out = self.agent.act(self.obs, self.action_rng)
            if self.use_contrastive:
                fmaps = out["feature_map"].data
                for i in range(cfg.num_envs):
                    self._pending[i].append(fmaps[i].copy())
            if out["attention"] is not None and out["attention"]["params"] is not None:
                p = out["attention"]["params"]
                vals = np.array([p["mu_x"].data.mean(), p["mu_y"].data.mean(),
                                 p["sigma_x"].data.mean(), p["sigma_y"].data.mean()])
                gaze_sums = vals if gaze_sums is None else gaze_sums + vals
            obs, rewards, dones, infos = self.venv.step(actions)
            # Episodes cut by the step limit are not real terminals: the
            # image carries no clock, so treating them as such would hand
            # the final step a spurious advantage spike of roughly -V.
            # Fold the value of the lost future into that step's reward
            # (partial-episode bootstrapping) and keep the done mask.
            truncated = [i for i, info in enumerate(infos)
                         if dones[i] and not info["success"]]
            if truncated:
                final_obs = np.stack([infos[i]["final_observation"] for i in truncated])
                with no_grad():
                    v_final = self.agent.forward(final_obs)["value"].data
                rewards = rewards.copy()
                rewards[truncated] += cfg.ppo.gamma * v_final.astype(np.float64)
            batch.actions[t] = actions
            batch.log_probs[t] = logp
            batch.values[t] = values
            batch.rewards[t] = rewards
            batch.dones[t] = dones
            for i, info in enumerate(infos):
                if "episode_return" in info:
                    ep_returns.append(info["episode_return"])
                    ep_successes.append(float(info["success"]))
                    if self.use_contrastive:
                        self.buffer.push_episode(self._pending[i], info["episode_return"])
                        self._pending[i] = []
            self.obs = obs
            self.global_step += cfg.num_envs
        with no_grad():
            last_values = self.agent.forward(self.obs)["value"].data
        batch.finalize(last_values, cfg.ppo.gamma, cfg.ppo.gae_lambda)
        gaze_means = (gaze_sums / cfg.num_steps) if gaze_sums is not None else None
        return batch, ep_returns, ep_successes, gaze_means

    def _aux_loss_fn(self):
        """Mine triplets now; return a closure evaluating the attention loss."""
        cfg = self.cfg.ppo
        if not self.use_contrastive or self.iteration % cfg.update_freq != 0:
            return None, {}
        if self.buffer.size <= cfg.knn_k + 1:
            return None, {"triplet_yield": 0.0, "buffer_size": self.buffer.size}
        triplets = mine_triplets(self.buffer, cfg.n_anchors, cfg.knn_k, self.mining_rng)
        mining_stats = {
            "triplet_yield": len(triplets) / cfg.n_anchors,
            "buffer_size": self.buffer.size,
        }
        if not triplets:
            log.debug("iteration %d: no triplets mined; auxiliary step skipped",
                      self.iteration)
            return None, mining_stats

        def fn():
            loss, stats = contrastive_terms(
                self.buffer, triplets, self.agent.attention,
                margin=cfg.triplet_margin, sigma_target=cfg.sigma_target,
                lambda_spread=cfg.lambda_spread,
            )
            return loss, stats

        return fn, mining_stats

    def run_iteration(self):
        """One collect + update cycle; returns the deterministic metrics row."""
        batch, ep_returns, ep_successes, gaze_means = self.collect_rollout()
        aux_fn, mining_stats = self._aux_loss_fn()
        update = ppo_update(self.agent, self.optimizer, batch, self.cfg.ppo,
                            self.shuffle_rng, aux_loss_fn=aux_fn,
                            lambda_attn=self.cfg.ppo.lambda_attn)
        self.iteration += 1
        self.episodes_done += len(ep_returns)
        if ep_successes:
            self._last_success_rate = float(np.mean(ep_successes))
            self._last_return_mean = float(np.mean(ep_returns))
            self._last_return_std = float(np.std(ep_returns))
        row = {
            "iteration": self.iteration,
            "global_step": self.global_step,
            "episodes": self.episodes_done,
            "return_mean": self._last_return_mean,
            "return_std": self._last_return_std,
            "success_rate": self._last_success_rate,
            "loss_policy": update["loss_policy"],
            "loss_value": update["loss_value"],
            "entropy": update["entropy"],
            "approx_kl": update["approx_kl"],
            "clip_frac": update["clip_frac"],
            "loss_rl": update["loss_rl"],
            "epochs_run": update["epochs_run"],
        }
        if self.agent.variant == "foveal":
            if gaze_means is not None:
                row.update({"gaze_mu_x": gaze_means[0], "gaze_mu_y": gaze_means[1],
                            "gaze_sigma_x": gaze_means[2], "gaze_sigma_y": gaze_means[3]})
        if self.use_contrastive:
            row["loss_con"] = update.get("aux_loss_con", 0.0)
            row["loss_spread"] = update.get("aux_loss_spread", 0.0)
            row["triplet_yield"] = mining_stats.get("triplet_yield", 0.0)
            row["buffer_size"] = mining_stats.get("buffer_size", 0)
        return row

    def train(self, on_row=None):
        """Run until the configured step budget; yields rows via callback."""
        rows = []
        while self.global_step < self.cfg.total_steps:
            row = self.run_iteration()
            rows.append(row)
            if on_row is not None:
                on_row(row)
        return rows
