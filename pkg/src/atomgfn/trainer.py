"""Losses (TB, MLE, RTB), trajectory sampling, hybrid batches and the
optimization loop."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .autodiff import Tensor, grad_norm, no_grad
from .mdp import ActionType, MolMDP, Trajectory
from .molgraph import MolGraph, ValenceError
from .policy import (GraphPolicy, PolicyParams, load_checkpoint, save_checkpoint)
from .reward import (ILLEGAL_LOG_REWARD, ConditioningContext, aggregate_reward, log_reward,
                     property_values, sample_conditionals)
from .smiles import write as to_smiles

log = logging.getLogger(__name__)

MODES = ("pretrain", "finetune_tb", "finetune_rtb", "tasktrain")


class NumericAbort(RuntimeError):
    """Raised when a loss or gradient turns non-finite."""


@dataclass
class TrainConfig:
    beta: float = 96.0
    lambda1: float = 0.04
    lambda2: float = 20.0
    mix_ratio: float = 0.5
    learning_rate: float = 1e-4
    z_learning_rate: float = 1e-3
    momentum: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 1e-8
    lr_decay: float = 20000.0
    z_lr_decay: float = 20000.0
    clip_grad: float = 10.0
    batch_size: int = 64
    sampling_batch_size: int = 2048
    max_num_iter: int = 1000
    seed: int = 0
    checkpoint_every: int = 1000
    random_action_prob: float = 0.001
    random_stop_prob: float = 0.001
    sample_temp: float = 1.0
    oob_percent: float = 0.1
    offline_sigma: float = 0.05
    num_back_steps_max: int = 25
    logz_sigma: float = 0.0
    illegal_action_logreward: float = ILLEGAL_LOG_REWARD
    sample_conditionals: bool = True

    def __post_init__(self):
        if not 0 <= self.mix_ratio <= 1:
            raise ValueError("mix_ratio must lie in [0, 1]")
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        for name in ("learning_rate", "z_learning_rate", "adam_eps", "lr_decay", "z_lr_decay",
                     "clip_grad", "sample_temp"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("random_action_prob", "random_stop_prob", "oob_percent"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.batch_size < 1 or self.sampling_batch_size < 1 or self.checkpoint_every < 1:
            raise ValueError("batch sizes and checkpoint_every must be positive")
        if self.max_num_iter < 0:
            raise ValueError("max_num_iter must be non-negative")


@dataclass
class LossBreakdown:
    tb: float
    mle: float
    rtb: float
    total: float
    residuals: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0))


# -- losses -------------------------------------------------------------------------


def tb_loss(policy: GraphPolicy, params: PolicyParams, mdp: MolMDP,
            trajs: Sequence[Trajectory], cond: np.ndarray, log_rewards: np.ndarray,
            beta: float, logpf: Tensor | None = None) -> tuple[Tensor, np.ndarray]:
    """Batch mean of (log Z(c) + sum log P_F - beta log R - sum log P_B)^2."""
    if logpf is None:
        logpf = policy.log_prob_of(params, mdp, trajs, cond)
    logpb = policy.log_prob_of(params, mdp, trajs, cond, backward=True)
    logz = policy.log_z(params, cond)
    target = (beta * np.asarray(log_rewards, dtype=float)).astype(policy.dtype)
    res = logz + logpf - target - logpb
    return res.square().mean(), res.data.astype(float)


def mle_loss(policy: GraphPolicy, params: PolicyParams, mdp: MolMDP,
             trajs: Sequence[Trajectory], cond: np.ndarray,
             logpf: Tensor | None = None) -> Tensor:
    """Negative forward log-likelihood of the offline trajectories, summed over
    steps and averaged over the whole batch (online ones contribute 0)."""
    if logpf is None:
        logpf = policy.log_prob_of(params, mdp, trajs, cond)
    mask = np.array([1.0 if t.offline else 0.0 for t in trajs], dtype=policy.dtype)
    return -(logpf * mask).mean()


def rtb_loss(policy: GraphPolicy, params: PolicyParams, prior: GraphPolicy,
             prior_params: PolicyParams, mdp: MolMDP, prior_mdp: MolMDP,
             trajs: Sequence[Trajectory], cond: np.ndarray, prior_cond: np.ndarray,
             log_rewards: np.ndarray, beta: float) -> tuple[Tensor, np.ndarray]:
    """Batch mean of (log Z_phi + sum log P_F(phi) - beta log R - sum log P_F(theta))^2.

    The prior is evaluated without recording a graph, so it gets no gradient.
    """
    logpf = policy.log_prob_of(params, mdp, trajs, cond)
    with no_grad():
        prior_logpf = prior.log_prob_of(prior_params, prior_mdp, trajs, prior_cond).data
    logz = policy.log_z(params, cond)
    target = (beta * np.asarray(log_rewards, dtype=float) + prior_logpf).astype(policy.dtype)
    res = logz + logpf - target
    return res.square().mean(), res.data.astype(float)


# -- sampling -----------------------------------------------------------------------


def sample_trajectories(policy: GraphPolicy, params: PolicyParams, mdp: MolMDP,
                        cond: np.ndarray, rng: np.random.Generator,
                        random_action_prob: float = 0.0, random_stop_prob: float = 0.0,
                        temperature: float = 1.0) -> list[Trajectory]:
    """Roll out ``len(cond)`` trajectories in lockstep from ``s_0``.

    Exploration: with ``random_action_prob`` a uniformly random legal action
    replaces the policy's choice; with ``random_stop_prob`` Stop is forced
    whenever it is legal.
    """
    cond = np.asarray(cond).reshape(len(cond), -1)
    n = len(cond)
    states = [[mdp.seed] for _ in range(n)]
    actions: list[list] = [[] for _ in range(n)]
    active = list(range(n))
    while active:
        graphs = [states[i][-1] for i in active]
        dists = policy.action_distributions(graphs, cond[active], mdp, params=params)
        still = []
        for i, g, logp in zip(active, graphs, dists):
            legal = mdp.forward_actions(g)
            stop_ok = legal[-1].kind is ActionType.STOP
            if random_stop_prob and stop_ok and rng.random() < random_stop_prob:
                j = len(legal) - 1
            elif random_action_prob and rng.random() < random_action_prob:
                j = int(rng.integers(len(legal)))
            else:
                z = logp.astype(np.float64) / temperature
                p = np.exp(z - z.max())
                j = int(rng.choice(len(legal), p=p / p.sum()))
            a = legal[j]
            actions[i].append(a)
            states[i].append(mdp.apply(g, a))
            if a.kind is not ActionType.STOP:
                still.append(i)
        active = still
    return [Trajectory(s, a) for s, a in zip(states, actions)]


def sample_molecules(policy: GraphPolicy, params: PolicyParams, mdp: MolMDP,
                     ctx: ConditioningContext, n: int, rng: np.random.Generator,
                     batch_size: int = 1024, temperature: float = 1.0) -> list[MolGraph]:
    enc = ctx.encode()
    out: list[MolGraph] = []
    while len(out) < n:
        m = min(batch_size, n - len(out))
        trajs = sample_trajectories(policy, params, mdp, np.tile(enc, (m, 1)), rng,
                                    temperature=temperature)
        out.extend(t.final for t in trajs)
    return out


# -- optimizer ----------------------------------------------------------------------


class Adam:
    """Adam with L2 weight decay, per-group learning rates and exponential
    (half-life) learning-rate decay; parameters named ``logz.*`` use the Z group."""

    def __init__(self, params: PolicyParams, cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.t = 0
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}

    def learning_rates(self, step: int) -> tuple[float, float]:
        c = self.cfg
        return (c.learning_rate * 2.0 ** (-step / c.lr_decay),
                c.z_learning_rate * 2.0 ** (-step / c.z_lr_decay))

    def step(self) -> None:
        c = self.cfg
        lr, zlr = self.learning_rates(self.t)
        self.t += 1
        b1, b2 = c.momentum, c.adam_beta2
        bc1, bc2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad + c.weight_decay * p.data
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            rate = zlr if k.startswith("logz.") else lr
            update = rate * (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + c.adam_eps)
            p.data = (p.data - update).astype(p.data.dtype)

    def state(self) -> PolicyParams:
        out = PolicyParams()
        for k in self.params:
            out["opt.m." + k] = Tensor(self.m[k])
            out["opt.v." + k] = Tensor(self.v[k])
        return out

    def load_state(self, tensors: Mapping[str, Tensor], t: int) -> None:
        for k in self.params:
            if "opt.m." + k in tensors:
                self.m[k] = tensors["opt.m." + k].data.astype(self.params[k].data.dtype)
                self.v[k] = tensors["opt.v." + k].data.astype(self.params[k].data.dtype)
        self.t = t


def clip_gradients(params: PolicyParams, max_norm: float) -> float:
    """Scale gradients so the global norm is at most ``max_norm``; returns the
    norm before clipping."""
    norm = grad_norm(params.values())
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params.values():
            if p.grad is not None:
                p.grad = (p.grad * scale).astype(p.grad.dtype)
    return norm


# -- training loop ------------------------------------------------------------------

RewardFn = Callable[[MolGraph, ConditioningContext], float]


def default_reward(tables=None, ring_sizes=(5, 6)) -> RewardFn:
    def fn(x: MolGraph, ctx: ConditioningContext) -> float:
        return aggregate_reward(x, ctx, tables=tables, ring_sizes=ring_sizes)
    return fn


@dataclass
class Batch:
    trajs: list[Trajectory]
    ctxs: list[ConditioningContext]
    cond: np.ndarray
    log_rewards: np.ndarray
    rewards: np.ndarray


class Trainer:
    """One training run.

    ``mode`` selects the objective: ``pretrain`` uses lambda1*TB + lambda2*MLE
    on hybrid batches, ``finetune_tb`` and ``tasktrain`` use TB, and
    ``finetune_rtb`` uses RTB against the frozen ``prior``.
    """

    def __init__(self, policy: GraphPolicy, mdp: MolMDP, cfg: TrainConfig,
                 template: ConditioningContext, mode: str = "pretrain",
                 reward_fn: RewardFn | None = None, dataset: Sequence[MolGraph] = (),
                 prior: GraphPolicy | None = None, prior_mdp: MolMDP | None = None,
                 out_dir: str | Path | None = None, property_fn=None):
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
        if mode == "finetune_rtb" and prior is None:
            raise ValueError("finetune_rtb needs a prior policy")
        self.policy, self.mdp, self.cfg, self.mode = policy, mdp, cfg, mode
        self.params = policy.params
        self.template = template
        self.reward_fn = reward_fn or default_reward()
        self.property_fn = property_fn or (lambda x, ctx: property_values(x, ctx))
        self.prior = prior
        self.prior_mdp = prior_mdp or mdp
        self.rng = np.random.default_rng(cfg.seed)
        self.dataset = self._usable(dataset)
        if cfg.mix_ratio < 1 and not self.dataset:
            raise ValueError("mix_ratio < 1 needs a non-empty dataset")
        self.opt = Adam(self.params, cfg)
        self.step = 0
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self._enc_cache: dict[ConditioningContext, np.ndarray] = {}
        self._interval: list[LossBreakdown] = []
        self._interval_rewards: list[float] = []
        self._interval_valid: list[float] = []
        self._t0 = time.perf_counter()

    def _usable(self, dataset: Sequence[MolGraph]) -> list[MolGraph]:
        ok, skipped = [], 0
        for x in dataset:
            try:
                if self.mdp.cost(x) > self.mdp.config.max_traj_len:
                    raise ValueError("too long")
                if self.mdp.steps_taken(x) > self.cfg.num_back_steps_max:
                    raise ValueError("too many backward steps")
                if {a.element for a in x.atoms} - set(self.mdp.config.elements):
                    raise ValueError("element outside vocabulary")
                if any(b.order not in self.mdp.config.bond_orders for b in x.bonds):
                    raise ValueError("bond order outside vocabulary")
                if not self.mdp.config.chirality and any(a.chirality for a in x.atoms):
                    raise ValueError("chirality disabled")
                if self.mdp.seed.atoms and x.atoms[:len(self.mdp.seed.atoms)] != self.mdp.seed.atoms:
                    raise ValueError("seed mismatch")
                x.validate(self.mdp.config.max_nodes, self.mdp.config.max_edges)
            except (ValueError, ValenceError):
                skipped += 1
                continue
            ok.append(x)
        if skipped:
            log.info("skipped %d of %d dataset molecules that do not fit the MDP",
                     skipped, len(dataset))
        return ok

    def encode(self, ctx: ConditioningContext) -> np.ndarray:
        enc = self._enc_cache.get(ctx)
        if enc is None:
            if len(self._enc_cache) > 100_000:
                self._enc_cache.clear()
            enc = self._enc_cache[ctx] = ctx.encode()
        return enc

    # -- batches ---------------------------------------------------------------

    def _online_contexts(self, n: int) -> list[ConditioningContext]:
        if not self.cfg.sample_conditionals:
            return [self.template] * n
        return [sample_conditionals(self.template, self.rng, "online",
                                    epsilon=self.cfg.oob_percent) for _ in range(n)]

    def _offline_context(self, x: MolGraph) -> ConditioningContext:
        if not self.cfg.sample_conditionals:
            return self.template
        p_x = self.property_fn(x, self.template)
        sigma = {c.prop: self.cfg.offline_sigma * self.template.bounds[c.prop].width
                 for c in self.template.conditionals}
        return sample_conditionals(self.template, self.rng, "offline", p_x=p_x, sigma=sigma,
                                   epsilon=self.cfg.oob_percent)

    def assemble_batch(self) -> Batch:
        cfg = self.cfg
        n_online = int(round(cfg.mix_ratio * cfg.batch_size))
        n_offline = cfg.batch_size - n_online
        ctxs = self._online_contexts(n_online)
        trajs: list[Trajectory] = []
        if n_online:
            cond = np.stack([self.encode(c) for c in ctxs]) if ctxs[0].conditionals \
                else np.zeros((n_online, 0))
            trajs = sample_trajectories(self.policy, self.params, self.mdp, cond, self.rng,
                                        cfg.random_action_prob, cfg.random_stop_prob,
                                        cfg.sample_temp)
        for _ in range(n_offline):
            x = self.dataset[int(self.rng.integers(len(self.dataset)))]
            tr = self.mdp.deconstruct(x, self.rng, max_back_steps=cfg.num_back_steps_max)
            trajs.append(tr)
            ctxs.append(self._offline_context(x))
        rewards = np.empty(len(trajs))
        for i, (tr, ctx) in enumerate(zip(trajs, ctxs)):
            tr.cond = ctx
            try:
                rewards[i] = self.reward_fn(tr.final, ctx)
            except (ValueError, ValenceError):
                rewards[i] = 0.0
        logr = np.array([log_reward(r, cfg.illegal_action_logreward) for r in rewards])
        for tr, lr_ in zip(trajs, logr):
            tr.log_reward = float(lr_)
        cond = np.stack([self.encode(c) for c in ctxs]) if self.template.conditionals \
            else np.zeros((len(trajs), 0))
        return Batch(trajs, ctxs, cond, logr, rewards)

    # -- one update ------------------------------------------------------------

    def compute_loss(self, batch: Batch) -> tuple[Tensor, LossBreakdown]:
        cfg = self.cfg
        pol, params = self.policy, self.params
        if self.mode == "finetune_rtb":
            loss, res = rtb_loss(pol, params, self.prior, self.prior.params, self.mdp,
                                 self.prior_mdp, batch.trajs, batch.cond, batch.cond,
                                 batch.log_rewards, cfg.beta)
            v = float(loss.data)
            return loss, LossBreakdown(0.0, 0.0, v, v, res)
        logpf = pol.log_prob_of(params, self.mdp, batch.trajs, batch.cond)
        tb, res = tb_loss(pol, params, self.mdp, batch.trajs, batch.cond, batch.log_rewards,
                          cfg.beta, logpf=logpf)
        if self.mode == "pretrain":
            mle = mle_loss(pol, params, self.mdp, batch.trajs, batch.cond, logpf=logpf)
            total = tb * cfg.lambda1 + mle * cfg.lambda2
            bd = LossBreakdown(float(tb.data), float(mle.data) + 0.0, 0.0, float(total.data), res)
            return total, bd
        v = float(tb.data)
        return tb, LossBreakdown(v, 0.0, 0.0, v, res)

    def train_step(self) -> LossBreakdown:
        batch = self.assemble_batch()
        self.params.zero_grad()
        loss, bd = self.compute_loss(batch)
        if not math.isfinite(bd.total):
            self._dump(batch, bd)
            raise NumericAbort(f"non-finite loss at step {self.step}: {bd}")
        loss.backward()
        norm = clip_gradients(self.params, self.cfg.clip_grad)
        if not math.isfinite(norm):
            self._dump(batch, bd)
            raise NumericAbort(f"non-finite gradient norm at step {self.step}")
        self.opt.step()
        self.step += 1
        self._interval.append(bd)
        online = [tr for tr in batch.trajs if not tr.offline]
        self._interval_rewards.extend(batch.rewards.tolist())
        self._interval_valid.extend(_is_valid(tr.final) for tr in online)
        self._log_step(bd)
        if self.step % self.cfg.checkpoint_every == 0:
            self._log_interval()
            self.save()
        return bd

    def train(self, n_steps: int | None = None) -> list[LossBreakdown]:
        n = self.cfg.max_num_iter if n_steps is None else n_steps
        return [self.train_step() for _ in range(max(0, n - self.step))]

    # -- persistence -----------------------------------------------------------

    def _log_step(self, bd: LossBreakdown) -> None:
        if self.out_dir is None:
            return
        self.out_dir.mkdir(parents=True, exist_ok=True)
        with open(self.out_dir / "loss.log", "a") as fh:
            fh.write(f"{self.step}\t{bd.tb:.9g}\t{bd.mle:.9g}\t{bd.rtb:.9g}\t{bd.total:.9g}\n")

    def _log_interval(self) -> None:
        if self.out_dir is None:
            return
        iv = self._interval
        rec = {
            "step": self.step,
            "tb": float(np.mean([b.tb for b in iv])),
            "mle": float(np.mean([b.mle for b in iv])),
            "rtb": float(np.mean([b.rtb for b in iv])),
            "mean_reward": float(np.mean(self._interval_rewards)) if self._interval_rewards else 0.0,
            "validity": float(np.mean(self._interval_valid)) if self._interval_valid else 1.0,
            "wall_time": round(time.perf_counter() - self._t0, 3),
        }
        with open(self.out_dir / "train.log", "a") as fh:
            fh.write(" ".join(f"{k}={v}" for k, v in rec.items()) + "\n")
        self._interval, self._interval_rewards, self._interval_valid = [], [], []

    def save(self, path: str | Path | None = None) -> Path | None:
        if path is None:
            if self.out_dir is None:
                return None
            self.out_dir.mkdir(parents=True, exist_ok=True)
            path = self.out_dir / "latest.ckpt"
        tensors = PolicyParams(self.params)
        tensors.update(self.opt.state())
        meta = {"step": self.step, "mode": self.mode,
                "rng": self.rng.bit_generator.state}
        save_checkpoint(path, tensors, self.policy.config_hash(), meta)
        if self.out_dir is not None and Path(path).parent == self.out_dir:
            save_checkpoint(self.out_dir / f"step_{self.step:08d}.ckpt", tensors,
                            self.policy.config_hash(), meta)
        return Path(path)

    def resume(self, path: str | Path, force: bool = False) -> None:
        tensors, _, meta = load_checkpoint(path, self.policy.config_hash(), force,
                                           dtype=self.policy.dtype)
        for k, p in self.params.items():
            if k not in tensors:
                raise ValueError(f"checkpoint lacks parameter {k}")
            p.data = tensors[k].data
        self.opt.load_state(tensors, int(meta.get("step", 0)))
        self.step = int(meta.get("step", 0))
        if "rng" in meta:
            self.rng.bit_generator.state = meta["rng"]

    def _dump(self, batch: Batch, bd: LossBreakdown) -> None:
        lines = []
        for tr, ctx, lr_ in zip(batch.trajs, batch.ctxs, batch.log_rewards):
            try:
                smi = to_smiles(tr.final)
            except Exception:  # diagnostics must not fail
                smi = "?"
            lines.append({"smiles": smi, "offline": tr.offline, "log_reward": float(lr_),
                          "conditionals": [[c.prop, c.c_low, c.c_high, c.d]
                                           for c in ctx.conditionals]})
        text = json.dumps({"step": self.step, "tb": bd.tb, "mle": bd.mle, "rtb": bd.rtb,
                           "residuals": [float(r) for r in bd.residuals], "batch": lines},
                          indent=1)
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            (self.out_dir / f"nan_dump_step{self.step}.json").write_text(text)
        log.error("numeric abort at step %d; %d trajectories dumped", self.step, len(lines))


def _is_valid(x: MolGraph) -> float:
    try:
        x.validate()
    except (ValueError, ValenceError):
        return 0.0
    return 1.0


def train_config_fields() -> list[str]:
    return [f.name for f in fields(TrainConfig)]


def exact_terminal_distribution(policy: GraphPolicy, params: PolicyParams, mdp: MolMDP,
                                cond: np.ndarray, limit: int = 200_000) -> dict[str, float]:
    """Probability of every terminal state (by state key) under P_F, computed
    by propagating probability mass level by level through the state DAG.

    Every action adds exactly one construction step, so states at the same
    depth can be evaluated in one batch. Only practical for tiny domains.
    """
    cond = np.asarray(cond).reshape(1, -1)
    level = {mdp.state_key(mdp.seed): (mdp.seed, 1.0)}
    out: dict[str, float] = {}
    seen = 0
    while level:
        keys = list(level)
        graphs = [level[k][0] for k in keys]
        dists = policy.action_distributions(graphs, np.repeat(cond, len(graphs), axis=0), mdp,
                                            params=params)
        nxt: dict[str, tuple[MolGraph, float]] = {}
        for k, g, logp in zip(keys, graphs, dists):
            mass = level[k][1]
            probs = np.exp(logp.astype(np.float64))
            for a, p in zip(mdp.forward_actions(g), probs):
                if a.kind is ActionType.STOP:
                    out[k] = out.get(k, 0.0) + mass * p
                    continue
                h = mdp.apply(g, a)
                hk = mdp.state_key(h)
                prev = nxt.get(hk)
                nxt[hk] = (h if prev is None else prev[0], (0.0 if prev is None else prev[1]) + mass * p)
        seen += len(nxt)
        if seen > limit:
            raise RuntimeError("state space too large for exact propagation")
        level = nxt
    return out
