"""Pretraining, back-translation, and the follower-aware bi-level speaker update."""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable, Sequence

import numpy as np

from foam import autodiff as ad
from foam import follower as fol
from foam import speaker as spk
from foam.autodiff import GradVector, ParamSet, Tape
from foam.data import Corpus
from foam.errors import ConfigError, DataError, NumericalError
from foam.follower import Episode, FollowerConfig
from foam.layers import bind, onehot
from foam.metrics import EvalResult, episode_metrics
from foam.rng import stream
from foam.speaker import RouteItem, SpeakerConfig
from foam.world import DropoutMask, EnvironmentGraph, Route, sample_route

log = logging.getLogger(__name__)

MODES = ("foam", "envdrop-baseline", "supervised-only")


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    # model sizes
    embed_dim: int = 32
    hidden_dim: int = 64
    init_scale: float = 0.08
    max_steps: int = 20
    max_instr_len: int = 48
    # optimisation
    eta_f: float = 0.5
    eta_s: float = 0.5
    pretrain_eta_f: float = 0.5
    pretrain_eta_s: float = 0.5
    clip: float = 5.0
    batch_labeled: int = 16
    batch_aug: int = 16
    pretrain_steps: int = 5000
    total_steps: int = 20000
    sup_ratio: int = 1
    # augmentation
    recon: bool = True
    bilevel: bool = True
    keep_prob: float = 0.7
    temperature: float = 1.0
    aug_teacher_forcing: bool = False
    aug_decode: str = "sample"
    reward_baseline: str = "none"
    baseline_decay: float = 0.9
    route_min: int = 3
    route_max: int = 8
    pool_size: int = 20000
    # bookkeeping
    eval_every: int = 500
    eval_episodes: int = 200
    ckpt_every: int = 1000
    divergence_factor: float = 10.0
    divergence_window: int = 1000

    def validate(self, mode: "str | None" = None) -> "TrainConfig":
        if self.eta_f <= 0 or self.eta_s <= 0 or self.pretrain_eta_f <= 0 or self.pretrain_eta_s <= 0:
            raise ConfigError("learning rates must be positive")
        if self.total_steps < self.pretrain_steps:
            raise ConfigError("total_steps must be >= pretrain_steps")
        if self.batch_labeled < 1 or self.batch_aug < 1 or self.sup_ratio < 0:
            raise ConfigError("batch sizes must be >= 1 and sup_ratio >= 0")
        if not 0 < self.keep_prob <= 1:
            raise ConfigError("keep_prob must lie in (0, 1]")
        if self.reward_baseline not in ("none", "ema"):
            raise ConfigError("reward_baseline must be 'none' or 'ema'")
        if not 0 <= self.baseline_decay < 1:
            raise ConfigError("baseline_decay must lie in [0, 1)")
        if self.aug_decode not in ("sample", "greedy"):
            raise ConfigError("aug_decode must be 'sample' or 'greedy'")
        if not 2 <= self.route_min <= self.route_max:
            raise ConfigError("route bounds must satisfy 2 <= route_min <= route_max")
        if mode is not None and mode not in MODES:
            raise ConfigError(f"unknown mode {mode!r}; expected one of {MODES}")
        if mode == "foam" and not (self.recon or self.bilevel):
            raise ConfigError("foam mode needs at least one of the reconstruction and bi-level losses")
        if mode == "foam" and self.aug_decode != "sample" and self.bilevel:
            raise ConfigError("the bi-level speaker gradient needs sampled instructions")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for k, v in d.items():
            if k not in known:
                raise ConfigError(f"unknown training option {k!r}")
            kwargs[k] = _coerce(known[k].type, v, k)
        return cls(**kwargs)


def _coerce(typ, v, key):
    try:
        if typ in ("bool", bool):
            if isinstance(v, str):
                if v.lower() in ("1", "true", "yes", "on"):
                    return True
                if v.lower() in ("0", "false", "no", "off"):
                    return False
                raise ValueError(v)
            return bool(v)
        if typ in ("int", int):
            if isinstance(v, float) and not v.is_integer():
                raise ValueError(v)
            return int(v)
        if typ in ("float", float):
            return float(v)
        return str(v)
    except (TypeError, ValueError):
        raise ConfigError(f"bad value for {key}: {v!r}") from None


def model_configs(cfg: TrainConfig, corpus: Corpus) -> tuple[FollowerConfig, SpeakerConfig]:
    V, F = len(corpus.vocab), corpus.feature_dim
    return (FollowerConfig(V, F, cfg.embed_dim, cfg.hidden_dim, cfg.init_scale, cfg.max_steps),
            SpeakerConfig(V, F, cfg.embed_dim, cfg.hidden_dim, cfg.init_scale, cfg.max_instr_len))


def init_models(cfg: TrainConfig, corpus: Corpus) -> tuple[ParamSet, ParamSet]:
    fcfg, scfg = model_configs(cfg, corpus)
    return (fol.init_params(fcfg, stream(cfg.seed, "init.follower")),
            spk.init_params(scfg, stream(cfg.seed, "init.speaker")))


# ---------------------------------------------------------------- batches

@dataclass
class AugmentedBatch:
    envs: list
    routes: list
    samples: list
    masks: list
    loss_u: float = float("nan")

    @property
    def key(self) -> str:
        h = hashlib.sha256()
        for r, s in zip(self.routes, self.samples):
            h.update(json.dumps([r.to_dict(), list(s.instruction)], sort_keys=True).encode())
        return h.hexdigest()

    def episodes(self) -> list[Episode]:
        return [Episode(e, r, s.instruction, m)
                for e, r, s, m in zip(self.envs, self.routes, self.samples, self.masks)]

    def items(self) -> list[RouteItem]:
        return [RouteItem(e, r, m) for e, r, m in zip(self.envs, self.routes, self.masks)]


@dataclass
class BiLevelStepReport:
    step: int
    loss_u: float
    loss_l: float
    reward: float
    advantage: float
    grad_norm_u: float
    grad_norm_l: float
    speaker_grad_norm: float
    bilevel_term: float
    recon_term: float

    def to_dict(self) -> dict:
        return asdict(self)


def labeled_episodes(corpus: Corpus, split: str, idx: Sequence[int]) -> list[Episode]:
    exs = corpus.examples[split]
    return [Episode(corpus.env(exs[i].route.env_id), exs[i].route, exs[i].instruction) for i in idx]


def sample_labeled(corpus: Corpus, rng: np.random.Generator, n: int, split: str = "train") -> list[Episode]:
    exs = corpus.examples[split]
    if not exs:
        raise DataError(f"no labeled examples in split {split!r}")
    return labeled_episodes(corpus, split, rng.integers(len(exs), size=n))


class RoutePool:
    """Routes sampled from the training environments, regenerated every epoch."""

    def __init__(self, corpus: Corpus, cfg: TrainConfig):
        self.envs = corpus.split_envs("train")
        if not self.envs:
            raise DataError("no training environments")
        self.cfg = cfg
        self._epoch = -1
        self._pool: list = []

    def _build(self, epoch: int) -> None:
        rng = stream(self.cfg.seed, "routes", epoch)
        bounds = (self.cfg.route_min, self.cfg.route_max)
        pool = []
        for _ in range(self.cfg.pool_size):
            env = self.envs[int(rng.integers(len(self.envs)))]
            pool.append((env, sample_route(env, rng, bounds)))
        self._pool, self._epoch = pool, epoch

    def batch(self, step: int, n: int) -> list[tuple[EnvironmentGraph, Route]]:
        out = []
        for j in range(step * n, step * n + n):
            epoch, pos = divmod(j, self.cfg.pool_size)
            if epoch != self._epoch:
                self._build(epoch)
            out.append(self._pool[pos])
        return out


# ---------------------------------------------------------------- steps

def supervised_step(fcfg: FollowerConfig, theta_f: ParamSet, episodes: Sequence[Episode],
                    cfg: TrainConfig, lr: "float | None" = None) -> tuple[ParamSet, float]:
    loss = fol.follower_loss(fcfg, theta_f, episodes, teacher_forcing=True)
    grads = ad.backward(loss)
    return ad.sgd_step(theta_f, grads, cfg.eta_f if lr is None else lr, cfg.clip), loss.item()


def speaker_mle_step(scfg: SpeakerConfig, theta_s: ParamSet, episodes: Sequence[Episode],
                     cfg: TrainConfig) -> tuple[ParamSet, float]:
    loss = spk.speaker_loss(scfg, theta_s, [RouteItem(e.env, e.route) for e in episodes],
                            [e.instruction for e in episodes])
    grads = ad.backward(loss)
    return ad.sgd_step(theta_s, grads, cfg.pretrain_eta_s, cfg.clip), loss.item()


def augment(scfg: SpeakerConfig, theta_s: ParamSet, routes: Sequence[tuple], cfg: TrainConfig,
            rng_sample: np.random.Generator, rng_drop: np.random.Generator) -> AugmentedBatch:
    """Synthesize one instruction per route under a per-episode dropout mask."""
    envs = [e for e, _ in routes]
    rts = [r for _, r in routes]
    masks = [DropoutMask.sample(rng_drop, e.feature_dim, cfg.keep_prob) for e in envs]
    items = [RouteItem(e, r, m) for e, r, m in zip(envs, rts, masks)]
    samples = spk.generate(scfg, theta_s, items, cfg.aug_decode, rng_sample, cfg.temperature)
    return AugmentedBatch(envs, rts, samples, masks)


def follower_aug_grad(fcfg: FollowerConfig, theta_f: ParamSet, batch: AugmentedBatch,
                      cfg: TrainConfig) -> tuple["dict", float]:
    loss = fol.follower_loss(fcfg, theta_f, batch.episodes(), teacher_forcing=cfg.aug_teacher_forcing)
    return ad.backward(loss), loss.item()


def bt_follower_step(fcfg: FollowerConfig, scfg: SpeakerConfig, theta_f: ParamSet, theta_s: ParamSet,
                     routes: Sequence[tuple], cfg: TrainConfig, rng_sample: np.random.Generator,
                     rng_drop: np.random.Generator, batch: "AugmentedBatch | None" = None
                     ) -> tuple[ParamSet, GradVector, AugmentedBatch]:
    """One follower update on speaker-augmented data.

    Returns the new follower, the flattened gradient of the augmented loss at
    the *old* follower (reused by the speaker update), and the batch.
    """
    if batch is None:
        batch = augment(scfg, theta_s, routes, cfg, rng_sample, rng_drop)
    grads, batch.loss_u = follower_aug_grad(fcfg, theta_f, batch, cfg)
    grad_u = ad.flatten_grads(grads, theta_f, tag=batch.key)
    return ad.sgd_step(theta_f, grads, cfg.eta_f, cfg.clip), grad_u, batch


def speaker_feedback_grads(scfg: SpeakerConfig, fcfg: FollowerConfig, theta_s: ParamSet,
                           theta_f: ParamSet, batch: AugmentedBatch, cfg: TrainConfig, reward: float,
                           bilevel: bool = True, recon: bool = True, relaxed: bool = False
                           ) -> tuple["dict", float, float]:
    """Reward-weighted speaker gradient from one teacher-forced pass over the sampled batch.

    Differentiates ``reward * (recon * L_u_st - bilevel * mean log P(i|r))``.
    The reconstruction term feeds the follower the sampled one-hot tokens; on
    the way back each one-hot stands in for the speaker's softmax at that step.
    ``relaxed`` feeds the softmax itself forward instead (the continuous
    relaxation).  Returns the gradients and the two unweighted term values.
    """
    if not batch.samples or any(s is None for s in batch.samples):
        raise DataError("augmented batch has no recorded speaker samples")
    instructions = [s.instruction for s in batch.samples]
    tape = Tape()
    PS = bind(theta_s, tape)
    logits, targets, weights = spk.teacher_forced(scfg, PS, batch.items(), instructions)
    terms = []
    lp_val = st_val = 0.0
    if bilevel:
        ce = ad.cross_entropy(ad.concat(logits, axis=0), targets.reshape(-1), weights.reshape(-1))
        lp = ad.mul(ce, np.float32(-weights.sum() / len(instructions)))
        lp_val = lp.item()
        terms.append(ad.mul(lp, np.float32(-reward)))
    if recon:
        PF = bind(theta_f, None)
        inv_t = np.float32(1.0 / cfg.temperature)
        steps = []
        for t, lg in enumerate(logits):
            probs = ad.softmax(ad.mul(lg, inv_t) if cfg.temperature != 1.0 else lg)
            steps.append(probs if relaxed else ad.straight_through(probs, onehot(targets[t], scfg.vocab_size)))
        tokens = fol.token_steps_from_onehots(PF, steps)
        loss = fol.follower_loss(fcfg, None, batch.episodes(), teacher_forcing=cfg.aug_teacher_forcing,
                                 token_steps=tokens, P=PF)
        st_val = loss.item()
        terms.append(ad.mul(loss, np.float32(reward)))
    if not terms:
        return {k: np.zeros_like(v) for k, v in theta_s.items()}, 0.0, 0.0
    total = terms[0] if len(terms) == 1 else ad.add(terms[0], terms[1])
    return ad.backward(total), lp_val, st_val


def bilevel_speaker_grad(scfg: SpeakerConfig, theta_s: ParamSet, batch: AugmentedBatch,
                         reward: float) -> "dict":
    """-reward * grad of the batch-mean log P(sampled instruction | route)."""
    tape = Tape()
    P = bind(theta_s, tape)
    lp = spk.mean_logprob(scfg, P, batch.items(), [s.instruction for s in batch.samples])
    g = ad.backward(lp)
    return ad.add_grads(g, scales=[-reward])


def straight_through_grad(scfg: SpeakerConfig, fcfg: FollowerConfig, theta_s: ParamSet,
                          theta_f: ParamSet, batch: AugmentedBatch, cfg: TrainConfig,
                          relaxed: bool = False) -> "dict":
    """Unweighted straight-through gradient of the augmented follower loss w.r.t. the speaker."""
    g, _, _ = speaker_feedback_grads(scfg, fcfg, theta_s, theta_f, batch, cfg, 1.0,
                                     bilevel=False, recon=True, relaxed=relaxed)
    return g


def foam_speaker_step(fcfg: FollowerConfig, scfg: SpeakerConfig, theta_s: ParamSet,
                      theta_f_new: ParamSet, grad_u: GradVector, batch: AugmentedBatch,
                      labeled: Sequence[Episode], cfg: TrainConfig, step: int = 0,
                      baseline: float = 0.0) -> tuple[ParamSet, BiLevelStepReport]:
    """Speaker update from follower feedback on labeled data.

    Both speaker terms are weighted by ``h - baseline``; the baseline is 0
    unless a running reward mean is configured.
    """
    if grad_u.tag != batch.key:
        raise DataError("grad_u was not computed on this augmented batch")
    loss_l = fol.follower_loss(fcfg, theta_f_new, labeled, teacher_forcing=True)
    g_l = ad.flatten_grads(ad.backward(loss_l), theta_f_new)
    h = ad.cosine_similarity(g_l, grad_u)
    adv = h - baseline
    if cfg.bilevel or cfg.recon:
        total, lp, st = speaker_feedback_grads(scfg, fcfg, theta_s, theta_f_new, batch, cfg, adv,
                                               cfg.bilevel, cfg.recon)
        new_s = ad.sgd_step(theta_s, total, cfg.eta_s, cfg.clip)
        s_norm = ad.global_norm(total)
    else:
        new_s, s_norm, lp, st = theta_s.copy(), 0.0, 0.0, 0.0
    report = BiLevelStepReport(step, batch.loss_u, loss_l.item(), h, adv, grad_u.norm(), g_l.norm(),
                               s_norm, -adv * lp if cfg.bilevel else 0.0, adv * st if cfg.recon else 0.0)
    for k, v in report.to_dict().items():
        if isinstance(v, float) and not math.isfinite(v):
            raise NumericalError(f"non-finite {k} at step {step}")
    return new_s, report


# ---------------------------------------------------------------- evaluation

def evaluate(fcfg: FollowerConfig, theta_f: ParamSet, corpus: Corpus, split: str,
             limit: "int | None" = None, beam: "int | None" = None,
             scfg: "SpeakerConfig | None" = None, theta_s: "ParamSet | None" = None,
             batch_size: int = 64) -> tuple[EvalResult, list]:
    """Greedy (or speaker-rescored beam) evaluation on a split's labeled examples."""
    exs = corpus.examples.get(split)
    if exs is None:
        raise DataError(f"unknown split {split!r}")
    exs = exs[:limit] if limit else exs
    result = EvalResult(split)
    preds: list = []
    if beam is None or beam <= 1 and theta_s is None:
        for lo in range(0, len(exs), batch_size):
            chunk = exs[lo:lo + batch_size]
            items = [(ex.instruction, corpus.env(ex.route.env_id), ex.route.start, ex.route.start_heading)
                     for ex in chunk]
            preds += [r.route for r in fol.rollout(fcfg, theta_f, items, "greedy")]
    else:
        if scfg is None or theta_s is None:
            raise ValueError("beam evaluation needs a speaker")
        for ex in exs:
            env = corpus.env(ex.route.env_id)
            cands = fol.beam_candidates(fcfg, theta_f, ex.instruction, env, ex.route.start,
                                        ex.route.start_heading, beam)
            scores = spk.score_batch(scfg, theta_s, [RouteItem(env, c.route) for c in cands],
                                     [ex.instruction] * len(cands))
            preds.append(cands[int(np.argmax(scores))].route)
    for ex, pred in zip(exs, preds):
        result.episodes.append(episode_metrics(corpus.env(ex.route.env_id), pred, ex.route))
    return result, preds


# ---------------------------------------------------------------- pretraining

@dataclass
class PretrainResult:
    params: ParamSet
    best_step: int
    history: list = field(default_factory=list)


class Divergence:
    def __init__(self, cfg: TrainConfig):
        self.factor = cfg.divergence_factor
        self.window = cfg.divergence_window
        self.initial: "float | None" = None
        self.run = 0

    def update(self, loss: float, step: int) -> None:
        if not math.isfinite(loss):
            raise NumericalError(f"loss became non-finite at step {step}")
        if self.initial is None:
            self.initial = loss
            return
        self.run = self.run + 1 if loss > self.factor * self.initial else 0
        if self.run >= self.window:
            raise NumericalError(f"loss diverged: {loss:.4g} > {self.factor} x initial "
                                 f"{self.initial:.4g} for {self.run} steps (step {step})")


def pretrain(cfg: TrainConfig, corpus: Corpus, which: str, init: "ParamSet | None" = None,
             log_fn: "Callable[[dict], None] | None" = None) -> PretrainResult:
    """Supervised pretraining of the follower (imitation) or speaker (MLE).

    Keeps the checkpoint with the best validation score (follower: val-seen SR,
    speaker: val-seen loss).
    """
    if which not in ("follower", "speaker"):
        raise ConfigError(f"cannot pretrain {which!r}")
    if not corpus.examples["train"]:
        raise DataError("labeled training set is empty")
    fcfg, scfg = model_configs(cfg, corpus)
    f0, s0 = init_models(cfg, corpus)
    params = (init if init is not None else (f0 if which == "follower" else s0)).copy()
    best, best_score, best_step = params.copy(), -math.inf, 0
    history = []
    div = Divergence(cfg)
    val = corpus.examples["val_seen"][:cfg.eval_episodes]

    def validate(p) -> float:
        if which == "follower":
            res, _ = evaluate(fcfg, p, corpus, "val_seen", cfg.eval_episodes)
            return res.mean("success")
        if not val:
            return 0.0
        loss = spk.speaker_loss(scfg, p, [RouteItem(corpus.env(e.route.env_id), e.route) for e in val],
                                [e.instruction for e in val], tape=None)
        return -loss.item()

    if cfg.pretrain_steps > 0:
        best_score = validate(params)
    for t in range(1, cfg.pretrain_steps + 1):
        eps = sample_labeled(corpus, stream(cfg.seed, f"pretrain.{which}", t), cfg.batch_labeled)
        if which == "follower":
            params, loss = supervised_step(fcfg, params, eps, cfg, cfg.pretrain_eta_f)
        else:
            params, loss = speaker_mle_step(scfg, params, eps, cfg)
        div.update(loss, t)
        if t % cfg.eval_every == 0 or t == cfg.pretrain_steps:
            score = validate(params)
            rec = {"which": which, "step": t, "loss": loss, "val": score}
            history.append(rec)
            if log_fn:
                log_fn(rec)
            log.info("pretrain %s step %d loss %.4f val %.4f", which, t, loss, score)
            if score > best_score:
                best, best_score, best_step = params.copy(), score, t
    return PretrainResult(best if cfg.pretrain_steps > 0 else params, best_step, history)


# ---------------------------------------------------------------- main loop

@dataclass
class TrainState:
    step: int
    theta_f: ParamSet
    theta_s: ParamSet
    baseline: "float | None" = None


def train(cfg: TrainConfig, corpus: Corpus, mode: str, theta_f: ParamSet, theta_s: ParamSet,
          start_step: int = 0, on_report: "Callable[[dict], None] | None" = None,
          on_metrics: "Callable[[dict], None] | None" = None,
          on_checkpoint: "Callable[[TrainState], None] | None" = None,
          end_step: "int | None" = None, baseline: "float | None" = None) -> TrainState:
    """Run steps ``start_step+1 .. total_steps - pretrain_steps`` of the chosen mode.

    Every random draw is keyed by (seed, consumer, step), so a resumed run
    reproduces an uninterrupted one exactly.  ``end_step`` stops early (with a
    checkpoint) as if the process had been interrupted there.  ``baseline``
    restores the running reward mean of an interrupted run.
    """
    cfg.validate(mode)
    fcfg, scfg = model_configs(cfg, corpus)
    pool = RoutePool(corpus, cfg)
    n_steps = cfg.total_steps - cfg.pretrain_steps
    div = Divergence(cfg)
    state = TrainState(start_step, theta_f.copy(), theta_s.copy(), baseline)
    last = n_steps if end_step is None else min(end_step, n_steps)
    for t in range(start_step + 1, last + 1):
        rec: dict = {"step": t, "mode": mode}
        if mode != "supervised-only":
            routes = pool.batch(t - 1, cfg.batch_aug)
            new_f, grad_u, batch = bt_follower_step(
                fcfg, scfg, state.theta_f, state.theta_s, routes, cfg,
                stream(cfg.seed, "speaker-sampling", t), stream(cfg.seed, "dropout", t))
            rec["loss_u"] = batch.loss_u
            if mode == "foam":
                labeled = sample_labeled(corpus, stream(cfg.seed, "reward-batch", t), cfg.batch_labeled)
                b = state.baseline if cfg.reward_baseline == "ema" and state.baseline is not None else 0.0
                state.theta_s, report = foam_speaker_step(fcfg, scfg, state.theta_s, new_f, grad_u,
                                                          batch, labeled, cfg, t, b)
                if cfg.reward_baseline == "ema":
                    h = report.reward
                    state.baseline = h if state.baseline is None else (
                        cfg.baseline_decay * state.baseline + (1 - cfg.baseline_decay) * h)
                rec.update(report.to_dict())
            state.theta_f = new_f
        for j in range(cfg.sup_ratio):
            eps = sample_labeled(corpus, stream(cfg.seed, "labeled", t, j), cfg.batch_labeled)
            state.theta_f, loss_sup = supervised_step(fcfg, state.theta_f, eps, cfg)
            rec["loss_sup"] = loss_sup
            div.update(loss_sup, t)
        state.step = t
        if on_report:
            on_report(rec)
        if on_metrics and (t % cfg.eval_every == 0 or t == n_steps):
            m = {"step": t}
            for split in ("val_seen", "val_unseen"):
                res, _ = evaluate(fcfg, state.theta_f, corpus, split, cfg.eval_episodes)
                m[split] = res.summary()
            on_metrics(m)
        if on_checkpoint and (t % cfg.ckpt_every == 0 or t == last):
            on_checkpoint(state)
    return state


def with_overrides(cfg: TrainConfig, **kw) -> TrainConfig:
    return replace(cfg, **kw)
