"""Reward-weighted flow-matching losses, optimisers and the fine-tuning strategies.

Records without a real latent (``PsVs``) feed the synthetic term: the
flow target is the sampled latent itself. Records carrying a real latent
(``PrVs``, ``PrVr``) feed the real term: the flow target is the real latent,
weighted by the reward of the synthetic sample, plus a realism penalty that
pulls the predicted clean latent towards the real one.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import flowmatch as fm
from . import rewardlab as rl
from . import tensorcore as tc
from . import velocitymodel as vm
from . import worldsim as ws
from ._util import derive_seed, rng
from .dims import DIMENSIONS

log = logging.getLogger(__name__)

STRATEGIES = ("sft", "sft_filtered", "reweight_offline", "reweight_online", "backprop_online")
KL_MODES = ("pointwise", "gaussian_moment")
LARGE_MODEL_LR = 1e-6
VAR_FLOOR = 1e-6
REPORT_FORMAT = "flowforge-train-report/1"


@dataclass(frozen=True)
class LossConfig:
    lambda_ps: float = 0.5
    lambda_pr: float = 0.5
    lambda_kl: float = 0.3
    kl_mode: str = "pointwise"

    def __post_init__(self):
        for k in ("lambda_ps", "lambda_pr", "lambda_kl"):
            if not getattr(self, k) >= 0:
                raise ValueError(f"{k} must be >= 0")
        if self.kl_mode not in KL_MODES:
            raise ValueError(f"unknown kl_mode {self.kl_mode!r}")


@dataclass(frozen=True)
class TrainConfig:
    strategy: str = "reweight_offline"
    batch_size: int = 4
    epochs: int = 1
    # 1e-3 overshoots with batch 4: one epoch of Adam at that rate undoes the pretrain
    learning_rate: float = 2e-4
    optimizer: str = "adam"
    # 0 scores the one-step clean estimate; > 0 runs a short ODE solve from t
    online_sampler_steps: int = 0
    soft_weight: float = 1.0
    # global gradient-norm clip; 0 disables
    grad_clip: float = 0.0
    # independent (t, z0) draws per record and step; >1 lowers gradient noise
    draws: int = 16
    # linear learning-rate ramp over the first steps (fresh Adam moments are noisy)
    warmup_steps: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if int(self.batch_size) < 1:
            raise ValueError("batch_size must be >= 1")
        if int(self.epochs) < 0:
            raise ValueError("epochs must be >= 0")
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if int(self.draws) < 1:
            raise ValueError("draws must be >= 1")
        if int(self.online_sampler_steps) < 0:
            raise ValueError("online_sampler_steps must be >= 0")

    @classmethod
    def large_model_lr(cls, **kw):
        """Preset with the learning rate used for the billion-parameter model."""
        return cls(learning_rate=LARGE_MODEL_LR, **kw)


@dataclass
class TrainReport:
    strategy: str
    losses: list = field(default_factory=list)
    epoch_seconds: list = field(default_factory=list)
    n_used: int = 0
    n_filtered: int = 0
    checkpoint: str | None = None

    def to_text(self, include_times=True) -> str:
        d = asdict(self)
        d["format"] = REPORT_FORMAT
        d["losses"] = [repr(float(x)) for x in self.losses]
        d["epoch_seconds"] = [round(float(x), 6) for x in self.epoch_seconds] if include_times else []
        return json.dumps(d, sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_text(cls, text):
        d = json.loads(text)
        if d.pop("format", None) != REPORT_FORMAT:
            raise ValueError("not a training report")
        d["losses"] = [float(x) for x in d["losses"]]
        return cls(**d)


# losses --------------------------------------------------------------------------

@dataclass
class _Batch:
    """Flow points and prompt conditioning for one sub-batch."""

    cond: np.ndarray
    z0: np.ndarray
    z1: np.ndarray
    t: np.ndarray
    zt: np.ndarray
    vt: np.ndarray


def _draw(records, z1_of, gen) -> _Batch:
    z1 = np.stack([z1_of(r) for r in records])
    t = gen.uniform(0.0, 1.0, size=len(records))
    z0 = gen.standard_normal(z1.shape)
    p = fm.make_flow_point(z0, z1, t)
    cond = np.stack([r.prompt.cond for r in records])
    return _Batch(cond, z0, z1, t, p.zt, p.vt)


def _row_means(sq):
    """(B, D) node -> (B, 1) node of per-row means."""
    d = sq.shape[1]
    return tc.matmul(sq, tc.const(np.full((d, 1), 1.0 / d)))


def _weighted_mean(rows, w):
    """sum_i w_i * rows_i / B for a (B, 1) node."""
    b = rows.shape[0]
    return tc.sum_all(tc.matmul(tc.const(np.asarray(w, dtype=np.float64).reshape(1, b) / b), rows))


def _rewards(records):
    out = []
    for r in records:
        if r.reward is None or not r.reward.valid:
            raise ValueError(f"record {r.id} has no valid reward")
        out.append(r.reward.value)
    return np.array(out)


def _nodes_for(params):
    if isinstance(params, vm.ModelParams):
        return vm.param_nodes(params), params.config
    return params


def _ps_term(nodes, config, batch, weights):
    u = vm.forward_nodes(nodes, config, batch.zt, batch.cond, batch.t)
    per = _row_means(tc.square(tc.sub(u, tc.const(batch.vt))))
    return _weighted_mean(per, weights), u


def loss_ps(records, params, loss_cfg: LossConfig, gen, weights=None):
    """Reward-weighted flow-matching loss on synthetic targets (batch mean).

    ``params`` is a ModelParams or a ``(nodes, config)`` pair; ``weights``
    overrides the records' rewards.
    """
    nodes, config = _nodes_for(params)
    batch = _draw(records, lambda r: r.latent, gen)
    w = _rewards(records) if weights is None else weights
    return _ps_term(nodes, config, batch, w)[0]


def kl_realism(pred_clean, real, mode="pointwise"):
    """Realism penalty between predicted clean latents and real latents.

    ``pointwise`` is half the mean squared difference. ``gaussian_moment`` fits
    diagonal Gaussians to the two batches (rows are samples) and returns the
    KL from the predicted to the real one, averaged over latent coordinates.
    """
    pred = pred_clean if isinstance(pred_clean, tc.Node) else tc.const(np.atleast_2d(pred_clean))
    real = np.atleast_2d(np.asarray(real.value if isinstance(real, tc.Node) else real, dtype=np.float64))
    if pred.shape != real.shape:
        raise tc.ShapeError(f"kl_realism: {list(pred.shape)} vs {list(real.shape)}")
    if mode == "pointwise":
        return tc.scale(tc.mean(tc.square(tc.sub(pred, tc.const(real)))), 0.5)
    if mode != "gaussian_moment":
        raise ValueError(f"unknown kl_mode {mode!r}")
    b, d = pred.shape
    if b < 2:
        raise ValueError("gaussian_moment KL needs a batch of at least 2")
    avg = tc.const(np.full((1, b), 1.0 / b))
    ones = tc.const(np.ones((b, 1)))
    mu_p = tc.matmul(avg, pred)
    centred = tc.sub(pred, tc.matmul(ones, mu_p))
    var_raw = tc.matmul(avg, tc.square(centred))
    var_p = tc.add(tc.relu(tc.add(var_raw, tc.const(-VAR_FLOOR))), tc.const(VAR_FLOOR))
    mu_r = real.mean(axis=0, keepdims=True)
    var_r = np.maximum(real.var(axis=0, keepdims=True), VAR_FLOOR)
    # 0.5 * (log var_r - log var_p + (var_p + (mu_p - mu_r)^2) / var_r - 1)
    quad = tc.mul(tc.add(var_p, tc.square(tc.sub(mu_p, tc.const(mu_r)))), tc.const(1.0 / var_r))
    inner = tc.add(tc.sub(quad, tc.log(var_p)), tc.const(np.log(var_r) - 1.0))
    return tc.scale(tc.mean(inner), 0.5)


def _pr_term(nodes, config, batch, weights, loss_cfg):
    u = vm.forward_nodes(nodes, config, batch.zt, batch.cond, batch.t)
    per = _row_means(tc.square(tc.sub(u, tc.const(batch.vt))))
    fit = _weighted_mean(per, weights)
    if loss_cfg.lambda_kl == 0:
        return fit, u
    clean = fm.predicted_clean(u, tc.const(batch.z0))
    mode = loss_cfg.kl_mode
    if mode == "gaussian_moment" and batch.z1.shape[0] < 2:
        mode = "pointwise"
    kl = kl_realism(clean, batch.z1, mode)
    return tc.add(fit, tc.scale(kl, loss_cfg.lambda_kl)), u


def loss_pr(records, params, loss_cfg: LossConfig, gen, weights=None):
    """Reward-weighted flow matching on real targets plus the realism penalty."""
    for r in records:
        if r.real_latent is None:
            raise ValueError(f"record {r.id} has no real latent")
    nodes, config = _nodes_for(params)
    batch = _draw(records, lambda r: r.real_latent, gen)
    w = _rewards(records) if weights is None else weights
    return _pr_term(nodes, config, batch, w, loss_cfg)[0]


def total_loss(ps_records, pr_records, params, loss_cfg: LossConfig, gen, ps_weights=None, pr_weights=None):
    """lambda_ps * loss_ps + lambda_pr * loss_pr; an empty side contributes 0."""
    if not ps_records and not pr_records:
        raise ValueError("total_loss needs at least one non-empty batch")
    params = _nodes_for(params)
    parts = []
    if ps_records:
        parts.append(tc.scale(loss_ps(ps_records, params, loss_cfg, gen, ps_weights), loss_cfg.lambda_ps))
    if pr_records:
        parts.append(tc.scale(loss_pr(pr_records, params, loss_cfg, gen, pr_weights), loss_cfg.lambda_pr))
    return parts[0] if len(parts) == 1 else tc.add(parts[0], parts[1])


# optimisers ----------------------------------------------------------------------

@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0

    @classmethod
    def zeros(cls, arrays):
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays])


def adam_step(params, grads, state: AdamState, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam update of a list of arrays; returns (new_params, state)."""
    if len(params) != len(grads):
        raise tc.ShapeError("adam_step: params and grads differ in length")
    state.step += 1
    c1 = 1.0 - beta1**state.step
    c2 = 1.0 - beta2**state.step
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise tc.ShapeError(f"adam_step: param {list(p.shape)} vs grad {list(g.shape)}")
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g
        out.append(p - lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + eps))
    return out, state


def clip_grads(grads, max_norm):
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if norm <= max_norm:
        return grads
    return [g * (max_norm / norm) for g in grads]


def sgd_step(params, grads, lr):
    return [p - lr * g for p, g in zip(params, grads)]


# training loop -------------------------------------------------------------------

def _uses_rewards(strategy):
    return strategy in ("sft_filtered", "reweight_offline")


def _prepare(records, strategy):
    if _uses_rewards(strategy):
        missing = [r.id for r in records if r.reward is None]
        if missing:
            raise ValueError(f"strategy {strategy} needs a scored dataset ({len(missing)} records have no reward)")
        kept = rl.filter_dataset(records)
        return kept, len(records) - len(kept)
    return list(records), 0


class _OnlineScorer:
    """Scores predicted clean latents against each record's target spec."""

    def __init__(self, targets, cfg):
        self.targets = targets
        self.cfg = cfg
        self.specs = {}

    def spec(self, rec):
        if rec.id not in self.specs:
            dim = rl.record_dimension(rec, self.targets)
            self.specs[rec.id] = (dim, rl.scoring_spec(rec, dim, self.cfg.a_min))
        return self.specs[rec.id]

    def hard(self, rec, latent):
        dim, spec = self.spec(rec)
        if spec is None:
            return 0.0
        s = rl.score_hard(dim, ws.decode(latent), spec, self.cfg)
        return s.value if s.valid else 0.0


def _online_clean(params, batch, u_value, steps):
    if steps == 0:
        return u_value + batch.z0
    # short ODE solve from each row's own t
    out = np.empty_like(batch.zt)
    for i in range(batch.zt.shape[0]):
        c = batch.cond[i]
        out[i] = fm.integrate(lambda z, t: vm.forward(params, z, c, t), batch.zt[i], steps, "euler", t0=float(batch.t[i]))
    return out


def _soft_sum(u, batch, records, scorer):
    """Sum of score_soft over the rows' predicted clean latents (None if none scorable)."""
    clean = fm.predicted_clean(u, tc.const(batch.z0))
    b = clean.shape[0]
    total = None
    for i, rec in enumerate(records):
        dim, spec = scorer.spec(rec)
        if spec is None:
            continue
        e = np.zeros((1, b))
        e[0, i] = 1.0
        row = tc.matmul(tc.const(e), clean)
        s = rl.score_soft(dim, row, spec, scorer.cfg)
        total = s if total is None else tc.add(total, s)
    return total


def _step_loss(nodes, params, ps, pr, train_cfg, loss_cfg, gen, scorer):
    """Graph for one optimiser step under the configured strategy."""
    strategy = train_cfg.strategy
    parts, extra = [], []
    k = train_cfg.draws
    for recs, is_real, lam in ((ps, False, loss_cfg.lambda_ps), (pr, True, loss_cfg.lambda_pr)):
        if not recs:
            continue
        recs = [r for r in recs for _ in range(k)]
        batch = _draw(recs, (lambda r: r.real_latent) if is_real else (lambda r: r.latent), gen)
        if strategy == "reweight_offline":
            w = _rewards(recs)
        elif strategy == "reweight_online":
            # weights come from the current model and carry no gradient
            u_now = vm.forward(params, batch.zt, batch.cond, batch.t)
            clean = _online_clean(params, batch, u_now, train_cfg.online_sampler_steps)
            w = np.array([scorer.hard(r, z) for r, z in zip(recs, clean)])
        else:
            w = np.ones(len(recs))
        if is_real:
            term, u = _pr_term(nodes, params.config, batch, w, loss_cfg)
        else:
            term, u = _ps_term(nodes, params.config, batch, w)
        parts.append(tc.scale(term, lam))
        if strategy == "backprop_online":
            soft = _soft_sum(u, batch, recs, scorer)
            if soft is not None:
                extra.append(soft)
    loss = parts[0] if len(parts) == 1 else tc.add(parts[0], parts[1])
    if extra:
        soft = extra[0] if len(extra) == 1 else tc.add(extra[0], extra[1])
        # minus the batch-mean soft reward
        loss = tc.add(loss, tc.scale(soft, -train_cfg.soft_weight / (k * (len(ps) + len(pr)))))
    return loss


def batches(records, batch_size, gen):
    """Seeded shuffle, fixed-size chunks, each split into (synthetic, real) sub-batches."""
    order = gen.permutation(len(records))
    for i in range(0, len(order), batch_size):
        chunk = [records[j] for j in order[i:i + batch_size]]
        yield [r for r in chunk if r.real_latent is None], [r for r in chunk if r.real_latent is not None]


def train(records, init: vm.ModelParams, train_cfg: TrainConfig = TrainConfig(), loss_cfg: LossConfig = LossConfig(),
          targets=("motion_rationality",), scorer_cfg: rl.ScorerConfig = rl.ScorerConfig(), on_step=None):
    """Fine-tune ``init`` on ``records``; returns ``(params, TrainReport)``."""
    targets = tuple(targets)
    for d in targets:
        if d not in DIMENSIONS:
            raise ValueError(f"unknown dimension {d!r}")
    data, n_filtered = _prepare(records, train_cfg.strategy)
    report = TrainReport(train_cfg.strategy, n_used=len(data), n_filtered=n_filtered)
    params = init.copy()
    arrays = params.arrays()
    state = AdamState.zeros(arrays)
    scorer = _OnlineScorer(targets, scorer_cfg)
    global_step = 0
    for epoch in range(train_cfg.epochs):
        start = time.perf_counter()
        shuffle = rng("train-shuffle", train_cfg.seed, epoch)
        for step, (ps, pr) in enumerate(batches(data, train_cfg.batch_size, shuffle)):
            gen = rng("train-step", train_cfg.seed, epoch, step)
            nodes = vm.param_nodes(params)
            loss = _step_loss(nodes, params, ps, pr, train_cfg, loss_cfg, gen, scorer)
            value = loss.item()
            if not np.isfinite(value):
                raise FloatingPointError(f"non-finite loss at epoch {epoch} step {step}")
            grads = tc.backward(loss, nodes)
            g = [grads[n].reshape(a.shape) for n, a in zip(nodes, arrays)]
            if train_cfg.grad_clip > 0:
                g = clip_grads(g, train_cfg.grad_clip)
            lr = train_cfg.learning_rate
            if global_step < train_cfg.warmup_steps:
                lr = lr * (global_step + 1) / train_cfg.warmup_steps
            global_step += 1
            if train_cfg.optimizer == "adam":
                arrays, state = adam_step(arrays, g, state, lr, train_cfg.beta1, train_cfg.beta2, train_cfg.eps)
            else:
                arrays = sgd_step(arrays, g, lr)
            params = vm.ModelParams.from_arrays(arrays, params.config)
            report.losses.append(value)
            if on_step is not None:
                on_step(epoch, step, value)
        report.epoch_seconds.append(time.perf_counter() - start)
    return params, report


# pre-training --------------------------------------------------------------------

@dataclass(frozen=True)
class PretrainConfig:
    corpus_size: int = 4000
    epochs: int = 120
    batch_size: int = 64
    learning_rate: float = 1e-3
    # cosine decay towards this rate over the run
    final_learning_rate: float = 1e-5
    dimensions: tuple = DIMENSIONS
    defects: ws.DefectConfig = field(default_factory=lambda: ws.DefectConfig(rate=0.5))
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "dimensions", tuple(self.dimensions))
        if self.corpus_size < 1 or self.epochs < 0 or self.batch_size < 1:
            raise ValueError("corpus_size and batch_size must be >= 1, epochs >= 0")
        for d in self.dimensions:
            if d not in DIMENSIONS:
                raise ValueError(f"unknown dimension {d!r}")


def pretrain_corpus(cfg: PretrainConfig):
    """(cond, latent) arrays of defected oracle videos over all dimensions."""
    from . import promptengine as pe

    conds, lats = [], []
    for i in range(cfg.corpus_size):
        dim = cfg.dimensions[i % len(cfg.dimensions)]
        spec = pe.gen_base_prompts(dim, 1, derive_seed(cfg.seed, "pretrain-prompt", i))[0]
        traj = ws.simulate(spec, derive_seed(cfg.seed, "pretrain-sim", i))
        traj = ws.inject_defects(traj, replace(cfg.defects, seed=derive_seed(cfg.seed, cfg.defects.seed, "pretrain")), stream=i)
        conds.append(pe.encode_conditioning(spec))
        lats.append(ws.encode(traj))
    return np.stack(conds), np.stack(lats)


def pretrain(cfg: PretrainConfig, model_cfg: vm.ModelConfig | None = None, on_epoch=None):
    """Plain flow-matching training on the defected corpus; returns (params, report)."""
    model_cfg = model_cfg or vm.desk_config(seed=cfg.seed)
    conds, lats = pretrain_corpus(cfg)
    params = vm.init_params(model_cfg)
    arrays = params.arrays()
    state = AdamState.zeros(arrays)
    report = TrainReport("pretrain", n_used=len(lats))
    steps_per_epoch = -(-len(lats) // cfg.batch_size)
    total = max(1, cfg.epochs * steps_per_epoch)
    done = 0
    for epoch in range(cfg.epochs):
        start = time.perf_counter()
        order = rng("pretrain-shuffle", cfg.seed, epoch).permutation(len(lats))
        ep_losses = []
        for step, i in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[i:i + cfg.batch_size]
            gen = rng("pretrain-step", cfg.seed, epoch, step)
            t = gen.uniform(0.0, 1.0, size=idx.size)
            z0 = gen.standard_normal((idx.size, lats.shape[1]))
            p = fm.make_flow_point(z0, lats[idx], t)
            nodes = vm.param_nodes(params)
            u = vm.forward_nodes(nodes, model_cfg, p.zt, conds[idx], t)
            loss = fm.fm_loss(u, p.vt)
            grads = tc.backward(loss, nodes)
            g = [grads[n].reshape(a.shape) for n, a in zip(nodes, arrays)]
            frac = 0.5 * (1.0 + np.cos(np.pi * done / total))
            lr = cfg.final_learning_rate + (cfg.learning_rate - cfg.final_learning_rate) * frac
            arrays, state = adam_step(arrays, g, state, lr)
            params = vm.ModelParams.from_arrays(arrays, model_cfg)
            done += 1
            ep_losses.append(loss.item())
        report.losses.extend(ep_losses)
        report.epoch_seconds.append(time.perf_counter() - start)
        if on_epoch is not None:
            on_epoch(epoch, float(np.mean(ep_losses)))
    return params, report
