"""Dimension benchmarks, the three ablation runners and report files.

A "model" here is either a ``ModelParams`` checkpoint or a callable
``model(spec, seed) -> latent`` (used for oracle-replay stubs in tests).
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import flowmatch as fm
from . import promptengine as pe
from . import rewardlab as rl
from . import trainer as tr
from . import velocitymodel as vm
from . import worldsim as ws
from ._util import derive_seed, fnv1a64
from .dims import DIMENSIONS

log = logging.getLogger(__name__)

# eval prompts and noise live under their own salt, never used by training
EVAL_SALT = "evalbench/holdout"
INVALID_FLAG_FRACTION = 0.5
SCARCE_FRACTION = 0.5

DATA_MIX_ROWS = (
    (),
    ("PsVs",),
    ("PrVs",),
    ("PsVs", "PrVs"),
    ("PrVs", "PrVr"),
    ("PsVs", "PrVs", "PrVr"),
)

DEFAULT_GROUPS = {
    "dynamics": ("motion_rationality", "mechanics_gravity"),
    "composition": ("instance_preservation", "dynamic_spatial"),
}


@dataclass(frozen=True)
class EvalConfig:
    dimensions: tuple = DIMENSIONS
    prompts_per_dimension: int = 32
    samples_per_prompt: int = 2
    sampler: fm.SamplerConfig = field(default_factory=fm.SamplerConfig)
    scorer: rl.ScorerConfig = field(default_factory=rl.ScorerConfig)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "dimensions", tuple(self.dimensions))
        if self.prompts_per_dimension < 1 or self.samples_per_prompt < 1:
            raise ValueError("prompts_per_dimension and samples_per_prompt must be positive")
        for d in self.dimensions:
            if d not in DIMENSIONS:
                raise ValueError(f"unknown dimension {d!r}")

    def hash(self):
        return fnv1a64(json.dumps(asdict(self), sort_keys=True).encode())


@dataclass(frozen=True)
class DimensionResult:
    dimension: str
    mean_score_percent: float
    n_scored: int
    n_invalid: int

    @property
    def flagged(self):
        """More than half of the samples could not be scored."""
        total = self.n_scored + self.n_invalid
        return total > 0 and self.n_invalid > INVALID_FLAG_FRACTION * total


def eval_prompt_seed(seed, dimension):
    return derive_seed(EVAL_SALT, seed, "prompts", dimension)


def eval_sample_seed(seed, dimension, prompt_index, sample_index):
    return derive_seed(EVAL_SALT, seed, "noise", dimension, prompt_index, sample_index)


def _latents(model, specs, seeds, sampler):
    if callable(model) and not isinstance(model, vm.ModelParams):
        return np.stack([np.asarray(model(s, z), dtype=np.float64) for s, z in zip(specs, seeds)])
    conds = np.stack([pe.encode_conditioning(s) for s in specs])
    out = [fm.sample_batch(model, conds[i:i + pe.SAMPLE_CHUNK], seeds[i:i + pe.SAMPLE_CHUNK], sampler)
           for i in range(0, len(seeds), pe.SAMPLE_CHUNK)]
    return np.concatenate(out)


def eval_dimension(model, dimension, cfg: EvalConfig = EvalConfig(), workers=1) -> DimensionResult:
    """Sample the held-out prompt set for ``dimension`` and hard-score every video."""
    prompts = pe.gen_base_prompts(dimension, cfg.prompts_per_dimension, eval_prompt_seed(cfg.seed, dimension))
    specs, seeds = [], []
    for i, spec in enumerate(prompts):
        for j in range(cfg.samples_per_prompt):
            specs.append(spec)
            seeds.append(eval_sample_seed(cfg.seed, dimension, i, j))
    lat = _latents(model, specs, seeds, cfg.sampler)
    scores = rl._map(lambda k: rl.score_hard(dimension, ws.decode(lat[k]), specs[k], cfg.scorer),
                     range(len(specs)), workers)
    valid = [s.value for s in scores if s.valid]
    mean = 100.0 * float(np.mean(valid)) if valid else 0.0
    return DimensionResult(dimension, mean, len(valid), len(scores) - len(valid))


def evaluate(model, cfg: EvalConfig = EvalConfig(), workers=1):
    return {d: eval_dimension(model, d, cfg, workers) for d in cfg.dimensions}


def scorable_fraction(records, dimension, scorer: rl.ScorerConfig = rl.ScorerConfig()):
    """Share of ``records`` that can be scored at all under ``dimension``."""
    if not records:
        return 0.0
    return float(np.mean([rl.score_record(r, dimension, scorer).valid for r in records]))


# tables --------------------------------------------------------------------------

@dataclass
class Table:
    name: str
    columns: list
    rows: list = field(default_factory=list)
    notes: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def add(self, *row):
        if len(row) != len(self.columns):
            raise ValueError(f"{self.name}: row has {len(row)} cells, expected {len(self.columns)}")
        self.rows.append(list(row))

    def column(self, name):
        i = self.columns.index(name)
        return [r[i] for r in self.rows]


def fmt_cell(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "yes" if v else "no"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.2f}"
    if isinstance(v, (tuple, list)):
        return "+".join(str(x) for x in v) if v else "none"
    return str(v)


def eval_table(results, name="eval", scarcity=None):
    """Per-dimension scores; ``scarcity`` maps dimension -> scorable data fraction."""
    scarcity = scarcity or {}
    t = Table(name, ["dimension", "score", "n_scored", "n_invalid", "flag"])
    for d, res in results.items():
        flags = []
        if res.flagged:
            flags.append("mostly-invalid")
        if d in scarcity and scarcity[d] < SCARCE_FRACTION:
            flags.append("scarce-data")
        t.add(d, res.mean_score_percent, res.n_scored, res.n_invalid, ";".join(flags))
        if res.flagged:
            t.notes.append(f"{d}: {res.n_invalid} of {res.n_scored + res.n_invalid} samples not scorable")
        if d in scarcity and scarcity[d] < SCARCE_FRACTION:
            t.notes.append(f"{d}: only {100 * scarcity[d]:.2f}% of the training records are scorable")
    return t


def _csv_text(tables):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    for k, t in enumerate(tables):
        if k:
            w.writerow([])
        w.writerow([t.name])
        w.writerow(t.columns)
        for row in t.rows:
            w.writerow([fmt_cell(v) for v in row])
        for note in t.notes:
            w.writerow(["note", note])
    return buf.getvalue()


def _md_cell(v):
    return fmt_cell(v).replace("|", "\\|")


def _md_text(tables):
    out = []
    for t in tables:
        out.append(f"## {t.name}\n")
        out.append("| " + " | ".join(t.columns) + " |")
        out.append("|" + "|".join("---" for _ in t.columns) + "|")
        for row in t.rows:
            out.append("| " + " | ".join(_md_cell(v) for v in row) + " |")
        if t.notes:
            out.append("")
            out.extend(f"- {n}" for n in t.notes)
        out.append("")
    return "\n".join(out)


def emit_report(tables, path, fmt="csv"):
    """Write ``path`` (.csv or .md appended if missing) plus ``path.manifest.json``.

    Returns the list of files written.
    """
    tables = list(tables)
    if not tables:
        raise ValueError("emit_report needs at least one table")
    if fmt == "csv":
        text, ext = _csv_text(tables), ".csv"
    elif fmt == "markdown":
        text, ext = _md_text(tables), ".md"
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    base = path[:-len(ext)] if path.endswith(ext) else path
    target = base + ext
    manifest = base + ".manifest.json"
    with open(target, "w", newline="") as fh:
        fh.write(text)
    with open(manifest, "w") as fh:
        json.dump({t.name: t.meta for t in tables}, fh, sort_keys=True, indent=1)
        fh.write("\n")
    return [target, manifest]


# ablations -----------------------------------------------------------------------

def _fine_tune(base, records, train_cfg, targets, loss_cfg, scorer):
    params, report = tr.train(records, base, train_cfg, loss_cfg, targets=targets, scorer_cfg=scorer)
    return params, report


def _non_target_mean(results, target):
    others = [r.mean_score_percent for d, r in results.items() if d != target]
    return float(np.mean(others)) if others else 0.0


def ablate_data_sources(base_params, mixes=DATA_MIX_ROWS, train_cfg: tr.TrainConfig = tr.TrainConfig(),
                        target_dim="motion_rationality", mix: pe.DataMixConfig | None = None,
                        eval_cfg: EvalConfig = EvalConfig(), loss_cfg: tr.LossConfig = tr.LossConfig(),
                        workers=1):
    """One reweight_offline fine-tune per include-set; the empty set is the base model.

    Every row draws its records from one full build, so a source contributes
    the same records to each row it appears in.
    """
    mix = replace(mix or pe.DataMixConfig(), include=pe.SOURCES, target_dimensions=(target_dim,))
    train_cfg = replace(train_cfg, strategy="reweight_offline")
    needed = sorted({s for m in mixes for s in m})
    records = []
    if needed:
        records = pe.build_dataset(replace(mix, include=tuple(needed)), base_params)
        rl.score_dataset(records, eval_cfg.scorer, (target_dim,), workers=workers)
    base_res = evaluate(base_params, eval_cfg, workers)
    base_other = _non_target_mean(base_res, target_dim)
    t = Table("data_sources", ["sources", "n_records", "target_score", "non_target_score", "non_target_regression"])
    for include in mixes:
        if include:
            subset = [r for r in records if r.source in include]
            params, _ = _fine_tune(base_params, subset, train_cfg, (target_dim,), loss_cfg, eval_cfg.scorer)
            res = evaluate(params, eval_cfg, workers)
        else:
            subset, res = [], base_res
        other = _non_target_mean(res, target_dim)
        t.add(tuple(include), len(subset), res[target_dim].mean_score_percent, other, base_other - other)
    t.meta = {"target": target_dim, "mix": mix.to_dict(), "train": asdict(train_cfg),
              "eval_hash": f"{eval_cfg.hash():016x}", "eval_seed": eval_cfg.seed}
    return t


def ablate_strategies(base_params, records, strategies=tr.STRATEGIES, train_cfg: tr.TrainConfig = tr.TrainConfig(),
                      target_dim="motion_rationality", eval_cfg: EvalConfig = EvalConfig(),
                      loss_cfg: tr.LossConfig = tr.LossConfig(), workers=1):
    """Same scored records and seeds for every strategy; reports time and score."""
    t = Table("strategies", ["strategy", "epoch_seconds", "score", "n_used", "n_filtered"])
    for s in strategies:
        params, rep = _fine_tune(base_params, records, replace(train_cfg, strategy=s), (target_dim,), loss_cfg,
                                 eval_cfg.scorer)
        res = eval_dimension(params, target_dim, eval_cfg, workers)
        secs = float(np.mean(rep.epoch_seconds)) if rep.epoch_seconds else 0.0
        t.add(s, secs, res.mean_score_percent, rep.n_used, rep.n_filtered)
    t.meta = {"target": target_dim, "train": asdict(train_cfg), "eval_hash": f"{eval_cfg.hash():016x}",
              "eval_seed": eval_cfg.seed, "wall_time_columns": ["epoch_seconds"]}
    return t


def ablate_combined(base_params, groups=None, train_cfg: tr.TrainConfig = tr.TrainConfig(),
                    mix: pe.DataMixConfig | None = None, eval_cfg: EvalConfig = EvalConfig(),
                    loss_cfg: tr.LossConfig = tr.LossConfig(), workers=1):
    """Per group: base, single-dimension and combined fine-tunes on each member.

    Returns one table per group; the combined run scores every record under
    its own dimension when that dimension belongs to the group.
    """
    groups = DEFAULT_GROUPS if groups is None else groups
    mix = mix or pe.DataMixConfig()
    train_cfg = replace(train_cfg, strategy="reweight_offline")
    tables = []

    def tuned(targets):
        recs = pe.build_dataset(replace(mix, target_dimensions=targets), base_params)
        rl.score_dataset(recs, eval_cfg.scorer, targets, workers=workers)
        return _fine_tune(base_params, recs, train_cfg, targets, loss_cfg, eval_cfg.scorer)[0]

    for name, members in groups.items():
        members = tuple(members)
        if not members:
            raise ValueError(f"group {name!r} is empty")
        for d in members:
            if d not in DIMENSIONS:
                raise ValueError(f"group {name!r}: unknown dimension {d!r}")
        t = Table(f"combined_{name}", ["setting", *members, "mean"])
        base = [eval_dimension(base_params, d, eval_cfg, workers).mean_score_percent for d in members]
        single = [eval_dimension(tuned((d,)), d, eval_cfg, workers).mean_score_percent for d in members]
        joint = tuned(members)
        comb = [eval_dimension(joint, d, eval_cfg, workers).mean_score_percent for d in members]
        for label, vals in (("baseline", base), ("single", single), ("combined", comb)):
            t.add(label, *vals, float(np.mean(vals)))
        t.meta = {"members": list(members), "mix": mix.to_dict(), "train": asdict(train_cfg),
                  "eval_hash": f"{eval_cfg.hash():016x}", "eval_seed": eval_cfg.seed}
        tables.append(t)
    return tables


def write_report_files(tables, directory, run_name, formats=("csv", "markdown")):
    os.makedirs(directory, exist_ok=True)
    out = []
    for f in formats:
        out.extend(emit_report(tables, os.path.join(directory, run_name), f))
    return out
