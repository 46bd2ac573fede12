"""``flowforge`` command line: config loading and pipeline orchestration.

Every command works inside a run directory with a fixed layout::

    config.ini                 resolved config snapshot
    dataset.jsonl              generated (and later scored) records
    scores.tsv                 score cache
    checkpoints/base.ffck      pretrained model
    checkpoints/finetuned.ffck fine-tuned model
    reports/                   training reports and result tables
    frames/                    rendered PGM frames
    manifest.json              per-command config hash, seed and output hashes

Exit codes: 0 ok, 2 config error, 3 missing input, 4 I/O error, 5 numerical failure.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, fields, replace

from . import evalbench as eb
from . import flowmatch as fm
from . import promptengine as pe
from . import rewardlab as rl
from . import trainer as tr
from . import velocitymodel as vm
from . import worldsim as ws
from ._util import fnv1a64

log = logging.getLogger("flowforge")

SCHEMA_VERSION = 1
SEED_ENV = "FLOWFORGE_SEED"

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4, 5

CONFIG_SNAPSHOT = "config.ini"
DATASET = "dataset.jsonl"
SCORES = "scores.tsv"
BASE_CKPT = os.path.join("checkpoints", "base.ffck")
TUNED_CKPT = os.path.join("checkpoints", "finetuned.ffck")
REPORTS = "reports"
FRAMES = "frames"
MANIFEST = "manifest.json"


class ConfigError(Exception):
    def __init__(self, path, msg):
        super().__init__(f"{path}: {msg}")
        self.path = path


class MissingInputError(Exception):
    pass


# config ---------------------------------------------------------------------------

# section -> (default object, keys derived from the global seed or other sections)
def _section_defaults():
    return {
        "world": (ws.DefectConfig(rate=0.5), ()),
        "model": (vm.desk_config(), ("seed",)),
        "sampler": (fm.SamplerConfig(), ("seed",)),
        "scorer": (rl.ScorerConfig(), ()),
        "loss": (tr.LossConfig(), ()),
        "train": (tr.TrainConfig(), ("seed",)),
        "pretrain": (tr.PretrainConfig(), ("seed", "defects")),
        "eval": (eb.EvalConfig(), ("seed", "sampler", "scorer")),
        "data": (pe.DataMixConfig(), ("seed", "defects")),
    }


SECTION_ORDER = ("run", "world", "model", "sampler", "scorer", "loss", "train", "pretrain", "eval", "data")


@dataclass(frozen=True)
class RunConfig:
    seed: int
    world: ws.DefectConfig
    model: vm.ModelConfig
    sampler: fm.SamplerConfig
    scorer: rl.ScorerConfig
    loss: tr.LossConfig
    train: tr.TrainConfig
    pretrain: tr.PretrainConfig
    eval: eb.EvalConfig
    data: pe.DataMixConfig
    groups: dict

    def to_ini(self) -> str:
        blocks = [("meta", {"schema_version": SCHEMA_VERSION}), ("run", {"seed": self.seed})]
        defaults = _section_defaults()
        for name in SECTION_ORDER[1:]:
            obj = getattr(self, name)
            blocks.append((name, {f.name: getattr(obj, f.name) for f in fields(obj) if f.name not in defaults[name][1]}))
        if self.groups:
            blocks.append(("groups", self.groups))
        lines = []
        for name, values in blocks:
            lines.append(f"[{name}]")
            lines.extend(f"{k} = {_format_value(v)}" for k, v in values.items())
            lines.append("")
        return "\n".join(lines)

    def hash(self) -> str:
        return f"{fnv1a64(self.to_ini().encode()):016x}"


def _format_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (tuple, list)):
        return ",".join(_format_value(x) for x in v)
    if isinstance(v, dict):
        return ",".join(f"{k}:{v[k]}" for k in sorted(v))
    return str(v)


def _parse_bool(raw):
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {raw!r}")


def _parse_value(raw, default, path):
    try:
        if isinstance(default, bool):
            return _parse_bool(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            v = float(raw)
            if not math.isfinite(v):
                raise ValueError(f"expected a finite number, got {raw!r}")
            return v
        if isinstance(default, tuple):
            items = [x.strip() for x in raw.split(",") if x.strip()]
            kind = type(default[0]) if default else str
            return tuple(kind(x) for x in items)
        if isinstance(default, dict):
            out = {}
            for item in (x.strip() for x in raw.split(",") if x.strip()):
                k, sep, v = item.partition(":")
                if not sep:
                    raise ValueError(f"expected name:count pairs, got {item!r}")
                out[k.strip()] = int(v)
            return out
        return raw.strip()
    except ValueError as exc:
        raise ConfigError(path, str(exc)) from None


def _build_section(name, default, skip, values):
    allowed = {f.name: getattr(default, f.name) for f in fields(default) if f.name not in skip}
    parsed = {}
    for key, raw in values.items():
        if key not in allowed:
            raise ConfigError(f"{name}.{key}", "unknown key")
        parsed[key] = _parse_value(raw, allowed[key], f"{name}.{key}")
    try:
        return replace(default, **parsed)
    except (ValueError, TypeError) as exc:
        # find the key that breaks validation on its own
        for key in parsed:
            try:
                replace(default, **{key: parsed[key]})
            except (ValueError, TypeError) as one:
                raise ConfigError(f"{name}.{key}", str(one)) from None
        raise ConfigError(f"{name}.{'/'.join(parsed)}", str(exc)) from None


def _read_ini(text, origin):
    cp = configparser.ConfigParser(interpolation=None, strict=True)
    cp.optionxform = str
    try:
        cp.read_string(text, source=origin)
    except configparser.Error as exc:
        raise ConfigError(origin, " ".join(str(exc).split())) from None
    return {sec: dict(cp[sec]) for sec in cp.sections()}


def load_config(path=None, overrides=(), env=None) -> RunConfig:
    """Parse an INI file (or defaults), apply ``--set`` overrides, then the seed env var."""
    env = os.environ if env is None else env
    sections = {}
    if path is not None:
        try:
            with open(path) as fh:
                text = fh.read()
        except FileNotFoundError:
            raise MissingInputError(f"config file {path} not found") from None
        except (OSError, UnicodeDecodeError) as exc:
            raise ConfigError(path, f"unreadable: {exc}") from None
        sections = _read_ini(text, path)
        meta = sections.pop("meta", None)
        if meta is None or "schema_version" not in meta:
            raise ConfigError("meta.schema_version", "missing")
        if meta["schema_version"].strip() != str(SCHEMA_VERSION):
            raise ConfigError("meta.schema_version", f"unsupported version {meta['schema_version']!r}")
        extra = set(meta) - {"schema_version"}
        if extra:
            raise ConfigError(f"meta.{sorted(extra)[0]}", "unknown key")
    for item in overrides:
        key, sep, value = item.partition("=")
        sec, dot, opt = key.strip().partition(".")
        if not sep or not dot or not sec or not opt:
            raise ConfigError(key.strip() or item, "override must look like section.key=value")
        if sec == "meta":
            raise ConfigError(key.strip(), "meta keys cannot be overridden")
        sections.setdefault(sec, {})[opt] = value
    known = set(SECTION_ORDER) | {"groups"}
    for sec in sections:
        if sec not in known:
            raise ConfigError(sec, "unknown section")

    run = sections.get("run", {})
    for key in run:
        if key != "seed":
            raise ConfigError(f"run.{key}", "unknown key")
    seed = _parse_value(run.get("seed", "0"), 0, "run.seed")
    if SEED_ENV in env and env[SEED_ENV].strip():
        seed = _parse_value(env[SEED_ENV], 0, SEED_ENV)
    if seed < 0:
        raise ConfigError("run.seed", "must be >= 0")

    built = {}
    for name, (default, skip) in _section_defaults().items():
        built[name] = _build_section(name, default, skip, sections.get(name, {}))
    groups = {}
    for gname, raw in sections.get("groups", {}).items():
        dims = _parse_value(raw, ("",), f"groups.{gname}")
        if not dims:
            raise ConfigError(f"groups.{gname}", "empty group")
        for d in dims:
            if d not in pe.DIMENSIONS:
                raise ConfigError(f"groups.{gname}", f"unknown dimension {d!r}")
        groups[gname] = dims

    world = built["world"]
    sampler = replace(built["sampler"], seed=seed)
    scorer = built["scorer"]
    try:
        return RunConfig(
            seed=seed,
            world=world,
            model=replace(built["model"], seed=seed),
            sampler=sampler,
            scorer=scorer,
            loss=built["loss"],
            train=replace(built["train"], seed=seed),
            pretrain=replace(built["pretrain"], seed=seed, defects=world),
            eval=replace(built["eval"], seed=seed, sampler=sampler, scorer=scorer),
            data=replace(built["data"], seed=seed, defects=world),
            groups=groups,
        )
    except ValueError as exc:
        raise ConfigError("run.seed", str(exc)) from None


# run directory --------------------------------------------------------------------

def _file_hash(path):
    with open(path, "rb") as fh:
        return f"{fnv1a64(fh.read()):016x}"


class RunDir:
    def __init__(self, root):
        self.root = root

    def path(self, rel):
        return os.path.join(self.root, rel)

    def ensure(self, *subdirs):
        for d in ("", *subdirs):
            os.makedirs(self.path(d), exist_ok=True)

    def record(self, command, cfg: RunConfig, inputs, outputs, workers, extra=None):
        """Write the config snapshot and this command's manifest entry."""
        with open(self.path(CONFIG_SNAPSHOT), "w") as fh:
            fh.write(cfg.to_ini())
        mpath = self.path(MANIFEST)
        manifest = {}
        if os.path.exists(mpath):
            with open(mpath) as fh:
                try:
                    manifest = json.load(fh)
                except json.JSONDecodeError:
                    log.warning("manifest %s unreadable; starting a new one", mpath)
        hashes = {}
        for p in outputs:
            hashes[os.path.relpath(p, self.root)] = _file_hash(p)
        entry = {
            "config_hash": cfg.hash(),
            "config": CONFIG_SNAPSHOT,
            "seed": cfg.seed,
            "workers": workers,
            "inputs": {os.path.relpath(p, self.root): _file_hash(p) for p in inputs},
            "outputs": hashes,
        }
        if extra:
            entry.update(extra)
        manifest[command] = entry
        with open(mpath, "w") as fh:
            json.dump(manifest, fh, sort_keys=True, indent=1)
            fh.write("\n")


def _need(path, what):
    if not os.path.exists(path):
        raise MissingInputError(f"{what} {path} not found")
    return path


def _load_model(path):
    return vm.load_checkpoint(_need(path, "checkpoint"))


def _load_records(path):
    _need(path, "dataset")
    return pe.read_dataset(path)


# commands -------------------------------------------------------------------------

def cmd_gen_data(cfg: RunConfig, run: RunDir, checkpoint=None, workers=1, out=None):
    needs_model = any(s in cfg.data.include for s in ("PsVs", "PrVs"))
    ckpt = checkpoint or run.path(BASE_CKPT)
    model = _load_model(ckpt) if needs_model else None
    run.ensure()
    out = out or run.path(DATASET)
    records = pe.build_dataset(cfg.data, model, cfg.sampler, path=out)
    counts = {s: sum(r.source == s for r in records) for s in pe.SOURCES}
    print(" ".join(f"{s}={counts[s]}" for s in pe.SOURCES))
    run.record("gen-data", cfg, [ckpt] if needs_model else [], [out], workers)
    return EXIT_OK


def cmd_pretrain(cfg: RunConfig, run: RunDir, workers=1, out=None):
    run.ensure("checkpoints", REPORTS)
    out = out or run.path(BASE_CKPT)
    params, report = tr.pretrain(cfg.pretrain, cfg.model,
                                 on_epoch=lambda e, loss: log.info("pretrain epoch %d loss %.5f", e, loss))
    vm.save_checkpoint(params, out)
    report.checkpoint = os.path.relpath(out, run.root)
    rpath = run.path(os.path.join(REPORTS, "pretrain.report.json"))
    with open(rpath, "w") as fh:
        fh.write(report.to_text())
    print(f"pretrained {params.n_params()} parameters, final loss {report.losses[-1]:.5f}" if report.losses
          else "pretrained 0 epochs")
    run.record("pretrain", cfg, [], [out], workers, {"report": os.path.relpath(rpath, run.root)})
    return EXIT_OK


def cmd_score(cfg: RunConfig, run: RunDir, dataset=None, workers=1):
    path = dataset or run.path(DATASET)
    header, records = _load_records(path)
    rl.score_dataset(records, cfg.scorer, cfg.data.target_dimensions, cache_path=run.path(SCORES), workers=workers)
    meta = {k: v for k, v in header.items() if k != "format"}
    meta["scorer"] = json.loads(cfg.scorer.canonical())
    meta["targets"] = list(cfg.data.target_dimensions)
    pe.write_dataset(path, records, meta)
    kept = len(rl.filter_dataset(records))
    print(f"scored {len(records)} records, {kept} kept after filtering")
    run.record("score", cfg, [], [path], workers)
    return EXIT_OK


def _require_scores(records, strategy, path):
    if tr._uses_rewards(strategy) and any(r.reward is None for r in records):
        raise MissingInputError(f"dataset {path} is not scored; run `flowforge score` first "
                                f"(strategy {strategy} needs rewards)")


def cmd_finetune(cfg: RunConfig, run: RunDir, checkpoint=None, dataset=None, workers=1, out=None):
    ckpt = checkpoint or run.path(BASE_CKPT)
    path = dataset or run.path(DATASET)
    base = _load_model(ckpt)
    _, records = _load_records(path)
    _require_scores(records, cfg.train.strategy, path)
    run.ensure("checkpoints", REPORTS)
    params, report = tr.train(records, base, cfg.train, cfg.loss, targets=cfg.data.target_dimensions,
                              scorer_cfg=cfg.scorer)
    out = out or run.path(TUNED_CKPT)
    vm.save_checkpoint(params, out)
    report.checkpoint = os.path.relpath(out, run.root)
    rpath = run.path(os.path.join(REPORTS, "finetune.report.json"))
    with open(rpath, "w") as fh:
        fh.write(report.to_text())
    print(f"{cfg.train.strategy}: {report.n_used} records used, {report.n_filtered} filtered, "
          f"{len(report.losses)} steps")
    run.record("finetune", cfg, [ckpt, path], [out], workers, {"report": os.path.relpath(rpath, run.root)})
    return EXIT_OK


def cmd_eval(cfg: RunConfig, run: RunDir, checkpoint=None, dataset=None, workers=1):
    ckpt = checkpoint or (run.path(TUNED_CKPT) if os.path.exists(run.path(TUNED_CKPT)) else run.path(BASE_CKPT))
    params = _load_model(ckpt)
    results = eb.evaluate(params, cfg.eval, workers)
    scarcity = {}
    dpath = dataset or run.path(DATASET)
    if os.path.exists(dpath):
        _, records = pe.read_dataset(dpath)
        prvs = [r for r in records if r.source == "PrVs"]
        if prvs:
            scarcity = {d: eb.scorable_fraction(prvs, d, cfg.scorer) for d in cfg.eval.dimensions}
    table = eb.eval_table(results, "eval", scarcity)
    table.meta = {"checkpoint": os.path.relpath(ckpt, run.root), "eval_hash": f"{cfg.eval.hash():016x}",
                  "seed": cfg.seed, "scorable_fraction_PrVs": {k: round(v, 6) for k, v in scarcity.items()}}
    outs = eb.write_report_files([table], run.path(REPORTS), "eval")
    for row in table.rows:
        print(f"{row[0]:24s} {eb.fmt_cell(row[1]):>7s}  scored={row[2]} invalid={row[3]} {row[4]}".rstrip())
    run.record("eval", cfg, [ckpt] + ([dpath] if scarcity else []), outs, workers)
    return EXIT_OK


def cmd_ablate(cfg: RunConfig, run: RunDir, mode, checkpoint=None, dataset=None, workers=1):
    ckpt = checkpoint or run.path(BASE_CKPT)
    base = _load_model(ckpt)
    target = cfg.data.target_dimensions[0]
    inputs = [ckpt]
    if mode == "data":
        tables = [eb.ablate_data_sources(base, eb.DATA_MIX_ROWS, cfg.train, target, cfg.data, cfg.eval, cfg.loss,
                                         workers)]
    elif mode == "strategy":
        path = dataset or run.path(DATASET)
        _, records = _load_records(path)
        _require_scores(records, "reweight_offline", path)
        inputs.append(path)
        tables = [eb.ablate_strategies(base, records, tr.STRATEGIES, cfg.train, target, cfg.eval, cfg.loss, workers)]
    elif mode == "combined":
        tables = eb.ablate_combined(base, cfg.groups or None, cfg.train, cfg.data, cfg.eval, cfg.loss, workers)
    else:
        raise ConfigError("ablate", f"unknown mode {mode!r}")
    outs = eb.write_report_files(tables, run.path(REPORTS), f"ablate_{mode}")
    for t in tables:
        cells = [list(t.columns)] + [[eb.fmt_cell(v) for v in row] for row in t.rows]
        widths = [max(len(r[i]) for r in cells) for i in range(len(t.columns))]
        print(t.name)
        for r in cells:
            print("  " + "  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip())
    run.record(f"ablate-{mode}", cfg, inputs, outs, workers)
    return EXIT_OK


def cmd_render(cfg: RunConfig, run: RunDir, record=None, dimension=None, dataset=None, resolution=64, out=None):
    inputs = []
    if record is not None:
        path = dataset or run.path(DATASET)
        _, records = _load_records(path)
        match = [r for r in records if r.id == record]
        if not match:
            raise MissingInputError(f"record {record} not in {path}")
        traj = ws.decode(match[0].latent)
        name = f"record_{record}"
        inputs.append(path)
    else:
        dim = dimension or cfg.data.target_dimensions[0]
        if dim not in pe.DIMENSIONS:
            raise ConfigError("render.dimension", f"unknown dimension {dim!r}")
        spec = pe.gen_base_prompts(dim, 1, cfg.seed)[0]
        traj = ws.simulate(spec, cfg.seed)
        name = f"oracle_{dim}"
    directory = out or run.path(os.path.join(FRAMES, name))
    paths = ws.export_frames(traj, directory, resolution)
    print(f"wrote {len(paths)} frames to {directory}")
    run.record(f"render-{name}", cfg, inputs, paths, 1)
    return EXIT_OK


# entry point ----------------------------------------------------------------------

def _workers(raw):
    n = int(raw)
    if n < 1:
        raise argparse.ArgumentTypeError("--workers must be >= 1")
    return n


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="INI config file (defaults when omitted)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--run", default="run", help="run directory (default: ./run)")
    common.add_argument("--workers", type=_workers, default=1, help="parallel workers for sampling and scoring")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="flowforge", description="Reward-guided flow-matching toolkit on a toy video world.")
    sub = p.add_subparsers(dest="command", required=True)
    g = sub.add_parser("gen-data", parents=[common], help="build a dataset from the configured source mix")
    g.add_argument("--checkpoint")
    g.add_argument("--out")
    g = sub.add_parser("pretrain", parents=[common], help="train the base model on the defected corpus")
    g.add_argument("--out")
    g = sub.add_parser("score", parents=[common], help="score a dataset under the target dimensions")
    g.add_argument("--dataset")
    g = sub.add_parser("finetune", parents=[common], help="fine-tune with the configured strategy")
    g.add_argument("--checkpoint")
    g.add_argument("--dataset")
    g.add_argument("--out")
    g = sub.add_parser("eval", parents=[common], help="benchmark a checkpoint on every dimension")
    g.add_argument("--checkpoint")
    g.add_argument("--dataset")
    g = sub.add_parser("ablate", parents=[common], help="run an ablation table")
    g.add_argument("mode", choices=("data", "strategy", "combined"))
    g.add_argument("--checkpoint")
    g.add_argument("--dataset")
    g = sub.add_parser("render", parents=[common], help="write PGM frames of a record or an oracle video")
    g.add_argument("--record", type=int)
    g.add_argument("--dimension")
    g.add_argument("--dataset")
    g.add_argument("--resolution", type=int, default=64)
    g.add_argument("--out")
    return p


def _dispatch(args, cfg, run):
    w = args.workers
    if args.command == "gen-data":
        return cmd_gen_data(cfg, run, args.checkpoint, w, args.out)
    if args.command == "pretrain":
        return cmd_pretrain(cfg, run, w, args.out)
    if args.command == "score":
        return cmd_score(cfg, run, args.dataset, w)
    if args.command == "finetune":
        return cmd_finetune(cfg, run, args.checkpoint, args.dataset, w, args.out)
    if args.command == "eval":
        return cmd_eval(cfg, run, args.checkpoint, args.dataset, w)
    if args.command == "ablate":
        return cmd_ablate(cfg, run, args.mode, args.checkpoint, args.dataset, w)
    return cmd_render(cfg, run, args.record, args.dimension, args.dataset, args.resolution, args.out)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.overrides)
        return _dispatch(args, cfg, RunDir(args.run))
    except ConfigError as exc:
        print(f"config error at {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingInputError, pe.MissingModelError) as exc:
        print(f"missing input: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except FloatingPointError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, vm.CheckpointError, ValueError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
