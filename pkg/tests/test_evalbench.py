import csv
import io
import json

import numpy as np
import pytest

from flowforge import evalbench as eb
from flowforge import flowmatch as fm
from flowforge import promptengine as pe
from flowforge import rewardlab as rl
from flowforge import trainer as tr
from flowforge import worldsim as ws
from flowforge._util import derive_seed
from flowforge.dims import DIMENSIONS, LATENT_DIM, RewardScore

from _fixtures import make_records, small_model

QUICK = eb.EvalConfig(prompts_per_dimension=4, samples_per_prompt=1, sampler=fm.SamplerConfig(steps=2))
TINY_MIX = pe.DataMixConfig(counts={"PsVs": 6, "PrVs": 4, "PrVr": 4})
TINY_TRAIN = tr.TrainConfig(draws=2)


def oracle_replay(spec, seed):
    return ws.encode(ws.simulate(spec, seed))


def dark(spec, seed):
    # a = -1 decodes to intensity 0
    z = np.zeros((16, 3, 4))
    z[..., 3] = -1.0
    return z.reshape(-1)


def test_oracle_replay_scores_near_perfect():
    for d, res in eb.evaluate(oracle_replay).items():
        assert res.mean_score_percent >= 99, d
        assert res.n_invalid == 0


def test_dark_stub_scores_zero_on_instance():
    res = eb.eval_dimension(dark, "instance_preservation")
    assert res.mean_score_percent == 0.0 and res.n_scored == 64


def test_evaluation_is_deterministic():
    p = small_model(2)
    assert eb.evaluate(p, QUICK) == eb.evaluate(p, QUICK)


def test_eval_seeds_are_disjoint_from_training():
    train = {derive_seed(s, "PsVs", d) for s in range(50) for d in DIMENSIONS}
    held = {eb.eval_prompt_seed(s, d) for s in range(50) for d in DIMENSIONS}
    assert not train & held
    eval_specs = pe.gen_base_prompts("motion_rationality", 32, eb.eval_prompt_seed(0, "motion_rationality"))
    train_specs = pe.synthetic_specs(("motion_rationality",), 950, 4, 0)
    assert not {s.layout_seed for s in eval_specs} & {s.layout_seed for s in train_specs}


def test_flags():
    res = {"camera_motion": eb.DimensionResult("camera_motion", 50.0, 10, 30),
           "motion_rationality": eb.DimensionResult("motion_rationality", 70.0, 40, 0)}
    t = eb.eval_table(res, scarcity={"camera_motion": 0.2, "motion_rationality": 1.0})
    flags = dict(zip(t.column("dimension"), t.column("flag")))
    assert flags == {"camera_motion": "mostly-invalid;scarce-data", "motion_rationality": ""}
    assert len(t.notes) == 2


def test_scorable_fraction():
    recs = make_records(2, 0)
    assert eb.scorable_fraction(recs, "motion_rationality") == 1.0
    assert eb.scorable_fraction([], "camera_motion") == 0.0


def _table():
    t = eb.Table("demo", ["name", "score", "ok", "sources"])
    t.add("offline", 80.666, True, ("PsVs", "PrVr"))
    t.add('needs, "quotes"', 75.0, False, ())
    t.notes.append("scores in percent")
    t.meta = {"seed": 1}
    return t


def test_emit_report_csv(tmp_path):
    path = str(tmp_path / "r")
    files = eb.emit_report([_table()], path, "csv")
    assert files == [path + ".csv", path + ".manifest.json"]
    raw = open(files[0], "rb").read()
    assert b"80.67" in raw and b"\r\n" in raw
    rows = list(csv.reader(io.StringIO(raw.decode(), newline="")))
    assert rows[2] == ["offline", "80.67", "yes", "PsVs+PrVr"]
    assert rows[3] == ['needs, "quotes"', "75.00", "no", "none"]
    assert json.load(open(files[1])) == {"demo": {"seed": 1}}
    eb.emit_report([_table()], str(tmp_path / "s"), "csv")
    assert open(str(tmp_path / "s.csv"), "rb").read() == raw


def test_emit_report_markdown_and_errors(tmp_path):
    path = eb.emit_report([_table()], str(tmp_path / "r.md"), "markdown")[0]
    text = open(path).read()
    assert path.endswith("r.md") and "| offline | 80.67 | yes | PsVs+PrVr |" in text
    with pytest.raises(ValueError):
        eb.emit_report([], str(tmp_path / "x"))
    with pytest.raises(ValueError):
        eb.emit_report([_table()], str(tmp_path / "x"), "html")
    with pytest.raises(ValueError):
        _table().add(1, 2)


def test_fmt_cell_rounding():
    assert eb.fmt_cell(80.666) == "80.67" and eb.fmt_cell(np.float64(0.005)) == "0.01"
    assert eb.fmt_cell(3) == "3" and eb.fmt_cell(None) == ""


def test_ablate_data_sources_shape():
    base = small_model(3)
    t = eb.ablate_data_sources(base, train_cfg=TINY_TRAIN, mix=TINY_MIX, eval_cfg=QUICK)
    assert t.column("sources") == [tuple(m) for m in eb.DATA_MIX_ROWS]
    assert t.column("n_records") == [0, 6, 4, 10, 8, 14]
    base_score = eb.eval_dimension(base, "motion_rationality", QUICK).mean_score_percent
    assert t.rows[0][2] == base_score and t.rows[0][4] == 0.0


def test_ablate_strategies_rows():
    recs = make_records(4, 4, rewards=[0.9, 0.0, 0.5, 1.0, 0.3, 0.7, 0.0, 0.8])
    t = eb.ablate_strategies(small_model(4), recs, train_cfg=TINY_TRAIN, eval_cfg=QUICK)
    assert t.column("strategy") == list(tr.STRATEGIES)
    assert all(np.isfinite(v) for v in t.column("score"))
    used = dict(zip(t.column("strategy"), t.column("n_used")))
    assert used["sft"] == 8 and used["sft_filtered"] == 6


def test_ablate_combined_single_member_group_matches_single():
    tables = eb.ablate_combined(small_model(5), {"solo": ("motion_rationality",)}, TINY_TRAIN, TINY_MIX, QUICK)
    (t,) = tables
    assert t.columns == ["setting", "motion_rationality", "mean"]
    assert t.column("setting") == ["baseline", "single", "combined"]
    assert t.rows[1][1:] == t.rows[2][1:]


def test_ablate_combined_rejects_bad_groups():
    with pytest.raises(ValueError):
        eb.ablate_combined(small_model(), {"g": ()}, TINY_TRAIN, TINY_MIX, QUICK)
    with pytest.raises(ValueError):
        eb.ablate_combined(small_model(), {"g": ("colour",)}, TINY_TRAIN, TINY_MIX, QUICK)


@pytest.mark.slow
def test_clean_pretrain_ceiling_on_motion_and_headroom(pretrained):
    clean = eb.evaluate(pretrained(0, rate=0.0))
    defected = eb.evaluate(pretrained(0))
    for d in ("motion_rationality", "instance_preservation"):
        assert clean[d].mean_score_percent >= 90, d
    assert clean["motion_rationality"].mean_score_percent - defected["motion_rationality"].mean_score_percent >= 10


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="gravity and spatial plateau near 65 at desk scale")
def test_clean_pretrain_ceiling_on_every_dimension(pretrained):
    clean = eb.evaluate(pretrained(0, rate=0.0))
    low = {d: r.mean_score_percent for d, r in clean.items() if r.mean_score_percent < 90}
    assert not low, low
