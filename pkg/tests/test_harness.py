import numpy as np
import pytest
from click.testing import CliRunner

from relexp.cli import main
from relexp.errors import ConfigError
from relexp.experiment import (
    ExperimentConfig,
    recovery_report,
    reduce_database,
    retrain_reduced,
    run_experiment,
    size_reduction,
)
from relexp.explang import (
    AtomicPredicate,
    Explanation,
    Language,
    SelectionView,
    empty_explanation,
    full_projection,
    projection_of,
)
from relexp.model import TrainConfig, train
from relexp.planted import PlantedConfig, PlantedTruth, generate_planted, make_planted
from relexp.relstore import validate_database
from relexp.search import MaskTrainConfig
from relexp.treeio import dump_tree, load_tree

FAST_TRAIN = {"epochs": 10, "layers": 1, "lr": 0.02, "patience": 5, "seed": 0}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("ws")
    cfg = PlantedConfig(n_relations=3, rows_target=160, rows_satellite=60, seed=7)
    generate_planted(cfg, root / "d")
    runner = CliRunner()
    res = runner.invoke(main, [
        "train", "--schema", str(root / "d" / "schema.yaml"),
        "--data", str(root / "d" / "data"), "--out", str(root / "m"),
        "--config", _write_cfg(root, "train.yaml", FAST_TRAIN),
    ])
    assert res.exit_code == 0, res.output
    return root


def _write_cfg(root, name, data) -> str:
    dump_tree(data, root / name)
    return str(root / name)


def _experiment(root, method, **kw):
    out = root / f"out_{method}_{kw.get('tag', '')}"
    kw.pop("tag", None)
    cfg = ExperimentConfig(
        schema_file=str(root / "d" / "schema.yaml"),
        data_dir=str(root / "d" / "data"),
        checkpoint=str(root / "m" / "model.ckpt"),
        method=method,
        out_dir=str(out),
        truth_file=str(root / "d" / "truth.yaml"),
        mask=MaskTrainConfig(epochs=25, seed=0),
        n_train_instances=40,
        n_eval_instances=40,
        n_samples=3,
        **kw,
    )
    return run_experiment(cfg), out


def test_run_experiment_column_mask(workspace):
    summary, out = _experiment(workspace, "column-mask")
    assert (out / "explanation.yaml").exists()
    assert (out / "explanation.sql").exists()
    assert (out / "devreport.yaml").exists()
    assert (out / "devreport.csv").exists()
    assert (out / "trace.csv").exists()
    assert (out / "recovery.yaml").exists()
    assert (out / "manifest.yaml").exists()
    assert (out / "timing.yaml").exists()
    assert summary["language"] == "projection"
    rec = load_tree(out / "recovery.yaml")
    assert rec["attrs"]["recall"] == 1.0


def test_run_experiment_empty(workspace):
    summary, out = _experiment(workspace, "empty")
    assert summary["cost"] == 0
    sql = (out / "explanation.sql").read_text()
    assert sql == ""
    # the empty explanation has maximal perturbation: dev is well above zero
    assert summary["dev_mean"] > 0.05


def test_run_experiment_ranking_and_oracle(workspace):
    s_li, _ = _experiment(workspace, "local-impact", k=1)
    assert s_li["cost"] == 1
    s_or, out = _experiment(workspace, "oracle", k=1)
    assert s_or["cost"] <= 1
    assert "n_candidates" in s_or
    rec = load_tree(out / "recovery.yaml")
    assert rec["attrs"]["precision"] == 1.0 and rec["attrs"]["recall"] == 1.0
    s_rand, _ = _experiment(workspace, "random", k=2)
    assert s_rand["cost"] == 2
    s_greedy, _ = _experiment(workspace, "greedy", k=1)
    assert s_greedy["cost"] == 1
    s_exp, _ = _experiment(workspace, "greedy-expansion", k=2)
    assert s_exp["language"] == "fkjoin"


def test_run_experiment_proj_select(workspace):
    summary, out = _experiment(workspace, "proj-select")
    assert summary["language"] == "proj-select"
    from relexp.explang import load_explanation

    e = load_explanation(out / "explanation.yaml")
    # composite invariant: every predicate attribute is projected
    for rel, view in e.selections.items():
        proj = set(e.projections[rel].data_attrs)
        assert {p.attr for p in view.disjuncts} <= proj


def test_experiment_config_validation(workspace):
    with pytest.raises(ConfigError):
        ExperimentConfig("s", "d", "m", "unknown-method", "o")
    with pytest.raises(ConfigError):
        ExperimentConfig("s", "d", "m", "greedy", "o")  # k missing


# ---------------------------------------------------------------------------
# Recovery scoring
# ---------------------------------------------------------------------------

def test_recovery_report_shapes():
    truth = PlantedTruth(
        attrs=[("r1", "x0")], fks=["fk_r0_r1"],
        predicates=[{"relation": "r1", "attr": "c0", "values": ["v0"]}],
        label_rule="", config={},
    )
    from relexp.explang import ProjectionView

    proj = Explanation(Language.PROJECTION, projections={"r1": ProjectionView("r1", ("x0", "x1"))})
    rec = recovery_report(proj, truth)
    assert rec["attrs"]["precision"] == 0.5 and rec["attrs"]["recall"] == 1.0
    empty = recovery_report(Explanation(Language.PROJECTION), truth)
    assert empty["attrs"]["precision"] is None and empty["attrs"]["recall"] == 0.0
    joins = recovery_report(Explanation(Language.FKJOIN, joins=("fk_r0_r1",)), truth)
    assert joins["fks"]["precision"] == 1.0 and joins["fks"]["recall"] == 1.0
    sel = Explanation(
        Language.SELECTION,
        selections={"r1": SelectionView("r1", (AtomicPredicate("r1", "c0", "eq", value="v0"),))},
    )
    rec_sel = recovery_report(sel, truth)
    assert rec_sel["predicates"]["recall"] == 1.0


# ---------------------------------------------------------------------------
# Reduced database + retrain
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def planted_small():
    schema, db, truth = make_planted(
        PlantedConfig(n_relations=3, rows_target=200, rows_satellite=70, seed=11)
    )
    return schema, db, truth


def test_reduce_projection_drops_columns(planted_small):
    schema, db, truth = planted_small
    e = projection_of(schema, set(map(tuple, truth.attrs)))
    red_schema, red_db = reduce_database(schema, db, e)
    assert validate_database(red_schema, red_db).ok()
    assert red_schema.relation("r1").attr_names == ("id", "x0")
    # label survives on the target even though nothing else was projected
    assert "label" in red_schema.relation("r0").attr_names
    assert set(red_schema.relation("r0").attr_names) >= {"id", "r1_id", "r2_id", "label"}


def test_reduce_fkjoin_drops_constraints_and_columns(planted_small):
    schema, db, truth = planted_small
    e = Explanation(Language.FKJOIN, joins=("fk_r0_r1",))
    red_schema, red_db = reduce_database(schema, db, e)
    assert [fk.id for fk in red_schema.fks] == ["fk_r0_r1"]
    assert "r2_id" not in red_schema.relation("r0").attr_names
    # data attrs of joined relations survive; the unjoined satellite is stripped
    assert "x0" in red_schema.relation("r1").attr_names
    assert "x0" not in red_schema.relation("r2").attr_names
    assert validate_database(red_schema, red_db).ok()


def test_reduce_selection_replaces_complement(planted_small):
    schema, db, truth = planted_small
    lo = float(np.nanquantile(db.relation("r1").columns["x0"].values, 0.5))
    hi = float(np.nanmax(db.relation("r1").columns["x0"].values))
    pred = AtomicPredicate("r1", "x0", "range", lo=lo, hi=hi)
    e = Explanation(Language.SELECTION, selections={"r1": SelectionView("r1", (pred,))})
    red_schema, red_db = reduce_database(schema, db, e, seed=3)
    assert red_schema.relation("r1").attr_names == schema.relation("r1").attr_names
    # selected tuples keep their cells; the complement was re-permuted
    mask = pred.satisfied(db)
    v_old = db.relation("r1").columns["x1"].values
    v_new = red_db.relation("r1").columns["x1"].values
    assert np.array_equal(v_old[mask], v_new[mask], equal_nan=True)


def test_size_reduction_values(planted_small):
    schema, db, truth = planted_small
    assert size_reduction(schema, db, empty_explanation(Language.PROJECTION)) == 1.0
    assert size_reduction(schema, db, full_projection(schema)) == 0.0
    e1 = projection_of(schema, set(map(tuple, truth.attrs)))
    total = sum(
        db.relation(r).n_rows * len(schema.explainable_attrs(r)) for r in schema.relations
    )
    kept = db.relation("r1").n_rows
    assert size_reduction(schema, db, e1) == pytest.approx(1.0 - kept / total)


def test_retrain_full_schema_is_noop(planted_small):
    schema, db, truth = planted_small
    cfg = TrainConfig(**FAST_TRAIN)
    full = train(schema, db, cfg)
    report = retrain_reduced(schema, db, full_projection(schema), cfg, full)
    assert report.diff == 0.0  # identical inputs, identical training
    assert report.size_reduction == 0.0


def test_retrain_truth_explanation(planted_small):
    schema, db, truth = planted_small
    cfg = TrainConfig(epochs=40, layers=1, lr=0.02, patience=10, seed=0)
    full = train(schema, db, cfg)
    e = projection_of(schema, set(map(tuple, truth.attrs)))
    report = retrain_reduced(schema, db, e, cfg, full)
    assert abs(report.diff) <= 0.05
    assert report.size_reduction > 0.5


# ---------------------------------------------------------------------------
# CLI behaviors
# ---------------------------------------------------------------------------

def test_cli_exit_codes(workspace):
    runner = CliRunner()
    root = workspace
    # config error: unknown method
    res = runner.invoke(main, [
        "explain", "--schema", str(root / "d" / "schema.yaml"),
        "--data", str(root / "d" / "data"),
        "--model", str(root / "m" / "model.ckpt"),
        "--method", "nonsense", "--out", str(root / "x1"),
    ])
    assert res.exit_code == 2
    # runtime failure: oracle space explosion
    big = root / "big"
    generate_planted(PlantedConfig(n_relations=2, rows_target=30, rows_satellite=10,
                                   n_numeric=13, n_categorical=0, seed=0), big)
    res2 = runner.invoke(main, [
        "train", "--schema", str(big / "schema.yaml"), "--data", str(big / "data"),
        "--config", _write_cfg(root, "fast.yaml", FAST_TRAIN), "--out", str(root / "bigm"),
    ])
    assert res2.exit_code == 0, res2.output
    res3 = runner.invoke(main, [
        "oracle", "--schema", str(big / "schema.yaml"), "--data", str(big / "data"),
        "--model", str(root / "bigm" / "model.ckpt"), "--k", "26",
        "--eval-instances", "5", "--out", str(root / "x2"),
    ])
    assert res3.exit_code == 4
    # data error: dangling FK in the CSVs
    bad = root / "bad"
    import shutil

    shutil.copytree(root / "d", bad)
    csv = bad / "data" / "r0.csv"
    lines = csv.read_text().splitlines()
    header = lines[0].split(",")
    col = header.index("r1_id")
    cells = lines[1].split(",")
    cells[col] = "99999.0"
    lines[1] = ",".join(cells)
    csv.write_text("\n".join(lines) + "\n")
    res4 = runner.invoke(main, [
        "train", "--schema", str(bad / "schema.yaml"), "--data", str(bad / "data"),
        "--out", str(root / "x3"),
    ])
    assert res4.exit_code == 3


def test_cli_gen_seed_override(tmp_path):
    runner = CliRunner()
    res = runner.invoke(main, ["gen", "--seed", "3", "--out", str(tmp_path / "g")])
    assert res.exit_code == 0, res.output
    manifest = load_tree(tmp_path / "g" / "manifest.yaml")
    assert manifest["planted_config"]["seed"] == 3


def test_cli_emit_sql_stdout(workspace, tmp_path):
    root = workspace
    schema_file = root / "d" / "schema.yaml"
    from relexp.explang import save_explanation
    from relexp.relstore import parse_schema_descriptor

    schema = parse_schema_descriptor(load_tree(schema_file))
    e = projection_of(schema, {("r1", "x0")})
    save_explanation(e, schema, tmp_path / "e.yaml")
    runner = CliRunner()
    res = runner.invoke(main, [
        "emit-sql", "--schema", str(schema_file), "--explanation", str(tmp_path / "e.yaml"),
    ])
    assert res.exit_code == 0
    assert res.output == "SELECT id, x0 FROM r1;\n"


def test_cli_replay_all_commands_byte_identical(workspace, tmp_path):
    """Every subcommand writes a manifest that reproduces its reports."""
    root = workspace
    runner = CliRunner()

    def compare(out1, out2):
        import pathlib

        for f in sorted(pathlib.Path(out1).iterdir()):
            if f.name == "timing.yaml" or f.is_dir():
                continue
            twin = pathlib.Path(out2) / f.name
            assert twin.exists(), f.name
            assert f.read_bytes() == twin.read_bytes(), f.name
        # data directories (gen) compare too
        d1 = pathlib.Path(out1) / "data"
        if d1.is_dir():
            for f in sorted(d1.iterdir()):
                assert f.read_bytes() == (pathlib.Path(out2) / "data" / f.name).read_bytes()

    # gen
    g1, g2 = tmp_path / "g1", tmp_path / "g2"
    assert runner.invoke(main, ["gen", "--seed", "5", "--out", str(g1)]).exit_code == 0
    assert runner.invoke(main, ["replay", str(g1 / "manifest.yaml"), "--out", str(g2)]).exit_code == 0
    compare(g1, g2)

    # train (fast config), then explain/evaluate/retrain/emit-sql replays
    explain_out = root / "rp_explain"
    res = runner.invoke(main, [
        "explain", "--schema", str(root / "d" / "schema.yaml"),
        "--data", str(root / "d" / "data"),
        "--model", str(root / "m" / "model.ckpt"),
        "--method", "random", "--k", "2",
        "--eval-instances", "20", "--samples", "2",
        "--out", str(explain_out),
    ])
    assert res.exit_code == 0, res.output
    res = runner.invoke(main, ["replay", str(explain_out / "manifest.yaml"), "--out", str(tmp_path / "rp2")])
    assert res.exit_code == 0, res.output
    compare(explain_out, tmp_path / "rp2")

    ev1 = root / "rp_eval"
    res = runner.invoke(main, [
        "evaluate", "--schema", str(root / "d" / "schema.yaml"),
        "--data", str(root / "d" / "data"),
        "--model", str(root / "m" / "model.ckpt"),
        "--explanation", str(explain_out / "explanation.yaml"),
        "--instances", "20", "--samples", "2", "--out", str(ev1),
    ])
    assert res.exit_code == 0, res.output
    assert runner.invoke(main, ["replay", str(ev1 / "manifest.yaml"), "--out", str(tmp_path / "ev2")]).exit_code == 0
    compare(ev1, tmp_path / "ev2")
