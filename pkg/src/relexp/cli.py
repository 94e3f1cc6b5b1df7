"""Command-line interface.

Every subcommand writes a manifest.yaml into its output directory that
captures all inputs, options, and seeds; `relexp replay MANIFEST --out D`
re-executes the run and reproduces the report files byte for byte
(timing.yaml, which records wall-clock, is the one exception).

Exit codes: 0 success, 2 config error, 3 data error, 4 runtime failure.
"""

from __future__ import annotations

import functools
import sys
import time
from pathlib import Path

import click

from . import __version__
from .errors import (
    ConfigError,
    DomainError,
    ImpossiblePerturbation,
    InsufficientClassMembers,
    InsufficientData,
    NotFound,
    ParseError,
    RelexpError,
    SchemaViolation,
    SpaceTooLarge,
)
from .treeio import dump_tree, load_tree

_CONFIG_ERRORS = (ConfigError,)
_DATA_ERRORS = (ParseError, SchemaViolation, NotFound, InsufficientData, InsufficientClassMembers)
_RUNTIME_ERRORS = (DomainError, ImpossiblePerturbation, SpaceTooLarge)


def _exit_codes(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except _CONFIG_ERRORS as exc:
            click.echo(f"config error: {exc}", err=True)
            sys.exit(2)
        except _DATA_ERRORS as exc:
            click.echo(f"data error: {exc}", err=True)
            sys.exit(3)
        except _RUNTIME_ERRORS as exc:
            click.echo(f"runtime failure: {exc}", err=True)
            sys.exit(4)
        except RelexpError as exc:
            click.echo(f"failure: {exc}", err=True)
            sys.exit(4)

    return wrapper


@click.group()
@click.version_option(__version__)
def main():
    """Explain relational GNN models as SQL view definitions."""


# ---------------------------------------------------------------------------
# gen
# ---------------------------------------------------------------------------

def _run_gen(planted_cfg_dict: dict, out: str) -> None:
    from .planted import PlantedConfig, generate_planted

    cfg = PlantedConfig.from_dict(planted_cfg_dict)
    t0 = time.perf_counter()
    generate_planted(cfg, out)
    manifest = {"command": "gen", "version": __version__, "planted_config": cfg.to_dict()}
    dump_tree(manifest, Path(out) / "manifest.yaml")
    dump_tree({"gen": round(time.perf_counter() - t0, 6)}, Path(out) / "timing.yaml")


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True), default=None,
              help="Planted-database config (YAML).")
@click.option("--seed", type=int, default=None, help="Override the config seed.")
@click.option("--out", required=True, type=click.Path(), help="Output directory.")
@_exit_codes
def gen(config_path, seed, out):
    """Generate a planted-signal synthetic database."""
    data = load_tree(config_path) if config_path else {}
    if seed is not None:
        data["seed"] = seed
    _run_gen(data, out)
    click.echo(f"wrote schema.yaml, data/, truth.yaml under {out}")


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _run_train(schema_file: str, data_dir: str, train_cfg_dict: dict, out: str) -> dict:
    from .experiment import train_config_from_dict
    from .model import save_checkpoint, train
    from .relstore import load_csv_database

    cfg = train_config_from_dict(train_cfg_dict)
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    schema, db = load_csv_database(schema_file, data_dir)
    result = train(schema, db, cfg)
    elapsed = time.perf_counter() - t0
    save_checkpoint(result.params, out_dir / "model.ckpt")
    metrics = dict(result.metrics)
    metrics["split_sizes"] = {k: int(len(v)) for k, v in result.split.items()}
    dump_tree(metrics, out_dir / "metrics.yaml")
    manifest = {
        "command": "train",
        "version": __version__,
        "inputs": {
            "schema": str(Path(schema_file).resolve()),
            "data": str(Path(data_dir).resolve()),
        },
        "train_config": train_cfg_dict,
    }
    dump_tree(manifest, out_dir / "manifest.yaml")
    dump_tree({"train": round(elapsed, 6)}, out_dir / "timing.yaml")
    return metrics


@main.command()
@click.option("--schema", "schema_file", required=True, type=click.Path(exists=True))
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True))
@click.option("--config", "config_path", type=click.Path(exists=True), default=None,
              help="Training config (YAML of TrainConfig fields).")
@click.option("--seed", type=int, default=None, help="Override the config seed.")
@click.option("--out", required=True, type=click.Path())
@_exit_codes
def train(schema_file, data_dir, config_path, seed, out):
    """Train the hetero-GNN and save a checkpoint."""
    data = load_tree(config_path) if config_path else {}
    if seed is not None:
        data["seed"] = seed
    metrics = _run_train(schema_file, data_dir, data, out)
    click.echo(f"{metrics['metric']}: val={metrics['val']:.4f} test={metrics['test']:.4f}")


# ---------------------------------------------------------------------------
# explain
# ---------------------------------------------------------------------------

def _run_explain(manifest_args: dict, out: str) -> dict:
    from .experiment import ExperimentConfig, mask_config_from_dict, run_experiment

    cfg = ExperimentConfig(
        schema_file=manifest_args["inputs"]["schema"],
        data_dir=manifest_args["inputs"]["data"],
        checkpoint=manifest_args["inputs"]["model"],
        truth_file=manifest_args["inputs"].get("truth"),
        out_dir=out,
        mask=mask_config_from_dict(manifest_args.get("mask_config", {})),
        **manifest_args["options"],
    )
    return run_experiment(cfg)


@main.command()
@click.option("--schema", "schema_file", required=True, type=click.Path(exists=True))
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True))
@click.option("--model", "checkpoint", required=True, type=click.Path(exists=True))
@click.option("--method", required=True)
@click.option("--config", "config_path", type=click.Path(exists=True), default=None,
              help="Mask-training config (YAML of MaskTrainConfig fields).")
@click.option("--k", type=int, default=None, help="Explanation size for ranking/greedy/random/oracle.")
@click.option("--language", default=None, help="Language for empty/oracle methods.")
@click.option("--perm-family", default="ind", type=click.Choice(["ind", "joint"]))
@click.option("--fk-family", default="uniform", type=click.Choice(["uniform", "freq"]))
@click.option("--samples", "n_samples", type=int, default=5)
@click.option("--train-instances", type=int, default=100)
@click.option("--eval-instances", type=int, default=100)
@click.option("--seed", type=int, default=0)
@click.option("--truth", "truth_file", type=click.Path(exists=True), default=None,
              help="Planted manifest for recovery scoring.")
@click.option("--out", required=True, type=click.Path())
@_exit_codes
def explain(schema_file, data_dir, checkpoint, method, config_path, k, language,
            perm_family, fk_family, n_samples, train_instances, eval_instances,
            seed, truth_file, out):
    """Discover an explanation with the chosen method and evaluate it."""
    mask_cfg = load_tree(config_path) if config_path else {}
    args = {
        "inputs": {
            "schema": schema_file,
            "data": data_dir,
            "model": checkpoint,
            "truth": truth_file,
        },
        "options": {
            "method": method,
            "k": k,
            "language": language,
            "perm_family": perm_family,
            "fk_family": fk_family,
            "n_samples": n_samples,
            "n_train_instances": train_instances,
            "n_eval_instances": eval_instances,
            "seed": seed,
        },
        "mask_config": mask_cfg,
    }
    summary = _run_explain(args, out)
    click.echo(
        f"{summary['method']}: language={summary['language']} cost={summary['cost']} "
        f"dev={summary['dev_mean']:.4f} (sd {summary['dev_sd']:.4f})"
    )


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

def _run_evaluate(args: dict, out: str) -> dict:
    from .determinacy import estimate_dev, sample_instances
    from .explang import load_explanation
    from .model import load_checkpoint
    from .perturb import PerturbationSpec
    from .relstore import Task, load_csv_database

    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    schema, db = load_csv_database(args["inputs"]["schema"], args["inputs"]["data"])
    params = load_checkpoint(args["inputs"]["model"])
    e = load_explanation(args["inputs"]["explanation"])
    e.validate(schema)
    opts = args["options"]
    balanced = schema.task is Task.BINARY_CLASSIFICATION
    rows = sample_instances(db, schema.task, opts["n_instances"], balanced, opts["seed"] + 1)
    spec = PerturbationSpec(opts["perm_family"], opts["fk_family"], opts["seed"])
    report = estimate_dev(
        params, schema, db, e, spec, rows, opts["n_samples"], opts["hard_label"]
    )
    report.save(out_dir / "devreport.yaml")
    report.save_csv(out_dir / "devreport.csv")
    manifest = {"command": "evaluate", "version": __version__}
    manifest.update(args)
    dump_tree(manifest, out_dir / "manifest.yaml")
    dump_tree({"evaluate": round(time.perf_counter() - t0, 6)}, out_dir / "timing.yaml")
    return {"dev_mean": report.overall_mean, "dev_sd": report.overall_sd}


@main.command()
@click.option("--schema", "schema_file", required=True, type=click.Path(exists=True))
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True))
@click.option("--model", "checkpoint", required=True, type=click.Path(exists=True))
@click.option("--explanation", "explanation_file", required=True, type=click.Path(exists=True))
@click.option("--perm-family", default="ind", type=click.Choice(["ind", "joint"]))
@click.option("--fk-family", default="uniform", type=click.Choice(["uniform", "freq"]))
@click.option("--samples", "n_samples", type=int, default=5)
@click.option("--instances", "n_instances", type=int, default=100)
@click.option("--hard-label", is_flag=True, default=False,
              help="0/1 label-identity distance instead of probability difference.")
@click.option("--seed", type=int, default=0)
@click.option("--out", required=True, type=click.Path())
@_exit_codes
def evaluate(schema_file, data_dir, checkpoint, explanation_file, perm_family,
             fk_family, n_samples, n_instances, hard_label, seed, out):
    """Estimate the deviation from determinacy of a stored explanation."""
    args = {
        "inputs": {
            "schema": schema_file,
            "data": data_dir,
            "model": checkpoint,
            "explanation": explanation_file,
        },
        "options": {
            "perm_family": perm_family,
            "fk_family": fk_family,
            "n_samples": n_samples,
            "n_instances": n_instances,
            "hard_label": hard_label,
            "seed": seed,
        },
    }
    result = _run_evaluate(args, out)
    click.echo(f"dev={result['dev_mean']:.4f} (sd {result['dev_sd']:.4f})")


# ---------------------------------------------------------------------------
# retrain
# ---------------------------------------------------------------------------

def _run_retrain(args: dict, out: str) -> dict:
    from .experiment import retrain_reduced, train_config_from_dict
    from .explang import load_explanation
    from .relstore import load_csv_database

    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    schema, db = load_csv_database(args["inputs"]["schema"], args["inputs"]["data"])
    e = load_explanation(args["inputs"]["explanation"])
    cfg = train_config_from_dict(args.get("train_config", {}))
    report = retrain_reduced(schema, db, e, cfg)
    dump_tree(report.to_dict(), out_dir / "retrain.yaml")
    manifest = {"command": "retrain", "version": __version__}
    manifest.update(args)
    dump_tree(manifest, out_dir / "manifest.yaml")
    dump_tree({"retrain": round(time.perf_counter() - t0, 6)}, out_dir / "timing.yaml")
    return report.to_dict()


@main.command()
@click.option("--schema", "schema_file", required=True, type=click.Path(exists=True))
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True))
@click.option("--explanation", "explanation_file", required=True, type=click.Path(exists=True))
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--out", required=True, type=click.Path())
@_exit_codes
def retrain(schema_file, data_dir, explanation_file, config_path, seed, out):
    """Retrain on the reduced database and compare with the full model."""
    train_cfg = load_tree(config_path) if config_path else {}
    if seed is not None:
        train_cfg["seed"] = seed
    args = {
        "inputs": {"schema": schema_file, "data": data_dir, "explanation": explanation_file},
        "train_config": train_cfg,
    }
    result = _run_retrain(args, out)
    click.echo(
        f"{result['metric']}: full={result['full_perf']:.4f} "
        f"reduced={result['reduced_perf']:.4f} diff={result['diff']:+.4f} "
        f"size_reduction={result['size_reduction']:.2%}"
    )


# ---------------------------------------------------------------------------
# emit-sql
# ---------------------------------------------------------------------------

def _run_emit_sql(args: dict, out: str | None) -> str:
    from .explang import explanation_sql, load_explanation
    from .relstore import parse_schema_descriptor

    schema = parse_schema_descriptor(load_tree(args["inputs"]["schema"]))
    e = load_explanation(args["inputs"]["explanation"])
    e.validate(schema)
    text = "".join(s + ";\n" for s in explanation_sql(e, schema))
    if out:
        out_dir = Path(out)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "explanation.sql").write_text(text, encoding="utf-8")
        manifest = {"command": "emit-sql", "version": __version__}
        manifest.update(args)
        dump_tree(manifest, out_dir / "manifest.yaml")
    return text


@main.command("emit-sql")
@click.option("--schema", "schema_file", required=True, type=click.Path(exists=True))
@click.option("--explanation", "explanation_file", required=True, type=click.Path(exists=True))
@click.option("--out", type=click.Path(), default=None, help="Directory for explanation.sql; stdout if omitted.")
@_exit_codes
def emit_sql(schema_file, explanation_file, out):
    """Render the SQL view definitions of a stored explanation."""
    args = {"inputs": {"schema": schema_file, "explanation": explanation_file}}
    text = _run_emit_sql(args, out)
    if not out:
        click.echo(text, nl=False)


# ---------------------------------------------------------------------------
# oracle
# ---------------------------------------------------------------------------

@main.command()
@click.option("--schema", "schema_file", required=True, type=click.Path(exists=True))
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True))
@click.option("--model", "checkpoint", required=True, type=click.Path(exists=True))
@click.option("--language", default="projection")
@click.option("--k", type=int, required=True)
@click.option("--perm-family", default="ind", type=click.Choice(["ind", "joint"]))
@click.option("--fk-family", default="uniform", type=click.Choice(["uniform", "freq"]))
@click.option("--samples", "n_samples", type=int, default=5)
@click.option("--eval-instances", type=int, default=100)
@click.option("--seed", type=int, default=0)
@click.option("--truth", "truth_file", type=click.Path(exists=True), default=None)
@click.option("--out", required=True, type=click.Path())
@_exit_codes
def oracle(schema_file, data_dir, checkpoint, language, k, perm_family, fk_family,
           n_samples, eval_instances, seed, truth_file, out):
    """Exhaustively search tiny explanation spaces (test oracle)."""
    args = {
        "inputs": {
            "schema": schema_file,
            "data": data_dir,
            "model": checkpoint,
            "truth": truth_file,
        },
        "options": {
            "method": "oracle",
            "k": k,
            "language": language,
            "perm_family": perm_family,
            "fk_family": fk_family,
            "n_samples": n_samples,
            "n_train_instances": eval_instances,
            "n_eval_instances": eval_instances,
            "seed": seed,
        },
        "mask_config": {},
    }
    summary = _run_explain(args, out)
    click.echo(f"oracle optimum: cost={summary['cost']} dev={summary['dev_mean']:.4f}")


# ---------------------------------------------------------------------------
# replay
# ---------------------------------------------------------------------------

@main.command()
@click.argument("manifest_path", type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@_exit_codes
def replay(manifest_path, out):
    """Re-execute a run from its manifest; reports are byte-identical."""
    manifest = load_tree(manifest_path)
    command = manifest.get("command")
    if command == "gen":
        _run_gen(manifest["planted_config"], out)
    elif command == "train":
        _run_train(
            manifest["inputs"]["schema"], manifest["inputs"]["data"],
            manifest.get("train_config", {}), out,
        )
    elif command in ("explain",):
        _run_explain(manifest, out)
    elif command == "evaluate":
        _run_evaluate(manifest, out)
    elif command == "retrain":
        _run_retrain(manifest, out)
    elif command == "emit-sql":
        _run_emit_sql(manifest, out)
    else:
        raise ConfigError(f"manifest has unknown command {command!r}")
    click.echo(f"replayed {command} into {out}")


if __name__ == "__main__":
    main()
