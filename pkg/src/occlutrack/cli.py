"""Command-line entry point: ``occlutrack <subcommand> ...``.

Every subcommand writes into ``--out DIR`` and leaves a ``manifest.json`` next
to its artifacts recording the seed, config hash and variant flags. Reruns
with the same arguments reproduce every file byte for byte.

Exit codes: 0 success, 1 usage or input error, 2 invariant violation,
3 acceptance-threshold failure.
"""
from __future__ import annotations

import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional

import click

from . import gradcheck as gc
from . import metrics, motio, suite
from .config import ConfigError, RunConfig, defaults_table
from .sim import dropout_law, generate, render_frame
from .tensor import ShapeError
from .tracker import run_sequence
from .trainer import TrainingDiverged, fit, fit_attention
from .weights import Model, WeightStore, load_default_model

log = logging.getLogger("occlutrack")

EXIT_OK, EXIT_USAGE, EXIT_INVARIANT, EXIT_ACCEPTANCE = 0, 1, 2, 3
DRIFT_MARGIN = 0.15


class AcceptanceFailure(Exception):
    pass


# ---------------------------------------------------------------- helpers


def _flags(ta: str, da: str, memory: str, adaptive: str) -> dict[str, bool]:
    return {"use_ta": ta == "on", "use_da": da == "on", "use_memory": memory == "on",
            "adaptive_weight": adaptive == "on"}


def variant_name(flags: dict[str, bool]) -> str:
    """Name of the ablation row these flags select, or ``custom``."""
    full = {"use_ta": True, "use_da": True, "use_memory": True, "adaptive_weight": True}
    for name, delta in suite.ALL_VARIANTS.items():
        if {**full, **delta} == flags:
            return name
    return "custom"


def _load_model(weights: Optional[str]) -> tuple[Model, str]:
    if weights:
        store = WeightStore.load(weights)
        return Model.from_store(store), store.digest()
    model = load_default_model()
    return model, model.to_store().digest()


def _write(out: Path, name: str, text: str) -> str:
    out.mkdir(parents=True, exist_ok=True)
    (out / name).write_text(text)
    return name


def _manifest(out: Path, command: str, cfg: RunConfig, config_path: Optional[str], seed: Optional[int],
              artifacts: list[str], **extra) -> None:
    doc = {"subcommand": command, "config": config_path, "config_hash": cfg.digest(), "seed": seed,
           "artifacts": sorted(artifacts), **extra}
    _write(out, "manifest.json", json.dumps(doc, indent=1, sort_keys=True) + "\n")


def variant_options(f):
    for name, help_ in (("--adaptive-weight", "occlusion-gated attention weight"),
                        ("--memory", "memory aggregation"), ("--da", "distractor attention"),
                        ("--ta", "target attention")):
        f = click.option(name, type=click.Choice(["on", "off"]), default="on", show_default=True, help=help_)(f)
    return f


config_option = click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
                             help="key = value config file (see `occlutrack defaults`)")
out_option = click.option("--out", required=True, type=click.Path(file_okay=False), help="output directory")


# ---------------------------------------------------------------- commands


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="log progress to stderr")
def cli(verbose: bool) -> None:
    """Occlusion-aware multi-object tracking on synthetic feature scenes."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(name)s: %(message)s")


@cli.command()
def defaults() -> None:
    """Print every config key with its default."""
    click.echo(defaults_table(), nl=False)


@cli.command()
@config_option
@click.option("--seed", type=int, default=0, show_default=True)
@out_option
def simulate(config_path, seed, out) -> None:
    """Generate one scenario as gt.txt, det.txt, seqinfo.ini and a JSON sidecar."""
    cfg = RunConfig.load(config_path)
    scen = generate(cfg.sim(), seed, dropout=dropout_law(cfg["sim.dropout"]))
    out = Path(out)
    motio.export_scenario(scen, out, meta={"config_hash": cfg.digest(), "seed": seed})
    arts = ["seqinfo.ini", "gt/gt.txt", "det/det.txt", motio.SIDECAR]
    _manifest(out, "simulate", cfg, config_path, seed, arts)
    click.echo(f"wrote scenario seed {seed} ({scen.frames} frames, {len(scen.objects)} objects) to {out}")


@cli.command()
@click.argument("scenario_dir", type=click.Path(exists=True, file_okay=False))
@config_option
@click.option("--seed", type=int, default=None, help="render-noise seed (default: the scenario's own)")
@click.option("--weights", type=click.Path(exists=True, dir_okay=False), help="WeightStore JSON (default: bundled)")
@variant_options
@out_option
def track(scenario_dir, config_path, seed, weights, ta, da, memory, adaptive_weight, out) -> None:
    """Track an exported scenario and write a MOTChallenge results file."""
    cfg = RunConfig.load(config_path)
    flags = _flags(ta, da, memory, adaptive_weight)
    scen = motio.import_scenario(scenario_dir)
    seed = scen.seed if seed is None else seed
    model, digest = _load_model(weights)
    frames = [render_frame(scen, t, seed=seed) for t in range(scen.frames)]
    outputs = run_sequence(model, cfg.tracker(**flags), frames, scen.detections)
    out = Path(out)
    arts = [_write(out, "results.txt", motio.write_results(outputs))]
    _manifest(out, "track", cfg, config_path, seed, arts, flags=flags, variant=variant_name(flags),
              weights_digest=digest, input=str(scenario_dir))
    click.echo(f"{len(outputs)} boxes over {scen.frames} frames -> {out / 'results.txt'}")


@cli.command(name="eval")
@click.argument("gt_file", type=click.Path(exists=True, dir_okay=False))
@click.argument("hyp_file", type=click.Path(exists=True, dir_okay=False))
@config_option
@click.option("--variant", default="run", show_default=True, help="label for the CSV rows")
@out_option
def eval_cmd(gt_file, hyp_file, config_path, variant, out) -> None:
    """CLEAR MOT, IDF1 and the occlusion profile of a results file."""
    cfg = RunConfig.load(config_path)
    thr = cfg["eval.iou_threshold"]
    gt = motio.parse_gt(Path(gt_file).read_text())
    hyp = motio.parse_results(Path(hyp_file).read_text())
    res = metrics.clear_mot(gt, hyp, thr)
    prof = metrics.occlusion_profile(gt, hyp, cfg["eval.bins"], thr)
    out = Path(out)
    arts = [_write(out, "eval.csv", metrics.eval_csv([(variant, res)])),
            _write(out, "occlusion.csv", metrics.occlusion_csv([(variant, prof)]))]
    _manifest(out, "eval", cfg, config_path, None, arts, gt=str(gt_file), hyp=str(hyp_file))
    click.echo(metrics.format_table(["variant", "MOTA", "IDF1", "FP", "FN", "IDS", "GT"],
                                    [[variant, res.mota, res.idf1, res.fp, res.fn, res.ids, res.gt_count]]),
               nl=False)


@cli.command()
@config_option
@click.option("--seed", type=int, default=0, show_default=True, help="first scenario seed of the suite")
@click.option("--weights", type=click.Path(exists=True, dir_okay=False), help="WeightStore JSON (default: bundled)")
@click.option("--variant-all", is_flag=True, help="run every ablation row plus the all-disabled baseline")
@variant_options
@out_option
def ablate(config_path, seed, weights, variant_all, ta, da, memory, adaptive_weight, out) -> None:
    """Run tracker variants over the seeded crossing suite and compare metrics.

    With --variant-all the command exits 3 unless the full model has the
    strictly highest MOTA of the six ablation rows and beats the disabled
    baseline's tracked-through rate by at least 15 points.
    """
    cfg = RunConfig.load(config_path)
    model, digest = _load_model(weights)
    scenarios = suite.crossing_suite(cfg["suite.scenarios"], seed, (cfg["suite.peak_low"], cfg["suite.peak_high"]),
                                     cfg.sim())
    base = cfg.tracker()
    if variant_all:
        flags = None
        configs = {n: suite.variant_config(n, base) for n in suite.ALL_VARIANTS}
    else:
        flags = _flags(ta, da, memory, adaptive_weight)
        configs = {variant_name(flags): replace(base, **flags)}
    names = list(configs)
    reports = suite.run_configs(model, scenarios, configs)
    rows = [(n, r.result) for n, r in reports.items()]
    out = Path(out)
    drift = "variant,tracked,total,rate\n" + "".join(
        f"{n},{r.through},{r.total},{r.through_rate:.6f}\n" for n, r in reports.items())
    arts = [_write(out, "ablation.csv", metrics.eval_csv(rows)),
            _write(out, "occlusion.csv", metrics.occlusion_csv([(n, r.profile) for n, r in reports.items()])),
            _write(out, "drift.csv", drift)]
    _manifest(out, "ablate", cfg, config_path, seed, arts, flags=flags, variants=names, weights_digest=digest)
    click.echo(metrics.format_table(
        ["variant", "MOTA", "IDF1", "FP", "FN", "IDS", "through"],
        [[n, r.result.mota, r.result.idf1, r.result.fp, r.result.fn, r.result.ids, r.through_rate]
         for n, r in reports.items()]), nl=False)
    if variant_all:
        problems = ablation_problems(reports)
        if problems:
            raise AcceptanceFailure("; ".join(problems))


def ablation_problems(reports: dict) -> list[str]:
    """Failed ablation checks, empty when the full model wins as required."""
    problems = []
    full = reports["full"].result.mota
    rivals = [n for n in suite.VARIANTS if n != "full" and reports[n].result.mota >= full]
    if rivals:
        problems.append(f"full model MOTA {full:.4f} not strictly above {', '.join(rivals)}")
    gain = reports["full"].through_rate - reports["disabled"].through_rate
    if gain < DRIFT_MARGIN:
        problems.append(f"tracked-through gain {gain:.3f} below {DRIFT_MARGIN}")
    return problems


@cli.command()
@click.option("--seed", type=int, default=0, show_default=True, help="first of the 20 probe seeds")
@click.option("--epsilon", type=float, default=gc.EPSILON, show_default=True)
@out_option
def gradcheck(seed, epsilon, out) -> None:
    """Central finite-difference check of every differentiable op."""
    results = gc.run_all(range(seed, seed + 20), epsilon)
    out = Path(out)
    csv = "op,max_rel_error,seeds,status\n" + "".join(
        f"{r.op},{r.max_error:.3e},{r.seeds},{'pass' if r.ok else 'FAIL'}\n" for r in results)
    arts = [_write(out, "gradcheck.csv", csv)]
    _manifest(out, "gradcheck", RunConfig(), None, seed, arts, epsilon=epsilon, tolerance=gc.TOLERANCE)
    click.echo(metrics.format_table(["op", "max error", "status"],
                                    [[r.op, f"{r.max_error:.2e}", "pass" if r.ok else "FAIL"] for r in results]),
               nl=False)
    failed = [r.op for r in results if not r.ok]
    if failed:
        raise AcceptanceFailure(f"gradient check above {gc.TOLERANCE}: {', '.join(failed)}")


@cli.command(name="train-embed")
@config_option
@click.option("--seed", type=int, default=0, show_default=True)
@out_option
def train_embed(config_path, seed, out) -> None:
    """Train the embedding/memory network (then attention) and save the weights."""
    cfg = RunConfig.load(config_path)
    model, curve, _ = fit(cfg.train(seed))
    att_cfg = cfg.attention_train(seed)
    model, att_curve = fit_attention(model, att_cfg)
    out = Path(out)
    arts = [_write(out, "weights.json", model.to_store().to_json()),
            _write(out, "loss.csv", curve.to_csv())]
    if att_cfg.steps:
        arts.append(_write(out, "attention_loss.csv",
                           "step,loss\n" + "".join(f"{k},{v:.10g}\n" for k, v in enumerate(att_curve))))
    _manifest(out, "train-embed", cfg, config_path, seed, arts, weights_digest=model.to_store().digest())
    last = curve.rows[-1] if curve.rows else None
    click.echo(f"trained {len(curve.rows)} steps" + (f", final ce {last[1]:.4f} triplet {last[2]:.4f}" if last else ""))


# ---------------------------------------------------------------- entry point


def main(argv: Optional[list[str]] = None) -> int:
    try:
        cli.main(args=argv, prog_name="occlutrack", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return EXIT_USAGE
    except click.ClickException as exc:
        exc.show()
        return EXIT_USAGE
    except (ConfigError, motio.FormatError, FileNotFoundError, KeyError) as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_USAGE
    except AcceptanceFailure as exc:
        click.echo(f"acceptance check failed: {exc}", err=True)
        return EXIT_ACCEPTANCE
    except (ShapeError, TrainingDiverged, FloatingPointError, ValueError, AssertionError) as exc:
        click.echo(f"invariant violated: {exc}", err=True)
        return EXIT_INVARIANT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
