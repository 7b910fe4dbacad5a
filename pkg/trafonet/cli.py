from __future__ import annotations
import json
import logging
import sys
from pathlib import Path
from typing import Any, List, Optional, Sequence

import click

from . import __version__
from .config import SECTIONS, RunConfig, load_config
from .errors import ToolkitError, ValidationError
from .experiments import (
    GRADCHECK_TOL,
    evaluate_oltc_checkpoint,
    evaluate_rl_checkpoint,
    oracle_sweep,
    run_gradcheck,
    run_oltc_experiment,
    run_rl_benchmark,
    summarize_file,
    synth_config,
    train_rl,
)
from .oltc import add_noise, export_dataset, generate_dataset
from .seeding import derive_seed
from .storage import Storage
from .types import Algo, NoiseColor

log = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def _print_result(result: Any) -> None:
    if isinstance(result, list):
        if not result:
            click.echo("(0 rows)")
            return
        click.echo(json.dumps(result, indent=2))
        click.echo(f"({len(result)} rows)")
    elif isinstance(result, dict):
        click.echo(json.dumps(result, indent=2))
    else:
        click.echo(result)


def _config(ctx: click.Context, seed: Optional[int] = None, out: Optional[Path] = None) -> RunConfig:
    """Resolve defaults, env/--config files and --set overrides, then per-command flags."""
    cfg = load_config(ctx.obj["config_path"], ctx.obj["overrides"])
    if seed is not None:
        cfg.set("run", "seed", seed)
    if out is not None:
        cfg.set("run", "out_dir", str(out))
    return cfg


@click.group()
@click.option("--config", "config_path", type=click.Path(dir_okay=False, path_type=Path), default=None,
              help="JSON config file (overrides $TRAFONET_CONFIG).")
@click.option("--set", "overrides", multiple=True, metavar="SECTION.KEY=VALUE",
              help="Override one config value; repeatable.")
@click.option("--log-level", default="INFO", show_default=True,
              type=click.Choice(["DEBUG", "INFO", "WARNING", "ERROR"], case_sensitive=False))
@click.version_option(__version__, prog_name="trafonet")
@click.pass_context
def cli(ctx: click.Context, config_path: Optional[Path], overrides: Sequence[str], log_level: str) -> None:
    """Transformer monitoring toolkit: OLTC acoustics and energization control."""
    logging.basicConfig(level=log_level.upper(), format=LOG_FORMAT, force=True)
    ctx.ensure_object(dict)
    ctx.obj["config_path"] = config_path
    ctx.obj["overrides"] = list(overrides)


@cli.command("show-config")
@click.option("--keys", is_flag=True, default=False, help="List every setting with its type and default.")
@click.pass_context
def show_config(ctx: click.Context, keys: bool) -> None:
    """Print the resolved configuration."""
    if keys:
        _print_result([{"section": sec.name, **s.to_dict()} for sec in SECTIONS for s in sec.settings])
        return
    _print_result(_config(ctx).to_dict())


@cli.command()
@click.option("--seed", type=int, default=None)
@click.pass_context
def gradcheck(ctx: click.Context, seed: Optional[int]) -> None:
    """Finite-difference check of the reference MLPs and the OLTC CNN."""
    cfg = _config(ctx, seed)
    results = run_gradcheck(cfg)
    _print_result(results)
    if max(results.values()) >= GRADCHECK_TOL:
        click.echo(f"gradient check failed (tolerance {GRADCHECK_TOL:g})", err=True)
        ctx.exit(2)


@cli.command("gen-data")
@click.option("--n-per-class", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--jitter", type=float, default=None)
@click.option("--snr", type=float, default=None, help="Add noise at this SNR (dB).")
@click.option("--color", type=click.Choice([c.value for c in NoiseColor]), default=None)
@click.option("--out", type=click.Path(file_okay=False, path_type=Path), required=True)
@click.pass_context
def gen_data(ctx, n_per_class, seed, jitter, snr, color, out) -> None:
    """Write a synthetic OLTC dataset (WAV files + manifest.csv)."""
    cfg = _config(ctx, seed, out)
    if n_per_class is not None:
        cfg.set("synth", "n_per_class", n_per_class)
    if jitter is not None:
        cfg.set("synth", "jitter", jitter)
    if color is not None:
        cfg.set("synth", "noise_color", color)
    clips = generate_dataset(cfg.get("synth", "n_per_class"), synth_config(cfg, cfg.seed))
    if snr is not None:
        noise_color = NoiseColor(cfg.get("synth", "noise_color"))
        clips = [add_noise(c, snr, noise_color, derive_seed(cfg.seed, "noise", snr, i)) for i, c in enumerate(clips)]
    storage = Storage(cfg.out_dir)
    storage.save_config(cfg)
    export_dataset(clips, storage)
    _print_result(f"{len(clips)} clips written to {cfg.out_dir}")


@cli.command("train-oltc")
@click.option("--seed", type=int, default=None)
@click.option("--epochs", type=int, default=None)
@click.option("--out", type=click.Path(file_okay=False, path_type=Path), default=None)
@click.pass_context
def train_oltc(ctx, seed, epochs, out) -> None:
    """Train the OLTC CNN and report accuracy, confusion matrix and the SNR curve."""
    cfg = _config(ctx, seed, out)
    if epochs is not None:
        cfg.set("nn", "epochs", epochs)
    record = run_oltc_experiment(cfg, Storage(cfg.out_dir))
    s = record.summary
    _print_result({k: s[k] for k in ("train_accuracy", "test_accuracy", "baseline_accuracy")})
    _print_result(s["snr_curve"])


@cli.command("eval-oltc")
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True)
@click.option("--snr", type=float, default=None)
@click.option("--denoise", is_flag=True, default=False)
@click.option("--seed", type=int, default=None)
@click.pass_context
def eval_oltc(ctx, checkpoint, snr, denoise, seed) -> None:
    """Evaluate a saved OLTC CNN on a freshly generated test set."""
    cfg = _config(ctx, seed)
    _print_result(evaluate_oltc_checkpoint(cfg, checkpoint, snr, denoise))


@cli.command("oracle-sweep")
@click.option("--n-episodes", type=int, default=None)
@click.option("--grid-deg", type=float, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), required=True, help="CSV file.")
@click.pass_context
def oracle_sweep_cmd(ctx, n_episodes, grid_deg, seed, out) -> None:
    """Brute-force optimal closing angle for each evaluation flux."""
    cfg = _config(ctx, seed, out.parent)
    n = cfg.get("agent", "eval_episodes") if n_episodes is None else n_episodes
    grid = cfg.get("agent", "oracle_grid_deg") if grid_deg is None else grid_deg
    if n < 1:
        raise ValidationError(f"--n-episodes must be >= 1, got {n}")
    rows = oracle_sweep(cfg, n, grid)
    Storage(cfg.out_dir).write_csv(out.name, rows, ["phi1", "phi2", "phi3", "theta_deg", "i_max"])
    _print_result(f"{len(rows)} episodes written to {out}")


@cli.command("train-rl")
@click.option("--algo", type=click.Choice([a.value for a in Algo]), required=True)
@click.option("--steps", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--out", type=click.Path(file_okay=False, path_type=Path), default=None)
@click.pass_context
def train_rl_cmd(ctx, algo, steps, seed, out) -> None:
    """Train one RL agent on the energization environment."""
    cfg = _config(ctx, seed, out)
    if steps is not None:
        cfg.set("agent", "steps", steps)
    _, _, record = train_rl(cfg, algo, Storage(cfg.out_dir))
    _print_result(record.summary)


@cli.command("eval-rl")
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True)
@click.option("--episodes", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), default=None, help="Per-episode CSV.")
@click.pass_context
def eval_rl(ctx, checkpoint, episodes, seed, out) -> None:
    """Greedy evaluation of a trained agent on the shared evaluation fluxes."""
    cfg = _config(ctx, seed)
    result = evaluate_rl_checkpoint(cfg, checkpoint, episodes)
    if out is not None:
        rows = [{"episode": i, "i_max": v, "reward": r} for i, (v, r) in enumerate(zip(result.i_max, result.rewards))]
        Storage(out.parent).write_csv(out.name, rows, ["episode", "i_max", "reward"])
    _print_result(result.to_dict())


@cli.command("benchmark-rl")
@click.option("--steps", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--parallel/--sequential", default=None)
@click.option("--out", type=click.Path(file_okay=False, path_type=Path), default=None)
@click.pass_context
def benchmark_rl(ctx, steps, seed, parallel, out) -> None:
    """Train all configured algorithms and compare them with the oracle and a random policy."""
    cfg = _config(ctx, seed, out)
    if steps is not None:
        cfg.set("agent", "steps", steps)
    if parallel is not None:
        cfg.set("run", "parallel", parallel)
    record = run_rl_benchmark(cfg, Storage(cfg.out_dir))
    _print_result(record.summary["rows"])


@cli.command()
@click.argument("path", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--column", default=None, help="CSV column; default reads one number per line.")
def summarize(path: Path, column: Optional[str]) -> None:
    """mean, std, min, quartiles and max of a list of numbers."""
    _print_result(summarize_file(path, column))


def main(argv: Optional[List[str]] = None) -> int:
    """Exit codes: 0 success, 1 usage/validation/config error, 2 runtime failure."""
    try:
        rv = cli.main(args=argv, prog_name="trafonet", standalone_mode=False)
    except click.exceptions.Abort:
        click.echo("Aborted!", err=True)
        return 1
    except click.ClickException as e:
        e.show()
        return 1
    except ValidationError as e:
        click.echo(f"ERROR: {e}", err=True)
        return 1
    except (ToolkitError, OSError) as e:
        click.echo(f"ERROR: {e}", err=True)
        return 2
    return rv if isinstance(rv, int) else 0


if __name__ == "__main__":
    sys.exit(main())
