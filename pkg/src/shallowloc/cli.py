"""Command-line front end.

Every subcommand takes ``--config`` (YAML/JSON), ``--seed`` and ``--out``.
Failures exit nonzero with a one-line JSON error object on stderr.
"""

from __future__ import annotations

import functools
import json
import logging
import sys
from pathlib import Path

import click
from pydantic import ValidationError

from . import harness
from .config import load_config
from .io import FormatError
from .propagation import ConfigurationError, DomainError

EXIT_USAGE = 2
EXIT_FAILURE = 1


def _fail(kind: str, message: str, code: int = EXIT_FAILURE):
    click.echo(json.dumps({"error": kind, "message": message}), err=True)
    sys.exit(code)


def _guarded(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except harness.HashMismatchError as exc:
            _fail("hash_mismatch", str(exc))
        except ValidationError as exc:
            _fail("config", str(exc).replace("\n", "; "), EXIT_USAGE)
        except (ConfigurationError, DomainError) as exc:
            _fail("config", str(exc), EXIT_USAGE)
        except FormatError as exc:
            _fail("format", str(exc))
        except harness.HarnessError as exc:
            _fail("harness", str(exc))
        except OSError as exc:
            _fail("io", str(exc))
    return wrapper


def _common(fn):
    fn = click.option("--out", "out", type=click.Path(file_okay=False), required=True,
                      help="Output directory.")(fn)
    fn = click.option("--seed", type=int, default=None, help="Override the master seed.")(fn)
    fn = click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
                      help="Experiment config (YAML or JSON).")(fn)
    return fn


def _config(config_path, seed):
    if config_path is not None and not Path(config_path).exists():
        raise harness.HarnessError(f"config file {config_path} not found")
    return load_config(config_path, seed)


def _emit(payload: dict):
    click.echo(json.dumps(payload, sort_keys=True))


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def main(verbose):
    """Passive range/bearing estimation for a three-hydrophone seabed array."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")


@main.command()
@_common
@_guarded
def simulate(config_path, seed, out):
    """Simulate train, test and generalization transits as .lwr files."""
    cfg = _config(config_path, seed)
    paths = harness.cmd_simulate(cfg, out)
    _emit({"config_hash": cfg.hash(), "files": [p.name for p in paths]})


@main.command()
@_common
@click.option("--data", "data_dir", type=click.Path(file_okay=False), required=True,
              help="Directory of .lwr recordings.")
@_guarded
def features(config_path, seed, out, data_dir):
    """Extract cepstral and GCC feature maps (.fmap) plus a training manifest."""
    cfg = _config(config_path, seed)
    manifest = harness.cmd_features(cfg, data_dir, out)
    _emit({"config_hash": cfg.hash(), "files": manifest["files"],
           "train_frames": len(manifest["train"]), "val_frames": len(manifest["val"])})


@main.command()
@_common
@click.option("--features", "features_dir", type=click.Path(file_okay=False), required=True)
@click.option("--variant", "variants", multiple=True,
              type=click.Choice(["combined", "gcc_only", "cepstral_only"]),
              help="Variant(s) to train; defaults to the config list.")
@click.option("--force", is_flag=True, help="Accept inputs stamped with another config hash.")
@_guarded
def train(config_path, seed, out, features_dir, variants, force):
    """Train CNN variants; writes <variant>.ckpt and <variant>_history.csv."""
    cfg = _config(config_path, seed)
    written = harness.cmd_train(cfg, features_dir, out, variants or None, force)
    _emit({"config_hash": cfg.hash(), "checkpoints": {k: str(v) for k, v in written.items()}})


@main.command(name="eval")
@_common
@click.option("--features", "features_dir", type=click.Path(file_okay=False), required=True)
@click.option("--checkpoints", "checkpoint_dir", type=click.Path(file_okay=False), required=True)
@click.option("--data", "data_dir", type=click.Path(file_okay=False), default=None,
              help="Recordings for the baseline (defaults to the manifest's data_dir).")
@click.option("--method", "methods", multiple=True,
              type=click.Choice(["baseline", "combined", "gcc_only", "cepstral_only"]))
@click.option("--force", is_flag=True, help="Accept inputs stamped with another config hash.")
@_guarded
def eval_(config_path, seed, out, features_dir, checkpoint_dir, data_dir, methods, force):
    """Evaluate baseline and CNN variants on the test and generalization sets."""
    cfg = _config(config_path, seed)
    report = harness.cmd_eval(cfg, checkpoint_dir, features_dir, out, data_dir,
                              list(methods) or None, force)
    _emit({"config_hash": cfg.hash(), "files": [p.name for p in report.files]})


@main.command(name="track-plot")
@_common
@click.option("--fixes", "fixes_csv", type=click.Path(dir_okay=False), required=True,
              help="Per-frame fixes CSV written by `eval`.")
@_guarded
def track_plot(config_path, seed, out, fixes_csv):
    """Columnar range/bearing-versus-time data with truth for plotting."""
    if not Path(fixes_csv).exists():
        raise harness.HarnessError(f"fixes CSV {fixes_csv} not found")
    path = harness.cmd_track_plot(fixes_csv, out)
    _emit({"file": str(path)})


if __name__ == "__main__":
    main()
