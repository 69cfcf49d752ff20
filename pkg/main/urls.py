"""Command routing: ``manage.py <command>`` -> ``views.cmd_<command>``, plus the exit-code contract."""

import logging

import click

from common.exceptions import ContractViolation, DataError, NumericalFault

from . import views
from .forms import ABLATION_CHOICES, ALIGN_CHOICES

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3


class SelfTestFailed(Exception):
    pass


def _seed_list(value):
    """'1,2,5-7' -> [1, 2, 5, 6, 7]."""
    seeds = []
    for part in value.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            if "-" in part:
                low, high = part.split("-", 1)
                seeds.extend(range(int(low), int(high) + 1))
            else:
                seeds.append(int(part))
        except ValueError:
            raise click.BadParameter(f"'{part}' is not a seed or a seed range") from None
    if not seeds:
        raise click.BadParameter("no seeds given")
    return seeds


def _ablation_list(value):
    return [name.strip() for name in (value or "").split(",") if name.strip()]


@click.group()
@click.option("--log-level", default=None, help="Override SPLATCAM_LOG_LEVEL for this command.")
def cli(log_level):
    """splatcam: pose-free feed-forward Gaussian splatting at desk scale."""
    if log_level:
        logging.getLogger().setLevel(log_level.upper())
        for name in ("main", "common", "splatcam"):
            logging.getLogger(name).setLevel(log_level.upper())


@cli.command()
@click.option("--seeds", required=True, help="Scene seeds, e.g. '0,1,2' or '0-7'.")
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--out", "out_dir", type=click.Path(), default=None)
def generate(seeds, config_path, out_dir):
    """Write synthetic scene directories."""
    views.cmd_generate(_seed_list(seeds), out_dir, config_path)


@cli.command()
@click.argument("config_path", type=click.Path())
@click.option("--resume", type=click.Path(), default=None, help="Checkpoint to continue from.")
@click.option("--seed", type=int, default=None)
@click.option("--ablate", default="",
              help="Comma-separated: " + ", ".join(key for key, _ in ABLATION_CHOICES))
@click.option("--out", "out_dir", type=click.Path(), default=None)
def train(config_path, resume, seed, ablate, out_dir):
    """Run the staged training schedule."""
    views.cmd_train(config_path, out_dir, resume=resume, seed=seed, ablate=_ablation_list(ablate))


@cli.command()
@click.argument("checkpoint", type=click.Path())
@click.argument("input_path", type=click.Path())
@click.option("--views", "num_views", type=int, default=None)
@click.option("--out", "out_dir", type=click.Path(), default=None)
def infer(checkpoint, input_path, num_views, out_dir):
    """Predict Gaussians and poses for a scene directory or an image folder."""
    manifest = views.cmd_infer(checkpoint, input_path, out_dir, views=num_views)
    click.echo(f"{manifest.result['gaussians']} Gaussians, {manifest.result['latency_seconds'] * 1000:.1f} ms")


@cli.command()
@click.argument("ply_path", type=click.Path())
@click.argument("camera_spec", type=click.Path())
@click.option("--height", type=int, default=None)
@click.option("--width", type=int, default=None)
@click.option("--out", "out_dir", type=click.Path(), default=None)
def render(ply_path, camera_spec, height, width, out_dir):
    """Render RGB and depth images for every camera in a spec file."""
    views.cmd_render(ply_path, camera_spec, out_dir, height=height, width=width)


@cli.command(name="eval")
@click.argument("checkpoint", type=click.Path())
@click.option("--seeds", required=True, help="Held-out scene seeds, e.g. '1000000-1000003'.")
@click.option("--views", "num_views", type=int, default=None)
@click.option("--align", type=click.Choice([key for key, _ in ALIGN_CHOICES]), default="none")
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--out", "out_dir", type=click.Path(), default=None)
def evaluate(checkpoint, seeds, num_views, align, config_path, out_dir):
    """NVS and pose metrics on held-out synthetic scenes."""
    manifest = views.cmd_eval(checkpoint, _seed_list(seeds), out_dir, views=num_views, align=align,
                              config_path=config_path)
    click.echo(" ".join(f"{k}={v:.4g}" for k, v in manifest.result.items() if isinstance(v, float)))


@cli.command()
@click.option("--suite", "suites", multiple=True, help="Run only these suites (repeatable).")
@click.option("--out", "out_dir", type=click.Path(), default=None)
def selftest(suites, out_dir):
    """Gradient, mask, zero-init, dual-quaternion and renderer property suites."""
    manifest = views.cmd_selftest(list(suites) or None, out_dir)
    if not manifest.result["passed"]:
        for suite, failed in manifest.result["failed"].items():
            click.echo(f"FAILED {suite}: {', '.join(failed)}", err=True)
        raise SelfTestFailed("self-test failed")
    click.echo("all suites passed")


@cli.command()
@click.argument("config_path", type=click.Path())
@click.option("--ablate", default="no_cna,no_modulation", show_default=True,
              help="Ablations to train next to the full model, comma-separated.")
@click.option("--seed", type=int, default=None)
@click.option("--out", "out_dir", type=click.Path(), default=None)
def compare(config_path, ablate, seed, out_dir):
    """Train the full model and each ablation on the same seed; report the PSNR ordering."""
    manifest = views.cmd_compare(config_path, _ablation_list(ablate), out_dir, seed=seed)
    for variant, value in manifest.result["psnr"].items():
        click.echo(f"{variant}: psnr={value:.4g}")
    click.echo(f"full model best: {manifest.result['full_is_best']}")


def main(argv=None):
    """Run the CLI and map failures onto exit codes 1 (usage), 2 (data), 3 (numerical / self-test)."""
    try:
        result = cli.main(args=argv, prog_name="manage.py", standalone_mode=False)
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return EXIT_USAGE
    except click.ClickException as exc:
        exc.show()
        return EXIT_USAGE
    except ContractViolation as exc:
        logger.error("%s", exc)
        return EXIT_USAGE
    except DataError as exc:
        logger.error("%s", exc)
        return EXIT_DATA
    except NumericalFault as exc:
        logger.error("%s (diagnostics: %s)", exc, sorted((exc.diagnostics or {}).keys()))
        return EXIT_NUMERICAL
    except SelfTestFailed as exc:
        logger.error("%s", exc)
        return EXIT_NUMERICAL
    return result if isinstance(result, int) else EXIT_OK
