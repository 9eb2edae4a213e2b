# main.py - Command-line entry point: train, infer, eval, describe, gradcheck, synth
#  python3 src/main.py train --synthetic 8 --patch 32 --channels 8 --depths 1,1,1 --epochs 50 --seed 7

import os
import sys

import click
import pandas as pd

sys.path.insert(0, os.path.dirname(__file__))
import tensor
from checkpoint import CheckpointError, load_checkpoint
from config import (
    ConfigError,
    load_config,
    merge_overrides,
    net_config_from_dict,
    train_config_from_dict,
)
from gradcheck import DEFAULT_SEEDS, TOLERANCE, format_check_line, run_gradcheck_suite
from haze import generate_pairs
from metrics import evaluate_pairs, format_report_line
from network import build, count_params, describe, describe_ladder, from_store, predict
from readers.dataset_reader import SyntheticSpec, make_dataset, write_dataset
from readers.image_read import load_image, save_image
from train import NonFiniteLossError, fit, format_log_line
from utils import banner, logger

# ValueError covers config, shape, dataset, image and haze parameter errors
EXPECTED_ERRORS = (ValueError, OSError, CheckpointError, NonFiniteLossError, ArithmeticError)


def run_command(name, action):
    try:
        return action()
    except EXPECTED_ERRORS as e:
        logger.error(f"❌ {name} failed: {type(e).__name__}: {e}")
        return 1


def _config_values(config_path):
    if not config_path:
        return {"net": {}, "train": {}}
    return load_config(config_path)


def _net_overrides(channels=None, depths=None, **switches):
    overrides = {"base_channels": channels, "depths": depths, **switches}
    if depths is not None:
        overrides["levels"] = len([d for d in str(depths).split(",") if d.strip()])
    return overrides


def _int_list(text):
    items = text if isinstance(text, (list, tuple)) else str(text).split(",")
    try:
        return tuple(int(item) for item in items if str(item).strip())
    except ValueError:
        raise ConfigError(f"expected a comma-separated list of integers, got {text!r}") from None


# Function 01
def cmd_train(config_path=None, data=None, synthetic=None, size=64, out="runs/train", epochs=None,
              patch=None, batch_size=None, lr=None, channels=None, depths=None, seed=None,
              split=None, ssim_weight=None, val_every=None, checkpoint_every=None):
    def action():
        values = _config_values(config_path)
        cfg = net_config_from_dict(merge_overrides(values["net"], _net_overrides(channels, depths)))
        tcfg = train_config_from_dict(merge_overrides(values["train"], {
            "epochs": epochs, "patch": patch, "batch_size": batch_size, "lr_max": lr, "seed": seed,
            "ssim_weight": ssim_weight, "val_every": val_every, "checkpoint_every": checkpoint_every,
            "checkpoint_dir": out}))

        banner("TRAIN")
        if synthetic:
            dataset = make_dataset(SyntheticSpec(count=synthetic, size=(size, size), seed=tcfg.seed),
                                   split or "train", tcfg.seed)
        elif data:
            dataset = make_dataset(data, split or "statehaze1k", tcfg.seed)
        else:
            raise ConfigError("train needs a dataset: pass --data DIR or --synthetic N")

        _, net = build(cfg, tcfg.seed)
        logger.info(f"Network: {count_params(net)} parameters, config {cfg}")
        os.makedirs(out, exist_ok=True)
        with open(os.path.join(out, "train.log"), "w") as log_file:
            history = fit(net, dataset, tcfg, callbacks=[lambda r: log_file.write(format_log_line(r) + "\n")])
        history.to_csv(os.path.join(out, "history.csv"), index=False)

        if len(history):
            first, last = history["loss"].iloc[0], history["loss"].iloc[-1]
            logger.info(f"✅ Training complete: loss {first:.6f} -> {last:.6f} over {len(history)} steps")
        else:
            logger.info("✅ No training steps requested; saved the initial checkpoint only")
        return 0

    return run_command("train", action)


def _output_names(inputs):
    names = {}
    for path in inputs:
        name = os.path.splitext(os.path.basename(path))[0] + ".png"
        if name in names:
            raise ValueError(f"{names[name]} and {path} would both be written to {name}")
        names[name] = path
    return list(names)


# Function 02
def cmd_infer(checkpoint, inputs, out_dir):
    def action():
        names = _output_names(inputs)
        cfg, store = load_checkpoint(checkpoint)
        net = from_store(cfg, store)
        os.makedirs(out_dir, exist_ok=True)
        for path, name in zip(inputs, names):
            restored = predict(net, load_image(path))
            save_image(restored, os.path.join(out_dir, name))
            logger.info(f"✅ {path} -> {os.path.join(out_dir, name)}")
        return 0

    return run_command("infer", action)


# Function 03
def cmd_eval(data, checkpoint=None, split=None, report=None, seed=0):
    def action():
        dataset = make_dataset(data, "statehaze1k", seed)
        pairs = dataset.pairs(split)
        restore = None
        if checkpoint:
            net = from_store(*load_checkpoint(checkpoint))
            restore = lambda image: predict(net, image)
        per_image, summary = evaluate_pairs(pairs, restore)

        lines = [format_report_line(r.id, r.psnr, r.ssim, r.mse) for r in per_image.itertuples(index=False)]
        lines += [format_report_line(r.group, r.psnr, r.ssim, r.mse) for r in summary.itertuples(index=False)]
        for line in lines:
            click.echo(line)
        if report:
            with open(report, "w") as the_file:
                the_file.write("\n".join(lines) + "\n")
        return 0

    return run_command("eval", action)


# Function 04
def cmd_describe(config_path=None, channels=None, depths=None, height=256, width=256, ladder=False,
                 **switches):
    def action():
        if ladder:
            values = _config_values(config_path)["net"]
            base = int(channels or values.get("base_channels", 8))
            ladder_depths = _int_list(depths or values.get("depths", "1,1,1"))
            table = describe_ladder(base, ladder_depths, (height, width))
            for r in table.itertuples(index=False):
                click.echo(f"{r.rung:<10} params={r.params:<10} delta={r.delta_params:+d} flops={r.flops}")
            return 0

        values = _config_values(config_path)
        cfg = net_config_from_dict(merge_overrides(values["net"], _net_overrides(channels, depths, **switches)))
        table = describe(cfg, (height, width))
        with pd.option_context("display.max_rows", None, "display.width", 120):
            click.echo(table.to_string(index=False))
        click.echo(f"total params={int(table['params'].sum())} flops={int(table['flops'].sum())} "
                   f"input={height}x{width}")
        return 0

    return run_command("describe", action)


# Function 05
def cmd_gradcheck(seeds=DEFAULT_SEEDS, tol=TOLERANCE, checks=None):
    def action():
        banner("GRADIENT CHECKS")
        report = run_gradcheck_suite(seeds, tol, checks or None)
        for row in report.to_dict("records"):
            click.echo(format_check_line(row))
        return 0 if (report["status"] == "ok").all() else 1

    return run_command("gradcheck", action)


# Function 06
def cmd_synth(out, count=400, size=64, seed=0):
    def action():
        os.makedirs(out, exist_ok=True)
        pairs = generate_pairs(count, (size, size), seed)
        write_dataset(pairs, out)
        index = pd.DataFrame([{"id": p.id, "preset": p.provenance.preset, "beta": p.provenance.beta,
                               "A": p.provenance.A, "depth_kind": p.provenance.depth_kind} for p in pairs])
        index.to_csv(os.path.join(out, "index.csv"), index=False)
        return 0

    return run_command("synth", action)


@click.group()
@click.option("--debug", is_flag=True, help="Raise on the first NaN/Inf produced by any kernel.")
def cli(debug):
    """Dehazing network: train, infer, evaluate, describe and verify."""
    if debug:
        tensor.set_debug(True)


seed_option = click.option("--seed", type=int, default=None, envvar="RSHAZE_SEED",
                           help="Random seed (falls back to $RSHAZE_SEED, then the config, then 0).")


@cli.command()
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--data", type=click.Path(), default=None, help="Dataset root with hazy/ and clean/.")
@click.option("--synthetic", type=int, default=None, help="Train on N generated pairs instead.")
@click.option("--size", type=int, default=64, show_default=True, help="Side of generated images.")
@click.option("--out", type=click.Path(), default="runs/train", show_default=True)
@click.option("--epochs", type=int, default=None)
@click.option("--patch", type=int, default=None)
@click.option("--batch-size", type=int, default=None)
@click.option("--lr", type=float, default=None, help="Initial (maximum) learning rate.")
@click.option("--channels", type=int, default=None)
@click.option("--depths", type=str, default=None, help="Blocks per level, e.g. 2,2,4.")
@click.option("--split", type=str, default=None, help="Split preset: statehaze1k, rshaze or train.")
@click.option("--ssim-weight", type=float, default=None)
@click.option("--val-every", type=int, default=None)
@click.option("--checkpoint-every", type=int, default=None)
@seed_option
def train(**kwargs):
    """Train the network and write checkpoints plus train.log."""
    sys.exit(cmd_train(**kwargs))


@cli.command()
@click.argument("checkpoint", type=click.Path())
@click.argument("inputs", nargs=-1, required=True, type=click.Path())
@click.option("--out", "out_dir", type=click.Path(), default="runs/infer", show_default=True)
def infer(checkpoint, inputs, out_dir):
    """Dehaze INPUTS with CHECKPOINT, one PNG per input."""
    sys.exit(cmd_infer(checkpoint, inputs, out_dir))


@cli.command(name="eval")
@click.argument("data", type=click.Path())
@click.option("--checkpoint", type=click.Path(), default=None, help="Score the hazy images as-is when omitted.")
@click.option("--split", type=click.Choice(["train", "val", "test"]), default=None)
@click.option("--report", type=click.Path(), default=None, help="Also write the report lines to this file.")
@seed_option
def eval_command(data, checkpoint, split, report, seed):
    """Print `id psnr ssim mse` per image, then the summary rows."""
    sys.exit(cmd_eval(data, checkpoint, split, report, seed or 0))


@cli.command(name="describe")
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--channels", type=int, default=None)
@click.option("--depths", type=str, default=None)
@click.option("--block", type=click.Choice(["mpeb", "fnb"]), default=None)
@click.option("--fusion", type=click.Choice(["itfm", "conv"]), default=None)
@click.option("--cmim/--no-cmim", default=None)
@click.option("--src/--no-src", default=None)
@click.option("--edf/--no-edf", default=None)
@click.option("--height", type=int, default=256, show_default=True)
@click.option("--width", type=int, default=256, show_default=True)
@click.option("--ladder", is_flag=True, help="Show the ablation ladder with parameter deltas.")
def describe_command(**kwargs):
    """Per-layer parameters and FLOPs at a given input size."""
    sys.exit(cmd_describe(**kwargs))


@cli.command(name="gradcheck")
@click.option("--seeds", type=str, default=",".join(str(s) for s in DEFAULT_SEEDS), show_default=True)
@click.option("--tol", type=float, default=TOLERANCE, show_default=True)
@click.option("--check", "checks", multiple=True, help="Run only the named checks.")
def gradcheck_command(seeds, tol, checks):
    """Finite-difference checks of every op, block and the tiny network."""
    try:
        seed_list = _int_list(seeds)
    except ConfigError as e:
        logger.error(f"❌ gradcheck failed: {e}")
        sys.exit(1)
    sys.exit(cmd_gradcheck(seed_list, tol, list(checks)))


@cli.command()
@click.option("--out", type=click.Path(), required=True)
@click.option("--count", type=int, default=400, show_default=True)
@click.option("--size", type=int, default=64, show_default=True)
@seed_option
def synth(out, count, size, seed):
    """Write a synthetic hazy/clean dataset to OUT."""
    sys.exit(cmd_synth(out, count, size, seed or 0))


if __name__=="__main__": # pragma: no cover
    cli()
