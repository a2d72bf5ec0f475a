"""Command-line entry point: ``tool <command> [--flag value]...``.

Every command takes ``--config file.json`` whose keys are flag names with
underscores; flags given on the command line override file values. Exit
codes: 0 success, 1 usage error, 2 runtime or numeric error. ``TOOL_THREADS``
caps the worker count of commands that fan out (``synth``).
"""

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import navsim, synthdata, training
from .bspline import sample_uniform, validate
from .errors import CheckpointError, DomainError, FitError, NumericError, ShapeError
from .loss import LossWeights
from .model import SplineFormer, to_spline
from .transformer import PRESETS

log = logging.getLogger("splineformer")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
SEED_LIMIT = 2 ** 64
SUBSYSTEMS = {"data": 0, "init": 1, "dropout": 2, "sim": 3, "policy": 4}

# desk-scale training presets; "toy" matches the default 64x64 model
TRAIN_PRESETS = {
    "toy": {"model": "toy", "lr": 1e-4, "epochs": 60, "batch_size": 8},
    "tiny": {"model": "tiny", "lr": 1e-3, "epochs": 20, "batch_size": 8},
}


class UsageError(Exception):
    """Bad flags, config values or input paths."""


def split_seed(root, subsystem):
    """Independent 32-bit seed for one subsystem, derived from the 64-bit root seed."""
    return int(np.random.SeedSequence([root, SUBSYSTEMS[subsystem]]).generate_state(1)[0])


def thread_count():
    raw = os.environ.get("TOOL_THREADS")
    if raw is None:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"TOOL_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"TOOL_THREADS must be a positive integer, got {raw!r}")
    return n


# option handling ----------------------------------------------------------

def seed_type(text):
    value = int(text)
    if not 0 <= value < SEED_LIMIT:
        raise ValueError("seeds are 64-bit unsigned integers")
    return value


def positive_int(text):
    value = int(text)
    if value < 1:
        raise ValueError("must be >= 1")
    return value


def positive_float(text):
    value = float(text)
    if not value > 0:
        raise ValueError("must be positive")
    return value


def nonneg_float(text):
    value = float(text)
    if not value >= 0:
        raise ValueError("must be non-negative")
    return value


@dataclass(frozen=True)
class Opt:
    name: str
    type: object = str
    default: object = None
    help: str = ""
    choices: tuple = None


COMMANDS = {
    "synth": ("write a synthetic fluoroscopy dataset", [
        Opt("out", str, None, "output directory"),
        Opt("n", int, 512, "number of samples (>= 10)"),
        Opt("seed", seed_type, 0, "root seed"),
        Opt("image_size", positive_int, 64, "image side in pixels"),
        Opt("noise_sigma", nonneg_float, 0.02, "background noise level"),
        Opt("map_seed", seed_type, 0, "vessel map seed"),
        Opt("max_ctrl", positive_int, 24, "upper bound on control points per curve"),
    ]),
    "train": ("teacher-forced training on a dataset", [
        Opt("data", str, None, "dataset directory"),
        Opt("out", str, None, "output directory for log and checkpoints"),
        Opt("preset", str, None, "training preset", tuple(TRAIN_PRESETS)),
        Opt("epochs", int, 300, "training epochs"),
        Opt("lr", positive_float, 1e-5, "Adam learning rate"),
        Opt("batch_size", positive_int, 32, "minibatch size"),
        Opt("seed", seed_type, 0, "root seed"),
        Opt("checkpoint_every", positive_int, 10, "epochs between periodic checkpoints"),
        Opt("overfit", positive_int, None, "train on the first N training samples only"),
        Opt("steps", positive_int, 2000, "full-batch steps in overfit mode"),
        Opt("lambda_a", nonneg_float, 1.0, "weight of the token term"),
        Opt("lambda_b", nonneg_float, 0.1, "weight of the end-of-sequence term"),
        Opt("lambda_c", nonneg_float, 1.0, "weight of the curve term"),
    ]),
    "infer": ("predict the guidewire spline of one image", [
        Opt("checkpoint", str, None, "model checkpoint"),
        Opt("image", str, None, "input PGM image"),
        Opt("out", str, None, "output directory"),
        Opt("eos_threshold", float, 0.5, "end-of-sequence threshold"),
    ]),
    "attn": ("render the fused encoder attention map of one image", [
        Opt("checkpoint", str, None, "model checkpoint"),
        Opt("image", str, None, "input PGM image"),
        Opt("out", str, None, "output PGM heat map"),
        Opt("discard", float, 0.0, "fraction of lowest-attention patches to zero, in [0, 1)"),
    ]),
    "demos": ("record expert demonstrations in the navigation simulator", [
        Opt("out", str, None, "output directory"),
        Opt("checkpoint", str, None, "model checkpoint for condensed features"),
        Opt("target", str, "both", "target vessel", ("bca", "lcca", "both")),
        Opt("trials", positive_int, 20, "episodes per target"),
        Opt("seed", seed_type, 0, "root seed"),
        Opt("noise", nonneg_float, 1.0, "std of the noise added to executed expert actions"),
        Opt("map_seed", seed_type, 0, "vessel map seed"),
    ]),
    "bctrain": ("fit a behavior-cloning policy to demonstrations", [
        Opt("demos", str, None, "demonstration directory or demos.jsonl"),
        Opt("out", str, None, "output policy checkpoint"),
        Opt("epochs", positive_int, 200, "training epochs"),
        Opt("hidden", positive_int, 128, "hidden layer width"),
        Opt("lr", positive_float, 1e-3, "Adam learning rate"),
        Opt("seed", seed_type, 0, "root seed"),
    ]),
    "navigate": ("evaluate a policy in the navigation simulator", [
        Opt("policy", str, "expert", "expert, random or a policy checkpoint path"),
        Opt("checkpoint", str, None, "model checkpoint (needed by a policy file)"),
        Opt("target", str, "bca", "target vessel", ("bca", "lcca")),
        Opt("trials", positive_int, 20, "number of episodes"),
        Opt("seed", seed_type, 0, "root seed"),
        Opt("budget", positive_int, 500, "step budget per episode"),
        Opt("map_seed", seed_type, 0, "vessel map seed"),
        Opt("out", str, None, "output JSON report"),
    ]),
    "gradcheck": ("finite-difference check of the full model gradient", [
        Opt("seed", seed_type, 0, "seed"),
        Opt("tol", positive_float, 1e-4, "maximum relative error"),
        Opt("max_entries", positive_int, None, "entries sampled per parameter (default all)"),
        Opt("inject_fault", str, None, "scale the gradient of one primitive, as op or op:scale"),
        Opt("out", str, None, "optional JSON report"),
    ]),
}

REQUIRED = {
    "synth": ("out",), "train": ("data", "out"), "infer": ("checkpoint", "image", "out"),
    "attn": ("checkpoint", "image", "out"), "demos": ("out",), "bctrain": ("demos", "out"),
    "navigate": (), "gradcheck": (),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    parser = _Parser(prog="tool", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="command")
    for name, (summary, opts) in COMMANDS.items():
        p = sub.add_parser(name, help=summary, description=summary)
        p.add_argument("--config", help="JSON file of option values")
        for o in opts:
            default = "" if o.default is None else f" (default {o.default})"
            p.add_argument("--" + o.name.replace("_", "-"), dest=o.name, type=o.type, choices=o.choices,
                           default=argparse.SUPPRESS, help=o.help + default)
    return parser


def _coerce(opt, value):
    try:
        value = opt.type(value) if value is not None else None
    except (TypeError, ValueError) as exc:
        raise UsageError(f"config value for {opt.name}: {exc}") from None
    if opt.choices and value not in opt.choices:
        raise UsageError(f"config value for {opt.name} must be one of {', '.join(opt.choices)}")
    return value


def resolve_options(command, flags):
    """Defaults, then preset (train), then the config file, then explicit flags."""
    opts = {o.name: o for o in COMMANDS[command][1]}
    values = {k: o.default for k, o in opts.items()}
    from_file = {}
    if flags.get("config"):
        path = Path(flags["config"])
        try:
            from_file = json.loads(path.read_text())
        except OSError as exc:
            raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {path} is not valid JSON: {exc}") from None
        if not isinstance(from_file, dict):
            raise UsageError(f"config {path} must hold a JSON object")
        unknown = sorted(set(from_file) - set(opts))
        if unknown:
            raise UsageError(f"unknown config keys for {command}: {', '.join(unknown)}")
        from_file = {k: _coerce(opts[k], v) for k, v in from_file.items()}
    given = {k: v for k, v in flags.items() if k in opts}
    preset = given.get("preset", from_file.get("preset"))
    if preset is not None:
        values.update({k: v for k, v in TRAIN_PRESETS[preset].items() if k in opts})
    values.update(from_file)
    values.update(given)
    missing = [k for k in REQUIRED[command] if values.get(k) is None]
    if missing:
        raise UsageError(f"{command} needs --{' --'.join(m.replace('_', '-') for m in missing)}")
    return values


def _existing(path, what):
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


# commands -----------------------------------------------------------------

def cmd_synth(o):
    if o["n"] < 10:
        raise UsageError("n ≥ 10 required")
    config = synthdata.SynthConfig(n=o["n"], seed=split_seed(o["seed"], "data"), image_size=o["image_size"],
                                   noise_sigma=o["noise_sigma"], map_seed=o["map_seed"],
                                   max_ctrl=o["max_ctrl"])
    entries = synthdata.make_dataset(o["out"], config, workers=thread_count())
    splits = {s: sum(e["split"] == s for e in entries) for s in ("train", "val", "test")}
    branches = {b: sum(e["strata"]["branch"] == b for e in entries) for b in synthdata.BRANCHES}
    print(f"wrote {len(entries)} samples to {o['out']}")
    print("splits: " + ", ".join(f"{k} {v}" for k, v in splits.items()))
    print("branches: " + ", ".join(f"{k} {v}" for k, v in branches.items()))
    print(f"strata: {len({json.dumps(e['strata'], sort_keys=True) for e in entries})} of {len(synthdata.STRATA)}")
    print(f"manifest sha256 {synthdata.manifest_hash(o['out'])}")


def _model_config(o, image_size):
    name = TRAIN_PRESETS[o["preset"]]["model"] if o["preset"] else "toy"
    config = PRESETS[name]
    if config.image_size != image_size:
        raise ShapeError(f"dataset images are {image_size}x{image_size} but the model expects "
                         f"{config.image_size}x{config.image_size}")
    return config


def cmd_train(o):
    data = _existing(o["data"], "dataset")
    out = Path(o["out"])
    images, curves, _ = synthdata.load_dataset(data, "train")
    if not len(images):
        raise DomainError(f"{data}: no training samples")
    config = _model_config(o, images.shape[-1])
    model = SplineFormer(config, seed=split_seed(o["seed"], "init"), dtype=np.float32)
    weights = LossWeights(o["lambda_a"], o["lambda_b"], o["lambda_c"])
    dropout_seed = split_seed(o["seed"], "dropout")
    images = images.astype(np.float32)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    if o["overfit"]:
        n = o["overfit"]
        if n > len(images):
            raise UsageError(f"--overfit {n} exceeds the {len(images)} training samples")
        result = training.overfit(model, images[:n], curves[:n], steps=o["steps"], lr=o["lr"],
                                  seed=dropout_seed, log_path=out / "train_log.csv")
        model.save(out / "model.ckpt", mode="overfit", samples=n, steps=o["steps"])
        px = config.image_size
        result["tip_errors_px"] = [e * px for e in result.pop("tip_errors")]
        summary = {"mode": "overfit", **result}
        print(f"loss {result['initial_loss']:.4g} -> {result['min_loss']:.4g} ({result['ratio']:.1f}x)")
        print("tip error px: " + " ".join(f"{e:.2f}" for e in result["tip_errors_px"]))
    else:
        val_images, val_curves, _ = synthdata.load_dataset(data, "val")
        targets = training.targets_from_curves(curves, config.max_seq_len)
        val = None
        if len(val_images):
            val = (val_images.astype(np.float32), training.targets_from_curves(val_curves, config.max_seq_len))
        tconf = training.TrainConfig(epochs=o["epochs"], lr=o["lr"], batch_size=o["batch_size"],
                                     seed=dropout_seed, checkpoint_every=o["checkpoint_every"], weights=weights)
        trainer = training.Trainer(model, tconf, log_path=out / "train_log.csv", checkpoint_dir=out)

        def report(epoch, last, val_loss):
            extra = "" if val_loss is None else f" val {val_loss:.4f}"
            log.info("epoch %d loss %.4f%s", epoch + 1, last.total, extra)
        trainer.fit(images, targets, val=val, on_epoch=report)
        model.save(out / "model.ckpt", step=trainer.step, train=tconf.to_dict())
        summary = {"mode": "train", "steps": trainer.step,
                   "final_loss": trainer.history[-1].total if trainer.history else None,
                   "best_val_loss": trainer.best_val if val is not None else None}
        print(f"trained {trainer.step} steps; final loss {summary['final_loss']}")
    # paths vary between otherwise identical runs; the manifest hash identifies the data
    summary["options"] = {k: v for k, v in o.items() if k not in ("data", "out", "config")}
    summary["data_manifest"] = synthdata.manifest_hash(o["data"])
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    print(f"checkpoint {out / 'model.ckpt'} ({time.time() - t0:.0f} s)")


def _load_model(path):
    model, _ = SplineFormer.load(_existing(path, "checkpoint"))
    return model


def _load_image(path, model):
    image = synthdata.read_pgm(_existing(path, "image"))
    s = model.config.image_size
    if image.shape != (s, s):
        raise ShapeError(f"image is {image.shape[0]}x{image.shape[1]}; the model expects {s}x{s}")
    return image


def overlay(image, curve, tip, n_points=200):
    """Input image with the curve drawn bright and a ring marking the tip."""
    h, w = image.shape
    line = synthdata.wire_coverage(sample_uniform(curve, n_points), h, w)
    d = np.linalg.norm(synthdata.pixel_centers(h, w) - np.asarray(tip), axis=1).reshape(h, w) * w
    ring = np.clip(1.0 - np.abs(d - 2.0), 0.0, 1.0)
    return np.clip(np.maximum(np.maximum(image, line), ring), 0.0, 1.0)


def cmd_infer(o):
    model = _load_model(o["checkpoint"])
    image = _load_image(o["image"], model)
    seq = model.generate(image, eos_threshold=o["eos_threshold"])
    out = Path(o["out"])
    out.mkdir(parents=True, exist_ok=True)
    record = {"terminated": bool(seq.terminated), "eos_probs": seq.eos_probs.tolist(),
              "tip": seq.points[0].tolist(), "tokens": seq.to_dict(), "bspline": None}
    if len(seq) >= 4:
        curve = to_spline(seq)
        validate(curve)
        record["bspline"] = curve.to_dict()
        synthdata.write_pgm(out / "overlay.pgm", overlay(image, curve, seq.points[0]))
    else:
        log.warning("sequence of %d tokens is too short for a cubic spline; no overlay", len(seq))
    (out / "spline.json").write_text(json.dumps(record, indent=2))
    print(f"{len(seq)} tokens, {'terminated by eos' if seq.terminated else 'stopped at max length'}; "
          f"tip ({seq.points[0][0]:.4f}, {seq.points[0][1]:.4f})")


def cmd_attn(o):
    if not 0.0 <= o["discard"] < 1.0:
        raise UsageError(f"discard must lie in [0, 1), got {o['discard']}")
    model = _load_model(o["checkpoint"])
    image = _load_image(o["image"], model)
    heat = model.attention_map(image, discard=o["discard"])
    synthdata.write_pgm(o["out"], heat)
    print(f"wrote {heat.shape[0]}x{heat.shape[1]} heat map to {o['out']}; {np.mean(heat == 0):.0%} zero")


def _env(o, model=None):
    """Simulator whose frames match the model input size."""
    size = model.config.image_size if model is not None else navsim.NavConfig.image_size
    config = navsim.NavConfig(step_budget=o.get("budget", 500), image_size=size)
    return navsim.NavEnv(synthdata.gen_vessel_map(o["map_seed"]), config)


def cmd_demos(o):
    model = _load_model(o["checkpoint"]) if o["checkpoint"] else None
    if model is None:
        log.warning("no --checkpoint: demonstrations carry no condensed features")
    env = _env(o, model)
    targets = ("bca", "lcca") if o["target"] == "both" else (o["target"],)
    out = Path(o["out"])
    index = out / "demos.jsonl"
    if index.exists():
        index.unlink()
    sim_seed = split_seed(o["seed"], "sim")
    for k, target in enumerate(targets):
        demos = navsim.collect_demos(env, target, o["trials"], seed=sim_seed + k, model=model, out_dir=out,
                                     action_noise=o["noise"])
        print(f"{target}: {demos['n_success']}/{demos['n_trials']} expert episodes kept, "
              f"{len(demos['actions'])} steps")


def cmd_bctrain(o):
    features, targets, actions = navsim.read_demos(_existing(o["demos"], "demonstrations"))
    history = []
    policy = navsim.bc_train(features, targets, actions, seed=split_seed(o["seed"], "policy"), epochs=o["epochs"],
                             hidden=o["hidden"], lr=o["lr"], history=history)
    Path(o["out"]).parent.mkdir(parents=True, exist_ok=True)
    policy.save(o["out"])
    print(f"{len(actions)} demonstration steps; loss {history[0]:.4f} -> {history[-1]:.4f}; wrote {o['out']}")


def cmd_navigate(o):
    model = None
    if o["policy"] == "expert":
        policy = navsim.ExpertPolicy()
    elif o["policy"] == "random":
        policy = navsim.RandomPolicy(split_seed(o["seed"], "policy"))
    else:
        path = Path(o["policy"])
        if not path.is_file():
            raise UsageError(f"policy file not found: {path} (use expert, random or a policy checkpoint)")
        if not o["checkpoint"]:
            raise UsageError("a policy file needs --checkpoint for its condensed features")
        policy = navsim.BCPolicy.load(path)
        model = _load_model(o["checkpoint"])
    report = navsim.evaluate(policy, model, _env(o, model), o["target"], o["trials"], o["budget"],
                             seed=split_seed(o["seed"], "sim"))
    if o["out"]:
        Path(o["out"]).parent.mkdir(parents=True, exist_ok=True)
        Path(o["out"]).write_text(json.dumps(report, indent=2))
    steps = "n/a" if report["mean_steps"] is None else f"{report['mean_steps']:.1f} ± {report['std_steps']:.1f}"
    print(f"{o['target']}: success {report['success_rate']:.0%} of {report['n_trials']}; steps {steps}")


def _parse_fault(text):
    kind, _, scale = text.partition(":")
    try:
        return kind, float(scale) if scale else 1.01
    except ValueError:
        raise UsageError(f"bad --inject-fault {text!r}; expected op or op:scale") from None


def cmd_gradcheck(o):
    run = lambda: training.model_grad_check(seed=o["seed"], tol=o["tol"], max_entries=o["max_entries"])  # noqa: E731
    t0 = time.time()
    if o["inject_fault"]:
        with ad.inject_fault(*_parse_fault(o["inject_fault"])):
            report = run()
    else:
        report = run()
    ranked = sorted(report.errors.items(), key=lambda kv: -kv[1])
    print(f"{'PASS' if report.passed else 'FAIL'}: max relative error "
          f"{max(report.errors.values(), default=float('nan')):.3e} (tol {o['tol']:g}), {time.time() - t0:.1f} s")
    for name in report.nonfinite:
        print(f"  {name}: non-finite")
    for name, err in ranked:
        print(f"  {name}: {err:.3e}{'' if err < o['tol'] else '  FAIL'}")
    if o["out"]:
        Path(o["out"]).write_text(json.dumps({"passed": report.passed, "tol": o["tol"], "errors": report.errors,
                                              "nonfinite": report.nonfinite}, indent=2))
    if not report.passed:
        raise NumericError("gradient check failed; worst: " + ", ".join(report.failing()[:5]))


HANDLERS = {"synth": cmd_synth, "train": cmd_train, "infer": cmd_infer, "attn": cmd_attn, "demos": cmd_demos,
            "bctrain": cmd_bctrain, "navigate": cmd_navigate, "gradcheck": cmd_gradcheck}


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr)
    parser = build_parser()
    try:
        args = vars(parser.parse_args(argv))
        command = args.pop("command")
        if command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        options = resolve_options(command, args)
        HANDLERS[command](options)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, DomainError, ShapeError, FitError, NumericError, OSError, ValueError,
            ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
