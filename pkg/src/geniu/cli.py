"""Command-line driver: train, unlearn, eval, sweep, ablate, dump-images.

Exit codes: 0 success, 2 usage or configuration error, 1 runtime failure.
Every command echoes its resolved configuration into the output directory.
The unlearn command works entirely from saved bundles; it opens no dataset.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from .artifacts import (
    load_generator,
    load_model,
    load_noise_bank,
    save_generator,
    save_model,
    save_noise_bank,
)
from .classifier import evaluate
from .config import UnlearnDefaults, echo_config, load_config
from .data import build_imbalanced, dataset_nbytes
from .errors import ArtifactError, ConfigError, GeniuError, IdxFormatError
from .evaluation import (
    draw_majority_samples,
    kl_perception,
    run_cell,
    storage_report,
    sweep,
    time_unlearning,
)
from .generator import generate_proxies
from .training import run_training_phase, write_phase_log
from .unlearn import (
    UnlearnRequest,
    impair_repair,
    post_hoc_proxies,
    run_unlearning,
    write_trajectory,
)


def _parse_ints(text: str, what: str):
    try:
        return [int(tok) for tok in text.split(",") if tok != ""]
    except ValueError:
        raise ConfigError(f"{what} must be a comma-separated integer list, got {text!r}")


def _parse_rates(text: str):
    rates = []
    for tok in text.split(","):
        if tok == "":
            continue
        if tok == "vary":
            rates.append("vary")
            continue
        try:
            rates.append(float(tok))
        except ValueError:
            raise ConfigError(f"rate {tok!r} is neither a number nor 'vary'")
    if not rates:
        raise ConfigError("need at least one rate")
    return rates


def _out_dir(args, config=None) -> Path:
    out = args.out or (config.out_dir if config is not None else "")
    if not out:
        raise ConfigError("give --out (or set out_dir in the config)")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _build_splits(config, seed):
    train_ds, test_ds = config.dataset.build(seed)
    if test_ds is None:
        raise ConfigError("this command needs a test split; set test_*_path")
    return train_ds, test_ds


def cmd_train(args) -> int:
    config = load_config(args.config)
    seed = config.resolved_seed(args.seed)
    out = _out_dir(args, config)
    echo_config(config, out, seed)

    train_ds, _ = config.dataset.build(seed)
    K = config.train.arch.num_classes
    imb = build_imbalanced(train_ds, config.imbalance.spec(K), seed)
    phase = run_training_phase(imb, config.train_config(seed))

    save_model(out / "model", phase.model)
    save_noise_bank(out / "noise_bank", phase.bank)
    save_generator(out / "generator", phase.gen)
    write_phase_log(out / "phase_log.csv", phase.log)
    print(f"trained {phase.log[-1].epoch + 1} epochs, "
          f"gate_passed={phase.gate_ever_passed}, artifacts in {out}")
    return 0


def _unlearn_defaults(model_dir: Path) -> UnlearnDefaults:
    echo = model_dir / "config.json"
    if echo.is_file():
        payload = json.loads(echo.read_text()).get("unlearn", {})
        return UnlearnDefaults(**{k: v for k, v in payload.items()
                                  if not k.startswith("_")})
    return UnlearnDefaults()


def cmd_unlearn(args) -> int:
    model_dir = Path(args.model)
    model = load_model(model_dir / "model")
    bank = load_noise_bank(model_dir / "noise_bank")
    gen = load_generator(model_dir / "generator")
    defaults = _unlearn_defaults(model_dir)

    forget = frozenset(_parse_ints(args.forget, "--forget"))
    request = UnlearnRequest(
        forget_classes=forget,
        rounds=defaults.rounds if args.rounds is None else args.rounds,
        lr=defaults.lr if args.lr is None else args.lr,
        strategy=args.strategy or defaults.strategy,
        eps=defaults.eps,
    )
    out = _out_dir(args)

    box = {}

    def job():
        box["out"] = run_unlearning(model, bank, gen, request)

    ms = time_unlearning(job)
    tuned, trajectory = box["out"]
    save_model(out / "model_unlearned", tuned)
    write_trajectory(out / "trajectory.csv", trajectory)
    with open(out / "unlearn.json", "w") as fh:
        json.dump({
            "model_dir": str(model_dir),
            "forget_classes": sorted(forget),
            "rounds": request.rounds,
            "lr": request.lr,
            "strategy": request.strategy,
            "unlearn_ms": ms,
        }, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"unlearned classes {sorted(forget)} in {ms:.1f} ms, artifacts in {out}")
    return 0


def cmd_eval(args) -> int:
    config = load_config(args.config)
    seed = config.resolved_seed(args.seed)
    model_dir = Path(args.model)
    bundle = model_dir if (model_dir / "manifest.json").is_file() \
        else model_dir / args.bundle
    model = load_model(bundle)

    train_ds, test_ds = _build_splits(config, seed)
    forget = frozenset(_parse_ints(args.forget, "--forget")) if args.forget else frozenset()
    breakdown = evaluate(model, test_ds, forget_classes=forget)

    payload = {
        "bundle": str(bundle),
        "seed": seed,
        "forget_classes": sorted(forget),
        "per_class": [None if np.isnan(v) else float(v) for v in breakdown.per_class],
        "acc_retain": breakdown.acc_retain,
        "acc_forget": None if np.isnan(breakdown.acc_forget) else breakdown.acc_forget,
        "macro_retain": breakdown.macro_retain,
        "n_retain": breakdown.n_retain,
        "n_forget": breakdown.n_forget,
    }

    K = config.train.arch.num_classes
    noise_dir, gen_dir = model_dir / "noise_bank", model_dir / "generator"
    if noise_dir.is_dir() and gen_dir.is_dir():
        imb = build_imbalanced(train_ds, config.imbalance.spec(K), seed)
        payload["storage"] = storage_report(noise_dir, gen_dir, dataset_nbytes(imb))
        majority = config.imbalance.majority
        bank = load_noise_bank(noise_dir)
        non_majority = [k for k in range(K) if k not in majority]
        if non_majority:
            maj_images = draw_majority_samples(imb, majority, seed=seed)
            payload["kl_perception"] = kl_perception(
                model, maj_images, bank.noises[non_majority])

    if args.out:
        out = _out_dir(args)
        echo_config(config, out, seed)
        with open(out / "eval.json", "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
    acc_f = payload["acc_forget"]
    print(f"acc_retain={payload['acc_retain']:.4f} "
          f"acc_forget={'n/a' if acc_f is None else format(acc_f, '.4f')} "
          f"n={breakdown.n_retain + breakdown.n_forget}")
    return 0


def cmd_sweep(args) -> int:
    config = load_config(args.config)
    out = _out_dir(args, config)
    rates = _parse_rates(args.rates)
    forgets = _parse_ints(args.forget, "--forget")
    seeds = _parse_ints(args.seeds, "--seeds")
    if not forgets or not seeds:
        raise ConfigError("--forget and --seeds must be nonempty")
    echo_config(config, out, config.resolved_seed(args.seed))

    splits = {}

    def cell(rate, forget_class, seed, cell_dir):
        key = seed if config.dataset.preset == "blobs" else "static"
        if key not in splits:
            splits[key] = _build_splits(config, seed)
        train_ds, test_ds = splits[key]
        return run_cell(train_ds, test_ds, config.train_config(seed), rate,
                        forget_class, cell_dir, rounds=config.unlearn.rounds,
                        unlearn_lr=config.unlearn.lr,
                        strategy=config.unlearn.strategy)

    reports = sweep(cell, rates, forgets, seeds, out)
    print(f"{len(reports)} cells -> {out / 'sweep.csv'}")
    return 0


ABLATE_MODES = ("impair_repair", "post", "min_entropy")


def cmd_ablate(args) -> int:
    config = load_config(args.config)
    seed = config.resolved_seed(args.seed)
    out = _out_dir(args, config)
    echo_config(config, out, seed)

    train_ds, test_ds = _build_splits(config, seed)
    K = config.train.arch.num_classes
    forget = int(args.forget)
    majority = frozenset({forget})
    imb = build_imbalanced(
        train_ds,
        dataclasses.replace(config.imbalance, majority=(forget,)).spec(K),
        seed)
    train_cfg = config.train_config(seed)
    phase = run_training_phase(imb, train_cfg)

    rounds, lr = config.unlearn.rounds, config.unlearn.lr
    request = UnlearnRequest(forget_classes=majority, rounds=rounds, lr=lr)
    tuned, _ = run_unlearning(phase.model, phase.bank, phase.gen, request)
    standard = evaluate(tuned, test_ds, forget_classes=majority)

    if args.mode == "impair_repair":
        # same total step budget, split across the two phases
        proxies, labels = generate_proxies(phase.bank, phase.gen)
        variant_model, _ = impair_repair(phase.model, proxies, labels, majority,
                                         rounds=rounds // 2, lr=lr)
    elif args.mode == "post":
        ph_bank, ph_gen = post_hoc_proxies(phase.model, imb, train_cfg)
        variant_model, _ = run_unlearning(phase.model, ph_bank, ph_gen, request)
    else:  # min_entropy supervision selection for the generator
        alt_cfg = dataclasses.replace(train_cfg, selection_mode="min_entropy")
        alt_phase = run_training_phase(imb, alt_cfg)
        variant_model, _ = run_unlearning(alt_phase.model, alt_phase.bank,
                                          alt_phase.gen, request)
    variant = evaluate(variant_model, test_ds, forget_classes=majority)

    payload = {
        "mode": args.mode,
        "forget_class": forget,
        "seed": seed,
        "rounds": rounds,
        "standard": {"acc_forget": standard.acc_forget,
                     "acc_retain": standard.acc_retain},
        "variant": {"acc_forget": variant.acc_forget,
                    "acc_retain": variant.acc_retain},
    }
    with open(out / "ablation.json", "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"mode={args.mode} standard retain={standard.acc_retain:.4f} "
          f"variant retain={variant.acc_retain:.4f}")
    return 0


def write_pgm(path, image) -> None:
    """8-bit binary PGM, min-max normalized; constant images map to 128."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        if img.shape[0] != 1:
            raise ConfigError(f"PGM needs single-channel images, got {img.shape}")
        img = img[0]
    if img.ndim != 2:
        raise ConfigError(f"not an image: shape {img.shape}")
    lo, hi = float(img.min()), float(img.max())
    if hi - lo < 1e-12:
        pixels = np.full(img.shape, 128, dtype=np.uint8)
    else:
        pixels = np.clip(np.rint((img - lo) / (hi - lo) * 255.0), 0, 255).astype(np.uint8)
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(pixels.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    header, pixels = data.split(b"\n255\n", 1)
    magic, dims = header.split(b"\n", 1)
    if magic != b"P5":
        raise ConfigError(f"{path}: not a binary PGM")
    w, h = (int(tok) for tok in dims.split())
    return np.frombuffer(pixels, dtype=np.uint8, count=w * h).reshape(h, w)


def cmd_dump_images(args) -> int:
    model_dir = Path(args.model)
    bank = load_noise_bank(model_dir / "noise_bank")
    if args.source == "noises":
        images = bank.noises
    else:
        gen = load_generator(model_dir / "generator")
        images, _ = generate_proxies(bank, gen)
    out = _out_dir(args)
    for k in range(images.shape[0]):
        write_pgm(out / f"class_{k}.pgm", images[k])
    print(f"wrote {images.shape[0]} PGM files to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="geniu",
        description="Class unlearning without training data: concurrently "
                    "trained noise prompts and proxy generator, in-batch tuning.")
    sub = parser.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run the full training phase")
    t.add_argument("--config", required=True, help="config JSON path or preset name")
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--out", default="")
    t.set_defaults(func=cmd_train)

    u = sub.add_parser("unlearn", help="tune away classes using saved artifacts only")
    u.add_argument("--model", required=True, help="training output directory")
    u.add_argument("--forget", required=True, help="comma-separated class list")
    u.add_argument("--rounds", type=int, default=None)
    u.add_argument("--lr", type=float, default=None)
    u.add_argument("--strategy", choices=("in_batch", "impair_repair"), default=None)
    u.add_argument("--out", default="")
    u.set_defaults(func=cmd_unlearn)

    e = sub.add_parser("eval", help="accuracy report for a saved model")
    e.add_argument("--model", required=True, help="bundle dir or run dir")
    e.add_argument("--bundle", default="model",
                   help="bundle subdirectory when --model is a run dir")
    e.add_argument("--config", required=True)
    e.add_argument("--forget", default="")
    e.add_argument("--seed", type=int, default=None)
    e.add_argument("--out", default="")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="grid over imbalance rates, forget classes, seeds")
    s.add_argument("--config", required=True)
    s.add_argument("--rates", required=True, help="e.g. 0.1,0.2,0.4,vary")
    s.add_argument("--forget", required=True, help="forget-class choices")
    s.add_argument("--seeds", required=True)
    s.add_argument("--seed", type=int, default=None, help="seed echoed in config")
    s.add_argument("--out", default="")
    s.set_defaults(func=cmd_sweep)

    a = sub.add_parser("ablate", help="compare one variant against the standard run")
    a.add_argument("--config", required=True)
    a.add_argument("--mode", required=True, choices=ABLATE_MODES)
    a.add_argument("--forget", required=True, type=int)
    a.add_argument("--seed", type=int, default=None)
    a.add_argument("--out", default="")
    a.set_defaults(func=cmd_ablate)

    d = sub.add_parser("dump-images", help="write per-class PGM images")
    d.add_argument("--model", required=True, help="run dir with saved bundles")
    d.add_argument("--source", choices=("noises", "proxies"), default="noises")
    d.add_argument("--out", default="")
    d.set_defaults(func=cmd_dump_images)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ArtifactError, IdxFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 2
    except GeniuError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # keep the traceback out of scripted pipelines
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
