"""Command-line surface: train, sample, curve export, ablation, selftest.

Exit codes: 0 success, 1 test failure, 2 usage/config error,
3 numeric divergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import analysis, engine, model as M, rope, synthetic as S
from .checkpoint import load_checkpoint, save_checkpoint
from .tensor import ConfigError, NumericError, ShapeError

EXIT_OK = 0
EXIT_TEST_FAILURE = 1
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def load_run_config(path):
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    unknown = set(raw) - {"model", "train", "world"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    for section in ("model", "train", "world"):
        if section not in raw:
            raise ConfigError(f"config missing section {section!r}")
    if "seed" not in raw["world"]:
        raise ConfigError("world.seed must be explicit")
    if "seed" not in raw["train"]:
        raise ConfigError("train.seed must be explicit")
    model_cfg = M.DenoiserConfig.from_dict(raw["model"])
    train_cfg = engine.TrainConfig.from_dict(raw["train"])
    world_keys = {
        "seed", "n_ids", "d_id", "v_scene", "v_mot", "d_token", "sigma", "height", "width",
    }
    unknown = set(raw["world"]) - world_keys
    if unknown:
        raise ConfigError(f"unknown world config keys: {sorted(unknown)}")
    world = S.SyntheticWorld(**raw["world"])
    return model_cfg, train_cfg, world


def write_loss_csv(path, log):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss", "smoothed"])
        for step, loss, smoothed in log:
            writer.writerow([step, repr(loss), repr(smoothed)])


def run_config_dict(model_cfg, train_cfg, world):
    return {
        "model": model_cfg.to_dict(),
        "train": train_cfg.to_dict(),
        "world": world.config(),
    }


def cmd_train(args):
    model_cfg, train_cfg, world = load_run_config(args.config)
    if args.variant is not None:
        d = model_cfg.to_dict()
        d["variant"] = args.variant
        model_cfg = M.DenoiserConfig.from_dict(d)
    if args.seed is not None:
        d = train_cfg.to_dict()
        d["seed"] = args.seed
        train_cfg = engine.TrainConfig.from_dict(d)
    os.makedirs(args.out, exist_ok=True)
    params, log = engine.train(model_cfg, train_cfg, world)
    ckpt_path = os.path.join(args.out, "checkpoint.ecsh")
    save_checkpoint(ckpt_path, params, run_config_dict(model_cfg, train_cfg, world))
    write_loss_csv(os.path.join(args.out, "loss.csv"), log)
    print(f"checkpoint: {ckpt_path}")
    print(f"final loss: {log[-1][1]:.6f} (smoothed {log[-1][2]:.6f})")
    return EXIT_OK


def parse_shot_spec(text):
    """`n=4,scene=3,motion=1;n=6,scene=7` -> list of shot prompts."""
    prompts = []
    for segment in text.split(";"):
        segment = segment.strip()
        if not segment:
            raise ConfigError(f"empty shot segment in spec: {text!r}")
        fields = {}
        for part in segment.split(","):
            if "=" not in part:
                raise ConfigError(f"malformed shot segment: {segment!r}")
            key, _, value = part.partition("=")
            key = key.strip()
            if key not in ("n", "scene", "motion"):
                raise ConfigError(f"malformed shot segment: {segment!r}")
            try:
                fields[key] = int(value)
            except ValueError:
                raise ConfigError(f"malformed shot segment: {segment!r}") from None
        if "n" not in fields or "scene" not in fields:
            raise ConfigError(f"shot segment needs n= and scene=: {segment!r}")
        if fields["n"] < 1:
            raise ConfigError(f"frame counts must be >= 1: {segment!r}")
        prompts.append(
            engine.ShotPrompt(
                frames=fields["n"], scene=fields["scene"], motion=fields.get("motion", 0)
            )
        )
    return prompts


def _load_model(ckpt_path):
    if not os.path.exists(ckpt_path):
        raise ConfigError(f"checkpoint not found: {ckpt_path}")
    tensors, config = load_checkpoint(ckpt_path)
    from .tensor import Tensor

    params = {name: Tensor(arr, requires_grad=True) for name, arr in tensors.items()}
    model_cfg = M.DenoiserConfig.from_dict(config["model"])
    world = S.SyntheticWorld(**config["world"])
    return params, model_cfg, world, config


def cmd_sample(args):
    params, model_cfg, world, _ = _load_model(args.ckpt)
    specs = [parse_shot_spec(s) for s in args.shots]
    os.makedirs(args.out, exist_ok=True)
    id_embedding = None
    if args.id is not None:
        if not 0 <= args.id < world.n_ids:
            raise ConfigError(f"--id {args.id} outside identity pool")
        id_embedding = engine.identity_embedding(params, world, args.id)

    if args.ref_attn:
        if any(len(spec) < 1 for spec in specs):
            raise ConfigError("each --shots group needs at least one segment")
        ref = specs[0][0]
        for spec in specs[1:]:
            if spec[0] != ref:
                raise ConfigError(
                    "--ref-attn requires every --shots group to share the first segment"
                )
        rng = np.random.default_rng(np.random.SeedSequence(args.seed, spawn_key=(0,)))
        n0 = ref.frames * world.height * world.width
        ref_noise = rng.standard_normal((n0, world.d_token)).astype(np.float32)
        fields = engine.sample_infinite(
            params, model_cfg, world, ref, ref_noise,
            [spec[1:] for spec in specs],
            seed=args.seed, steps=args.steps, shift=args.shift, guidance=args.guidance,
            id_embedding=id_embedding,
        )
    else:
        if len(specs) != 1:
            raise ConfigError("multiple --shots groups require --ref-attn")
        fields = [
            engine.sample(
                params, model_cfg, world, specs[0],
                steps=args.steps, shift=args.shift, guidance=args.guidance,
                seed=args.seed, id_embedding=id_embedding,
            )
        ]

    from .checkpoint import save_tensors

    metrics = []
    for i, (tokens, spec) in enumerate(zip(fields, specs)):
        path = os.path.join(args.out, f"sample{i:04d}.ecsh")
        save_tensors(path, {"tokens": tokens})
        layout = engine.build_layout(spec, world)
        rec = engine.metrics_on_field(tokens, spec, layout, world)
        rec["file"] = os.path.basename(path)
        metrics.append(rec)
    summary = {
        key: float(np.mean([m[key] for m in metrics]))
        for key in ("identity_consistency", "scene_adherence", "cut_accuracy")
    }
    summary["n_samples"] = len(metrics)
    summary["seed"] = args.seed
    summary["samples"] = metrics
    with open(os.path.join(args.out, "metrics.json"), "w") as fh:
        json.dump(summary, fh, indent=2)
    print(json.dumps({k: summary[k] for k in ("identity_consistency", "scene_adherence", "cut_accuracy")}))
    return EXIT_OK


def cmd_curve(args):
    if args.dim % 2 != 0:
        raise ConfigError(f"--dim must be even, got {args.dim}")
    xs = np.arange(0.0, args.xmax + 1e-9, args.step)
    curve = analysis.delta_curve(args.dim, xs)
    analysis.write_curve_csv(curve, args.out)
    basis = rope.make_basis_1d(args.dim)
    for ds in range(5):
        x = args.k * ds
        d = analysis.partial_sum_magnitudes(args.dim, x, basis) / curve.f[0]
        print(f"delta(k*{ds}) = delta({x:g}) = {d:.6f}")
    print(f"curve written to {args.out}")
    return EXIT_OK


def _ablate_run(task):
    model_dict, train_dict, world_cfg, eval_cfg = task
    model_cfg = M.DenoiserConfig.from_dict(model_dict)
    train_cfg = engine.TrainConfig.from_dict(train_dict)
    world = S.SyntheticWorld(**world_cfg)
    params, _ = engine.train(model_cfg, train_cfg, world)
    metrics = engine.evaluate(params, model_cfg, world, **eval_cfg)
    return metrics


def cmd_ablate(args):
    model_cfg, train_cfg, world = load_run_config(args.config)
    os.makedirs(args.out, exist_ok=True)
    runs = []
    base = model_cfg.to_dict()
    for variant in ("vanilla", "tcrope", "full"):
        d = dict(base)
        d["variant"] = variant
        runs.append((variant, d["j"], d["k"], d))
    if args.grid:
        for j in (2.0, 4.0, 6.0):
            for k in (2.0, 6.0, 12.0):
                d = dict(base)
                d.update(variant="full", j=j, k=k)
                runs.append((f"full[j={j:g},k={k:g}]", j, k, d))

    eval_cfg = {"n_samples": args.eval_samples, "seed": train_cfg.seed, "steps": args.eval_steps}
    tasks = [(d, train_cfg.to_dict(), world.config(), eval_cfg) for _, _, _, d in runs]
    workers = int(os.environ.get("SHOTROPE_THREADS", os.cpu_count() or 1))
    workers = max(1, min(workers, len(tasks)))
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_ablate_run, tasks))
    else:
        results = [_ablate_run(t) for t in tasks]

    out_csv = os.path.join(args.out, "ablation.csv")
    with open(out_csv, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["variant", "j", "k", "default", "identity_consistency", "scene_adherence", "cut_accuracy"]
        )
        for (name, j, k, d), metrics in zip(runs, results):
            is_default = d["variant"] == "full" and j == 4.0 and k == 6.0
            writer.writerow(
                [
                    name, j, k, "yes" if is_default else "no",
                    repr(metrics["identity_consistency"]),
                    repr(metrics["scene_adherence"]),
                    repr(metrics["cut_accuracy"]),
                ]
            )
    for (name, _, _, _), metrics in zip(runs, results):
        print(
            f"{name}: scene_adherence={metrics['scene_adherence']:.3f} "
            f"identity={metrics['identity_consistency']:.3f} cut={metrics['cut_accuracy']:.3f}"
        )
    print(f"table written to {out_csv}")
    return EXIT_OK


def cmd_selftest(args):
    from . import selftest

    if args.sabotage:
        rope._SABOTAGE = args.sabotage
    try:
        report = selftest.run_all()
    finally:
        rope._SABOTAGE = None
    ok = True
    for name, passed, detail in report:
        status = "PASS" if passed else "FAIL"
        line = f"{status} {name}"
        if detail and not passed:
            line += f" ({detail})"
        print(line)
        ok = ok and passed
    return EXIT_OK if ok else EXIT_TEST_FAILURE


def build_parser():
    parser = argparse.ArgumentParser(prog="shotrope")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a denoiser on the synthetic world")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--variant", choices=M.VARIANTS)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="generate token fields from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--shots", action="append", required=True)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--shift", type=float, default=5.0)
    p.add_argument("--guidance", type=float, default=5.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ref-attn", action="store_true")
    p.add_argument("--id", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("curve", help="export the suppression bound curve")
    p.add_argument("--dim", type=int, default=128)
    p.add_argument("--k", type=float, default=6.0)
    p.add_argument("--xmax", type=float, default=50.0)
    p.add_argument("--step", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_curve)

    p = sub.add_parser("ablate", help="train and evaluate ablation variants")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--grid", action="store_true")
    p.add_argument("--eval-samples", type=int, default=32)
    p.add_argument("--eval-steps", type=int, default=50)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("selftest", help="run the property suites")
    p.add_argument("--sabotage", choices=["rope-sign"], help="test-only fault injection")
    p.set_defaults(func=cmd_selftest)

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except (ConfigError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
