"""Command-line surface: gen-data, train, eval, ablate, gradcheck."""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path


from .catch import (CatchConfig, all_prompt_catalogs, generate_dataset,
                    read_dataset, write_dataset)
from .config import ConfigError, load_config, echo_config
from .encoding import build_encoder
from .evaluation import (ABLATION_AXES, AblationSpec, ExpertOraclePredictor,
                         ModelPredictor, RolloutConfig, ablation_table_csv,
                         bar_chart_svg, line_plot_svg, rollout, run_ablation)
from .model import ModelConfig
from .training import (TrainConfig, load_checkpoint, params_to_tensors, train)
from . import verify

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


def _write_manifest(out_dir: Path) -> None:
    out_dir = Path(out_dir)
    entries = []
    for f in sorted(out_dir.rglob("*")):
        if f.is_file() and f.name != "MANIFEST":
            digest = hashlib.sha256(f.read_bytes()).hexdigest()
            entries.append(f"{digest}  {f.relative_to(out_dir)}")
    stamp = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())
    (out_dir / "MANIFEST").write_text(
        f"# generated {stamp}\n" + "\n".join(entries) + "\n")


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config, overrides=_seed_override(args))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    echo_config(cfg, out)
    env = CatchConfig(**cfg["env"])
    for tier in cfg["data"]["tiers"]:
        ds = generate_dataset(env, tier, cfg["data"]["n_episodes"], seed=cfg["seed"])
        write_dataset(ds, out / f"{tier}.json")
        print(f"wrote {tier}.json: {len(ds.trajectories)} episodes, "
              f"mean return {ds.mean_return:.4f}")
    _write_manifest(out)
    return EXIT_OK


def _seed_override(args) -> dict:
    return {"seed": args.seed} if getattr(args, "seed", None) is not None else {}


def _train_config_from(cfg: dict, data_path: str) -> TrainConfig:
    model = ModelConfig(**cfg["model"])
    t = cfg["train"]
    return TrainConfig(steps=t["steps"], lr_peak=t["lr_peak"],
                       warmup_steps=t["warmup_steps"],
                       batch_tokens=t["batch_tokens"], seed=cfg["seed"],
                       eval_every=t["eval_every"], eval_episodes=t["eval_episodes"],
                       grad_clip=t["grad_clip"], weight_decay=t["weight_decay"],
                       prompt_variant=t["prompt_variant"],
                       d_a=cfg["encoder"]["d_a"], d_s=cfg["encoder"]["d_s"],
                       dataset_path=data_path, model=model)


def cmd_train(args) -> int:
    overrides = _seed_override(args)
    if args.rtg_mode is not None:
        overrides.setdefault("model", {})["rtg_mode"] = args.rtg_mode
    cfg = load_config(args.config, overrides=overrides)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    echo_config(cfg, out)
    train_cfg = _train_config_from(cfg, args.data)

    eval_hook = None
    if cfg["train"]["eval_every"] > 0:
        dataset = read_dataset(args.data)

        def eval_hook(params, encoder, model_cfg, step):
            predictor = ModelPredictor(params, model_cfg, encoder,
                                       cfg["train"]["prompt_variant"],
                                       query_mode=cfg["rollout"]["query_mode"])
            rcfg = RolloutConfig(target_return=dataset.expert_return,
                                 n_episodes=cfg["train"]["eval_episodes"],
                                 seed=cfg["seed"] + 7000 + step,
                                 prompt_variant=cfg["train"]["prompt_variant"],
                                 query_mode=cfg["rollout"]["query_mode"])
            report = rollout(predictor, dataset.config, encoder, rcfg,
                             expert_return=dataset.expert_return,
                             random_return=dataset.random_return)
            return report.normalized

    ckpt = train(train_cfg, out, resume_from=args.resume, eval_hook=eval_hook)
    losses = [row["loss"] for row in ckpt.history]
    steps = [row["step"] for row in ckpt.history]
    (out / "loss_curve.svg").write_text(line_plot_svg(steps, losses, "training loss"))
    _write_manifest(out)
    print(f"trained {ckpt.step} steps; final loss {losses[-1]:.6f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_config(args.config, overrides=_seed_override(args))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    echo_config(cfg, out)
    variant = cfg["train"]["prompt_variant"]

    if args.oracle:
        env = CatchConfig(**cfg["env"])
        encoder = build_encoder(all_prompt_catalogs(), env, seed=cfg["seed"],
                                d_a=cfg["encoder"]["d_a"], d_s=cfg["encoder"]["d_s"])
        from .catch import policy_mean_return
        expert_ret = policy_mean_return(env, "expert", 1000, seed=cfg["seed"] + 1)
        random_ret = policy_mean_return(env, "random", 10_000, seed=cfg["seed"] + 2)
        predictor = ExpertOraclePredictor(encoder, variant)
    else:
        if args.checkpoint is None:
            print("eval: --checkpoint is required unless --oracle is given",
                  file=sys.stderr)
            return EXIT_USAGE
        ckpt = load_checkpoint(args.checkpoint)
        encoder = ckpt.encoder
        env = CatchConfig(grid_width=encoder.grid_width,
                          grid_height=encoder.grid_height)
        variant = ckpt.train_config.prompt_variant
        dataset = read_dataset(args.data or ckpt.train_config.dataset_path)
        expert_ret, random_ret = dataset.expert_return, dataset.random_return
        predictor = ModelPredictor(params_to_tensors(ckpt.params), ckpt.config,
                                   encoder, variant,
                                   query_mode=cfg["rollout"]["query_mode"])

    target = cfg["rollout"]["target_return"]
    rcfg = RolloutConfig(target_return=expert_ret if target is None else target,
                         n_episodes=args.episodes, seed=cfg["seed"],
                         query_mode=cfg["rollout"]["query_mode"],
                         prompt_variant=variant)
    report = rollout(predictor, env, encoder, rcfg,
                     expert_return=expert_ret, random_return=random_ret)
    (out / "eval_report.json").write_text(
        json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    lines = ["episode,return"]
    lines += [f"{i},{r!r}" for i, r in enumerate(report.returns)]
    (out / "eval_report.csv").write_text("\n".join(lines) + "\n")
    (out / "returns.svg").write_text(line_plot_svg(
        range(len(report.returns)), report.returns, "per-episode return"))
    _write_manifest(out)
    print(f"mean return {report.mean_return:.4f}, "
          f"normalized score {report.normalized:.2f}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = load_config(args.config, overrides=_seed_override(args))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    echo_config(cfg, out)
    a = cfg["ablation"]
    spec = AblationSpec(axis=args.axis, seeds=tuple(a["seeds"]),
                        levels=tuple(a["levels"]),
                        dataset_episodes=a["dataset_episodes"],
                        eval_episodes=a["eval_episodes"], steps=a["steps"],
                        warmup_steps=a["warmup_steps"],
                        batch_tokens=a["batch_tokens"], d_model=a["d_model"],
                        n_layers=a["n_layers"])
    rows = run_ablation(spec, out / "runs")
    (out / "ablation.csv").write_text(ablation_table_csv(spec, rows))
    (out / "ablation.svg").write_text(bar_chart_svg(
        [r.level for r in rows], [r.mean for r in rows], [r.std for r in rows],
        f"normalized score by {spec.axis} (mean +/- std over {len(spec.seeds)} seeds)"))
    _write_manifest(out)
    for r in rows:
        if r.failed:
            print(f"{spec.axis}={r.level}: FAILED")
        else:
            print(f"{spec.axis}={r.level}: {r.mean:.1f} +/- {r.std:.1f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    rows = verify.run_suite(inject_fault=args.inject_fault, trials=args.trials)
    worst_overall = 0.0
    worst_component = ""
    for name, err, where in rows:
        status = "ok" if err < verify.THRESHOLD else "FAIL"
        print(f"{name}: worst relative error {err:.3e} ({where}) [{status}]")
        if err > worst_overall:
            worst_overall, worst_component = err, f"{name} at {where}"
    if worst_overall >= verify.THRESHOLD:
        print(f"gradcheck failed: {worst_component} "
              f"(error {worst_overall:.3e} >= {verify.THRESHOLD})", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"gradcheck passed: all components below {verify.THRESHOLD}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rtgformer",
        description="Return-conditioned sequence model on the Catch toy environment")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write offline dataset tiers")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the sequence model")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--rtg-mode", choices=("condition", "linear"), default=None)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="closed-loop evaluation of a checkpoint")
    p.add_argument("--config", default=None)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--data", default=None,
                   help="dataset providing reference returns (default: the "
                        "checkpoint's training dataset)")
    p.add_argument("--episodes", type=int, default=10)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--oracle", action="store_true",
                   help="evaluate the expert-stub predictor instead of a checkpoint")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run one ablation axis")
    p.add_argument("--axis", required=True, choices=ABLATION_AXES)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference verification suite")
    p.add_argument("--trials", type=int, default=5)
    p.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValueError, OSError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
