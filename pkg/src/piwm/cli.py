"""Umbrella command line: collect | mask | train | rollout | eval | bench | serve."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np


def _add_collect(sub):
    p = sub.add_parser("collect", help="gather episodes with the tree-search agent")
    p.add_argument("--episodes", type=int, required=True)
    p.add_argument("--steps", type=int, required=True, help="frames per episode")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--mcts-sims", type=int, default=64)
    p.add_argument("--npc-count", type=int, default=12)
    p.add_argument("--policy", choices=["mcts", "random"], default="mcts")


def _add_mask(sub):
    p = sub.add_parser("mask", help="compute masks for frames (golden-file PNGs)")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--mode", choices=["soft", "hard"], default="soft")
    p.add_argument("--params", help="JSON file with mask parameter overrides")
    p.add_argument("--out", required=True)


def _add_train(sub):
    p = sub.add_parser("train", help="train a denoiser on a collected dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--mask", choices=["soft", "hard", "none"], default="soft")
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--resume")


def _add_rollout(sub):
    p = sub.add_parser("rollout", help="autoregressive generation to PNG frames")
    p.add_argument("--model", required=True)
    p.add_argument("--frames", type=int, required=True)
    p.add_argument("--actions", default="random",
                   help="JSON file with an action list, or 'random'")
    p.add_argument("--warm-start", action="store_true")
    p.add_argument("--sigma-off", type=float, default=0.1)
    p.add_argument("--sigma-ew", type=float, default=0.5)
    p.add_argument("--mask", choices=["soft", "hard", "none"], default=None,
                   help="default: soft when the model has a mask channel")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)


def _add_eval(sub):
    p = sub.add_parser("eval", help="physical-consistency metrics for a model")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--suite", default="default")
    p.add_argument("--mask", choices=["soft", "hard", "none"], default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", required=True)


def _add_bench(sub):
    p = sub.add_parser("bench", help="latency/throughput/memory harness")
    p.add_argument("--model", required=True)
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--frames", type=int, default=200)
    p.add_argument("--discard", type=int, default=5)
    p.add_argument("--mask", choices=["soft", "hard", "none"], default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)


def _add_serve(sub):
    p = sub.add_parser("serve", help="run the interactive session server")
    p.add_argument("--model", help="weights served to wm sessions")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--static", help="directory with the browser cockpit bundle")


def _mask_mode_for(model, override):
    if override is not None:
        return override
    return "soft" if model.config.mask_channels else "none"


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="piwm")
    sub = parser.add_subparsers(dest="cmd", required=True)
    for add in (_add_collect, _add_mask, _add_train, _add_rollout, _add_eval,
                _add_bench, _add_serve):
        add(sub)
    args = parser.parse_args(argv)

    if args.cmd == "collect":
        from .collect import MctsConfig, collect_episodes
        from .sim import SimConfig
        manifest = collect_episodes(
            args.episodes, args.steps, SimConfig(npc_count=args.npc_count),
            MctsConfig(simulations_per_move=args.mcts_sims), args.seed, args.out,
            policy=args.policy)
        print(f"wrote {len(manifest.episodes)} episodes to {args.out}")

    elif args.cmd == "mask":
        from . import mask as M
        from .imgio import load_frame_png, save_gray_png
        overrides = json.loads(Path(args.params).read_text()) if args.params else {}
        params = M.MaskParams(mode=args.mode, **overrides)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        count = 0
        for png in sorted(Path(args.in_dir).glob("*.png")):
            frame = load_frame_png(png)
            if args.mode == "hard":
                field = M.hard_mask(*M.classify_colors(frame, params))
            else:
                field = M.soft_mask(frame, params)
            th = params.target_h or field.shape[0]
            tw = params.target_w or field.shape[1]
            save_gray_png(M.downsample_bicubic(field, th, tw), out / png.name)
            count += 1
        print(f"wrote {count} mask PNGs to {out}")

    elif args.cmd == "train":
        from .collect import load_dataset
        from .nn.denoiser import DenoiserConfig
        from .train import TrainConfig, train
        ds = load_dataset(args.data)
        cfg = TrainConfig(steps=args.steps, batch_size=args.batch,
                          learning_rate=args.lr, mask_mode=args.mask,
                          seed=args.seed)
        dn = DenoiserConfig(base_width=args.width,
                            mask_channels=0 if args.mask == "none" else 1)
        res = train(ds, cfg, args.out, dn_config=dn, resume=args.resume)
        print(f"model: {res.model_path}  final loss: {res.final_loss:.5f}")

    elif args.cmd == "rollout":
        from . import mask as M
        from .bench import action_script, BenchConfig
        from .imgio import save_frame_png
        from .nn.weights import load_weights
        from .sample import SamplerConfig, rollout
        from .sim import Action, SimConfig, render_bev, spawn, step
        model = load_weights(args.model)
        mode = _mask_mode_for(model, args.mask)
        mask_params = None if mode == "none" else M.MaskParams(mode=mode)
        if args.actions == "random":
            rng = np.random.default_rng(args.seed)
            actions = [int(rng.integers(len(Action))) for _ in range(args.frames)]
        else:
            actions = json.loads(Path(args.actions).read_text())[:args.frames]
        hist = model.config.history_len
        world = spawn(SimConfig(), args.seed)
        frames = [render_bev(world)]
        for _ in range(hist - 1):
            world = step(world, Action.IDLE)
            frames.append(render_bev(world))
        cfg = SamplerConfig(warm_start=args.warm_start, sigma_off=args.sigma_off,
                            sigma_ew=args.sigma_ew)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        gen = rollout(frames, [int(Action.IDLE)] * (hist - 1), actions, model, cfg,
                      mask_params, seed=args.seed)
        for i, f in enumerate(gen):
            save_frame_png(f, out / f"frame_{i:05d}.png")
        (out / "trace.json").write_text(json.dumps(
            {"actions": actions, "seed": args.seed,
             "warm_start": args.warm_start}, indent=2))
        print(f"wrote {len(gen)} frames to {out}")

    elif args.cmd == "eval":
        from . import mask as M
        from .collect import load_dataset
        from .eval import evaluate_model
        from .nn.weights import load_weights
        model = load_weights(args.model)
        mode = _mask_mode_for(model, args.mask)
        mask_params = None if mode == "none" else M.MaskParams(mode=mode)
        report = evaluate_model(model, load_dataset(args.data), seed=args.seed,
                                mask_params=mask_params)
        Path(args.report).write_text(json.dumps(report.to_dict(), indent=2))
        print(f"iec={report.iec:.2f} kir={report.kir:.2f} tec={report.tec:.2f} "
              f"wo={report.wo:.2f} psnr={report.psnr_db:.2f} dB")

    elif args.cmd == "bench":
        from .bench import BenchConfig, run_bench
        from .nn.weights import load_weights
        model = load_weights(args.model)
        mode = _mask_mode_for(model, args.mask)
        cfg = BenchConfig(trials=args.trials, frames_per_trial=args.frames,
                          warmup_discard=args.discard, seed=args.seed,
                          mask_mode=mode)
        report = run_bench(model, cfg, out_path=args.out)
        print(f"p95 latency {report.p95_latency_ms:.2f} ms, "
              f"p95 fps {report.p95_fps:.1f}, peak rss {report.peak_rss_mib:.0f} MiB")

    elif args.cmd == "serve":
        import uvicorn
        from .service import create_app
        app = create_app(default_model_path=args.model, static_dir=args.static)
        uvicorn.run(app, host=args.host, port=args.port)

    return 0


if __name__ == "__main__":
    sys.exit(main())
