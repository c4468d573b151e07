"""``evfuse`` command line: synth, train, track, eval, stack-preview.

Exit codes: 0 success, 2 configuration error, 3 data integrity error,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from .config import RunConfig
from .errors import ConfigError, EvfuseError, IntegrityError

log = logging.getLogger("evfuse")


def _config(args) -> RunConfig:
    overrides = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    if getattr(args, "config", None):
        return RunConfig.from_file(args.config, overrides)
    return RunConfig(overrides)


def load_dataset(path) -> list:
    from .datamodel import load_sequence

    root = Path(path)
    if (root / "groundtruth.txt").exists():
        return [load_sequence(root)]
    dirs = sorted(p for p in root.iterdir() if p.is_dir() and (p / "groundtruth.txt").exists()) if root.is_dir() else []
    if not dirs:
        raise IntegrityError(f"{root}: no sequences found")
    return [load_sequence(d) for d in dirs]


def _prepare_out(out: Path, force: bool):
    if out.exists() and any(out.iterdir()) and not force:
        raise ConfigError(f"{out} exists and is not empty (use --force)")
    out.mkdir(parents=True, exist_ok=True)


def cmd_synth(args) -> int:
    from .datamodel import SynthConfig, generate_synthetic_sequence, write_sequence

    overrides = {}
    if args.n is not None:
        overrides["synth.n"] = args.n
    if args.seed is not None:
        overrides["synth.seed"] = args.seed
    if args.misalign is not None:
        overrides["synth.misalign"] = args.misalign
    cfg = _config(args).update_checked(overrides)
    out = Path(args.out)
    _prepare_out(out, args.force)
    s = cfg.section("synth")
    manifest = {"config_hash": cfg.hash, "misalignment": list(s["misalign"]), "sequences": []}
    for k in range(s["n"]):
        seed = s["seed"] + k
        sc = SynthConfig(
            n_frames=s["n_frames"], width=s["width"], height=s["height"],
            object_size=(s["object_w"], s["object_h"]), speed=s["speed"],
            event_threshold=s["event_threshold"], misalignment=tuple(s["misalign"]), noise=s["noise"],
        )
        rec = generate_synthetic_sequence(sc, seed, name=f"seq_{k:03d}", split=args.split)
        write_sequence(rec, out / rec.name)
        manifest["sequences"].append({"name": rec.name, "seed": seed, "misalignment": list(s["misalign"])})
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    print(f"wrote {s['n']} sequences to {out}")
    return 0


def cmd_train(args) -> int:
    from .trainer import Trainer, save_checkpoint

    overrides = {}
    if args.variant:
        overrides["model.variant"] = args.variant
    if args.seed is not None:
        overrides["train.seed"] = args.seed
    cfg = _config(args).update_checked(overrides)
    seqs = load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.dump(out / "config.yaml")
    trainer = Trainer(cfg, seqs)
    steps = args.steps if args.steps is not None else cfg["train.epochs"] * cfg["train.steps_per_epoch"]
    with open(out / "train_log.jsonl", "w") as f:
        f.write(json.dumps({"config_hash": cfg.hash, "variant": cfg["model.variant"],
                            "sequences": [s.name for s in seqs], "steps": steps}) + "\n")
        trainer.fit(steps, log_file=f)
    last = trainer.history[-1]["total"] if trainer.history else None
    save_checkpoint(out / "checkpoint.pt", trainer.model, trainer.optimizer, trainer.step,
                    trainer.epoch, {"final_total_loss": last})
    print(f"trained {steps} steps ({cfg['model.variant']}), checkpoint at {out / 'checkpoint.pt'}")
    return 0


def cmd_track(args) -> int:
    from .tracker import run_sequence
    from .trainer import load_checkpoint

    expect = _config(args) if (args.config or args.set) else None
    ck = load_checkpoint(args.checkpoint, expect)
    model = ck.build_model()
    seqs = load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg_hash = RunConfig(ck.config).hash

    def one(seq):
        return seq, run_sequence(seq, model)

    with ThreadPoolExecutor(max_workers=max(1, args.workers)) as pool:
        results = list(pool.map(one, seqs))
    for seq, traj in results:
        traj.write(out / f"{seq.name}.txt")
        sidecar = {
            "sequence": seq.name,
            "config_hash": cfg_hash,
            "frames": len(traj.boxes),
            "time_total_s": traj.time_total,
            "time_network_s": traj.time_network,
            "fps_total": len(traj.boxes) / max(sum(traj.time_total), 1e-12),
            "fps_network": max(len(traj.boxes) - 1, 1) / max(sum(traj.time_network), 1e-12),
        }
        (out / f"{seq.name}.timing.json").write_text(json.dumps(sidecar, indent=1) + "\n")
    print(f"tracked {len(results)} sequences into {out}")
    return 0


def _load_trajectories(traj_dir: Path, seqs) -> tuple:
    from .tracker import read_trajectory

    missing = [s.name for s in seqs if not (traj_dir / f"{s.name}.txt").exists()]
    if missing:
        raise IntegrityError(f"{traj_dir}: missing trajectories for {', '.join(missing)}")
    trajs, hashes = [], set()
    for s in seqs:
        trajs.append(read_trajectory(traj_dir / f"{s.name}.txt"))
        side = traj_dir / f"{s.name}.timing.json"
        if side.exists():
            hashes.add(json.loads(side.read_text()).get("config_hash"))
    return trajs, hashes


def cmd_eval(args) -> int:
    from .evaluation import emit_plots, evaluate_with_attributes, result_to_dict

    seqs = load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    names = args.name or [Path(t).name for t in args.traj]
    if len(names) != len(args.traj):
        raise ConfigError("--name must be given once per --traj")
    results, report = {}, {}
    for name, tdir in zip(names, args.traj):
        trajs, hashes = _load_trajectories(Path(tdir), seqs)
        if len(hashes) > 1 and not args.allow_mixed:
            raise IntegrityError(f"{tdir}: trajectories come from different configs {sorted(hashes)} (use --allow-mixed)")
        res = evaluate_with_attributes(trajs, seqs)
        results[name] = res
        report[name] = {**result_to_dict(res), "config_hashes": sorted(h for h in hashes if h),
                        "attribute_notes": res.notes}
        print(f"{name}: PR {res.pr_at_20:.4f}  NPR {res.npr:.4f}  SR {res.sr_auc:.4f}  ({res.n_frames} frames)")
    files = emit_plots(results, out)
    report["_legend"] = {"precision": files["precision_legend"], "success": files["success_legend"]}
    (out / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    if len(results) > 1:
        print("ranking by SR: " + " > ".join(files["success_legend"]))
    return 0


def cmd_stack_preview(args) -> int:
    import cv2
    import numpy as np

    from .datamodel import load_sequence, pair_frame_with_events

    seq = load_sequence(args.sequence)
    pair = pair_frame_with_events(seq, args.frame)
    img = pair.event_image()
    bgr = (np.clip(img, 0, 1) * 255).round().astype(np.uint8)[..., ::-1]
    if args.overlay:
        bgr = cv2.addWeighted(bgr, 0.6, pair.rgb[..., ::-1], 0.4, 0)
    cv2.imwrite(str(args.out), bgr)
    ef = pair.event_frame
    print(f"frame {args.frame}: window [{ef.t_start}, {ef.t_end}) us, "
          f"{int(round(ef.on_channel.sum()))} on / {int(round(ef.off_channel.sum()))} off -> {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="evfuse", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="YAML file of dotted keys")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")

    sp = sub.add_parser("synth", help="write synthetic unaligned sequences")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--n", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--misalign", help="dx,dy,dt")
    sp.add_argument("--split", default="train", choices=["train", "test"])
    sp.add_argument("--force", action="store_true")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="train a model")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--variant", choices=["full", "baseline"])
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("track", help="run the tracker over a dataset")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--workers", type=int, default=1)
    sp.set_defaults(func=cmd_track)

    sp = sub.add_parser("eval", help="one-pass evaluation of trajectories")
    sp.add_argument("--traj", action="append", required=True, help="trajectory directory (repeatable)")
    sp.add_argument("--name", action="append", help="legend name per --traj")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--allow-mixed", action="store_true")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("stack-preview", help="render one frame's event stack to an image")
    sp.add_argument("--sequence", required=True)
    sp.add_argument("--frame", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.add_argument("--overlay", action="store_true")
    sp.set_defaults(func=cmd_stack_preview)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except EvfuseError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except (ValueError, IndexError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
