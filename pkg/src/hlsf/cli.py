"""``hlsf`` command-line entry point."""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from pathlib import Path

from hlsf.errors import ConfigError, HLSFError


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _threads(other=None):
    n = os.environ.get("HLSF_THREADS") or (other or {}).get("threads")
    if n:
        import torch

        torch.set_num_threads(max(1, int(n)))


def _load_config(args):
    from hlsf.config import load_config_file

    if getattr(args, "config", None):
        return load_config_file(args.config)
    return None, {}, {}, {}


def _overrides(args, model, train, other):
    from hlsf.config import set_config_key

    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, raw = item.split("=", 1)
        set_config_key(key.strip(), raw.strip(), model, train, other)
    for key in ("epochs", "lr", "batch_size"):
        v = getattr(args, key, None)
        if v is not None:
            set_config_key(key, str(v), model, train, other)
    if getattr(args, "seed", None) is not None:
        set_config_key("seed", str(args.seed), model, train, other)


def _scenes(path):
    from hlsf.scenes import read_scenes

    return list(read_scenes(path))


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args):
    from hlsf.scenes import DatasetSpec, generate_synthetic_dataset, write_scenes

    templates = {}
    for item in args.template.split(","):
        name, _, weight = item.partition(":")
        templates[name.strip()] = float(weight) if weight else 1.0
    spec = DatasetSpec(templates=templates, n=args.n, seed=args.seed if args.seed is not None else 0,
                       preset=args.preset, lateral_noise=args.lateral_noise,
                       longitudinal_noise=args.longitudinal_noise)
    n = write_scenes(args.out, generate_synthetic_dataset(spec))
    print(f"wrote {n} scenes to {args.out}")
    return 0


def cmd_train(args):
    from hlsf.config import apply_recipe, dump_config
    from hlsf.train import fit

    recipe, model_kw, train_kw, other = _load_config(args)
    _overrides(args, model_kw, train_kw, other)
    recipe = args.recipe or recipe or "M5"
    data = args.data or other.get("data")
    out = args.out or other.get("out")
    if not data or not out:
        raise ConfigError("train needs --data and --out (or data/out in the config file)")
    _threads(other)
    scenes = _scenes(data)
    if scenes and "H" not in model_kw:
        model_kw["H"], model_kw["T"] = scenes[0].H, scenes[0].T
    model_cfg, train_cfg = apply_recipe(recipe, model_kw, train_kw)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "plots").mkdir(exist_ok=True)
    cfg_text = dump_config(model_cfg, train_cfg, recipe)
    (out / "config.txt").write_text(cfg_text, encoding="utf-8")
    started = time.time()
    result = fit(scenes, model_cfg, train_cfg, recipe, out_dir=out, resume=args.resume,
                 log=lambda s: print(s, flush=True))
    data_hash = _sha256(data)
    artifacts = {p: _sha256(out / p) for p in ("config.txt", "metrics.csv", "ckpt/best.ckpt",
                                                 "ckpt/last.ckpt")}
    manifest = {
        "run_id": hashlib.sha256((cfg_text + data_hash).encode()).hexdigest()[:16],
        "recipe": recipe,
        "seed": model_cfg.seed,
        "config": cfg_text,
        "inputs": {"data": str(data), "sha256": data_hash},
        "artifacts": artifacts,
        "best_val_minade": None if result.best_val == float("inf") else result.best_val,
        "started": started,
        "finished": time.time(),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                                       encoding="utf-8")
    print(f"best checkpoint {result.best_checkpoint} (val min-ADE {result.best_val:.4f})")
    return 0


def _ckpt_path(p):
    p = Path(p)
    return p / "ckpt" / "best.ckpt" if p.is_dir() else p


def cmd_predict(args):
    from hlsf.checkpoint import load_model
    from hlsf.infer import predict_scenes, write_predictions

    _threads()
    model, _, header = load_model(_ckpt_path(args.ckpt))
    seed = args.seed if args.seed is not None else 0
    preds = predict_scenes(model, _scenes(args.data), args.K, args.mode, seed)
    n = write_predictions(args.out, preds)
    print(f"wrote {n} predictions to {args.out}")
    return 0


def _eval_model_config(args):
    from hlsf.config import ModelConfig

    if getattr(args, "ckpt", None):
        from hlsf.checkpoint import read

        header, _ = read(_ckpt_path(args.ckpt))
        return ModelConfig(**header["model_config"])
    recipe, model_kw, _, _ = _load_config(args)
    return ModelConfig(**{k: v for k, v in model_kw.items()
                          if k not in ("pdp", "vli", "v2i", "gan", "hierarchical")})


def cmd_eval(args):
    from hlsf.evaluation import evaluate, group_table
    from hlsf.infer import read_predictions

    Ks = [int(k) for k in args.K.split(",") if k.strip()]
    scenes = _scenes(args.data)
    cfg = _eval_model_config(args)
    report, groups = evaluate(read_predictions(args.pred), scenes, Ks, cfg)
    text = report.to_text() + "\n" + group_table(groups)
    print(text, end="")
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.with_suffix(".csv").write_text(report.to_csv(), encoding="utf-8")
        out.with_suffix(".txt").write_text(text, encoding="utf-8")
    return 0


def cmd_plot(args):
    import numpy as np

    from hlsf.features import build_example, collate
    from hlsf.infer import read_predictions
    from hlsf.plot import scene_svg

    scenes = {s.scene_id: s for s in _scenes(args.data)}
    preds = read_predictions(args.pred)
    model = None
    if args.ckpt:
        from hlsf.checkpoint import load_model

        model, _, _ = load_model(_ckpt_path(args.ckpt))
    cfg = model.cfg if model is not None else _eval_model_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    limit = args.limit if args.limit is not None else len(preds)
    for p in preds[:limit]:
        scene = scenes.get(p.scene_id)
        if scene is None:
            raise HLSFError(f"prediction for unknown scene {p.scene_id!r}")
        ex = build_example(scene, p.target_id, cfg, with_future=True, keep_gt=False)
        lanes = [None if l.is_fake else ex.frame.to_world(l.points) for l in ex.candidates.lanes]
        hist = np.asarray(scene.track(p.target_id).positions)[: scene.H + 1]
        fut = ex.frame.to_world(ex.fut_xy)
        bars, label = list(p.weights), "mode weight"
        if model is not None and model.cfg.hierarchical and model.cfg.vli:
            import torch

            with torch.no_grad():
                enc = model.encode(collate([ex]))
            m = int(np.argmax(p.weights))
            bars, label = enc.alpha[0, m].numpy().tolist(), f"attention (ref lane {m})"
        svg = scene_svg(f"{p.scene_id} / {p.target_id}", lanes, hist, fut, p.trajs, bars, label,
                        ex.candidates.gt_index)
        name = f"{p.scene_id}__{p.target_id}.svg".replace("/", "_")
        (out / name).write_text(svg, encoding="utf-8")
    print(f"wrote {min(limit, len(preds))} figures to {out}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--seed", type=int)

    ap = argparse.ArgumentParser(prog="hlsf", description="Lane-level trajectory forecasting.")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="generate synthetic scenes (JSONL)")
    g.add_argument("--template", default="fork3",
                   help="template name, or comma list of name[:weight]")
    g.add_argument("--n", type=int, default=100)
    g.add_argument("--out", required=True)
    g.add_argument("--preset", default="nuscenes", choices=["nuscenes", "argoverse"])
    g.add_argument("--lateral-noise", type=float, default=0.1)
    g.add_argument("--longitudinal-noise", type=float, default=0.1)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", parents=[common], help="train a model on a scene file")
    t.add_argument("--recipe")
    t.add_argument("--data")
    t.add_argument("--out")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any config key (repeatable)")
    t.add_argument("--resume", action="store_true", help="continue from ckpt/last.ckpt")
    t.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", parents=[common], help="sample K futures per target")
    p.add_argument("--ckpt", required=True, help="checkpoint file or run directory")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--K", type=int, default=15)
    p.add_argument("--mode", choices=["multi", "single"], default="multi")
    p.set_defaults(func=cmd_predict)

    e = sub.add_parser("eval", parents=[common], help="score predictions against scenes")
    e.add_argument("--pred", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--K", default="1,5,12,15", help="comma-separated K values")
    e.add_argument("--ckpt", help="checkpoint whose lane settings to use")
    e.add_argument("--out", help="report path prefix (.csv and .txt are written)")
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("plot", parents=[common], help="SVG figures of predictions")
    v.add_argument("--pred", required=True)
    v.add_argument("--data", required=True)
    v.add_argument("--out", required=True, help="output directory")
    v.add_argument("--ckpt", help="checkpoint for attention bars")
    v.add_argument("--limit", type=int)
    v.set_defaults(func=cmd_plot)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (HLSFError, OSError, ValueError, KeyError) as exc:
        print(f"hlsf {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
