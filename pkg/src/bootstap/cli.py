"""Command-line entry points.

Exit codes: 0 success, 1 usage error, 2 data error, 3 verification failure.
Every command that writes an output directory also writes ``manifest.json``
there; ``--from-manifest`` replays it.
"""
from __future__ import annotations

import argparse
import colorsys
import hashlib
import json
import logging
import shutil
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from . import gradsuite
from .evaltap import MODES, evaluate, extract_queries, write_report
from .synthdata import DataError, QueryPoint, domain_config, generate_scene, load_clips, load_scene, save_scene
from .tracker import CheckpointError, ModelParams, forward, load_checkpoint
from .trainer import ABLATIONS, TrainConfig, TrainingError, apply_ablation, resolve_ablation, subsample_clips, train

log = logging.getLogger("bootstap")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_VERIFY = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# config files and manifests


def parse_value(text: str):
    t = text.strip()
    low = t.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", "null", ""):
        return None
    try:
        return json.loads(t)
    except ValueError:
        return t


def read_config(path: str | Path) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment; ``lr_multiplier.<prefix> = x`` fills a map."""
    out: dict = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc}") from exc
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        _set_key(out, key, parse_value(val))
    return out


def _set_key(d: dict, key: str, value) -> None:
    if key.startswith("lr_multiplier."):
        d.setdefault("lr_multipliers", {})[key[len("lr_multiplier.") :]] = float(value)
    else:
        d[key] = value


def overrides_from(args) -> dict:
    d = read_config(args.config) if getattr(args, "config", None) else {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        _set_key(d, k.strip(), parse_value(v))
    return d


def hash_path(path: str | Path) -> str:
    """Content hash of a file, or of every file under a directory (relative names included)."""
    p = Path(path)
    h = hashlib.sha256()
    files = [p] if p.is_file() else sorted(f for f in p.rglob("*") if f.is_file())
    for f in files:
        h.update(str(f.relative_to(p) if p.is_dir() else f.name).encode())
        h.update(hashlib.sha256(f.read_bytes()).digest())
    return h.hexdigest()


def write_manifest(out: Path, command: str, argv: list[str], config: dict, seed, inputs: dict[str, str | None]) -> None:
    doc = {
        "command": command,
        "argv": argv,
        "config": config,
        "seed": seed,
        "inputs": {k: (hash_path(v) if v else None) for k, v in inputs.items()},
        "input_paths": inputs,
        "version": __version__,
    }
    (out / "manifest.json").write_text(json.dumps(doc, indent=1, sort_keys=True, default=str) + "\n")


def prepare_out(path: str, force: bool) -> Path:
    out = Path(path)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise UsageError(f"{out} exists; pass --force to overwrite")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args, argv) -> int:
    out = prepare_out(args.out, args.force)
    overrides = overrides_from(args)
    n_eval = args.eval_clips if args.eval_clips is not None else max(1, args.clips // 4)

    def scene_seed(split: str, i: int) -> int:
        h = hashlib.sha256(f"{args.seed}/{args.domain}/{split}/{i}".encode()).digest()
        return int.from_bytes(h[:4], "little")

    def write(split_dir: Path, split: str, count: int, labeled: bool):
        for i in range(count):
            s = scene_seed(split, i)
            scene = generate_scene(domain_config(args.domain, s, **overrides))
            scene.meta.update({"domain": args.domain, "scene_seed": s})
            save_scene(scene, split_dir / f"clip_{i:05d}", labeled=labeled)

    if args.domain == "A":
        write(out, "train", args.clips, True)
    else:
        write(out / "train", "train", args.clips, False)
        write(out / "eval", "eval", n_eval, True)
    write_manifest(out, "gen", argv, {"domain": args.domain, "clips": args.clips, "eval_clips": n_eval, **overrides}, args.seed, {})
    print(f"wrote {args.clips} domain-{args.domain} clips to {out}")
    return EXIT_OK


def _train_config(args, base: dict) -> TrainConfig:
    d = {**base, **overrides_from(args)}
    for flag in ("steps", "seed", "clip_frames", "data_fraction"):
        v = getattr(args, flag, None)
        if v is not None:
            d[flag] = v
    try:
        return TrainConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


def _load_init(path: str | None) -> tuple[ModelParams | None, ModelParams | None]:
    if not path:
        return None, None
    ck = load_checkpoint(path)
    teacher = None
    t = {k[len("teacher/") :]: v for k, v in ck.extra.items() if k.startswith("teacher/")}
    if t:
        teacher = ModelParams.from_arrays(ck.params.config, t)
    return ck.params, teacher


def _eval_fn(eval_dir: str | None):
    if not eval_dir:
        return None
    scenes = load_clips(eval_dir)

    def fn(params, step):
        rep, _ = evaluate(params, scenes, "strided")
        return {"aj": rep.aj, "delta_avg": rep.delta_avg, "oa": rep.oa}

    return fn


def _labeled(path: str):
    scenes = load_clips(path)
    scenes = [s for s in scenes if s.tracks]
    if not scenes:
        raise DataError(f"{path}: no labeled clips (tracks.json) found")
    return scenes


def cmd_train(args, argv) -> int:
    cfg = _train_config(args, {"ssl_enabled": False})
    cfg = replace(cfg, ssl_enabled=False)
    out = prepare_out(args.out, args.force)
    labeled = _labeled(args.data)
    init, _ = _load_init(args.init)
    write_manifest(out, "train", argv, cfg.to_dict(), cfg.seed, {"data": args.data, "init": args.init, "eval_data": args.eval_data})
    res = train(cfg, labeled, init=init, out_dir=out, eval_fn=_eval_fn(args.eval_data))
    _summarise(out, res)
    return EXIT_OK


def _summarise(out: Path, res) -> None:
    last = res.logs[-1] if res.logs else {}
    clean = lambda v: None if v is None or v != v else v  # noqa: E731  (NaN -> null)
    doc = {"final": last, "skipped": res.skipped, "losses": [[clean(a), clean(b)] for a, b in res.losses]}
    (out / "summary.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    print(json.dumps(last, sort_keys=True))


def _bootstrap_one(args, argv, name: str, out: Path, labeled, unlabeled_scenes, init, teacher) -> dict:
    cfg = apply_ablation(_train_config(args, {}), name)
    keys = [s.meta.get("name", str(i)) for i, s in enumerate(unlabeled_scenes)]
    vids = [s.video for s in subsample_clips(unlabeled_scenes, keys, cfg.data_fraction)]
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(
        out,
        "bootstrap",
        argv,
        {**cfg.to_dict(), "ablation": name, "unlabeled_clips_used": len(vids)},
        cfg.seed,
        {"data": args.data, "unlabeled": args.unlabeled, "init": args.init, "eval_data": args.eval_data},
    )
    res = train(cfg, labeled, vids, init=init, out_dir=out, eval_fn=_eval_fn(args.eval_data), teacher_init=teacher)
    _summarise(out, res)
    return res.logs[-1] if res.logs else {}


def _ablation_names(requested) -> list[str]:
    try:
        return [resolve_ablation(n) for n in requested]
    except KeyError as exc:
        raise UsageError(exc.args[0]) from exc


def cmd_bootstrap(args, argv) -> int:
    names = _ablation_names(args.ablation or ["FULL"])
    out = prepare_out(args.out, args.force)
    labeled = _labeled(args.data)
    unlabeled = load_clips(args.unlabeled)
    init, teacher = _load_init(args.init)
    if len(names) == 1:
        _bootstrap_one(args, argv, names[0], out, labeled, unlabeled, init, teacher)
    else:
        for n in names:
            _bootstrap_one(args, argv, n, out / n, labeled, unlabeled, init, teacher)
    return EXIT_OK


def cmd_ablate(args, argv) -> int:
    names = _ablation_names(args.ablations or list(ABLATIONS))
    out = prepare_out(args.out, args.force)
    labeled = _labeled(args.data)
    unlabeled = load_clips(args.unlabeled)
    eval_scenes = load_clips(args.eval_data)
    init, teacher = _load_init(args.init)
    rows = []
    for n in names:
        last = _bootstrap_one(args, argv, n, out / n, labeled, unlabeled, init, teacher)
        ck = load_checkpoint(out / n / "final.btap")
        rep, _ = evaluate(ck.params, eval_scenes, args.mode)
        rows.append({"ablation": n, "aj": rep.aj, "delta_avg": rep.delta_avg, "oa": rep.oa, "ssl_loss": last.get("ssl_loss")})
        print(f"{n:20s} AJ={rep.aj:.4f} <d_avg={rep.delta_avg:.4f} OA={rep.oa:.4f}")
    (out / "summary.json").write_text(json.dumps(rows, indent=1) + "\n")
    write_manifest(out, "ablate", argv, {"ablations": names, "mode": args.mode}, args.seed, {"data": args.data, "unlabeled": args.unlabeled, "init": args.init, "eval_data": args.eval_data})
    return EXIT_OK


def cmd_eval(args, argv) -> int:
    ck = load_checkpoint(args.checkpoint)
    params = ck.params
    if args.weights == "teacher":
        t = {k[len("teacher/") :]: v for k, v in ck.extra.items() if k.startswith("teacher/")}
        if not t:
            raise DataError(f"{args.checkpoint}: no teacher weights stored")
        params = ModelParams.from_arrays(ck.params.config, t)
    scenes = [s for s in load_clips(args.data) if s.tracks]
    if not scenes:
        raise DataError(f"{args.data}: no labeled clips to evaluate")
    out = prepare_out(args.out, args.force)
    rep, results = evaluate(params, scenes, args.mode, names=[s.meta.get("name", "") for s in scenes])
    write_report(rep, results, out / "metrics.json", out / "per_video.csv", extra={"mode": args.mode})
    write_manifest(out, "eval", argv, {"mode": args.mode, "weights": args.weights}, None, {"checkpoint": args.checkpoint, "data": args.data})
    print(json.dumps({"aj": rep.aj, "delta_avg": rep.delta_avg, "oa": rep.oa, "videos": rep.n_videos, "points": rep.n_points}))
    return EXIT_OK


def rainbow(n: int) -> list[tuple[int, int, int]]:
    return [tuple(int(round(255 * c)) for c in colorsys.hsv_to_rgb(i / max(n, 1), 0.9, 1.0)) for i in range(n)]


def render_overlay(video: np.ndarray, positions: np.ndarray, occluded: np.ndarray, scale: int = 1, tail: int = 8, radius: int = 2):
    """Frames with each track drawn as a fading tail plus a marker (hollow when occluded).

    ``positions`` is N x T x 2 in pixel-centre coordinates; marker centres land
    at ``scale * (p + 0.5) - 0.5``, i.e. exactly on the predicted pixel when
    ``scale`` is 1.
    """
    from PIL import Image, ImageDraw

    T, H, W = video.shape[:3]
    cols = rainbow(len(positions))
    frames = []
    for t in range(T):
        img = Image.fromarray(np.round(np.clip(video[t], 0, 1) * 255).astype(np.uint8))
        if scale != 1:
            img = img.resize((W * scale, H * scale), Image.NEAREST)
        draw = ImageDraw.Draw(img)
        for n, col in enumerate(cols):
            pts = [tuple(scale * (positions[n, s] + 0.5) - 0.5) for s in range(max(0, t - tail), t + 1)]
            if len(pts) > 1:
                draw.line(pts, fill=col, width=1)
            x, y = pts[-1]
            box = [x - radius, y - radius, x + radius, y + radius]
            if occluded[n, t]:
                draw.ellipse(box, outline=col)
            else:
                draw.ellipse(box, fill=col, outline=col)
        frames.append(img)
    return frames


def cmd_render(args, argv) -> int:
    ck = load_checkpoint(args.checkpoint)
    scene = load_scene(args.clip)
    if scene.queries:
        queries = scene.queries[: args.max_tracks]
    elif scene.tracks:
        queries = [q for tr in scene.tracks for q in extract_queries(tr, "q_first")][: args.max_tracks]
    else:
        k = max(1, int(np.ceil(np.sqrt(args.max_tracks))))
        g = (np.arange(k) + 0.5) * scene.W / k - 0.5
        queries = [QueryPoint(float(x), float(y), 0) for y in g for x in g][: args.max_tracks]
    out = prepare_out(args.out, args.force)
    preds = forward(scene.video, queries, ck.params)
    P = np.stack([p.p for p in preds]) if preds else np.zeros((0, scene.T, 2))
    O = np.stack([p.o > 0 for p in preds]) if preds else np.zeros((0, scene.T), bool)
    for t, img in enumerate(render_overlay(scene.video, P, O, args.scale, args.tail)):
        img.save(out / f"frame_{t:04d}.png")
    (out / "predictions.json").write_text(
        json.dumps({"queries": [[q.x, q.y, q.t] for q in queries], "positions": P.tolist(), "occluded": O.astype(int).tolist()})
    )
    write_manifest(out, "render", argv, {"scale": args.scale, "tail": args.tail, "max_tracks": args.max_tracks}, None, {"checkpoint": args.checkpoint, "clip": args.clip})
    print(f"wrote {scene.T} frames to {out}")
    return EXIT_OK


def cmd_gradcheck(args, argv) -> int:
    results = gradsuite.run(args.scope, seed=args.seed)
    worst = 0.0
    for r in results:
        worst = max(worst, r.error)
        print(f"{'ok  ' if r.ok else 'FAIL'} {r.scope:5s} {r.name:18s} max rel err {r.error:.3e}  ({r.seconds:.2f}s)")
    bad = [r for r in results if not r.ok]
    print(f"{len(results) - len(bad)}/{len(results)} checks passed; worst {worst:.3e} (tolerance {gradsuite.TOLERANCE:g})")
    return EXIT_VERIFY if bad else EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="bootstap", description="Self-supervised bootstrapping for point tracking on synthetic video.")
    p.add_argument("--from-manifest", metavar="PATH", help="replay the command recorded in a manifest.json")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common_out(sp):
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--force", action="store_true", help="replace a non-empty output directory")

    def train_flags(sp):
        sp.add_argument("--config", help="flat key = value file with TrainConfig keys")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        sp.add_argument("--steps", type=int)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--eval-data", help="labeled clips evaluated at every log interval")

    g = sub.add_parser("gen", help="generate synthetic clips")
    g.add_argument("--domain", choices=("A", "B"), required=True)
    g.add_argument("--clips", type=int, required=True)
    g.add_argument("--eval-clips", type=int, help="domain B only: size of the labeled eval split (default clips/4)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--config", help="flat key = value file with scene config overrides")
    g.add_argument("--set", action="append", metavar="KEY=VALUE")
    common_out(g)

    t = sub.add_parser("train", help="supervised training on labeled clips")
    t.add_argument("--data", required=True)
    t.add_argument("--init", help="start from this checkpoint")
    train_flags(t)
    common_out(t)

    b = sub.add_parser("bootstrap", help="student-teacher co-training")
    b.add_argument("--data", required=True, help="labeled clips")
    b.add_argument("--unlabeled", required=True, help="unlabeled clips")
    b.add_argument("--init", required=True, help="checkpoint from train")
    b.add_argument("--ablation", action="append", help=f"one of {', '.join(ABLATIONS)} (repeatable)")
    b.add_argument("--clip-frames", type=int, help="length of unlabeled clips fed to the SSL task")
    b.add_argument("--data-fraction", type=float, help="fraction of unlabeled clips kept (hash-based)")
    train_flags(b)
    common_out(b)

    a = sub.add_parser("ablate", help="run several ablations and tabulate held-out metrics")
    a.add_argument("--data", required=True)
    a.add_argument("--unlabeled", required=True)
    a.add_argument("--init", required=True)
    a.add_argument("--ablations", nargs="+")
    a.add_argument("--mode", choices=MODES, default="strided")
    a.add_argument("--clip-frames", type=int)
    a.add_argument("--data-fraction", type=float)
    train_flags(a)
    a.set_defaults(ablation=None)
    common_out(a)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--mode", choices=MODES, default="strided")
    e.add_argument("--weights", choices=("student", "teacher"), default="student")
    common_out(e)

    r = sub.add_parser("render", help="draw predicted tracks onto clip frames")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--clip", required=True)
    r.add_argument("--max-tracks", type=int, default=16)
    r.add_argument("--tail", type=int, default=8)
    r.add_argument("--scale", type=int, default=1)
    common_out(r)

    c = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    c.add_argument("--scope", choices=gradsuite.SCOPES, default="all")
    c.add_argument("--seed", type=int, default=0)
    return p


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "bootstrap": cmd_bootstrap,
    "ablate": cmd_ablate,
    "eval": cmd_eval,
    "render": cmd_render,
    "gradcheck": cmd_gradcheck,
}


def _replay_argv(manifest: str, rest: list[str]) -> list[str]:
    try:
        doc = json.loads(Path(manifest).read_text())
        argv = list(doc["argv"])
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"{manifest}: unreadable manifest ({exc})") from exc
    # later flags win, so "--out elsewhere --force" redirects a replay
    return argv + rest


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        if argv[:1] == ["--from-manifest"] and len(argv) >= 2:
            argv = _replay_argv(argv[1], argv[2:])
        args = parser.parse_args(argv)
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command is None:
        parser.print_help()
        return EXIT_USAGE
    t0 = time.perf_counter()
    try:
        code = COMMANDS[args.command](args, argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    log.info("%s finished in %.1fs", args.command, time.perf_counter() - t0)
    return code


if __name__ == "__main__":
    sys.exit(main())
