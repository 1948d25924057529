"""``poseforge`` command-line interface.

Settings resolve as flags > ``--config`` JSON > built-in defaults, and the
resolved settings are written next to every output. Exit codes: 0 success,
1 domain failure (degenerate fit, keypoint floor, divergence), 2 usage or I/O.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import align_model, hjb
from ._io import atomic_write_text, csv_text
from .misalign import KeypointFloorError, PerturbSpec, gen_corpus, load_corpus, make_rng, \
    split_indices, write_corpus
from .nnet import load_weights, save_weights
from .similarity import DegenerateConfigurationError, apply, dis_metric, fit_sequence
from .skeleton import (DEFAULT_CONF_THRESHOLD, PoseFormatError, normalize,
                       parse_pose_sequence, render_strip_svg, render_svg,
                       serialize_pose_sequence)

log = logging.getLogger("poseforge")

THREADS_ENV = "POSEFORGE_THREADS"
SAMPLE_SEED_STREAM = 0x5A3

DOMAIN_ERRORS = (DegenerateConfigurationError, KeypointFloorError,
                 align_model.TrainingDivergedError, hjb.SamplerDivergedError)


class UsageError(Exception):
    pass


# -- config resolution --------------------------------------------------------

GEN_DEFAULTS = {
    "n": 100, "seed": 0, "n_frames": 8, "source": [],
    "theta_max_deg": 45.0, "scale_min": 0.5, "scale_max": 2.0, "translate": 0.25,
    "noise": 0.01, "dropout": 0.1, "jitter": 0.15, "jitter_prob": 1.0,
}
FIT_DEFAULTS = {"mode": "first", "conf_threshold": DEFAULT_CONF_THRESHOLD}
TRAIN_DEFAULTS = {
    "epochs": 50, "batch_size": 32, "lr": 1e-3, "seed": 0,
    "conf_threshold": DEFAULT_CONF_THRESHOLD,
    **align_model.config_to_dict(align_model.ModelConfig()),
}
EVAL_DEFAULTS = {"split": "test", "conf_threshold": DEFAULT_CONF_THRESHOLD}
SAMPLE_DEFAULTS = {
    "n_samples": 10000, "seed": 0, "n_steps": 40, "sigma_min": 0.002, "sigma_max": 80.0,
    "rho": 7.0, "S_churn": None, "S_noise": 1.0, "S_tmin": None, "S_tmax": None,
    "guidance": "none", "target": None, "k": 10, "eta": 0.03, "window": 10,
}
GUIDED_CHURN = {"S_churn": 2.5, "S_tmin": 0.05, "S_tmax": 50.0}
PLAIN_CHURN = {"S_churn": 0.0, "S_tmin": 0.0, "S_tmax": math.inf}
RENDER_DEFAULTS = {"strip": False, "canvas": None}


def _read_json(path):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON: {exc}") from exc


def resolve(args, defaults):
    """Merge defaults, the optional config file and explicitly given flags."""
    cfg = dict(defaults)
    if getattr(args, "config", None):
        doc = _read_json(args.config)
        if not isinstance(doc, dict):
            raise UsageError("config file must hold a JSON object")
        unknown = set(doc) - set(defaults)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(doc)
    for key in defaults:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    return cfg


def _jsonable(cfg):
    return {k: ("inf" if isinstance(v, float) and math.isinf(v) else v) for k, v in cfg.items()}


def _write_manifest(path, command, cfg, **extra):
    doc = {"command": command, "config": _jsonable(cfg), **extra}
    atomic_write_text(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _sidecar(path):
    path = Path(path)
    return path.with_name(path.name + ".manifest.json")


def _load_sequence(path):
    return parse_pose_sequence(Path(path).read_bytes())


# -- commands -----------------------------------------------------------------

def cmd_gen_corpus(args):
    cfg = resolve(args, GEN_DEFAULTS)
    th = math.radians(cfg["theta_max_deg"])
    spec = PerturbSpec((-th, th), (cfg["scale_min"], cfg["scale_max"]),
                       (-cfg["translate"], cfg["translate"]), cfg["noise"], cfg["dropout"],
                       cfg["jitter"], cfg["jitter_prob"])
    source = [_load_sequence(p) for p in cfg["source"]]
    items, manifest = gen_corpus(source, spec, int(cfg["n"]), int(cfg["seed"]),
                                 n_frames=int(cfg["n_frames"]))
    write_corpus(args.out, items, manifest, {"command": "gen-corpus", "config": cfg})
    print(json.dumps({"out": str(args.out), "n_items": len(items), "digest": manifest["digest"]}))
    return 0


def cmd_fit(args):
    cfg = resolve(args, FIT_DEFAULTS)
    ref = _load_sequence(args.reference)
    drv = _load_sequence(args.driven)
    gt = _load_sequence(args.gt) if args.gt else None
    seqs = [ref, drv] + ([gt] if gt else [])
    coords = "file"
    if len({(s.width, s.height) for s in seqs}) > 1:
        seqs = [normalize(s) for s in seqs]
        coords = "normalized"
    ref, drv = seqs[0], seqs[1]
    T = fit_sequence(ref.keypoints[0], drv, cfg["mode"], cfg["conf_threshold"])
    aligned = apply(T, drv)
    result = {"transform": T.to_dict(), "coords": coords}
    if gt is not None:
        result["dis"] = dis_metric(aligned, seqs[2])
    atomic_write_text(args.out, json.dumps(T.to_dict()) + "\n")
    if args.aligned:
        atomic_write_text(args.aligned, serialize_pose_sequence(aligned))
    _write_manifest(_sidecar(args.out), "fit", cfg, result=result,
                    inputs={"reference": str(args.reference), "driven": str(args.driven),
                            "gt": str(args.gt) if args.gt else None})
    print(json.dumps(result))
    return 0


def _configs(cfg):
    keys = align_model.config_to_dict(align_model.ModelConfig())
    mc = align_model.ModelConfig(**{k: cfg[k] for k in keys})
    tc = align_model.TrainConfig(int(cfg["epochs"]), int(cfg["batch_size"]), float(cfg["lr"]),
                                 int(cfg["seed"]), float(cfg["conf_threshold"]))
    return tc, mc


def cmd_train(args):
    cfg = resolve(args, TRAIN_DEFAULTS)
    tc, mc = _configs(cfg)
    items, manifest = load_corpus(args.corpus)
    params, history = align_model.train(items, tc, mc)
    best = min(history, key=lambda h: h["val_loss"])
    save_weights(args.out, params, {
        "command": "train", "config": cfg, "corpus_digest": manifest.get("digest"),
        "best_epoch": best["epoch"], "history": history})
    if args.history:
        atomic_write_text(args.history, csv_text(["epoch", "train_loss", "val_loss"],
                                                 align_model.history_csv_rows(history)))
    print(json.dumps({"out": str(args.out), "best_epoch": best["epoch"],
                      "best_val_loss": best["val_loss"], "epoch0_val_loss": history[0]["val_loss"]}))
    return 0


def cmd_eval(args):
    cfg = resolve(args, EVAL_DEFAULTS)
    items, manifest = load_corpus(args.corpus)
    if cfg["split"] == "all":
        chosen = items
    elif cfg["split"] in ("train", "val", "test"):
        chosen = [items[i] for i in split_indices(len(items))[cfg["split"]]]
    else:
        raise UsageError(f"unknown split {cfg['split']!r}")
    if not chosen:
        raise UsageError(f"split {cfg['split']!r} is empty")
    if args.weights:
        params, meta = load_weights(args.weights)
        train_cfg = dict(TRAIN_DEFAULTS, **meta.get("config", {}))
        mc = _configs(train_cfg)[1]
    else:
        mc = align_model.ModelConfig()
        params = align_model.init_params(0, mc)
    rows = align_model.evaluate(params, chosen, mc, cfg["conf_threshold"])
    atomic_write_text(args.out, csv_text(["method", "stratum", "mean_dis", "median_dis", "n"],
                                         align_model.metrics_csv_rows(rows)))
    _write_manifest(_sidecar(args.out), "eval", cfg, corpus_digest=manifest.get("digest"),
                    weights=str(args.weights) if args.weights else None)
    for r in rows:
        if r["stratum"] == "all":
            print(f"{r['method']:>8s} mean_dis={r['mean_dis']:.6f} n={r['n']}")
    return 0


def sampler_from_config(cfg, dim):
    kind = cfg["guidance"] or "none"
    if kind not in ("none", "quadratic", "cosine"):
        raise UsageError(f"unknown guidance {kind!r}")
    churn = PLAIN_CHURN if kind == "none" else GUIDED_CHURN
    fields = {k: (churn[k] if cfg[k] is None else cfg[k]) for k in churn}
    guidance = None
    if kind != "none":
        if cfg["target"] is None:
            raise UsageError("guided sampling needs --target")
        target = np.broadcast_to(np.atleast_1d(np.asarray(cfg["target"], float)), (dim,))
        loss = (hjb.GuidanceLoss.quadratic(target) if kind == "quadratic"
                else hjb.GuidanceLoss.cosine(target))
        guidance = hjb.GuidanceConfig(loss, int(cfg["k"]), float(cfg["eta"]), (0, int(cfg["window"])))
    return hjb.SamplerConfig(n_steps=cfg["n_steps"], sigma_min=float(cfg["sigma_min"]),
                             sigma_max=float(cfg["sigma_max"]), rho=float(cfg["rho"]),
                             S_noise=float(cfg["S_noise"]), guidance=guidance,
                             **{k: float(v) for k, v in fields.items()})


def cmd_sample(args):
    cfg = resolve(args, SAMPLE_DEFAULTS)
    if args.no_guidance:
        cfg["guidance"] = "none"
    gmm = hjb.GmmSpec.from_dict(_read_json(args.gmm)) if args.gmm else hjb.GmmSpec.two_mode()
    sampler = sampler_from_config(cfg, gmm.dim)
    n = int(cfg["n_samples"])
    if n < 1:
        raise UsageError("n_samples must be >= 1")
    rng = make_rng(int(cfg["seed"]), SAMPLE_SEED_STREAM)
    res = hjb.edm_sample(lambda x, t: hjb.gmm_denoiser(x, t, gmm), sampler, rng, n, gmm.dim,
                         trace=bool(args.trace))
    header = ["chain"] + [f"dim{j}" for j in range(gmm.dim)]
    atomic_write_text(args.out, csv_text(header, [[c] + [repr(float(v)) for v in row]
                                                  for c, row in enumerate(res.samples)]))
    if args.trace:
        rows = [[c, i, repr(t), repr(g), "" if lb is None else repr(lb), "" if la is None else repr(la)]
                for c, i, t, g, lb, la in res.trace.rows()]
        atomic_write_text(args.trace, csv_text(
            ["chain", "step", "t", "gamma", "loss_before", "loss_after"], rows))
    shares = hjb.mode_shares(res.samples, gmm).tolist()
    summary = {"mode_shares": shares}
    if sampler.guidance is not None:
        summary["mean_guidance_loss"] = float(sampler.guidance.loss(res.samples).mean())
    _write_manifest(_sidecar(args.out), "sample", cfg, sampler=sampler.to_dict(),
                    gmm=gmm.to_dict(), seed_stream=SAMPLE_SEED_STREAM, summary=summary)
    print(json.dumps(summary))
    return 0


def cmd_render(args):
    cfg = resolve(args, RENDER_DEFAULTS)
    seq = _load_sequence(args.poses)
    if cfg["canvas"]:
        canvas = tuple(int(v) for v in cfg["canvas"])
    elif seq.width == 1 and seq.height == 1:
        canvas = (256, 256)
    else:
        canvas = (int(seq.width), int(seq.height))
    norm = normalize(seq)
    out = Path(args.out_dir)
    written = []
    if cfg["strip"]:
        written.append(out / "strip.svg")
        atomic_write_text(written[0], render_strip_svg(norm.keypoints, canvas))
    else:
        for i, frame in enumerate(norm.keypoints):
            written.append(out / f"frame_{i:03d}.svg")
            atomic_write_text(written[-1], render_svg(frame, canvas))
    _write_manifest(out / "render.manifest.json", "render", cfg, poses=str(args.poses),
                    files=[p.name for p in written])
    print(json.dumps({"files": [str(p) for p in written]}))
    return 0


# -- parser -------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    p = _Parser(prog="poseforge", description="Pose alignment and guided sampling tools.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-corpus", help="synthesize a misaligned pose corpus")
    g.add_argument("--n", type=int, help="number of items (default 100)")
    g.add_argument("--seed", type=int)
    g.add_argument("--out", required=True, type=Path)
    g.add_argument("--config", type=Path)
    g.add_argument("--n-frames", dest="n_frames", type=int)
    g.add_argument("--source", action="append", help="pose-sequence JSON (repeatable)")
    g.add_argument("--theta-max-deg", dest="theta_max_deg", type=float)
    g.add_argument("--scale-min", dest="scale_min", type=float)
    g.add_argument("--scale-max", dest="scale_max", type=float)
    g.add_argument("--translate", type=float)
    g.add_argument("--noise", type=float)
    g.add_argument("--dropout", type=float)
    g.add_argument("--jitter", type=float)
    g.add_argument("--jitter-prob", dest="jitter_prob", type=float)
    g.set_defaults(func=cmd_gen_corpus)

    f = sub.add_parser("fit", help="closed-form similarity fit of a driven sequence")
    f.add_argument("--reference", required=True, type=Path)
    f.add_argument("--driven", required=True, type=Path)
    f.add_argument("--out", required=True, type=Path, help="transform JSON")
    f.add_argument("--aligned", type=Path, help="aligned pose-sequence JSON")
    f.add_argument("--gt", type=Path, help="ground-truth sequence for Dis")
    f.add_argument("--mode", choices=["first", "stack"])
    f.add_argument("--conf-threshold", dest="conf_threshold", type=float)
    f.add_argument("--config", type=Path)
    f.set_defaults(func=cmd_fit)

    t = sub.add_parser("train", help="train the learned aligner on a corpus")
    t.add_argument("--corpus", required=True, type=Path)
    t.add_argument("--out", required=True, type=Path, help="weights JSON")
    t.add_argument("--history", type=Path, help="history CSV")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--conf-threshold", dest="conf_threshold", type=float)
    t.add_argument("--config", type=Path)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="Dis report for none/svd/learned alignment")
    e.add_argument("--corpus", required=True, type=Path)
    e.add_argument("--weights", type=Path, help="omit to evaluate the untrained model")
    e.add_argument("--out", required=True, type=Path, help="metrics CSV")
    e.add_argument("--split", choices=["train", "val", "test", "all"])
    e.add_argument("--conf-threshold", dest="conf_threshold", type=float)
    e.add_argument("--config", type=Path)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sample", help="EDM sampling of a Gaussian mixture")
    s.add_argument("--gmm", type=Path, help="mixture JSON (default: modes at +-2, std 0.3)")
    s.add_argument("--out", required=True, type=Path, help="samples CSV")
    s.add_argument("--trace", type=Path, help="per-step trace CSV")
    s.add_argument("--config", type=Path)
    s.add_argument("--seed", type=int)
    s.add_argument("--n-samples", dest="n_samples", type=int)
    s.add_argument("--n-steps", dest="n_steps", type=int)
    s.add_argument("--sigma-min", dest="sigma_min", type=float)
    s.add_argument("--sigma-max", dest="sigma_max", type=float)
    s.add_argument("--rho", type=float)
    s.add_argument("--s-churn", dest="S_churn", type=float)
    s.add_argument("--s-noise", dest="S_noise", type=float)
    s.add_argument("--s-tmin", dest="S_tmin", type=float)
    s.add_argument("--s-tmax", dest="S_tmax", type=float)
    s.add_argument("--guidance", choices=["none", "quadratic", "cosine"])
    s.add_argument("--no-guidance", action="store_true")
    s.add_argument("--target", type=float, nargs="+")
    s.add_argument("--k", type=int, help="inner Adam steps")
    s.add_argument("--eta", type=float, help="inner Adam learning rate")
    s.add_argument("--window", type=int, help="guide the first N outer steps")
    s.set_defaults(func=cmd_sample)

    r = sub.add_parser("render", help="SVG rendering of a pose sequence")
    r.add_argument("--poses", required=True, type=Path)
    r.add_argument("--out-dir", dest="out_dir", required=True, type=Path)
    r.add_argument("--strip", action="store_true", default=None)
    r.add_argument("--canvas", type=int, nargs=2, metavar=("W", "H"))
    r.add_argument("--config", type=Path)
    r.set_defaults(func=cmd_render)
    return p


def thread_limit(environ=None):
    """Positive integer from ``POSEFORGE_THREADS``, or None when unset."""
    raw = (environ if environ is not None else os.environ).get(THREADS_ENV, "").strip()
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return n


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        with threadpool_limits(limits=thread_limit()):
            return args.func(args)
    except DOMAIN_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (UsageError, PoseFormatError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
