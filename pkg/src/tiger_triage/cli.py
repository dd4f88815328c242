"""Command-line entry point: ingest, train, eval, explain, report, serve, classify."""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
import time
from pathlib import Path

from . import dataset as ds
from .config import RunConfig, load_config
from .errors import ConfigInvalid, PathMissing, TriageError

log = logging.getLogger("tiger_triage")


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, default=str))


def _require(path, what: str) -> Path:
    if path is None:
        raise ConfigInvalid(f"{what} is not set (config file or flag)")
    path = Path(path)
    if not path.exists():
        raise PathMissing(f"{what} not found: {path}", path=str(path))
    return path


def _records(cfg: RunConfig, check_images: bool = True) -> list[ds.ImageRecord]:
    manifest = _require(cfg.manifest, "manifest")
    root = _require(cfg.image_root, "image_root")
    return ds.ingest_manifest(manifest, root, check_images=check_images,
                              include_probable=cfg.train.include_probable)


def _config(args, **extra) -> RunConfig:
    return load_config(
        getattr(args, "config", None),
        manifest=getattr(args, "manifest", None),
        image_root=getattr(args, "image_root", None),
        protocol=getattr(args, "protocol", None),
        backbone=getattr(args, "backbone", None),
        seed=getattr(args, "seed", None),
        epochs=getattr(args, "epochs", None),
        out_dir=getattr(args, "out", None),
        **extra,
    )


def cmd_ingest(args) -> int:
    cfg = _config(args)
    records = _records(cfg)
    summary = ds.summarize(records)
    if args.folds_out:
        plan = ds.make_folds(records, args.k, cfg.train.seed)
        Path(args.folds_out).write_text(plan.to_json())
        summary["folds"] = {"k": plan.k, "seed": plan.seed, "path": str(args.folds_out)}
    summary["seed"] = cfg.train.seed
    _emit(summary)
    return 0


def cmd_train(args) -> int:
    from .train import run_cv, run_protocol_b

    cfg = _config(args)
    records = _records(cfg)
    config_hash = cfg.hash()
    stamp = time.strftime("%Y%m%d-%H%M%S")
    final_dir = cfg.out_dir / f"{stamp}-{config_hash}"
    partial = cfg.out_dir / f".partial-{stamp}-{config_hash}"
    partial.mkdir(parents=True, exist_ok=False)
    try:
        (partial / "config.json").write_text(json.dumps({
            **cfg.to_dict(), "config_hash": config_hash, "seed": cfg.train.seed,
            "overrides": cfg.train.overrides()}, indent=2))
        if cfg.train.protocol == "cv5":
            result = run_cv(records, cfg.train, partial, jobs=args.jobs, config_hash=config_hash)
        else:
            result = run_protocol_b(records, cfg.train, partial, config_hash=config_hash)
        partial.rename(final_dir)
    except BaseException:
        shutil.rmtree(partial, ignore_errors=True)
        raise
    out = result.to_dict()
    _emit({"run_dir": str(final_dir), "config_hash": config_hash, "seed": cfg.train.seed,
           "train": out["train"], "test": out["test"]})
    return 0


def _run_config(run_dir: Path) -> tuple[RunConfig, dict]:
    raw = json.loads(_require(run_dir / "config.json", "run config").read_text())
    return RunConfig.from_dict(raw), raw


def _checkpoint_path(run_dir: Path, fold: int | None, which: str) -> Path:
    base = run_dir / "checkpoints"
    if fold is not None:
        base = base / f"fold{fold}"
    return _require(base / f"{which}.pt", "checkpoint")


def cmd_eval(args) -> int:
    from .model import load_checkpoint
    from .train import RecordDataset, evaluate

    if args.run_dir:
        run_dir = Path(args.run_dir)
        cfg, raw = _run_config(run_dir)
        records = ds.relabel(_records(cfg, check_images=False), cfg.train.include_probable)
        out = {"run_dir": str(run_dir), "config_hash": raw["config_hash"], "checkpoint": args.which}
        if cfg.train.protocol == "cv5":
            plan = ds.FoldPlan.from_json((run_dir / "folds.json").read_text())
            pool = ds.eligible(records)
            folds = range(plan.k) if args.fold is None else [args.fold]
            out["folds"] = []
            for f in folds:
                ckpt = load_checkpoint(_checkpoint_path(run_dir, f, args.which))
                _, val = plan.split(pool, f)
                ev = evaluate(ckpt.net, RecordDataset(val, ckpt.norm_stats, ckpt.net.input_size),
                              cfg.train.batch_size)
                out["folds"].append({"fold": f, "accuracy": ev.accuracy, "loss": ev.mean_loss,
                                     **ev.report("single_split").to_dict()})
        else:
            _, test = ds.split_protocol_b(records)
            ckpt = load_checkpoint(_checkpoint_path(run_dir, None, args.which))
            ev = evaluate(ckpt.net, RecordDataset(test, ckpt.norm_stats, ckpt.net.input_size),
                          cfg.train.batch_size)
            out["test"] = ev.report("single_split").to_dict()
        _emit(out)
        return 0

    if not args.checkpoint:
        raise ConfigInvalid("eval needs --run-dir or --checkpoint")
    cfg = _config(args)
    ckpt = load_checkpoint(_require(args.checkpoint, "checkpoint"))
    records = _records(cfg)
    if args.split == "not_classified":
        _, records = ds.split_protocol_b(records)
    elif args.split == "eligible":
        records = ds.eligible(records)
    else:
        records = [r for r in records if ds.evaluation_label(r.species) is not ds.BinaryLabel.EXCLUDED]
    ev = evaluate(ckpt.net, RecordDataset(records, ckpt.norm_stats, ckpt.net.input_size))
    rep = ev.report(args.split)
    out = {"checkpoint": str(args.checkpoint), "model_hash": ckpt.meta["model_hash"],
           "config_hash": ckpt.meta.get("config_hash", ""), **rep.to_dict()}
    if args.table2:
        Path(args.table2).write_text(rep.to_table2_csv(ckpt.meta.get("family", "model")))
    _emit(out)
    return 0


def cmd_explain(args) -> int:
    import torch

    from .gradcam import export, multi_layer_cams
    from .model import PREDICTED, load_checkpoint
    from .preprocess import apply_norm, load_resized

    ckpt = load_checkpoint(_require(args.checkpoint, "checkpoint"))
    layers = [s.strip() for s in args.layers.split(",") if s.strip()]
    for layer in layers:
        ckpt.net.resolve_layer(layer)
    class_index = PREDICTED if args.class_ == PREDICTED else ds.class_index(args.class_)
    out_dir = Path(args.out)
    written = []
    extra = {"config_hash": ckpt.meta.get("config_hash", ""), "model_hash": ckpt.meta["model_hash"]}
    for image in args.image:
        path = _require(image, "image")
        raw = load_resized(path, ckpt.net.input_size, path.stem)
        x = torch.from_numpy(apply_norm(raw, ckpt.norm_stats).data)
        for hm in multi_layer_cams(ckpt.net, x, layers, class_index, args.target):
            written.append(export(hm, raw, out_dir, path.stem, **extra))
    _emit({"outputs": written})
    return 0


def cmd_report(args) -> int:
    import torch

    from .gradcam import multi_layer_cams
    from .metrics import MetricsReport
    from .model import load_checkpoint
    from .preprocess import prepare
    from .report import ErrorCase, build_gallery, plot_histories, sample_error_set
    from .train import read_history_csv

    run_dir = Path(args.run_dir)
    cfg, raw = _run_config(run_dir)
    summary = json.loads(_require(run_dir / "summary.json", "summary").read_text())
    out_dir = Path(args.out) if args.out else run_dir / "report"
    n = args.n if args.n is not None else cfg.report_sample_size
    which = args.which or (cfg.report_checkpoint if cfg.train.protocol == "cv5" else "final")
    records = ds.relabel(_records(cfg, check_images=False), cfg.train.include_probable)

    # every sampled record is scored by a model that never trained on it
    if cfg.train.protocol == "cv5":
        plan = ds.FoldPlan.from_json((run_dir / "folds.json").read_text())
        pool = ds.eligible(records)
        owner = plan.assignments
        ckpts = {f: load_checkpoint(_checkpoint_path(run_dir, f, which)) for f in range(plan.k)}
        pooled = summary["pooled"]
    else:
        _, pool = ds.split_protocol_b(records)
        owner = {r.id: None for r in pool}
        ckpts = {None: load_checkpoint(_checkpoint_path(run_dir, None, which))}
        pooled = summary["test"]
    sample = sample_error_set(pool, min(n, len(pool)), cfg.train.seed)

    cases = []
    for rec in sample:
        ckpt = ckpts[owner[rec.id]]
        x = prepare(rec.path, ckpt.norm_stats, ckpt.net.input_size, rec.id)
        probs = torch.softmax(ckpt.net.eval()(x[None]), dim=1)[0].detach()
        pred = 1 if float(probs[1]) > float(probs[0]) else 0
        if pred == rec.target:
            continue
        cams = multi_layer_cams(ckpt.net, x, cfg.gradcam_layers, pred, cfg.gradcam_target)
        cases.append(ErrorCase(rec, pred, float(probs[pred]), cams))

    curves = plot_histories(read_history_csv(run_dir / "history.csv"), out_dir / "curves")
    table2 = MetricsReport.from_dict(pooled).table2_row(cfg.train.backbone.family)
    report_summary = {
        "config_hash": raw["config_hash"],
        "seed": cfg.train.seed,
        "protocol": cfg.train.protocol,
        "checkpoint": which,
        "sample_size": len(sample),
        "sampled_ids": [r.id for r in sample],
        "metrics": {"train": summary["train"], "test": summary["test"]},
        "table2": table2,
        "table2_source": pooled.get("source"),
    }
    index = build_gallery(cases, out_dir, summary=report_summary, curves=curves,
                          image_size=cfg.train.image_size)
    _emit({"report": str(index), "cases": len(cases), "sampled": len(sample)})
    return 0


def cmd_serve(args) -> int:  # pragma: no cover - blocks
    import uvicorn

    from .serve import create_app

    app = create_app(_require(args.checkpoint, "checkpoint"), timeout=args.timeout)
    uvicorn.run(app, host=args.host, port=args.port)
    return 0


def cmd_classify(args) -> int:
    import httpx

    path = _require(args.image, "image")
    with open(path, "rb") as fh:
        resp = httpx.post(f"{args.url.rstrip('/')}/classify", params={"explain": args.explain},
                          files={"file": (path.name, fh)}, timeout=args.timeout)
    body = resp.json()
    if resp.status_code != 200:
        raise TriageError(body.get("message", resp.text), status=resp.status_code,
                          remote_error=body.get("error"))
    if args.heatmap_out and body.get("heatmap_png"):
        import base64

        Path(args.heatmap_out).write_bytes(base64.b64decode(body.pop("heatmap_png")))
    _emit(body)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tiger-triage", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        p.add_argument("--config", help="TOML run configuration")
        p.add_argument("--seed", type=int)
        if data:
            p.add_argument("--manifest", help="manifest CSV (overrides config)")
            p.add_argument("--image-root", dest="image_root", help="image directory")

    p = sub.add_parser("ingest", help="validate a manifest and summarize it")
    common(p)
    p.add_argument("--folds-out", help="also write a stratified FoldPlan JSON here")
    p.add_argument("-k", type=int, default=5)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="run an experimental protocol")
    common(p)
    p.add_argument("--protocol", choices=("cv5", "confirmed_vs_unconfirmed"))
    p.add_argument("--backbone", choices=("vgg16", "resnet50", "tinycnn"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--jobs", type=int, default=1, help="parallel fold workers")
    p.add_argument("--out", help="parent directory for run directories")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a saved checkpoint")
    common(p)
    p.add_argument("--run-dir", dest="run_dir")
    p.add_argument("--fold", type=int)
    p.add_argument("--which", choices=("final", "best"), default="final")
    p.add_argument("--checkpoint")
    p.add_argument("--split", choices=("all", "eligible", "not_classified"), default="all")
    p.add_argument("--table2", help="write a confusion-count CSV row here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("explain", help="Grad-CAM overlays for images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", action="append", required=True)
    p.add_argument("--layers", default="shallow,middle,deep")
    p.add_argument("--class", dest="class_", default="predicted",
                   choices=("predicted", "tiger", "non_tiger"))
    p.add_argument("--target", choices=("logit", "probability"), default="logit")
    p.add_argument("--out", default="heatmaps")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("report", help="curves, tables and error gallery for a run")
    p.add_argument("--run-dir", dest="run_dir", required=True)
    p.add_argument("--n", type=int, help="error-analysis sample size")
    p.add_argument("--which", choices=("final", "best"))
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("serve", help="HTTP inference service")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--timeout", type=float, default=30.0)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("classify", help="send an image to a running service")
    p.add_argument("--url", default="http://127.0.0.1:8000")
    p.add_argument("--image", required=True)
    p.add_argument("--explain", action="store_true")
    p.add_argument("--heatmap-out", dest="heatmap_out")
    p.add_argument("--timeout", type=float, default=60.0)
    p.set_defaults(func=cmd_classify)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except TriageError as exc:
        print(json.dumps(exc.to_dict(), default=str), file=sys.stderr)
        return 2
    except (FileNotFoundError, ValueError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
