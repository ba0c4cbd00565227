"""``amodal`` command-line entry point.

Exit codes: 0 ok, 2 usage, 3 query resolution, 4 backend transport,
5 backend contract.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import logging
import sys
import time
from pathlib import Path

from . import __version__
from .backends.base import BackendContractError, BackendError, BackendTransportError
from .config import ConfigError, load_config, make_backends
from .core import BACKGROUNDS, QuerySpec, load_image, sha256_file
from .occlusion import QueryResolutionError
from .sampler import SAMPLERS

log = logging.getLogger("amodal")

EXIT_OK, EXIT_USAGE, EXIT_QUERY, EXIT_TRANSPORT, EXIT_CONTRACT = 0, 2, 3, 4, 5


class UsageError(Exception):
    pass


def _point(text):
    try:
        x, y = (int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError("expected X,Y") from None
    return x, y


def _emit(args, human: str, payload) -> None:
    if getattr(args, "json", False):
        print(json.dumps(payload, indent=2, sort_keys=True))
    else:
        print(human)


def _run_config(args, **pipeline):
    return load_config(getattr(args, "config", None), pipeline_overrides=pipeline,
                       backend_overrides={"scene": getattr(args, "scene", None),
                                          "url": getattr(args, "backend_url", None)})


def write_run_manifest(out_dir, argv, run_cfg, identities, seed, started, outputs) -> Path:
    """Per-run record (timings included); kept apart from the deterministic bundle manifests."""
    out = Path(out_dir)
    doc = {"command": list(argv), "version": __version__, "config": run_cfg.to_dict(),
           "backends": identities, "seed": seed,
           "started_at": _dt.datetime.fromtimestamp(started, _dt.timezone.utc).isoformat(),
           "wall_clock_s": round(time.time() - started, 3),
           "outputs": sorted(str(p) for p in outputs),
           "content_hashes": {str(p): sha256_file(p) for p in sorted(outputs)}}
    out.mkdir(parents=True, exist_ok=True)
    (out / "run.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return out / "run.json"


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_complete(args, argv) -> int:
    from .pipeline import run_pipeline, save_bundle
    if not Path(args.image).is_file():
        raise UsageError(f"image not found: {args.image}")
    if args.variants < 1:
        raise UsageError("--variants must be >= 1")
    cfg = _run_config(args, composite_step=args.k, decoder_layer=args.layer,
                      clean_background=args.background, rng_seed=args.seed)
    image = load_image(args.image)
    try:
        query = QuerySpec(args.query, args.point)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    seed = cfg.pipeline.rng_seed
    started = time.time()
    out = Path(args.out)
    results, outputs, identities = [], [], {}
    for v in range(args.variants):
        backends = make_backends(cfg.backends, cfg.pipeline.total_steps)
        identities = backends.identities()
        target = out if args.variants == 1 else out / f"variant_{v}"
        try:
            bundle = run_pipeline(image, query, cfg.pipeline, backends, args.sampler,
                                  seed=seed + v)
        except BackendError as exc:
            if getattr(exc, "bundle", None) is not None:
                save_bundle(exc.bundle, target, args.debug_trace)
            raise
        manifest = save_bundle(bundle, target, args.debug_trace)
        outputs.append(target / "manifest.json")
        results.append({"dir": str(target), "seed": seed + v,
                        "iterations": len(bundle.iterations),
                        "termination_reason": bundle.termination_reason,
                        "content_hash": manifest["content_hash"]})
    write_run_manifest(out, argv, cfg, identities, seed, started, outputs)
    human = "\n".join(f"{r['dir']}: {r['iterations']} iteration(s), {r['termination_reason']}, "
                      f"hash {r['content_hash'][:12]}" for r in results)
    _emit(args, human, {"bundles": results})
    return EXIT_OK


def _load_labels(path) -> dict:
    p = Path(path)
    if p.suffix.lower() == ".csv":
        with p.open(newline="") as fh:
            data = {row["id"]: row["label"] for row in csv.DictReader(fh)}
    else:
        data = json.loads(p.read_text())
    bad = {k: v for k, v in data.items() if v not in ("complete", "incomplete")}
    if bad:
        raise UsageError(f"labels must be 'complete' or 'incomplete': {sorted(bad)[:5]}")
    return data


def cmd_curate(args, argv) -> int:
    from .curation import curate_batch
    from .pipeline import load_bundle_item
    if bool(args.bundle) == bool(args.batch):
        raise UsageError("give exactly one of --bundle or --batch")
    if args.bundle:
        dirs = [Path(args.bundle)]
    else:
        root = Path(args.batch)
        if not root.is_dir():
            raise UsageError(f"not a directory: {root}")
        dirs = sorted(p.parent for p in root.glob("*/manifest.json"))
    missing = [str(d) for d in dirs if not (d / "manifest.json").is_file()]
    if missing or not dirs:
        raise UsageError(f"no bundle found at {missing or args.batch}")
    labels = _load_labels(args.labels) if args.labels else None
    cfg = _run_config(args)
    backends = make_backends(cfg.backends, cfg.pipeline.total_steps)
    try:
        report = curate_batch([load_bundle_item(d) for d in dirs], cfg.pipeline, backends,
                              labels=labels, jobs=args.jobs)
    except KeyError as exc:
        raise UsageError(str(exc)) from exc
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    lines = [f"{r['id']}: {r['label']} ({r['reason']}, ratio {r['area_ratio']:.3f})"
             for r in report["items"]]
    for row in report.get("rows", []):
        lines.append(f"accuracy {row['accuracy']:.2f}  precision {row['precision']:.2f}  "
                     f"recall {row['recall']:.2f}")
    _emit(args, "\n".join(lines), report)
    return EXIT_OK


def cmd_dataset(args, argv) -> int:
    from .dataset import BandUnachievableError, build_dataset, make_toy_pool
    if args.dataset_cmd == "toy-pool":
        make_toy_pool(args.out, count=args.count, size=args.size, seed=args.seed)
        _emit(args, f"wrote toy pool to {args.out}", {"pool": args.out})
        return EXIT_OK
    if not Path(args.pool).is_dir():
        raise UsageError(f"pool directory not found: {args.pool}")
    if args.easy < 0 or args.hard < 0:
        raise UsageError("sample counts must be non-negative")
    try:
        manifest = build_dataset(args.pool, args.out, {"easy": args.easy, "hard": args.hard},
                                 seed=args.seed, cooccurrence=args.cooccurrence,
                                 scale_range=(args.min_scale, args.max_scale),
                                 max_attempts=args.max_attempts, jobs=args.jobs)
    except (BandUnachievableError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    n = len(manifest["samples"])
    _emit(args, f"{n} samples written to {args.out} (manifest {manifest['manifest_hash'][:12]})",
          {"samples": n, "manifest_hash": manifest["manifest_hash"], "out": args.out})
    return EXIT_OK


def cmd_eval(args, argv) -> int:
    from .dataset import evaluate, write_report
    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    if not (Path(args.dataset) / "manifest.json").is_file():
        raise UsageError(f"no dataset manifest in {args.dataset}")
    method = "external" if args.results else args.sampler
    cfg = _run_config(args, rng_seed=args.seed)
    backends_for, metric_backend = None, None
    if cfg.backends.kind == "remote":
        shared = make_backends(cfg.backends, cfg.pipeline.total_steps)
        backends_for = lambda _s: shared  # noqa: E731
        metric_backend = shared.metrics
    elif cfg.backends.urls.get("metrics"):
        from .backends.remote import RemoteBackend
        metric_backend = RemoteBackend(cfg.backends.urls["metrics"], timeout=cfg.backends.timeout)
    try:
        report = evaluate(args.dataset, method, metrics, backends_for=backends_for,
                          config=cfg.pipeline, results_dir=args.results,
                          seed=cfg.pipeline.rng_seed, metric_backend=metric_backend,
                          jobs=args.jobs)
    except (ValueError, FileNotFoundError) as exc:
        raise UsageError(str(exc)) from exc
    jp, cp = write_report(report, args.out)
    for note in report["notices"]:
        print(f"notice: {note}", file=sys.stderr)
    lines = [f"{'metric':<10}{'easy':>12}{'hard':>12}"]
    for m in report["metrics"]:
        cells = ["-" if report["means"][d][m] is None else f"{report['means'][d][m]:.4f}"
                 for d in ("easy", "hard")]
        lines.append(f"{m:<10}{cells[0]:>12}{cells[1]:>12}")
    lines.append(f"report: {jp} / {cp}")
    _emit(args, "\n".join(lines), {"report": str(jp), "csv": str(cp), "means": report["means"]})
    return EXIT_OK


def cmd_backends(args, argv) -> int:
    cfg = _run_config(args)
    if args.backends_cmd == "serve":
        from .backends.remote import make_server
        backends = make_backends(cfg.backends, cfg.pipeline.total_steps)
        server = make_server(backends, args.host, args.port)
        host, port = server.server_address[:2]
        print(f"serving on http://{host}:{port}", flush=True)
        try:
            server.serve_forever()
        except KeyboardInterrupt:
            pass
        finally:
            server.server_close()
        return EXIT_OK
    backends = make_backends(cfg.backends, cfg.pipeline.total_steps)
    roles = {"diffusion": backends.diffusion, "segmenter": backends.segmenter,
             "depth": backends.depth, "remover": backends.remover}
    if backends.metrics is not None:
        roles["metrics"] = backends.metrics
    status, seen = {}, {}
    for role, b in roles.items():
        if id(b) not in seen:
            ping = getattr(b, "ping", None)
            seen[id(b)] = ping() if ping else b.identity()
        info = seen[id(b)]
        status[role] = {"version": info.get("backend_version", info.get("version", "unknown")),
                        "identity": b.identity()}
    human = "\n".join(f"{r:<10} ok  {s['version']}" for r, s in status.items())
    _emit(args, human, status)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _common(p, backends=True):
    p.add_argument("--config", help="JSON config file")
    if backends:
        p.add_argument("--scene", help="mock scene directory (selects mock backends)")
        p.add_argument("--backend-url", help="model server base URL (selects remote backends)")
    p.add_argument("--json", action="store_true", help="machine-readable output")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="amodal", description="Amodal completion of occluded objects.")
    ap.add_argument("--version", action="version", version=f"amodal {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("complete", help="complete one occluded object")
    p.add_argument("--image", required=True)
    p.add_argument("--query", required=True, help="object category")
    p.add_argument("--point", type=_point, help="X,Y seed point on the object")
    p.add_argument("--sampler", choices=SAMPLERS, default="mc")
    p.add_argument("--seed", type=int)
    p.add_argument("--k", type=int, help="composite timestep")
    p.add_argument("--layer", type=int, help="decoder layer for feature clustering")
    p.add_argument("--background", choices=BACKGROUNDS)
    p.add_argument("--variants", type=int, default=1)
    p.add_argument("--debug-trace", action="store_true")
    p.add_argument("--out", required=True)
    _common(p)
    p.set_defaults(func=cmd_complete)

    p = sub.add_parser("curate", help="judge whether completions are complete")
    p.add_argument("--bundle")
    p.add_argument("--batch")
    p.add_argument("--labels", help="JSON {id: complete|incomplete} or CSV id,label")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", help="also write the JSON report here")
    _common(p)
    p.set_defaults(func=cmd_curate)

    p = sub.add_parser("dataset", help="pseudo-occlusion dataset tools")
    dsub = p.add_subparsers(dest="dataset_cmd", required=True)
    b = dsub.add_parser("build")
    b.add_argument("--pool", required=True)
    b.add_argument("--easy", type=int, default=0)
    b.add_argument("--hard", type=int, default=0)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", required=True)
    b.add_argument("--cooccurrence", help="JSON {category: [co-occurring categories]}")
    b.add_argument("--min-scale", type=float, default=0.3)
    b.add_argument("--max-scale", type=float, default=1.5)
    b.add_argument("--max-attempts", type=int, default=1000)
    b.add_argument("--jobs", type=int, default=1)
    _common(b, backends=False)
    t = dsub.add_parser("toy-pool", help="write a small procedural object pool")
    t.add_argument("--out", required=True)
    t.add_argument("--count", type=int, default=12)
    t.add_argument("--size", type=int, default=96)
    t.add_argument("--seed", type=int, default=0)
    _common(t, backends=False)
    p.set_defaults(func=cmd_dataset)

    p = sub.add_parser("eval", help="score a method on a pseudo-occlusion dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--sampler", choices=SAMPLERS, default="mc")
    p.add_argument("--results", help="directory of external results (one subdir per sample)")
    p.add_argument("--metrics", default="iou,l1,psnr")
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)
    _common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("backends", help="backend utilities")
    bsub = p.add_subparsers(dest="backends_cmd", required=True)
    c = bsub.add_parser("check", help="ping every configured backend")
    _common(c)
    s = bsub.add_parser("serve", help="expose the configured backends over HTTP")
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=int, default=8700)
    _common(s)
    p.set_defaults(func=cmd_backends)
    return ap


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, ["amodal"] + argv)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except QueryResolutionError as exc:
        print(f"query resolution failed: {exc}", file=sys.stderr)
        return EXIT_QUERY
    except BackendContractError as exc:
        print(f"backend contract violation: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except (BackendTransportError, BackendError) as exc:
        print(f"backend unavailable: {exc}", file=sys.stderr)
        return EXIT_TRANSPORT


if __name__ == "__main__":
    sys.exit(main())
