"""Single command-line entry point; subcommands wrap the library modules.

Data goes only to the requested output paths; logs are JSON lines on
stderr; stdout carries exactly one JSON summary line on success.  Exit
codes: 0 success, 1 runtime failure, 2 bad options or config.  Every
flag except --config has an identically named config-file key
(dashes become underscores).
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from . import jsonlog
from .config import (
    add_option,
    load_config,
    parse_fractions,
    parse_relation_names,
    parser_defaults,
    require,
    resolve,
)
from .errors import ConfigError, CorpointError


def _add_common(sp, default_out: str):
    add_option(sp, "--config", dtype=str,
               help="JSON config file; flags override its values")
    add_option(sp, "--seed", dtype=int, default=0, help="base random seed")
    add_option(sp, "--out", dtype=str, default=default_out, help="output directory")
    add_option(sp, "--log-level", dtype=str, default="info",
               choices=["debug", "info", "warning", "error"], help="stderr log level")


def _add_endpoint(sp):
    add_option(sp, "--endpoint-url", dtype=str, default="mock:gt",
               help="endpoint base URL, or a mock: URL")
    add_option(sp, "--model", dtype=str, default="mock-model",
               help="model name sent in each request")
    add_option(sp, "--concurrency", dtype=int, default=4,
               help="max in-flight requests")
    add_option(sp, "--max-retries", dtype=int, default=3,
               help="retries per request on 429/5xx")
    add_option(sp, "--timeout", dtype=float, default=30.0,
               help="per-request timeout, seconds")


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(
        prog="corpoint",
        description="Pointing-with-rationales toolkit: synthesize scenes, "
                    "build training data, evaluate, analyze, visualize.",
    )
    subs = parser.add_subparsers(dest="cmd")
    by_name: dict[str, argparse.ArgumentParser] = {}

    sp = by_name["synth"] = subs.add_parser(
        "synth", help="generate a synthetic scene benchmark")
    _add_common(sp, "out/synth")
    add_option(sp, "--scenes", dtype=int, default=60, help="total scene count")
    add_option(sp, "--holdout-relations", dtype=str, default="",
               help="comma-separated relations reserved for the holdout set")
    add_option(sp, "--holdout-fraction", dtype=float, default=0.3,
               help="share of scenes in the holdout set")
    add_option(sp, "--width", dtype=int, default=128, help="scene width, px")
    add_option(sp, "--height", dtype=int, default=96, help="scene height, px")
    add_option(sp, "--points-per-scene", dtype=int, default=10,
               help="ground-truth points sampled per scene")
    add_option(sp, "--object-ref-fraction", dtype=float, default=0.0,
               help="share of scenes whose target is an object, not free space")
    add_option(sp, "--mask-format", dtype=str, default="rle",
               choices=["rle", "png"], help="mask storage in the manifest")

    sp = by_name["build"] = subs.add_parser(
        "build", help="build a training set from a scene manifest")
    _add_common(sp, "out/build")
    _add_endpoint(sp)
    add_option(sp, "--manifest", dtype=str, help="scene manifest (JSON lines)")
    add_option(sp, "--ratio", dtype=float, default=0.5,
               help="share of scenes that get endpoint reasoning documents")
    add_option(sp, "--min-inside", dtype=float, default=1.0,
               help="fraction of reply points required inside the mask")
    add_option(sp, "--validation-retries", dtype=int, default=3,
               help="regenerations allowed after a rejected reply")
    add_option(sp, "--include-images", flag=True,
               help="send scene images with each request")

    sp = by_name["eval"] = subs.add_parser(
        "eval", help="score an endpoint against a scene manifest")
    _add_common(sp, "out/eval")
    _add_endpoint(sp)
    add_option(sp, "--manifest", dtype=str, help="scene manifest (JSON lines)")
    add_option(sp, "--runs", dtype=int, default=3,
               help="independent runs (request seeds seed..seed+runs-1)")
    add_option(sp, "--cache", dtype=str,
               help="response cache path (default: <out>/responses.jsonl)")
    add_option(sp, "--cache-only", flag=True,
               help="never call the endpoint; fail on any cache miss")
    add_option(sp, "--policy", dtype=str, default="clamp",
               choices=["clamp", "reject"], help="out-of-range coordinate policy")
    add_option(sp, "--oracle-context", flag=True,
               help="embed ground-truth hints in prompts (harness calibration only)")
    add_option(sp, "--include-images", flag=True,
               help="send scene images with each request")

    sp = by_name["stats"] = subs.add_parser(
        "stats", help="significance tests over run-accuracy groups")
    _add_common(sp, "out/stats")
    add_option(sp, "--groups", dtype=str,
               help="JSON file of groups: [{label, mean, dispersion, n}, ...]")
    add_option(sp, "--dispersion", dtype=str, default="se", choices=["se", "sd"],
               help="how group dispersion values are read")
    add_option(sp, "--test", dtype=str, default="welch", choices=["welch", "pooled"],
               help="two-sample test variant")
    add_option(sp, "--baseline", dtype=str,
               help="baseline group label (default: first group)")

    sp = by_name["viz"] = subs.add_parser(
        "viz", help="render per-step attention overlays from a dump")
    _add_common(sp, "out/viz")
    add_option(sp, "--dump", dtype=str, help="attention dump file")
    add_option(sp, "--image", dtype=str, help="image to overlay (PNG)")
    add_option(sp, "--alpha", dtype=float, default=0.45, help="heat blend weight")
    add_option(sp, "--cmap", dtype=str, default="viridis", help="matplotlib colormap")
    add_option(sp, "--demo", flag=True,
               help="synthesize a sample dump instead of reading --dump")
    add_option(sp, "--grid", dtype=int, default=24,
               help="patch lattice side for --demo")
    add_option(sp, "--skip-points", flag=True, help="omit point markers")

    sp = by_name["ablate"] = subs.add_parser(
        "ablate",
        help="sweep the reasoning fraction: nested subsets, simulated "
             "per-fraction eval, trend report")
    _add_common(sp, "out/ablate")
    add_option(sp, "--manifest", dtype=str, help="scene manifest (JSON lines)")
    add_option(sp, "--fractions", dtype=str, default="0,0.25,0.5,0.75,1",
               help="comma-separated reasoning fractions")
    add_option(sp, "--runs", dtype=int, default=3, help="eval runs per fraction")
    add_option(sp, "--concurrency", dtype=int, default=4,
               help="max in-flight requests")
    add_option(sp, "--model", dtype=str, default="mock-model",
               help="model name sent in each request")
    add_option(sp, "--blend-floor", dtype=float, default=0.35,
               help="simulated per-point hit rate at fraction 0")
    add_option(sp, "--blend-ceil", dtype=float, default=0.95,
               help="simulated per-point hit rate at fraction 1")

    return parser, by_name


# ---------------------------------------------------------------------------
# subcommand handlers


def cmd_synth(o) -> dict:
    from .scenes import Relation, SceneConfig, build_benchmark

    holdout = tuple(
        Relation(name) for name in parse_relation_names(o.holdout_relations)
    )
    config = SceneConfig(
        width=o.width,
        height=o.height,
        points_per_scene=o.points_per_scene,
        object_ref_fraction=o.object_ref_fraction,
    )
    main, hold = build_benchmark(
        o.scenes, holdout, o.seed,
        config=config, out_dir=o.out,
        holdout_fraction=o.holdout_fraction, mask_format=o.mask_format,
    )
    areas = [r.mask.area_fraction for r in main]
    return {
        "out": str(o.out),
        "main": len(main),
        "holdout": len(hold),
        "mean_mask_area": sum(areas) / len(areas) if areas else 0.0,
    }


def _make_client(o):
    from .endpoint import EndpointClient

    return EndpointClient(
        o.endpoint_url, o.model,
        timeout=o.timeout, max_retries=o.max_retries,
    )


def cmd_build(o) -> dict:
    from .pipeline import build_dataset

    require(o, "manifest")
    out = Path(o.out)
    result = build_dataset(
        o.manifest, _make_client(o),
        ratio=o.ratio, seed=o.seed, concurrency=o.concurrency,
        min_inside=o.min_inside, validation_retries=o.validation_retries,
        include_images=o.include_images,
        out_path=out / "train.jsonl", rejects_path=out / "rejects.jsonl",
    )
    stats = result.stats.to_dict()
    with open(out / "stats.json", "w", encoding="utf-8") as fh:
        json.dump(stats, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return {
        "out": str(out),
        "train": str(result.out_path),
        "rejects": str(result.rejects_path),
        **stats,
        "elapsed": round(result.stats.elapsed, 3),
    }


def cmd_eval(o) -> dict:
    from .evalrun import run_eval

    require(o, "manifest")
    out = Path(o.out)
    cache = Path(o.cache) if o.cache else out / "responses.jsonl"
    client = None if o.cache_only else _make_client(o)
    seeds = [o.seed + i for i in range(o.runs)]
    result = run_eval(
        o.manifest, client,
        seeds=seeds, concurrency=o.concurrency, policy=o.policy,
        oracle_context=o.oracle_context, include_images=o.include_images,
        cache_path=cache, cache_only=o.cache_only, out_dir=out,
    )
    return {"out": str(out), "cache": str(cache), **result.summary_dict()}


def cmd_stats(o) -> dict:
    from .plotting import save_group_comparison
    from .stats import pooled_from_summary, welch_from_summary

    require(o, "groups")
    raw = json.loads(Path(o.groups).read_text(encoding="utf-8"))
    groups = raw["groups"] if isinstance(raw, dict) else raw
    if not isinstance(groups, list) or len(groups) < 2:
        raise ConfigError("groups file must list at least 2 groups")
    for g in groups:
        missing = [k for k in ("label", "mean", "dispersion", "n") if k not in g]
        if missing:
            raise ConfigError(
                f"group entry {g.get('label', '?')!r} missing: " + ", ".join(missing)
            )
    labels = [g["label"] for g in groups]
    base_label = o.baseline or labels[0]
    if base_label not in labels:
        raise ConfigError(f"baseline {base_label!r} not among groups")
    base = groups[labels.index(base_label)]
    test_fn = welch_from_summary if o.test == "welch" else pooled_from_summary

    out = Path(o.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for g in groups:
        if g["label"] == base_label:
            rows.append({**g, "diff": 0.0, "t": "", "df": "", "p": "", "degenerate": ""})
            continue
        r = test_fn(
            g["mean"], g["dispersion"], g["n"],
            base["mean"], base["dispersion"], base["n"],
            dispersion=o.dispersion,
        )
        rows.append({
            **g, "diff": r.diff, "t": r.t_stat, "df": r.df,
            "p": r.p_value, "degenerate": r.degenerate,
        })
    csv_path = out / "tests.csv"
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["label", "mean", "dispersion", "n",
                            "diff", "t", "df", "p", "degenerate"])
        writer.writeheader()
        writer.writerows(rows)
    fig_path = save_group_comparison(
        [(g["label"], g["mean"], g["dispersion"]) for g in groups],
        out / "groups.png",
    )
    tests = [
        {"label": r["label"], "p": r["p"], "diff": r["diff"]}
        for r in rows if r["label"] != base_label
    ]
    return {
        "out": str(out), "csv": str(csv_path), "figure": str(fig_path),
        "baseline": base_label, "test": o.test, "tests": tests,
    }


def cmd_viz(o) -> dict:
    import numpy as np

    from .attention import (
        aggregate_all,
        aggregate_step,
        overlay_heatmap,
        png_bytes,
        read_dump,
        synthesize_dump,
        write_dump,
    )
    from .cor import parse_document

    out = Path(o.out)
    out.mkdir(parents=True, exist_ok=True)
    if o.demo:
        from .cor import AffordanceSubtype, compose_document, serialize

        text = serialize(compose_document(
            reference_labels=["red box"],
            subtype=AffordanceSubtype(AffordanceSubtype.FREE_SPACE_REFERENCE),
            region_phrase="area to the left of the red box, excluding occupied pixels",
            points=[(0.22, 0.58), (0.31, 0.66), (0.27, 0.72)],
        ))
        dump = synthesize_dump(text, grid=(o.grid, o.grid), seed=o.seed)
        write_dump(dump, out / "demo.dump")
    else:
        require(o, "dump")
        dump = read_dump(o.dump)

    if o.image:
        from PIL import Image

        image = np.asarray(Image.open(o.image).convert("RGB"))
    else:
        gh, gw = dump.grid
        image = np.full((gh * 14, gw * 14, 3), 230, dtype=np.uint8)

    doc = parse_document(dump.text)
    pts = None if o.skip_points or doc.points.empty else doc.points.points
    written = {}
    flags = {}
    items = [(s.kind.value, aggregate_step(dump, s.kind)) for s in doc.steps]
    items.append(("all", aggregate_all(dump)))
    for name, res in items:
        img = overlay_heatmap(image, res.heat, alpha=o.alpha, cmap=o.cmap, points=pts)
        path = out / f"{name}.png"
        path.write_bytes(png_bytes(img))
        written[name] = str(path)
        flags[name] = res.flag
    with open(out / "index.json", "w", encoding="utf-8") as fh:
        json.dump({"files": written, "flags": flags, "grid": list(dump.grid)},
                  fh, indent=2, sort_keys=True)
        fh.write("\n")
    return {"out": str(out), "files": written, "flags": flags}


def cmd_ablate(o) -> dict:
    from .endpoint import EndpointClient
    from .evalrun import run_eval
    from .pipeline import build_dataset
    from .plotting import save_trend_figure
    from .preprocess import (
        RecordKind,
        ablation_subsets,
        standard_record,
        write_training_jsonl,
    )
    from .scenes import load_manifest
    from .stats import ablation_report, trend_band

    require(o, "manifest")
    fractions = parse_fractions(o.fractions)
    if 0.0 not in fractions:
        raise ConfigError("fractions must include 0 as the baseline")
    scenes = load_manifest(o.manifest)
    if not scenes:
        raise ConfigError(f"manifest has no scenes: {o.manifest}")
    bench = Path(o.manifest).stem
    out = Path(o.out)
    out.mkdir(parents=True, exist_ok=True)

    # reasoning pool from the echo backend, standard pool locally
    gt_client = EndpointClient("mock:gt", o.model)
    built = build_dataset(
        scenes, gt_client, ratio=1.0, seed=o.seed,
        concurrency=o.concurrency, keep_records=True,
    )
    reasoning = built.records or []
    standard = [
        standard_record(f"{s.id}-std", s.instruction, s.gt_points, image=s.image_path)
        for s in scenes
    ]
    subsets = ablation_subsets(reasoning, standard, fractions, o.seed)

    rows = []
    for frac in fractions:
        subset = subsets[frac]
        write_training_jsonl(subset, out / "subsets" / f"subset-{frac:g}.jsonl")
        hit = o.blend_floor + (o.blend_ceil - o.blend_floor) * frac
        url = f"mock:blend?p={hit:.6f}&seed={o.seed}"
        client = EndpointClient(url, o.model)
        result = run_eval(
            scenes, client,
            seeds=[o.seed + i for i in range(o.runs)],
            concurrency=o.concurrency, oracle_context=True,
            benchmark=bench,
        )
        rows.append({
            "fraction": frac,
            "n_reasoning": sum(1 for r in subset if r.kind is RecordKind.REASONING),
            "n_standard": sum(1 for r in subset if r.kind is RecordKind.STANDARD),
            "mean_pct": result.report.mean * 100.0,
            "spread_pct": result.report.spread * 100.0,
        })

    summary = ablation_report(
        {bench: [(r["fraction"], r["mean_pct"]) for r in rows]}
    )[bench]
    fit = summary.trend
    report = {
        "rows": rows,
        "trend": fit.to_dict() if fit is not None else None,
        "positive_slope": fit is not None and fit.slope > 0,
        "gain_abs": summary.gain_abs,
        "gain_rel_pct": summary.gain_rel_pct,
    }
    csv_path = out / "ablation.csv"
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    with open(out / "trend.json", "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    xs = [r["fraction"] for r in rows]
    ys = [r["mean_pct"] for r in rows]
    fig_path = band_path = None
    if fit is not None:
        if fit.df >= 1:
            grid = [min(xs) + (max(xs) - min(xs)) * i / 24 for i in range(25)]
            yhat, lo, hi = trend_band(fit, grid)
            band_path = out / "band.csv"
            with open(band_path, "w", encoding="utf-8", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["fraction", "fit_pct", "lo_pct", "hi_pct"])
                for g, yh, a, b in zip(grid, yhat, lo, hi):
                    writer.writerow([f"{g:.6f}", f"{yh:.6f}", f"{a:.6f}", f"{b:.6f}"])
        fig_path = save_trend_figure(
            xs, ys, fit, out / "trend.png",
            errors=[r["spread_pct"] for r in rows],
        )
    return {
        "out": str(out), "csv": str(csv_path),
        "figure": str(fig_path) if fig_path else None,
        "band": str(band_path) if band_path else None,
        **report,
    }


HANDLERS = {
    "synth": cmd_synth,
    "build": cmd_build,
    "eval": cmd_eval,
    "stats": cmd_stats,
    "viz": cmd_viz,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    parser, by_name = build_parser()
    args = parser.parse_args(argv)
    if args.cmd is None:
        parser.print_help()
        return 2
    provided = {k: v for k, v in vars(args).items() if k != "cmd"}
    config_path = provided.pop("config", None)

    logger = None
    try:
        valid_keys = set()
        for sp in by_name.values():
            valid_keys |= set(parser_defaults(sp))
        config = load_config(config_path, valid_keys) if config_path else {}
        o = resolve(parser_defaults(by_name[args.cmd]), config, provided)
        logger = jsonlog.setup(o.log_level)
        jsonlog.log_event(logger, "info", "start", subcommand=args.cmd)
        summary = HANDLERS[args.cmd](o)
        print(json.dumps({"subcommand": args.cmd, **summary}, sort_keys=True))
        return 0
    except ConfigError as exc:
        _report_error(logger, exc.payload())
        return 2
    except CorpointError as exc:
        _report_error(logger, exc.payload())
        return 1
    except OSError as exc:
        _report_error(logger, {"error": "IO", "message": str(exc)})
        return 1


def _report_error(logger, payload: dict) -> None:
    if logger is not None:
        jsonlog.log_event(logger, "error", "error", **payload)
    else:
        print(json.dumps({"timestamp": None, "level": "error",
                          "event": "error", "fields": payload},
                         separators=(",", ":")), file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
