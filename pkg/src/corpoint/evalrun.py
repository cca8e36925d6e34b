"""Eval harness: query an endpoint per scene, score points against masks.

A run is one pass over the scene set with its own request seed; the
aggregate over runs is mean and sample standard deviation of per-run
mean accuracy.  Replies only need a parsable final point list (a bare
list or a full step document both work); replies with no list score 0
for that image and are flagged, never dropped.  A request that still
fails after the client's retries likewise scores 0 for that image and
bumps a failure counter; it never aborts the run.

Raw replies are cached as line-delimited records keyed by (run seed,
scene id), so any result can be recomputed offline from the cache alone;
cache_only mode never touches the endpoint and fails fast on a miss.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .cor import parse_points
from .endpoint import EndpointClient, EndpointError, context_line
from .errors import CorpointError
from .jsonlog import log_event
from .metric import EvalReport, ImageScore, aggregate, format_pct, score_image
from .parallel import Gauge, bounded_map
from .pipeline import PROMPT_HEADER, scene_context, scene_image_payload, _iter_scenes
from .scenes import SceneRecord

logger = logging.getLogger("corpoint.eval")


class MissingCacheError(CorpointError):
    code = "MissingCache"


class BenchmarkMismatchError(CorpointError):
    code = "BenchmarkMismatch"


@dataclass
class EvalResult:
    report: EvalReport
    scores_by_run: dict[str, list[ImageScore]]
    empty_predictions: int
    endpoint_attempts: int
    cache_hits: int
    endpoint_failures: int = 0
    benchmark: str = ""
    model: str = ""

    def image_ids(self) -> frozenset[str]:
        first = next(iter(self.scores_by_run.values()))
        return frozenset(s.image_id for s in first)

    def summary_dict(self) -> dict:
        return {
            "benchmark": self.benchmark,
            "model": self.model,
            "mean": self.report.mean,
            "mean_pct": self.report.mean * 100.0,
            "spread": self.report.spread,
            "spread_pct": self.report.spread * 100.0,
            "formatted": format_pct(self.report.mean, self.report.spread),
            "per_run": {run: mean for run, mean in self.report.per_run},
            "single_run": self.report.single_run,
            "empty_predictions": self.empty_predictions,
            "endpoint_failures": self.endpoint_failures,
            "cache_hits": self.cache_hits,
        }


def eval_prompt(scene: SceneRecord, *, oracle_context: bool = False) -> str:
    """Model-facing prompt.  oracle_context embeds the ground-truth hint
    block and exists to calibrate the harness against echo backends; it
    is never what you want when measuring a real model."""
    lines = [PROMPT_HEADER, f"Instruction: {scene.instruction}"]
    if oracle_context:
        lines.append(context_line(scene_context(scene)))
    return "\n".join(lines)


def load_cache(path) -> dict[tuple[int, str], dict]:
    """Read a response cache; later lines win on duplicate keys."""
    out: dict[tuple[int, str], dict] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            out[(int(rec["run_seed"]), str(rec["record_id"]))] = rec
    return out


def _cache_line(
    run_seed: int, record_id: str, text: str, attempts: int, failed: bool
) -> str:
    rec = {"run_seed": run_seed, "record_id": record_id, "text": text, "attempts": attempts}
    if failed:
        rec["failed"] = True
    return json.dumps(rec, separators=(",", ":"))


def run_eval(
    source,
    client: EndpointClient | None,
    *,
    seeds: Sequence[int],
    concurrency: int = 4,
    policy: str = "clamp",
    oracle_context: bool = False,
    include_images: bool = False,
    cache_path=None,
    cache_only: bool = False,
    out_dir=None,
    benchmark: str | None = None,
    model: str | None = None,
) -> EvalResult:
    """Evaluate the endpoint over the scenes once per seed.

    source is a manifest path or an iterable of SceneRecord; iterables
    are materialized since every run needs the same scene set.  With a
    cache_path, cached replies are reused and fresh ones appended; with
    cache_only, the endpoint is never called and a missing entry (or
    missing cache file) raises MissingCacheError.
    """
    if not seeds:
        raise ValueError("need at least one run seed")
    if isinstance(source, (str, Path)):
        scenes = list(_iter_scenes(source))
        base_dir = Path(source).parent
        if benchmark is None:
            benchmark = Path(source).stem
    else:
        scenes = list(source)
        base_dir = None
    if benchmark is None:
        benchmark = "scenes"
    if model is None:
        model = client.model if client is not None else "cached"
    if not scenes:
        raise ValueError("no scenes to evaluate")

    cache: dict[tuple[int, str], dict] = {}
    if cache_path is not None and Path(cache_path).exists():
        cache = load_cache(cache_path)
    elif cache_only:
        raise MissingCacheError(f"response cache not found: {cache_path}")
    if not cache_only and client is None:
        raise ValueError("need a client unless cache_only is set")

    gauge = Gauge()
    attempts_total = 0
    cache_hits = 0
    empty_total = 0
    failures_total = 0
    scores_by_run: dict[str, list[ImageScore]] = {}
    cache_fh = None
    if cache_path is not None and not cache_only:
        cache_path = Path(cache_path)
        cache_path.parent.mkdir(parents=True, exist_ok=True)
        cache_fh = open(cache_path, "a", encoding="utf-8")
    try:
        for run_seed in seeds:
            run_id = f"seed-{run_seed}"
            log_event(logger, "info", "eval.run.start",
                      run=run_id, scenes=len(scenes),
                      endpoint=getattr(client, "url", None), cache_only=cache_only)

            def task(scene: SceneRecord):
                hit = cache.get((run_seed, scene.id))
                if hit is not None:
                    return (
                        scene, str(hit["text"]), int(hit.get("attempts", 1)),
                        True, bool(hit.get("failed", False)),
                    )
                if cache_only:
                    raise MissingCacheError(
                        f"no cached reply for record {scene.id!r} at seed {run_seed}"
                    )
                prompt = eval_prompt(scene, oracle_context=oracle_context)
                image = scene_image_payload(scene, base_dir) if include_images else None
                try:
                    reply = client.generate(prompt, image=image, seed=run_seed)
                except EndpointError as exc:
                    # scored as an empty prediction; the run keeps going
                    return scene, "", exc.attempts, False, True
                return scene, reply.text, reply.attempts, False, False

            scores: list[ImageScore] = []
            for scene, text, attempts, was_hit, failed in bounded_map(
                task, scenes, concurrency, gauge=gauge
            ):
                pts = parse_points(text, policy=policy)
                score = score_image(scene.mask, pts, image_id=scene.id)
                scores.append(score)
                if was_hit:
                    cache_hits += 1
                else:
                    attempts_total += attempts
                    if cache_fh is not None:
                        cache_fh.write(
                            _cache_line(run_seed, scene.id, text, attempts, failed) + "\n"
                        )
                if failed:
                    failures_total += 1
                    log_event(logger, "warning", "eval.request.failed",
                              run=run_id, record=scene.id, attempts=attempts)
                if score.empty_prediction:
                    empty_total += 1
            scores_by_run[run_id] = scores
            run_mean = sum(s.accuracy for s in scores) / len(scores)
            log_event(logger, "info", "eval.run.done", run=run_id, mean=run_mean)
    finally:
        if cache_fh is not None:
            cache_fh.close()

    report = aggregate(scores_by_run)
    result = EvalResult(
        report=report,
        scores_by_run=scores_by_run,
        empty_predictions=empty_total,
        endpoint_attempts=attempts_total,
        cache_hits=cache_hits,
        endpoint_failures=failures_total,
        benchmark=str(benchmark),
        model=str(model),
    )
    log_event(logger, "info", "eval.done",
              mean=report.mean, spread=report.spread, max_in_flight=gauge.peak)
    if out_dir is not None:
        write_eval_outputs(result, out_dir)
    return result


def write_eval_outputs(result: EvalResult, out_dir) -> None:
    """scores.jsonl (per image per run), summary.json, summary.csv."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "scores.jsonl", "w", encoding="utf-8") as fh:
        for run_id, scores in result.scores_by_run.items():
            for s in scores:
                fh.write(json.dumps({
                    "run": run_id, "image_id": s.image_id,
                    "n_points": s.n_points, "n_inside": s.n_inside,
                    "accuracy": s.accuracy,
                    "empty_prediction": s.empty_prediction,
                }, separators=(",", ":")) + "\n")
    with open(out_dir / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(result.summary_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(out_dir / "summary.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["run", "accuracy_pct"])
        for run_id, mean in result.report.per_run:
            writer.writerow([run_id, f"{mean * 100.0:.6f}"])
        writer.writerow(["mean", f"{result.report.mean * 100.0:.6f}"])
        writer.writerow(["spread", f"{result.report.spread * 100.0:.6f}"])


def compare_models(results: Sequence[EvalResult]) -> list[dict]:
    """Rank results from different models on one benchmark.

    All results must carry the same benchmark name and the same image
    set; rows come back sorted by mean accuracy, best first, so input
    order never matters.
    """
    if not results:
        raise ValueError("nothing to compare")
    benchmarks = {r.benchmark for r in results}
    if len(benchmarks) > 1:
        raise BenchmarkMismatchError(
            "results span different benchmarks: " + ", ".join(sorted(benchmarks))
        )
    id_sets = {r.image_ids() for r in results}
    if len(id_sets) > 1:
        raise BenchmarkMismatchError("results were scored on different image sets")
    ranked = sorted(results, key=lambda r: (-r.report.mean, r.model))
    return [
        {
            "model": r.model,
            "benchmark": r.benchmark,
            "mean_pct": r.report.mean * 100.0,
            "spread_pct": r.report.spread * 100.0,
            "formatted": format_pct(r.report.mean, r.report.spread),
        }
        for r in ranked
    ]


__all__ = [
    "EvalResult", "run_eval", "eval_prompt", "load_cache",
    "write_eval_outputs", "compare_models",
    "MissingCacheError", "BenchmarkMismatchError",
]
