"""End-to-end acceptance gate.

Each test covers one release criterion and prints a single verdict line
(visible under ``pytest -s``); the same condition is asserted, so a
plain run fails loudly too.  Tolerances and time budgets are pinned in
the assertions, not in comments.
"""

from __future__ import annotations

import random
import time

import numpy as np

from conftest import (
    messy_document_text,
    oracle_contains,
    oracle_score,
    oracle_t_two_sided_p,
    random_document,
    random_mask,
)
from corpoint.attention import (
    AttentionDump,
    aggregate_step,
    step_spans,
    synthesize_dump,
    token_step_map,
    upsample_bilinear,
    whitespace_tokens,
)
from corpoint.cor import (
    Diagnostic,
    PointSet,
    StepKind,
    parse_document,
    serialize,
)
from corpoint.endpoint import EndpointClient, make_transport
from corpoint.evalrun import run_eval
from corpoint.metric import score_image
from corpoint.pipeline import build_dataset, validate_response
from corpoint.preprocess import (
    RecordKind,
    TrainingRecord,
    conversation,
    group_by_length,
    mean_length_range,
    pad_mask,
    pad_to_square,
)
from corpoint.scenes import SceneConfig, generate_scene
from corpoint.stats import ablation_report, t_two_sided_p, welch_from_summary


def _verdict(num: int, label: str, problems: list[str], detail: str = "") -> None:
    ok = not problems
    line = f"[criterion {num}] {'PASS' if ok else 'FAIL'}: {label}"
    if detail:
        line += f" ({detail})"
    if problems:
        line += " :: " + "; ".join(problems[:4])
    print(line)
    assert ok, line


def _quiet_client(url: str, model: str = "mock", **kw) -> EndpointClient:
    return EndpointClient(url, model, sleep=lambda _: None, **kw)


# ---------------------------------------------------------------------------
# 1. metric equals the per-pixel oracle


def test_criterion_1_metric_oracle_equivalence():
    rng = np.random.default_rng(101)
    problems: list[str] = []
    t0 = time.perf_counter()
    for case in range(500):
        w = int(rng.integers(1, 65))
        h = int(rng.integers(1, 65))
        mask = random_mask(rng, w, h)
        pts = []
        for _ in range(int(rng.integers(1, 21))):
            roll = rng.random()
            if roll < 0.1:
                # exact bounds exercise the clamp path
                pts.append((float(rng.choice([0.0, 1.0])), float(rng.random())))
            elif roll < 0.25:
                # pixel centers sit a half pixel from any bin edge
                pts.append(((int(rng.integers(0, w)) + 0.5) / w,
                            (int(rng.integers(0, h)) + 0.5) / h))
            else:
                pts.append((float(rng.random()), float(rng.random())))
        score = score_image(mask, PointSet(tuple(pts)), image_id=f"case-{case}")
        want_inside = sum(1 for p in pts if oracle_contains(mask, p))
        if score.n_inside != want_inside or score.accuracy != oracle_score(mask, pts):
            problems.append(
                f"case {case}: {score.n_inside}/{score.n_points} vs oracle {want_inside}"
            )
    elapsed = time.perf_counter() - t0
    if elapsed >= 5.0:
        problems.append(f"took {elapsed:.2f}s, budget 5s")
    _verdict(1, "metric matches per-pixel oracle on 500 instances",
             problems, f"{elapsed:.2f}s")


# ---------------------------------------------------------------------------
# 2. benchmark sanity: perfect echo scores 100, uniform tracks mask area


def test_criterion_2_benchmark_echo_and_uniform():
    problems: list[str] = []
    t0 = time.perf_counter()
    cfg = SceneConfig(width=96, height=72, min_objects=3, max_objects=5,
                      points_per_scene=6)
    scenes = [
        generate_scene(7000 + i, cfg, scene_id=f"acc-{i:04d}") for i in range(1000)
    ]
    mean_area_pct = 100.0 * float(
        np.mean([s.mask.area_fraction for s in scenes])
    )

    echo = run_eval(scenes, _quiet_client("mock:gt?seed=1", "gt-echo"),
                    seeds=[11], concurrency=8, oracle_context=True)
    if echo.report.mean != 1.0:
        problems.append(f"echo mean {echo.report.mean!r}, expected exactly 1.0")

    uni = run_eval(scenes, _quiet_client("mock:uniform?seed=5&k=16", "uniform"),
                   seeds=[3], concurrency=8)
    uni_pct = uni.report.mean * 100.0
    if abs(uni_pct - mean_area_pct) > 2.0:
        problems.append(
            f"uniform {uni_pct:.2f} vs mean area {mean_area_pct:.2f}, gap > 2.0"
        )
    elapsed = time.perf_counter() - t0
    if elapsed >= 60.0:
        problems.append(f"took {elapsed:.1f}s, budget 60s")
    _verdict(2, "1000-scene benchmark: echo 100.0, uniform within 2.0 of area",
             problems,
             f"uniform {uni_pct:.2f} vs area {mean_area_pct:.2f}, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 3. headline significance test and the t tail behind it


def test_criterion_3_welch_and_t_tail():
    problems: list[str] = []
    res = welch_from_summary(48.1, 0.1, 3, 43.9, 0.6, 3, dispersion="se")
    if not 0.015 <= res.p_value <= 0.030:
        problems.append(f"welch p {res.p_value:.6f} outside [0.015, 0.030]")

    pyrng = random.Random(303)
    worst = 0.0
    for _ in range(100):
        t = pyrng.uniform(-8.0, 8.0)
        df = 10.0 ** pyrng.uniform(-0.3, 2.3)  # df in roughly [0.5, 200]
        got = t_two_sided_p(t, df)
        want = oracle_t_two_sided_p(t, df)
        worst = max(worst, abs(got - want))
    if worst > 1e-9:
        problems.append(f"t tail worst abs error {worst:.3e} > 1e-9")
    _verdict(3, "welch p in range and t tail within 1e-9 of oracle",
             problems, f"p={res.p_value:.4f}, worst tail err {worst:.1e}")


# ---------------------------------------------------------------------------
# 4. ablation summaries: exact gains and positive fitted slopes


def _sweep(base: float, top: float, seed: int) -> list[tuple[float, float]]:
    """Five-fraction series with exact endpoints and a jittered interior."""
    rng = np.random.default_rng(seed)
    pairs = [(0.0, base)]
    for f in (0.25, 0.5, 0.75):
        pairs.append((f, base + (top - base) * f + float(rng.uniform(-0.8, 0.8))))
    pairs.append((1.0, top))
    return pairs


def test_criterion_4_ablation_gains_and_trends():
    problems: list[str] = []
    series = {
        "bench-a": _sweep(40.6, 48.1, 41),
        "bench-b": _sweep(36.1, 43.7, 42),
        "bench-c": _sweep(30.7, 41.2, 43),
    }
    report = ablation_report(series)
    for name, want in (("bench-a", 7.5), ("bench-b", 7.6), ("bench-c", 10.5)):
        got = report[name].gain_abs
        if got != want:
            problems.append(f"{name} gain {got!r} != {want}")
    rel = report["bench-c"].gain_rel_pct
    if rel is None or abs(rel - 34.2) > 0.05:
        problems.append(f"relative gain {rel!r} not within 0.05 of 34.2")
    for name, summary in report.items():
        if summary.trend is None or summary.trend.slope <= 0:
            problems.append(f"{name} slope not positive: {summary.trend!r}")
    _verdict(4, "gains 7.5/7.6/10.5 exact, rel 34.2, slopes positive",
             problems, f"rel={rel:.3f}")


# ---------------------------------------------------------------------------
# 5. parser round trip and crash-free fuzzing


def _mutate(data: bytearray, pyrng: random.Random) -> bytes:
    for _ in range(pyrng.randint(1, 8)):
        op = pyrng.randrange(3)
        if op == 0 and data:
            data[pyrng.randrange(len(data))] = pyrng.randrange(256)
        elif op == 1:
            data.insert(pyrng.randint(0, len(data)), pyrng.randrange(256))
        elif data:
            del data[pyrng.randrange(len(data))]
    return bytes(data)


def test_criterion_5_round_trip_and_fuzz():
    problems: list[str] = []
    t0 = time.perf_counter()
    pyrng = random.Random(505)
    for i in range(1000):
        doc = random_document(pyrng)
        back = parse_document(serialize(doc))
        if back != doc or serialize(back) != serialize(doc):
            problems.append(f"round trip {i} diverged")
            break

    seeds = [serialize(random_document(pyrng)).encode() for _ in range(40)]
    seeds += [messy_document_text(pyrng, random_document(pyrng)).encode()
              for _ in range(40)]
    crashes = 0
    for i in range(10_000):
        raw = _mutate(bytearray(pyrng.choice(seeds)), pyrng)
        text = raw.decode("utf-8", errors="replace")
        try:
            doc = parse_document(text)
        except Exception as exc:  # the parser must never raise on bytes
            crashes += 1
            if crashes == 1:
                problems.append(f"fuzz case {i} raised {type(exc).__name__}: {exc}")
            continue
        if not all(isinstance(d, Diagnostic) for d in doc.diagnostics):
            problems.append(f"fuzz case {i}: non-structured diagnostic")
            break
    if crashes:
        problems.append(f"{crashes} fuzz crashes")
    elapsed = time.perf_counter() - t0
    if elapsed >= 30.0:
        problems.append(f"took {elapsed:.1f}s, budget 30s")
    _verdict(5, "1000 exact round trips, 10000 fuzz cases without a crash",
             problems, f"{elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 6. dataset build: counts, revalidation, determinism, bounded concurrency


class _SlowTransport:
    """Delegates to a mock transport after a short sleep so build tasks
    genuinely overlap and the in-flight gauge sees real concurrency."""

    def __init__(self, url: str):
        self.inner = make_transport(url)

    def send(self, body):
        time.sleep(0.001)
        return self.inner.send(body)


def test_criterion_6_build_pipeline(tmp_path):
    problems: list[str] = []
    cfg = SceneConfig(width=64, height=48, min_objects=3, max_objects=4,
                      points_per_scene=4)
    scenes = [
        generate_scene(9000 + i, cfg, scene_id=f"b{i:04d}") for i in range(200)
    ]
    by_id = {s.id: s for s in scenes}

    def run(tag: str):
        out = tmp_path / tag
        client = EndpointClient("mock:gt?seed=2", "builder", sleep=lambda _: None,
                                transport=_SlowTransport("mock:gt?seed=2"))
        res = build_dataset(
            scenes, client,
            ratio=0.5, seed=77, concurrency=4,
            out_path=out / "train.jsonl", rejects_path=out / "rejects.jsonl",
            keep_records=True,
        )
        return res, (out / "train.jsonl").read_bytes(), (out / "rejects.jsonl").read_bytes()

    res, train_bytes, rej_bytes = run("one")
    res2, train_bytes2, rej_bytes2 = run("two")

    kinds = {k: sum(1 for r in res.records if r.kind is k) for k in RecordKind}
    if kinds[RecordKind.REASONING] != 100 or kinds[RecordKind.STANDARD] != 100:
        problems.append(f"record mix {kinds}, expected 100 + 100")
    if res.stats.requested != res.stats.succeeded + res.stats.rejected_schema + res.stats.rejected_points:
        problems.append("requested != succeeded + rejects")
    if len(res.rejects) != res.stats.rejected_schema + res.stats.rejected_points:
        problems.append("reject log disagrees with counters")

    for rec in res.records:
        if rec.kind is not RecordKind.REASONING:
            continue
        scene = by_id[rec.id.removesuffix("-cor")]
        doc, reason = validate_response(rec.conversation[1]["value"], scene.mask)
        if reason is not None:
            problems.append(f"{rec.id} fails revalidation: {reason}")
            break
        if len(doc.steps) != 4:
            problems.append(f"{rec.id} has {len(doc.steps)} steps")
            break

    if train_bytes != train_bytes2 or rej_bytes != rej_bytes2:
        problems.append("same-seed reruns are not byte identical")
    if res.stats.to_dict() != res2.stats.to_dict():
        problems.append("same-seed reruns disagree on stats")
    if not 2 <= res.stats.max_in_flight <= 4:
        problems.append(f"in-flight peak {res.stats.max_in_flight} outside [2, 4]")
    _verdict(6, "200-scene build: 100+100, revalidated, deterministic, bounded",
             problems, f"peak in-flight {res.stats.max_in_flight}")


# ---------------------------------------------------------------------------
# 7. preprocessing: square padding and length grouping


def _length_record(i: int, n_words: int) -> TrainingRecord:
    return TrainingRecord(
        id=f"r{i}", kind=RecordKind.STANDARD,
        conversation=conversation("place a point " + "pad " * n_words,
                                  "[(0.500, 0.500)]"),
    )


def test_criterion_7_padding_and_grouping():
    problems: list[str] = []
    rng = np.random.default_rng(707)

    for _ in range(50):
        side = int(rng.integers(2, 40))
        img = rng.integers(0, 256, size=(side, side), dtype=np.uint8)
        padded, t = pad_to_square(img)
        if padded is not img or not t.identity:
            problems.append("square input was not passed through")
            break
        again, t2 = pad_to_square(padded)
        if again is not padded:
            problems.append("pad_to_square is not idempotent")
            break

    cfg = SceneConfig(width=80, height=48, min_objects=3, max_objects=4,
                      points_per_scene=8)
    for i in range(60):
        scene = generate_scene(11_000 + i, cfg, scene_id=f"p{i:04d}")
        padded_mask, t = pad_mask(scene.mask)
        extra = PointSet(tuple(
            (float(x), float(y)) for x, y in rng.random((8, 2))
        ))
        for pts in (scene.gt_points, extra):
            before = score_image(scene.mask, pts)
            after = score_image(padded_mask, t.apply_points(pts))
            if (before.n_inside, before.accuracy) != (after.n_inside, after.accuracy):
                problems.append(
                    f"scene {i}: score changed {before.accuracy} -> {after.accuracy}"
                )
                break
        if problems:
            break

    grouped_total = 0.0
    shuffled_total = 0.0
    for s in range(1000):
        n = int(rng.integers(24, 65))
        records = [
            _length_record(i, int(rng.integers(1, 220))) for i in range(n)
        ]
        batches = group_by_length(records, 8, seed=s)
        flat = sorted(r.id for b in batches for r in b)
        if flat != sorted(r.id for r in records):
            problems.append(f"set {s}: grouped output is not a permutation")
            break
        grouped_total += mean_length_range(batches)
        order = rng.permutation(n)
        shuffled = [records[int(i)] for i in order]
        shuffled_total += mean_length_range(
            [shuffled[k:k + 8] for k in range(0, n, 8)]
        )
    if grouped_total >= shuffled_total:
        problems.append(
            f"grouping not tighter: {grouped_total:.1f} vs shuffle {shuffled_total:.1f}"
        )
    _verdict(7, "padding preserves scores, grouping tightens batches",
             problems,
             f"mean range {grouped_total / 1000:.2f} vs {shuffled_total / 1000:.2f}")


# ---------------------------------------------------------------------------
# 8. attention rendering: hot patches, aggregation oracle, segmentation


_CANON_TEXT = "\n".join([
    "Step 1 — Identify Reference Object: the tray.",
    "Step 2 — Determine Goal's Subtype: a Placement Affordance.",
    "Step 3 — Define Search Space: the area left of the tray.",
    "Step 4 — Generate Output: sampled points follow.",
    "[(0.250, 0.500)]",
])

_ALIAS_TEXT = "\n".join([
    "The model replied:",
    "1) Identify Reference Objects: the left tray.",
    "2) Determine Subtype: a Free Space Reference.",
    "3) Define Target Area: open pixels behind the tray.",
    "4) Generate Final Coordinates: listed below.",
    "( (0.125, 0.250), (0.750, 0.500) )",
])

_PARTIAL_TEXT = "\n".join([
    "Step 1 — Identify Reference Object: the mug on the desk.",
    "Notes about lighting only.",
    "Step 4 — Generate Output: two candidates.",
    "[(0.100, 0.900), (0.300, 0.300)]",
])

_IDENT = StepKind.IDENTIFY_REFERENCE
_SUBTYPE = StepKind.DETERMINE_SUBTYPE
_SEARCH = StepKind.DEFINE_SEARCH_SPACE
_OUTPUT = StepKind.GENERATE_OUTPUT

# token-by-token step assignment, counted by hand from the texts above
_SEGMENTATION_CASES = [
    (_CANON_TEXT,
     [_IDENT] * 8 + [_SUBTYPE] * 9 + [_SEARCH] * 12 + [_OUTPUT] * 10),
    (_ALIAS_TEXT,
     [None] * 3 + [_IDENT] * 7 + [_SUBTYPE] * 7 + [_SEARCH] * 9 + [_OUTPUT] * 12),
    (_PARTIAL_TEXT,
     [_IDENT] * 15 + [_OUTPUT] * 11),
]

_HOT = {
    _IDENT: (1, 2),
    _SUBTYPE: (3, 5),
    _SEARCH: (0, 7),
    _OUTPUT: (5, 1),
}


def _hot_patch_dump(grid: tuple[int, int]) -> AttentionDump:
    tokens = whitespace_tokens(_CANON_TEXT)
    spans = step_spans(_CANON_TEXT)
    gh, gw = grid
    rng = np.random.default_rng(808)
    matrix = (rng.random((len(tokens), gh * gw)) * 0.05).astype(np.float32)
    for i, tok in enumerate(tokens):
        for kind, (start, end) in spans.items():
            if start <= tok.midpoint < end:
                r, c = _HOT[kind]
                matrix[i, r * gw + c] += 1.0
                break
    return AttentionDump(text=_CANON_TEXT, tokens=tokens, grid=grid, matrix=matrix)


def test_criterion_8_attention_rendering():
    problems: list[str] = []

    grid = (6, 8)
    scale = 14
    dump = _hot_patch_dump(grid)
    for kind, (hot_r, hot_c) in _HOT.items():
        heat = aggregate_step(dump, kind).heat
        up = upsample_bilinear(heat, grid[0] * scale, grid[1] * scale)
        r, c = np.unravel_index(int(np.argmax(up)), up.shape)
        if (r // scale, c // scale) != (hot_r, hot_c):
            problems.append(
                f"{kind.value}: overlay argmax in patch "
                f"({r // scale}, {c // scale}), hot patch is ({hot_r}, {hot_c})"
            )

    synth = synthesize_dump(_CANON_TEXT, grid=(5, 7), seed=3)
    spans = step_spans(_CANON_TEXT)
    for kind in StepKind:
        start, end = spans[kind]
        rows = [i for i, tok in enumerate(synth.tokens)
                if start <= tok.midpoint < end]
        cells = []
        for j in range(5 * 7):
            acc = 0.0
            for i in rows:
                acc += float(synth.matrix[i, j])
            cells.append(acc / len(rows))
        lo, hi = min(cells), max(cells)
        want = np.array([(v - lo) / (hi - lo) for v in cells]).reshape(5, 7)
        got = aggregate_step(synth, kind).heat
        err = float(np.max(np.abs(got - want)))
        if err > 1e-6:
            problems.append(f"{kind.value}: aggregation off by {err:.2e}")

    for case, (text, expected) in enumerate(_SEGMENTATION_CASES):
        tokens = whitespace_tokens(text)
        probe = AttentionDump(
            text=text, tokens=tokens, grid=(2, 2),
            matrix=np.zeros((len(tokens), 4), dtype=np.float32),
        )
        got = token_step_map(probe)
        if got != expected:
            problems.append(
                f"segmentation case {case}: got "
                f"{[k.value if k else None for k in got]}"
            )
    _verdict(8, "overlay argmax, aggregation oracle, token segmentation",
             problems)
