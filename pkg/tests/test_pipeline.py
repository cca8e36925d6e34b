"""Dataset builder: prompts, validation, ratios, retries, determinism."""

import json
import threading

import numpy as np
import pytest

from corpoint.cor import AffordanceSubtype, compose_document, parse_document, serialize
from corpoint.endpoint import EndpointClient, MockTransport
from corpoint.masks import MaskImage
from corpoint.pipeline import (
    PROMPT_HEADER,
    build_dataset,
    build_prompt,
    scene_context,
    validate_response,
)
from corpoint.preprocess import RecordKind
from corpoint.scenes import Relation, SceneConfig, generate_scene, write_manifest

CFG = SceneConfig(width=64, height=48, min_objects=3, max_objects=4, points_per_scene=4)


def make_scenes(n, offset=0):
    return [
        generate_scene(1000 + offset + i, CFG, scene_id=f"s{i:04d}")
        for i in range(n)
    ]


def mock_client(url, **kw):
    kw.setdefault("sleep", lambda _: None)
    return EndpointClient(url, "mock-model", **kw)


def full_mask(w=8, h=8):
    return MaskImage(width=w, height=h, inside=np.ones((h, w), dtype=bool))


def valid_text(points=((0.25, 0.25),)):
    doc = compose_document(
        reference_labels=["mug"],
        subtype=AffordanceSubtype(AffordanceSubtype.FREE_SPACE_REFERENCE),
        region_phrase="left of the mug",
        points=list(points),
    )
    return serialize(doc)


def test_build_prompt_structure():
    scene = make_scenes(1)[0]
    prompt = build_prompt(scene)
    assert prompt.startswith(PROMPT_HEADER)
    for name in ("Identify Reference Object", "Determine Goal's Subtype",
                 "Define Search Space", "Generate Output"):
        assert name in prompt
    assert f"Instruction: {scene.instruction}" in prompt
    ctx_line = [l for l in prompt.splitlines() if l.startswith("Context: ")]
    assert len(ctx_line) == 1
    ctx = json.loads(ctx_line[0][len("Context: "):])
    assert ctx == json.loads(json.dumps(scene_context(scene)))
    assert ctx["points"] == [[x, y] for x, y in scene.gt_points.points]
    # the header must not read as step lines itself
    assert parse_document(prompt).steps == ()


def test_build_prompt_without_context():
    scene = make_scenes(1)[0]
    assert "Context:" not in build_prompt(scene, include_context=False)


def test_validate_response_accepts_good_reply():
    doc, reason = validate_response(valid_text(), full_mask())
    assert reason is None and doc is not None and doc.complete


def test_validate_response_schema_reject():
    text = valid_text()
    text = text[: text.rfind("\n")] + "\nNo list provided."
    doc, reason = validate_response(text, full_mask())
    assert doc is None and reason.startswith("schema:")
    assert "no_point_list" in reason


def test_validate_response_points_reject():
    mask = MaskImage(width=8, height=8, inside=np.zeros((8, 8), dtype=bool))
    doc, reason = validate_response(valid_text(), mask)
    assert doc is None and reason.startswith("points:")
    assert "0/1 inside" in reason


def test_validate_response_min_inside_threshold():
    inside = np.zeros((8, 8), dtype=bool)
    inside[:, :4] = True  # left half only
    mask = MaskImage(width=8, height=8, inside=inside)
    text = valid_text(points=((0.25, 0.5), (0.75, 0.5)))
    doc, reason = validate_response(text, mask)
    assert doc is None
    doc, reason = validate_response(text, mask, min_inside=0.5)
    assert reason is None and doc is not None


def test_validate_response_out_of_range():
    text = valid_text().replace("0.250, 0.250", "1.250, 0.250")
    doc, reason = validate_response(text, full_mask())
    assert doc is None and reason.startswith("points: out of range")


def test_exact_ratio_split_and_no_loss():
    scenes = make_scenes(20)
    result = build_dataset(scenes, mock_client("mock:gt"), ratio=0.5, seed=7)
    kinds = [r.kind for r in result.records]
    assert kinds.count(RecordKind.REASONING) == 10
    assert kinds.count(RecordKind.STANDARD) == 10
    assert result.stats.requested == 10
    assert result.stats.succeeded == 10
    assert result.stats.standard_records == 10
    assert result.stats.standard_records + result.stats.requested == 20
    assert result.stats.rejected_schema == result.stats.rejected_points == 0
    result.stats.check()
    # ids keep manifest order and mark their kind
    assert [r.id for r in result.records] == [
        s.id + ("-cor" if k is RecordKind.REASONING else "-std")
        for s, k in zip(scenes, kinds)
    ]


def test_reasoning_records_revalidate():
    scenes = make_scenes(12)
    result = build_dataset(scenes, mock_client("mock:gt"), ratio=1.0, seed=3)
    assert len(result.records) == 12
    by_id = {s.id: s for s in scenes}
    for rec in result.records:
        scene = by_id[rec.id.removesuffix("-cor")]
        doc, reason = validate_response(rec.conversation[1]["value"], scene.mask)
        assert reason is None and len(doc.steps) == 4


def test_same_seed_runs_are_byte_identical(tmp_path):
    scenes = make_scenes(16)
    manifest = tmp_path / "scenes.jsonl"
    write_manifest(scenes, manifest)
    outputs = []
    for run in ("a", "b"):
        out = tmp_path / run / "train.jsonl"
        rej = tmp_path / run / "rejects.jsonl"
        result = build_dataset(
            str(manifest), mock_client("mock:echo?garble=0.3"),
            ratio=0.75, seed=21, validation_retries=1,
            out_path=out, rejects_path=rej,
        )
        outputs.append((out.read_bytes(), rej.read_bytes(), result.stats.to_dict()))
    assert outputs[0] == outputs[1]


def test_garble_reject_rate_without_retries():
    scenes = make_scenes(200)
    result = build_dataset(
        scenes, mock_client("mock:echo?garble=0.2"),
        ratio=1.0, seed=5, validation_retries=0,
    )
    assert result.stats.requested == 200
    # ~20% of replies lose their point list; generous banding
    assert 20 <= result.stats.rejected_schema <= 60
    assert result.stats.retried == 0
    assert len(result.records) == result.stats.succeeded


def test_retries_recover_rejected_replies():
    scenes = make_scenes(200)
    result = build_dataset(
        scenes, mock_client("mock:echo?garble=0.2"),
        ratio=1.0, seed=5, validation_retries=3,
    )
    assert result.stats.rejected_schema <= 3
    assert result.stats.retried > 0
    assert result.stats.succeeded >= 197


def test_reject_entry_attempts_counts_generations():
    scenes = make_scenes(6)
    result = build_dataset(
        scenes, mock_client("mock:echo?garble=1.0"),
        ratio=1.0, seed=2, validation_retries=2,
    )
    assert result.stats.rejected_schema == 6
    assert result.records == []
    for entry in result.rejects:
        assert entry.attempts == 3
        assert entry.reason.startswith("schema:")
    assert result.stats.retried == 6 * 2


def test_rejects_file_contents(tmp_path):
    scenes = make_scenes(5)
    rej = tmp_path / "rejects.jsonl"
    result = build_dataset(
        scenes, mock_client("mock:echo?garble=1.0"),
        ratio=1.0, seed=2, validation_retries=0, rejects_path=rej,
    )
    rows = [json.loads(l) for l in rej.read_text().splitlines()]
    assert len(rows) == 5 == len(result.rejects)
    for row in rows:
        assert set(row) == {"record_id", "reason", "attempts"}
        assert row["attempts"] == 1


class BlockingTransport:
    """Stalls the first `parties` sends until they are all in flight."""

    def __init__(self, inner, parties):
        self.inner = inner
        self.barrier = threading.Barrier(parties, timeout=10)
        self.lock = threading.Lock()
        self.seen = 0

    def send(self, body):
        with self.lock:
            self.seen += 1
            wave_one = self.seen <= self.barrier.parties
        if wave_one:
            self.barrier.wait()
        return self.inner.send(body)


def test_in_flight_never_exceeds_concurrency():
    cap = 4
    scenes = make_scenes(12)
    client = mock_client("mock:gt")
    client.transport = BlockingTransport(client.transport, cap)
    result = build_dataset(scenes, client, ratio=1.0, seed=1, concurrency=cap)
    assert result.stats.max_in_flight == cap
    assert result.stats.succeeded == 12


def test_out_path_streaming_skips_in_memory_records(tmp_path):
    scenes = make_scenes(6)
    out = tmp_path / "train.jsonl"
    result = build_dataset(
        scenes, mock_client("mock:gt"), ratio=0.5, seed=9, out_path=out
    )
    assert result.records is None
    rows = [json.loads(l) for l in out.read_text().splitlines()]
    assert len(rows) == 6
    both = build_dataset(
        scenes, mock_client("mock:gt"), ratio=0.5, seed=9,
        out_path=tmp_path / "again.jsonl", keep_records=True,
    )
    assert [r.to_dict() for r in both.records] == rows


def test_parameter_validation():
    scenes = make_scenes(2)
    client = mock_client("mock:gt")
    with pytest.raises(ValueError):
        build_dataset(scenes, client, ratio=1.5, seed=0)
    with pytest.raises(ValueError):
        build_dataset(scenes, client, ratio=0.5, seed=0, validation_retries=-1)


def test_elapsed_stays_out_of_stats_dict():
    scenes = make_scenes(3)
    result = build_dataset(scenes, mock_client("mock:gt"), ratio=0.0, seed=0)
    assert result.stats.elapsed > 0.0
    assert "elapsed" not in result.stats.to_dict()
