"""Text-generation endpoint client with retries, plus mock backends.

Wire protocol: POST {base}/v1/generate with a JSON body
{"model", "prompt", "image", "temperature", "seed"} and a JSON reply
{"text": ...}.  429 and 5xx responses are retried with exponential
backoff (Retry-After honored when present); other 4xx are fatal.

Mock endpoint URLs avoid the network entirely and are deterministic per
request (thread scheduling cannot change their output):

  mock:gt                     echo a well-formed document from the
                              prompt's Context line
  mock:echo?fail=P&garble=Q   like gt, with transient 503s (prob P per
                              attempt) and dropped point lists (prob Q)
  mock:uniform?k=N            document with N uniform random points
  mock:blend?p=P&k=N          each point is ground truth with prob P,
                              uniform otherwise

The optional Context line is one prompt line of the form
`Context: {json}` carrying reference labels, subtype, region phrase and
ground-truth points; builders that want an echo-capable backend include
it, and real endpoints may simply ignore it.
"""

from __future__ import annotations

import base64
import hashlib
import io
import json
import os
import re
import time
from dataclasses import dataclass
from typing import Callable
from urllib.parse import parse_qs, urlsplit

import numpy as np

from .cor import AffordanceSubtype, compose_document, serialize
from .errors import CorpointError

API_KEY_ENV = "CORPOINT_API_KEY"
RETRYABLE_STATUSES = frozenset({429, 500, 502, 503, 504})
_CONTEXT_RE = re.compile(r"^Context: (\{.*\})[ \t]*$", re.MULTILINE)


class EndpointError(CorpointError):
    code = "Endpoint"
    attempts = 1


class EndpointUnreachableError(EndpointError):
    """Raised after the retry budget is exhausted."""

    code = "EndpointUnreachable"


def _with_attempts(exc: EndpointError, attempts: int) -> EndpointError:
    exc.attempts = attempts
    return exc


@dataclass(frozen=True)
class GenerateResponse:
    text: str
    attempts: int


def encode_image(image) -> str:
    """Base64 PNG payload from an HxW[x3] uint8 array or raw PNG bytes."""
    if isinstance(image, (bytes, bytearray)):
        data = bytes(image)
    else:
        from PIL import Image

        arr = np.asarray(image)
        mode = "RGB" if arr.ndim == 3 else "L"
        buf = io.BytesIO()
        Image.fromarray(arr, mode=mode).save(buf, format="PNG")
        data = buf.getvalue()
    return base64.b64encode(data).decode("ascii")


def context_line(context: dict) -> str:
    return "Context: " + json.dumps(context, separators=(",", ":"))


def extract_context(prompt: str) -> dict | None:
    matches = _CONTEXT_RE.findall(prompt)
    if not matches:
        return None
    try:
        return json.loads(matches[-1])
    except json.JSONDecodeError:
        return None


# ---------------------------------------------------------------------------
# transports


class HttpTransport:
    def __init__(self, base_url: str, timeout: float, api_key: str | None):
        import threading

        self.url = base_url.rstrip("/") + "/v1/generate"
        self.timeout = timeout
        self.api_key = api_key
        self._local = threading.local()

    def _session(self):
        import requests

        if not hasattr(self._local, "session"):
            self._local.session = requests.Session()
        return self._local.session

    def send(self, body: dict) -> tuple[int, dict, dict | None]:
        import requests

        headers = {}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        try:
            resp = self._session().post(
                self.url, json=body, headers=headers, timeout=self.timeout
            )
        except requests.RequestException as exc:
            return 599, {}, {"error": str(exc)}
        try:
            payload = resp.json()
        except ValueError:
            payload = None
        return resp.status_code, dict(resp.headers), payload


def _request_rng(mock_seed: int, body: dict, *, attempt: int = 0, salt: str = "") -> np.random.Generator:
    h = hashlib.sha256()
    for part in (mock_seed, body.get("seed", 0), attempt, salt, body.get("prompt", "")):
        h.update(str(part).encode("utf-8"))
        h.update(b"\x00")
    return np.random.default_rng(int.from_bytes(h.digest()[:8], "little"))


def _document_from_context(ctx: dict | None, points) -> str:
    if ctx is None:
        ctx = {}
    labels = ctx.get("references") or ["scene"]
    subtype = AffordanceSubtype.from_text(ctx.get("subtype", "free space reference"))
    region = ctx.get("region", "requested region of the image")
    pts = [(float(x), float(y)) for x, y in points]
    if not pts:
        # no hints in the prompt; answer something valid anyway
        pts = [(0.5, 0.5)]
    doc = compose_document(
        reference_labels=labels,
        subtype=subtype,
        region_phrase=region,
        points=pts,
    )
    return serialize(doc)


class MockTransport:
    """In-process stand-in for the HTTP endpoint, keyed by mock: URLs."""

    def __init__(self, url: str):
        import threading

        parts = urlsplit(url)
        if parts.scheme != "mock":
            raise ValueError(f"not a mock url: {url!r}")
        self._lock = threading.Lock()
        self.name = parts.path
        params = {k: v[-1] for k, v in parse_qs(parts.query).items()}
        known = {
            "gt": {"seed"},
            "echo": {"seed", "fail", "garble", "rate", "retry_after"},
            "uniform": {"seed", "k"},
            "blend": {"seed", "k", "p"},
        }
        if self.name not in known:
            raise ValueError(f"unknown mock endpoint: {self.name!r}")
        unknown = sorted(set(params) - known[self.name])
        if unknown:
            raise ValueError(f"unknown mock parameters for {self.name}: {unknown}")
        self.seed = int(params.get("seed", 0))
        self.fail = float(params.get("fail", 0.0))
        self.garble = float(params.get("garble", 0.0))
        self.rate = float(params.get("rate", 0.0))
        self.retry_after = float(params.get("retry_after", 0.01))
        self.k = int(params.get("k", 10))
        self.p = float(params.get("p", 1.0))
        self.calls = 0  # total send() invocations, for tests

    def _attempt_index(self, body: dict) -> int:
        # per-request attempt counter so transient failures can clear on
        # retry without any cross-thread state
        key = (body.get("seed", 0), body.get("prompt", ""))
        with self._lock:
            counts = getattr(self, "_counts", None)
            if counts is None:
                counts = self._counts = {}
            n = counts.get(key, 0)
            counts[key] = n + 1
        return n

    def send(self, body: dict) -> tuple[int, dict, dict | None]:
        with self._lock:
            self.calls += 1
        attempt = self._attempt_index(body) if (self.fail or self.rate) else 0
        roll = _request_rng(self.seed, body, attempt=attempt, salt="status")
        if self.rate and roll.random() < self.rate:
            return 429, {"Retry-After": str(self.retry_after)}, None
        if self.fail and roll.random() < self.fail:
            return 503, {}, {"error": "transient"}
        ctx = extract_context(body.get("prompt", ""))

        if self.name in ("gt", "echo"):
            gt = (ctx or {}).get("points") or []
            text = _document_from_context(ctx, gt)
            if self.garble:
                groll = _request_rng(self.seed, body, salt="garble")
                if groll.random() < self.garble:
                    text = text[: text.rfind("\n")] + "\nNo list provided."
        elif self.name == "uniform":
            rng = _request_rng(self.seed, body, salt="points")
            pts = [(float(x), float(y)) for x, y in rng.random((self.k, 2))]
            text = _document_from_context(ctx, pts)
        elif self.name == "blend":
            rng = _request_rng(self.seed, body, salt="points")
            gt = (ctx or {}).get("points") or []
            pts = []
            for i in range(self.k):
                if gt and rng.random() < self.p:
                    x, y = gt[i % len(gt)]
                else:
                    x, y = rng.random(), rng.random()
                pts.append((float(x), float(y)))
            text = _document_from_context(ctx, pts)
        else:  # pragma: no cover - constructor rejects unknown names
            raise AssertionError(self.name)
        return 200, {}, {"text": text}


def make_transport(url: str, *, timeout: float = 30.0, api_key: str | None = None):
    if urlsplit(url).scheme == "mock":
        return MockTransport(url)
    return HttpTransport(url, timeout=timeout, api_key=api_key)


# ---------------------------------------------------------------------------
# client


class EndpointClient:
    """Synchronous generate() with bounded retries; thread-safe."""

    def __init__(
        self,
        url: str,
        model: str,
        *,
        temperature: float = 0.0,
        timeout: float = 30.0,
        max_retries: int = 3,
        backoff: float = 0.5,
        api_key: str | None = None,
        sleep: Callable[[float], None] = time.sleep,
        transport=None,
    ):
        if api_key is None:
            api_key = os.environ.get(API_KEY_ENV)
        self.url = url
        self.model = model
        self.temperature = temperature
        self.max_retries = max_retries
        self.backoff = backoff
        self.sleep = sleep
        self.transport = transport or make_transport(url, timeout=timeout, api_key=api_key)

    def generate(self, prompt: str, *, image=None, seed: int = 0) -> GenerateResponse:
        body = {
            "model": self.model,
            "prompt": prompt,
            "temperature": self.temperature,
            "seed": seed,
        }
        if image is not None:
            body["image"] = image if isinstance(image, str) else encode_image(image)
        last_status = None
        for attempt in range(1, self.max_retries + 2):
            status, headers, payload = self.transport.send(body)
            if status == 200:
                if not isinstance(payload, dict) or "text" not in payload:
                    raise _with_attempts(
                        EndpointError(f"malformed endpoint reply: {payload!r}"), attempt
                    )
                return GenerateResponse(text=str(payload["text"]), attempts=attempt)
            last_status = status
            retryable = status in RETRYABLE_STATUSES or status == 599
            if not retryable:
                detail = (payload or {}).get("error", "")
                raise _with_attempts(
                    EndpointError(f"endpoint returned {status}: {detail}"), attempt
                )
            if attempt > self.max_retries:
                break
            delay = self.backoff * (2 ** (attempt - 1))
            retry_after = headers.get("Retry-After")
            if retry_after is not None:
                try:
                    delay = float(retry_after)
                except ValueError:
                    pass
            self.sleep(delay)
        raise _with_attempts(
            EndpointUnreachableError(
                f"no reply after {self.max_retries + 1} attempts (last status {last_status})"
            ),
            self.max_retries + 1,
        )


__all__ = [
    "API_KEY_ENV", "GenerateResponse", "EndpointClient", "EndpointError",
    "EndpointUnreachableError", "HttpTransport", "MockTransport",
    "make_transport", "encode_image", "context_line", "extract_context",
]
