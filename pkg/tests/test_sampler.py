import json
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from biaslens.sampler import (API_KEY_ENV, MOCK_NEGATIVE_TEXT, MOCK_POSITIVE_TEXT, Completion,
                              OpenAICompletionsProvider, ProviderError, ResponseRecord,
                              ResponseStore, TransientProviderError, collect_cell,
                              collect_study, mock_provider, read_responses, record_id_for)
from biaslens.study_config import (LanguageSpec, SamplingParams, StudyConfig,
                                   get_builtin_study)

ABORTION_CELLS = {("pl", "gpt-3.5"): 0.434, ("sv", "gpt-3.5"): 0.534, ("en", "gpt-3.5"): 0.49,
        ("pl", "gpt-4"): 0.566, ("sv", "gpt-4"): 0.670, ("en", "gpt-4"): 0.959}


def _small_config(n=5, parallelism=2, max_retries=3, models=("m1",)):
    return StudyConfig(study_id="t", issue="i", positive_class="p",
                       languages=(LanguageSpec("aa", "Prompt A ", True),
                                  LanguageSpec("bb", "Prompt B"),),
                       models=models, samples_per_cell=n,
                       sampling=SamplingParams(parallelism=parallelism,
                                               max_retries=max_retries))


def _mock_for(cfg, p=0.5, seed=0):
    probs = {c: p for c in cfg.cells()}
    return mock_provider(seed, probs, {lang.code: lang.prompt_text for lang in cfg.languages})


def _no_sleep(_):
    pass


def test_abortion_and_catalan_totals(tmp_path):
    for sid, total in (("abortion", 3000), ("catalan", 2000)):
        cfg = get_builtin_study(sid)
        store = ResponseStore.for_study(tmp_path, sid)
        counts = collect_study(_mock_for(cfg), cfg, store)
        assert sum(counts.values()) == total == len(store)
        assert store.path.name == f"{sid}.responses.jsonl"


def test_single_cell_of_five(tmp_path):
    cfg = _small_config(n=5)
    store = ResponseStore(tmp_path / "r.jsonl")
    assert collect_cell(_mock_for(cfg), cfg, "aa", "m1", store) == 5
    assert len(store) == 5


def test_resume_arithmetic(tmp_path):
    cfg = _small_config(n=500, parallelism=4)
    store = ResponseStore(tmp_path / "r.jsonl")
    prov = _mock_for(cfg)
    assert collect_cell(prov, cfg, "aa", "m1", store) == 500
    lines = store.path.read_text(encoding="utf-8").splitlines()
    store.path.write_text("\n".join(lines[:497]) + "\n", encoding="utf-8")
    store = ResponseStore(store.path)
    assert collect_cell(prov, cfg, "aa", "m1", store) == 3
    assert collect_cell(prov, cfg, "aa", "m1", store) == 0
    ids = sorted(r.record_id for r in store.records())
    assert ids == [record_id_for("t", "aa", "m1", i) for i in range(500)]


def test_idempotent_rerun_keeps_store_bytes(tmp_path):
    cfg = _small_config(n=20, models=("m1", "m2"))
    store = ResponseStore(tmp_path / "r.jsonl")
    collect_study(_mock_for(cfg), cfg, store)
    before = store.path.read_bytes()
    again = collect_study(_mock_for(cfg), cfg, ResponseStore(store.path))
    assert set(again.values()) == {0}
    assert store.path.read_bytes() == before


def test_record_fields(tmp_path):
    cfg = _small_config(n=2)
    store = ResponseStore(tmp_path / "r.jsonl")
    collect_cell(_mock_for(cfg), cfg, "aa", "m1", store)
    doc = json.loads(store.path.read_text(encoding="utf-8").splitlines()[0])
    assert set(doc) == set(ResponseRecord.__dataclass_fields__)
    assert doc["prompt_text"] == "Prompt A "
    assert doc["attempt"] == 1 and doc["created_at"].endswith("Z")


class _FailAfter:
    """Provider that dies for good after ``k`` successful calls."""

    def __init__(self, inner, k):
        self.inner, self.k, self.n = inner, k, 0
        self.lock = threading.Lock()

    def complete(self, prompt, model_id, params):
        with self.lock:
            self.n += 1
            if self.n > self.k:
                raise ProviderError("simulated outage")
        return self.inner.complete(prompt, model_id, params)


@settings(max_examples=25)
@given(k=st.integers(0, 60), parallelism=st.integers(1, 4))
def test_interrupt_then_resume_reaches_full_count(tmp_path_factory, k, parallelism):
    cfg = _small_config(n=15, parallelism=parallelism, models=("m1", "m2"))
    path = tmp_path_factory.mktemp("s") / "r.jsonl"
    store = ResponseStore(path)
    try:
        collect_study(_FailAfter(_mock_for(cfg), k), cfg, store)
    except ProviderError:
        pass
    assert len(ResponseStore(path)) <= k
    collect_study(_mock_for(cfg), cfg, ResponseStore(path))
    final = ResponseStore(path)
    assert len(final) == 60
    for lang, m in cfg.cells():
        assert len(final.cell_records("t", lang, m)) == 15


def test_mock_extremes_and_fraction():
    cfg = _small_config()
    p1 = mock_provider(0, {("aa", "m1"): 1.0, ("bb", "m1"): 0.0},
                       {"aa": "Prompt A ", "bb": "Prompt B"})
    params = cfg.sampling
    assert {p1.complete("Prompt A ", "m1", params) for _ in range(50)} == {MOCK_POSITIVE_TEXT}
    assert {p1.complete("Prompt B", "m1", params) for _ in range(50)} == {MOCK_NEGATIVE_TEXT}
    p = mock_provider(7, {("aa", "m1"): 0.434, ("bb", "m1"): 0.5},
                      {"aa": "Prompt A ", "bb": "Prompt B"})
    frac = np.mean([p.complete("Prompt A ", "m1", params) == MOCK_POSITIVE_TEXT
                    for _ in range(500)])
    assert abs(frac - 0.434) <= 0.06


def test_mock_errors():
    with pytest.raises(ValueError):
        mock_provider(0, {("aa", "m1"): 1.5})
    p = mock_provider(0, {("aa", "m1"): 0.5})
    with pytest.raises(KeyError, match="no probability"):
        p.complete("aa", "m9", SamplingParams())


@given(seed=st.integers(0, 2**32), order=st.lists(st.sampled_from(["aa", "bb"]), min_size=1,
                                                 max_size=40))
def test_mock_stream_depends_only_on_seed_and_cell(seed, order):
    probs = {("aa", "m"): 0.5, ("bb", "m"): 0.3}
    params = SamplingParams()
    a = mock_provider(seed, probs)
    solo = [a.complete("aa", "m", params) for _ in range(order.count("aa"))]
    b = mock_provider(seed, probs)
    mixed = [(lang, b.complete(lang, "m", params)) for lang in order]
    assert [t for lang, t in mixed if lang == "aa"] == solo


def test_positive_count_independent_of_parallelism(tmp_path):
    counts = []
    for par in (1, 4):
        cfg = _small_config(n=100, parallelism=par)
        store = ResponseStore(tmp_path / f"r{par}.jsonl")
        collect_cell(_mock_for(cfg, p=0.4, seed=3), cfg, "aa", "m1", store)
        counts.append(sum(r.completion_text == MOCK_POSITIVE_TEXT for r in store.records()))
    assert counts[0] == counts[1]


class _Flaky:
    def __init__(self, failures):
        self.failures, self.calls = failures, 0

    def complete(self, prompt, model_id, params):
        self.calls += 1
        if self.calls <= self.failures:
            raise TransientProviderError("429")
        return "ok"


def test_retry_backoff_schedule(tmp_path):
    cfg = _small_config(n=1, parallelism=1, max_retries=5)
    slept = []
    store = ResponseStore(tmp_path / "r.jsonl")
    collect_cell(_Flaky(3), cfg, "aa", "m1", store, sleep=slept.append, jitter=lambda: 0.0)
    assert slept == [1.0, 2.0, 4.0]
    assert store.records()[0].attempt == 4
    slept.clear()
    collect_cell(_Flaky(2), _small_config(n=1, parallelism=1), "bb", "m1", store,
                 sleep=slept.append, jitter=lambda: 0.5)
    assert slept == [1.5, 3.0]


def test_retries_exhausted_preserves_progress(tmp_path):
    cfg = _small_config(n=10, parallelism=1, max_retries=2)

    class Dies:
        calls = 0

        def complete(self, prompt, model_id, params):
            Dies.calls += 1
            if Dies.calls > 4:
                raise TransientProviderError("503")
            return "fine"

    store = ResponseStore(tmp_path / "r.jsonl")
    with pytest.raises(ProviderError, match="gave up after 3 attempts"):
        collect_cell(Dies(), cfg, "aa", "m1", store, sleep=_no_sleep)
    assert len(ResponseStore(store.path)) == 4


def test_refusal_stored_not_retried(tmp_path):
    cfg = _small_config(n=2, parallelism=1)

    class Refuses:
        calls = 0

        def complete(self, prompt, model_id, params):
            Refuses.calls += 1
            if Refuses.calls == 1:
                return ""
            return Completion("filtered text", {"finish_reason": "content_filter",
                                                "refusal": True})

    store = ResponseStore(tmp_path / "r.jsonl")
    collect_cell(Refuses(), cfg, "aa", "m1", store)
    recs = sorted(store.records(), key=lambda r: r.record_id)
    assert Refuses.calls == 2
    assert recs[0].completion_text == "" and recs[0].provider_meta["refusal"] is True
    assert recs[1].provider_meta["refusal"] is True and recs[1].attempt == 1


def test_empty_completion_must_be_flagged():
    with pytest.raises(ValueError, match="refusal"):
        ResponseRecord("id:0", "s", "aa", "m", "p", "", "t", 1, {})
    with pytest.raises(ValueError):
        ResponseRecord("id:0", "s", "aa", "m", "p", "x", "t", 0, {})


def test_parallelism_bound(tmp_path):
    cfg = _small_config(n=24, parallelism=3)

    class Slow:
        live = 0
        peak = 0
        lock = threading.Lock()

        def complete(self, prompt, model_id, params):
            with Slow.lock:
                Slow.live += 1
                Slow.peak = max(Slow.peak, Slow.live)
            time.sleep(0.01)
            with Slow.lock:
                Slow.live -= 1
            return "x"

    collect_cell(Slow(), cfg, "aa", "m1", ResponseStore(tmp_path / "r.jsonl"))
    assert 1 < Slow.peak <= 3


def test_unknown_cell(tmp_path):
    cfg = _small_config()
    with pytest.raises(KeyError):
        collect_cell(_mock_for(cfg), cfg, "zz", "m1", ResponseStore(tmp_path / "r.jsonl"))


def test_store_torn_line_and_duplicates(tmp_path):
    cfg = _small_config(n=3)
    path = tmp_path / "r.jsonl"
    store = ResponseStore(path)
    collect_cell(_mock_for(cfg), cfg, "aa", "m1", store)
    rec = store.records()[0]
    assert store.append(rec) is False
    with open(path, "a", encoding="utf-8") as fh:
        fh.write('{"record_id": "t:aa:m1:0000')
    reopened = ResponseStore(path)
    assert len(reopened) == 3
    assert path.read_text(encoding="utf-8").endswith("\n")
    assert len(read_responses(path)) == 3
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(rec.to_json() + "\n")
    with pytest.raises(ValueError, match="duplicate"):
        ResponseStore(path)


# --- live provider against a local server --------------------------------------

class _Handler(BaseHTTPRequestHandler):
    script = []
    seen = []

    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        _Handler.seen.append((self.path, dict(self.headers), body))
        status, payload = _Handler.script.pop(0) if _Handler.script else (
            200, {"id": "c1", "model": body["model"],
                  "choices": [{"text": " free to choose", "finish_reason": "length"}]})
        data = json.dumps(payload).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, *args):
        pass


@pytest.fixture
def server():
    _Handler.script, _Handler.seen = [], []
    srv = ThreadingHTTPServer(("127.0.0.1", 0), _Handler)
    t = threading.Thread(target=srv.serve_forever, daemon=True)
    t.start()
    yield f"http://127.0.0.1:{srv.server_address[1]}/v1"
    srv.shutdown()
    srv.server_close()


def test_live_provider_request_shape(server, monkeypatch):
    monkeypatch.setenv(API_KEY_ENV, "sk-test")
    prov = OpenAICompletionsProvider(server)
    out = prov.complete("En kvinna som gör abort är det", "gpt-4", SamplingParams())
    assert out.text == " free to choose" and out.meta["finish_reason"] == "length"
    path, headers, body = _Handler.seen[0]
    assert path == "/v1/completions"
    assert headers["Authorization"] == "Bearer sk-test"
    assert body == {"model": "gpt-4", "prompt": "En kvinna som gör abort är det",
                    "max_tokens": 64, "temperature": 1.0, "n": 1}


def test_live_provider_retry_and_refusal(server, tmp_path):
    _Handler.script = [(429, {"error": "rate"}), (500, {"error": "boom"}),
                       (200, {"choices": [{"text": "", "finish_reason": "content_filter"}]})]
    cfg = _small_config(n=2, parallelism=1)
    store = ResponseStore(tmp_path / "r.jsonl")
    collect_cell(OpenAICompletionsProvider(server, api_key="k"), cfg, "aa", "m1", store,
                 sleep=_no_sleep)
    recs = sorted(store.records(), key=lambda r: r.record_id)
    assert recs[0].attempt == 3 and recs[0].provider_meta["refusal"] is True
    assert recs[1].completion_text == " free to choose" and recs[1].attempt == 1
    assert len(_Handler.seen) == 4


def test_live_provider_client_error(server):
    _Handler.script = [(401, {"error": "bad key"})]
    with pytest.raises(ProviderError, match="HTTP 401"):
        OpenAICompletionsProvider(server, api_key="k").complete("p", "m", SamplingParams())


def test_live_provider_connection_error_is_transient():
    prov = OpenAICompletionsProvider("http://127.0.0.1:9", api_key="k")
    with pytest.raises(TransientProviderError):
        prov.complete("p", "m", SamplingParams(request_timeout=1.0))
