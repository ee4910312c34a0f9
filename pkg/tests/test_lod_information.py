import json
import os

import pytest
import requests

from lodfm.errors import ConfigError, DegenerateInputError, InvalidItemUriError, SparqlParseError, SparqlTransportError
from lodfm.feature_structure import PO, PR, SP, ItemKnowledge
from lodfm.lod_information import (
    TEMPLATES,
    KnowledgeFetcher,
    SparqlCache,
    SparqlEndpointConfig,
    fetch_all,
    fetch_pagerank,
    fetch_po,
    fetch_sp,
    load_item_uris,
    load_knowledge,
    normalize_pagerank,
    parse_bindings,
    save_knowledge,
    validate_item_uri,
)

DBO = "http://dbpedia.org/ontology/"
DBR = "http://dbpedia.org/resource/"
MATRIX = DBR + "The_Matrix"
HEAT = DBR + "Heat_(1995_film)"


def _result(variables, rows):
    return {
        "head": {"vars": variables},
        "results": {"bindings": [{k: {"type": "uri", "value": v} for k, v in row.items()} for row in rows]},
    }


class FakeResponse:
    def __init__(self, payload=None, status=200, body_error=False):
        self.payload = payload
        self.status_code = status
        self.body_error = body_error

    def raise_for_status(self):
        if self.status_code >= 400:
            raise requests.HTTPError(f"{self.status_code} error")

    def json(self):
        if self.body_error:
            raise ValueError("Expecting value")
        return self.payload


class FakeSession:
    """按 (模板, URI) 返回预置结果；failures 中的键先失败若干次"""

    def __init__(self, answers, failures=None):
        self.answers = answers
        self.failures = dict(failures or {})
        self.calls = []

    def get(self, url, params=None, timeout=None):
        query = params["query"]
        if "vrank" in query:
            template = PR
        elif "?s ?p" in query:
            template = SP
        else:
            template = PO
        uri = next(u for u in self.answers_uris() if f"<{u}>" in query)
        self.calls.append((template, uri))
        key = (template, uri)
        if self.failures.get(key):
            self.failures[key] -= 1
            raise requests.ConnectionError("connection reset")
        answer = self.answers.get(key)
        if isinstance(answer, FakeResponse):
            return answer
        return FakeResponse(answer)

    def answers_uris(self):
        return sorted({uri for _, uri in self.answers} | {uri for _, uri in self.failures}, key=len, reverse=True)


def _answers():
    return {
        (PO, MATRIX): _result(["p", "o"], [
            {"p": DBO + "director", "o": DBR + "The_Wachowskis"},
            {"p": DBO + "wikiPageRedirects", "o": DBR + "Matrix"},
            {"p": "http://purl.org/dc/terms/subject", "o": DBR + "Category:Cyberpunk_films"},
        ]),
        (SP, MATRIX): _result(["s", "p"], [
            {"s": DBR + "The_Matrix_Reloaded", "p": DBO + "previousWork"},
            {"s": DBR + "Matrix_(disambiguation)", "p": DBO + "wikiPageDisambiguates"},
        ]),
        (PR, MATRIX): {"head": {"vars": ["score"]}, "results": {"bindings": [{"score": {"type": "literal", "value": "48.25"}}]}},
        (PO, HEAT): _result(["p", "o"], [{"p": DBO + "director", "o": DBR + "Michael_Mann"}]),
        (SP, HEAT): _result(["s", "p"], []),
        (PR, HEAT): {"head": {"vars": ["score"]}, "results": {"bindings": []}},
    }


def _config(tmp_path, **kwargs):
    values = {"cache_dir": str(tmp_path / "sparql"), "max_concurrent": 1, "retry_backoff": 1.0}
    values.update(kwargs)
    return SparqlEndpointConfig(**values)


def test_templates_keep_placeholders():
    assert TEMPLATES[PO].render(MATRIX).count(f"<{MATRIX}>") == 2
    assert TEMPLATES[SP].render(MATRIX).count(f"<{MATRIX}>") == 1
    assert "<itemURI>" not in TEMPLATES[PR].render(MATRIX)


def test_validate_item_uri_guards_injection():
    assert validate_item_uri(MATRIX) == MATRIX
    for bad in ["", "The_Matrix", "http://x> ?p ?o . <http://y", "http://a b", 'http://a"b']:
        with pytest.raises(InvalidItemUriError):
            validate_item_uri(bad)


def test_parse_bindings():
    payload = {
        "head": {"vars": ["s", "p"]},
        "results": {"bindings": [{"s": {"type": "uri", "value": "x"}}, {"s": {"value": "y"}, "p": {"value": "z"}}]},
    }
    assert parse_bindings(payload) == [{"s": "x"}, {"s": "y", "p": "z"}]
    with pytest.raises(SparqlParseError):
        parse_bindings({"results": {}})
    with pytest.raises(SparqlParseError):
        parse_bindings({"head": {"vars": ["s"]}, "results": {"bindings": [{"s": "x"}]}})


def test_fetch_po_applies_exclusions(tmp_path):
    session = FakeSession(_answers())
    pairs = fetch_po(MATRIX, _config(tmp_path), session)
    assert pairs == [
        (DBO + "director", DBR + "The_Wachowskis"),
        ("http://purl.org/dc/terms/subject", DBR + "Category:Cyberpunk_films"),
    ]


def test_fetch_sp_applies_exclusions(tmp_path):
    pairs = fetch_sp(MATRIX, _config(tmp_path), FakeSession(_answers()))
    assert pairs == [(DBR + "The_Matrix_Reloaded", DBO + "previousWork")]


def test_fetch_pagerank(tmp_path):
    session = FakeSession(_answers())
    assert fetch_pagerank(MATRIX, _config(tmp_path), session) == 48.25
    assert fetch_pagerank(HEAT, _config(tmp_path), session) is None


def test_fetch_pagerank_rejects_bad_literals(tmp_path):
    for literal in ["abc", "-1.5", "inf"]:
        answers = {(PR, MATRIX): {"head": {"vars": ["score"]}, "results": {"bindings": [{"score": {"value": literal}}]}}}
        with pytest.raises(SparqlParseError):
            fetch_pagerank(MATRIX, _config(tmp_path / literal), FakeSession(answers))


def test_cache_prevents_second_request(tmp_path):
    config = _config(tmp_path)
    session = FakeSession(_answers())
    fetcher = KnowledgeFetcher(config, session)
    first = fetcher.fetch_po(MATRIX)
    second = fetcher.fetch_po(MATRIX)
    assert first == second
    assert len(session.calls) == 1
    assert fetcher.cache_hits == 1
    cached = SparqlCache(config.cache_dir).path_for(PO, MATRIX)
    with open(cached, encoding="utf-8") as f:
        record = json.load(f)
    assert record["item"] == MATRIX
    assert record["template"] == PO


def test_invalid_response_is_not_cached(tmp_path):
    config = _config(tmp_path)
    answers = {(PO, MATRIX): FakeResponse(body_error=True)}
    with pytest.raises(SparqlParseError):
        fetch_po(MATRIX, config, FakeSession(answers))
    assert not os.path.exists(SparqlCache(config.cache_dir).path_for(PO, MATRIX))


def test_retry_with_exponential_backoff(tmp_path):
    delays = []
    session = FakeSession(_answers(), failures={(PO, MATRIX): 2})
    fetcher = KnowledgeFetcher(_config(tmp_path, max_retries=3), session, sleep=delays.append)
    assert fetcher.fetch_po(MATRIX)
    assert delays == [1.0, 2.0]
    assert fetcher.requests_made == 3


def test_transport_error_after_retries(tmp_path):
    delays = []
    session = FakeSession(_answers(), failures={(PO, MATRIX): 10})
    fetcher = KnowledgeFetcher(_config(tmp_path, max_retries=2), session, sleep=delays.append)
    with pytest.raises(SparqlTransportError) as e:
        fetcher.fetch_po(MATRIX)
    assert e.value.attempts == 3
    assert delays == [1.0, 2.0]


def test_http_error_status_is_retried(tmp_path):
    answers = _answers()
    answers[(PO, MATRIX)] = FakeResponse(status=503)
    fetcher = KnowledgeFetcher(_config(tmp_path, max_retries=1), FakeSession(answers), sleep=lambda s: None)
    with pytest.raises(SparqlTransportError):
        fetcher.fetch_po(MATRIX)
    assert fetcher.requests_made == 2


def test_fetch_all_records_failures_and_continues(tmp_path):
    session = FakeSession(_answers(), failures={(PO, HEAT): 10})
    config = _config(tmp_path, max_retries=1)
    knowledge, report = fetch_all(
        [MATRIX, HEAT, "not a uri"],
        config,
        {PO, SP, PR},
        item_ids={MATRIX: "2571", HEAT: "6"},
        session=session,
        sleep=lambda s: None,
    )
    assert list(knowledge) == ["2571"]
    assert knowledge["2571"].pagerank_raw == 48.25
    assert knowledge["2571"].item_uri == MATRIX
    assert report.failed_items == ["6", "not a uri"]
    heat_failure = next(f for f in report.failures if f["item"] == "6")
    assert heat_failure["template"] == PO
    assert heat_failure["attempts"] == 2


def test_fetch_all_resumes_from_cache(tmp_path):
    config = _config(tmp_path)
    fetch_all([MATRIX, HEAT], config, {PO, SP, PR}, session=FakeSession(_answers()))
    session = FakeSession(_answers())
    knowledge, report = fetch_all([MATRIX, HEAT], config, {PO, SP, PR}, session=session)
    assert session.calls == []
    assert report.requests == 0
    assert report.cache_hits == 6
    assert sorted(knowledge) == [HEAT, MATRIX]


def test_fetch_all_only_requested_sets(tmp_path):
    session = FakeSession(_answers())
    knowledge, _ = fetch_all([MATRIX], _config(tmp_path), {PR}, session=session)
    assert [template for template, _ in session.calls] == [PR]
    assert knowledge[MATRIX].po_list == ()


def test_fetch_all_empty_input(tmp_path):
    with pytest.raises(DegenerateInputError):
        fetch_all([], _config(tmp_path), {PO})


def test_normalize_pagerank():
    assert normalize_pagerank({"a": 2.0, "b": 8.0, "c": None}) == {"a": 0.25, "b": 1.0, "c": 0.0}
    assert normalize_pagerank({"a": 3.0}) == {"a": 1.0}
    with pytest.raises(DegenerateInputError):
        normalize_pagerank({"a": None, "b": None})
    with pytest.raises(DegenerateInputError):
        normalize_pagerank({"a": 0.0})


def test_load_item_uris(tmp_path):
    path = tmp_path / "items.txt"
    path.write_text(f"# movies\n{MATRIX}\n\n  {HEAT}  \n", encoding="utf-8")
    assert load_item_uris(str(path)) == [MATRIX, HEAT]


def test_knowledge_file_merges_sets(tmp_path):
    path = str(tmp_path / "cache" / "knowledge.json")
    save_knowledge(path, {"1": ItemKnowledge("1", po_list=[("p", "o")], item_uri=MATRIX)}, {PO})
    save_knowledge(path, {"1": ItemKnowledge("1", pagerank_raw=2.0, item_uri=MATRIX)}, {PR})
    knowledge, fingerprint = load_knowledge(path, {PO, PR})
    assert knowledge["1"].po_list == (("p", "o"),)
    assert knowledge["1"].pagerank_raw == 2.0
    assert len(fingerprint) == 64
    with pytest.raises(ConfigError):
        load_knowledge(path, {SP})
    with pytest.raises(ConfigError):
        load_knowledge(str(tmp_path / "missing.json"), {PO})


def test_endpoint_config_validation():
    with pytest.raises(ConfigError):
        SparqlEndpointConfig(endpoint="")
    with pytest.raises(ConfigError):
        SparqlEndpointConfig(max_concurrent=0)
    with pytest.raises(ConfigError):
        SparqlEndpointConfig(timeout=0)
