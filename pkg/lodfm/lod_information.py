# lod_information.py
# 从 SPARQL Endpoint（DBpedia）获取物品的背景知识：PO 列表、SP 列表、PageRank，
# 结果按 (模板, 物品) 缓存在磁盘上，重复运行时不再访问网络
import hashlib
import json
import logging
import math
import os
import tempfile
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime, timezone
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Tuple, TypedDict

import requests

from lodfm.errors import (
    ConfigError,
    DegenerateInputError,
    InvalidItemUriError,
    LodfmError,
    SparqlParseError,
    SparqlTransportError,
)
from lodfm.feature_structure import PO, PR, SP, ItemKnowledge

logger = logging.getLogger(__name__)

DEFAULT_ENDPOINT = "https://dbpedia.org/sparql"
ITEM_PLACEHOLDER = "<itemURI>"

DBO = "http://dbpedia.org/ontology/"
PO_EXCLUDED = frozenset({DBO + "wikiPageRedirects", DBO + "wikiPageExternalLink"})
SP_EXCLUDED = PO_EXCLUDED | {DBO + "wikiPageDisambiguates"}

# 三个查询模板保持原样，<itemURI> 通过字符串替换填入
PO_QUERY = """PREFIX dbo:<http://dbpedia.org/ontology/>
PREFIX dct:<http://purl.org/dc/terms/>

SELECT DISTINCT ?p ?o WHERE { { <itemURI> ?p ?o  .
FILTER REGEX(STR(?p), "^http://dbpedia.org/ontology") .
FILTER (STR(?p) NOT IN (dbo:wikiPageRedirects,
dbo:wikiPageExternalLink)) . FILTER ISURI(?o) }
UNION { <itemURI> ?p ?o . FILTER ( STR(?p) IN (dct:subject) ) } }
"""

SP_QUERY = """PREFIX dbo:<http://dbpedia.org/ontology/>

SELECT DISTINCT ?s ?p WHERE { ?s ?p <itemURI> .
FILTER REGEX(STR(?p), "^http://dbpedia.org/ontology") .
FILTER (STR(?p) NOT IN (dbo:wikiPageRedirects,
dbo:wikiPageExternalLink, dbo:wikiPageDisambiguates)) }
"""

PR_QUERY = """PREFIX rdf:<http://www.w3.org/1999/02/22-rdf-syntax-ns#>
PREFIX dbo:<http://dbpedia.org/ontology/>
PREFIX vrank:<http://purl.org/voc/vrank#>

SELECT ?score FROM <http://dbpedia.org>
FROM <http://people.aifb.kit.edu/ath/#DBpedia_PageRank>
WHERE { <itemURI> vrank:hasRank/vrank:rankValue ?score . }
"""


class QueryTemplate:
    """SPARQL 查询模板，template_id ∈ {PO, SP, PR}"""

    EXPECTED_PLACEHOLDERS = {PO: 2, SP: 1, PR: 1}

    def __init__(self, template_id: str, text: str):
        if template_id not in self.EXPECTED_PLACEHOLDERS:
            raise ConfigError(f"未知的查询模板: {template_id}")
        count = text.count(ITEM_PLACEHOLDER)
        if count != self.EXPECTED_PLACEHOLDERS[template_id]:
            raise ConfigError(
                f"模板 {template_id} 应包含 {self.EXPECTED_PLACEHOLDERS[template_id]} 个占位符，实际 {count} 个"
            )
        self.template_id = template_id
        self.text = text

    def render(self, item_uri: str) -> str:
        validate_item_uri(item_uri)
        return self.text.replace(ITEM_PLACEHOLDER, f"<{item_uri}>")

    def __repr__(self) -> str:
        return f"QueryTemplate({self.template_id})"


TEMPLATES: Dict[str, QueryTemplate] = {
    PO: QueryTemplate(PO, PO_QUERY),
    SP: QueryTemplate(SP, SP_QUERY),
    PR: QueryTemplate(PR, PR_QUERY),
}


def validate_item_uri(item_uri: str) -> str:
    """只接受绝对 URI，且不含空白和 <>"{}|\\^` 等字符，防止查询注入"""
    if not item_uri or not isinstance(item_uri, str):
        raise InvalidItemUriError(f"物品 URI 为空: {item_uri!r}")
    scheme, sep, rest = item_uri.partition(":")
    if not sep or not rest or not scheme or not scheme[0].isalpha():
        raise InvalidItemUriError(f"不是绝对 URI: {item_uri!r}")
    if any(ch.isspace() for ch in item_uri) or any(ch in '<>"{}|\\^`' for ch in item_uri):
        raise InvalidItemUriError(f"URI 含有非法字符: {item_uri!r}")
    return item_uri


class SparqlEndpointConfig:
    def __init__(
        self,
        endpoint: str = DEFAULT_ENDPOINT,
        timeout: float = 30.0,
        max_retries: int = 3,
        retry_backoff: float = 1.0,
        backoff_cap: float = 30.0,
        max_concurrent: int = 4,
        cache_dir: str = "cache",
    ):
        if not endpoint:
            raise ConfigError("SPARQL endpoint 不能为空")
        if timeout <= 0:
            raise ConfigError(f"timeout 必须 > 0: {timeout}")
        if max_retries < 0:
            raise ConfigError(f"max_retries 必须 >= 0: {max_retries}")
        if max_concurrent < 1:
            raise ConfigError(f"max_concurrent 必须 >= 1: {max_concurrent}")
        if retry_backoff < 0 or backoff_cap < 0:
            raise ConfigError("退避时间不能为负")
        self.endpoint = endpoint
        self.timeout = float(timeout)
        self.max_retries = int(max_retries)
        self.retry_backoff = float(retry_backoff)
        self.backoff_cap = float(backoff_cap)
        self.max_concurrent = int(max_concurrent)
        self.cache_dir = cache_dir

    def __repr__(self) -> str:
        return (
            f"SparqlEndpointConfig(endpoint={self.endpoint}, timeout={self.timeout}, "
            f"max_retries={self.max_retries}, max_concurrent={self.max_concurrent}, cache_dir={self.cache_dir})"
        )


class CacheRecord(TypedDict):
    item: str
    template: str
    bindings: List[Dict[str, str]]
    fetched_at: str


class SparqlCache:
    """每个 (模板, 物品) 一个 UTF-8 JSON 文件，文件名为 SHA-1(模板|URI)"""

    def __init__(self, cache_dir: str):
        self.cache_dir = cache_dir

    def path_for(self, template_id: str, item_uri: str) -> str:
        digest = hashlib.sha1(f"{template_id}|{item_uri}".encode("utf-8")).hexdigest()
        return os.path.join(self.cache_dir, f"{template_id}_{digest}.json")

    def get(self, template_id: str, item_uri: str) -> Optional[List[Dict[str, str]]]:
        path = self.path_for(template_id, item_uri)
        if not os.path.exists(path):
            return None
        try:
            with open(path, "r", encoding="utf-8") as f:
                record: CacheRecord = json.load(f)
            if record.get("item") != item_uri or record.get("template") != template_id:
                logger.warning(f"缓存文件内容与键不符，忽略: {path}")
                return None
            return list(record["bindings"])
        except (OSError, ValueError, KeyError, TypeError) as e:
            logger.warning(f"读取缓存失败，视为未命中: {path} - {e}")
            return None

    def put(self, template_id: str, item_uri: str, bindings: List[Dict[str, str]]) -> None:
        os.makedirs(self.cache_dir, exist_ok=True)
        record: CacheRecord = {
            "item": item_uri,
            "template": template_id,
            "bindings": bindings,
            "fetched_at": datetime.now(timezone.utc).isoformat(),
        }
        _atomic_write_json(self.path_for(template_id, item_uri), record)


def _atomic_write_json(path: str, data: object) -> None:
    # 先写临时文件再原子替换，并发写入不会产生半个文件
    fd, tmp_path = tempfile.mkstemp(dir=os.path.dirname(path) or ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            json.dump(data, f, indent=2, ensure_ascii=False, sort_keys=True)
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise


def parse_bindings(payload: object) -> List[Dict[str, str]]:
    """解析 SPARQL JSON 结果格式，返回 [{变量: 值}]，未绑定的变量不出现"""
    try:
        variables = payload["head"]["vars"]  # type: ignore[index]
        rows = payload["results"]["bindings"]  # type: ignore[index]
    except (KeyError, TypeError) as e:
        raise SparqlParseError(f"响应不是 SPARQL JSON 结果格式: 缺少 {e}") from None
    if not isinstance(variables, list) or not isinstance(rows, list):
        raise SparqlParseError("响应中的 head.vars 或 results.bindings 不是列表")

    parsed = []
    for row in rows:
        if not isinstance(row, dict):
            raise SparqlParseError(f"binding 不是对象: {row!r}")
        result = {}
        for var in variables:
            cell = row.get(var)
            if cell is None:
                continue
            if not isinstance(cell, dict) or "value" not in cell:
                raise SparqlParseError(f"变量 {var} 的绑定格式错误: {cell!r}")
            result[var] = str(cell["value"])
        parsed.append(result)
    return parsed


def _pairs(bindings: List[Dict[str, str]], first: str, second: str, excluded: Iterable[str], prop_var: str) -> List[Tuple[str, str]]:
    excluded = set(excluded)
    pairs = set()
    for binding in bindings:
        if first not in binding or second not in binding:
            logger.debug(f"跳过缺少 ?{first}/?{second} 的 binding: {binding}")
            continue
        if binding[prop_var] in excluded:
            continue
        pairs.add((binding[first], binding[second]))
    return sorted(pairs)


def _parse_score(bindings: List[Dict[str, str]]) -> Optional[float]:
    scores = [b["score"] for b in bindings if "score" in b]
    if not scores:
        return None
    try:
        score = float(scores[0])
    except ValueError:
        raise SparqlParseError(f"PageRank 分数不是数值: {scores[0]!r}") from None
    if not math.isfinite(score) or score < 0:
        raise SparqlParseError(f"PageRank 分数必须是非负有限实数: {scores[0]!r}")
    return score


class FetchFailure(TypedDict):
    item: str
    uri: str
    template: str
    error: str
    attempts: int


class FetchReport:
    def __init__(self):
        self.failures: List[FetchFailure] = []
        self.requests = 0
        self.cache_hits = 0

    @property
    def failed_items(self) -> List[str]:
        return sorted({f["item"] for f in self.failures})

    def to_dict(self) -> Dict:
        return {
            "requests": self.requests,
            "cache_hits": self.cache_hits,
            "failures": sorted(self.failures, key=lambda f: (f["item"], f["template"])),
        }

    def __repr__(self) -> str:
        return f"FetchReport(requests={self.requests}, cache_hits={self.cache_hits}, failures={len(self.failures)})"


class KnowledgeFetcher:
    """SPARQL 客户端：带重试（指数退避）与磁盘缓存"""

    def __init__(
        self,
        config: SparqlEndpointConfig,
        session: Optional[requests.Session] = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.config = config
        self.cache = SparqlCache(config.cache_dir)
        self._shared_session = session
        self._local = threading.local()
        self._sleep = sleep
        self._lock = threading.Lock()
        self.requests_made = 0
        self.cache_hits = 0

    def _session(self) -> requests.Session:
        if self._shared_session is not None:
            return self._shared_session
        # requests.Session 不保证线程安全，每个线程各自持有一个
        session = getattr(self._local, "session", None)
        if session is None:
            session = requests.Session()
            session.headers.update({"Accept": "application/sparql-results+json"})
            self._local.session = session
        return session

    def _request(self, query: str) -> object:
        attempts = 0
        last_error: Optional[Exception] = None
        while attempts <= self.config.max_retries:
            attempts += 1
            with self._lock:
                self.requests_made += 1
            try:
                response = self._session().get(
                    self.config.endpoint,
                    params={"query": query, "format": "json"},
                    timeout=self.config.timeout,
                )
                response.raise_for_status()
            except requests.RequestException as e:
                last_error = e
                logger.debug(f"SPARQL 请求失败（第 {attempts} 次）: {e}")
                if attempts <= self.config.max_retries:
                    delay = min(self.config.backoff_cap, self.config.retry_backoff * 2 ** (attempts - 1))
                    self._sleep(delay)
                continue
            try:
                return response.json()
            except ValueError as e:
                raise SparqlParseError(f"响应体不是合法 JSON: {e}") from None
        raise SparqlTransportError(f"SPARQL 请求失败: {last_error}", attempts)

    def _bindings(self, template_id: str, item_uri: str, validate: Callable[[List[Dict[str, str]]], object]) -> object:
        """命中缓存则直接返回；否则请求、解析、校验通过后才写缓存"""
        template = TEMPLATES[template_id]
        query = template.render(item_uri)
        cached = self.cache.get(template_id, item_uri)
        if cached is not None:
            with self._lock:
                self.cache_hits += 1
            return validate(cached)
        bindings = parse_bindings(self._request(query))
        result = validate(bindings)
        self.cache.put(template_id, item_uri, bindings)
        return result

    def fetch_po(self, item_uri: str) -> List[Tuple[str, str]]:
        return self._bindings(PO, item_uri, lambda b: _pairs(b, "p", "o", PO_EXCLUDED, "p"))  # type: ignore[return-value]

    def fetch_sp(self, item_uri: str) -> List[Tuple[str, str]]:
        return self._bindings(SP, item_uri, lambda b: _pairs(b, "s", "p", SP_EXCLUDED, "p"))  # type: ignore[return-value]

    def fetch_pagerank(self, item_uri: str) -> Optional[float]:
        return self._bindings(PR, item_uri, _parse_score)  # type: ignore[return-value]

    def fetch_item(self, item_id: str, item_uri: str, sets: Iterable[str], report: FetchReport) -> Optional[ItemKnowledge]:
        """单个物品的全部查询；任何一个模板失败都记入报告并返回 None"""
        po_list: List[Tuple[str, str]] = []
        sp_list: List[Tuple[str, str]] = []
        pagerank: Optional[float] = None
        ok = True
        for template_id in (PO, SP, PR):
            if template_id not in sets:
                continue
            try:
                if template_id == PO:
                    po_list = self.fetch_po(item_uri)
                elif template_id == SP:
                    sp_list = self.fetch_sp(item_uri)
                else:
                    pagerank = self.fetch_pagerank(item_uri)
            except LodfmError as e:
                ok = False
                with self._lock:
                    report.failures.append({
                        "item": item_id,
                        "uri": item_uri,
                        "template": template_id,
                        "error": str(e),
                        "attempts": getattr(e, "attempts", 0),
                    })
                logger.warning(f"[{item_id}] {template_id} 查询失败: {e}")
        if not ok:
            return None
        return ItemKnowledge(item_id=item_id, po_list=po_list, sp_list=sp_list, pagerank_raw=pagerank, item_uri=item_uri)


def fetch_po(item_uri: str, config: SparqlEndpointConfig, session: Optional[requests.Session] = None) -> List[Tuple[str, str]]:
    return KnowledgeFetcher(config, session).fetch_po(item_uri)


def fetch_sp(item_uri: str, config: SparqlEndpointConfig, session: Optional[requests.Session] = None) -> List[Tuple[str, str]]:
    return KnowledgeFetcher(config, session).fetch_sp(item_uri)


def fetch_pagerank(item_uri: str, config: SparqlEndpointConfig, session: Optional[requests.Session] = None) -> Optional[float]:
    return KnowledgeFetcher(config, session).fetch_pagerank(item_uri)


def fetch_all(
    items: List[str],
    config: SparqlEndpointConfig,
    sets: Iterable[str] = (PO, SP, PR),
    item_ids: Optional[Mapping[str, str]] = None,
    session: Optional[requests.Session] = None,
    sleep: Callable[[float], None] = time.sleep,
) -> Tuple[Dict[str, ItemKnowledge], FetchReport]:
    """
    批量获取背景知识，最多 max_concurrent 个请求同时进行。
    单个物品失败只记入报告，不会中断整批；已成功的结果逐个写入缓存，中断后重跑可续传。
    item_ids 为 URI -> 物品 id 的映射，缺省时以 URI 作为 id。
    """
    if not items:
        raise DegenerateInputError("物品 URI 列表为空")
    sets = frozenset(sets)
    item_ids = item_ids or {}
    fetcher = KnowledgeFetcher(config, session, sleep=sleep)
    report = FetchReport()
    knowledge: Dict[str, ItemKnowledge] = {}

    def task(uri: str) -> Tuple[str, Optional[ItemKnowledge]]:
        item_id = item_ids.get(uri, uri)
        try:
            validate_item_uri(uri)
        except InvalidItemUriError as e:
            with fetcher._lock:
                report.failures.append({"item": item_id, "uri": uri, "template": "-", "error": str(e), "attempts": 0})
            logger.warning(f"[{item_id}] {e}")
            return item_id, None
        return item_id, fetcher.fetch_item(item_id, uri, sets, report)

    with ThreadPoolExecutor(max_workers=config.max_concurrent) as pool:
        for done, (item_id, record) in enumerate(pool.map(task, items), start=1):
            if record is not None:
                knowledge[item_id] = record
            if done % 100 == 0:
                logger.info(f"背景知识获取进度: {done}/{len(items)}")

    report.requests = fetcher.requests_made
    report.cache_hits = fetcher.cache_hits
    logger.info(
        f"背景知识获取完成: 成功 {len(knowledge)}，失败 {len(report.failed_items)}，"
        f"网络请求 {report.requests}，缓存命中 {report.cache_hits}"
    )
    return knowledge, report


def normalize_pagerank(raw: Mapping[str, Optional[float]]) -> Dict[str, float]:
    """val(PR_i) = PageRank_i / max_j PageRank_j；缺失的分数记为 0"""
    present = [v for v in raw.values() if v is not None]
    if not present:
        raise DegenerateInputError("所有物品都缺少 PageRank 分数")
    top = max(present)
    if top <= 0:
        raise DegenerateInputError("PageRank 最大值为 0，无法归一化")
    return {item: (value / top if value is not None else 0.0) for item, value in raw.items()}


def load_item_uris(path: str) -> List[str]:
    """物品文件：每行一个 URI，忽略空行和 # 注释"""
    uris = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line and not line.startswith("#"):
                uris.append(line)
    return uris


# ---------------- 背景知识汇总文件 ----------------
KNOWLEDGE_FILE = "knowledge.json"


def save_knowledge(path: str, knowledge: Mapping[str, ItemKnowledge], sets: Iterable[str]) -> None:
    """
    把 fetch_all 的结果写入汇总文件。文件已存在时只覆盖本次获取的特征集合，
    其余集合保留原值，因此 PO、SP、PR 可以分多次获取。
    """
    sets = frozenset(sets)
    records: Dict[str, Dict] = {}
    fetched = set()
    if os.path.exists(path):
        with open(path, "r", encoding="utf-8") as f:
            existing = json.load(f)
        fetched.update(existing.get("sets", []))
        records = {r["item"]: r for r in existing.get("items", [])}
    field_of = {PO: "po", SP: "sp", PR: "pagerank"}
    for item_id, k in knowledge.items():
        record = records.setdefault(item_id, {"item": item_id, "uri": k.item_uri, "po": [], "sp": [], "pagerank": None})
        fresh = k.to_dict()
        record["uri"] = fresh["uri"]
        for name in sets:
            record[field_of[name]] = fresh[field_of[name]]
    fetched.update(sets)
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    _atomic_write_json(path, {"sets": sorted(fetched), "items": [records[i] for i in sorted(records)]})
    logger.info(f"背景知识已写入 {path}: {len(records)} 个物品，特征集合 {sorted(fetched)}")


def load_knowledge(path: str, required: Iterable[str] = ()) -> Tuple[Dict[str, ItemKnowledge], str]:
    """读取汇总文件，返回 ({物品 id: ItemKnowledge}, 文件内容的 SHA-256 指纹)；缺少所需特征集合时报错"""
    if not os.path.exists(path):
        raise ConfigError(f"背景知识文件不存在: {path}（请先运行 fetch-features）")
    with open(path, "rb") as f:
        raw = f.read()
    data = json.loads(raw.decode("utf-8"))
    missing = sorted(set(required) - set(data.get("sets", [])))
    if missing:
        raise ConfigError(f"{path} 中没有 {missing} 特征的缓存（请先运行 fetch-features --features {','.join(missing)}）")
    knowledge = {r["item"]: ItemKnowledge.from_dict(r) for r in data.get("items", [])}
    return knowledge, hashlib.sha256(raw).hexdigest()
