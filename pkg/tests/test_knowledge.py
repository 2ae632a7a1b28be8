import json

import httpx
import numpy as np
import pytest

from confloop.knowledge import (
    DocumentChunk,
    GatherConfig,
    HashedTokenEmbedding,
    HttpToolSource,
    JaccardReranker,
    KnowledgeItem,
    LocalDirectoryTool,
    RemoteEmbeddingBackend,
    chunk_text,
    gather,
    ingest,
    load_index,
    rerank,
    retrieve,
    save_index,
    top_k,
)


@pytest.fixture
def backend():
    return HashedTokenEmbedding(64)


@pytest.fixture
def corpus(tmp_path):
    docs = {
        "htn.txt": "hypertension raises stroke risk and interacts with anticoagulant therapy",
        "dm.txt": "diabetes mellitus alters cardiovascular outcomes under statin treatment",
        "af.txt": "atrial fibrillation increases embolism risk; anticoagulation modifies outcomes",
        "misc.txt": "completely unrelated gardening advice about tomato cultivation",
    }
    d = tmp_path / "corpus"
    d.mkdir()
    for name, text in docs.items():
        (d / name).write_text(text, encoding="utf-8")
    return d


class TestChunking:
    def test_documented_offsets(self):
        text = "x" * 1000
        chunks = chunk_text(text, size=400, overlap=100)
        assert len(chunks) == 4
        assert [len(c) for c in chunks] == [400, 400, 400, 100]
        # stride 300: offsets 0, 300, 600, 900
        numbered = "".join(str(i % 10) for i in range(1000))
        chunks = chunk_text(numbered, 400, 100)
        assert chunks[1][0] == numbered[300]
        assert chunks[3] == numbered[900:]

    def test_overlap_bounds(self):
        with pytest.raises(ValueError):
            chunk_text("abc", 10, 10)


class TestIngest:
    def test_corpus_chunks(self, corpus, backend):
        index = ingest(corpus, backend, chunk_size=400, overlap=100)
        assert len(index) == 4  # each doc is shorter than one chunk
        assert index.vectors.shape == (4, 64)
        assert sorted(c.position[0] for c in index.chunks) == ["af.txt", "dm.txt", "htn.txt", "misc.txt"]

    def test_empty_dir_warns(self, tmp_path, backend, caplog):
        empty = tmp_path / "nothing"
        empty.mkdir()
        with caplog.at_level("WARNING"):
            index = ingest(empty, backend)
        assert len(index) == 0
        assert "empty index" in caplog.text

    def test_reingest_identical(self, corpus, backend):
        a = ingest(corpus, backend)
        b = ingest(corpus, backend)
        assert [c.id for c in a.chunks] == [c.id for c in b.chunks]
        assert np.array_equal(a.vectors, b.vectors)


class TestRetrieve:
    def test_exact_match_scores_one(self, corpus, backend):
        index = ingest(corpus, backend)
        target = index.chunks[0].text
        items = retrieve(index, target, k=10)
        assert items[0].chunk.id == index.chunks[0].id
        assert items[0].retrieval_score == pytest.approx(1.0, abs=1e-9)

    def test_truncation_floor(self, corpus, backend):
        index = ingest(corpus, backend)
        assert len(retrieve(index, "anything", k=10)) == 4

    def test_scores_non_increasing(self, corpus, backend):
        index = ingest(corpus, backend)
        items = retrieve(index, "hypertension stroke anticoagulant", k=10)
        scores = [i.retrieval_score for i in items]
        assert scores == sorted(scores, reverse=True)

    def test_default_k_is_ten(self):
        import inspect

        sig = inspect.signature(retrieve)
        assert sig.parameters["k"].default == 10


class TestRerank:
    def test_hand_computed_jaccard(self):
        q = "hypertension stroke risk"
        a = DocumentChunk("a", "c", "stroke risk rises sharply", ("a", 0))
        b = DocumentChunk("b", "c", "tomato gardening tips", ("b", 0))
        items = [
            KnowledgeItem(b, retrieval_score=0.9),
            KnowledgeItem(a, retrieval_score=0.1),
        ]
        ranked = rerank(items, q)
        assert [i.chunk.id for i in ranked] == ["a", "b"]
        # |{stroke, risk}| / |{hypertension, stroke, risk, rises, sharply}| = 2/5
        assert ranked[0].rerank_score == pytest.approx(2 / 5)
        assert ranked[1].rerank_score == 0.0

    def test_idempotent_on_sorted(self, corpus, backend):
        index = ingest(corpus, backend)
        items = rerank(retrieve(index, "diabetes statin outcomes", 10), "diabetes statin outcomes")
        again = rerank(items, "diabetes statin outcomes")
        assert [i.chunk.id for i in again] == [i.chunk.id for i in items]

    def test_empty(self):
        assert rerank([], "q") == []


class TestTopK:
    def test_documented(self):
        chunks = [DocumentChunk(str(i), "c", f"text {i}", (str(i), 0)) for i in range(10)]
        items = [KnowledgeItem(c, 1.0) for c in chunks]
        assert [i.chunk.id for i in top_k(items, 3)] == ["0", "1", "2"]
        assert len(top_k(items[:2], 3)) == 2
        assert top_k(items, 0) == []


class TestGather:
    def test_rag_success_shape(self, corpus, backend):
        index = ingest(corpus, backend)
        traces = []
        items = gather(index, [], "hypertension stroke anticoagulant therapy",
                       GatherConfig(), trace_out=traces)
        assert len(items) == 3
        assert all(i.provenance == "rag" for i in items)
        [t] = traces
        assert (t.k_retrieve, t.reranked, t.k_keep) == (10, True, 3)
        assert t.fallback is False
        assert t.kept == 3

    def test_empty_index_falls_back_to_tool(self, tmp_path, backend, corpus):
        empty = tmp_path / "empty"
        empty.mkdir()
        index = ingest(empty, backend)
        tool = LocalDirectoryTool(corpus)
        traces = []
        items = gather(index, [tool], "hypertension stroke anticoagulant risk outcomes diabetes",
                       GatherConfig(), trace_out=traces)
        assert 1 <= len(items) <= 3
        assert all(i.provenance == "tool" for i in items)
        assert traces[0].fallback is True
        assert traces[0].tool_name == tool.name

    def test_both_paths_empty(self, tmp_path, backend, caplog):
        empty = tmp_path / "empty"
        empty.mkdir()
        index = ingest(empty, backend)
        with caplog.at_level("INFO"):
            items = gather(index, [], "anything at all")
        assert items == []
        assert "no knowledge" in caplog.text

    def test_low_overlap_triggers_fallback(self, corpus, backend):
        index = ingest(corpus, backend)
        traces = []
        items = gather(index, [LocalDirectoryTool(corpus)], "zzz qqq xxx www",
                       GatherConfig(min_effective_score=0.05), trace_out=traces)
        assert traces[0].fallback is True
        assert items == []  # tool finds no token overlap either

    def test_tool_pref_skips_rag(self, corpus, backend):
        index = ingest(corpus, backend)
        traces = []
        items = gather(index, [LocalDirectoryTool(corpus)], "hypertension stroke risk",
                       source_pref="tool", trace_out=traces)
        assert all(i.provenance == "tool" for i in items)
        assert traces[0].retrieved == 0

    def test_never_exceeds_k_keep(self, corpus, backend):
        index = ingest(corpus, backend)
        for q in ("hypertension", "diabetes outcomes", "anticoagulation risk"):
            assert len(gather(index, [], q)) <= 3


class TestPersistence:
    def test_round_trip_exact(self, corpus, backend, tmp_path):
        index = ingest(corpus, backend)
        path = tmp_path / "index.json"
        save_index(index, path)
        restored = load_index(path, backend)
        assert [c.to_dict() for c in restored.chunks] == [c.to_dict() for c in index.chunks]
        assert np.array_equal(restored.vectors, index.vectors)

    def test_backend_mismatch_rejected(self, corpus, backend, tmp_path):
        index = ingest(corpus, backend)
        path = tmp_path / "index.json"
        save_index(index, path)
        with pytest.raises(ValueError, match="backend"):
            load_index(path, HashedTokenEmbedding(32))


class TestRemoteClients:
    def test_remote_embedding_posts_text(self):
        def handler(request: httpx.Request) -> httpx.Response:
            body = json.loads(request.content)
            assert body == {"texts": ["hello world"]}
            assert request.headers["authorization"] == "Bearer sekrit"
            return httpx.Response(200, json={"vectors": [[1.0, 2.0, 3.0]]})

        client = httpx.Client(transport=httpx.MockTransport(handler))
        backend = RemoteEmbeddingBackend(url="http://embed.test/v1", api_key="sekrit", client=client)
        vec = backend.embed("hello world")
        assert vec.tolist() == [1.0, 2.0, 3.0]
        assert backend.dimension == 3

    def test_http_tool_source(self):
        def handler(request: httpx.Request) -> httpx.Response:
            assert request.url.params["query"] == "af stroke"
            assert request.url.params["k"] == "3"
            return httpx.Response(200, json={"documents": [
                {"id": "pmid1", "text": "af increases stroke"},
                {"id": "pmid2", "text": "warfarin lowers risk"},
            ]})

        client = httpx.Client(transport=httpx.MockTransport(handler))
        tool = HttpToolSource("http://tool.test/search", client=client)
        chunks = tool.fetch("af stroke", 3)
        assert [c.id for c in chunks] == ["tool:pmid1", "tool:pmid2"]

    def test_remote_requires_url(self, monkeypatch):
        monkeypatch.delenv("CONFLOOP_EMBED_URL", raising=False)
        with pytest.raises(ValueError, match="CONFLOOP_EMBED_URL"):
            RemoteEmbeddingBackend()


def test_hashed_embedding_deterministic():
    a = HashedTokenEmbedding(32).embed("Stroke risk, stroke RISK!")
    b = HashedTokenEmbedding(32).embed("stroke risk stroke risk")
    assert np.array_equal(a, b)
    assert a.sum() == 4
