"""HTTP chat/embedding clients against a stubbed transport."""

import json

import httpx
import numpy as np
import pytest

from gradeopt.embeddings import HttpEmbeddingProvider, embed_texts_cached
from gradeopt.errors import BackendError
from gradeopt.grading import HttpChatBackend


class StubResponse:
    def __init__(self, payload, status=200):
        self._payload = payload
        self.status_code = status

    def raise_for_status(self):
        if self.status_code >= 400:
            raise httpx.HTTPStatusError("boom", request=None, response=None)

    def json(self):
        return self._payload


def test_chat_backend_success_and_auth_header(monkeypatch):
    seen = {}

    def fake_post(url, json=None, headers=None, timeout=None):
        seen["url"] = url
        seen["json"] = json
        seen["headers"] = headers
        return StubResponse(
            {"choices": [{"message": {"content": "looks fine\nSCORE: 1"}}]}
        )

    monkeypatch.setattr(httpx, "post", fake_post)
    monkeypatch.setenv("TEST_KEY_ENV", "secret-key")
    backend = HttpChatBackend(
        base_url="https://api.example.com/v1/",
        model="grader-model",
        temperature=0.2,
        api_key_env="TEST_KEY_ENV",
    )
    out = backend.complete("prompt text")
    assert out.endswith("SCORE: 1")
    assert seen["url"] == "https://api.example.com/v1/chat/completions"
    assert seen["headers"]["Authorization"] == "Bearer secret-key"
    assert seen["json"]["model"] == "grader-model"
    assert seen["json"]["temperature"] == 0.2
    assert backend.calls == 1


def test_chat_backend_retries_then_fails(monkeypatch):
    calls = {"n": 0}

    def flaky_post(url, **kwargs):
        calls["n"] += 1
        raise httpx.ConnectError("no route")

    monkeypatch.setattr(httpx, "post", flaky_post)
    backend = HttpChatBackend(
        base_url="https://api.example.com/v1", model="m", max_retries=3
    )
    with pytest.raises(BackendError):
        backend.complete("p")
    assert calls["n"] == 3


def test_chat_backend_recovers_after_transient_error(monkeypatch):
    calls = {"n": 0}

    def post(url, **kwargs):
        calls["n"] += 1
        if calls["n"] == 1:
            return StubResponse({}, status=500)
        return StubResponse({"choices": [{"message": {"content": "SCORE: 0"}}]})

    monkeypatch.setattr(httpx, "post", post)
    backend = HttpChatBackend(base_url="https://x", model="m", max_retries=3)
    assert backend.complete("p") == "SCORE: 0"
    assert calls["n"] == 2


def test_embedding_provider_normalizes_via_cache_layer(monkeypatch):
    def post(url, json=None, headers=None, timeout=None):
        assert url.endswith("/embeddings")
        vectors = [[3.0, 4.0]] * len(json["input"])
        return StubResponse({"data": [{"embedding": v} for v in vectors]})

    monkeypatch.setattr(httpx, "post", post)
    provider = HttpEmbeddingProvider(
        base_url="https://api.example.com/v1", model="embed-model", dim=2
    )
    vec = embed_texts_cached(provider, ["hello"])[0]
    assert np.allclose(vec, [0.6, 0.8])
    assert np.linalg.norm(vec) == pytest.approx(1.0)


def test_embedding_provider_propagates_failure(monkeypatch):
    def post(url, **kwargs):
        raise httpx.ReadTimeout("slow")

    monkeypatch.setattr(httpx, "post", post)
    provider = HttpEmbeddingProvider(
        base_url="https://x", model="m", dim=4, max_retries=2
    )
    with pytest.raises(BackendError):
        provider.embed_texts(["a"])
