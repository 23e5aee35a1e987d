"""
Rewriter client for OpenAI-compatible chat-completions endpoints.

Every response is recorded verbatim in a cache directory keyed by the
SHA-256 of the canonical request, so pair construction can be replayed
offline.
"""
import logging
import os
from typing import Any, Dict, Optional

import backoff
import requests

from errors import CacheMiss, ConfigError, NetworkError
from utils.file_utils import ensure_directory_exists, sha256_bytes
from utils.json_utils import dumps_canonical, load_json_file, save_json_file

logger = logging.getLogger(__name__)


class _TransientError(Exception):
    """Failure worth retrying (connection problems, 429, 5xx)."""


class RewriterClient:
    """Client for an OpenAI-compatible chat-completions API."""

    CHAT_ENDPOINT = "/chat/completions"
    TRANSIENT_STATUS = {408, 425, 429, 500, 502, 503, 504}

    def __init__(
        self,
        base_url: str,
        model: str,
        api_key_env: str = "OPENAI_API_KEY",
        cache_dir: str = "rewriter_cache",
        offline: bool = False,
        max_retries: int = 5,
        backoff_factor: float = 1.0,
        timeout: float = 60.0,
    ):
        """
        Initialize the rewriter client.

        Retry schedule: up to ``max_retries`` attempts in total, waiting
        ``backoff_factor * 2**n`` seconds after the n-th failure (n from 0),
        without jitter.

        Args:
            base_url: API base URL (e.g. https://api.openai.com/v1)
            model: Model name sent with every request
            api_key_env: Name of the environment variable holding the key
            cache_dir: Directory for recorded responses
            offline: Serve from cache only; a miss raises CacheMiss
            max_retries: Total attempts per request
            backoff_factor: Base wait in seconds
            timeout: Per-request timeout in seconds
        """
        if not base_url or not model:
            raise ConfigError("external rewriter requires an endpoint and a model name")
        self.base_url = base_url.rstrip('/')
        self.model = model
        self.api_key_env = api_key_env
        self.cache_dir = cache_dir
        self.offline = offline
        self.max_retries = max_retries
        self.backoff_factor = backoff_factor
        self.timeout = timeout

    @property
    def headers(self) -> Dict[str, str]:
        api_key = os.getenv(self.api_key_env)
        if not api_key:
            raise ConfigError(f"rewriter credential variable {self.api_key_env} is not set")
        return {
            "Authorization": f"Bearer {api_key}",
            "Content-Type": "application/json"
        }

    def build_payload(self, prompt: str) -> Dict[str, Any]:
        return {
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": 0,
        }

    @staticmethod
    def request_key(payload: Dict[str, Any]) -> str:
        return sha256_bytes(dumps_canonical(payload).encode('utf-8'))

    def cache_path(self, key: str) -> str:
        return os.path.join(self.cache_dir, f"{key}.json")

    def lookup(self, payload: Dict[str, Any]) -> Optional[str]:
        """Cached response text for a request, or None."""
        path = self.cache_path(self.request_key(payload))
        if not os.path.exists(path):
            return None
        return load_json_file(path)["response"]

    def complete(self, prompt: str) -> str:
        """
        Send a single-message chat completion and return the reply text.

        Args:
            prompt: Full user message

        Returns:
            Response text, verbatim

        Raises:
            CacheMiss: Offline mode without a recorded response
            NetworkError: Retries exhausted or a non-retryable HTTP error
            ConfigError: Credential variable missing
        """
        payload = self.build_payload(prompt)
        key = self.request_key(payload)

        cached = self.lookup(payload)
        if cached is not None:
            logger.debug(f"[REWRITE] Cache hit {key[:12]}")
            return cached
        if self.offline:
            raise CacheMiss(f"no cached rewriter response for request {key[:12]} (offline mode)")

        send = backoff.on_exception(
            backoff.expo,
            _TransientError,
            max_tries=self.max_retries,
            factor=self.backoff_factor,
            jitter=None,
            on_backoff=self._log_backoff,
        )(self._post)
        try:
            text = send(payload)
        except _TransientError as e:
            raise NetworkError(f"rewriter unreachable after {self.max_retries} attempts: {e}") from e

        ensure_directory_exists(self.cache_dir)
        save_json_file(self.cache_path(key), {"key": key, "request": payload, "response": text})
        logger.info(f"[REWRITE] Recorded response {key[:12]} ({len(text)} chars)")
        return text

    def _post(self, payload: Dict[str, Any]) -> str:
        try:
            response = requests.post(
                f"{self.base_url}{self.CHAT_ENDPOINT}",
                headers=self.headers,
                json=payload,
                timeout=self.timeout,
            )
        except (requests.ConnectionError, requests.Timeout) as e:
            raise _TransientError(str(e)) from e

        if response.status_code in self.TRANSIENT_STATUS:
            raise _TransientError(f"HTTP {response.status_code}: {response.text[:200]}")
        if response.status_code >= 400:
            raise NetworkError(f"rewriter rejected request: HTTP {response.status_code}: {response.text[:200]}")

        try:
            result = response.json()
            content = result["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as e:
            raise NetworkError(f"malformed chat-completions response: {e}") from e
        return content if content is not None else ""

    @staticmethod
    def _log_backoff(details: Dict[str, Any]) -> None:
        logger.warning(
            f"[REWRITE] Transient failure (attempt {details['tries']}), "
            f"retrying in {details['wait']:.1f}s: {details.get('exception')}"
        )
